use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unitac::augment::{PairMeta, ParallelPair};
use unitac::pc::{
    beam_decode, decode_greedy, pretrain_decoder_lm, rescore, train, DecodeConfig, PcConfig, PcModel, PcScorer,
    TrainConfig,
};
use unitac::s2u::UnitSequence;
use unitac::synth::FeatureSequence;
use unitac_nn::Tape;

fn tiny_config() -> PcConfig {
    PcConfig {
        feature_dim: 4,
        k: 6,
        model_dim: 16,
        heads: 2,
        ffn_dim: 32,
        enc_layers: 1,
        dec_layers: 1,
        rel_window: 4,
        stack: 2,
        abs_positions: true,
        init_seed: 3,
    }
}

fn random_features(frames: usize, dim: usize, rng: &mut impl Rng) -> FeatureSequence {
    FeatureSequence::new(dim, (0..frames * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn pair(input: FeatureSequence, units: Vec<usize>) -> ParallelPair {
    ParallelPair {
        input,
        target: UnitSequence { units, reduced: true },
        meta: PairMeta::default(),
    }
}

fn toy_corpus(n: usize, seed: u64) -> Vec<ParallelPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(2..5);
            let units: Vec<usize> = (0..len).map(|_| rng.random_range(0..6)).collect();
            pair(random_features(3 * len, 4, &mut rng), units)
        })
        .collect()
}

#[test]
fn single_pair_is_memorized() {
    let mut model = PcModel::new(tiny_config()).unwrap();
    let data = toy_corpus(1, 1);
    let cfg = TrainConfig {
        peak_lr: 3e-3,
        total_updates: 400,
        micro_batch: 1,
        accumulation: 1,
        eval_interval: 400,
        ..TrainConfig::default()
    };
    let out = train(&mut model, &data, &[], &cfg).unwrap();
    let last = out.log.last().unwrap().loss;
    assert!(last < 0.01, "final loss {last}");
    let hyp = model.decode_greedy(&data[0].input).unwrap();
    assert_eq!(hyp.units, data[0].target.units);
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let mut model = PcModel::new(tiny_config()).unwrap();
    let before = model.store.clone();
    let cfg = TrainConfig {
        peak_lr: 0.0,
        total_updates: 5,
        micro_batch: 2,
        accumulation: 2,
        ..TrainConfig::default()
    };
    train(&mut model, &toy_corpus(8, 2), &[], &cfg).unwrap();
    for ((_, name, a), (_, _, b)) in before.iter().zip(model.store.iter()) {
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "{name} changed");
    }
}

#[test]
fn training_is_deterministic_and_tracks_best_validation() {
    let data = toy_corpus(12, 4);
    let val = toy_corpus(3, 5);
    let cfg = TrainConfig {
        peak_lr: 2e-3,
        total_updates: 20,
        micro_batch: 2,
        accumulation: 2,
        eval_interval: 5,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = PcModel::new(tiny_config()).unwrap();
        let out = train(&mut m, &data, &val, &cfg).unwrap();
        (m, out)
    };
    let (m1, o1) = run();
    let (m2, o2) = run();
    assert_eq!(o1.log, o2.log);
    let vals: Vec<f64> = o1.log.iter().filter_map(|r| r.val_ppl).collect();
    assert_eq!(vals.len(), 4);
    let best = vals.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(o1.best_val_ppl, Some(best));
    let restored = unitac::eval::perplexity(&m1, &val).unwrap();
    assert!((restored - best).abs() < 1e-9);
    for ((_, _, a), (_, _, b)) in m1.store.iter().zip(m2.store.iter()) {
        assert_eq!(a.data(), b.data());
    }
    // linear decay hits zero at the last update
    assert!(o1.log.last().unwrap().lr.abs() < 2e-3 / 19.0);
}

#[test]
fn decoding_agrees_with_teacher_forcing() {
    let model = PcModel::new(tiny_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let f = random_features(rng.random_range(3..12), 4, &mut rng);
        let scorer = PcScorer::new(&model, &f).unwrap();
        let greedy = decode_greedy(&scorer, 8);
        let cfg = DecodeConfig {
            beam: 1,
            length_norm: false,
            max_len: 8,
        };
        let beam1 = beam_decode(&scorer, &cfg).unwrap();
        assert_eq!(beam1[0].units, greedy.units);
        assert_eq!(beam1[0].score, greedy.score);
        for h in model.beam_decode(&f, 4, false).unwrap() {
            let tf = model.token_log_probs(&f, &h.units).unwrap();
            let tf_score: f64 = if h.finished {
                tf.iter().sum()
            } else {
                tf[..h.units.len()].iter().sum()
            };
            assert!((tf_score - h.score).abs() < 1e-9);
            assert!((rescore(&scorer, &h.units, h.finished) - h.score).abs() < 1e-9);
        }
    }
}

#[test]
fn decoder_is_causal() {
    let model = PcModel::new(tiny_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let f = random_features(7, 4, &mut rng);
    let v = model.vocab();
    let logits = |tokens: &[usize]| {
        let mut tape = Tape::new(&model.store);
        let mem = model.encode(&mut tape, &f).unwrap();
        let l = model.decode_logits(&mut tape, Some(mem), tokens);
        tape.value(l).clone()
    };
    let a = logits(&[v.bos(), 1, 2, 3]);
    let b = logits(&[v.bos(), 1, 5, 0]);
    assert_eq!(a.row(0), b.row(0));
    assert_eq!(a.row(1), b.row(1));
    assert_ne!(a.row(2), b.row(2));
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.uack");
    let mut model = PcModel::new(tiny_config()).unwrap();
    let cfg = TrainConfig {
        total_updates: 3,
        micro_batch: 2,
        accumulation: 1,
        ..TrainConfig::default()
    };
    let out = train(&mut model, &toy_corpus(4, 11), &[], &cfg).unwrap();
    model.save(&path, Some(&out.optimizer)).unwrap();
    let (loaded, adam) = PcModel::load(&path).unwrap();
    assert!(adam.is_some());
    assert_eq!(loaded.config, model.config);
    assert_eq!(loaded.max_decode_len, model.max_decode_len);
    let f = toy_corpus(1, 12).remove(0).input;
    assert_eq!(loaded.token_log_probs(&f, &[1, 2]).unwrap(), model.token_log_probs(&f, &[1, 2]).unwrap());
    let path2 = dir.path().join("again.uack");
    loaded.save(&path2, adam.as_ref()).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.uack");
    PcModel::new(tiny_config()).unwrap().save(&path, None).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(PcModel::load(&path).is_err());
}

#[test]
fn decoder_lm_weights_transfer_except_cross_attention() {
    let cfg = tiny_config();
    let corpus: Vec<UnitSequence> = toy_corpus(6, 13).into_iter().map(|p| p.target).collect();
    let tc = TrainConfig {
        total_updates: 4,
        micro_batch: 2,
        accumulation: 1,
        ..TrainConfig::default()
    };
    let (lm, log) = pretrain_decoder_lm(&cfg, &corpus, &tc).unwrap();
    assert_eq!(log.len(), 4);
    let mut model = PcModel::new(PcConfig {
        init_seed: 99,
        ..cfg
    })
    .unwrap();
    let fresh = model.clone();
    let copied = model.load_decoder_lm(&lm).unwrap();
    assert!(copied > 0);
    for (_, name, t) in model.store.iter() {
        let from_lm = lm.store.get(lm.store.id(name).unwrap());
        let from_fresh = fresh.store.get(fresh.store.id(name).unwrap());
        let expect = if name.starts_with("dec.") && !name.contains(".cross_attn.") && !name.contains(".norm2.") {
            from_lm
        } else {
            from_fresh
        };
        assert_eq!(t.data(), expect.data(), "{name}");
    }
}

#[test]
fn out_of_vocabulary_targets_are_rejected() {
    let mut model = PcModel::new(tiny_config()).unwrap();
    let mut data = toy_corpus(2, 14);
    data[1].target.units.push(6);
    assert!(matches!(
        train(&mut model, &data, &[], &TrainConfig::default()),
        Err(unitac::Error::Data(_))
    ));
}
