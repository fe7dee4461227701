use unitac::augment::{PairMeta, ParallelPair};
use unitac::eval::{perplexity, unigram_perplexity, TokenScorer};
use unitac::pc::{PcConfig, PcModel};
use unitac::s2u::{UnitId, UnitSequence};
use unitac::synth::FeatureSequence;

/// Scores every target position with a fixed list of probabilities.
struct Fixed(Vec<f64>);

impl TokenScorer for Fixed {
    fn token_log_probs(&self, _: &FeatureSequence, units: &[UnitId]) -> unitac::Result<Vec<f64>> {
        assert_eq!(units.len() + 1, self.0.len());
        Ok(self.0.iter().map(|p| p.ln()).collect())
    }
}

/// Puts all mass on the true next token.
struct Oracle;

impl TokenScorer for Oracle {
    fn token_log_probs(&self, _: &FeatureSequence, units: &[UnitId]) -> unitac::Result<Vec<f64>> {
        Ok(vec![0.0; units.len() + 1])
    }
}

fn pair(units: Vec<usize>, frames: usize) -> ParallelPair {
    ParallelPair {
        input: FeatureSequence::new(2, (0..2 * frames).map(|i| (i as f64).sin()).collect()).unwrap(),
        target: UnitSequence { units, reduced: true },
        meta: PairMeta::default(),
    }
}

#[test]
fn hand_computed_perplexities() {
    let p = [pair(vec![0, 1], 3)];
    let ppl = perplexity(&Fixed(vec![0.5, 0.25, 0.25]), &p).unwrap();
    assert!((ppl - 32f64.powf(1.0 / 3.0)).abs() < 1e-9);
    let ppl = perplexity(&Fixed(vec![0.5, 0.25, 0.125]), &p).unwrap();
    assert!((ppl - 4.0).abs() < 1e-9);
}

#[test]
fn oracle_perplexity_is_one() {
    let pairs = [pair(vec![0, 1, 2], 4), pair(vec![3], 2)];
    assert_eq!(perplexity(&Oracle, &pairs).unwrap(), 1.0);
}

#[test]
fn uniform_model_perplexity_is_vocabulary_size() {
    let cfg = PcConfig {
        feature_dim: 2,
        k: 10,
        model_dim: 8,
        heads: 2,
        ffn_dim: 16,
        enc_layers: 1,
        dec_layers: 1,
        ..PcConfig::default()
    };
    let mut model = PcModel::new(cfg).unwrap();
    for name in ["dec.head.w", "dec.head.b"] {
        let id = model.store.id(name).unwrap();
        model.store.get_mut(id).data_mut().fill(0.0);
    }
    let pairs = [pair(vec![0, 5, 9], 5), pair(vec![2, 3], 3)];
    let ppl = perplexity(&model, &pairs).unwrap();
    assert!((ppl - 13.0).abs() < 1e-12 * 13.0, "{ppl}");
}

#[test]
fn perplexity_pools_tokens_across_pairs() {
    let a = pair(vec![1], 2);
    let b = pair(vec![1, 2, 3], 2);
    struct ByLength;
    impl TokenScorer for ByLength {
        fn token_log_probs(&self, _: &FeatureSequence, units: &[UnitId]) -> unitac::Result<Vec<f64>> {
            let p: f64 = if units.len() == 1 { 0.5 } else { 0.25 };
            Ok(vec![p.ln(); units.len() + 1])
        }
    }
    // 2 tokens at 1/2, 4 tokens at 1/4: exp((2 ln 2 + 4 ln 4) / 6) = 2^(5/3)
    let ppl = perplexity(&ByLength, &[a, b]).unwrap();
    assert!((ppl - 2f64.powf(5.0 / 3.0)).abs() < 1e-9);
}

#[test]
fn perplexity_of_nothing_is_a_data_error() {
    assert!(matches!(perplexity(&Oracle, &[]), Err(unitac::Error::Data(_))));
    assert!(unigram_perplexity(&[]).is_err());
}

#[test]
fn unigram_perplexity_of_constant_targets() {
    // tokens: 3 x unit 4, 3 x EOS -> two equiprobable symbols
    let t = vec![UnitSequence::raw(vec![4]); 3];
    assert!((unigram_perplexity(&t).unwrap() - 2.0).abs() < 1e-12);
}
