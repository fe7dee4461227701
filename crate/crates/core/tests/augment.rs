use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use unitac::augment::{
    build_parallel_corpus, corpus_stats, read_corpus_dir, render_all_accents, write_corpus_dir, AugmentStrategy,
};
use unitac::corpus::{sample_sentences, Sentence};
use unitac::experiment::{World, WorldConfig};
use unitac::s2u::KMeansConfig;

struct Fixture {
    world: World,
    sentences: Vec<Sentence>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let config = WorldConfig {
            len_range: (4, 10),
            kmeans: KMeansConfig {
                k: 39,
                ..KMeansConfig::default()
            },
            codebook_sentences: 150,
            ..WorldConfig::default()
        };
        let probe = unitac::corpus::PhonemeInventory::generate(40, 3, 0).unwrap();
        let sentences = sample_sentences(6500, (4, 10), &probe, 17).unwrap();
        let world = World::build(&config, &sentences, 0).unwrap();
        Fixture { world, sentences }
    })
}

#[test]
fn overlapped_budget_covers_every_accent_with_shared_targets() {
    let f = fixture();
    let ctx = f.world.train_context();
    let pairs = build_parallel_corpus(&f.sentences, AugmentStrategy::overlapped(), 6000, &ctx, 1).unwrap();
    assert_eq!(pairs.len(), 6000);
    let mut by_sentence: BTreeMap<u64, Vec<_>> = BTreeMap::new();
    for p in &pairs {
        by_sentence.entry(p.meta.sentence_id).or_default().push(p);
    }
    assert_eq!(by_sentence.len(), 1000);
    for group in by_sentence.values() {
        assert_eq!(group.len(), 6);
        let accents: BTreeSet<u32> = group.iter().map(|p| p.meta.accent_id).collect();
        assert_eq!(accents.len(), 6);
        assert!(group.iter().all(|p| p.target == group[0].target));
        assert!(group[0].target.reduced);
    }
    let noise = f.world.config.noise;
    for p in &pairs {
        assert!(noise.inference.0 <= p.meta.inference_noise && p.meta.inference_noise < noise.inference.1);
        assert!(noise.duration.0 <= p.meta.duration_noise && p.meta.duration_noise < noise.duration.1);
    }
}

#[test]
fn non_overlapped_budget_spreads_accents_evenly() {
    let f = fixture();
    let ctx = f.world.train_context();
    let pairs = build_parallel_corpus(&f.sentences, AugmentStrategy::NonOverlapped, 6000, &ctx, 2).unwrap();
    let stats = corpus_stats(&pairs);
    assert_eq!(stats.pairs, 6000);
    assert_eq!(stats.unique_sentences, 6000);
    assert_eq!(stats.pairs_per_accent.len(), 6);
    for (&accent, &n) in &stats.pairs_per_accent {
        assert!((900..=1100).contains(&n), "accent {accent}: {n}");
    }
    let speakers: BTreeSet<u32> = pairs.iter().map(|p| p.meta.speaker_id).collect();
    assert_eq!(speakers.len(), f.world.voices.train_speakers.len());
}

#[test]
fn one_accent_per_sentence_equals_non_overlapped() {
    let f = fixture();
    let ctx = f.world.train_context();
    let one = AugmentStrategy::Overlapped { accents_per_sentence: 1 };
    let a = build_parallel_corpus(&f.sentences[..300], one, 200, &ctx, 3).unwrap();
    let b = build_parallel_corpus(&f.sentences[..300], AugmentStrategy::NonOverlapped, 200, &ctx, 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn corpus_is_deterministic_under_seed() {
    let f = fixture();
    let ctx = f.world.train_context();
    let s = &f.sentences[..100];
    let a = build_parallel_corpus(s, AugmentStrategy::overlapped(), 120, &ctx, 4).unwrap();
    let b = build_parallel_corpus(s, AugmentStrategy::overlapped(), 120, &ctx, 4).unwrap();
    let c = build_parallel_corpus(s, AugmentStrategy::overlapped(), 120, &ctx, 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn infeasible_budgets_are_config_errors() {
    let f = fixture();
    let ctx = f.world.train_context();
    let s = &f.sentences[..10];
    for (strategy, budget) in [
        (AugmentStrategy::overlapped(), 61),
        (AugmentStrategy::NonOverlapped, 11),
        (AugmentStrategy::Overlapped { accents_per_sentence: 7 }, 7),
        (AugmentStrategy::NonOverlapped, 0),
    ] {
        assert!(matches!(
            build_parallel_corpus(s, strategy, budget, &ctx, 0),
            Err(unitac::Error::Config(_))
        ));
    }
}

#[test]
fn corpus_directory_round_trip() {
    let f = fixture();
    let ctx = f.world.test_context();
    let pairs = render_all_accents(&f.sentences[..3], &ctx, 6).unwrap();
    assert_eq!(pairs.len(), 18);
    let dir = tempfile::tempdir().unwrap();
    write_corpus_dir(dir.path(), &pairs).unwrap();
    let back = read_corpus_dir(dir.path()).unwrap();
    assert_eq!(back.len(), pairs.len());
    for (a, b) in pairs.iter().zip(&back) {
        assert_eq!(a.target, b.target);
        assert_eq!(a.meta, b.meta);
        assert_eq!(a.input.len(), b.input.len());
        let max_err = a
            .input
            .as_slice()
            .iter()
            .zip(b.input.as_slice())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-5);
    }
    let again = tempfile::tempdir().unwrap();
    write_corpus_dir(again.path(), &back).unwrap();
    for name in ["targets.txt", "index.tsv", "features/000000.uaft"] {
        assert_eq!(
            std::fs::read(dir.path().join(name)).unwrap(),
            std::fs::read(again.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn strategy_names_round_trip() {
    for s in [
        AugmentStrategy::NonOverlapped,
        AugmentStrategy::overlapped(),
        AugmentStrategy::Overlapped { accents_per_sentence: 3 },
    ] {
        assert_eq!(s.to_string().parse::<AugmentStrategy>().unwrap(), s);
    }
    assert!("both".parse::<AugmentStrategy>().is_err());
}
