use std::collections::BTreeSet;
use std::path::Path;

use proptest::prelude::*;
use unitac::corpus::{sample_sentences, split_train_val, Manifest, PhonemeInventory, Role, Sentence};
use unitac::eval::{levenshtein, unit_error_rate};
use unitac::s2u::{quantize, reduce, Codebook, UnitSequence};
use unitac::synth::FeatureSequence;
use unitac::u2s::{speaker_embed, synthesize, SpeakerEmbedding, UnitDecoder};

fn units(max_unit: usize, max_len: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..max_unit, 0..max_len)
}

proptest! {
    #[test]
    fn reduce_is_idempotent_run_collapse(u in units(5, 40)) {
        let once = reduce(&UnitSequence::raw(u.clone()));
        prop_assert!(once.reduced);
        prop_assert!(once.units.windows(2).all(|w| w[0] != w[1]));
        prop_assert_eq!(&reduce(&once), &once);
        let mut runs = u.clone();
        runs.dedup();
        prop_assert_eq!(once.units, runs);
    }

    #[test]
    fn levenshtein_is_a_metric(a in units(4, 12), b in units(4, 12), c in units(4, 12)) {
        let ab = levenshtein(&a, &b);
        prop_assert_eq!(ab, levenshtein(&b, &a));
        prop_assert!(ab <= levenshtein(&a, &c) + levenshtein(&c, &b));
        prop_assert_eq!(ab == 0, a == b);
        prop_assert!(ab <= a.len().max(b.len()));
        prop_assert!(ab >= a.len().abs_diff(b.len()));
    }

    #[test]
    fn uer_is_zero_only_on_exact_match(h in units(4, 12), r in units(4, 12)) {
        prop_assume!(!r.is_empty());
        let e = unit_error_rate(&UnitSequence::raw(h.clone()), &UnitSequence::raw(r.clone())).unwrap();
        prop_assert!(e >= 0.0);
        prop_assert_eq!(e == 0.0, h == r);
    }

    #[test]
    fn split_is_a_partition(n in 2usize..300, tp in 1usize..20, vp in 1usize..3, seed in any::<u64>()) {
        prop_assume!(n >= tp + vp);
        let inv = PhonemeInventory::generate(8, 2, 1).unwrap();
        let s = sample_sentences(n, (1, 4), &inv, seed).unwrap();
        let (train, val) = split_train_val(&s, (tp, vp), seed).unwrap();
        prop_assert_eq!(val.len(), n * vp / (tp + vp));
        prop_assert_eq!(train.len() + val.len(), n);
        let ids: BTreeSet<u64> = train.iter().chain(&val).map(|s| s.id).collect();
        prop_assert_eq!(ids.len(), n);
        prop_assert!(train.windows(2).all(|w| w[0].id < w[1].id));
    }

    #[test]
    fn manifest_text_round_trip(n in 1usize..30, seed in any::<u64>()) {
        let inv = PhonemeInventory::generate(12, 2, seed).unwrap();
        let s = sample_sentences(n, (1, 6), &inv, seed).unwrap();
        let cut = n / 2;
        let m = Manifest::from_roles([(Role::Train, &s[..cut]), (Role::Test, &s[cut..])]).unwrap();
        let back = Manifest::parse(&m.to_text(), Path::new("m.tsv")).unwrap();
        prop_assert_eq!(&back, &m);
        let test: Vec<Sentence> = back.sentences(Role::Test);
        prop_assert_eq!(test.as_slice(), &s[cut..]);
        prop_assert!(s.iter().all(|x| x.phonemes.iter().all(|&p| !inv.is_filler(p))));
    }

    #[test]
    fn feature_file_round_trip(frames in prop::collection::vec(-1e3f64..1e3, 1..60)) {
        let dim = 3;
        let n = frames.len() / dim * dim;
        prop_assume!(n > 0);
        let f = FeatureSequence::new(dim, frames[..n].to_vec()).unwrap();
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        let back = FeatureSequence::read_from(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), f.len());
        for (a, b) in f.as_slice().iter().zip(back.as_slice()) {
            prop_assert_eq!(*b, *a as f32 as f64);
        }
    }

    #[test]
    fn synthesis_round_trips_through_quantization(
        seq in prop::collection::vec(0usize..6, 1..20),
        offset in prop::collection::vec(-1.0f64..1.0, 2),
        durations in prop::collection::vec(1usize..4, 6),
    ) {
        // centroids on a grid with spacing 4; embeddings stay below half of it
        let centroids: Vec<f64> = (0..6).flat_map(|k| [4.0 * (k % 3) as f64, 4.0 * (k / 3) as f64]).collect();
        let cb = Codebook::new(2, centroids).unwrap();
        let norm = (offset[0] * offset[0] + offset[1] * offset[1]).sqrt();
        prop_assume!(norm > 0.0 && norm < 0.5 * cb.min_centroid_distance());
        let mut dec = UnitDecoder::from_codebook(&cb, 1).unwrap();
        dec.unit_durations = durations;
        let mut u = seq;
        u.dedup();
        let u = UnitSequence { units: u, reduced: true };
        let e = SpeakerEmbedding(offset);
        let f = synthesize(&u, &e, &dec).unwrap();
        prop_assert_eq!(reduce(&quantize(&f, &cb).unwrap()), u);
        let back = speaker_embed(&f, &cb).unwrap();
        for (a, b) in back.0.iter().zip(&e.0) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
