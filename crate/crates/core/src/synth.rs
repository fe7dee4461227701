//! Parametric renderer: maps phoneme sentences to feature frames under a
//! speaker offset, a rank-1 accent shift, accent-driven substitutions and
//! fillers, duration scaling, and controllable noise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::corpus::{PhonemeId, PhonemeInventory, Sentence};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"UAFT";
pub const FRAME_PERIOD_MS: u32 = 20;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub sentence_id: u64,
    pub speaker_id: u32,
    pub accent_id: u32,
    pub seed: u64,
}

/// `T x D` row-major frames. `labels`, when present, holds the surface
/// phoneme that emitted each frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    dim: usize,
    frames: Vec<f64>,
    pub labels: Option<Vec<PhonemeId>>,
    pub provenance: Provenance,
}

impl FeatureSequence {
    pub fn new(dim: usize, frames: Vec<f64>) -> Result<Self> {
        if dim == 0 || !frames.len().is_multiple_of(dim) {
            return Err(Error::data(format!("{} values do not form frames of dim {dim}", frames.len())));
        }
        if let Some(x) = frames.iter().find(|x| !x.is_finite()) {
            return Err(Error::data(format!("non-finite feature value {x}")));
        }
        Ok(Self {
            dim,
            frames,
            labels: None,
            provenance: Provenance::default(),
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            frames: Vec::new(),
            labels: None,
            provenance: Provenance::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frames(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.frames.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.frames
    }

    pub(crate) fn push_frame(&mut self, frame: &[f64]) {
        debug_assert_eq!(frame.len(), self.dim);
        self.frames.extend_from_slice(frame);
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        binio::write_matrix(w, FEATURE_MAGIC, self.len(), self.dim, &self.frames)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (_, cols, data) = binio::read_matrix(r, FEATURE_MAGIC)?;
        Self::new(cols.max(1), data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }
}

/// Phoneme prototype vectors: the shared component every voice and accent
/// is rendered around.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    dim: usize,
    rows: Vec<f64>,
}

impl Prototypes {
    pub fn from_rows(dim: usize, rows: Vec<f64>) -> Self {
        assert!(dim > 0 && rows.len().is_multiple_of(dim));
        Self { dim, rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, p: PhonemeId) -> &[f64] {
        &self.rows[p * self.dim..(p + 1) * self.dim]
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..self.len() {
            for b in a + 1..self.len() {
                best = best.min(sq_dist(self.row(a), self.row(b)).sqrt());
            }
        }
        best
    }

    /// Index of the nearest prototype, lowest index on ties.
    pub fn nearest(&self, x: &[f64]) -> PhonemeId {
        let mut best = (0, f64::INFINITY);
        for p in 0..self.len() {
            let d = sq_dist(self.row(p), x);
            if d < best.1 {
                best = (p, d);
            }
        }
        best.0
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

const PROTOTYPE_RETRIES: usize = 10_000;

/// Standard-normal rows, each redrawn until it lies at least `separation`
/// from all earlier rows.
pub fn phoneme_prototypes(
    inventory: &PhonemeInventory,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Prototypes> {
    if separation.is_nan() || separation <= 0.0 {
        return Err(Error::config(format!("separation must be positive, got {separation}")));
    }
    if dim < 2 {
        return Err(Error::config("feature dimension must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sep2 = separation * separation;
    let mut rows: Vec<f64> = Vec::with_capacity(inventory.size() * dim);
    for p in 0..inventory.size() {
        let mut placed = false;
        for _ in 0..PROTOTYPE_RETRIES {
            let cand: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            if rows.chunks_exact(dim).all(|r| sq_dist(r, &cand) >= sep2) {
                rows.extend(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::config(format!(
                "could not place prototype {p} at separation {separation} in dimension {dim}"
            )));
        }
    }
    Ok(Prototypes { dim, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub dim: usize,
    /// Metadata only; frames are indexed, not timed.
    pub frame_period_ms: u32,
    pub base_durations: Vec<usize>,
    pub duration_noise_scale: f64,
    pub inference_noise_scale: f64,
}

impl RenderConfig {
    /// Base durations drawn uniformly from `2..=6` frames per phoneme.
    pub fn new(inventory: &PhonemeInventory, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            dim,
            frame_period_ms: FRAME_PERIOD_MS,
            base_durations: (0..inventory.size()).map(|_| rng.random_range(2..=6)).collect(),
            duration_noise_scale: 0.0,
            inference_noise_scale: 0.0,
        }
    }

    pub fn with_noise(&self, duration_noise_scale: f64, inference_noise_scale: f64) -> Self {
        Self {
            duration_noise_scale,
            inference_noise_scale,
            ..self.clone()
        }
    }

    pub fn validate(&self, inventory: &PhonemeInventory) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::config("feature dimension must be at least 2"));
        }
        if self.base_durations.len() != inventory.size() {
            return Err(Error::config("one base duration per phoneme required"));
        }
        if self.base_durations.contains(&0) {
            return Err(Error::config("base durations must be at least one frame"));
        }
        if !(self.duration_noise_scale >= 0.0 && self.inference_noise_scale >= 0.0) {
            return Err(Error::config("noise scales must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSpec {
    pub id: u32,
    pub offset: Vec<f64>,
}

impl SpeakerSpec {
    pub fn zero(id: u32, dim: usize) -> Self {
        Self {
            id,
            offset: vec![0.0; dim],
        }
    }

    /// Uniform direction, radius uniform in `[0, max_norm]`.
    pub fn random<R: Rng>(id: u32, dim: usize, max_norm: f64, rng: &mut R) -> Self {
        let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let radius = rng.random::<f64>() * max_norm;
        Self {
            id,
            offset: dir.iter().map(|x| x / n * radius).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.offset.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Ranges used to draw random accents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccentParams {
    pub substitution_prob: f64,
    pub duration_range: (f64, f64),
    pub filler_prob: f64,
    /// Norm of the accent direction `v`; `u[p]` is standard normal.
    pub shift_scale: f64,
}

impl Default for AccentParams {
    fn default() -> Self {
        Self {
            substitution_prob: 0.15,
            duration_range: (1.1, 1.6),
            filler_prob: 0.05,
            shift_scale: 0.3,
        }
    }
}

/// Accent as a per-phoneme rank-1 shift `u[p] * v` plus pronunciation
/// substitutions, filler insertions and slower durations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccentSpec {
    pub id: u32,
    pub substitution_prob: f64,
    pub shift_u: Vec<f64>,
    pub shift_v: Vec<f64>,
    pub duration_multiplier: f64,
    pub filler_prob: f64,
}

impl AccentSpec {
    /// Native pronunciation: no shift, no substitutions, no fillers, `τ = 1`.
    pub fn identity(id: u32, inventory_size: usize, dim: usize) -> Self {
        Self {
            id,
            substitution_prob: 0.0,
            shift_u: vec![0.0; inventory_size],
            shift_v: vec![0.0; dim],
            duration_multiplier: 1.0,
            filler_prob: 0.0,
        }
    }

    pub fn random<R: Rng>(id: u32, inventory_size: usize, dim: usize, params: &AccentParams, rng: &mut R) -> Self {
        let shift_u = (0..inventory_size).map(|_| StandardNormal.sample(rng)).collect();
        let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let (lo, hi) = params.duration_range;
        Self {
            id,
            substitution_prob: params.substitution_prob,
            shift_u,
            shift_v: dir.iter().map(|x| x / n * params.shift_scale).collect(),
            duration_multiplier: lo + (hi - lo) * rng.random::<f64>(),
            filler_prob: params.filler_prob,
        }
    }

    pub fn validate(&self, inventory_size: usize, dim: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.substitution_prob) || !(0.0..=1.0).contains(&self.filler_prob) {
            return Err(Error::config(format!("accent {}: probabilities must lie in [0, 1]", self.id)));
        }
        if self.duration_multiplier.is_nan() || self.duration_multiplier <= 0.0 {
            return Err(Error::config(format!("accent {}: duration multiplier must be positive", self.id)));
        }
        if self.shift_u.len() != inventory_size || self.shift_v.len() != dim {
            return Err(Error::config(format!("accent {}: shift factor shapes", self.id)));
        }
        Ok(())
    }

    /// Shift added to every frame of phoneme `p`.
    pub fn shift(&self, p: PhonemeId) -> impl Iterator<Item = f64> + '_ {
        let u = self.shift_u[p];
        self.shift_v.iter().map(move |v| u * v)
    }

    /// The full `inventory x D` shift matrix, `outer(u, v)`.
    pub fn shift_matrix(&self) -> Vec<Vec<f64>> {
        (0..self.shift_u.len()).map(|p| self.shift(p).collect()).collect()
    }
}

fn accent_surface<R: Rng>(
    sentence: &Sentence,
    inventory: &PhonemeInventory,
    accent: &AccentSpec,
    rng: &mut R,
) -> Vec<PhonemeId> {
    let mut out = Vec::with_capacity(sentence.phonemes.len() * 2);
    for &p in &sentence.phonemes {
        let conf = inventory.confusables(p);
        let substitute = rng.random::<f64>() < accent.substitution_prob;
        let surface = if substitute && !conf.is_empty() {
            conf[rng.random_range(0..conf.len())]
        } else {
            p
        };
        out.push(surface);
        if rng.random::<f64>() < accent.filler_prob {
            out.push(inventory.filler());
        }
    }
    out
}

/// Surface phonemes of `sentence` spoken with `accent`.
pub fn apply_accent(
    sentence: &Sentence,
    inventory: &PhonemeInventory,
    accent: &AccentSpec,
    seed: u64,
) -> Vec<PhonemeId> {
    accent_surface(sentence, inventory, accent, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Fixed voice used to produce native targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NativeVoice {
    pub offset: Vec<f64>,
    pub inference_noise_scale: f64,
    pub duration_noise_scale: f64,
}

impl NativeVoice {
    pub fn standard(dim: usize) -> Self {
        Self {
            offset: vec![0.0; dim],
            inference_noise_scale: 0.05,
            duration_noise_scale: 0.0,
        }
    }
}

pub const NATIVE_SPEAKER_ID: u32 = u32::MAX;
pub const NATIVE_ACCENT_ID: u32 = u32::MAX;

/// Seed for the native rendering of a sentence: a pure function of its id.
pub fn native_seed(sentence_id: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = sentence_id.wrapping_add(0x9E37_79B9_7F4A_7C15) ^ 0x6E61_7469_7665_5F5F;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Renderer {
    pub inventory: PhonemeInventory,
    pub prototypes: Prototypes,
    pub native: NativeVoice,
}

impl Renderer {
    pub fn new(inventory: PhonemeInventory, prototypes: Prototypes) -> Result<Self> {
        if prototypes.len() != inventory.size() {
            return Err(Error::config(format!(
                "{} prototypes for {} phonemes",
                prototypes.len(),
                inventory.size()
            )));
        }
        let native = NativeVoice::standard(prototypes.dim());
        Ok(Self {
            inventory,
            prototypes,
            native,
        })
    }

    pub fn dim(&self) -> usize {
        self.prototypes.dim()
    }

    pub fn render(
        &self,
        sentence: &Sentence,
        speaker: &SpeakerSpec,
        accent: &AccentSpec,
        config: &RenderConfig,
        seed: u64,
    ) -> Result<FeatureSequence> {
        config.validate(&self.inventory)?;
        accent.validate(self.inventory.size(), self.dim())?;
        if config.dim != self.dim() || speaker.offset.len() != self.dim() {
            return Err(Error::config("renderer, config and speaker dimensions differ"));
        }
        if let Some(&p) = sentence.phonemes.iter().find(|&&p| p >= self.inventory.size()) {
            return Err(Error::data(format!("phoneme {p} outside inventory")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let surface = accent_surface(sentence, &self.inventory, accent, &mut rng);
        let d = self.dim();
        let mut out = FeatureSequence::empty(d);
        let mut labels = Vec::new();
        let mut frame = vec![0.0; d];
        for &p in &surface {
            let g: f64 = StandardNormal.sample(&mut rng);
            let scaled = config.base_durations[p] as f64 * accent.duration_multiplier * (config.duration_noise_scale * g).exp();
            let n = (scaled.round() as usize).max(1);
            let shift: Vec<f64> = accent.shift(p).collect();
            for _ in 0..n {
                for c in 0..d {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    frame[c] = self.prototypes.row(p)[c] + shift[c] + speaker.offset[c] + config.inference_noise_scale * eps;
                }
                out.push_frame(&frame);
                labels.push(p);
            }
        }
        out.labels = Some(labels);
        out.provenance = Provenance {
            sentence_id: sentence.id,
            speaker_id: speaker.id,
            accent_id: accent.id,
            seed,
        };
        Ok(out)
    }

    /// Canonical native rendering: native voice, identity accent, fixed
    /// noise scales and a seed derived from the sentence id.
    pub fn native_render(&self, sentence: &Sentence, config: &RenderConfig) -> Result<FeatureSequence> {
        let speaker = SpeakerSpec {
            id: NATIVE_SPEAKER_ID,
            offset: self.native.offset.clone(),
        };
        let accent = AccentSpec::identity(NATIVE_ACCENT_ID, self.inventory.size(), self.dim());
        let cfg = config.with_noise(self.native.duration_noise_scale, self.native.inference_noise_scale);
        self.render(sentence, &speaker, &accent, &cfg, native_seed(sentence.id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::sample_sentences;

    fn setup() -> (Renderer, RenderConfig) {
        let inv = PhonemeInventory::generate(40, 3, 1).unwrap();
        let protos = phoneme_prototypes(&inv, 16, 2.0, 5).unwrap();
        let cfg = RenderConfig::new(&inv, 16, 9);
        (Renderer::new(inv, protos).unwrap(), cfg)
    }

    fn sentence(ids: &[usize]) -> Sentence {
        Sentence {
            id: 3,
            phonemes: ids.to_vec(),
        }
    }

    #[test]
    fn two_prototypes_are_separated() {
        let inv = PhonemeInventory::new(2, vec![vec![], vec![]]).unwrap();
        let p = phoneme_prototypes(&inv, 2, 1.0, 0).unwrap();
        assert!(p.min_pairwise_distance() >= 1.0);
    }

    #[test]
    fn prototypes_are_deterministic() {
        let inv = PhonemeInventory::generate(40, 3, 1).unwrap();
        assert_eq!(
            phoneme_prototypes(&inv, 16, 2.0, 5).unwrap(),
            phoneme_prototypes(&inv, 16, 2.0, 5).unwrap()
        );
    }

    #[test]
    fn infeasible_separation_is_config_error() {
        let inv = PhonemeInventory::generate(40, 3, 1).unwrap();
        assert!(matches!(phoneme_prototypes(&inv, 2, 10.0, 5), Err(Error::Config(_))));
        assert!(matches!(phoneme_prototypes(&inv, 2, 0.0, 5), Err(Error::Config(_))));
    }

    #[test]
    fn noisy_samples_classify_to_their_prototype() {
        let (r, _) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 100_000;
        let mut correct = 0;
        for i in 0..n {
            let p = i % r.prototypes.len();
            let x: Vec<f64> = r
                .prototypes
                .row(p)
                .iter()
                .map(|v| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    v + 0.1 * e
                })
                .collect();
            if r.prototypes.nearest(&x) == p {
                correct += 1;
            }
        }
        assert!(correct as f64 / n as f64 >= 0.99);
    }

    #[test]
    fn identity_accent_keeps_sentence() {
        let (r, _) = setup();
        let s = sentence(&[1, 2, 3, 4, 5, 6]);
        let acc = AccentSpec::identity(0, 40, 16);
        assert_eq!(apply_accent(&s, &r.inventory, &acc, 1), s.phonemes);
    }

    #[test]
    fn forced_substitution_uses_unique_confusable() {
        let inv = PhonemeInventory::new(4, vec![vec![1], vec![2], vec![0], vec![]]).unwrap();
        let mut acc = AccentSpec::identity(0, 4, 2);
        acc.substitution_prob = 1.0;
        let s = sentence(&[0, 1, 2, 2, 0]);
        assert_eq!(apply_accent(&s, &inv, &acc, 5), vec![1, 2, 0, 0, 1]);
    }

    #[test]
    fn substitution_rate_matches_probability() {
        let (r, _) = setup();
        let s = sample_sentences(1, (10_000, 10_000), &r.inventory, 4).unwrap().remove(0);
        let mut acc = AccentSpec::identity(0, 40, 16);
        acc.substitution_prob = 0.3;
        let surf = apply_accent(&s, &r.inventory, &acc, 8);
        let changed = surf.iter().zip(&s.phonemes).filter(|(a, b)| a != b).count();
        let rate = changed as f64 / 10_000.0;
        assert!((rate - 0.3).abs() <= 0.02, "rate {rate}");
    }

    #[test]
    fn fillers_follow_phonemes() {
        let (r, _) = setup();
        let s = sentence(&[1, 2, 3]);
        let mut acc = AccentSpec::identity(0, 40, 16);
        acc.filler_prob = 1.0;
        assert_eq!(apply_accent(&s, &r.inventory, &acc, 0), vec![1, 39, 2, 39, 3, 39]);
    }

    #[test]
    fn noise_free_render_repeats_prototypes() {
        let (r, cfg) = setup();
        let s = sentence(&[4, 0, 17, 4]);
        let acc = AccentSpec::identity(0, 40, 16);
        let spk = SpeakerSpec::zero(0, 16);
        let f = r.render(&s, &spk, &acc, &cfg, 11).unwrap();
        let expect_t: usize = s.phonemes.iter().map(|&p| cfg.base_durations[p]).sum();
        assert_eq!(f.len(), expect_t);
        let mut t = 0;
        for &p in &s.phonemes {
            for _ in 0..cfg.base_durations[p] {
                assert_eq!(f.frame(t), r.prototypes.row(p));
                t += 1;
            }
        }
    }

    #[test]
    fn doubling_tau_doubles_length() {
        let (r, cfg) = setup();
        let s = sentence(&[4, 0, 17, 4, 9]);
        let spk = SpeakerSpec::zero(0, 16);
        let a1 = AccentSpec::identity(0, 40, 16);
        let mut a2 = a1.clone();
        a2.duration_multiplier = 2.0;
        let t1 = r.render(&s, &spk, &a1, &cfg, 1).unwrap().len();
        let t2 = r.render(&s, &spk, &a2, &cfg, 1).unwrap().len();
        assert_eq!(t2, 2 * t1);
    }

    #[test]
    fn longer_tau_never_shortens() {
        let (r, cfg) = setup();
        let s = sentence(&[4, 0, 17, 4, 9, 22, 31]);
        let spk = SpeakerSpec::zero(0, 16);
        let mut prev = 0;
        for k in 0..20 {
            let mut a = AccentSpec::identity(0, 40, 16);
            a.duration_multiplier = 0.3 + 0.17 * k as f64;
            let t = r.render(&s, &spk, &a, &cfg, 1).unwrap().len();
            assert!(t >= prev);
            prev = t;
        }
    }

    #[test]
    fn accent_shift_is_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let acc = AccentSpec::random(1, 40, 16, &AccentParams::default(), &mut rng);
        let m = acc.shift_matrix();
        // every 2x2 minor of outer(u, v) vanishes
        for i in 0..40 {
            for j in 0..40 {
                for a in 0..16 {
                    for b in 0..16 {
                        let minor = m[i][a] * m[j][b] - m[i][b] * m[j][a];
                        assert!(minor.abs() < 1e-12);
                    }
                }
            }
        }
        for (p, row) in m.iter().enumerate() {
            for (c, x) in row.iter().enumerate() {
                assert_eq!(*x, acc.shift_u[p] * acc.shift_v[c]);
            }
        }
    }

    #[test]
    fn frame_noise_has_chi_distributed_norm() {
        // E||eps|| for eps ~ N(0, s^2 I_16) is s * sqrt(2) * Gamma(8.5) / Gamma(8)
        let (r, cfg) = setup();
        let sigma = 0.1;
        let s = sample_sentences(1, (400, 400), &r.inventory, 2).unwrap().remove(0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let acc = AccentSpec::random(1, 40, 16, &AccentParams { substitution_prob: 0.0, filler_prob: 0.0, ..Default::default() }, &mut rng);
        let spk = SpeakerSpec::random(2, 16, 0.5, &mut rng);
        let f = r.render(&s, &spk, &acc, &cfg.with_noise(0.0, sigma), 99).unwrap();
        let labels = f.labels.clone().unwrap();
        let norms: Vec<f64> = f
            .frames()
            .zip(&labels)
            .map(|(x, &p)| {
                let clean: Vec<f64> = r
                    .prototypes
                    .row(p)
                    .iter()
                    .zip(acc.shift(p))
                    .zip(&spk.offset)
                    .map(|((a, b), c)| a + b + c)
                    .collect();
                sq_dist(x, &clean).sqrt()
            })
            .collect();
        let n = norms.len() as f64;
        let mean = norms.iter().sum::<f64>() / n;
        // Gamma(8.5)/Gamma(8) computed by the duplication of half-integer gamma
        let ratio = {
            let g85 = (1..=8).fold(std::f64::consts::PI.sqrt(), |acc, k| acc * (k as f64 - 0.5));
            let g8 = (1..8).fold(1.0, |acc, k| acc * k as f64);
            g85 / g8
        };
        let expect = sigma * 2f64.sqrt() * ratio;
        let var = sigma * sigma * 16.0 - expect * expect;
        let se = (var / n).sqrt();
        assert!((mean - expect).abs() < 3.0 * se, "mean {mean} expect {expect} se {se}");
    }

    #[test]
    fn native_render_is_deterministic() {
        let (r, cfg) = setup();
        let s = sample_sentences(2, (5, 30), &r.inventory, 1).unwrap();
        let a = r.native_render(&s[0], &cfg).unwrap();
        let b = r.native_render(&s[0], &cfg).unwrap();
        assert_eq!(a, b);
        let c = r.native_render(&s[1], &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn feature_file_round_trip_is_f32() {
        let f = FeatureSequence::new(2, vec![0.5, -1.25, 3.0, 1e-3]).unwrap();
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], FEATURE_MAGIC);
        assert_eq!(buf.len(), 16 + 4 * 4);
        let g = FeatureSequence::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.frame(0), &[0.5, -1.25]);
        assert!((g.frame(1)[1] - 1e-3).abs() < 1e-9);
    }
}
