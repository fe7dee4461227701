//! Synthetic parallel corpora: accented renders paired with native unit
//! targets, under the non-overlapped and overlapped sentence strategies.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::s2u::{read_unit_lines, speech_to_units, write_unit_lines, Codebook, UnitSequence};
use crate::synth::{AccentSpec, FeatureSequence, RenderConfig, Renderer, SpeakerSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AugmentStrategy {
    /// Every sentence rendered once with a random accent and speaker.
    NonOverlapped,
    /// Every sentence rendered under `accents_per_sentence` accents, each with
    /// its own random speaker.
    Overlapped { accents_per_sentence: usize },
}

impl AugmentStrategy {
    pub fn overlapped() -> Self {
        AugmentStrategy::Overlapped { accents_per_sentence: 6 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AugmentStrategy::NonOverlapped => "non-overlapped",
            AugmentStrategy::Overlapped { .. } => "overlapped",
        }
    }

    pub fn pairs_per_sentence(&self) -> usize {
        match *self {
            AugmentStrategy::NonOverlapped => 1,
            AugmentStrategy::Overlapped { accents_per_sentence } => accents_per_sentence,
        }
    }

    /// Distinct sentences consumed for a given budget.
    pub fn sentences_needed(&self, budget: usize) -> usize {
        budget / self.pairs_per_sentence()
    }
}

impl fmt::Display for AugmentStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentStrategy::NonOverlapped => f.write_str("non-overlapped"),
            AugmentStrategy::Overlapped { accents_per_sentence } => write!(f, "overlapped:{accents_per_sentence}"),
        }
    }
}

impl FromStr for AugmentStrategy {
    type Err = String;

    /// `non-overlapped`, `overlapped` or `overlapped:N`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.split_once(':') {
            None if s == "non-overlapped" => Ok(AugmentStrategy::NonOverlapped),
            None if s == "overlapped" => Ok(AugmentStrategy::overlapped()),
            Some(("overlapped", n)) => n
                .parse()
                .map(|accents_per_sentence| AugmentStrategy::Overlapped { accents_per_sentence })
                .map_err(|e| format!("bad accent count {n:?}: {e}")),
            _ => Err(format!("unknown strategy {s:?}")),
        }
    }
}

/// Ranges for per-pair noise randomization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRanges {
    pub inference: (f64, f64),
    pub duration: (f64, f64),
}

impl Default for NoiseRanges {
    fn default() -> Self {
        Self {
            inference: (0.02, 0.10),
            duration: (0.0, 0.2),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub sentence_id: u64,
    pub accent_id: u32,
    pub speaker_id: u32,
    pub seed: u64,
    pub inference_noise: f64,
    pub duration_noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParallelPair {
    pub input: FeatureSequence,
    pub target: UnitSequence,
    pub meta: PairMeta,
}

/// Everything needed to render pairs.
#[derive(Clone, Copy)]
pub struct AugmentContext<'a> {
    pub renderer: &'a Renderer,
    pub render_config: &'a RenderConfig,
    pub codebook: &'a Codebook,
    pub accents: &'a [AccentSpec],
    pub speakers: &'a [SpeakerSpec],
    pub noise: NoiseRanges,
}

impl AugmentContext<'_> {
    /// `reduce(quantize(native_render(sentence)))`.
    pub fn native_target(&self, sentence: &Sentence) -> Result<UnitSequence> {
        let native = self.renderer.native_render(sentence, self.render_config)?;
        speech_to_units(&native, self.codebook)
    }

    fn render_pair(&self, sentence: &Sentence, target: &UnitSequence, plan: &PairPlan) -> Result<ParallelPair> {
        let accent = &self.accents[plan.accent];
        let speaker = &self.speakers[plan.speaker];
        let cfg = self.render_config.with_noise(plan.duration_noise, plan.inference_noise);
        let input = self.renderer.render(sentence, speaker, accent, &cfg, plan.seed)?;
        Ok(ParallelPair {
            input,
            target: target.clone(),
            meta: PairMeta {
                sentence_id: sentence.id,
                accent_id: accent.id,
                speaker_id: speaker.id,
                seed: plan.seed,
                inference_noise: plan.inference_noise,
                duration_noise: plan.duration_noise,
            },
        })
    }
}

struct PairPlan {
    accent: usize,
    speaker: usize,
    seed: u64,
    inference_noise: f64,
    duration_noise: f64,
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Builds exactly `budget` pairs. Targets are computed once per sentence and
/// shared by all of its pairs. Output is ordered by sentence id, then accent.
pub fn build_parallel_corpus(
    sentences: &[Sentence],
    strategy: AugmentStrategy,
    budget: usize,
    ctx: &AugmentContext,
    seed: u64,
) -> Result<Vec<ParallelPair>> {
    let per = strategy.pairs_per_sentence();
    if budget == 0 {
        return Err(Error::config("budget must be positive"));
    }
    if per == 0 {
        return Err(Error::config("accents_per_sentence must be positive"));
    }
    if !budget.is_multiple_of(per) {
        return Err(Error::config(format!("budget {budget} not divisible by {per} accents per sentence")));
    }
    if ctx.accents.len() < per || ctx.speakers.is_empty() {
        return Err(Error::config(format!(
            "{} accents and {} speakers cannot cover {per} accents per sentence",
            ctx.accents.len(),
            ctx.speakers.len()
        )));
    }
    let n = budget / per;
    if sentences.len() < n {
        return Err(Error::config(format!("{} sentences, strategy {strategy} needs {n}", sentences.len())));
    }
    let (dn, inf) = (ctx.noise.duration, ctx.noise.inference);
    if !(0.0 <= dn.0 && dn.0 <= dn.1 && 0.0 <= inf.0 && inf.0 <= inf.1) {
        return Err(Error::config("noise ranges must be non-negative and ordered"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<&Sentence> = sentences.choose_multiple(&mut rng, n).collect();
    chosen.sort_by_key(|s| s.id);
    let accent_ids: Vec<usize> = (0..ctx.accents.len()).collect();
    let plans: Vec<Vec<PairPlan>> = chosen
        .iter()
        .map(|_| {
            let mut accents: Vec<usize> = if per == 1 {
                vec![rng.random_range(0..ctx.accents.len())]
            } else {
                accent_ids.choose_multiple(&mut rng, per).copied().collect()
            };
            accents.sort_unstable();
            accents
                .into_iter()
                .map(|accent| PairPlan {
                    accent,
                    speaker: rng.random_range(0..ctx.speakers.len()),
                    seed: rng.random(),
                    inference_noise: uniform(&mut rng, inf),
                    duration_noise: uniform(&mut rng, dn),
                })
                .collect()
        })
        .collect();

    let nested: Vec<Vec<ParallelPair>> = chosen
        .par_iter()
        .zip(plans.par_iter())
        .map(|(s, plans)| {
            let target = ctx.native_target(s)?;
            plans.iter().map(|p| ctx.render_pair(s, &target, p)).collect()
        })
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

/// Every sentence under every accent, with a random speaker each; used for
/// shared validation and test sets.
pub fn render_all_accents(sentences: &[Sentence], ctx: &AugmentContext, seed: u64) -> Result<Vec<ParallelPair>> {
    let strategy = AugmentStrategy::Overlapped {
        accents_per_sentence: ctx.accents.len(),
    };
    build_parallel_corpus(sentences, strategy, sentences.len() * ctx.accents.len(), ctx, seed)
}

/// Deterministic shuffle of pair order.
pub fn shuffle_pairs(pairs: &mut [ParallelPair], seed: u64) {
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LengthSummary {
    pub min: usize,
    pub median: usize,
    pub max: usize,
}

impl LengthSummary {
    pub fn of(mut xs: Vec<usize>) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        xs.sort_unstable();
        Self {
            min: xs[0],
            median: xs[xs.len() / 2],
            max: xs[xs.len() - 1],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub pairs: usize,
    pub unique_sentences: usize,
    pub pairs_per_accent: BTreeMap<u32, usize>,
    pub target_len: LengthSummary,
    pub input_len: LengthSummary,
}

pub fn corpus_stats(pairs: &[ParallelPair]) -> CorpusStats {
    let mut per_accent = BTreeMap::new();
    for p in pairs {
        *per_accent.entry(p.meta.accent_id).or_insert(0) += 1;
    }
    let mut ids: Vec<u64> = pairs.iter().map(|p| p.meta.sentence_id).collect();
    ids.sort_unstable();
    ids.dedup();
    CorpusStats {
        pairs: pairs.len(),
        unique_sentences: ids.len(),
        pairs_per_accent: per_accent,
        target_len: LengthSummary::of(pairs.iter().map(|p| p.target.len()).collect()),
        input_len: LengthSummary::of(pairs.iter().map(|p| p.input.len()).collect()),
    }
}

const INDEX_FILE: &str = "index.tsv";
const TARGETS_FILE: &str = "targets.txt";
const FEATURES_DIR: &str = "features";

/// Writes `features/NNNNNN.uaft`, `targets.txt` (line `i` is pair `i`) and
/// `index.tsv` with columns pair id, input path, target line, sentence id,
/// accent id, speaker id, seed, inference noise, duration noise.
pub fn write_corpus_dir(dir: &Path, pairs: &[ParallelPair]) -> Result<()> {
    let feat_dir = dir.join(FEATURES_DIR);
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut index = String::from("pair\tinput\ttarget_line\tsentence\taccent\tspeaker\tseed\tinference_noise\tduration_noise\n");
    for (i, p) in pairs.iter().enumerate() {
        let rel = format!("{FEATURES_DIR}/{i:06}.uaft");
        p.input.save(&dir.join(&rel))?;
        let m = &p.meta;
        index.push_str(&format!(
            "{i}\t{rel}\t{}\t{}\t{}\t{}\t{}\t{:?}\t{:?}\n",
            i + 1,
            m.sentence_id,
            m.accent_id,
            m.speaker_id,
            m.seed,
            m.inference_noise,
            m.duration_noise
        ));
    }
    let targets: Vec<UnitSequence> = pairs.iter().map(|p| p.target.clone()).collect();
    write_unit_lines(&dir.join(TARGETS_FILE), &targets)?;
    let path = dir.join(INDEX_FILE);
    fs::write(&path, index).map_err(|e| Error::io(&path, e))
}

pub fn read_corpus_dir(dir: &Path) -> Result<Vec<ParallelPair>> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let targets = read_unit_lines(&dir.join(TARGETS_FILE), true)?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.clone(),
        line,
        msg,
    };
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 9 {
            return Err(perr(i + 1, format!("expected 9 fields, found {}", f.len())));
        }
        fn num<T: FromStr>(s: &str) -> std::result::Result<T, String>
        where
            T::Err: fmt::Display,
        {
            s.parse().map_err(|e| format!("bad field {s:?}: {e}"))
        }
        let parse = || -> std::result::Result<(usize, PairMeta), String> {
            Ok((
                num(f[2])?,
                PairMeta {
                    sentence_id: num(f[3])?,
                    accent_id: num(f[4])?,
                    speaker_id: num(f[5])?,
                    seed: num(f[6])?,
                    inference_noise: num(f[7])?,
                    duration_noise: num(f[8])?,
                },
            ))
        };
        let (target_line, meta) = parse().map_err(|m| perr(i + 1, m))?;
        let target = targets
            .get(target_line.wrapping_sub(1))
            .cloned()
            .ok_or_else(|| perr(i + 1, format!("target line {target_line} missing")))?;
        let input_path: PathBuf = dir.join(f[1]);
        let mut input = FeatureSequence::load(&input_path)?;
        input.provenance = crate::synth::Provenance {
            sentence_id: meta.sentence_id,
            speaker_id: meta.speaker_id,
            accent_id: meta.accent_id,
            seed: meta.seed,
        };
        pairs.push(ParallelPair { input, target, meta });
    }
    Ok(pairs)
}
