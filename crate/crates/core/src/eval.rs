//! Objective evaluation: perplexity, unit error rate, phoneme recovery,
//! speaker similarity and length-based fluency.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::ParallelPair;
use crate::corpus::{PhonemeId, Sentence};
use crate::error::{Error, Result};
use crate::pc::PcModel;
use crate::s2u::{speech_to_units, Codebook, UnitId, UnitSequence};
use crate::synth::FeatureSequence;
use crate::u2s::{speaker_embed, synthesize, UnitDecoder};

/// Anything that scores target units (then EOS) given an input.
pub trait TokenScorer: Sync {
    /// One log-probability per unit of `units` plus one for EOS.
    fn token_log_probs(&self, input: &FeatureSequence, units: &[UnitId]) -> Result<Vec<f64>>;
}

impl TokenScorer for PcModel {
    fn token_log_probs(&self, input: &FeatureSequence, units: &[UnitId]) -> Result<Vec<f64>> {
        PcModel::token_log_probs(self, input, units)
    }
}

/// `(summed negative log-likelihood, token count)` for one pair.
pub fn pair_nll<S: TokenScorer + ?Sized>(scorer: &S, pair: &ParallelPair) -> Result<(f64, usize)> {
    let lp = scorer.token_log_probs(&pair.input, &pair.target.units)?;
    Ok((-lp.iter().sum::<f64>(), lp.len()))
}

fn pooled(parts: &[(f64, usize)]) -> f64 {
    let nll: f64 = parts.iter().map(|p| p.0).sum();
    let n: usize = parts.iter().map(|p| p.1).sum();
    (nll / n as f64).exp()
}

/// Corpus-level perplexity: `exp(total NLL / total tokens)`, EOS included.
pub fn perplexity<S: TokenScorer + ?Sized>(scorer: &S, pairs: &[ParallelPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::data("perplexity of an empty pair list"));
    }
    let parts: Vec<(f64, usize)> = pairs.par_iter().map(|p| pair_nll(scorer, p)).collect::<Result<_>>()?;
    Ok(pooled(&parts))
}

/// Unigram perplexity of `targets` (units plus EOS) under their own token
/// frequencies.
pub fn unigram_perplexity(targets: &[UnitSequence]) -> Result<f64> {
    let mut counts: BTreeMap<Option<UnitId>, usize> = BTreeMap::new();
    let mut n = 0;
    for t in targets {
        for &u in &t.units {
            *counts.entry(Some(u)).or_default() += 1;
        }
        *counts.entry(None).or_default() += 1;
        n += t.len() + 1;
    }
    if n == 0 {
        return Err(Error::data("no targets"));
    }
    let nll: f64 = counts.values().map(|&c| -(c as f64) * (c as f64 / n as f64).ln()).sum();
    Ok((nll / n as f64).exp())
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by the reference length.
pub fn unit_error_rate(hyp: &UnitSequence, reference: &UnitSequence) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::data("unit error rate against an empty reference"));
    }
    Ok(levenshtein(&hyp.units, &reference.units) as f64 / reference.len() as f64)
}

/// `1 - edit distance / reference length` between the phonemes implied by
/// `hyp` (runs collapsed) and the reference sentence, floored at 0. Filler
/// phonemes are dropped from the reference; unmapped units never match.
pub fn phoneme_recovery(
    hyp: &UnitSequence,
    unit_phonemes: &[Option<PhonemeId>],
    reference: &Sentence,
    filler: PhonemeId,
) -> Result<f64> {
    let reference: Vec<PhonemeId> = reference.phonemes.iter().copied().filter(|&p| p != filler).collect();
    if reference.is_empty() {
        return Err(Error::data("phoneme recovery against an empty reference"));
    }
    let mut phones: Vec<PhonemeId> = Vec::with_capacity(hyp.len());
    for &u in &hyp.units {
        // unmapped units become a symbol absent from every reference
        let p = unit_phonemes.get(u).copied().flatten().unwrap_or(PhonemeId::MAX);
        if phones.last() != Some(&p) {
            phones.push(p);
        }
    }
    let d = levenshtein(&phones, &reference);
    Ok((1.0 - d as f64 / reference.len() as f64).max(0.0))
}

pub fn speaker_similarity(converted: &FeatureSequence, source: &FeatureSequence, codebook: &Codebook) -> Result<f64> {
    Ok(speaker_embed(converted, codebook)?.cosine(&speaker_embed(source, codebook)?))
}

/// `|hyp| / |ref|` on reduced sequences.
pub fn fluency_ratio(hyp: &UnitSequence, reference: &UnitSequence) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::data("fluency ratio against an empty reference"));
    }
    Ok(hyp.len() as f64 / reference.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub pairs: usize,
    pub ppl: f64,
    pub uer: f64,
    pub phoneme_accuracy: f64,
    pub speaker_cosine: f64,
    pub fluency_ratio: f64,
    /// Length ratio of the unconverted input's own units to the reference.
    pub input_fluency_ratio: f64,
    pub exact_match: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Metrics,
    pub per_accent: BTreeMap<u32, Metrics>,
}

/// Per-pair results of [`run_eval`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub accent_id: u32,
    pub nll: f64,
    pub tokens: usize,
    pub hyp: Vec<UnitId>,
    pub uer: f64,
    pub phoneme_accuracy: f64,
    pub speaker_cosine: f64,
    pub fluency_ratio: f64,
    pub input_fluency_ratio: f64,
}

pub struct EvalContext<'a> {
    pub codebook: &'a Codebook,
    pub decoder: &'a UnitDecoder,
    pub unit_phonemes: &'a [Option<PhonemeId>],
    pub sentences: &'a HashMap<u64, Sentence>,
    pub filler: PhonemeId,
    pub beam: usize,
    pub length_norm: bool,
}

pub fn evaluate_pair(model: &PcModel, pair: &ParallelPair, ctx: &EvalContext) -> Result<PairResult> {
    let (nll, tokens) = pair_nll(model, pair)?;
    let hyp = model.transcribe(&pair.input, ctx.beam, ctx.length_norm)?.to_units();
    let sentence = ctx
        .sentences
        .get(&pair.meta.sentence_id)
        .ok_or_else(|| Error::data(format!("no reference sentence {}", pair.meta.sentence_id)))?;
    let embedding = speaker_embed(&pair.input, ctx.codebook)?;
    let converted = synthesize(&hyp, &embedding, ctx.decoder)?;
    let speaker_cosine = if converted.is_empty() {
        0.0
    } else {
        speaker_similarity(&converted, &pair.input, ctx.codebook)?
    };
    let input_units = speech_to_units(&pair.input, ctx.codebook)?;
    Ok(PairResult {
        accent_id: pair.meta.accent_id,
        nll,
        tokens,
        uer: unit_error_rate(&hyp, &pair.target)?,
        phoneme_accuracy: phoneme_recovery(&hyp, ctx.unit_phonemes, sentence, ctx.filler)?,
        speaker_cosine,
        fluency_ratio: fluency_ratio(&hyp, &pair.target)?,
        input_fluency_ratio: fluency_ratio(&input_units, &pair.target)?,
        hyp: hyp.units,
    })
}

fn summarize(results: &[&PairResult], targets: &[&UnitSequence]) -> Metrics {
    let n = results.len() as f64;
    let mean = |f: fn(&PairResult) -> f64| results.iter().map(|r| f(r)).sum::<f64>() / n;
    let parts: Vec<(f64, usize)> = results.iter().map(|r| (r.nll, r.tokens)).collect();
    Metrics {
        pairs: results.len(),
        ppl: pooled(&parts),
        uer: mean(|r| r.uer),
        phoneme_accuracy: mean(|r| r.phoneme_accuracy),
        speaker_cosine: mean(|r| r.speaker_cosine),
        fluency_ratio: mean(|r| r.fluency_ratio),
        input_fluency_ratio: mean(|r| r.input_fluency_ratio),
        exact_match: results.iter().zip(targets).filter(|(r, t)| r.hyp == t.units).count() as f64 / n,
    }
}

/// Beam-decodes every pair and aggregates all metrics, overall and per accent.
pub fn run_eval(model: &PcModel, pairs: &[ParallelPair], ctx: &EvalContext) -> Result<(EvalReport, Vec<PairResult>)> {
    if pairs.is_empty() {
        return Err(Error::data("empty test set"));
    }
    let results: Vec<PairResult> = pairs.par_iter().map(|p| evaluate_pair(model, p, ctx)).collect::<Result<_>>()?;
    let all: Vec<&PairResult> = results.iter().collect();
    let targets: Vec<&UnitSequence> = pairs.iter().map(|p| &p.target).collect();
    let mut per_accent = BTreeMap::new();
    let accents: std::collections::BTreeSet<u32> = results.iter().map(|r| r.accent_id).collect();
    for a in accents {
        let idx: Vec<usize> = (0..results.len()).filter(|&i| results[i].accent_id == a).collect();
        let rs: Vec<&PairResult> = idx.iter().map(|&i| &results[i]).collect();
        let ts: Vec<&UnitSequence> = idx.iter().map(|&i| targets[i]).collect();
        per_accent.insert(a, summarize(&rs, &ts));
    }
    Ok((
        EvalReport {
            overall: summarize(&all, &targets),
            per_accent,
        },
        results,
    ))
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<8} {:>6} {:>8} {:>7} {:>9} {:>9} {:>8} {:>8} {:>7}",
            "accent", "pairs", "ppl", "uer", "phon_acc", "spk_cos", "fluency", "input_fl", "exact"
        );
        let mut row = |name: &str, m: &Metrics| {
            let _ = writeln!(
                s,
                "{:<8} {:>6} {:>8.4} {:>7.4} {:>9.4} {:>9.4} {:>8.4} {:>8.4} {:>7.4}",
                name, m.pairs, m.ppl, m.uer, m.phoneme_accuracy, m.speaker_cosine, m.fluency_ratio, m.input_fluency_ratio, m.exact_match
            );
        };
        row("all", &self.overall);
        for (a, m) in &self.per_accent {
            row(&a.to_string(), m);
        }
        s
    }

    /// One JSON object per line: the overall row, then one per accent.
    pub fn to_json_lines(&self) -> String {
        #[derive(Serialize)]
        struct Row<'a> {
            scope: String,
            #[serde(flatten)]
            metrics: &'a Metrics,
        }
        let mut out = String::new();
        let mut push = |scope: String, metrics: &Metrics| {
            out.push_str(&serde_json::to_string(&Row { scope, metrics }).expect("metrics serialize"));
            out.push('\n');
        };
        push("all".into(), &self.overall);
        for (a, m) in &self.per_accent {
            push(format!("accent:{a}"), m);
        }
        out
    }

    /// Writes the text table to `path` and the JSON lines next to it with a
    /// `.jsonl` extension.
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))?;
        let jl = path.with_extension("jsonl");
        fs::write(&jl, self.to_json_lines()).map_err(|e| Error::io(&jl, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein(&[1, 2, 3], &[1, 3]), 1);
        assert_eq!(levenshtein::<u8>(&[], &[]), 0);
        assert_eq!(levenshtein(&[1, 2], &[]), 2);
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
    }

    #[test]
    fn uer_examples() {
        let r = UnitSequence::raw(vec![1, 3]);
        assert_eq!(unit_error_rate(&UnitSequence::raw(vec![1, 2, 3]), &r).unwrap(), 0.5);
        assert_eq!(unit_error_rate(&r, &r).unwrap(), 0.0);
        assert!(matches!(
            unit_error_rate(&r, &UnitSequence::raw(vec![])),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn phoneme_recovery_collapses_and_drops_fillers() {
        let map = vec![Some(0), Some(0), Some(1), None, Some(9)];
        let s = Sentence {
            id: 0,
            phonemes: vec![0, 9, 1],
        };
        let hyp = UnitSequence::raw(vec![0, 1, 2]);
        assert_eq!(phoneme_recovery(&hyp, &map, &s, 9).unwrap(), 1.0);
        let hyp = UnitSequence::raw(vec![3, 2]);
        assert_eq!(phoneme_recovery(&hyp, &map, &s, 9).unwrap(), 0.5);
        let hyp = UnitSequence::raw(vec![3, 4, 3, 4, 3]);
        assert_eq!(phoneme_recovery(&hyp, &map, &s, 9).unwrap(), 0.0);
    }

    #[test]
    fn unigram_baseline() {
        // tokens: 0 0 EOS 1 EOS -> p(0)=2/5, p(1)=1/5, p(EOS)=2/5
        let t = vec![UnitSequence::raw(vec![0, 0]), UnitSequence::raw(vec![1])];
        let nll = -(2.0 * (0.4f64).ln() + (0.2f64).ln() + 2.0 * (0.4f64).ln()) / 5.0;
        assert!((unigram_perplexity(&t).unwrap() - nll.exp()).abs() < 1e-12);
    }

    #[test]
    fn fluency_and_guards() {
        let r = UnitSequence::raw(vec![1, 2, 3, 4]);
        assert_eq!(fluency_ratio(&UnitSequence::raw(vec![1, 2]), &r).unwrap(), 0.5);
        assert!(fluency_ratio(&r, &UnitSequence::raw(vec![])).is_err());
    }
}
