use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use unitac_nn::loss::log_softmax;
use unitac_nn::{Tape, Tensor};

use super::model::PcModel;
use crate::error::{Error, Result};
use crate::s2u::{UnitId, UnitSequence};
use crate::synth::FeatureSequence;

/// Next-token distributions for one utterance.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn eos(&self) -> usize;
    /// Log-probabilities of the next token after `prefix` (units only, BOS implied).
    fn next_log_probs(&self, prefix: &[usize]) -> Vec<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub units: Vec<UnitId>,
    /// Sum of token log-probabilities, EOS included when `finished`.
    pub score: f64,
    /// `score` divided by the number of scored tokens.
    pub normalized_score: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn new(units: Vec<UnitId>, score: f64, finished: bool) -> Self {
        let n = units.len() + usize::from(finished);
        Self {
            units,
            score,
            normalized_score: if n == 0 { 0.0 } else { score / n as f64 },
            finished,
        }
    }

    pub fn to_units(&self) -> UnitSequence {
        UnitSequence {
            units: self.units.clone(),
            reduced: !self.has_adjacent_duplicates(),
        }
    }

    pub fn has_adjacent_duplicates(&self) -> bool {
        self.units.windows(2).any(|w| w[0] == w[1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam: usize,
    pub length_norm: bool,
    pub max_len: usize,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Highest-probability token at every step until EOS or `max_len` units.
pub fn decode_greedy<S: StepScorer + ?Sized>(scorer: &S, max_len: usize) -> Hypothesis {
    let mut units = Vec::new();
    let mut score = 0.0;
    while units.len() < max_len {
        let lp = scorer.next_log_probs(&units);
        let t = argmax(&lp);
        score += lp[t];
        if t == scorer.eos() {
            return Hypothesis::new(units, score, true);
        }
        units.push(t);
    }
    Hypothesis::new(units, score, false)
}

fn rank(h: &Hypothesis, length_norm: bool) -> f64 {
    if length_norm {
        h.normalized_score
    } else {
        h.score
    }
}

/// Beam search keeping the `beam` best prefixes by cumulative log-probability.
/// Prefixes that emit EOS move to a completed pool; the search stops once no
/// live prefix can beat the best completed one (raw scores only grow more
/// negative) or at `max_len`. Completed hypotheses are returned best first.
pub fn beam_decode<S: StepScorer + ?Sized>(scorer: &S, config: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    if config.beam < 1 {
        return Err(Error::config("beam size must be at least 1"));
    }
    let eos = scorer.eos();
    let mut alive: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut done: Vec<Hypothesis> = Vec::new();
    let mut step = 0;
    while !alive.is_empty() && step < config.max_len {
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (i, (prefix, s)) in alive.iter().enumerate() {
            let lp = scorer.next_log_probs(prefix);
            cands.extend(lp.iter().enumerate().map(|(t, l)| (i, t, s + l)));
        }
        // best score first; ties by beam index, then token id
        cands.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        let mut next = Vec::with_capacity(config.beam);
        for &(i, t, s) in cands.iter().take(config.beam) {
            let mut prefix = alive[i].0.clone();
            if t == eos {
                done.push(Hypothesis::new(prefix, s, true));
            } else {
                prefix.push(t);
                next.push((prefix, s));
            }
        }
        alive = next;
        step += 1;
        if !config.length_norm {
            let best_done = done.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            let best_alive = alive.iter().map(|a| a.1).fold(f64::NEG_INFINITY, f64::max);
            if best_done >= best_alive {
                break;
            }
        }
    }
    if step >= config.max_len {
        done.extend(alive.into_iter().map(|(p, s)| Hypothesis::new(p, s, false)));
    }
    done.sort_by(|a, b| {
        rank(b, config.length_norm)
            .partial_cmp(&rank(a, config.length_norm))
            .unwrap_or(Ordering::Equal)
    });
    Ok(done)
}

/// Sum of token log-probabilities of `units` followed by EOS, scored one
/// step at a time.
pub fn rescore<S: StepScorer + ?Sized>(scorer: &S, units: &[usize], finished: bool) -> f64 {
    let mut s = 0.0;
    for i in 0..units.len() {
        s += scorer.next_log_probs(&units[..i])[units[i]];
    }
    if finished {
        s += scorer.next_log_probs(units)[scorer.eos()];
    }
    s
}

/// [`StepScorer`] over a trained model with the encoder output cached.
pub struct PcScorer<'m> {
    model: &'m PcModel,
    memory: Tensor,
}

impl<'m> PcScorer<'m> {
    pub fn new(model: &'m PcModel, features: &FeatureSequence) -> Result<Self> {
        let mut tape = Tape::new(&model.store);
        let mem = model.encode(&mut tape, features)?;
        Ok(Self {
            model,
            memory: tape.value(mem).clone(),
        })
    }
}

impl StepScorer for PcScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.vocab().size()
    }

    fn eos(&self) -> usize {
        self.model.vocab().eos()
    }

    fn next_log_probs(&self, prefix: &[usize]) -> Vec<f64> {
        let mut tokens = Vec::with_capacity(prefix.len() + 1);
        tokens.push(self.model.vocab().bos());
        tokens.extend_from_slice(prefix);
        let mut tape = Tape::new(&self.model.store);
        let mem = tape.constant(self.memory.clone());
        let logits = self.model.decode_logits(&mut tape, Some(mem), &tokens);
        let mut lp = log_softmax(tape.value(logits).row(prefix.len()));
        // structural tokens never follow BOS
        let v = self.model.vocab();
        lp[v.pad()] = f64::NEG_INFINITY;
        lp[v.bos()] = f64::NEG_INFINITY;
        lp
    }
}

impl PcModel {
    pub fn decode_greedy(&self, features: &FeatureSequence) -> Result<Hypothesis> {
        Ok(decode_greedy(&PcScorer::new(self, features)?, self.max_decode_len))
    }

    pub fn beam_decode(&self, features: &FeatureSequence, beam: usize, length_norm: bool) -> Result<Vec<Hypothesis>> {
        let config = DecodeConfig {
            beam,
            length_norm,
            max_len: self.max_decode_len,
        };
        beam_decode(&PcScorer::new(self, features)?, &config)
    }

    /// Top beam hypothesis.
    pub fn transcribe(&self, features: &FeatureSequence, beam: usize, length_norm: bool) -> Result<Hypothesis> {
        self.beam_decode(features, beam, length_norm)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::Numeric("beam search produced no hypothesis".into()))
    }
}
