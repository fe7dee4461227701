use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use unitac_nn::optim::{clip_grad_norm, Adam, LinearDecay};
use unitac_nn::{Grads, NnError, ParamStore, Tape, Var};

use super::model::PcModel;
use crate::augment::ParallelPair;
use crate::error::{Error, Result};
use crate::eval::perplexity;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub total_updates: usize,
    pub micro_batch: usize,
    pub accumulation: usize,
    pub clip_norm: f64,
    /// Validation perplexity is computed every this many updates and after
    /// the last one.
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            total_updates: 5000,
            micro_batch: 8,
            accumulation: 2,
            clip_norm: 1.0,
            eval_interval: 250,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config("peak_lr must be finite and non-negative"));
        }
        if self.micro_batch == 0 || self.accumulation == 0 || self.eval_interval == 0 {
            return Err(Error::config("micro_batch, accumulation and eval_interval must be positive"));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::config("clip_norm must be positive"));
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.accumulation
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub update: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_ppl: Option<f64>,
}

pub fn write_log<W: Write>(w: &mut W, log: &[LogRecord]) -> std::io::Result<()> {
    for r in log {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// A per-example training loss.
pub(crate) trait Objective: Sync {
    fn len(&self) -> usize;
    /// Number of scored tokens of `item` at `update`.
    fn tokens(&self, item: usize, update: usize) -> usize;
    /// Summed token loss of `item` times `scale`.
    fn loss(&self, model: &PcModel, tape: &mut Tape, item: usize, update: usize, scale: f64) -> Result<Var>;
}

fn numeric(e: NnError, update: usize) -> Error {
    match e {
        NnError::NonFinite(msg) => Error::Numeric(format!("training diverged at update {update}: {msg}")),
        other => Error::Nn(other),
    }
}

pub(crate) struct Optimized {
    pub log: Vec<LogRecord>,
    pub optimizer: Adam,
    pub best: Option<(f64, usize, ParamStore)>,
}

/// Adam with linear decay and global-norm clipping over shuffled epochs.
/// Micro-batch examples run in parallel; their gradients are summed in
/// example order so results do not depend on the thread count.
pub(crate) fn optimize(
    model: &mut PcModel,
    objective: &dyn Objective,
    config: &TrainConfig,
    mut validate: impl FnMut(&PcModel) -> Result<Option<f64>>,
) -> Result<Optimized> {
    config.validate()?;
    if objective.len() == 0 {
        return Err(Error::data("empty training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..objective.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let schedule = LinearDecay {
        peak: config.peak_lr,
        total: config.total_updates,
    };
    let mut adam = Adam::new(&model.store);
    let mut log = Vec::with_capacity(config.total_updates);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for update in 0..config.total_updates {
        let mut batch = Vec::with_capacity(config.effective_batch());
        for _ in 0..config.effective_batch() {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let tokens: usize = batch.iter().map(|&i| objective.tokens(i, update)).sum();
        let scale = 1.0 / tokens.max(1) as f64;
        let mut grads: Grads = model.store.zero_grads();
        let mut loss = 0.0;
        for micro in batch.chunks(config.micro_batch) {
            let m: &PcModel = model;
            let results: Vec<(f64, Grads)> = micro
                .par_iter()
                .map(|&item| {
                    let mut tape = Tape::new(&m.store);
                    let l = objective.loss(m, &mut tape, item, update, scale)?;
                    let value = tape.value(l).data()[0];
                    let g = tape.backward(l).map_err(|e| numeric(e, update))?;
                    Ok((value, g))
                })
                .collect::<Result<_>>()?;
            for (l, g) in results {
                loss += l;
                grads.accumulate(&g);
            }
        }
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Numeric(format!("training diverged at update {update}: loss {loss}")));
        }
        clip_grad_norm(&mut grads, config.clip_norm);
        let lr = schedule.lr(update);
        adam.update(&mut model.store, &grads, lr);
        let last = update + 1 == config.total_updates;
        let val_ppl = if (update + 1) % config.eval_interval == 0 || last {
            validate(model)?
        } else {
            None
        };
        if let Some(v) = val_ppl {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("validation perplexity {v} at update {update}")));
            }
            if best.as_ref().is_none_or(|b| v < b.0) {
                best = Some((v, update + 1, model.store.clone()));
            }
        }
        log.push(LogRecord {
            update: update + 1,
            loss,
            lr,
            val_ppl,
        });
    }
    Ok(Optimized {
        log,
        optimizer: adam,
        best,
    })
}

struct Seq2Seq<'a> {
    pairs: &'a [ParallelPair],
}

impl Objective for Seq2Seq<'_> {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn tokens(&self, item: usize, _: usize) -> usize {
        self.pairs[item].target.len() + 1
    }

    fn loss(&self, model: &PcModel, tape: &mut Tape, item: usize, _: usize, scale: f64) -> Result<Var> {
        let pair = &self.pairs[item];
        let (input, target) = model.teacher_forcing(&pair.target.units)?;
        let mem = model.encode(tape, &pair.input)?;
        let logits = model.decode_logits(tape, Some(mem), &input);
        Ok(tape.cross_entropy(logits, &target, scale))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    pub optimizer: Adam,
    pub best_val_ppl: Option<f64>,
    pub best_update: usize,
}

/// Teacher-forced training on mean token cross-entropy. The model is left
/// holding the parameters with the best validation perplexity (the final
/// parameters when `val` is empty). The decoding cap is set to four times
/// the median training target length.
pub fn train(model: &mut PcModel, pairs: &[ParallelPair], val: &[ParallelPair], config: &TrainConfig) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::data("empty training corpus"));
    }
    let v = model.vocab();
    if let Some(p) = pairs.iter().chain(val).find(|p| p.target.units.iter().any(|&u| !v.is_unit(u))) {
        return Err(Error::data(format!(
            "target of sentence {} exceeds the model's {} units",
            p.meta.sentence_id, v.k
        )));
    }
    let mut lens: Vec<usize> = pairs.iter().map(|p| p.target.len()).collect();
    lens.sort_unstable();
    model.max_decode_len = (4 * lens[lens.len() / 2]).max(1);
    let objective = Seq2Seq { pairs };
    let out = optimize(model, &objective, config, |m| {
        if val.is_empty() {
            Ok(None)
        } else {
            perplexity(m, val).map(Some)
        }
    })?;
    let (best_val_ppl, best_update) = match out.best {
        Some((ppl, update, store)) => {
            model.store = store;
            (Some(ppl), update)
        }
        None => (None, config.total_updates),
    };
    Ok(TrainOutcome {
        log: out.log,
        optimizer: out.optimizer,
        best_val_ppl,
        best_update,
    })
}
