use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unitac_nn::layers::Linear;
use unitac_nn::{Tape, Tensor, Var};

use super::model::{PcConfig, PcModel};
use super::train::{optimize, LogRecord, Objective, TrainConfig};
use crate::error::{Error, Result};
use crate::s2u::{quantize, Codebook, UnitSequence};
use crate::synth::FeatureSequence;

struct UnitLm<'a> {
    corpus: &'a [UnitSequence],
}

impl Objective for UnitLm<'_> {
    fn len(&self) -> usize {
        self.corpus.len()
    }

    fn tokens(&self, item: usize, _: usize) -> usize {
        self.corpus[item].len() + 1
    }

    fn loss(&self, model: &PcModel, tape: &mut Tape, item: usize, _: usize, scale: f64) -> Result<Var> {
        let (input, target) = model.teacher_forcing(&self.corpus[item].units)?;
        let logits = model.decode_logits(tape, None, &input);
        Ok(tape.cross_entropy(logits, &target, scale))
    }
}

/// Trains a fresh model's decoder as a causal unit language model (no
/// cross-attention). Load the result with [`PcModel::load_decoder_lm`].
pub fn pretrain_decoder_lm(config: &PcConfig, corpus: &[UnitSequence], train: &TrainConfig) -> Result<(PcModel, Vec<LogRecord>)> {
    let mut model = PcModel::new(config.clone())?;
    let v = model.vocab();
    if corpus.iter().any(|u| u.units.iter().any(|&x| !v.is_unit(x))) {
        return Err(Error::data("unit corpus exceeds the model vocabulary"));
    }
    let out = optimize(&mut model, &UnitLm { corpus }, train, |_| Ok(None))?;
    Ok((model, out.log))
}

/// Fraction of encoder positions masked per example.
const MASK_RATE: f64 = 0.15;
const MASK_SPAN: usize = 3;

struct MaskedFrames {
    inputs: Vec<Tensor>,
    /// Unit id of the first frame of every encoder position.
    targets: Vec<Vec<usize>>,
    probe: Linear,
    seed: u64,
}

impl MaskedFrames {
    fn mask(&self, item: usize, update: usize) -> Vec<bool> {
        let n = self.targets[item].len();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ ((update as u64) << 32) ^ item as u64);
        let mut mask = vec![false; n];
        let starts = ((n as f64 * MASK_RATE / MASK_SPAN as f64).ceil() as usize).max(1);
        for _ in 0..starts {
            let s = rng.random_range(0..n);
            for m in mask.iter_mut().skip(s).take(MASK_SPAN) {
                *m = true;
            }
        }
        mask
    }
}

impl Objective for MaskedFrames {
    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn tokens(&self, item: usize, update: usize) -> usize {
        self.mask(item, update).iter().filter(|&&m| m).count()
    }

    fn loss(&self, model: &PcModel, tape: &mut Tape, item: usize, update: usize, scale: f64) -> Result<Var> {
        let mask = self.mask(item, update);
        let mut input = self.inputs[item].clone();
        let cols = input.cols();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                input.data_mut()[r * cols..(r + 1) * cols].fill(0.0);
            }
        }
        let h = model.encode_tensor(tape, input);
        let logits = self.probe.forward(tape, h);
        let targets: Vec<Option<usize>> = mask
            .iter()
            .zip(&self.targets[item])
            .map(|(&m, &t)| m.then_some(t))
            .collect();
        Ok(tape.cross_entropy(logits, &targets, scale))
    }
}

/// Masked-span pretraining of a fresh model's encoder: zero out random spans
/// of encoder positions and classify the unit of each masked position with a
/// linear probe, which is discarded. Only the encoder of the returned model
/// is trained. Load the result with
/// [`PcModel::load_encoder`].
pub fn pretrain_encoder_masked(
    config: &PcConfig,
    corpus: &[FeatureSequence],
    codebook: &Codebook,
    train: &TrainConfig,
) -> Result<(PcModel, Vec<LogRecord>)> {
    if codebook.k() != config.k {
        return Err(Error::config("codebook size differs from the model's unit count"));
    }
    let mut model = PcModel::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed ^ 0x5eed);
    let probe = Linear::new(&mut model.store, "probe", config.model_dim, config.k, true, &mut rng);
    let mut inputs = Vec::with_capacity(corpus.len());
    let mut targets = Vec::with_capacity(corpus.len());
    for f in corpus {
        let units = quantize(f, codebook)?;
        targets.push(units.units.iter().step_by(config.stack).copied().collect());
        inputs.push(model.encoder_input(f)?);
    }
    let objective = MaskedFrames {
        inputs,
        targets,
        probe,
        seed: train.seed,
    };
    let out = optimize(&mut model, &objective, train, |_| Ok(None))?;
    let mut encoder = PcModel::new(config.clone())?;
    encoder.load_encoder(&model)?;
    Ok((encoder, out.log))
}
