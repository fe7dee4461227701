use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unitac_nn::checkpoint::{read_checkpoint, write_checkpoint};
use unitac_nn::layers::{AttentionConfig, DecoderLayer, Embedding, EncoderLayer, LayerNorm, Linear};
use unitac_nn::optim::Adam;
use unitac_nn::{ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::s2u::UnitId;
use crate::synth::FeatureSequence;

/// Unit vocabulary: ids `0..k` are units, followed by PAD, BOS and EOS.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub k: usize,
}

impl Vocab {
    pub fn pad(&self) -> usize {
        self.k
    }

    pub fn bos(&self) -> usize {
        self.k + 1
    }

    pub fn eos(&self) -> usize {
        self.k + 2
    }

    pub fn size(&self) -> usize {
        self.k + 3
    }

    pub fn is_unit(&self, t: usize) -> bool {
        t < self.k
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PcConfig {
    pub feature_dim: usize,
    pub k: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub rel_window: usize,
    /// Consecutive input frames concatenated into one encoder position.
    pub stack: usize,
    /// Add sinusoidal absolute positions to encoder and decoder inputs.
    pub abs_positions: bool,
    pub init_seed: u64,
}

impl Default for PcConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            k: 100,
            model_dim: 64,
            heads: 4,
            ffn_dim: 256,
            enc_layers: 2,
            dec_layers: 2,
            rel_window: 16,
            stack: 1,
            abs_positions: true,
            init_seed: 0,
        }
    }
}

impl PcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.model_dim == 0 || self.ffn_dim == 0 || self.stack == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.k < 2 {
            return Err(Error::config("need at least two units"));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab { k: self.k }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: PcConfig,
    max_decode_len: usize,
}

/// Encoder-decoder transformer from accented frames to native units.
#[derive(Clone, Debug)]
pub struct PcModel {
    pub config: PcConfig,
    pub store: ParamStore,
    /// Decoding cap, normally four times the median training target length.
    pub max_decode_len: usize,
    proj: Linear,
    encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    embed: Embedding,
    decoder: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    head: Linear,
}

fn sinusoid(len: usize, dim: usize) -> Tensor {
    let mut out = Tensor::zeros(&[len, dim]);
    let data = out.data_mut();
    for pos in 0..len {
        for i in (0..dim).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / dim as f64);
            data[pos * dim + i] = angle.sin();
            if i + 1 < dim {
                data[pos * dim + i + 1] = angle.cos();
            }
        }
    }
    out
}

impl PcModel {
    pub fn new(config: PcConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let d = config.model_dim;
        let attn = AttentionConfig {
            heads: config.heads,
            model_dim: d,
            rel_window: Some(config.rel_window),
        };
        let proj = Linear::new(&mut store, "enc.proj", config.feature_dim * config.stack, d, true, &mut rng);
        let encoder = (0..config.enc_layers)
            .map(|i| EncoderLayer::new(&mut store, &format!("enc.layer{i}"), attn, config.ffn_dim, &mut rng))
            .collect();
        let enc_norm = LayerNorm::new(&mut store, "enc.norm", d);
        let embed = Embedding::new(&mut store, "dec.embed", config.vocab().size(), d, &mut rng);
        let decoder = (0..config.dec_layers)
            .map(|i| DecoderLayer::new(&mut store, &format!("dec.layer{i}"), attn, config.ffn_dim, &mut rng))
            .collect();
        let dec_norm = LayerNorm::new(&mut store, "dec.norm", d);
        let head = Linear::new(&mut store, "dec.head", d, config.vocab().size(), true, &mut rng);
        Ok(Self {
            config,
            store,
            max_decode_len: 256,
            proj,
            encoder,
            enc_norm,
            embed,
            decoder,
            dec_norm,
            head,
        })
    }

    pub fn vocab(&self) -> Vocab {
        self.config.vocab()
    }

    pub fn model_dim(&self) -> usize {
        self.config.model_dim
    }

    /// Stacked, zero-padded encoder input `[ceil(T / stack), stack * D]`.
    pub fn encoder_input(&self, features: &FeatureSequence) -> Result<Tensor> {
        let (d, s) = (self.config.feature_dim, self.config.stack);
        if features.dim() != d {
            return Err(Error::data(format!("model expects {d}-dim frames, got {}", features.dim())));
        }
        if features.is_empty() {
            return Err(Error::data("cannot encode an empty feature sequence"));
        }
        let rows = features.len().div_ceil(s);
        let mut data = features.as_slice().to_vec();
        data.resize(rows * s * d, 0.0);
        Ok(Tensor::from_vec(&[rows, s * d], data))
    }

    /// Encoder over an explicit input tensor (see [`Self::encoder_input`]).
    pub fn encode_tensor(&self, tape: &mut Tape, input: Tensor) -> Var {
        let rows = input.rows();
        let x = tape.constant(input);
        let mut h = self.proj.forward(tape, x);
        if self.config.abs_positions {
            let pe = tape.constant(sinusoid(rows, self.model_dim()));
            h = tape.add(h, pe);
        }
        for layer in &self.encoder {
            h = layer.forward(tape, h);
        }
        self.enc_norm.forward(tape, h)
    }

    pub fn encode(&self, tape: &mut Tape, features: &FeatureSequence) -> Result<Var> {
        let input = self.encoder_input(features)?;
        Ok(self.encode_tensor(tape, input))
    }

    /// Decoder logits `[tokens.len(), vocab]`. With `memory == None` the
    /// decoder runs as a causal language model.
    pub fn decode_logits(&self, tape: &mut Tape, memory: Option<Var>, tokens: &[usize]) -> Var {
        let e = self.embed.forward(tape, tokens);
        let mut h = tape.scale(e, (self.model_dim() as f64).sqrt());
        if self.config.abs_positions {
            let pe = tape.constant(sinusoid(tokens.len(), self.model_dim()));
            h = tape.add(h, pe);
        }
        for layer in &self.decoder {
            h = layer.forward(tape, h, memory);
        }
        let h = self.dec_norm.forward(tape, h);
        self.head.forward(tape, h)
    }

    /// `(decoder input, decoder targets)` for teacher forcing: BOS-prefixed
    /// input and EOS-terminated targets.
    pub fn teacher_forcing(&self, units: &[UnitId]) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
        let v = self.vocab();
        if let Some(&u) = units.iter().find(|&&u| !v.is_unit(u)) {
            return Err(Error::data(format!("unit {u} outside vocabulary of {} units", v.k)));
        }
        let mut input = Vec::with_capacity(units.len() + 1);
        input.push(v.bos());
        input.extend_from_slice(units);
        let mut target: Vec<Option<usize>> = units.iter().map(|&u| Some(u)).collect();
        target.push(Some(v.eos()));
        Ok((input, target))
    }

    /// Log-probability of every target token (units then EOS) in one pass.
    pub fn token_log_probs(&self, features: &FeatureSequence, units: &[UnitId]) -> Result<Vec<f64>> {
        let (input, target) = self.teacher_forcing(units)?;
        let mut tape = Tape::new(&self.store);
        let mem = self.encode(&mut tape, features)?;
        let logits = self.decode_logits(&mut tape, Some(mem), &input);
        let lv = tape.value(logits);
        Ok(target
            .iter()
            .enumerate()
            .map(|(i, t)| unitac_nn::loss::log_softmax(lv.row(i))[t.expect("every position is scored")])
            .collect())
    }

    /// Copy decoder weights from a language-model pretrained model, leaving
    /// cross-attention and its norm at this model's initialization.
    pub fn load_decoder_lm(&mut self, lm: &PcModel) -> Result<usize> {
        self.load_filtered(lm, |n| n.starts_with("dec.") && !n.contains(".cross_attn.") && !n.contains(".norm2."))
    }

    /// Copy encoder weights from another model.
    pub fn load_encoder(&mut self, other: &PcModel) -> Result<usize> {
        self.load_filtered(other, |n| n.starts_with("enc."))
    }

    fn load_filtered(&mut self, other: &PcModel, keep: impl Fn(&str) -> bool) -> Result<usize> {
        let mut copied = 0;
        for (_, name, value) in other.store.iter() {
            if !keep(name) {
                continue;
            }
            let id = self
                .store
                .id(name)
                .ok_or_else(|| Error::config(format!("parameter {name} missing from target model")))?;
            if self.store.get(id).shape() != value.shape() {
                return Err(Error::config(format!("shape mismatch for {name}")));
            }
            *self.store.get_mut(id) = value.clone();
            copied += 1;
        }
        Ok(copied)
    }

    pub fn save(&self, path: &Path, optimizer: Option<&Adam>) -> Result<()> {
        let header = serde_json::to_string(&Header {
            config: self.config.clone(),
            max_decode_len: self.max_decode_len,
        })
        .expect("config serializes");
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        write_checkpoint(&mut w, &header, &self.store, optimizer)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, Option<Adam>)> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let ck = read_checkpoint(&mut BufReader::new(f))?;
        let header: Header =
            serde_json::from_str(&ck.header).map_err(|e| Error::data(format!("checkpoint header: {e}")))?;
        let mut model = Self::new(header.config)?;
        model.max_decode_len = header.max_decode_len;
        if ck.params.len() != model.store.len() {
            return Err(Error::data("checkpoint parameter count does not match its config"));
        }
        for (_, name, value) in ck.params.iter() {
            let id = model
                .store
                .id(name)
                .ok_or_else(|| Error::data(format!("unexpected parameter {name}")))?;
            if model.store.get(id).shape() != value.shape() {
                return Err(Error::data(format!("shape mismatch for {name}")));
            }
            *model.store.get_mut(id) = value.clone();
        }
        Ok((model, ck.optimizer))
    }
}
