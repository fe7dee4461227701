//! Transformer building blocks over a [`Tape`]. Every block owns only
//! [`ParamId`]s; values live in the [`ParamStore`] the tape borrows.

use rand::Rng;

use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add_normal(format!("{name}.w"), &[input, output], (input as f64).powf(-0.5), rng);
        let b = bias.then(|| store.add_filled(format!("{name}.b"), &[output], 0.0));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.w);
        let b = self.b.map(|b| tape.param(b));
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_filled(format!("{name}.gamma"), &[dim], 1.0),
            beta: store.add_filled(format!("{name}.beta"), &[dim], 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            table: store.add_normal(format!("{name}.table"), &[vocab, dim], (dim as f64).powf(-0.5), rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ids: &[usize]) -> Var {
        let t = tape.param(self.table);
        tape.embedding(t, ids)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.up.forward(tape, x);
        let h = tape.gelu(h);
        self.down.forward(tape, h)
    }
}

/// Multi-head attention settings. `rel_window` enables a learned bias per
/// head for every clamped offset in `[-R, R]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    pub model_dim: usize,
    pub rel_window: Option<usize>,
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub config: AttentionConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub rel_bias: Option<ParamId>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, config: AttentionConfig, rng: &mut R) -> Self {
        assert!(config.heads > 0, "attention needs at least one head");
        assert_eq!(
            config.model_dim % config.heads,
            0,
            "model_dim {} not divisible by heads {}",
            config.model_dim,
            config.heads
        );
        let d = config.model_dim;
        let rel_bias = config
            .rel_window
            .map(|r| store.add_filled(format!("{name}.rel_bias"), &[config.heads, 2 * r + 1], 0.0));
        Self {
            config,
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng),
            // a key bias only shifts each logit row by a constant
            k: Linear::new(store, &format!("{name}.k"), d, d, false, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, true, rng),
            rel_bias,
        }
    }

    /// `query [tq, d]` attends over `memory [tk, d]` (self-attention when equal).
    pub fn forward(&self, tape: &mut Tape, query: Var, memory: Var, causal: bool) -> Var {
        let q = self.q.forward(tape, query);
        let k = self.k.forward(tape, memory);
        let v = self.v.forward(tape, memory);
        let bias = self.rel_bias.map(|b| tape.param(b));
        let window = self.config.rel_window.unwrap_or(0);
        let a = tape.attention(q, k, v, bias, self.config.heads, window, causal);
        self.out.forward(tape, a)
    }
}

/// Pre-norm encoder block: self-attention then feed-forward, both residual.
#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        attn: AttentionConfig,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Self {
        let d = attn.model_dim;
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), attn, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn_dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.norm1.forward(tape, x);
        let h = self.attn.forward(tape, h, h, false);
        let x = tape.add(x, h);
        let h = self.norm2.forward(tape, x);
        let h = self.ffn.forward(tape, h);
        tape.add(x, h)
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention over the
/// encoder memory, feed-forward.
#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        attn: AttentionConfig,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Self {
        let d = attn.model_dim;
        let cross = AttentionConfig {
            rel_window: None,
            ..attn
        };
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), attn, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), cross, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, ffn_dim, rng),
        }
    }

    /// With `memory == None` the cross-attention sublayer is skipped, which
    /// turns the block into a plain causal language-model layer.
    pub fn forward(&self, tape: &mut Tape, x: Var, memory: Option<Var>) -> Var {
        let h = self.norm1.forward(tape, x);
        let h = self.self_attn.forward(tape, h, h, true);
        let mut x = tape.add(x, h);
        if let Some(mem) = memory {
            let h = self.norm2.forward(tape, x);
            let h = self.cross_attn.forward(tape, h, mem, false);
            x = tape.add(x, h);
        }
        let h = self.norm3.forward(tape, x);
        let h = self.ffn.forward(tape, h);
        tape.add(x, h)
    }
}
