//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value. [`Tape::backward`] walks the nodes in reverse, producing
//! gradients for the parameters of the borrowed [`ParamStore`]. Inputs that
//! are not parameters are constants.

use crate::attention::{self, AttentionShape};
use crate::error::{NnError, Result};
use crate::loss;
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};

/// Handle to a node of a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    Gelu {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        shape: AttentionShape,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        scale: f64,
    },
    Sum {
        x: Var,
    },
}

struct Node {
    // `None` for parameters, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(128),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced on tape");
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// `x [m,k] · w [k,n] (+ b [n])`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (m, k) = (xv.rows(), xv.cols());
        assert_eq!(wv.rows(), k, "linear: input dim {} vs weight {:?}", k, wv.shape());
        let n = wv.cols();
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), n, "linear: bias length");
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv);
            }
        }
        matmul_acc(xv.data(), wv.data(), &mut out, m, k, n);
        self.push(Tensor::from_vec(&[m, n], out), Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.linear_nobias(a, b)
    }

    fn linear_nobias(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        assert_eq!(bv.rows(), k, "matmul: inner dims {:?} x {:?}", av.shape(), bv.shape());
        let n = bv.cols();
        let mut out = vec![0.0; m * n];
        matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul { a, b })
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_map(a, b, |x, y| x + y);
        self.push(t, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_map(a, b, |x, y| x - y);
        self.push(t, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_map(a, b, |x, y| x * y);
        self.push(t, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = self.value(x);
        let t = Tensor::from_vec(xv.shape(), xv.data().iter().map(|v| v * s).collect());
        self.push(t, Op::Scale { x, s })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let t = Tensor::from_vec(xv.shape(), data);
        self.push(t, Op::Gelu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::from_vec(xv.shape(), xv.data().iter().map(|v| v.tanh()).collect());
        self.push(t, Op::Tanh { x })
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), n);
        assert_eq!(b.len(), n);
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        self.push(
            Tensor::from_vec(&[m, n], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Row lookup into `table [vocab, dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.gather(table, ids);
        self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Var {
        let t = self.gather(x, ids);
        self.push(
            t,
            Op::GatherRows {
                x,
                ids: ids.to_vec(),
            },
        )
    }

    fn gather(&self, x: Var, ids: &[usize]) -> Tensor {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < rows, "row id {id} out of range {rows}");
            out.extend_from_slice(xv.row(id));
        }
        Tensor::from_vec(&[ids.len(), d], out)
    }

    /// Multi-head scaled dot-product attention over projected `q`, `k`, `v`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        heads: usize,
        window: usize,
        causal: bool,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qv.cols(), kv.cols(), "attention: q/k model dims differ");
        assert_eq!(kv.shape(), vv.shape(), "attention: k/v shapes differ");
        let shape = AttentionShape {
            tq: qv.rows(),
            tk: kv.rows(),
            model_dim: qv.cols(),
            heads,
            window,
            causal,
        };
        let bias_data = bias.map(|b| self.value(b).data());
        let (out, probs) = attention::forward(&shape, qv.data(), kv.data(), vv.data(), bias_data);
        let t = Tensor::from_vec(&[shape.tq, shape.model_dim], out);
        self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                bias,
                shape,
                probs,
            },
        )
    }

    /// Summed token cross-entropy times `scale`. Rows whose target is `None`
    /// are ignored. Produces a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], scale: f64) -> Var {
        let lv = self.value(logits);
        let (m, n) = (lv.rows(), lv.cols());
        assert_eq!(targets.len(), m, "cross_entropy: one target per row");
        let mut probs = vec![0.0; m * n];
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let row = lv.row(i);
            loss::softmax_into(row, &mut probs[i * n..(i + 1) * n]);
            if let Some(t) = *t {
                assert!(t < n, "target {t} out of vocab {n}");
                total -= loss::log_softmax(row)[t];
            }
        }
        self.push(
            Tensor::from_vec(&[1], vec![total * scale]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                scale,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::from_vec(&[1], vec![s]), Op::Sum { x })
    }

    /// Reverse pass from a scalar node. Parameter gradients are returned in
    /// store order; constants receive none.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NnError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.data()[0].is_finite() {
            return Err(NnError::NonFinite(format!("loss is {}", lv.data()[0])));
        }
        let mut grads = self.params.zero_grads();
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => grads.get_mut(*id).add_assign(&g),
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
                    let mut dx = vec![0.0; m * k];
                    matmul_bt_acc(g.data(), wv.data(), &mut dx, m, n, k);
                    let mut dw = vec![0.0; k * n];
                    matmul_at_acc(xv.data(), g.data(), &mut dw, m, k, n);
                    accumulate(&mut adj, *x, Tensor::from_vec(&[m, k], dx));
                    accumulate(&mut adj, *w, Tensor::from_vec(&[k, n], dw));
                    if let Some(b) = b {
                        let mut db = vec![0.0; n];
                        for row in g.data().chunks(n) {
                            for (d, r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                        accumulate(&mut adj, *b, Tensor::from_vec(&[n], db));
                    }
                }
                Op::MatMul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let mut da = vec![0.0; m * k];
                    matmul_bt_acc(g.data(), bv.data(), &mut da, m, n, k);
                    let mut db = vec![0.0; k * n];
                    matmul_at_acc(av.data(), g.data(), &mut db, m, k, n);
                    accumulate(&mut adj, *a, Tensor::from_vec(&[m, k], da));
                    accumulate(&mut adj, *b, Tensor::from_vec(&[k, n], db));
                }
                Op::Add { a, b } => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Sub { a, b } => {
                    let neg = Tensor::from_vec(g.shape(), g.data().iter().map(|v| -v).collect());
                    accumulate(&mut adj, *a, g);
                    accumulate(&mut adj, *b, neg);
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = g.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    let db = g.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    accumulate(&mut adj, *a, Tensor::from_vec(g.shape(), da));
                    accumulate(&mut adj, *b, Tensor::from_vec(g.shape(), db));
                }
                Op::Scale { x, s } => {
                    let d = g.data().iter().map(|v| v * s).collect();
                    accumulate(&mut adj, *x, Tensor::from_vec(g.shape(), d));
                }
                Op::Gelu { x } => {
                    let xv = self.value(*x);
                    let d = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&g, &v)| {
                            let u = GELU_C * (v + GELU_A * v * v * v);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                            g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                        })
                        .collect();
                    accumulate(&mut adj, *x, Tensor::from_vec(g.shape(), d));
                }
                Op::Tanh { x } => {
                    let y = node.value.as_ref().expect("tanh value");
                    let d = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(g, t)| g * (1.0 - t * t))
                        .collect();
                    accumulate(&mut adj, *x, Tensor::from_vec(g.shape(), d));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gamma).data();
                    let (m, n) = (g.rows(), g.cols());
                    let mut dx = vec![0.0; m * n];
                    let mut dgamma = vec![0.0; n];
                    let mut dbeta = vec![0.0; n];
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let gr = g.row(i);
                        let xh = &xhat[i * n..(i + 1) * n];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            dgamma[j] += gr[j] * xh[j];
                            dbeta[j] += gr[j];
                            dxhat[j] = gr[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xh[j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            dx[i * n + j] = rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    accumulate(&mut adj, *x, Tensor::from_vec(&[m, n], dx));
                    accumulate(&mut adj, *gamma, Tensor::from_vec(&[n], dgamma));
                    accumulate(&mut adj, *beta, Tensor::from_vec(&[n], dbeta));
                }
                Op::Embedding { table: x, ids } | Op::GatherRows { x, ids } => {
                    let xv = self.value(*x);
                    let d = xv.cols();
                    let mut dt = Tensor::zeros(xv.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt.data_mut()[id * d..(id + 1) * d];
                        for (a, b) in dst.iter_mut().zip(g.row(r)) {
                            *a += b;
                        }
                    }
                    accumulate(&mut adj, *x, dt);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    bias,
                    shape,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let mut dq = vec![0.0; qv.numel()];
                    let mut dk = vec![0.0; kv.numel()];
                    let mut dv = vec![0.0; vv.numel()];
                    let mut db = bias.map(|_| vec![0.0; shape.heads * shape.buckets()]);
                    attention::backward(
                        shape,
                        qv.data(),
                        kv.data(),
                        vv.data(),
                        probs,
                        g.data(),
                        &mut dq,
                        &mut dk,
                        &mut dv,
                        db.as_deref_mut(),
                    );
                    let (qs, ks) = (qv.shape().to_vec(), kv.shape().to_vec());
                    accumulate(&mut adj, *q, Tensor::from_vec(&qs, dq));
                    accumulate(&mut adj, *k, Tensor::from_vec(&ks, dk));
                    accumulate(&mut adj, *v, Tensor::from_vec(&ks, dv));
                    if let (Some(b), Some(db)) = (bias, db) {
                        let bs = self.value(*b).shape().to_vec();
                        accumulate(&mut adj, *b, Tensor::from_vec(&bs, db));
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    scale,
                } => {
                    let n = self.value(*logits).cols();
                    let up = g.data()[0] * scale;
                    let mut d = vec![0.0; probs.len()];
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..n {
                            d[i * n + j] = up * probs[i * n + j];
                        }
                        d[i * n + t] -= up;
                    }
                    let shape = self.value(*logits).shape().to_vec();
                    accumulate(&mut adj, *logits, Tensor::from_vec(&shape, d));
                }
                Op::Sum { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut adj, *x, Tensor::filled(&shape, g.data()[0]));
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
