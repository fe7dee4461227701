//! Scaled dot-product multi-head attention kernels with a clamped relative
//! position bias.
//!
//! Inputs are already-projected `q [tq, dm]`, `k [tk, dm]`, `v [tk, dm]`; the
//! model dimension is split into `heads` contiguous slices. The optional bias
//! table has shape `[heads, 2R+1]` and is indexed by `clamp(j - i, -R, R) + R`.

/// Shape parameters of one attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub tq: usize,
    pub tk: usize,
    pub model_dim: usize,
    pub heads: usize,
    /// Relative window `R`; only meaningful when a bias table is supplied.
    pub window: usize,
    pub causal: bool,
}

impl AttentionShape {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn buckets(&self) -> usize {
        2 * self.window + 1
    }

    #[inline]
    pub fn bucket(&self, i: usize, j: usize) -> usize {
        let r = self.window as isize;
        let off = (j as isize - i as isize).clamp(-r, r);
        (off + r) as usize
    }

    /// Number of visible keys for query `i`.
    #[inline]
    fn visible(&self, i: usize) -> usize {
        if self.causal {
            (i + 1).min(self.tk)
        } else {
            self.tk
        }
    }
}

/// Returns `(output [tq, dm], probs [heads, tq, tk])`. Masked entries of
/// `probs` are exactly zero.
pub fn forward(
    s: &AttentionShape,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    bias: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let dm = s.model_dim;
    let dh = s.head_dim();
    assert_eq!(dm % s.heads, 0, "model_dim must be divisible by heads");
    assert_eq!(q.len(), s.tq * dm);
    assert_eq!(k.len(), s.tk * dm);
    assert_eq!(v.len(), s.tk * dm);
    if let Some(b) = bias {
        assert_eq!(b.len(), s.heads * s.buckets(), "bias table shape");
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; s.tq * dm];
    let mut probs = vec![0.0; s.heads * s.tq * s.tk];
    for h in 0..s.heads {
        let off = h * dh;
        for i in 0..s.tq {
            let qi = &q[i * dm + off..i * dm + off + dh];
            let row = &mut probs[(h * s.tq + i) * s.tk..(h * s.tq + i + 1) * s.tk];
            let vis = s.visible(i);
            let mut max = f64::NEG_INFINITY;
            for (j, r) in row.iter_mut().enumerate().take(vis) {
                let kj = &k[j * dm + off..j * dm + off + dh];
                let mut dot = 0.0;
                for (a, b) in qi.iter().zip(kj) {
                    dot += a * b;
                }
                let mut logit = dot * scale;
                if let Some(b) = bias {
                    logit += b[h * s.buckets() + s.bucket(i, j)];
                }
                *r = logit;
                max = max.max(logit);
            }
            let mut sum = 0.0;
            for r in row.iter_mut().take(vis) {
                *r = (*r - max).exp();
                sum += *r;
            }
            for r in row.iter_mut().take(vis) {
                *r /= sum;
            }
            let oi = &mut out[i * dm + off..i * dm + off + dh];
            for (j, &p) in row.iter().enumerate().take(vis) {
                let vj = &v[j * dm + off..j * dm + off + dh];
                for (o, x) in oi.iter_mut().zip(vj) {
                    *o += p * x;
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of [`forward`]. Accumulates into the provided buffers.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    s: &AttentionShape,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    d_out: &[f64],
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
    mut dbias: Option<&mut [f64]>,
) {
    let dm = s.model_dim;
    let dh = s.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; s.tk];
    for h in 0..s.heads {
        let off = h * dh;
        for i in 0..s.tq {
            let vis = s.visible(i);
            let row = &probs[(h * s.tq + i) * s.tk..(h * s.tq + i) * s.tk + vis];
            let doi = &d_out[i * dm + off..i * dm + off + dh];
            let mut weighted = 0.0;
            for (j, &p) in row.iter().enumerate() {
                let vj = &v[j * dm + off..j * dm + off + dh];
                let mut dot = 0.0;
                for (a, b) in doi.iter().zip(vj) {
                    dot += a * b;
                }
                dp[j] = dot;
                weighted += p * dot;
                let dvj = &mut dv[j * dm + off..j * dm + off + dh];
                for (d, g) in dvj.iter_mut().zip(doi) {
                    *d += p * g;
                }
            }
            for (j, &p) in row.iter().enumerate() {
                let ds = p * (dp[j] - weighted);
                if ds == 0.0 {
                    continue;
                }
                if let Some(db) = dbias.as_deref_mut() {
                    db[h * s.buckets() + s.bucket(i, j)] += ds;
                }
                let g = ds * scale;
                for c in 0..dh {
                    dq[i * dm + off + c] += g * k[j * dm + off + c];
                    dk[j * dm + off + c] += g * q[i * dm + off + c];
                }
            }
        }
    }
}
