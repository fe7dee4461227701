use crate::params::{Grads, ParamStore};
use crate::tensor::Tensor;

/// Linear decay from `peak` at update 0 to zero at `total` updates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearDecay {
    pub peak: f64,
    pub total: usize,
}

impl LinearDecay {
    pub fn lr(&self, update: usize) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let frac = 1.0 - update as f64 / self.total as f64;
        self.peak * frac.max(0.0)
    }
}

/// Scale `grads` in place so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = grads.get(id).data();
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_decay_endpoints() {
        let s = LinearDecay { peak: 1e-3, total: 100 };
        assert_eq!(s.lr(0), 1e-3);
        assert!((s.lr(50) - 5e-4).abs() < 1e-18);
        assert_eq!(s.lr(100), 0.0);
        assert_eq!(s.lr(150), 0.0);
    }

    #[test]
    fn zero_lr_leaves_params_bit_identical() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_vec(&[3], vec![0.1, -2.5, 3.3]));
        let before = store.get(id).clone();
        let mut grads = store.zero_grads();
        grads.get_mut(id).data_mut().copy_from_slice(&[1.0, -4.0, 0.25]);
        let mut adam = Adam::new(&store);
        for _ in 0..5 {
            adam.update(&mut store, &grads, 0.0);
        }
        assert_eq!(store.get(id), &before);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_vec(&[2], vec![1.0, 1.0]));
        let mut grads = store.zero_grads();
        grads.get_mut(id).data_mut().copy_from_slice(&[2.0, -2.0]);
        let mut adam = Adam::new(&store);
        adam.update(&mut store, &grads, 0.1);
        let p = store.get(id).data();
        // first Adam step is lr * sign(g)
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::zeros(&[2]));
        let mut grads = store.zero_grads();
        grads.get_mut(id).data_mut().copy_from_slice(&[3.0, 4.0]);
        let before = clip_grad_norm(&mut grads, 1.0);
        assert_eq!(before, 5.0);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    }
}
