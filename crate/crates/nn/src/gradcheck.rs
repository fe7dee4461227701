//! Central finite-difference gradient checking.

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over checked entries of `|g_a - g_fd| / max(1e-8, |g_a| + |g_fd|)`
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Var,
{
    let mut tape = Tape::new(store);
    let loss = f(&mut tape);
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(NnError::Shape(format!("loss must be scalar, got {:?}", v.shape())));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(NnError::NonFinite(format!("loss is {v}")));
    }
    Ok(v)
}

/// Compare the tape gradient of the scalar built by `f` against central
/// differences with step `eps`, for every scalar of every parameter.
pub fn grad_check<F>(store: &ParamStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Var,
{
    grad_check_strided(store, eps, 1, f)
}

/// Like [`grad_check`] but only probes every `stride`-th scalar of each tensor.
pub fn grad_check_strided<F>(store: &ParamStore, eps: f64, stride: usize, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Var,
{
    assert!(stride >= 1);
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape);
        tape.backward(loss)?
    };
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(&work, &f)?;
            work.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(&work, &f)?;
            work.get_mut(id).data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let ga = analytic.get(id).data()[i];
            let rel = (ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
