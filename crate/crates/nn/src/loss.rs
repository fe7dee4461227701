/// Numerically stable log-softmax of one row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&x| (x - max).exp()).sum();
    let log_z = max + sum.ln();
    logits.iter().map(|&x| x - log_z).collect()
}

/// Softmax of one row, written into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(logits) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Cross-entropy of a single row against `target`.
///
/// Returns `(-log softmax(logits)[target], softmax(logits) - one_hot(target))`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    assert!(
        target < logits.len(),
        "target {target} out of range for {} classes",
        logits.len()
    );
    let mut grad = vec![0.0; logits.len()];
    softmax_into(logits, &mut grad);
    let ls = log_softmax(logits);
    grad[target] -= 1.0;
    (-ls[target], grad)
}
