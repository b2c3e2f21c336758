//! Numerically stable scalar helpers shared across the crate.

/// Logistic function `1 / (1 + exp(-z))`.
///
/// For `z < 0` the value is computed as `1 - sigmoid(-z)`; the subtraction is
/// exact (Sterbenz), so `sigmoid(z) + sigmoid(-z) == 1.0` holds bitwise for
/// every finite `z`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        1.0 - 1.0 / (1.0 + z.exp())
    }
}

/// `ln(1 + exp(z))` without overflow for large `|z|`.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `ln(sigmoid(z)) = -softplus(-z)`.
pub fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

/// Writes `log softmax(logits)` into `out`.
pub fn log_softmax_into(logits: &[f64], out: &mut [f64]) {
    debug_assert_eq!(logits.len(), out.len());
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &z in logits {
        sum += (z - max).exp();
    }
    let log_z = max + sum.ln();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = z - log_z;
    }
}

/// Writes `softmax(logits)` into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    log_softmax_into(logits, out);
    for p in out.iter_mut() {
        *p = p.exp();
    }
}

/// Sample mean and standard error of the mean (ddof = 1).
///
/// Returns `(0.0, 0.0)` for an empty slice and stderr `0.0` for a singleton.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}
