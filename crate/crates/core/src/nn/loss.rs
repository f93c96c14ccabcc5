//! Losses returning `(value, d value / d input)`.

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-log softmax(logits)[class]`, stabilized by log-sum-exp.
pub fn softmax_cross_entropy(logits: &[f64], class: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = lse - logits[class];
    let mut grad: Vec<f64> = logits.iter().map(|&z| (z - lse).exp()).collect();
    grad[class] -= 1.0;
    (loss, grad)
}

/// Binary cross-entropy of `sigmoid(logit)` against `target` in {0, 1}.
pub fn binary_cross_entropy(logit: f64, target: f64) -> (f64, f64) {
    // log(1 + e^z) - y z, written to avoid overflow
    let softplus = logit.max(0.0) + (-logit.abs()).exp().ln_1p();
    (softplus - target * logit, sigmoid(logit) - target)
}

/// `max(0, 1 - y s)^2` for `y` in {-1, +1}.
pub fn quadratic_hinge(score: f64, target: f64) -> (f64, f64) {
    let margin = 1.0 - target * score;
    if margin > 0.0 {
        (margin * margin, -2.0 * margin * target)
    } else {
        (0.0, 0.0)
    }
}
