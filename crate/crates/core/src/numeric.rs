//! Scalar helpers shared by the losses. All of them are written to stay finite
//! for logits of any magnitude.

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Binary cross-entropy of a logit against a (possibly soft) target,
/// `-(y ln σ(z) + (1-y) ln(1-σ(z)))`, evaluated without forming σ(z).
#[inline]
pub(crate) fn bce_with_logit(z: f64, target: f64) -> f64 {
    // -ln σ(z) = softplus(-z), -ln(1-σ(z)) = softplus(z)
    target * softplus(-z) + (1.0 - target) * softplus(z)
}

/// Softmax of `logits / temperature` written into `out`.
pub(crate) fn softmax_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    debug_assert_eq!(logits.len(), out.len());
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / temperature;
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l / temperature - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, temperature, &mut out);
    out
}

/// Log-softmax of `logits / temperature`.
pub(crate) fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / temperature;
    let lse = logits
        .iter()
        .map(|&l| (l / temperature - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits.iter().map(|&l| l / temperature - lse).collect()
}
