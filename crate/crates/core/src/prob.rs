//! Softmax, Shannon entropy and argmax over class-score vectors.
//!
//! All logarithms are natural, so the entropy of a distribution over `n`
//! classes lies in `[0, ln n]`.

use crate::error::{Error, Result};

/// Max-subtracted softmax, evaluated in f64.
pub fn softmax(logits: &[f32]) -> Result<Vec<f32>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| (e / sum) as f32).collect())
}

/// `ln n`, the entropy of the uniform distribution over `n` classes.
pub fn max_entropy(num_classes: usize) -> f32 {
    (num_classes as f64).ln() as f32
}

/// `H(p) = -sum p_i ln p_i` with `0 ln 0 = 0`.
///
/// `p` must be non-negative and sum to one within `1e-5`. The result is
/// clamped to `[0, ln n]` to absorb rounding.
pub fn entropy(p: &[f32]) -> Result<f32> {
    check_distribution(p)?;
    let h: f64 = p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let v = v as f64;
            -v * v.ln()
        })
        .sum();
    Ok((h as f32).clamp(0.0, max_entropy(p.len())))
}

pub(crate) fn check_distribution(p: &[f32]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution("empty".into()));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidDistribution(
            "negative or non-finite entry".into(),
        ));
    }
    let sum: f64 = p.iter().map(|&v| v as f64).sum();
    if (sum - 1.0).abs() > 1e-5 {
        return Err(Error::InvalidDistribution(format!("sums to {sum}")));
    }
    Ok(())
}

/// Entropy of a softmax output `probs`, used for exit gating.
///
/// The softmax of finite logits has every `p_i > 0`, so its entropy is
/// strictly positive even when f32 rounding produces an exact one-hot vector;
/// the result is floored at the smallest positive normal f32. A threshold of
/// zero therefore never admits an exit, and `ln n` always does.
pub fn gate_entropy(probs: &[f32]) -> Result<f32> {
    Ok(entropy(probs)?.max(f32::MIN_POSITIVE))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
