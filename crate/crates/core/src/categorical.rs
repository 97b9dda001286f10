//! Categorical-distribution primitives on plain slices.
//!
//! Masking adds [`MASK_FILL`] to excluded logits instead of using `-inf`, so
//! every intermediate stays finite while excluded entries still normalize to
//! probabilities that are exactly zero.

use crate::error::NumericError;

/// Additive logit for masked-out entries.
pub const MASK_FILL: f64 = -1e30;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn log_softmax_into(x: &[f64], mask: Option<&[bool]>, out: &mut [f64]) -> Result<(), NumericError> {
    let valid = |i: usize| mask.is_none_or(|m| m[i]);
    if !(0..x.len()).any(valid) {
        return Err(NumericError::InvalidMask("every entry is masked".into()));
    }
    let z = |i: usize| if valid(i) { x[i] } else { x[i] + MASK_FILL };
    let m = (0..x.len()).filter(|&i| valid(i)).map(|i| x[i]).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = (0..x.len()).filter(|&i| valid(i)).map(|i| (x[i] - m).exp()).sum();
    let lse = m + s.ln();
    for (i, o) in out.iter_mut().enumerate() {
        *o = z(i) - lse;
    }
    Ok(())
}

pub(crate) fn kl_from_log_probs(logp: &[f64], logq: &[f64], mask: Option<&[bool]>) -> f64 {
    let mut kl = 0.0;
    for i in 0..logp.len() {
        if mask.is_none_or(|m| m[i]) {
            kl += logp[i].exp() * (logp[i] - logq[i]);
        }
    }
    // roundoff can leave a value of order -1e-17 for near-identical inputs
    kl.max(0.0)
}

fn check_mask(len: usize, mask: Option<&[bool]>) -> Result<(), NumericError> {
    match mask {
        Some(m) if m.len() != len => Err(NumericError::Dimension(format!("mask len {} vs {len}", m.len()))),
        _ => Ok(()),
    }
}

/// Log-softmax of `logits`; masked entries end up near `-1e30`.
pub fn log_softmax(logits: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>, NumericError> {
    check_mask(logits.len(), mask)?;
    let mut out = vec![0.0; logits.len()];
    log_softmax_into(logits, mask, &mut out)?;
    Ok(out)
}

pub fn softmax(logits: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>, NumericError> {
    Ok(log_softmax(logits, mask)?.into_iter().map(f64::exp).collect())
}

/// `KL(softmax(p) || softmax(q))` over the unmasked support.
pub fn kl_categorical(p_logits: &[f64], q_logits: &[f64], mask: Option<&[bool]>) -> Result<f64, NumericError> {
    if p_logits.len() != q_logits.len() {
        return Err(NumericError::Dimension(format!(
            "kl: {} vs {} logits",
            p_logits.len(),
            q_logits.len()
        )));
    }
    let lp = log_softmax(p_logits, mask)?;
    let lq = log_softmax(q_logits, mask)?;
    Ok(kl_from_log_probs(&lp, &lq, mask))
}

/// KL between two probability vectors; zero-probability terms of `p` contribute nothing.
pub fn kl_probs(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a.ln() - b.max(f64::MIN_POSITIVE).ln()))
        .sum::<f64>()
        .max(0.0)
}

/// Jensen-Shannon divergence (natural log) of two probability vectors.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    (0.5 * kl_probs(p, &m) + 0.5 * kl_probs(q, &m)).max(0.0)
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_pair_is_half_half() {
        let out = log_softmax(&[0.0, 0.0], None).unwrap();
        assert!((out[0] - 0.5f64.ln()).abs() < 1e-15);
        assert!((out[1] - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn forced_single_entry() {
        let p = softmax(&[3.0, -1.0, 0.2, 7.0], Some(&[false, false, true, false])).unwrap();
        assert_eq!(p, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn matches_direct_summation() {
        let x = [1.0f64, 2.0, 3.0];
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        let p = softmax(&x, None).unwrap();
        for (pi, xi) in p.iter().zip(x) {
            assert!((pi - xi.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_of_identical_is_exactly_zero() {
        let x = [0.3, -1.2, 2.5, 0.0];
        assert_eq!(kl_categorical(&x, &x, None).unwrap(), 0.0);
    }

    #[test]
    fn kl_half_half_vs_quarter() {
        let p = [0.5f64.ln(), 0.5f64.ln()];
        let q = [0.25f64.ln(), 0.75f64.ln()];
        let oracle = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        let kl = kl_categorical(&p, &q, None).unwrap();
        assert!((kl - oracle).abs() < 1e-12);
        assert!((kl - 0.14384).abs() < 1e-5);
    }

    #[test]
    fn kl_length_mismatch() {
        assert!(matches!(
            kl_categorical(&[0.0; 3], &[0.0; 2], None),
            Err(NumericError::Dimension(_))
        ));
    }

    #[test]
    fn softplus_extremes() {
        assert_eq!(softplus(-800.0), 0.0);
        assert_eq!(softplus(800.0), 800.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn js_is_symmetric_and_bounded() {
        let p = [0.7, 0.2, 0.1];
        let q = [0.1, 0.1, 0.8];
        let a = js_divergence(&p, &q);
        assert!((a - js_divergence(&q, &p)).abs() < 1e-15);
        assert!(a > 0.0 && a <= 2f64.ln());
    }
}
