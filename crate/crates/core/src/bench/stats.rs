//! Summary statistics and the exact sign test.

use crate::error::{Error, Result};

/// One-sided exact binomial tail `P(X ≥ successes)` for `X ~ Bin(successes + failures, 1/2)`.
pub fn sign_test(successes: u64, failures: u64) -> Result<f64> {
    let n = successes + failures;
    if n == 0 {
        return Err(Error::InvalidArgument("sign test needs at least one trial".into()));
    }
    if successes == 0 {
        return Ok(1.0);
    }
    // log C(n, k) built up term by term, then a log-sum-exp over the tail
    let ln2n = n as f64 * std::f64::consts::LN_2;
    let mut log_choose = 0.0;
    let mut terms = Vec::with_capacity((n - successes + 1) as usize);
    for k in 0..=n {
        if k > 0 {
            log_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= successes {
            terms.push(log_choose - ln2n);
        }
    }
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let p = max.exp() * terms.iter().map(|t| (t - max).exp()).sum::<f64>();
    Ok(p.min(1.0))
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (`n - 1` denominator).
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn std_error(xs: &[f64]) -> f64 {
    sample_std(xs) / (xs.len() as f64).sqrt()
}

/// Standard error of `mean(a) - mean(b)` using the pooled variance.
pub fn pooled_std_error(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    if a.len() < 2 || b.len() < 2 {
        return f64::NAN;
    }
    let pooled = ((na - 1.0) * sample_std(a).powi(2) + (nb - 1.0) * sample_std(b).powi(2)) / (na + nb - 2.0);
    (pooled * (1.0 / na + 1.0 / nb)).sqrt()
}
