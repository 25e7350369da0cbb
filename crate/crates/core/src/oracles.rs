//! Independent reference computations for the test suites.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::markov_chain::{transition_matrix, InvariantMeasure, TruncatedChain};

/// `γ_i = ∫_0^∞ [ν·b − (P(t) b)_i] dt` by composite Simpson's rule on
/// `[0, t_max]` with `P(t_k)` obtained by repeated multiplication with `P(step)`.
pub fn poisson_by_integration(chain: &TruncatedChain, nu: &InvariantMeasure, b: &[f64], t_max: f64, intervals: usize) -> Result<Vec<f64>> {
    let intervals = intervals + intervals % 2;
    let step = t_max / intervals as f64;
    let p_step = transition_matrix(chain, step)?;
    let n = chain.size();
    let mean: f64 = nu.nu.iter().zip(b).map(|(v, b)| v * b).sum();
    let mut pb = nalgebra::DVector::from_column_slice(b);
    let mut acc = vec![0.0; n];
    for k in 0..=intervals {
        let w = if k == 0 || k == intervals {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        for i in 0..n {
            acc[i] += w * (mean - pb[i]);
        }
        pb = &p_step * pb;
    }
    Ok(acc.into_iter().map(|v| v * step / 3.0).collect())
}

/// `exp(A t)` for `A = [[a, b], [0, c]]`.
pub fn expm_upper_triangular(a: f64, b: f64, c: f64, t: f64) -> DMatrix<f64> {
    let off = if (a - c).abs() < 1e-12 {
        b * t * (a * t).exp()
    } else {
        b * ((a * t).exp() - (c * t).exp()) / (a - c)
    };
    DMatrix::from_row_slice(2, 2, &[(a * t).exp(), off, 0.0, (c * t).exp()])
}

/// One-sample Kolmogorov–Smirnov statistic `sup |F_n − F|`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(k, x)| {
            let f = cdf(*x);
            (f - k as f64 / n).abs().max(((k + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic p-value of the KS statistic `d` on `n` samples.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Standard deviation of the fraction of `[0, T]` a stationary two-state
/// chain with rates `q12 = a`, `q21 = b` spends in state 1, for large `T`.
pub fn two_state_occupation_sd(a: f64, b: f64, horizon: f64) -> f64 {
    let (p1, p2) = (b / (a + b), a / (a + b));
    (2.0 * p1 * p2 / ((a + b) * horizon)).sqrt()
}

/// Birth–death invariant law from detailed balance `ν_{k+1} p̂_{k+1} = ν_k p̌_k`.
pub fn birth_death_balance(check_p: impl Fn(usize) -> f64, hat_p: impl Fn(usize) -> f64, terms: usize) -> Vec<f64> {
    let mut nu = vec![1.0];
    for k in 1..terms {
        let prev = nu[k - 1];
        nu.push(prev * check_p(k) / hat_p(k + 1));
    }
    let total: f64 = nu.iter().sum();
    nu.into_iter().map(|v| v / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ks_pvalue_reference_points() {
        // Classical critical values: λ = 1.36 at 5%, 1.63 at 1%.
        assert!((ks_pvalue(1.358 / 1e4f64.sqrt(), 10_000) - 0.05).abs() < 2e-3);
        assert!((ks_pvalue(1.628 / 1e4f64.sqrt(), 10_000) - 0.01).abs() < 1e-3);
    }

    #[test]
    fn expm_derivative_at_zero() {
        let h = 1e-6;
        let e = expm_upper_triangular(-1.0, 0.5, -2.0, h);
        assert!(((e[(0, 1)]) / h - 0.5).abs() < 1e-5);
    }
}
