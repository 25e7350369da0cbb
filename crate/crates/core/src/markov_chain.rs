//! Finite truncations of the frozen generator `Q(0)`: invariant measures,
//! transition matrices, ergodicity diagnostics and the Poisson equation.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_row, RateKernel, Regime};

/// Tolerance on row sums of an accepted generator.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

/// The uniformization series stops once the remaining Poisson mass is below this.
pub const UNIFORMIZATION_TAIL: f64 = 1e-14;

/// `Λ t` handled by one uniformization series; longer times are split into
/// chunks and recombined by squaring.
const UNIFORMIZATION_CHUNK: f64 = 32.0;

const UNIFORMIZATION_MAX_TERMS: usize = 10_000;

/// Distances below this count as fully mixed and are left out of the fit.
pub const MIXED_THRESHOLD: f64 = 1e-14;

/// `ν·b` tolerated before the Poisson right-hand side is projected.
pub const CENTERING_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationMode {
    /// Discard out-of-range mass and repair the diagonal.
    Drop,
    /// Redirect out-of-range mass to the last retained state.
    #[default]
    Lump,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedChain {
    q: DMatrix<f64>,
    lumped_tail: bool,
    /// Largest off-truncation mass discarded from a single row.
    pub truncation_leak: f64,
    /// Largest off-truncation mass redirected into the last state from a single row.
    pub lumped_mass: f64,
}

impl TruncatedChain {
    /// Wraps an explicit generator after checking it.
    pub fn from_generator(q: DMatrix<f64>) -> Result<Self> {
        let n = q.nrows();
        if n == 0 || q.ncols() != n {
            return Err(Error::Domain(format!("generator must be square, got {}x{}", q.nrows(), q.ncols())));
        }
        for i in 0..n {
            let mut sum = 0.0;
            let mut scale = 0.0f64;
            for j in 0..n {
                let v = q[(i, j)];
                if !v.is_finite() {
                    return Err(Error::Evaluation(format!("Q[{i},{j}] = {v}")));
                }
                if i != j && v < 0.0 {
                    return Err(Error::Contract(format!("negative off-diagonal Q[{i},{j}] = {v}")));
                }
                sum += v;
                scale = scale.max(v.abs());
            }
            if sum.abs() > ROW_SUM_TOLERANCE * scale.max(1.0) {
                return Err(Error::Contract(format!("row {i} sums to {sum}")));
            }
        }
        Ok(TruncatedChain {
            q,
            lumped_tail: false,
            truncation_leak: 0.0,
            lumped_mass: 0.0,
        })
    }

    pub fn generator(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn size(&self) -> usize {
        self.q.nrows()
    }

    pub fn lumped_tail(&self) -> bool {
        self.lumped_tail
    }

    /// Uniformization rate `Λ = max_i |q_ii|`.
    pub fn uniformization_rate(&self) -> f64 {
        (0..self.size()).map(|i| self.q[(i, i)].abs()).fold(0.0, f64::max)
    }

    /// True when every state reaches every other state.
    pub fn is_irreducible(&self) -> bool {
        let n = self.size();
        let reach = |forward: bool| {
            let mut seen = vec![false; n];
            let mut queue = VecDeque::from([0usize]);
            seen[0] = true;
            while let Some(i) = queue.pop_front() {
                for j in 0..n {
                    let rate = if forward { self.q[(i, j)] } else { self.q[(j, i)] };
                    if i != j && rate > 0.0 && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
            seen.into_iter().all(|s| s)
        };
        reach(true) && reach(false)
    }
}

/// Builds the `N × N` surrogate of the kernel frozen at the origin of `R^dim`.
pub fn truncate(kernel: &dyn RateKernel, dim: usize, n: usize, mode: TruncationMode) -> Result<TruncatedChain> {
    truncate_at(kernel, &vec![0.0; dim], n, mode)
}

/// Builds the `N × N` surrogate of `Q(x)` at an arbitrary point.
pub fn truncate_at(kernel: &dyn RateKernel, x: &[f64], n: usize, mode: TruncationMode) -> Result<TruncatedChain> {
    if n < 2 {
        return Err(Error::Domain(format!("truncation size must be at least 2, got {n}")));
    }
    let mut q = DMatrix::zeros(n, n);
    let mut row = Vec::new();
    let mut leak = 0.0f64;
    let mut lumped = 0.0f64;
    for k in 0..n {
        let i = Regime::from_index(k);
        kernel.row(x, i, &mut row);
        check_row(&row, i)?;
        let mut outside = 0.0;
        for t in &row {
            if t.to.index() < n {
                q[(k, t.to.index())] += t.rate;
            } else {
                outside += t.rate;
            }
        }
        match mode {
            TruncationMode::Drop => leak = leak.max(outside),
            TruncationMode::Lump => {
                if k != n - 1 {
                    q[(k, n - 1)] += outside;
                }
                lumped = lumped.max(outside);
            }
        }
        let off: f64 = (0..n).filter(|&j| j != k).map(|j| q[(k, j)]).sum();
        q[(k, k)] = -off;
    }
    Ok(TruncatedChain {
        q,
        lumped_tail: mode == TruncationMode::Lump,
        truncation_leak: leak,
        lumped_mass: lumped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantMeasure {
    pub nu: Vec<f64>,
    /// `‖νQ‖_∞`.
    pub residual: f64,
    pub truncation_size: usize,
    /// The last entry carries the lumped tail mass rather than a single state.
    pub lumped_tail: bool,
}

impl InvariantMeasure {
    pub fn mass(&self) -> f64 {
        self.nu.iter().sum()
    }

    /// `ν_i` for a regime, zero outside the truncation.
    pub fn at(&self, i: Regime) -> f64 {
        self.nu.get(i.index()).copied().unwrap_or(0.0)
    }
}

/// Solves `νQ = 0`, `Σν = 1` by replacing one balance equation with the
/// normalization.
pub fn invariant_measure(chain: &TruncatedChain) -> Result<InvariantMeasure> {
    if !chain.is_irreducible() {
        return Err(Error::Structural(format!(
            "truncation of size {} is reducible",
            chain.size()
        )));
    }
    let n = chain.size();
    let mut a = chain.generator().transpose();
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let solution = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numeric("singular balance system".into()))?;
    let mut nu: Vec<f64> = solution.iter().copied().collect();
    if nu.iter().any(|v| !v.is_finite() || *v < -1e-12) {
        return Err(Error::Numeric(format!("balance solve produced an invalid measure: {nu:?}")));
    }
    for v in &mut nu {
        *v = v.max(0.0);
    }
    let total: f64 = nu.iter().sum();
    for v in &mut nu {
        *v /= total;
    }
    let residual = balance_residual(chain, &nu);
    Ok(InvariantMeasure {
        nu,
        residual,
        truncation_size: n,
        lumped_tail: chain.lumped_tail(),
    })
}

/// `‖νQ‖_∞`.
pub fn balance_residual(chain: &TruncatedChain, nu: &[f64]) -> f64 {
    let row = DVector::from_column_slice(nu).transpose() * chain.generator();
    row.amax()
}

/// Invariant law of a birth–death chain computed from its rate products.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BirthDeathMeasure {
    pub measure: InvariantMeasure,
    /// `Σ_{k=2}^K Π_{ℓ=2}^k p̌_{ℓ−1}(0) / p̂_ℓ(0)`.
    pub nu_star: f64,
    /// Largest ratio of consecutive product terms over the second half of the terms.
    pub tail_ratio: f64,
    /// Geometric estimate of the product mass beyond `K`, relative to the total.
    pub tail_estimate: f64,
    /// Total mass of the unnormalized reading `ν_1 = 1/ν*`, `ν_k = Π/ν*`;
    /// equals `(1 + ν*)/ν*`, so that reading is not a probability vector.
    pub unnormalized_total: f64,
    /// Which normalization the returned measure uses.
    pub normalization: &'static str,
    /// Max abs difference to the direct balance solve on the truncated chain.
    pub cross_check_error: f64,
}

/// Relative tail mass tolerated before more terms are demanded.
pub const BIRTH_DEATH_TAIL_TOLERANCE: f64 = 1e-6;

/// Invariant law of the chain with `q_{k,k+1} = p̌_k`, `q_{k,k−1} = p̂_k`
/// from the product formula `ν_k ∝ Π_{ℓ=2}^k p̌_{ℓ−1} / p̂_ℓ`, truncated at
/// `K` terms and normalized to a probability vector.
pub fn birth_death_invariant(
    check_p: &dyn Fn(Regime) -> f64,
    hat_p: &dyn Fn(Regime) -> f64,
    terms: usize,
) -> Result<BirthDeathMeasure> {
    if terms < 2 {
        return Err(Error::Domain(format!("need at least 2 terms, got {terms}")));
    }
    let mut products = vec![1.0f64];
    for k in 2..=terms {
        let up = check_p(Regime::from_index(k - 2));
        let down = hat_p(Regime::from_index(k - 1));
        if !(down > 0.0) {
            return Err(Error::Domain(format!("p̂_{k}(0) = {down} must be positive")));
        }
        if !(up >= 0.0) {
            return Err(Error::Domain(format!("p̌_{}(0) = {up} must be non-negative", k - 1)));
        }
        products.push(products[k - 2] * up / down);
    }
    let nu_star: f64 = products[1..].iter().sum();
    let half = terms / 2;
    let tail_ratio = (half.max(1)..terms)
        .filter(|&k| products[k - 1] > 0.0)
        .map(|k| products[k] / products[k - 1])
        .fold(0.0, f64::max);
    if !nu_star.is_finite() || tail_ratio >= 1.0 {
        return Err(Error::Ergodicity(format!(
            "rate products do not decay (tail ratio {tail_ratio}); the product sum diverges"
        )));
    }
    let total = 1.0 + nu_star;
    let last = products[terms - 1];
    let tail_estimate = last * tail_ratio / (1.0 - tail_ratio) / total;
    if tail_estimate > BIRTH_DEATH_TAIL_TOLERANCE {
        return Err(Error::Insufficient(format!(
            "{terms} terms leave an estimated relative tail mass {tail_estimate:e}"
        )));
    }
    let nu: Vec<f64> = products.iter().map(|p| p / total).collect();

    // Cross-check against the balance solve on the support of the products.
    let support = products.iter().take_while(|p| **p > 0.0).count();
    let cross_check_error = if support >= 2 {
        let mut q = DMatrix::zeros(support, support);
        for k in 0..support {
            if k + 1 < support {
                q[(k, k + 1)] = check_p(Regime::from_index(k));
            }
            if k > 0 {
                q[(k, k - 1)] = hat_p(Regime::from_index(k));
            }
            q[(k, k)] = -(q.row(k).sum());
        }
        let solved = invariant_measure(&TruncatedChain::from_generator(q)?)?;
        solved
            .nu
            .iter()
            .zip(&nu)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    } else {
        (nu[0] - 1.0).abs()
    };

    let chain_view = {
        let mut q = DMatrix::zeros(terms, terms);
        for k in 0..terms {
            if k + 1 < terms {
                q[(k, k + 1)] = check_p(Regime::from_index(k));
            }
            if k > 0 {
                q[(k, k - 1)] = hat_p(Regime::from_index(k));
            }
            q[(k, k)] = -(q.row(k).sum());
        }
        TruncatedChain::from_generator(q)?
    };
    let residual = balance_residual(&chain_view, &nu);
    Ok(BirthDeathMeasure {
        measure: InvariantMeasure {
            nu,
            residual,
            truncation_size: terms,
            lumped_tail: false,
        },
        nu_star,
        tail_ratio,
        tail_estimate,
        unnormalized_total: (1.0 + nu_star) / nu_star,
        normalization: "sum_to_one",
        cross_check_error,
    })
}

/// `P(t) = exp(Qt)` by uniformization: Poisson-weighted powers of
/// `I + Q/Λ`.
pub fn transition_matrix(chain: &TruncatedChain, t: f64) -> Result<DMatrix<f64>> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("time must be finite and non-negative, got {t}")));
    }
    let n = chain.size();
    let rate = chain.uniformization_rate();
    if t == 0.0 || rate == 0.0 {
        return Ok(DMatrix::identity(n, n));
    }
    let chunks = (rate * t / UNIFORMIZATION_CHUNK).ceil().max(1.0) as u64;
    let tau = t / chunks as f64;
    let p = uniformization_series(chain, rate, tau)?;
    Ok(matrix_power(p, chunks))
}

fn uniformization_series(chain: &TruncatedChain, rate: f64, tau: f64) -> Result<DMatrix<f64>> {
    let n = chain.size();
    let r = DMatrix::identity(n, n) + chain.generator() / rate;
    let a = rate * tau;
    let mut weight = (-a).exp();
    let mut cumulative = weight;
    let mut power = DMatrix::identity(n, n);
    let mut p = &power * weight;
    for k in 1..UNIFORMIZATION_MAX_TERMS {
        if 1.0 - cumulative < UNIFORMIZATION_TAIL && k as f64 > a {
            return Ok(p);
        }
        power = &power * &r;
        weight *= a / k as f64;
        cumulative += weight;
        p += &power * weight;
    }
    Err(Error::Numeric(format!(
        "uniformization did not converge within {UNIFORMIZATION_MAX_TERMS} terms (Λτ = {a})"
    )))
}

/// `P(t) − 𝟙ν`, computed as the power of `P(τ) − 𝟙ν` so that small
/// distances keep their relative accuracy instead of sinking into the
/// round-off of `P(t)`.
fn stationary_deviation(chain: &TruncatedChain, nu: &[f64], t: f64) -> Result<DMatrix<f64>> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("time must be finite and non-negative, got {t}")));
    }
    let n = chain.size();
    let pi = DMatrix::from_fn(n, n, |_, j| nu[j]);
    let rate = chain.uniformization_rate();
    if t == 0.0 || rate == 0.0 {
        return Ok(DMatrix::identity(n, n) - pi);
    }
    let chunks = (rate * t / UNIFORMIZATION_CHUNK).ceil().max(1.0) as u64;
    let p = uniformization_series(chain, rate, t / chunks as f64)?;
    Ok(matrix_power(p - pi, chunks))
}

fn max_row_abs_sum(d: &DMatrix<f64>) -> f64 {
    d.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

fn matrix_power(mut base: DMatrix<f64>, mut exp: u64) -> DMatrix<f64> {
    let n = base.nrows();
    let mut acc = DMatrix::identity(n, n);
    while exp > 0 {
        if exp & 1 == 1 {
            acc = &acc * &base;
        }
        exp >>= 1;
        if exp > 0 {
            base = &base * &base;
        }
    }
    acc
}

/// `d(t) = max_i Σ_j |p_ij(t) − ν_j|`.
pub fn distance_to_stationarity(p: &DMatrix<f64>, nu: &[f64]) -> f64 {
    (0..p.nrows())
        .map(|i| (0..p.ncols()).map(|j| (p[(i, j)] - nu[j]).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExponentialFit {
    pub c: f64,
    pub lambda: f64,
    pub r_squared: f64,
    pub points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErgodicityVerdict {
    StronglyExponentiallyErgodic,
    /// Distances fell below the mixing threshold before a fit was possible.
    Mixed,
    NotDemonstrated,
}

/// Fit quality required for the strong-exponential verdict.
pub const ERGODICITY_MIN_R_SQUARED: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErgodicityDiagnostic {
    pub times: Vec<f64>,
    pub distances: Vec<f64>,
    pub fit: Option<ExponentialFit>,
    pub verdict: ErgodicityVerdict,
}

/// Computes `d(t)` on the grid and fits `log d(t) ≈ log C − λ t` over the
/// latter half of the grid.
pub fn ergodicity_diagnostic(chain: &TruncatedChain, nu: &InvariantMeasure, times: &[f64]) -> Result<ErgodicityDiagnostic> {
    if times.len() < 2 {
        return Err(Error::Insufficient(format!(
            "the fit needs at least 2 grid times, got {}",
            times.len()
        )));
    }
    if nu.nu.len() != chain.size() {
        return Err(Error::Domain("measure and chain sizes differ".into()));
    }
    let mut times = times.to_vec();
    times.sort_by(f64::total_cmp);
    let distances = times
        .iter()
        .map(|&t| stationary_deviation(chain, &nu.nu, t).map(|d| max_row_abs_sum(&d)))
        .collect::<Result<Vec<_>>>()?;
    let start = times.len() / 2;
    let pts: Vec<(f64, f64)> = times[start..]
        .iter()
        .zip(&distances[start..])
        .filter(|(_, d)| **d >= MIXED_THRESHOLD)
        .map(|(t, d)| (*t, d.ln()))
        .collect();
    if pts.len() < 2 {
        return Ok(ErgodicityDiagnostic {
            times,
            distances,
            fit: None,
            verdict: ErgodicityVerdict::Mixed,
        });
    }
    let fit = fit_log_linear(&pts);
    let verdict = if fit.lambda > 0.0 && fit.r_squared > ERGODICITY_MIN_R_SQUARED {
        ErgodicityVerdict::StronglyExponentiallyErgodic
    } else {
        ErgodicityVerdict::NotDemonstrated
    };
    Ok(ErgodicityDiagnostic {
        times,
        distances,
        fit: Some(fit),
        verdict,
    })
}

/// Default diagnostic grid: 41 equally spaced times on `[0, t_max]`. `t_max`
/// doubles from `1/Λ` (at most 20 times) until `d(t) < 1e-8`, then is pulled
/// back by log-linear interpolation so that `d(t_max) ≈ 1e-8` rather than
/// somewhere near the round-off floor.
pub fn ergodicity_time_grid(chain: &TruncatedChain, nu: &InvariantMeasure) -> Result<Vec<f64>> {
    const TARGET: f64 = 1e-8;
    let rate = chain.uniformization_rate().max(1e-12);
    let distance = |t: f64| stationary_deviation(chain, &nu.nu, t).map(|d| max_row_abs_sum(&d));
    let (mut t_prev, mut d_prev) = (0.0, distance(0.0)?);
    let mut t_max = 1.0 / rate;
    for _ in 0..20 {
        let d = distance(t_max)?;
        if d < TARGET {
            if d_prev > TARGET && d > 0.0 {
                let frac = (d_prev.ln() - TARGET.ln()) / (d_prev.ln() - d.ln());
                t_max = t_prev + frac * (t_max - t_prev);
            }
            break;
        }
        (t_prev, d_prev) = (t_max, d);
        t_max *= 2.0;
    }
    Ok((0..=40).map(|k| t_max * k as f64 / 40.0).collect())
}

fn fit_log_linear(pts: &[(f64, f64)]) -> ExponentialFit {
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let stt: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sty: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = if stt > 0.0 { sty / stt } else { 0.0 };
    let intercept = my - slope * mt;
    let ss_res: f64 = pts
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    ExponentialFit {
        c: intercept.exp(),
        lambda: -slope,
        r_squared,
        points: pts.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoissonSolution {
    pub gamma: Vec<f64>,
    /// `‖Qγ − b‖_∞` against the (possibly projected) right-hand side.
    pub residual: f64,
    /// `ν·b` subtracted from the right-hand side; zero when none was needed.
    pub shift: f64,
}

/// Solves `Qγ = b` with the centering `ν·γ = 0` via the bordered system
/// `[[Q, 1], [ν, 0]] [γ; s] = [b; 0]`.
///
/// When `ν·b` is not zero the right-hand side is replaced by `b − (ν·b)1`
/// if `project` is set and rejected otherwise.
pub fn solve_poisson(chain: &TruncatedChain, nu: &InvariantMeasure, b: &[f64], project: bool) -> Result<PoissonSolution> {
    let n = chain.size();
    if b.len() != n || nu.nu.len() != n {
        return Err(Error::Domain(format!(
            "sizes differ: chain {n}, measure {}, rhs {}",
            nu.nu.len(),
            b.len()
        )));
    }
    let mean: f64 = nu.nu.iter().zip(b).map(|(v, b)| v * b).sum();
    let (rhs, shift) = if mean.abs() > CENTERING_TOLERANCE {
        if !project {
            return Err(Error::Contract(format!(
                "ν·b = {mean:e} is not zero and projection is disabled"
            )));
        }
        (b.iter().map(|v| v - mean).collect::<Vec<_>>(), mean)
    } else {
        (b.to_vec(), 0.0)
    };
    let mut a = DMatrix::zeros(n + 1, n + 1);
    a.view_mut((0, 0), (n, n)).copy_from(chain.generator());
    for k in 0..n {
        a[(k, n)] = 1.0;
        a[(n, k)] = nu.nu[k];
    }
    let mut r = DVector::zeros(n + 1);
    r.rows_mut(0, n).copy_from_slice(&rhs);
    let sol = a
        .lu()
        .solve(&r)
        .ok_or_else(|| Error::Numeric("singular bordered Poisson system".into()))?;
    let gamma = DVector::from_iterator(n, sol.iter().take(n).copied());
    let residual = (chain.generator() * &gamma - DVector::from_vec(rhs)).amax();
    Ok(PoissonSolution {
        gamma: gamma.iter().copied().collect(),
        residual,
        shift,
    })
}

/// Correction vector for the averaged-drift criterion: with
/// `λ = −Σ c_i ν_i` solves `Σ_j q_ij(0) γ_j = λ + c_i`.
pub fn drift_correction(chain: &TruncatedChain, nu: &InvariantMeasure, c: &[f64]) -> Result<(f64, PoissonSolution)> {
    let lambda = -nu.nu.iter().zip(c).map(|(v, c)| v * c).sum::<f64>();
    let b: Vec<f64> = c.iter().map(|c| lambda + c).collect();
    Ok((lambda, solve_poisson(chain, nu, &b, false)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::{Example52Kernel, TwoStateKernel};

    fn two_state(a: f64, b: f64) -> TruncatedChain {
        TruncatedChain::from_generator(DMatrix::from_row_slice(2, 2, &[-a, a, b, -b])).unwrap()
    }

    #[test]
    fn two_state_truncation_is_exact() {
        let chain = truncate(&TwoStateKernel::new(1.0, 2.0), 1, 2, TruncationMode::Lump).unwrap();
        assert_eq!(chain.generator(), two_state(1.0, 2.0).generator());
        assert_eq!(chain.truncation_leak, 0.0);
        assert_eq!(chain.lumped_mass, 0.0);
    }

    #[test]
    fn example52_drop_leaks_last_row() {
        let chain = truncate(&Example52Kernel::default(), 2, 5, TruncationMode::Drop).unwrap();
        assert_eq!(chain.truncation_leak, 1.0);
        let q = chain.generator();
        assert_eq!(q[(4, 0)], 1.0);
        assert_eq!(q[(4, 4)], -1.0);
        assert_eq!(q[(3, 4)], 1.0);
        assert_eq!(q[(3, 3)], -2.0);
    }

    #[test]
    fn two_state_measures() {
        let m = invariant_measure(&two_state(1.0, 2.0)).unwrap();
        assert!((m.nu[0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((m.nu[1] - 1.0 / 3.0).abs() < 1e-14);
        let m = invariant_measure(&two_state(0.7, 0.7)).unwrap();
        assert!((m.nu[0] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn reducible_chain_is_rejected() {
        let q = DMatrix::from_row_slice(3, 3, &[-1.0, 1.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
        let chain = TruncatedChain::from_generator(q).unwrap();
        assert!(matches!(invariant_measure(&chain), Err(Error::Structural(_))));
    }

    #[test]
    fn generator_validation() {
        assert!(TruncatedChain::from_generator(DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -0.5])).is_err());
        assert!(TruncatedChain::from_generator(DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 1.0, -1.0])).is_err());
        assert!(truncate(&TwoStateKernel::new(1.0, 1.0), 1, 1, TruncationMode::Lump).is_err());
    }

    #[test]
    fn birth_death_constant_rates() {
        let bd = birth_death_invariant(&|_| 1.0, &|_| 2.0, 60).unwrap();
        for (k, v) in bd.measure.nu.iter().enumerate().take(40) {
            assert!((v - 0.5f64.powi(k as i32 + 1)).abs() < 1e-10, "{k}");
        }
        assert!(bd.cross_check_error < 1e-10);
        assert!((bd.unnormalized_total - (1.0 + bd.nu_star) / bd.nu_star).abs() < 1e-15);
    }

    #[test]
    fn birth_death_divergent() {
        assert!(matches!(birth_death_invariant(&|_| 1.0, &|_| 1.0, 50), Err(Error::Ergodicity(_))));
    }

    #[test]
    fn birth_death_two_states() {
        let (up, down) = (0.3, 1.7);
        let bd = birth_death_invariant(&|i| if i.get() == 1 { up } else { 0.0 }, &|_| down, 10).unwrap();
        assert!((bd.measure.nu[0] - down / (up + down)).abs() < 1e-15);
        assert!((bd.measure.nu[1] - up / (up + down)).abs() < 1e-15);
        assert!(bd.measure.nu[2..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn transition_matrix_basics() {
        let chain = two_state(1.0, 1.0);
        assert_eq!(transition_matrix(&chain, 0.0).unwrap(), DMatrix::identity(2, 2));
        for t in [0.1, 1.0, 5.0, 40.0, 500.0] {
            let p = transition_matrix(&chain, t).unwrap();
            let exact = 0.5 * (1.0 + (-2.0 * t).exp());
            assert!((p[(0, 0)] - exact).abs() < 1e-12, "t={t}");
            for i in 0..2 {
                assert!((p.row(i).sum() - 1.0).abs() < 1e-10);
            }
        }
        assert!(transition_matrix(&chain, -1.0).is_err());
    }

    #[test]
    fn poisson_two_state() {
        let chain = two_state(1.0, 1.0);
        let nu = invariant_measure(&chain).unwrap();
        let sol = solve_poisson(&chain, &nu, &[1.0, -1.0], false).unwrap();
        assert!((sol.gamma[0] + 0.5).abs() < 1e-14);
        assert!((sol.gamma[1] - 0.5).abs() < 1e-14);
        assert!(sol.residual < 1e-8);
        let zero = solve_poisson(&chain, &nu, &[0.0, 0.0], false).unwrap();
        assert!(zero.gamma.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn poisson_projection() {
        let chain = two_state(1.0, 2.0);
        let nu = invariant_measure(&chain).unwrap();
        assert!(matches!(solve_poisson(&chain, &nu, &[1.0, 1.0], false), Err(Error::Contract(_))));
        let sol = solve_poisson(&chain, &nu, &[2.0, 1.0], true).unwrap();
        assert!((sol.shift - 5.0 / 3.0).abs() < 1e-14);
        assert!(sol.residual < 1e-12);
    }

    #[test]
    fn ergodicity_needs_two_points() {
        let chain = two_state(1.0, 1.0);
        let nu = invariant_measure(&chain).unwrap();
        assert!(matches!(ergodicity_diagnostic(&chain, &nu, &[1.0]), Err(Error::Insufficient(_))));
        let d = ergodicity_diagnostic(&chain, &nu, &[100.0, 200.0, 300.0]).unwrap();
        assert_eq!(d.verdict, ErgodicityVerdict::Mixed);
    }

    #[test]
    fn two_state_gap_is_fitted() {
        let chain = two_state(1.0, 1.0);
        let nu = invariant_measure(&chain).unwrap();
        let grid = ergodicity_time_grid(&chain, &nu).unwrap();
        let d = ergodicity_diagnostic(&chain, &nu, &grid).unwrap();
        let fit = d.fit.unwrap();
        assert!((fit.lambda - 2.0).abs() < 1e-6, "{fit:?}");
        assert_eq!(d.verdict, ErgodicityVerdict::StronglyExponentiallyErgodic);
        for (t, dt) in d.times.iter().zip(&d.distances) {
            assert!((dt - (-2.0 * t).exp()).abs() < 1e-12);
        }
    }
}
