//! Built-in coefficient families, rate kernels and Lyapunov functions.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{norm, Coefficients, LinearPart, LyapunovSpec, ModelSpec, RateKernel, Regime, RegimeSequence, Transition};
use crate::rates::RateProfile;

/// A real sequence indexed by regime: explicit leading values, then a constant tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    #[serde(default)]
    pub values: Vec<f64>,
    pub tail: f64,
}

impl Sequence {
    pub fn constant(v: f64) -> Self {
        Sequence { values: Vec::new(), tail: v }
    }

    pub fn new(values: Vec<f64>, tail: f64) -> Self {
        Sequence { values, tail }
    }

    pub fn at(&self, i: Regime) -> f64 {
        self.values.get(i.index()).copied().unwrap_or(self.tail)
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(self.tail.abs(), |m, v| m.max(v.abs()))
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().fold(self.tail, |m, v| m.max(*v))
    }

    pub fn inf(&self) -> f64 {
        self.values.iter().fold(self.tail, |m, v| m.min(*v))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Sequence {
            values: self.values.iter().map(|v| f(*v)).collect(),
            tail: f(self.tail),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tail.is_finite() && self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Example51Drift {
    /// `b(i) x |x|^{2γ}`, for which `ℒ_i |x|² = 2 b(i) |x|^{2+2γ} + σ²(i) sin⁴ x`.
    #[default]
    Power,
    /// `b(i) x (|x|^γ ∨ 1)`, linear inside the unit ball.
    Max,
}

/// Scalar switching diffusion `dX = b(α) X e(X) dt + σ(α) sin²X dW` with the
/// birth–death kernel `q_{i,i+1} = p̌_i(x)`, `q_{i,i−1} = p̂_i(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example51Params {
    pub b: Sequence,
    pub sigma: Sequence,
    pub gamma: f64,
    #[serde(default)]
    pub drift: Example51Drift,
    pub check_p: Sequence,
    pub hat_p: Sequence,
    /// Upward rates are `p̌_i (1 + modulation · sin²|x|)`.
    #[serde(default)]
    pub modulation: f64,
}

impl Default for Example51Params {
    fn default() -> Self {
        Example51Params {
            b: Sequence::new(vec![-2.0, 1.0, 0.5], -0.5),
            sigma: Sequence::constant(0.5),
            gamma: 0.5,
            drift: Example51Drift::Power,
            check_p: Sequence::constant(1.0),
            hat_p: Sequence::constant(2.0),
            modulation: 0.5,
        }
    }
}

impl Example51Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Scenario(format!("γ = {} must lie in (0, 1)", self.gamma)));
        }
        if self.check_p.inf() < 0.0 || self.hat_p.inf() < 0.0 || self.modulation < 0.0 {
            return Err(Error::Scenario("birth–death rates must be non-negative".into()));
        }
        if ![&self.b, &self.sigma, &self.check_p, &self.hat_p].iter().all(|s| s.is_finite()) {
            return Err(Error::Scenario("example51 parameters must be finite".into()));
        }
        Ok(())
    }
}

pub struct Example51Coefficients {
    params: Example51Params,
}

impl Example51Coefficients {
    pub fn new(params: Example51Params) -> Self {
        Example51Coefficients { params }
    }
}

impl Coefficients for Example51Coefficients {
    fn dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &[f64], i: Regime, out: &mut [f64]) {
        let r = x[0].abs();
        let envelope = match self.params.drift {
            Example51Drift::Power => r.powf(2.0 * self.params.gamma),
            Example51Drift::Max => r.powf(self.params.gamma).max(1.0),
        };
        out[0] = self.params.b.at(i) * x[0] * envelope;
    }

    fn diffusion(&self, x: &[f64], i: Regime, out: &mut [f64]) {
        out[0] = self.params.sigma.at(i) * x[0].sin().powi(2);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BirthDeathKernel {
    pub check_p: Sequence,
    pub hat_p: Sequence,
    pub modulation: f64,
}

impl BirthDeathKernel {
    pub fn up(&self, x: &[f64], i: Regime) -> f64 {
        self.check_p.at(i) * (1.0 + self.modulation * norm(x).sin().powi(2))
    }

    pub fn down(&self, _x: &[f64], i: Regime) -> f64 {
        if i.get() == 1 {
            0.0
        } else {
            self.hat_p.at(i)
        }
    }
}

impl RateKernel for BirthDeathKernel {
    fn row(&self, x: &[f64], i: Regime, out: &mut Vec<Transition>) {
        out.clear();
        if let Some(prev) = i.prev() {
            let rate = self.down(x, i);
            if rate > 0.0 {
                out.push(Transition { to: prev, rate });
            }
        }
        let rate = self.up(x, i);
        if rate > 0.0 {
            out.push(Transition { to: i.next(), rate });
        }
    }

    fn global_bound(&self) -> Option<f64> {
        Some(self.check_p.sup() * (1.0 + self.modulation) + self.hat_p.sup())
    }
}

pub fn example51_model(params: &Example51Params) -> ModelSpec {
    ModelSpec::new(
        Arc::new(Example51Coefficients { params: params.clone() }),
        Arc::new(BirthDeathKernel {
            check_p: params.check_p.clone(),
            hat_p: params.hat_p.clone(),
            modulation: params.modulation,
        }),
    )
}

/// `Q(x)` with `s(x) = scale · (1 + sin|x|)`: row 1 is `{2: s}`, row `i >= 2`
/// is `{1: s, i+1: s}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example52Kernel {
    pub scale: f64,
}

impl Default for Example52Kernel {
    fn default() -> Self {
        Example52Kernel { scale: 1.0 }
    }
}

impl Example52Kernel {
    pub fn intensity(&self, x: &[f64]) -> f64 {
        self.scale * (1.0 + norm(x).sin())
    }
}

impl RateKernel for Example52Kernel {
    fn row(&self, x: &[f64], i: Regime, out: &mut Vec<Transition>) {
        out.clear();
        let s = self.intensity(x);
        if s <= 0.0 {
            return;
        }
        if i.get() > 1 {
            out.push(Transition { to: Regime::FIRST, rate: s });
        }
        out.push(Transition { to: i.next(), rate: s });
    }

    fn global_bound(&self) -> Option<f64> {
        Some(4.0 * self.scale)
    }
}

/// Two-state chain with constant rates; states above 2 are absorbing and unreachable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoStateKernel {
    pub q12: f64,
    pub q21: f64,
}

impl TwoStateKernel {
    pub fn new(q12: f64, q21: f64) -> Self {
        TwoStateKernel { q12, q21 }
    }
}

impl RateKernel for TwoStateKernel {
    fn row(&self, _x: &[f64], i: Regime, out: &mut Vec<Transition>) {
        out.clear();
        let (to, rate) = match i.get() {
            1 => (2, self.q12),
            2 => (1, self.q21),
            _ => return,
        };
        if rate > 0.0 {
            out.push(Transition { to: Regime::new(to).expect("nonzero"), rate });
        }
    }

    fn global_bound(&self) -> Option<f64> {
        Some(self.q12.max(self.q21))
    }
}

/// Constant kernel given row by row; regimes past the table never switch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TableKernel {
    rows: Vec<Vec<Transition>>,
}

impl TableKernel {
    pub fn new(rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let mut out = Vec::with_capacity(rows.len());
        for (k, row) in rows.into_iter().enumerate() {
            let i = Regime::from_index(k);
            let mut parsed = Vec::with_capacity(row.len());
            for (j, rate) in row {
                let to = Regime::new(j)?;
                if to == i || !(rate >= 0.0) || !rate.is_finite() {
                    return Err(Error::Scenario(format!("invalid table entry ({i}, {j}, {rate})")));
                }
                parsed.push(Transition { to, rate });
            }
            out.push(parsed);
        }
        Ok(TableKernel { rows: out })
    }
}

impl RateKernel for TableKernel {
    fn row(&self, _x: &[f64], i: Regime, out: &mut Vec<Transition>) {
        out.clear();
        if let Some(row) = self.rows.get(i.index()) {
            out.extend_from_slice(row);
        }
    }

    fn global_bound(&self) -> Option<f64> {
        Some(self.rows.iter().map(|r| r.iter().map(|t| t.rate).sum::<f64>()).fold(0.0, f64::max))
    }
}

/// Linear coefficients `b(x,i) = A(i) x`, `σ(x,i) = (σ_1(i) x, …, σ_d(i) x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCoefficients {
    dim: usize,
    noise_dim: usize,
    regimes: Vec<LinearPart>,
    tail: LinearPart,
}

impl LinearCoefficients {
    /// `regimes[k]` applies to regime `k + 1`; the last entry repeats for all later regimes.
    pub fn new(mut regimes: Vec<LinearPart>) -> Result<Self> {
        let tail = regimes
            .pop()
            .ok_or_else(|| Error::Scenario("linear family needs at least one regime".into()))?;
        let dim = tail.drift.nrows();
        let noise_dim = tail.diffusion.len().max(1);
        for part in regimes.iter().chain(std::iter::once(&tail)) {
            if part.drift.shape() != (dim, dim) {
                return Err(Error::Scenario("drift matrices must all be n×n".into()));
            }
            if !(part.diffusion.is_empty() || part.diffusion.len() == noise_dim)
                || part.diffusion.iter().any(|s| s.shape() != (dim, dim))
            {
                return Err(Error::Scenario("diffusion matrices must be d matrices of size n×n".into()));
            }
        }
        regimes.push(tail.clone());
        Ok(LinearCoefficients { dim, noise_dim, regimes, tail })
    }

    fn part(&self, i: Regime) -> &LinearPart {
        self.regimes.get(i.index()).unwrap_or(&self.tail)
    }
}

impl Coefficients for LinearCoefficients {
    fn dim(&self) -> usize {
        self.dim
    }

    fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    fn drift(&self, x: &[f64], i: Regime, out: &mut [f64]) {
        let a = &self.part(i).drift;
        for r in 0..self.dim {
            out[r] = (0..self.dim).map(|c| a[(r, c)] * x[c]).sum();
        }
    }

    fn diffusion(&self, x: &[f64], i: Regime, out: &mut [f64]) {
        let part = self.part(i);
        out.fill(0.0);
        for (k, s) in part.diffusion.iter().enumerate() {
            for r in 0..self.dim {
                out[r * self.noise_dim + k] = (0..self.dim).map(|c| s[(r, c)] * x[c]).sum();
            }
        }
    }

    fn linear_part(&self, i: Regime) -> Option<LinearPart> {
        let mut part = self.part(i).clone();
        if part.diffusion.is_empty() {
            part.diffusion = vec![DMatrix::zeros(self.dim, self.dim); self.noise_dim];
        }
        Some(part)
    }
}

/// Upper-triangular `A(i) = [[a_i, b_i], [0, c_i]]` switching linear ODE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example52Params {
    pub a: Sequence,
    pub b: Sequence,
    pub c: Sequence,
    #[serde(default = "one")]
    pub rate_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for Example52Params {
    fn default() -> Self {
        Example52Params {
            a: Sequence::new(vec![-3.0], 1.0),
            b: Sequence::constant(1.0),
            c: Sequence::new(vec![-2.5], 0.5),
            rate_scale: 1.0,
        }
    }
}

impl Example52Params {
    pub fn matrix(&self, i: Regime) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[self.a.at(i), self.b.at(i), 0.0, self.c.at(i)])
    }

    /// Number of leading regimes with their own parameters.
    pub fn explicit_regimes(&self) -> usize {
        self.a.values.len().max(self.b.values.len()).max(self.c.values.len())
    }
}

pub fn example52_model(params: &Example52Params) -> Result<ModelSpec> {
    let parts = (0..=params.explicit_regimes())
        .map(|k| LinearPart {
            drift: params.matrix(Regime::from_index(k)),
            diffusion: Vec::new(),
        })
        .collect();
    Ok(ModelSpec::new(
        Arc::new(LinearCoefficients::new(parts)?),
        Arc::new(Example52Kernel { scale: params.rate_scale }),
    ))
}

/// `V(x) = |x|²` with analytic derivatives.
pub fn square_lyapunov(profile: RateProfile, c: RegimeSequence, c_bound: f64, domain_radius: f64) -> LyapunovSpec {
    LyapunovSpec::new(Arc::new(|x: &[f64]| x.iter().map(|v| v * v).sum()), profile, c, c_bound, domain_radius)
        .with_gradient(Arc::new(|x: &[f64]| x.iter().map(|v| 2.0 * v).collect()))
        .with_hessian(Arc::new(|x: &[f64]| DMatrix::identity(x.len(), x.len()) * 2.0))
}

/// `V(x) = |x|^p` with analytic derivatives away from the origin.
pub fn power_lyapunov(p: f64, profile: RateProfile, c: RegimeSequence, c_bound: f64, domain_radius: f64) -> Result<LyapunovSpec> {
    if !(p > 0.0) {
        return Err(Error::Scenario(format!("power p = {p} must be positive")));
    }
    Ok(
        LyapunovSpec::new(Arc::new(move |x: &[f64]| norm(x).powf(p)), profile, c, c_bound, domain_radius)
            .with_gradient(Arc::new(move |x: &[f64]| {
                let r = norm(x);
                x.iter().map(|v| p * r.powf(p - 2.0) * v).collect()
            }))
            .with_hessian(Arc::new(move |x: &[f64]| {
                let n = x.len();
                let r = norm(x);
                let v = DVector::from_column_slice(x);
                let outer = &v * v.transpose() / (r * r);
                (DMatrix::identity(n, n) + outer * (p - 2.0)) * (p * r.powf(p - 2.0))
            })),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fd_hessian;

    #[test]
    fn sequence_lookup() {
        let s = Sequence::new(vec![1.0, -4.0], 2.0);
        assert_eq!(s.at(Regime::FIRST), 1.0);
        assert_eq!(s.at(Regime::from_index(1)), -4.0);
        assert_eq!(s.at(Regime::from_index(10)), 2.0);
        assert_eq!(s.sup_abs(), 4.0);
    }

    #[test]
    fn example52_rows_at_origin() {
        let k = Example52Kernel::default();
        let mut row = Vec::new();
        k.row(&[0.0, 0.0], Regime::FIRST, &mut row);
        assert_eq!(row, vec![Transition { to: Regime::from_index(1), rate: 1.0 }]);
        k.row(&[0.0, 0.0], Regime::from_index(3), &mut row);
        assert_eq!(row.len(), 2);
        assert_eq!(row[0].to, Regime::FIRST);
        assert_eq!(row[1].to, Regime::from_index(4));
    }

    #[test]
    fn models_validate() {
        let pts: Vec<Vec<f64>> = vec![vec![0.1], vec![-0.4], vec![2.0]];
        example51_model(&Example51Params::default()).validate(&pts, 30).unwrap();
        let pts2: Vec<Vec<f64>> = vec![vec![0.1, 0.2], vec![-3.0, 1.0]];
        example52_model(&Example52Params::default()).unwrap().validate(&pts2, 30).unwrap();
    }

    #[test]
    fn power_lyapunov_hessian() {
        let l = power_lyapunov(3.0, RateProfile::identity(1.0), Arc::new(|_| 0.0), 0.0, 1.0).unwrap();
        let x = [0.3, -0.4];
        let fd = fd_hessian(&|y| l.v(y), &x);
        let an = l.hess(&x);
        assert!((fd - an).amax() < 1e-6);
    }
}
