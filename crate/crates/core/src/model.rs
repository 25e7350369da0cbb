//! Declaration of the hybrid system: coefficients, the state-dependent rate
//! kernel, Lyapunov data, and the generators acting on test functions.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rates::RateProfile;

/// Tolerance for the drift-condition scan.
pub const DRIFT_TOLERANCE: f64 = 1e-9;

/// Rows must be pre-truncated so that the discarded tail mass is below this.
pub const ROW_TAIL_TOLERANCE: f64 = 1e-12;

/// A discrete state of the switching component. Indices are 1-based and unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct Regime(usize);

impl Regime {
    pub const FIRST: Regime = Regime(1);

    pub fn new(i: usize) -> Result<Self> {
        if i == 0 {
            return Err(Error::Domain("regime indices start at 1".into()));
        }
        Ok(Regime(i))
    }

    /// Regime for a 0-based array position.
    pub fn from_index(k: usize) -> Self {
        Regime(k + 1)
    }

    pub fn get(self) -> usize {
        self.0
    }

    /// 0-based position in truncated arrays.
    pub fn index(self) -> usize {
        self.0 - 1
    }

    pub fn next(self) -> Self {
        Regime(self.0 + 1)
    }

    pub fn prev(self) -> Option<Self> {
        (self.0 > 1).then(|| Regime(self.0 - 1))
    }
}

impl TryFrom<usize> for Regime {
    type Error = Error;
    fn try_from(i: usize) -> Result<Self> {
        Regime::new(i)
    }
}

impl From<Regime> for usize {
    fn from(r: Regime) -> usize {
        r.0
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One off-diagonal entry `q_ij(x)` of a generator row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub to: Regime,
    pub rate: f64,
}

/// Drift `b(x, i)` and diffusion `σ(x, i)` of the continuous component.
///
/// Implementations must be re-entrant: the ensemble runner calls them from
/// several threads at once.
pub trait Coefficients: Send + Sync {
    fn dim(&self) -> usize;

    fn noise_dim(&self) -> usize;

    /// Writes `b(x, i)` into `out` (length `dim`).
    fn drift(&self, x: &[f64], i: Regime, out: &mut [f64]);

    /// Writes `σ(x, i)` into `out` in row-major `dim × noise_dim` layout.
    fn diffusion(&self, x: &[f64], i: Regime, out: &mut [f64]);

    /// Exact linearization at the origin, for families that know it.
    fn linear_part(&self, _i: Regime) -> Option<LinearPart> {
        None
    }
}

/// `b(i)` and `σ_k(i)`, `k = 1..d`, with `b(x,i) ≈ b(i) x` and the k-th
/// column of `σ(x,i)` ≈ `σ_k(i) x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPart {
    pub drift: DMatrix<f64>,
    pub diffusion: Vec<DMatrix<f64>>,
}

/// The generator `Q(x)` of the switching component, evaluated one row at a time.
pub trait RateKernel: Send + Sync {
    /// Clears `out` and fills it with the off-diagonal entries `(j, q_ij(x))`,
    /// `j != i`, of row `i`. The row must have finite support.
    fn row(&self, x: &[f64], i: Regime, out: &mut Vec<Transition>);

    /// `M = sup_{x,i} q_i(x)` when the kernel is globally bounded.
    fn global_bound(&self) -> Option<f64>;

    /// `M_H = sup_{|x| <= H, i} q_i(x)`.
    fn local_bound(&self, radius: f64) -> f64 {
        let _ = radius;
        self.global_bound().unwrap_or(f64::INFINITY)
    }
}

/// Total exit rate `q_i(x)` of a row.
pub fn exit_rate(row: &[Transition]) -> f64 {
    row.iter().map(|t| t.rate).sum()
}

#[derive(Clone)]
pub struct ModelSpec {
    pub coefficients: Arc<dyn Coefficients>,
    pub kernel: Arc<dyn RateKernel>,
    /// Asserts `b(0,i) = 0` and `σ(0,i) = 0` for every regime.
    pub zero_fixed: bool,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("dim", &self.dim())
            .field("noise_dim", &self.noise_dim())
            .field("global_bound", &self.kernel.global_bound())
            .field("zero_fixed", &self.zero_fixed)
            .finish()
    }
}

impl ModelSpec {
    pub fn new(coefficients: Arc<dyn Coefficients>, kernel: Arc<dyn RateKernel>) -> Self {
        ModelSpec {
            coefficients,
            kernel,
            zero_fixed: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.coefficients.dim()
    }

    pub fn noise_dim(&self) -> usize {
        self.coefficients.noise_dim()
    }

    pub fn drift(&self, x: &[f64], i: Regime) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.coefficients.drift(x, i, &mut out);
        out
    }

    pub fn diffusion(&self, x: &[f64], i: Regime) -> DMatrix<f64> {
        let (n, d) = (self.dim(), self.noise_dim());
        let mut out = vec![0.0; n * d];
        self.coefficients.diffusion(x, i, &mut out);
        DMatrix::from_row_slice(n, d, &out)
    }

    pub fn rate_row(&self, x: &[f64], i: Regime) -> Vec<Transition> {
        let mut row = Vec::new();
        self.kernel.row(x, i, &mut row);
        row
    }

    /// Spot-checks the standing assumptions on sampled points and regimes
    /// `1..=max_regime`: finite coefficients, the origin as an equilibrium when
    /// `zero_fixed` is set, and the kernel contract (non-negative off-diagonal
    /// rates bounded by the declared bound).
    pub fn validate(&self, points: &[Vec<f64>], max_regime: usize) -> Result<()> {
        let origin = vec![0.0; self.dim()];
        let mut row = Vec::new();
        for k in 0..max_regime {
            let i = Regime::from_index(k);
            if self.zero_fixed {
                let b0 = self.drift(&origin, i);
                let s0 = self.diffusion(&origin, i);
                if b0.iter().chain(s0.iter()).any(|v| *v != 0.0) {
                    return Err(Error::Contract(format!(
                        "zero_fixed is set but b(0,{i}) or σ(0,{i}) is nonzero"
                    )));
                }
            }
            for x in points.iter().chain(std::iter::once(&origin)) {
                if x.len() != self.dim() {
                    return Err(Error::Domain(format!(
                        "sample point has length {}, expected {}",
                        x.len(),
                        self.dim()
                    )));
                }
                let b = self.drift(x, i);
                let s = self.diffusion(x, i);
                if b.iter().chain(s.iter()).any(|v| !v.is_finite()) {
                    return Err(Error::Evaluation(format!(
                        "coefficients at x={x:?}, regime {i}"
                    )));
                }
                self.kernel.row(x, i, &mut row);
                check_row(&row, i)?;
                let q = exit_rate(&row);
                let bound = self.kernel.local_bound(norm(x));
                if q > bound * (1.0 + 1e-12) {
                    return Err(Error::Contract(format!(
                        "exit rate {q} of regime {i} exceeds the declared bound {bound}"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn check_row(row: &[Transition], i: Regime) -> Result<()> {
    for t in row {
        if t.to == i {
            return Err(Error::Contract(format!(
                "row {i} lists a diagonal entry"
            )));
        }
        if !(t.rate >= 0.0) || !t.rate.is_finite() {
            return Err(Error::Contract(format!(
                "rate q_{i},{} = {} is not a finite non-negative number",
                t.to, t.rate
            )));
        }
    }
    Ok(())
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;
pub type RegimeSequence = Arc<dyn Fn(Regime) -> f64 + Send + Sync>;

/// A regime-independent Lyapunov function `V` together with the drift
/// bound `ℒ_i V(x) <= c_i g(V(x))` it is meant to satisfy.
#[derive(Clone)]
pub struct LyapunovSpec {
    pub value: ScalarFn,
    pub gradient: Option<VectorFn>,
    pub hessian: Option<MatrixFn>,
    pub profile: RateProfile,
    pub c: RegimeSequence,
    /// `sup_i |c_i|`.
    pub c_bound: f64,
    /// Radius `h` of a ball contained in the domain `D`.
    pub domain_radius: f64,
}

impl fmt::Debug for LyapunovSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LyapunovSpec")
            .field("analytic_gradient", &self.gradient.is_some())
            .field("analytic_hessian", &self.hessian.is_some())
            .field("profile", &self.profile)
            .field("c_bound", &self.c_bound)
            .field("domain_radius", &self.domain_radius)
            .finish()
    }
}

impl LyapunovSpec {
    pub fn new(
        value: ScalarFn,
        profile: RateProfile,
        c: RegimeSequence,
        c_bound: f64,
        domain_radius: f64,
    ) -> Self {
        LyapunovSpec {
            value,
            gradient: None,
            hessian: None,
            profile,
            c,
            c_bound,
            domain_radius,
        }
    }

    pub fn with_gradient(mut self, gradient: VectorFn) -> Self {
        self.gradient = Some(gradient);
        self
    }

    pub fn with_hessian(mut self, hessian: MatrixFn) -> Self {
        self.hessian = Some(hessian);
        self
    }

    pub fn with_c(mut self, c: RegimeSequence, c_bound: f64) -> Self {
        self.c = c;
        self.c_bound = c_bound;
        self
    }

    pub fn v(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    pub fn c_at(&self, i: Regime) -> f64 {
        (self.c)(i)
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        match &self.gradient {
            Some(g) => g(x),
            None => fd_gradient(&|y| (self.value)(y), x),
        }
    }

    pub fn hess(&self, x: &[f64]) -> DMatrix<f64> {
        match &self.hessian {
            Some(h) => h(x),
            None => fd_hessian(&|y| (self.value)(y), x),
        }
    }

    /// Checks `V(0) = 0`, `V > 0` away from the origin and `|c_i| <= c_bound`
    /// on the supplied samples.
    pub fn validate(&self, dim: usize, points: &[Vec<f64>], max_regime: usize) -> Result<()> {
        let v0 = self.v(&vec![0.0; dim]);
        if v0 != 0.0 {
            return Err(Error::Contract(format!("V(0) = {v0}, expected 0")));
        }
        for x in points {
            let v = self.v(x);
            if norm(x) > 0.0 && !(v > 0.0) {
                return Err(Error::Contract(format!("V({x:?}) = {v} is not positive")));
            }
        }
        for k in 0..max_regime {
            let i = Regime::from_index(k);
            let c = self.c_at(i);
            if !c.is_finite() || c.abs() > self.c_bound * (1.0 + 1e-12) {
                return Err(Error::Contract(format!(
                    "|c_{i}| = {} exceeds c_bound = {}",
                    c.abs(),
                    self.c_bound
                )));
            }
        }
        Ok(())
    }
}

/// Central-difference step for first derivatives.
pub fn gradient_step(x: &[f64]) -> f64 {
    (1e-6 * norm(x)).max(1e-6)
}

/// Step for second derivatives. Larger than the gradient step because the
/// cancellation error of a second difference scales like `eps / step²`.
pub fn hessian_step(x: &[f64]) -> f64 {
    (1e-4 * norm(x)).max(1e-4)
}

pub fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let eta = gradient_step(x);
    let mut y = x.to_vec();
    (0..x.len())
        .map(|k| {
            y[k] = x[k] + eta;
            let fp = f(&y);
            y[k] = x[k] - eta;
            let fm = f(&y);
            y[k] = x[k];
            (fp - fm) / (2.0 * eta)
        })
        .collect()
}

pub fn fd_hessian(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let eta = hessian_step(x);
    let f0 = f(x);
    let mut y = x.to_vec();
    let mut h = DMatrix::zeros(n, n);
    for k in 0..n {
        y[k] = x[k] + eta;
        let fp = f(&y);
        y[k] = x[k] - eta;
        let fm = f(&y);
        y[k] = x[k];
        h[(k, k)] = (fp - 2.0 * f0 + fm) / (eta * eta);
        for l in 0..k {
            let mut corner = |sk: f64, sl: f64| {
                y[k] = x[k] + sk * eta;
                y[l] = x[l] + sl * eta;
                let v = f(&y);
                y[k] = x[k];
                y[l] = x[l];
                v
            };
            let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0)
                + corner(-1.0, -1.0))
                / (4.0 * eta * eta);
            h[(k, l)] = v;
            h[(l, k)] = v;
        }
    }
    h
}

/// A test function `f(x, i)` on which the generators act.
pub trait RegimeFunction {
    fn value(&self, x: &[f64], i: Regime) -> f64;

    fn gradient(&self, x: &[f64], i: Regime) -> Vec<f64> {
        fd_gradient(&|y| self.value(y, i), x)
    }

    fn hessian(&self, x: &[f64], i: Regime) -> DMatrix<f64> {
        fd_hessian(&|y| self.value(y, i), x)
    }
}

impl<F> RegimeFunction for F
where
    F: Fn(&[f64], Regime) -> f64,
{
    fn value(&self, x: &[f64], i: Regime) -> f64 {
        self(x, i)
    }
}

impl RegimeFunction for LyapunovSpec {
    fn value(&self, x: &[f64], _i: Regime) -> f64 {
        self.v(x)
    }

    fn gradient(&self, x: &[f64], _i: Regime) -> Vec<f64> {
        self.grad(x)
    }

    fn hessian(&self, x: &[f64], _i: Regime) -> DMatrix<f64> {
        self.hess(x)
    }
}

/// `∇f(x,i) b(x,i) + ½ tr(∇²f(x,i) σσᵀ(x,i))`.
fn diffusion_generator(spec: &ModelSpec, f: &dyn RegimeFunction, x: &[f64], i: Regime) -> Result<f64> {
    if x.len() != spec.dim() {
        return Err(Error::Domain(format!(
            "point has length {}, model dimension is {}",
            x.len(),
            spec.dim()
        )));
    }
    let b = spec.drift(x, i);
    let sigma = spec.diffusion(x, i);
    if b.iter().chain(sigma.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Evaluation(format!("coefficients at x={x:?}, regime {i}")));
    }
    let grad = f.gradient(x, i);
    let hess = f.hessian(x, i);
    let a = &sigma * sigma.transpose();
    let first: f64 = grad.iter().zip(&b).map(|(g, b)| g * b).sum();
    let second = 0.5 * hess.component_mul(&a).sum();
    let out = first + second;
    if !out.is_finite() {
        return Err(Error::Evaluation(format!("generator value at x={x:?}, regime {i}")));
    }
    Ok(out)
}

/// `ℒ_i V(x)`, the generator of the diffusion frozen in regime `i`.
pub fn apply_generator_li(spec: &ModelSpec, lyap: &LyapunovSpec, x: &[f64], i: Regime) -> Result<f64> {
    if norm(x) == 0.0 {
        return Err(Error::Domain(
            "ℒ_i V is evaluated away from the origin only".into(),
        ));
    }
    diffusion_generator(spec, lyap, x, i)
}

/// Full generator of the hybrid process, including the switching sum
/// `Σ_{j≠i} q_ij(x) [f(x,j) − f(x,i)]`.
pub fn apply_full_generator(
    spec: &ModelSpec,
    f: &dyn RegimeFunction,
    x: &[f64],
    i: Regime,
) -> Result<f64> {
    let diffusion = diffusion_generator(spec, f, x, i)?;
    let row = spec.rate_row(x, i);
    check_row(&row, i)?;
    let fi = f.value(x, i);
    let mut switching = 0.0;
    for t in &row {
        switching += t.rate * (f.value(x, t.to) - fi);
    }
    if !switching.is_finite() {
        return Err(Error::Evaluation(format!(
            "switching sum at x={x:?}, regime {i}"
        )));
    }
    Ok(diffusion + switching)
}

/// Which side of the drift inequality is checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftDirection {
    /// `ℒ_i V(x) <= c_i g(V(x))`, used for stability.
    Upper,
    /// `ℒ_i V(x) >= c_i g(V(x))`, used for instability.
    Lower,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftViolation {
    pub x: Vec<f64>,
    pub regime: Regime,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftReport {
    pub direction: DriftDirection,
    pub violations: Vec<DriftViolation>,
    /// Largest signed residual over the grid; `None` for an empty grid.
    pub max_residual: Option<f64>,
    pub checked: usize,
    pub tolerance: f64,
}

impl DriftReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Evaluates the drift inequality on `grid` and lists the points where it
/// fails by more than [`DRIFT_TOLERANCE`].
pub fn verify_drift_condition(
    spec: &ModelSpec,
    lyap: &LyapunovSpec,
    grid: &[(Vec<f64>, Regime)],
    direction: DriftDirection,
) -> Result<DriftReport> {
    let mut violations = Vec::new();
    let mut max_residual: Option<f64> = None;
    for (x, i) in grid {
        let lv = apply_generator_li(spec, lyap, x, *i)?;
        let bound = lyap.c_at(*i) * lyap.profile.g(lyap.v(x));
        let residual = match direction {
            DriftDirection::Upper => lv - bound,
            DriftDirection::Lower => bound - lv,
        };
        max_residual = Some(max_residual.map_or(residual, |m| m.max(residual)));
        if residual > DRIFT_TOLERANCE {
            violations.push(DriftViolation {
                x: x.clone(),
                regime: *i,
                residual,
            });
        }
    }
    Ok(DriftReport {
        direction,
        violations,
        max_residual,
        checked: grid.len(),
        tolerance: DRIFT_TOLERANCE,
    })
}

/// Unit directions used to probe `R^n`: the coordinate axes, their
/// negatives, and the normalized diagonals `(±1, ..., ±1)/√n` for `n <= 4`.
pub fn probe_directions(dim: usize) -> Vec<Vec<f64>> {
    let mut dirs = Vec::new();
    for k in 0..dim {
        for s in [1.0, -1.0] {
            let mut e = vec![0.0; dim];
            e[k] = s;
            dirs.push(e);
        }
    }
    if (2..=4).contains(&dim) {
        let scale = 1.0 / (dim as f64).sqrt();
        for mask in 0..(1usize << dim) {
            dirs.push(
                (0..dim)
                    .map(|k| if mask >> k & 1 == 1 { -scale } else { scale })
                    .collect(),
            );
        }
    }
    dirs
}

/// Sample grid for the drift scan: radii spanning four decades below
/// `radius` (log-spaced) plus a uniform layer, along every probe direction,
/// for regimes `1..=max_regime`.
pub fn drift_grid(dim: usize, radius: f64, radii_per_decade: usize, max_regime: usize) -> Vec<(Vec<f64>, Regime)> {
    let decades = 4;
    let m = radii_per_decade.max(1) * decades;
    let mut radii: Vec<f64> = (0..=m)
        .map(|k| radius * 10f64.powf(-(decades as f64) * (m - k) as f64 / m as f64))
        .collect();
    radii.extend((1..radii_per_decade.max(1) * 2).map(|k| radius * k as f64 / (radii_per_decade.max(1) * 2) as f64));
    radii.sort_by(f64::total_cmp);
    radii.dedup();
    let dirs = probe_directions(dim);
    let mut grid = Vec::new();
    for k in 0..max_regime {
        let i = Regime::from_index(k);
        for r in &radii {
            for d in &dirs {
                grid.push((d.iter().map(|v| v * r).collect(), i));
            }
        }
    }
    grid
}

/// Coefficients assembled from closures.
pub struct FnCoefficients<B, S> {
    dim: usize,
    noise_dim: usize,
    drift: B,
    diffusion: S,
}

impl<B, S> FnCoefficients<B, S>
where
    B: Fn(&[f64], Regime, &mut [f64]) + Send + Sync,
    S: Fn(&[f64], Regime, &mut [f64]) + Send + Sync,
{
    pub fn new(dim: usize, noise_dim: usize, drift: B, diffusion: S) -> Self {
        FnCoefficients {
            dim,
            noise_dim,
            drift,
            diffusion,
        }
    }
}

impl<B, S> Coefficients for FnCoefficients<B, S>
where
    B: Fn(&[f64], Regime, &mut [f64]) + Send + Sync,
    S: Fn(&[f64], Regime, &mut [f64]) + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    fn drift(&self, x: &[f64], i: Regime, out: &mut [f64]) {
        (self.drift)(x, i, out)
    }

    fn diffusion(&self, x: &[f64], i: Regime, out: &mut [f64]) {
        (self.diffusion)(x, i, out)
    }
}

/// Rate kernel assembled from a row closure.
pub struct FnKernel<R> {
    row: R,
    global_bound: Option<f64>,
}

impl<R> FnKernel<R>
where
    R: Fn(&[f64], Regime, &mut Vec<Transition>) + Send + Sync,
{
    pub fn new(row: R, global_bound: Option<f64>) -> Self {
        FnKernel { row, global_bound }
    }
}

impl<R> RateKernel for FnKernel<R>
where
    R: Fn(&[f64], Regime, &mut Vec<Transition>) + Send + Sync,
{
    fn row(&self, x: &[f64], i: Regime, out: &mut Vec<Transition>) {
        out.clear();
        (self.row)(x, i, out)
    }

    fn global_bound(&self) -> Option<f64> {
        self.global_bound
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::{Example51Drift, Example51Params};

    fn scalar_model(
        drift: impl Fn(f64) -> f64 + Send + Sync + 'static,
        diffusion: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> ModelSpec {
        let coeffs = FnCoefficients::new(
            1,
            1,
            move |x, _, out| out[0] = drift(x[0]),
            move |x, _, out| out[0] = diffusion(x[0]),
        );
        let kernel = FnKernel::new(|_, _, _| {}, Some(0.0));
        ModelSpec::new(Arc::new(coeffs), Arc::new(kernel))
    }

    fn square_lyapunov(analytic: bool) -> LyapunovSpec {
        let l = LyapunovSpec::new(
            Arc::new(|x: &[f64]| x[0] * x[0]),
            RateProfile::identity(1.0),
            Arc::new(|_| -1.0),
            1.0,
            1.0,
        );
        if analytic {
            l.with_gradient(Arc::new(|x: &[f64]| vec![2.0 * x[0]]))
                .with_hessian(Arc::new(|_: &[f64]| DMatrix::from_element(1, 1, 2.0)))
        } else {
            l
        }
    }

    #[test]
    fn generator_pure_drift() {
        let spec = scalar_model(|x| -x, |_| 0.0);
        for analytic in [true, false] {
            let v = apply_generator_li(&spec, &square_lyapunov(analytic), &[0.5], Regime::FIRST).unwrap();
            assert!((v + 0.5).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn generator_pure_trace_term() {
        let spec = scalar_model(|_| 0.0, |x| x);
        for analytic in [true, false] {
            let v = apply_generator_li(&spec, &square_lyapunov(analytic), &[0.5], Regime::FIRST).unwrap();
            assert!((v - 0.25).abs() < 1e-7, "{v}");
        }
    }

    #[test]
    fn generator_rejects_origin_and_nan() {
        let spec = scalar_model(|x| -x, |_| 0.0);
        let l = square_lyapunov(true);
        assert!(matches!(
            apply_generator_li(&spec, &l, &[0.0], Regime::FIRST),
            Err(Error::Domain(_))
        ));
        let bad = scalar_model(|_| f64::NAN, |_| 0.0);
        assert!(matches!(
            apply_generator_li(&bad, &l, &[0.3], Regime::FIRST),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn switching_sum_for_regime_valued_function() {
        let coeffs = FnCoefficients::new(1, 1, |_, _, o: &mut [f64]| o[0] = 0.0, |_, _, o: &mut [f64]| o[0] = 0.0);
        let kernel = FnKernel::new(
            |_, i: Regime, out: &mut Vec<Transition>| {
                if i.get() == 1 {
                    out.push(Transition { to: Regime(2), rate: 1.0 });
                }
            },
            Some(1.0),
        );
        let spec = ModelSpec::new(Arc::new(coeffs), Arc::new(kernel));
        let f = |_: &[f64], i: Regime| i.get() as f64;
        let v = apply_full_generator(&spec, &f, &[0.3], Regime::FIRST).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_generator_of_regime_independent_function_is_li() {
        let spec = crate::families::example51_model(&Example51Params::default());
        let l = square_lyapunov(true);
        for x in [0.05, -0.2, 0.37] {
            for k in 0..6 {
                let i = Regime::from_index(k);
                let a = apply_full_generator(&spec, &l, &[x], i).unwrap();
                let b = apply_generator_li(&spec, &l, &[x], i).unwrap();
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn birth_death_indicator_at_origin() {
        // Row 2 of the birth-death kernel at x = 0 is {1: p̂_2(0), 3: p̌_2(0)};
        // for f = 1{i = 1} only the downward move contributes.
        let params = Example51Params::default();
        let spec = crate::families::example51_model(&params);
        let f = |_: &[f64], i: Regime| if i.get() == 1 { 1.0 } else { 0.0 };
        let v = apply_full_generator(&spec, &f, &[0.0], Regime(2)).unwrap();
        assert!((v - params.hat_p.at(Regime(2))).abs() < 1e-12);
    }

    #[test]
    fn example51_generator_matches_closed_form() {
        for drift in [Example51Drift::Power, Example51Drift::Max] {
            let params = Example51Params { drift, ..Default::default() };
            let spec = crate::families::example51_model(&params);
            let numeric = LyapunovSpec::new(
                Arc::new(|x: &[f64]| x[0] * x[0]),
                RateProfile::identity(1.0),
                Arc::new(|_| 0.0),
                0.0,
                1.0,
            );
            let g = params.gamma;
            for x in [0.01f64, 0.1, -0.25, 0.4, 0.9] {
                for k in 0..5 {
                    let i = Regime::from_index(k);
                    let b = params.b.at(i);
                    let s = params.sigma.at(i);
                    let envelope = match drift {
                        Example51Drift::Power => x.abs().powf(2.0 * g),
                        Example51Drift::Max => x.abs().powf(g).max(1.0),
                    };
                    let exact = 2.0 * b * x * x * envelope + s * s * x.sin().powi(4);
                    let fd = apply_generator_li(&spec, &numeric, &[x], i).unwrap();
                    assert!((fd - exact).abs() < 1e-6, "x={x} i={i}: {fd} vs {exact}");
                }
            }
        }
    }

    #[test]
    fn fd_gradient_matches_analytic_to_second_order() {
        let f = |x: &[f64]| x[0].sin() * x[1].exp() + x[0] * x[1] * x[1];
        let grad = |x: &[f64]| vec![x[0].cos() * x[1].exp() + x[1] * x[1], x[0].sin() * x[1].exp() + 2.0 * x[0] * x[1]];
        for p in [[0.3, -0.2], [1.5, 0.7], [-0.01, 0.02]] {
            let fd = fd_gradient(&f, &p);
            let ex = grad(&p);
            for k in 0..2 {
                assert!((fd[k] - ex[k]).abs() < 1e-8, "{fd:?} {ex:?}");
            }
        }
    }

    #[test]
    fn drift_scan_example51() {
        let params = Example51Params::default();
        let spec = crate::families::example51_model(&params);
        let eps = 0.1;
        let b = params.b.clone();
        let lyap = crate::families::square_lyapunov(
            RateProfile::power(params.gamma, 1.0).unwrap(),
            Arc::new(move |i| 2.0 * b.at(i) + eps),
            2.0 * params.b.sup_abs() + eps,
            0.4,
        );
        let grid = drift_grid(1, 0.4, 8, 20);
        let report = verify_drift_condition(&spec, &lyap, &grid, DriftDirection::Upper).unwrap();
        assert!(report.holds(), "{:?}", report.violations.first());

        // c_i = 2b(i) − 1 is too small in every regime.
        let b = params.b.clone();
        let tight = lyap.clone().with_c(Arc::new(move |i| 2.0 * b.at(i) - 1.0), 5.0);
        let report = verify_drift_condition(&spec, &tight, &grid, DriftDirection::Upper).unwrap();
        assert!(!report.holds());
        // Every positive-b regime violates at the outer radius.
        assert!(report
            .violations
            .iter()
            .any(|v| params.b.at(v.regime) > 0.0));

        let empty = verify_drift_condition(&spec, &lyap, &[], DriftDirection::Upper).unwrap();
        assert!(empty.holds() && empty.max_residual.is_none());
    }

    #[test]
    fn regime_rejects_zero() {
        assert!(Regime::new(0).is_err());
        assert_eq!(Regime::from_index(0), Regime::FIRST);
        let r: Regime = serde_json::from_str("3").unwrap();
        assert_eq!(r.get(), 3);
        assert!(serde_json::from_str::<Regime>("0").is_err());
    }
}
