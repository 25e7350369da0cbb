//! Rate profiles `g`, the time scale `G(y) = −∫_y^h dz / g(z)` with its
//! inverse, and the Monte Carlo estimator of the pathwise decay rate.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::LyapunovSpec;
use crate::quadrature::integrate_adaptive;
use crate::simulator::Trajectory;

/// Relative tolerance of the quadrature behind `G` for custom profiles.
pub const QUADRATURE_TOLERANCE: f64 = 1e-12;

/// Custom-profile `G` is not integrated below this point; `G` reports `−∞` there.
pub const QUADRATURE_FLOOR: f64 = 1e-12;

/// Bisection stops once `|G(y) + t|` falls below this.
pub const INVERSE_TOLERANCE: f64 = 1e-10;

/// Number of points checked when validating a custom profile.
const PROFILE_CHECK_POINTS: usize = 512;

pub type ProfileFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum ProfileKind {
    /// `g(y) = y`.
    Identity,
    /// `g(y) = y^{1+γ}` with `γ ∈ (0, 1)`.
    Power { gamma: f64 },
    Custom {
        label: String,
        g: ProfileFn,
        dg: Option<ProfileFn>,
    },
}

impl fmt::Debug for ProfileKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProfileKind::Identity => write!(f, "Identity"),
            ProfileKind::Power { gamma } => write!(f, "Power {{ gamma: {gamma} }}"),
            ProfileKind::Custom { label, .. } => write!(f, "Custom({label})"),
        }
    }
}

/// A member `g` of the admissible family together with the upper limit `h`
/// of the `G` integral.
#[derive(Debug, Clone)]
pub struct RateProfile {
    kind: ProfileKind,
    h: f64,
}

impl RateProfile {
    pub fn identity(h: f64) -> Self {
        assert!(h > 0.0, "upper limit must be positive");
        RateProfile {
            kind: ProfileKind::Identity,
            h,
        }
    }

    pub fn power(gamma: f64, h: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Domain(format!("γ = {gamma} must lie in (0, 1)")));
        }
        check_upper_limit(h)?;
        Ok(RateProfile {
            kind: ProfileKind::Power { gamma },
            h,
        })
    }

    /// Wraps a user profile after checking `g(0) = 0` and strict increase on
    /// 512 points of `[0, 1]`.
    pub fn custom(label: impl Into<String>, g: ProfileFn, dg: Option<ProfileFn>, h: f64) -> Result<Self> {
        check_upper_limit(h)?;
        let label = label.into();
        if g(0.0) != 0.0 {
            return Err(Error::Contract(format!("profile {label}: g(0) = {} must be 0", g(0.0))));
        }
        let mut prev = 0.0;
        for k in 1..PROFILE_CHECK_POINTS {
            let y = k as f64 / (PROFILE_CHECK_POINTS - 1) as f64;
            let v = g(y);
            if !(v > prev) || !v.is_finite() {
                return Err(Error::Contract(format!(
                    "profile {label} is not strictly increasing near y = {y}"
                )));
            }
            prev = v;
        }
        Ok(RateProfile {
            kind: ProfileKind::Custom { label, g, dg },
            h,
        })
    }

    pub fn kind(&self) -> &ProfileKind {
        &self.kind
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn with_upper_limit(&self, h: f64) -> Result<Self> {
        check_upper_limit(h)?;
        Ok(RateProfile {
            kind: self.kind.clone(),
            h,
        })
    }

    pub fn name(&self) -> String {
        match &self.kind {
            ProfileKind::Identity => "identity".into(),
            ProfileKind::Power { gamma } => format!("power_1_plus_gamma({gamma})"),
            ProfileKind::Custom { label, .. } => format!("custom({label})"),
        }
    }

    pub fn g(&self, y: f64) -> f64 {
        match &self.kind {
            ProfileKind::Identity => y,
            ProfileKind::Power { gamma } => y.powf(1.0 + gamma),
            ProfileKind::Custom { g, .. } => g(y),
        }
    }

    pub fn dg(&self, y: f64) -> f64 {
        match &self.kind {
            ProfileKind::Identity => 1.0,
            ProfileKind::Power { gamma } => (1.0 + gamma) * y.powf(*gamma),
            ProfileKind::Custom { g, dg, .. } => match dg {
                Some(dg) => dg(y),
                None => {
                    let eta = (1e-6 * y.abs()).max(1e-9);
                    (g(y + eta) - g((y - eta).max(0.0))) / (y + eta - (y - eta).max(0.0))
                }
            },
        }
    }

    fn check_argument(&self, y: f64) -> Result<()> {
        if !(y > 0.0 && y <= self.h) {
            return Err(Error::Domain(format!("G is defined on (0, {}], got {y}", self.h)));
        }
        Ok(())
    }

    /// `G(y) = −∫_y^h dz / g(z)`, closed form where one exists.
    pub fn big_g(&self, y: f64) -> Result<f64> {
        self.check_argument(y)?;
        match &self.kind {
            ProfileKind::Identity => Ok((y / self.h).ln()),
            ProfileKind::Power { gamma } => Ok((self.h.powf(-gamma) - y.powf(-gamma)) / gamma),
            ProfileKind::Custom { .. } => self.big_g_quadrature(y),
        }
    }

    /// `G(y)` by adaptive Gauss–Kronrod quadrature regardless of kind.
    pub fn big_g_quadrature(&self, y: f64) -> Result<f64> {
        self.check_argument(y)?;
        if y < QUADRATURE_FLOOR {
            return Ok(f64::NEG_INFINITY);
        }
        if y == self.h {
            return Ok(0.0);
        }
        let integrand = |z: f64| 1.0 / self.g(z);
        // Dyadic panels keep each sub-interval away from the singularity at 0.
        let mut total = 0.0;
        let mut a = y;
        while a < self.h {
            let b = (2.0 * a).min(self.h);
            total += integrate_adaptive(&integrand, a, b, QUADRATURE_TOLERANCE)?;
            a = b;
        }
        Ok(-total)
    }

    /// `G^{-1}(−t)` for `t >= 0`, a point of `(0, h]`.
    pub fn big_g_inverse(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("G^-1(−t) needs t >= 0, got {t}")));
        }
        if t == 0.0 {
            return Ok(self.h);
        }
        match &self.kind {
            ProfileKind::Identity => Ok(self.h * (-t).exp()),
            ProfileKind::Power { gamma } => Ok((self.h.powf(-gamma) + gamma * t).powf(-1.0 / gamma).min(self.h)),
            ProfileKind::Custom { .. } => self.big_g_inverse_bisection(t),
        }
    }

    /// Monotone bisection on `G` in `ln y`.
    pub fn big_g_inverse_bisection(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("G^-1(−t) needs t >= 0, got {t}")));
        }
        if t == 0.0 {
            return Ok(self.h);
        }
        let mut hi = self.h.ln();
        let mut lo = hi - 1.0;
        // Expand downward until G(lo) <= −t.
        loop {
            let y = lo.exp();
            if y < QUADRATURE_FLOOR {
                return Err(Error::Numeric(format!(
                    "G^-1(−{t}) lies below the quadrature floor {QUADRATURE_FLOOR}"
                )));
            }
            if self.big_g(y)? <= -t {
                break;
            }
            hi = lo;
            lo -= 2.0 * (hi - lo).max(1.0);
        }
        let mut best = (f64::INFINITY, hi.exp());
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let y = mid.exp();
            let r = self.big_g(y)? + t;
            if r.abs() < best.0 {
                best = (r.abs(), y);
            }
            if r.abs() < INVERSE_TOLERANCE || hi - lo < 1e-15 {
                break;
            }
            if r > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(best.1)
    }
}

fn check_upper_limit(h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Domain(format!("upper limit h = {h} must be positive")));
    }
    Ok(())
}

/// Number of candidate decay rates.
pub const LAMBDA_GRID_POINTS: usize = 64;
pub const LAMBDA_GRID_MIN: f64 = 1e-4;
pub const LAMBDA_GRID_MAX: f64 = 1e2;

pub fn lambda_grid() -> Vec<f64> {
    log_grid(LAMBDA_GRID_MIN, LAMBDA_GRID_MAX, LAMBDA_GRID_POINTS)
}

/// Ratio between consecutive candidate rates.
pub fn lambda_grid_resolution() -> f64 {
    (LAMBDA_GRID_MAX / LAMBDA_GRID_MIN).powf(1.0 / (LAMBDA_GRID_POINTS - 1) as f64)
}

pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2 && lo > 0.0 && hi > lo);
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|k| match k {
            0 => lo,
            k if k == n - 1 => hi,
            k => (a + (b - a) * k as f64 / (n - 1) as f64).exp(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuantilePoint {
    pub lambda: f64,
    pub quantile: f64,
    pub n_surviving: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateEstimate {
    /// Largest candidate rate whose `(1 − ε)`-quantile of `R(λ)` is at most 1.
    pub lambda_hat: Option<f64>,
    /// Multiplicative spacing of the candidate grid.
    pub resolution: f64,
    pub curve: Vec<QuantilePoint>,
    pub n_surviving: usize,
    pub n_excluded: usize,
    pub t0: f64,
    pub epsilon: f64,
}

/// Per-path statistic `R(λ) = sup_{t ∈ [T0, T]} V(X(t)) / G^{-1}(−λ t)` for
/// every candidate rate. `None` when the path left the ball or has no
/// samples in the window.
pub fn sup_ratio_curve(
    traj: &Trajectory,
    v: &dyn Fn(&[f64]) -> f64,
    profile: &RateProfile,
    t0: f64,
    lambdas: &[f64],
) -> Result<Option<Vec<f64>>> {
    if traj.exited || traj.blew_up {
        return Ok(None);
    }
    let samples: Vec<(f64, f64)> = traj
        .times
        .iter()
        .zip(&traj.x_path)
        .filter(|(t, _)| **t >= t0)
        .map(|(t, x)| (*t, v(x)))
        .collect();
    if samples.is_empty() {
        return Ok(None);
    }
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut sup = 0.0f64;
        for &(t, value) in &samples {
            let envelope = profile.big_g_inverse(lambda * t)?;
            sup = sup.max(value / envelope);
        }
        out.push(sup);
    }
    Ok(Some(out))
}

/// Nearest-rank `q`-quantile of an unsorted sample.
pub fn quantile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values[rank - 1]
}

/// Largest candidate `λ` such that, over the surviving paths,
/// `V(X(t)) <= G^{-1}(−λ t)` on `[T0, T]` for a `(1 − ε)` fraction of them.
pub fn estimate_pathwise_rate(
    trajectories: &[Trajectory],
    lyap: &LyapunovSpec,
    profile: &RateProfile,
    t0: f64,
    epsilon: f64,
) -> Result<RateEstimate> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Domain(format!("ε = {epsilon} must lie in (0, 1)")));
    }
    let lambdas = lambda_grid();
    let v = |x: &[f64]| lyap.v(x);
    let curves = trajectories
        .iter()
        .map(|traj| sup_ratio_curve(traj, &v, profile, t0, &lambdas))
        .collect::<Result<Vec<_>>>()?;
    rate_from_curves(curves, t0, epsilon)
}

/// The reduction step of [`estimate_pathwise_rate`] for callers that compute
/// per-path curves on [`lambda_grid`] themselves; `None` marks an excluded path.
pub fn rate_from_curves(per_path: Vec<Option<Vec<f64>>>, t0: f64, epsilon: f64) -> Result<RateEstimate> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Domain(format!("ε = {epsilon} must lie in (0, 1)")));
    }
    let lambdas = lambda_grid();
    let total = per_path.len();
    let curves: Vec<Vec<f64>> = per_path.into_iter().flatten().collect();
    let excluded = total - curves.len();
    if curves.is_empty() {
        return Err(Error::NoSurvivingPaths { exited: excluded, total });
    }
    if curves.iter().any(|c| c.len() != lambdas.len()) {
        return Err(Error::Domain("curves must be evaluated on the candidate grid".into()));
    }
    let mut curve = Vec::with_capacity(lambdas.len());
    let mut column = vec![0.0; curves.len()];
    for (k, &lambda) in lambdas.iter().enumerate() {
        for (c, dst) in curves.iter().zip(column.iter_mut()) {
            *dst = c[k];
        }
        curve.push(QuantilePoint {
            lambda,
            quantile: quantile(&mut column, 1.0 - epsilon),
            n_surviving: curves.len(),
        });
    }
    let lambda_hat = curve
        .iter()
        .take_while(|p| p.quantile <= 1.0)
        .last()
        .map(|p| p.lambda);
    Ok(RateEstimate {
        lambda_hat,
        resolution: lambda_grid_resolution(),
        curve,
        n_surviving: curves.len(),
        n_excluded: excluded,
        t0,
        epsilon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn custom_profile(h: f64) -> RateProfile {
        RateProfile::custom("y+y^2", Arc::new(|y| y + y * y), Some(Arc::new(|y| 1.0 + 2.0 * y)), h).unwrap()
    }

    #[test]
    fn g_at_upper_limit_is_zero() {
        for p in [RateProfile::identity(1.0), RateProfile::power(0.5, 1.0).unwrap(), custom_profile(1.0)] {
            assert_eq!(p.big_g(1.0).unwrap(), 0.0);
            assert_eq!(p.big_g_inverse(0.0).unwrap(), 1.0);
        }
    }

    #[test]
    fn identity_closed_form_and_quadrature() {
        let p = RateProfile::identity(1.0);
        let closed = p.big_g(0.5).unwrap();
        assert!((closed - 0.5f64.ln()).abs() < 1e-15);
        assert!((p.big_g_quadrature(0.5).unwrap() - closed).abs() < 1e-9);
        assert!((p.big_g_inverse(1.0).unwrap() - 0.367_879_441_171_442_3).abs() < 1e-9);
    }

    #[test]
    fn power_antiderivative() {
        // −∫_{1/4}^1 z^{-3/2} dz = −2 (4^{1/2} − 1) = −2.
        let p = RateProfile::power(0.5, 1.0).unwrap();
        assert!((p.big_g(0.25).unwrap() + 2.0).abs() < 1e-12);
        assert!((p.big_g_quadrature(0.25).unwrap() + 2.0).abs() < 1e-9);
    }

    #[test]
    fn power_bisection_roundtrip() {
        let p = RateProfile::power(0.5, 1.0).unwrap();
        for t in [0.1, 1.0, 10.0, 100.0] {
            let y = p.big_g_inverse_bisection(t).unwrap();
            assert!((p.big_g(y).unwrap() + t).abs() < 1e-8);
        }
    }

    #[test]
    fn domain_errors() {
        let p = RateProfile::identity(1.0);
        assert!(matches!(p.big_g(0.0), Err(Error::Domain(_))));
        assert!(matches!(p.big_g(1.5), Err(Error::Domain(_))));
        assert!(matches!(p.big_g_inverse(-1.0), Err(Error::Domain(_))));
        assert!(RateProfile::power(1.0, 1.0).is_err());
        assert!(RateProfile::power(0.0, 1.0).is_err());
    }

    #[test]
    fn custom_profile_validation() {
        assert!(RateProfile::custom("shifted", Arc::new(|y| y + 1.0), None, 1.0).is_err());
        assert!(RateProfile::custom("flat", Arc::new(|y| y.min(0.5)), None, 1.0).is_err());
        let p = custom_profile(1.0);
        assert!(p.big_g(1e-13).unwrap().is_infinite());
    }

    #[test]
    fn custom_profile_against_antiderivative() {
        // 1/(y + y²) = 1/y − 1/(1+y).
        let h = 0.8;
        let p = custom_profile(h);
        for y in [1e-6, 1e-3, 0.1, 0.5, 0.8] {
            let exact = -((h * (1.0 + y)) / (y * (1.0 + h))).ln();
            let got = p.big_g(y).unwrap();
            assert!((got - exact).abs() <= 1e-9 * exact.abs().max(1.0), "{y}: {got} vs {exact}");
        }
    }

    #[test]
    fn envelopes_vanish_at_infinity() {
        for p in [RateProfile::identity(1.0), RateProfile::power(0.5, 1.0).unwrap(), RateProfile::power(0.25, 1.0).unwrap()] {
            assert!(p.big_g_inverse(1e6).unwrap() < 1e-3);
        }
    }

    #[test]
    fn lambda_grid_shape() {
        let g = lambda_grid();
        assert_eq!(g.len(), 64);
        assert!((g[0] - 1e-4).abs() < 1e-18);
        assert!((g[63] - 1e2).abs() < 1e-10);
        assert!((g[1] / g[0] - lambda_grid_resolution()).abs() < 1e-12);
    }

    #[test]
    fn nearest_rank_quantile() {
        let mut v = vec![5.0, 1.0, 3.0, 2.0, 4.0];
        assert_eq!(quantile(&mut v, 0.8), 4.0);
        assert_eq!(quantile(&mut v, 1.0), 5.0);
        assert_eq!(quantile(&mut v, 0.01), 1.0);
    }
}
