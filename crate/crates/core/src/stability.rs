//! Stability and instability certificates: the averaged-drift criterion,
//! theorem hypotheses evaluated on scans, and the linearization criterion.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markov_chain::{
    drift_correction, ergodicity_diagnostic, ergodicity_time_grid, invariant_measure, truncate, ErgodicityDiagnostic,
    ErgodicityVerdict, InvariantMeasure, TruncatedChain, TruncationMode,
};
use crate::model::{
    drift_grid, norm, probe_directions, verify_drift_condition, DriftDirection, DriftReport, LinearPart, LyapunovSpec,
    ModelSpec, Regime,
};
use crate::rates::ProfileKind;
use crate::simulator::kernel_discrepancy;

/// Acceptable growth of `|V_x σ| / g(V)` from the outer shells to the
/// innermost decade before `M_g` is reported unbounded.
pub const MG_GROWTH_LIMIT: f64 = 1.25;

/// Kernel discrepancy allowed at the smallest probed radius, relative to `max(1, sup Ξ)`.
pub const CONTINUITY_TOLERANCE: f64 = 1e-4;

/// Central-difference step for Jacobians at the origin.
pub const JACOBIAN_STEP: f64 = 1e-6;

/// Sums within this of zero leave the eigenvalue criterion inconclusive
/// when the linear parts are exact.
pub const EIGEN_TOLERANCE: f64 = 1e-12;

/// The same band for finite-difference Jacobians, whose error is `O(step)`
/// for coefficients that are only once differentiable at the origin.
pub const EIGEN_FD_TOLERANCE: f64 = 10.0 * JACOBIAN_STEP;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Holds,
    Fails,
    Unchecked,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hypothesis {
    pub status: Status,
    pub detail: String,
}

impl Hypothesis {
    fn new(status: Status, detail: impl Into<String>) -> Self {
        Hypothesis { status, detail: detail.into() }
    }

    fn from_bool(ok: bool, detail: impl Into<String>) -> Self {
        Self::new(if ok { Status::Holds } else { Status::Fails }, detail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    StableCertified,
    UnstableCertified,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Theorem {
    /// Strong ergodicity, kernel continuity and `ℒ_i V <= c_i V`.
    #[serde(rename = "T3_1")]
    T31,
    /// Ergodicity, the drift condition, `limsup c_i < 0` and `M_g < ∞`.
    #[serde(rename = "T3_2")]
    T32,
    /// Strong ergodicity, kernel continuity, the drift condition and `M_g < ∞`.
    #[serde(rename = "T3_3")]
    T33,
    /// Instability with an ergodic frozen chain and the reversed drift inequality.
    #[serde(rename = "T3_5_ergodic")]
    T35Ergodic,
    /// Instability with a strongly ergodic frozen chain and kernel continuity.
    #[serde(rename = "T3_5_strong")]
    T35Strong,
}

impl Theorem {
    pub const ALL: [Theorem; 5] = [Theorem::T31, Theorem::T32, Theorem::T33, Theorem::T35Ergodic, Theorem::T35Strong];

    pub fn name(self) -> &'static str {
        match self {
            Theorem::T31 => "T3_1",
            Theorem::T32 => "T3_2",
            Theorem::T33 => "T3_3",
            Theorem::T35Ergodic => "T3_5_ergodic",
            Theorem::T35Strong => "T3_5_strong",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Theorem::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown theorem {s:?}")))
    }

    pub fn is_instability(self) -> bool {
        matches!(self, Theorem::T35Ergodic | Theorem::T35Strong)
    }

    pub fn direction(self) -> DriftDirection {
        if self.is_instability() {
            DriftDirection::Lower
        } else {
            DriftDirection::Upper
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Negative,
    Positive,
    Undetermined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanDrift {
    /// `Σ c_i ν_i` over the states carrying a single regime.
    pub value: f64,
    /// `c̄ ·` (mass not attributed to a single regime).
    pub tail_bound: f64,
    pub sign: Sign,
    pub unassigned_mass: f64,
    pub truncation_size: usize,
}

/// `Σ c_i ν_i` with a certified sign.
///
/// A lumped last state stands for every regime beyond the truncation, so its
/// mass is treated as unassigned together with `1 − Σν`.
pub fn mean_drift_criterion(c: &dyn Fn(Regime) -> f64, c_bound: f64, nu: &InvariantMeasure) -> MeanDrift {
    let assigned = if nu.lumped_tail { nu.nu.len().saturating_sub(1) } else { nu.nu.len() };
    let value: f64 = nu.nu[..assigned]
        .iter()
        .enumerate()
        .map(|(k, v)| c(Regime::from_index(k)) * v)
        .sum();
    let assigned_mass: f64 = nu.nu[..assigned].iter().sum();
    let unassigned_mass = (1.0 - assigned_mass).max(0.0);
    let tail_bound = c_bound * unassigned_mass;
    MeanDrift {
        value,
        tail_bound,
        sign: certified_sign(value, tail_bound),
        unassigned_mass,
        truncation_size: nu.nu.len(),
    }
}

fn certified_sign(value: f64, tail: f64) -> Sign {
    if value + tail < 0.0 {
        Sign::Negative
    } else if value - tail > 0.0 {
        Sign::Positive
    } else {
        Sign::Undetermined
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSettings {
    pub truncation: usize,
    pub mode: TruncationMode,
    /// Regimes `1..=k_scan` enter every per-regime scan.
    pub k_scan: usize,
    /// The limsup/liminf proxies use regimes `k0 < i <= k_scan`.
    pub k0: usize,
    /// Radius `h` of the scanned ball.
    pub radius: f64,
    pub radii_per_decade: usize,
}

impl ScanSettings {
    pub fn new(truncation: usize, radius: f64) -> Self {
        let k_scan = (4 * truncation).max(100);
        ScanSettings {
            truncation,
            mode: TruncationMode::Lump,
            k_scan,
            k0: k_scan / 2,
            radius,
            radii_per_decade: 4,
        }
    }
}

/// `M_g = sup |V_x(x) σ(x,i)| / g(V(x))` on shells inside `B_h`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MgScan {
    pub sup: f64,
    /// Largest per-regime ratio of the innermost-decade sup to the outer sup.
    pub worst_growth: f64,
    pub points: usize,
    pub holds: bool,
}

pub fn scan_mg(spec: &ModelSpec, lyap: &LyapunovSpec, settings: &ScanSettings) -> Result<MgScan> {
    let inner_edge = settings.radius * 1e-3;
    let grid = drift_grid(spec.dim(), settings.radius, settings.radii_per_decade, settings.k_scan);
    let mut per_regime: BTreeMap<Regime, (f64, f64)> = BTreeMap::new();
    let mut sup = 0.0f64;
    let mut finite = true;
    for (x, i) in &grid {
        let grad = lyap.grad(x);
        let sigma = spec.diffusion(x, *i);
        let g = lyap.profile.g(lyap.v(x));
        let row_norm = (0..spec.noise_dim())
            .map(|k| (0..spec.dim()).map(|r| grad[r] * sigma[(r, k)]).sum::<f64>().powi(2))
            .sum::<f64>()
            .sqrt();
        let ratio = if row_norm == 0.0 { 0.0 } else { row_norm / g };
        if !ratio.is_finite() {
            finite = false;
            continue;
        }
        sup = sup.max(ratio);
        let e = per_regime.entry(*i).or_insert((0.0, 0.0));
        if norm(x) < inner_edge {
            e.0 = e.0.max(ratio);
        } else {
            e.1 = e.1.max(ratio);
        }
    }
    let worst_growth = per_regime
        .values()
        .map(|(inner, outer)| if *inner == 0.0 { 0.0 } else if *outer == 0.0 { f64::INFINITY } else { inner / outer })
        .fold(0.0, f64::max);
    Ok(MgScan {
        sup: if finite { sup } else { f64::INFINITY },
        worst_growth,
        points: grid.len(),
        holds: finite && worst_growth <= MG_GROWTH_LIMIT,
    })
}

/// `sup_i Ξ(x, i)` on shells shrinking to the origin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuityScan {
    pub radii: Vec<f64>,
    pub sup_by_radius: Vec<f64>,
    pub holds: bool,
}

pub fn scan_kernel_continuity(spec: &ModelSpec, settings: &ScanSettings) -> ContinuityScan {
    // Eight decades below h, two radii per decade, smallest first.
    let radii: Vec<f64> = (0..=16).map(|k| settings.radius * 10f64.powf(-8.0 + k as f64 * 0.5)).collect();
    let dirs = probe_directions(spec.dim());
    let kernel = spec.kernel.as_ref();
    let mut per_regime_small = 0.0f64;
    let sup_by_radius: Vec<f64> = radii
        .iter()
        .enumerate()
        .map(|(k, r)| {
            let mut s = 0.0f64;
            for i in 1..=settings.k_scan {
                for d in &dirs {
                    let x: Vec<f64> = d.iter().map(|v| v * r).collect();
                    let xi = kernel_discrepancy(kernel, &x, Regime::new(i).expect("positive"));
                    s = s.max(xi);
                }
            }
            if k == 0 {
                per_regime_small = s;
            }
            s
        })
        .collect();
    let scale = sup_by_radius.iter().copied().fold(1.0, f64::max);
    ContinuityScan {
        holds: sup_by_radius.iter().all(|v| v.is_finite()) && per_regime_small <= CONTINUITY_TOLERANCE * scale,
        radii,
        sup_by_radius,
    }
}

/// Everything the theorem checks consume.
#[derive(Debug, Clone, Serialize)]
pub struct Evidence {
    pub settings: ScanSettings,
    #[serde(skip)]
    pub chain: Option<TruncatedChain>,
    pub nu: Option<InvariantMeasure>,
    pub ergodicity: Option<ErgodicityDiagnostic>,
    pub drift_upper: Option<DriftReport>,
    pub drift_lower: Option<DriftReport>,
    pub m_g: Option<MgScan>,
    pub continuity: Option<ContinuityScan>,
}

impl Evidence {
    pub fn empty(settings: ScanSettings) -> Self {
        Evidence {
            settings,
            chain: None,
            nu: None,
            ergodicity: None,
            drift_upper: None,
            drift_lower: None,
            m_g: None,
            continuity: None,
        }
    }
}

/// Runs every scan needed by the theorem checks.
pub fn gather_evidence(spec: &ModelSpec, lyap: &LyapunovSpec, settings: &ScanSettings) -> Result<Evidence> {
    let chain = truncate(spec.kernel.as_ref(), spec.dim(), settings.truncation, settings.mode)?;
    let nu = invariant_measure(&chain)?;
    let times = ergodicity_time_grid(&chain, &nu)?;
    let ergodicity = ergodicity_diagnostic(&chain, &nu, &times)?;
    let grid = drift_grid(spec.dim(), settings.radius.min(lyap.domain_radius), settings.radii_per_decade, settings.k_scan);
    Ok(Evidence {
        settings: settings.clone(),
        drift_upper: Some(verify_drift_condition(spec, lyap, &grid, DriftDirection::Upper)?),
        drift_lower: Some(verify_drift_condition(spec, lyap, &grid, DriftDirection::Lower)?),
        m_g: Some(scan_mg(spec, lyap, settings)?),
        continuity: Some(scan_kernel_continuity(spec, settings)),
        chain: Some(chain),
        nu: Some(nu),
        ergodicity: Some(ergodicity),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanCutoffs {
    pub truncation: usize,
    pub k_scan: usize,
    pub k0: usize,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionReport {
    pub theorem: Theorem,
    pub hypotheses: BTreeMap<String, Hypothesis>,
    pub mean_drift: f64,
    pub tail_bound: f64,
    pub mean_drift_sign: Sign,
    /// `max c_i` over `k0 < i <= k_scan` for stability, `min c_i` for instability.
    pub limsup_tail_c: Option<f64>,
    pub verdict: Verdict,
    pub scan_cutoffs: ScanCutoffs,
    pub note: String,
}

fn ergodic_hypothesis(e: &Evidence, strong: bool) -> Option<Hypothesis> {
    let (nu, diag) = (e.nu.as_ref()?, e.ergodicity.as_ref()?);
    let label = if strong { "strongly ergodic" } else { "ergodic" };
    Some(match diag.verdict {
        ErgodicityVerdict::StronglyExponentiallyErgodic | ErgodicityVerdict::Mixed => Hypothesis::new(
            Status::Holds,
            format!(
                "truncation N = {} irreducible (balance residual {:.2e}); {label} by fit {:?}",
                nu.truncation_size, nu.residual, diag.fit.map(|f| f.lambda)
            ),
        ),
        ErgodicityVerdict::NotDemonstrated => match diag.fit {
            Some(f) if f.lambda <= 0.0 => Hypothesis::new(Status::Fails, format!("fitted decay rate {} is not positive", f.lambda)),
            fit => Hypothesis::new(Status::Unchecked, format!("decay fit inconclusive: {fit:?}")),
        },
    })
}

/// Evaluates the hypotheses of `which` on the evidence and derives a verdict.
///
/// Scans are finite grids and truncations: a `holds` entry is grid evidence,
/// not a proof.
pub fn check_theorem_hypotheses(which: Theorem, lyap: &LyapunovSpec, evidence: &Evidence) -> Result<CriterionReport> {
    let s = &evidence.settings;
    let mut missing = Vec::new();
    let strong = matches!(which, Theorem::T31 | Theorem::T33 | Theorem::T35Strong);
    let needs_continuity = strong;
    let needs_mg = !matches!(which, Theorem::T31);
    if evidence.nu.is_none() {
        missing.push("invariant measure");
    }
    if evidence.ergodicity.is_none() {
        missing.push("ergodicity diagnostic");
    }
    let drift = match which.direction() {
        DriftDirection::Upper => evidence.drift_upper.as_ref(),
        DriftDirection::Lower => evidence.drift_lower.as_ref(),
    };
    if drift.is_none() {
        missing.push("drift-condition scan");
    }
    if needs_mg && evidence.m_g.is_none() {
        missing.push("M_g scan");
    }
    if needs_continuity && evidence.continuity.is_none() {
        missing.push("kernel-continuity scan");
    }
    if !missing.is_empty() {
        return Err(Error::Config(format!("{} needs: {}", which.name(), missing.join(", "))));
    }
    let nu = evidence.nu.as_ref().expect("checked");
    let drift = drift.expect("checked");

    let mut h = BTreeMap::new();
    let key = if strong { "strong_ergodicity" } else { "ergodicity" };
    h.insert(key.to_string(), ergodic_hypothesis(evidence, strong).expect("checked"));

    let cs: Vec<f64> = (1..=s.k_scan).map(|i| lyap.c_at(Regime::new(i).expect("positive"))).collect();
    let sup_c = cs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    h.insert(
        "c_bounded".into(),
        Hypothesis::from_bool(
            cs.iter().all(|c| c.is_finite()) && sup_c <= lyap.c_bound,
            format!("max |c_i| = {sup_c} over i <= {}, declared bound {}", s.k_scan, lyap.c_bound),
        ),
    );
    let dir_name = match drift.direction {
        DriftDirection::Upper => "drift_condition",
        DriftDirection::Lower => "reversed_drift_condition",
    };
    h.insert(
        dir_name.into(),
        Hypothesis::from_bool(
            drift.holds() && drift.checked > 0,
            format!(
                "{} violations on {} grid points, max residual {:?}",
                drift.violations.len(),
                drift.checked,
                drift.max_residual
            ),
        ),
    );
    if which == Theorem::T31 {
        h.insert(
            "linear_profile".into(),
            Hypothesis::from_bool(
                matches!(lyap.profile.kind(), ProfileKind::Identity),
                format!("g = {}", lyap.profile.name()),
            ),
        );
        if let Some(chain) = &evidence.chain {
            let c_trunc: Vec<f64> = (0..chain.size()).map(|k| lyap.c_at(Regime::from_index(k))).collect();
            match drift_correction(chain, nu, &c_trunc) {
                Ok((lambda, sol)) => h.insert(
                    "poisson_correction".into(),
                    Hypothesis::from_bool(
                        sol.residual < 1e-8,
                        format!("λ = {lambda}, ‖Qγ − (λ1 + c)‖ = {:.2e}", sol.residual),
                    ),
                ),
                Err(err) => h.insert("poisson_correction".into(), Hypothesis::new(Status::Fails, err.to_string())),
            };
        }
    }
    let tail_c = (s.k0 < s.k_scan).then(|| {
        let window = &cs[s.k0..];
        if which.is_instability() {
            window.iter().copied().fold(f64::INFINITY, f64::min)
        } else {
            window.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        }
    });
    if which == Theorem::T32 {
        h.insert(
            "limsup_c_negative".into(),
            match tail_c {
                Some(v) => Hypothesis::from_bool(v < 0.0, format!("max c_i over {} < i <= {} is {v}", s.k0, s.k_scan)),
                None => Hypothesis::new(Status::Unchecked, "empty limsup window"),
            },
        );
    }
    if which == Theorem::T35Ergodic {
        h.insert(
            "liminf_c_positive".into(),
            match tail_c {
                Some(v) => Hypothesis::from_bool(v > 0.0, format!("min c_i over {} < i <= {} is {v}", s.k0, s.k_scan)),
                None => Hypothesis::new(Status::Unchecked, "empty liminf window"),
            },
        );
    }
    if needs_mg {
        let m = evidence.m_g.as_ref().expect("checked");
        h.insert(
            "m_g_finite".into(),
            Hypothesis::from_bool(
                m.holds,
                format!("sup = {} on {} points, inner/outer growth {}", m.sup, m.points, m.worst_growth),
            ),
        );
    }
    if needs_continuity {
        let c = evidence.continuity.as_ref().expect("checked");
        h.insert(
            "kernel_continuity".into(),
            Hypothesis::from_bool(
                c.holds,
                format!(
                    "sup_i Ξ = {:.3e} at |x| = {:.1e}, {:.3e} at |x| = {:.1e}",
                    c.sup_by_radius[0],
                    c.radii[0],
                    c.sup_by_radius.last().copied().unwrap_or(0.0),
                    c.radii.last().copied().unwrap_or(0.0)
                ),
            ),
        );
    }
    let md = mean_drift_criterion(&|i| lyap.c_at(i), lyap.c_bound, nu);
    let (key, wanted) = if which.is_instability() {
        ("mean_drift_positive", Sign::Positive)
    } else {
        ("mean_drift_negative", Sign::Negative)
    };
    h.insert(
        key.into(),
        Hypothesis::from_bool(
            md.sign == wanted,
            format!("Σ c_i ν_i = {} ± {}", md.value, md.tail_bound),
        ),
    );

    let all_hold = h.values().all(|x| x.status == Status::Holds);
    let verdict = match (all_hold, which.is_instability()) {
        (true, false) => Verdict::StableCertified,
        (true, true) => Verdict::UnstableCertified,
        _ => Verdict::Inconclusive,
    };
    Ok(CriterionReport {
        theorem: which,
        hypotheses: h,
        mean_drift: md.value,
        tail_bound: md.tail_bound,
        mean_drift_sign: md.sign,
        limsup_tail_c: tail_c,
        verdict,
        scan_cutoffs: ScanCutoffs {
            truncation: s.truncation,
            k_scan: s.k_scan,
            k0: s.k0,
            radius: s.radius,
        },
        note: "hypotheses are evaluated on finite grids and truncations".into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimeLinearization {
    pub regime: Regime,
    #[serde(skip)]
    pub b: DMatrix<f64>,
    #[serde(skip)]
    pub sigma: Vec<DMatrix<f64>>,
    /// Extreme eigenvalues of `(b + bᵀ)/2`.
    pub big_lambda1: f64,
    pub small_lambda1: f64,
    /// Extreme eigenvalues of `σ_k σ_kᵀ`, one per noise channel.
    pub big_lambda2: Vec<f64>,
    pub small_lambda2: Vec<f64>,
    /// Extreme real parts of the eigenvalues of `b` itself.
    pub raw_max: f64,
    pub raw_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearizationData {
    pub regimes: Vec<RegimeLinearization>,
    /// Matrices taken from the family rather than finite differences.
    pub exact: bool,
    pub probe_radii: Vec<f64>,
    /// `sup_i (|ξ_i(x)| ∨ |ζ_i(x)|)/|x|` at each probe radius.
    pub residuals: Vec<f64>,
    pub residual_decreasing: bool,
    pub warning: Option<String>,
}

fn symmetric_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym).eigenvalues;
    (eig.max(), eig.min())
}

fn raw_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = m.clone().complex_eigenvalues();
    let re = eig.iter().map(|z| z.re);
    (re.clone().fold(f64::NEG_INFINITY, f64::max), re.fold(f64::INFINITY, f64::min))
}

pub fn regime_linearization(regime: Regime, part: LinearPart) -> RegimeLinearization {
    let (big1, small1) = symmetric_extremes(&part.drift);
    let (big2, small2): (Vec<f64>, Vec<f64>) = part
        .diffusion
        .iter()
        .map(|s| {
            let gram = s * s.transpose();
            let eig = SymmetricEigen::new(gram).eigenvalues;
            (eig.max(), eig.min().max(0.0))
        })
        .unzip();
    let (raw_max, raw_min) = raw_extremes(&part.drift);
    RegimeLinearization {
        regime,
        b: part.drift,
        sigma: part.diffusion,
        big_lambda1: big1,
        small_lambda1: small1,
        big_lambda2: big2,
        small_lambda2: small2,
        raw_max,
        raw_min,
    }
}

fn jacobian_part(spec: &ModelSpec, i: Regime) -> LinearPart {
    let (n, d) = (spec.dim(), spec.noise_dim());
    let mut drift = DMatrix::zeros(n, n);
    let mut sigma = vec![DMatrix::zeros(n, n); d];
    for m in 0..n {
        let mut xp = vec![0.0; n];
        let mut xm = vec![0.0; n];
        xp[m] = JACOBIAN_STEP;
        xm[m] = -JACOBIAN_STEP;
        let (bp, bm) = (spec.drift(&xp, i), spec.drift(&xm, i));
        let (sp, sm) = (spec.diffusion(&xp, i), spec.diffusion(&xm, i));
        for r in 0..n {
            drift[(r, m)] = (bp[r] - bm[r]) / (2.0 * JACOBIAN_STEP);
            for (k, s) in sigma.iter_mut().enumerate() {
                s[(r, m)] = (sp[(r, k)] - sm[(r, k)]) / (2.0 * JACOBIAN_STEP);
            }
        }
    }
    LinearPart { drift, diffusion: sigma }
}

/// Linear parts `b(i)`, `σ_k(i)` for regimes `1..=regimes`, from the family
/// when it knows them and by central differences at the origin otherwise,
/// with the remainder ratio evaluated on `probe_radii`.
pub fn linearize(spec: &ModelSpec, regimes: usize, probe_radii: &[f64]) -> Result<LinearizationData> {
    if !spec.zero_fixed {
        return Err(Error::Contract("linearization needs a model fixing the origin".into()));
    }
    let mut exact = true;
    let parts: Vec<(Regime, LinearPart)> = (0..regimes)
        .map(|k| {
            let i = Regime::from_index(k);
            let part = spec.coefficients.linear_part(i).unwrap_or_else(|| {
                exact = false;
                jacobian_part(spec, i)
            });
            (i, part)
        })
        .collect();
    let (n, d) = (spec.dim(), spec.noise_dim());
    let dirs = probe_directions(n);
    let mut radii = probe_radii.to_vec();
    radii.sort_by(|a, b| b.total_cmp(a));
    let residuals: Vec<f64> = radii
        .iter()
        .map(|r| {
            let mut worst = 0.0f64;
            for (i, part) in &parts {
                for dir in &dirs {
                    let x: Vec<f64> = dir.iter().map(|v| v * r).collect();
                    let b = spec.drift(&x, *i);
                    let s = spec.diffusion(&x, *i);
                    let xi = (0..n)
                        .map(|row| (b[row] - (0..n).map(|c| part.drift[(row, c)] * x[c]).sum::<f64>()).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    let mut zeta2 = 0.0;
                    for k in 0..d {
                        for row in 0..n {
                            let lin: f64 = part.diffusion.get(k).map_or(0.0, |m| (0..n).map(|c| m[(row, c)] * x[c]).sum());
                            zeta2 += (s[(row, k)] - lin).powi(2);
                        }
                    }
                    worst = worst.max(xi.max(zeta2.sqrt()) / r);
                }
            }
            worst
        })
        .collect();
    let residual_decreasing = residuals.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-12)
        && residuals.last().is_none_or(|last| *last <= 1e-9 || residuals.len() < 2 || *last < residuals[0]);
    let warning = (!residual_decreasing).then(|| {
        format!("linearization remainder does not shrink toward the origin: {residuals:?}; the eigenvalue criterion does not apply")
    });
    Ok(LinearizationData {
        regimes: parts.into_iter().map(|(i, p)| regime_linearization(i, p)).collect(),
        exact,
        probe_radii: radii,
        residuals,
        residual_decreasing,
        warning,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EigenCriterion {
    pub stable_value: f64,
    pub unstable_value: f64,
    pub tail_bound: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Proposition41 {
    /// Eigenvalues of the symmetric parts and the Gram matrices.
    pub symmetric: EigenCriterion,
    /// Same sums with the real parts of the eigenvalues of `b(i)`, diffusion
    /// terms unchanged. Reported for comparison only.
    pub raw_eigenvalues: EigenCriterion,
    /// The two variants reach different verdicts.
    pub variants_disagree: bool,
    pub bounded: bool,
    pub warning: Option<String>,
}

fn eigen_criterion(upper: &[f64], lower: &[f64], nu: &InvariantMeasure, tol: f64) -> EigenCriterion {
    let assigned = if nu.lumped_tail { nu.nu.len().saturating_sub(1) } else { nu.nu.len() };
    let bound = upper.iter().chain(lower).fold(0.0f64, |m, v| m.max(v.abs()));
    let assigned_mass: f64 = nu.nu[..assigned].iter().sum();
    let tail_bound = bound * (1.0 - assigned_mass).max(0.0);
    let stable_value: f64 = (0..assigned).map(|k| nu.nu[k] * upper[k]).sum();
    let unstable_value: f64 = (0..assigned).map(|k| nu.nu[k] * lower[k]).sum();
    let verdict = if stable_value + tail_bound < -tol {
        Verdict::StableCertified
    } else if unstable_value - tail_bound > tol {
        Verdict::UnstableCertified
    } else {
        Verdict::Inconclusive
    };
    EigenCriterion {
        stable_value,
        unstable_value,
        tail_bound,
        verdict,
    }
}

/// `Σ ν_i (Λ_1i + ½ Σ_k Λ_2ik)` and `Σ ν_i (λ_1i + ½ Σ_k λ_2ik)` with
/// certified signs. Regimes beyond `data.regimes` reuse the last entry.
pub fn proposition41_criterion(data: &LinearizationData, nu: &InvariantMeasure) -> Result<Proposition41> {
    if data.regimes.is_empty() {
        return Err(Error::Insufficient("no linearized regimes".into()));
    }
    let at = |k: usize| &data.regimes[k.min(data.regimes.len() - 1)];
    let n = nu.nu.len().max(data.regimes.len());
    let upper: Vec<f64> = (0..n).map(|k| at(k).big_lambda1 + 0.5 * at(k).big_lambda2.iter().sum::<f64>()).collect();
    let lower: Vec<f64> = (0..n).map(|k| at(k).small_lambda1 + 0.5 * at(k).small_lambda2.iter().sum::<f64>()).collect();
    let raw_upper: Vec<f64> = (0..n).map(|k| at(k).raw_max + 0.5 * at(k).big_lambda2.iter().sum::<f64>()).collect();
    let raw_lower: Vec<f64> = (0..n).map(|k| at(k).raw_min + 0.5 * at(k).small_lambda2.iter().sum::<f64>()).collect();
    let bounded = upper.iter().chain(&lower).all(|v| v.is_finite());
    let tol = if data.exact { EIGEN_TOLERANCE } else { EIGEN_FD_TOLERANCE };
    let mut symmetric = eigen_criterion(&upper, &lower, nu, tol);
    if !data.residual_decreasing {
        symmetric.verdict = Verdict::Inconclusive;
    }
    let raw_eigenvalues = eigen_criterion(&raw_upper, &raw_lower, nu, tol);
    Ok(Proposition41 {
        variants_disagree: symmetric.verdict != raw_eigenvalues.verdict,
        symmetric,
        raw_eigenvalues,
        bounded,
        warning: data.warning.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::{example51_model, example52_model, square_lyapunov, Example51Drift, Example51Params, Example52Params};
    use crate::model::FnCoefficients;
    use crate::rates::RateProfile;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn geometric(n: usize) -> InvariantMeasure {
        InvariantMeasure {
            nu: (1..=n).map(|k| 0.5f64.powi(k as i32)).collect(),
            residual: 0.0,
            truncation_size: n,
            lumped_tail: false,
        }
    }

    #[test]
    fn mean_drift_examples() {
        let nu = geometric(60);
        let m = mean_drift_criterion(&|_| -1.0, 1.0, &nu);
        assert!((m.value + 1.0).abs() < 1e-15 && m.sign == Sign::Negative);
        let m = mean_drift_criterion(&|i| if i.get() % 2 == 0 { 1.0 } else { -1.0 }, 1.0, &nu);
        let partial: f64 = (1..=60).map(|i| (-0.5f64).powi(i)).sum();
        assert!((m.value - partial).abs() < 1e-15);
        assert!((m.value + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn proposition41_scalar_example() {
        let coeffs = FnCoefficients::new(1, 1, |x: &[f64], _, o: &mut [f64]| o[0] = -x[0], |x: &[f64], _, o: &mut [f64]| o[0] = x[0]);
        let mut spec = ModelSpec::new(Arc::new(coeffs), Arc::new(crate::families::TwoStateKernel::new(1.0, 1.0)));
        spec.zero_fixed = true;
        let data = linearize(&spec, 1, &[1e-1, 1e-2]).unwrap();
        let nu = InvariantMeasure { nu: vec![1.0], residual: 0.0, truncation_size: 1, lumped_tail: false };
        let p = proposition41_criterion(&data, &nu).unwrap();
        assert!((p.symmetric.stable_value + 0.5).abs() < 1e-8);
        assert_eq!(p.symmetric.verdict, Verdict::StableCertified);
    }

    #[test]
    fn proposition41_zero_is_inconclusive() {
        let coeffs = FnCoefficients::new(1, 1, |_, _, o: &mut [f64]| o[0] = 0.0, |_, _, o: &mut [f64]| o[0] = 0.0);
        let mut spec = ModelSpec::new(Arc::new(coeffs), Arc::new(crate::families::TwoStateKernel::new(1.0, 1.0)));
        spec.zero_fixed = true;
        let data = linearize(&spec, 2, &[1e-1, 1e-2]).unwrap();
        let nu = InvariantMeasure { nu: vec![0.5, 0.5], residual: 0.0, truncation_size: 2, lumped_tail: false };
        let p = proposition41_criterion(&data, &nu).unwrap();
        assert_eq!(p.symmetric.stable_value, 0.0);
        assert_eq!(p.symmetric.verdict, Verdict::Inconclusive);
    }

    #[test]
    fn example52_symmetric_part_oracle() {
        let params = Example52Params::default();
        let mut spec = example52_model(&params).unwrap();
        spec.zero_fixed = true;
        let data = linearize(&spec, 3, &[1e-1, 1e-2, 1e-3]).unwrap();
        assert!(data.exact && data.residuals.iter().all(|r| *r == 0.0));
        for r in &data.regimes {
            let (a, b, c) = (params.a.at(r.regime), params.b.at(r.regime), params.c.at(r.regime));
            let oracle = (a + c) / 2.0 + (((a - c) / 2.0).powi(2) + b * b / 4.0).sqrt();
            assert!((r.big_lambda1 - oracle).abs() < 1e-12);
            assert!((r.raw_max - a.max(c)).abs() < 1e-12);
        }
    }

    #[test]
    fn example51_jacobian_and_remainder() {
        let params = Example51Params { drift: Example51Drift::Max, ..Default::default() };
        let spec = example51_model(&params);
        let data = linearize(&spec, 4, &[1e-1, 1e-2, 1e-3]).unwrap();
        assert!(!data.exact);
        for r in &data.regimes {
            assert!((r.b[(0, 0)] - params.b.at(r.regime)).abs() < 1e-6);
            assert!(r.sigma[0][(0, 0)].abs() < 1e-6);
        }
        assert!(data.residual_decreasing, "{:?}", data.residuals);
    }

    #[test]
    fn mg_scan_identity_profile() {
        // |2x σ sin²x| / x² <= 2|σ| |x| on (0, h]: bounded.
        let spec = example51_model(&Example51Params::default());
        let lyap = square_lyapunov(RateProfile::identity(0.5), Arc::new(|_| -1.0), 1.0, 0.5);
        let scan = scan_mg(&spec, &lyap, &ScanSettings { k_scan: 4, ..ScanSettings::new(10, 0.5) }).unwrap();
        assert!(scan.holds);
        assert!(scan.sup <= 2.0 * 0.5 * 0.5 + 1e-12, "{}", scan.sup);
    }

    #[test]
    fn missing_inputs_are_listed() {
        let lyap = square_lyapunov(RateProfile::identity(0.5), Arc::new(|_| -1.0), 1.0, 0.5);
        let err = check_theorem_hypotheses(Theorem::T32, &lyap, &Evidence::empty(ScanSettings::new(10, 0.5))).unwrap_err();
        assert!(err.to_string().contains("M_g"));
    }

    fn rotation(theta: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()])
    }

    fn matrix2() -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(-3.0f64..3.0, 4).prop_map(|v| DMatrix::from_row_slice(2, 2, &v))
    }

    fn data_from(parts: Vec<(DMatrix<f64>, DMatrix<f64>)>) -> LinearizationData {
        LinearizationData {
            regimes: parts
                .into_iter()
                .enumerate()
                .map(|(k, (b, s))| regime_linearization(Regime::from_index(k), LinearPart { drift: b, diffusion: vec![s] }))
                .collect(),
            exact: true,
            probe_radii: vec![],
            residuals: vec![],
            residual_decreasing: true,
            warning: None,
        }
    }

    proptest! {
        #[test]
        fn orthogonal_invariance(parts in proptest::collection::vec((matrix2(), matrix2()), 1..5), theta in 0.0f64..6.3) {
            let o = rotation(theta);
            let rotated = parts.iter().map(|(b, s)| (o.transpose() * b * &o, o.transpose() * s * &o)).collect();
            let nu = geometric(parts.len());
            let p = proposition41_criterion(&data_from(parts), &nu).unwrap();
            let q = proposition41_criterion(&data_from(rotated), &nu).unwrap();
            prop_assert!((p.symmetric.stable_value - q.symmetric.stable_value).abs() < 1e-10);
            prop_assert!((p.symmetric.unstable_value - q.symmetric.unstable_value).abs() < 1e-10);
        }

        #[test]
        fn lower_value_below_upper(parts in proptest::collection::vec((matrix2(), matrix2()), 1..5)) {
            let nu = geometric(parts.len());
            let p = proposition41_criterion(&data_from(parts), &nu).unwrap();
            prop_assert!(p.symmetric.unstable_value <= p.symmetric.stable_value + 1e-12);
        }

        #[test]
        fn constant_c_gives_constant_mean(kappa in -5.0f64..5.0, weights in proptest::collection::vec(0.01f64..1.0, 1..20)) {
            let total: f64 = weights.iter().sum();
            let nu = InvariantMeasure {
                nu: weights.iter().map(|w| w / total).collect(),
                residual: 0.0,
                truncation_size: weights.len(),
                lumped_tail: false,
            };
            let m = mean_drift_criterion(&|_| kappa, kappa.abs(), &nu);
            prop_assert!((m.value - kappa).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn more_regimes_never_repair_a_failure(cs in proptest::collection::vec(-2.0f64..2.0, 12..40), k1 in 6usize..12) {
            let table = cs.clone();
            let c = move |i: Regime| table[(i.index()).min(table.len() - 1)];
            let params = Example51Params::default();
            let spec = example51_model(&params);
            let lyap = square_lyapunov(RateProfile::power(0.5, 0.4).unwrap(), Arc::new(c), 1.5, 0.4);
            let k2 = cs.len();
            let status = |k_scan: usize| {
                let settings = ScanSettings { k_scan, k0: 4, radii_per_decade: 1, ..ScanSettings::new(6, 0.4) };
                let mut ev = gather_evidence(&spec, &lyap, &settings).unwrap();
                ev.settings = settings;
                check_theorem_hypotheses(Theorem::T32, &lyap, &ev).unwrap().hypotheses
            };
            let (a, b) = (status(k1), status(k2));
            for (name, h1) in &a {
                if h1.status == Status::Fails {
                    prop_assert_eq!(b[name].status, Status::Fails, "{} repaired", name);
                }
            }
        }
    }
}
