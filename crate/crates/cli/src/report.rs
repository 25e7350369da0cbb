use std::collections::BTreeMap;

use serde::Serialize;
use sha2::{Digest, Sha256};
use switchdiff::markov_chain::{BirthDeathMeasure, ErgodicityDiagnostic, ErgodicityVerdict, ExponentialFit};
use switchdiff::rates::QuantilePoint;
use switchdiff::scenario::Scenario;
use switchdiff::simulator::{CoupledSummary, FunctionalEstimate};
use switchdiff::stability::{LinearizationData, Proposition41};
use switchdiff::CriterionReport;

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub seed: u64,
    pub version: &'static str,
    /// SHA-256 of the scenario bytes as read.
    pub scenario_sha256: String,
    pub scenario_source: String,
    /// Command-line settings applied on top of the scenario.
    pub overrides: BTreeMap<String, String>,
    pub threads: usize,
}

impl Provenance {
    pub fn new(scenario_bytes: &[u8], source: String, seed: u64, overrides: BTreeMap<String, String>) -> Self {
        Provenance {
            seed,
            version: env!("CARGO_PKG_VERSION"),
            scenario_sha256: sha256_hex(scenario_bytes),
            scenario_source: source,
            overrides,
            threads: rayon::current_num_threads(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct StageStatus {
    pub name: String,
    pub completed: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MeasureSummary {
    pub truncation: usize,
    pub lumped_tail: bool,
    /// Mass held by the lumped last state.
    pub lumped_mass: f64,
    /// `max_i Σ_{j > N} q_ij(0)` removed in drop mode.
    pub truncation_leak: f64,
    /// `‖νQ‖_∞`.
    pub residual: f64,
    pub nu: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ErgodicitySummary {
    pub verdict: ErgodicityVerdict,
    pub fit: Option<ExponentialFit>,
    /// Verdict threshold on the fit's R².
    pub min_r_squared: f64,
    pub grid_points: usize,
    pub t_max: f64,
    pub final_distance: f64,
}

impl From<&ErgodicityDiagnostic> for ErgodicitySummary {
    fn from(d: &ErgodicityDiagnostic) -> Self {
        ErgodicitySummary {
            verdict: d.verdict,
            fit: d.fit,
            min_r_squared: switchdiff::markov_chain::ERGODICITY_MIN_R_SQUARED,
            grid_points: d.times.len(),
            t_max: d.times.last().copied().unwrap_or(0.0),
            final_distance: d.distances.last().copied().unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DeltaPoint {
    pub delta: f64,
    pub stay_in_ball: FunctionalEstimate,
    pub accepted: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeltaSweep {
    pub h: f64,
    /// A radius is accepted when the estimate exceeds this and the lower
    /// end of its 95% interval exceeds `ci_floor`.
    pub min_estimate: f64,
    pub ci_floor: f64,
    pub points: Vec<DeltaPoint>,
    pub selected: Option<f64>,
    /// The mirrored parameterization at the selected radius.
    pub mirrored: Option<FunctionalEstimate>,
    pub mirrored_below_half: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RateSummary {
    pub lambda_hat: Option<f64>,
    /// `γ · lambda_hat` for power profiles, matching `G(y) = h^{-γ} − y^{-γ}`
    /// without the `1/γ` factor.
    pub lambda_hat_unscaled: Option<f64>,
    /// Multiplicative spacing of the candidate grid.
    pub resolution: f64,
    pub t0: f64,
    pub epsilon: f64,
    pub n_surviving: usize,
    pub n_excluded: usize,
    pub surviving_fraction: f64,
    /// `T^{1/γ} V(X(T))` (`T V(X(T))` for other profiles) over surviving paths.
    pub terminal_statistic: Option<TerminalStatistic>,
    pub curve_path: Option<String>,
    #[serde(skip)]
    pub curve: Vec<QuantilePoint>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TerminalStatistic {
    pub exponent: f64,
    pub median: f64,
    pub max: f64,
    pub min: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CouplingSummary {
    pub h: f64,
    pub horizon: f64,
    pub summary: CoupledSummary,
    /// `sup Ξ(x, k)` over the scanned `|x| <= h`, `k <= k_scan`.
    pub xi_sup: f64,
    pub k_scan: usize,
    /// `T · sup Ξ`.
    pub bound: f64,
    /// `estimate <= bound + 3σ`.
    pub within_bound: bool,
}

/// Everything a run produced. Sections not requested stay empty.
#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    pub command: String,
    pub scenario: String,
    /// Set when a stage failed; artifacts written so far are kept.
    pub partial: bool,
    pub stages: Vec<StageStatus>,
    pub parameters: Scenario,
    pub tolerances: BTreeMap<&'static str, f64>,
    pub criterion: Vec<CriterionReport>,
    pub invariant_measure: Option<MeasureSummary>,
    pub ergodicity: Option<ErgodicitySummary>,
    pub birth_death: Option<BirthDeathMeasure>,
    pub linearization: Option<LinearizationData>,
    pub proposition41: Option<Proposition41>,
    pub mc_results: Vec<FunctionalEstimate>,
    pub delta_sweep: Option<DeltaSweep>,
    pub rate: Option<RateSummary>,
    pub coupling: Option<CouplingSummary>,
    pub warnings: Vec<String>,
    pub provenance: Provenance,
}

impl StabilityReport {
    pub fn new(command: &str, scenario: Scenario, provenance: Provenance) -> Self {
        let tolerances = BTreeMap::from([
            ("drift_condition", switchdiff::model::DRIFT_TOLERANCE),
            ("m_g_growth_limit", switchdiff::stability::MG_GROWTH_LIMIT),
            ("kernel_continuity", switchdiff::stability::CONTINUITY_TOLERANCE),
            ("poisson_residual", 1e-8),
            ("ergodicity_min_r_squared", switchdiff::markov_chain::ERGODICITY_MIN_R_SQUARED),
            ("ci_level", 0.95),
        ]);
        StabilityReport {
            command: command.to_string(),
            scenario: scenario.name.clone(),
            partial: false,
            stages: Vec::new(),
            parameters: scenario,
            tolerances,
            criterion: Vec::new(),
            invariant_measure: None,
            ergodicity: None,
            birth_death: None,
            linearization: None,
            proposition41: None,
            mc_results: Vec::new(),
            delta_sweep: None,
            rate: None,
            coupling: None,
            warnings: Vec::new(),
            provenance,
        }
    }
}
