use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context as _, Result};
use rayon::prelude::*;
use switchdiff::export::{measure_csv, quantile_curve_csv, trajectory_csv, write_json, write_text};
use switchdiff::markov_chain::birth_death_invariant;
use switchdiff::model::probe_directions;
use switchdiff::rates::{lambda_grid, log_grid, rate_from_curves, sup_ratio_curve, ProfileKind};
use switchdiff::scenario::{Built, KernelConfig, Scenario};
use switchdiff::simulator::{
    kernel_discrepancy, run_coupled_ensemble, run_ensemble, simulate, Functional,
};
use switchdiff::stability::{
    check_theorem_hypotheses, gather_evidence, linearize, proposition41_criterion, ScanSettings,
};
use switchdiff::{Regime, Verdict};

use crate::args::Overrides;
use crate::presets::Stage;
use crate::report::{
    CouplingSummary, DeltaPoint, DeltaSweep, ErgodicitySummary, MeasureSummary, Provenance, RateSummary,
    StabilityReport, StageStatus, TerminalStatistic,
};

/// Trajectory CSVs written by `simulate`.
pub const CSV_PATHS: usize = 4;
/// δ-sweep acceptance: estimate above this...
pub const SWEEP_MIN_ESTIMATE: f64 = 0.95;
/// ...and lower CI end above this.
pub const SWEEP_CI_FLOOR: f64 = 0.90;

/// Failure of the input rather than of a stage; mapped to exit code 2.
#[derive(Debug)]
pub struct InputError(pub String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

/// A validated scenario with overrides applied.
pub struct Job {
    pub scenario: Scenario,
    pub built: Built,
    pub out: Option<PathBuf>,
    pub report: StabilityReport,
}

/// Parses `bytes`, applies `overrides` and validates the result.
pub fn prepare(command: &str, bytes: &[u8], source: String, overrides: &Overrides, out: Option<PathBuf>) -> Result<Job> {
    let text = std::str::from_utf8(bytes).map_err(|e| InputError(format!("{source}: not UTF-8: {e}")))?;
    let mut scenario = Scenario::from_json_str(text).map_err(|e| InputError(format!("{source}: {e}")))?;
    let applied = apply_overrides(&mut scenario, overrides);
    scenario
        .validate()
        .map_err(|e| InputError(format!("{source} with overrides {applied:?}: {e}")))?;
    let built = scenario.build().map_err(|e| InputError(format!("{source}: {e}")))?;
    let provenance = Provenance::new(bytes, source, scenario.sim.seed, applied);
    let report = StabilityReport::new(command, scenario.clone(), provenance);
    Ok(Job {
        scenario,
        built,
        out,
        report,
    })
}

pub fn load(command: &str, path: &Path, overrides: &Overrides, out: Option<PathBuf>) -> Result<Job> {
    let bytes = std::fs::read(path).map_err(|e| InputError(format!("cannot read {}: {e}", path.display())))?;
    prepare(command, &bytes, path.display().to_string(), overrides, out)
}

fn apply_overrides(sc: &mut Scenario, o: &Overrides) -> BTreeMap<String, String> {
    let mut applied = BTreeMap::new();
    let mut note = |k: &str, v: String| {
        applied.insert(k.to_string(), v);
    };
    if let Some(v) = o.seed {
        sc.sim.seed = v;
        note("seed", v.to_string());
    }
    if let Some(v) = o.paths {
        sc.mc.n_paths = v;
        note("paths", v.to_string());
    }
    if let Some(v) = o.dt {
        sc.sim.dt = v;
        note("dt", v.to_string());
    }
    if let Some(v) = o.horizon {
        sc.sim.horizon = v;
        note("horizon", v.to_string());
    }
    if let Some(v) = o.truncation {
        sc.chain.truncation = v;
        note("truncation", v.to_string());
    }
    if let Some(v) = o.scheme {
        sc.sim.scheme = v.into();
        note("scheme", format!("{:?}", sc.sim.scheme));
    }
    if let Some(v) = o.h {
        sc.mc.h = Some(v);
        note("h", v.to_string());
    }
    if let Some(v) = &o.epsilon {
        sc.mc.epsilon = *v;
        note("epsilon", v.to_string());
    }
    if let Some(v) = &o.x0 {
        let dim = sc.dim();
        sc.sim.x0 = if v.len() == 1 && dim > 1 {
            let mut x = vec![0.0; dim];
            x[0] = v[0];
            x
        } else {
            v.clone()
        };
        note("x0", format!("{:?}", sc.sim.x0));
    }
    applied
}

impl Job {
    /// Radius of the ball used by stay-in-ball, rate exclusion and coupling.
    pub fn ball_radius(&self) -> f64 {
        self.scenario.mc.h.unwrap_or(self.scenario.domain_radius)
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.out.as_ref().map(|d| d.join(name))
    }

    fn settings(&self) -> ScanSettings {
        let mut s = ScanSettings::new(self.scenario.chain.truncation, self.scenario.domain_radius);
        s.mode = self.scenario.chain.mode;
        s
    }

    /// Runs `stages` in order, stopping at the first failure, then writes
    /// `report.json`. The report is marked partial when a stage failed.
    pub fn run(&mut self, stages: &[Stage]) -> Result<()> {
        if let Some(dir) = &self.out {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let mut failure = None;
        for &stage in stages {
            let result = match stage {
                Stage::Analyze => self.analyze(),
                Stage::Simulate => self.simulate(),
                Stage::DeltaSweep => self.delta_sweep(),
                Stage::VerifyRate => self.verify_rate(),
                Stage::CoupledTest => self.coupled_test(),
            };
            let error = result.as_ref().err().map(|e| format!("{e:#}"));
            self.report.stages.push(StageStatus {
                name: stage.name().to_string(),
                completed: error.is_none(),
                error: error.clone(),
            });
            if let Err(e) = result {
                self.report.partial = true;
                failure = Some(e.context(format!("stage {} failed", stage.name())));
                break;
            }
        }
        if let Some(p) = self.path("report.json") {
            write_json(&p, &self.report)?;
        }
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    pub fn analyze(&mut self) -> Result<()> {
        let (spec, lyap) = (&self.built.spec, &self.built.lyap);
        let settings = self.settings();
        let evidence = gather_evidence(spec, lyap, &settings)?;
        let chain = evidence.chain.as_ref().expect("gathered");
        let nu = evidence.nu.as_ref().expect("gathered");
        let diag = evidence.ergodicity.as_ref().expect("gathered");
        self.report.invariant_measure = Some(MeasureSummary {
            truncation: chain.size(),
            lumped_tail: chain.lumped_tail(),
            lumped_mass: chain.lumped_mass,
            truncation_leak: chain.truncation_leak,
            residual: nu.residual,
            nu: nu.nu.clone(),
        });
        self.report.ergodicity = Some(ErgodicitySummary::from(diag));
        self.report.criterion.clear();
        for &t in &self.scenario.theorems {
            self.report.criterion.push(check_theorem_hypotheses(t, lyap, &evidence)?);
        }
        if let KernelConfig::BirthDeath { check_p, hat_p, .. } = &self.scenario.kernel {
            match birth_death_invariant(&|i| check_p.at(i), &|i| hat_p.at(i), settings.truncation) {
                Ok(bd) => self.report.birth_death = Some(bd),
                Err(e) => self.report.warnings.push(format!("birth-death product formula: {e}")),
            }
        }
        match linearize(spec, settings.truncation, &self.scenario.probe_radii) {
            Ok(data) => {
                match proposition41_criterion(&data, nu) {
                    Ok(p) => self.report.proposition41 = Some(p),
                    Err(e) => self.report.warnings.push(format!("eigenvalue criterion: {e}")),
                }
                if let Some(w) = &data.warning {
                    self.report.warnings.push(w.clone());
                }
                self.report.linearization = Some(data);
            }
            Err(e) => self.report.warnings.push(format!("linearization: {e}")),
        }
        if let Some(p) = self.path("invariant_measure.csv") {
            write_text(&p, &measure_csv(nu))?;
        }
        if let Some(p) = self.path("ergodicity.csv") {
            let mut text = String::from("t,distance\n");
            for (t, d) in diag.times.iter().zip(&diag.distances) {
                text.push_str(&format!("{t},{d}\n"));
            }
            write_text(&p, &text)?;
        }
        Ok(())
    }

    pub fn simulate(&mut self) -> Result<()> {
        let h = self.ball_radius();
        let cfg = self.built.sim.clone();
        let functionals = [
            Functional::StayInBall { h },
            Functional::ConvergesToZero { tol: 1e-2 * h, h },
            Functional::Occupation { regime: Regime::FIRST },
        ];
        let summary = run_ensemble(
            &self.built.spec,
            Some(&self.built.lyap),
            &cfg,
            self.scenario.mc.n_paths,
            &functionals,
        )?;
        if let Some(dir) = &self.out {
            for k in 0..self.scenario.mc.n_paths.min(CSV_PATHS) {
                let traj = simulate(&self.built.spec, &cfg.for_path(k as u64))?;
                write_text(&dir.join(format!("trajectories/path_{k:05}.csv")), &trajectory_csv(&traj))?;
            }
            write_json(&dir.join("ensemble.json"), &summary)?;
        }
        self.report.mc_results.extend(summary.estimates);
        Ok(())
    }

    /// Largest initial radius whose stay-in-ball estimate clears the
    /// thresholds, then the mirrored parameterization at that radius.
    pub fn delta_sweep(&mut self) -> Result<()> {
        let h = self.ball_radius();
        let mut deltas = self.scenario.mc.delta_sweep.clone();
        if deltas.is_empty() {
            bail!("mc.delta_sweep is empty");
        }
        deltas.sort_by(|a, b| b.total_cmp(a));
        let stay = |built: &Built, delta: f64, n: usize| -> Result<switchdiff::simulator::FunctionalEstimate> {
            let mut cfg = built.sim.clone();
            cfg.x0 = vec![0.0; built.spec.dim()];
            cfg.x0[0] = delta;
            cfg.stop_radius = Some(h);
            let s = run_ensemble(&built.spec, None, &cfg, n, &[Functional::StayInBall { h }])?;
            Ok(s.estimates.into_iter().next().expect("one functional"))
        };
        let n = self.scenario.mc.n_paths;
        let mut points = Vec::new();
        let mut selected = None;
        for &delta in &deltas {
            let est = stay(&self.built, delta, n)?;
            let accepted = est.estimate > SWEEP_MIN_ESTIMATE && est.ci_low > SWEEP_CI_FLOOR;
            points.push(DeltaPoint {
                delta,
                stay_in_ball: est,
                accepted,
            });
            if accepted {
                selected = Some(delta);
                break;
            }
        }
        let mirrored = match (selected, self.scenario.mirrored()) {
            (Some(delta), Ok(m)) => Some(stay(&m.build()?, delta, n)?),
            (Some(_), Err(e)) => {
                self.report.warnings.push(format!("no mirrored check: {e}"));
                None
            }
            (None, _) => {
                self.report
                    .warnings
                    .push(format!("no initial radius in {deltas:?} reached the stay-in-ball thresholds"));
                None
            }
        };
        if let Some(p) = points.iter().find(|p| p.accepted) {
            self.report.mc_results.push(p.stay_in_ball.clone());
        }
        let sweep = DeltaSweep {
            h,
            min_estimate: SWEEP_MIN_ESTIMATE,
            ci_floor: SWEEP_CI_FLOOR,
            points,
            selected,
            mirrored_below_half: mirrored.as_ref().map(|m| m.estimate < 0.5),
            mirrored,
        };
        if let Some(p) = self.path("delta_sweep.json") {
            write_json(&p, &sweep)?;
        }
        self.report.delta_sweep = Some(sweep);
        Ok(())
    }

    /// Whether some stability theorem certifies the scenario; runs the
    /// checks unless `analyze` already did.
    fn stability_certified(&mut self) -> std::result::Result<(), String> {
        if self.report.criterion.is_empty() {
            let settings = self.settings();
            let evidence = gather_evidence(&self.built.spec, &self.built.lyap, &settings).map_err(|e| e.to_string())?;
            for &t in self.scenario.theorems.iter().filter(|t| !t.is_instability()) {
                let r = check_theorem_hypotheses(t, &self.built.lyap, &evidence).map_err(|e| e.to_string())?;
                self.report.criterion.push(r);
            }
        }
        if self.report.criterion.iter().any(|r| r.verdict == Verdict::StableCertified) {
            Ok(())
        } else {
            Err("no stability theorem certifies it".into())
        }
    }

    pub fn verify_rate(&mut self) -> Result<()> {
        if let Err(why) = self.stability_certified() {
            self.report
                .warnings
                .push(format!("scenario not certified stable ({why}); the rate estimate may be meaningless"));
        }
        let h = self.ball_radius();
        let horizon = self.scenario.sim.horizon;
        let t0 = self.scenario.mc.t0.unwrap_or(horizon / 4.0);
        let epsilon = self.scenario.mc.epsilon;
        let mut cfg = self.built.sim.clone();
        cfg.stop_radius = Some(cfg.stop_radius.map_or(h, |r| r.min(h)));
        let (spec, lyap) = (&self.built.spec, &self.built.lyap);
        let profile = &lyap.profile;
        let exponent = match profile.kind() {
            ProfileKind::Power { gamma } => 1.0 / gamma,
            _ => 1.0,
        };
        let lambdas = lambda_grid();
        let per_path: Vec<(Option<Vec<f64>>, Option<f64>)> = (0..self.scenario.mc.n_paths as u64)
            .into_par_iter()
            .map(|k| -> switchdiff::Result<_> {
                let traj = simulate(spec, &cfg.for_path(k))?;
                let curve = sup_ratio_curve(&traj, &|x| lyap.v(x), profile, t0, &lambdas)?;
                let terminal = curve
                    .is_some()
                    .then(|| traj.end_time.powf(exponent) * lyap.v(traj.final_state().0));
                Ok((curve, terminal))
            })
            .collect::<switchdiff::Result<_>>()?;
        let mut terminal: Vec<f64> = per_path.iter().filter_map(|p| p.1).collect();
        let total = per_path.len();
        let est = rate_from_curves(per_path.into_iter().map(|p| p.0).collect(), t0, epsilon)?;
        let terminal_statistic = (!terminal.is_empty()).then(|| {
            terminal.sort_by(f64::total_cmp);
            TerminalStatistic {
                exponent,
                median: terminal[terminal.len() / 2],
                max: *terminal.last().expect("non-empty"),
                min: terminal[0],
            }
        });
        let gamma = match profile.kind() {
            ProfileKind::Power { gamma } => Some(*gamma),
            _ => None,
        };
        if est.lambda_hat.is_none() {
            self.report
                .warnings
                .push(format!("no candidate rate has its {}-quantile at or below 1", 1.0 - epsilon));
        }
        let curve_path = self.path("quantile_curve.csv");
        if let Some(p) = &curve_path {
            write_text(p, &quantile_curve_csv(&est.curve))?;
        }
        let summary = RateSummary {
            lambda_hat: est.lambda_hat,
            lambda_hat_unscaled: gamma.and_then(|g| est.lambda_hat.map(|l| g * l)),
            resolution: est.resolution,
            t0,
            epsilon,
            n_surviving: est.n_surviving,
            n_excluded: est.n_excluded,
            surviving_fraction: est.n_surviving as f64 / total as f64,
            terminal_statistic,
            curve_path: curve_path.map(|p| p.display().to_string()),
            curve: est.curve,
        };
        if let Some(p) = self.path("rate.json") {
            write_json(&p, &summary)?;
        }
        self.report.rate = Some(summary);
        Ok(())
    }

    pub fn coupled_test(&mut self) -> Result<()> {
        let h = self.ball_radius();
        let mut cfg = self.built.sim.clone();
        cfg.stop_radius = Some(h);
        let summary = run_coupled_ensemble(&self.built.spec, &cfg, self.scenario.mc.n_paths)?;
        let k_scan = self.settings().k_scan;
        let xi_sup = discrepancy_sup(&self.built, h, k_scan)?;
        let bound = cfg.horizon * xi_sup;
        let coupling = CouplingSummary {
            h,
            horizon: cfg.horizon,
            within_bound: summary.estimate <= bound + 3.0 * summary.std_error,
            summary,
            xi_sup,
            k_scan,
            bound,
        };
        if let Some(p) = self.path("coupling.json") {
            write_json(&p, &coupling)?;
        }
        self.report.coupling = Some(coupling);
        Ok(())
    }

    /// One line per completed section, for the terminal.
    pub fn summary_lines(&self) -> Vec<String> {
        let r = &self.report;
        let mut lines = Vec::new();
        if let Some(m) = &r.invariant_measure {
            let head: Vec<String> = m.nu.iter().take(5).map(|v| format!("{v:.6}")).collect();
            lines.push(format!("invariant measure (N = {}): [{}, ...], residual {:.1e}", m.truncation, head.join(", "), m.residual));
        }
        if let Some(e) = &r.ergodicity {
            lines.push(format!("ergodicity: {:?}, fit {:?}", e.verdict, e.fit.map(|f| (f.lambda, f.r_squared))));
        }
        for c in &r.criterion {
            lines.push(format!(
                "{}: {:?} (mean drift {:.4} ± {:.1e})",
                c.theorem.name(),
                c.verdict,
                c.mean_drift,
                c.tail_bound
            ));
        }
        if let Some(p) = &r.proposition41 {
            lines.push(format!(
                "eigenvalue criterion: {:?} (upper {:.4}, lower {:.4})",
                p.symmetric.verdict, p.symmetric.stable_value, p.symmetric.unstable_value
            ));
        }
        for e in &r.mc_results {
            lines.push(format!(
                "{}: {:.4} [{:.4}, {:.4}] over {} paths",
                e.functional, e.estimate, e.ci_low, e.ci_high, e.n_paths
            ));
        }
        if let Some(s) = &r.delta_sweep {
            lines.push(format!(
                "delta sweep: selected {:?}, mirrored {:?}",
                s.selected,
                s.mirrored.as_ref().map(|m| m.estimate)
            ));
        }
        if let Some(rate) = &r.rate {
            lines.push(format!(
                "lambda_hat {:?} (grid factor {:.3}), {} of {} paths surviving",
                rate.lambda_hat,
                rate.resolution,
                rate.n_surviving,
                rate.n_surviving + rate.n_excluded
            ));
        }
        if let Some(c) = &r.coupling {
            lines.push(format!(
                "decoupling: {:.5} ± {:.5}, bound T·sup Ξ = {:.5}, within bound: {}",
                c.summary.estimate, c.summary.std_error, c.bound, c.within_bound
            ));
        }
        for w in &r.warnings {
            lines.push(format!("warning: {w}"));
        }
        lines
    }
}

/// `sup Ξ(x, k)` over shells of `B_h` along the probe directions and
/// regimes `1..=k_scan`.
fn discrepancy_sup(built: &Built, h: f64, k_scan: usize) -> Result<f64> {
    let kernel = built.spec.kernel.as_ref();
    let dirs = probe_directions(built.spec.dim());
    let mut sup = 0.0f64;
    for r in log_grid(h * 1e-3, h, 13) {
        for d in &dirs {
            let x: Vec<f64> = d.iter().map(|v| v * r).collect();
            for k in 1..=k_scan {
                sup = sup.max(kernel_discrepancy(kernel, &x, Regime::new(k).map_err(|e| anyhow!("{e}"))?));
            }
        }
    }
    Ok(sup)
}
