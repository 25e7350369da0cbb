use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{simulate, SimConfig, Trajectory};
use crate::error::{Error, Result};
use crate::model::{norm, LyapunovSpec, ModelSpec, Regime};
use crate::rates::sup_ratio_curve;

/// Two-sided 95% standard normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Functional {
    /// `|X(t)| < h` on the whole simulated horizon; blow-ups count as failures.
    StayInBall { h: f64 },
    /// `|X(T)| < tol` and `|X(t)| < h` for every grid time `t <= T`.
    ConvergesToZero { tol: f64, h: f64 },
    /// `sup_{t ∈ [T0, T]} V(X(t)) / G^{-1}(−λ t) <= 1`, with `V` and `G` from
    /// the Lyapunov data.
    SupRatio { lambda: f64, t0: f64 },
    /// Fraction of `[0, T]` spent in `regime`.
    Occupation { regime: Regime },
}

impl Functional {
    pub fn label(&self) -> String {
        match self {
            Functional::StayInBall { h } => format!("stay_in_ball(h={h})"),
            Functional::ConvergesToZero { tol, h } => format!("converges_to_zero(tol={tol},h={h})"),
            Functional::SupRatio { lambda, t0 } => format!("sup_ratio(lambda={lambda},t0={t0})"),
            Functional::Occupation { regime } => format!("occupation(i={regime})"),
        }
    }

    fn is_indicator(&self) -> bool {
        !matches!(self, Functional::Occupation { .. })
    }

    /// Per-path value: 0/1 for indicators, a fraction for occupation.
    pub fn evaluate(&self, traj: &Trajectory, lyap: Option<&LyapunovSpec>) -> Result<f64> {
        let indicator = |b: bool| if b { 1.0 } else { 0.0 };
        Ok(match *self {
            Functional::StayInBall { h } => indicator(!traj.blew_up && traj.sup_norm < h),
            Functional::ConvergesToZero { tol, h } => {
                let (x, _) = traj.final_state();
                indicator(traj.reached_horizon() && traj.sup_norm < h && norm(x) < tol)
            }
            Functional::SupRatio { lambda, t0 } => {
                let lyap = lyap.ok_or_else(|| Error::Config("sup_ratio needs Lyapunov data".into()))?;
                let v = |x: &[f64]| lyap.v(x);
                let r = sup_ratio_curve(traj, &v, &lyap.profile, t0, &[lambda])?;
                indicator(r.is_some_and(|r| r[0] <= 1.0))
            }
            Functional::Occupation { regime } => {
                if traj.end_time > 0.0 {
                    traj.occupation_time(regime) / traj.end_time
                } else {
                    indicator(traj.regime0 == regime)
                }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalEstimate {
    pub functional: String,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_paths: usize,
    pub n_blowups: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub estimates: Vec<FunctionalEstimate>,
    pub n_paths: usize,
    pub n_blowups: usize,
    pub n_exited: usize,
    pub seed: u64,
}

impl EnsembleSummary {
    pub fn get(&self, label: &str) -> Option<&FunctionalEstimate> {
        self.estimates.iter().find(|e| e.functional == label)
    }
}

/// Wilson score interval at 95% for `successes` out of `n`.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    assert!(n > 0);
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n_f;
    let centre = (p + z2 / (2.0 * n_f)) / denom;
    let half = Z95 / denom * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

fn mean_interval(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, mean, mean);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let half = Z95 * (var / n).sqrt();
    (mean, mean - half, mean + half)
}

/// Simulates paths `0..n_paths` in parallel, returned in path order.
pub fn simulate_paths(spec: &ModelSpec, config: &SimConfig, n_paths: usize) -> Result<Vec<Trajectory>> {
    (0..n_paths as u64)
        .into_par_iter()
        .map(|k| simulate(spec, &config.for_path(k)))
        .collect()
}

#[derive(Debug, Clone)]
struct PathRecord {
    values: Vec<f64>,
    blew_up: bool,
    exited: bool,
}

/// Monte Carlo estimates of `functionals` over `n_paths` independent paths.
///
/// Each path is simulated, reduced to its functional values, and dropped, so
/// memory does not grow with the horizon. Aggregation runs in path order
/// after the parallel phase.
pub fn run_ensemble(
    spec: &ModelSpec,
    lyap: Option<&LyapunovSpec>,
    config: &SimConfig,
    n_paths: usize,
    functionals: &[Functional],
) -> Result<EnsembleSummary> {
    if n_paths == 0 {
        return Err(Error::Config("n_paths must be at least 1".into()));
    }
    for f in functionals {
        let h = match f {
            Functional::StayInBall { h } | Functional::ConvergesToZero { h, .. } => *h,
            _ => continue,
        };
        if config.stop_radius.is_some_and(|r| r < h) {
            return Err(Error::Config(format!(
                "stop radius {:?} is inside the ball h = {h} of {}",
                config.stop_radius,
                f.label()
            )));
        }
    }
    let records: Vec<PathRecord> = (0..n_paths as u64)
        .into_par_iter()
        .map(|k| {
            let traj = simulate(spec, &config.for_path(k))?;
            let values = functionals
                .iter()
                .map(|f| f.evaluate(&traj, lyap))
                .collect::<Result<Vec<_>>>()?;
            Ok(PathRecord {
                values,
                blew_up: traj.blew_up,
                exited: traj.exited,
            })
        })
        .collect::<Result<_>>()?;

    let n_blowups = records.iter().filter(|r| r.blew_up).count();
    let n_exited = records.iter().filter(|r| r.exited).count();
    let estimates = functionals
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let column: Vec<f64> = records.iter().map(|r| r.values[k]).collect();
            let (estimate, ci_low, ci_high) = if f.is_indicator() {
                let successes = column.iter().filter(|v| **v > 0.5).count();
                let (lo, hi) = wilson_interval(successes, n_paths);
                (successes as f64 / n_paths as f64, lo, hi)
            } else {
                mean_interval(&column)
            };
            FunctionalEstimate {
                functional: f.label(),
                estimate,
                ci_low,
                ci_high,
                n_paths,
                n_blowups,
                seed: config.seed,
            }
        })
        .collect();
    Ok(EnsembleSummary {
        estimates,
        n_paths,
        n_blowups,
        n_exited,
        seed: config.seed,
    })
}
