use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ensemble::wilson_interval;
use super::{occupation_from_jumps, path_rng, Jump, PathRng, SimConfig, Workspace, SWITCH_GUARD};
use crate::error::{Error, Result};
use crate::model::{norm, ModelSpec, RateKernel, Regime, Transition};

/// `Ξ(x, k) = Σ_{j≠k} |q_kj(x) − q_kj(0)|`.
pub fn kernel_discrepancy(kernel: &dyn RateKernel, x: &[f64], k: Regime) -> f64 {
    let zero = vec![0.0; x.len()];
    let (mut a, mut b) = (Vec::new(), Vec::new());
    kernel.row(x, k, &mut a);
    kernel.row(&zero, k, &mut b);
    merge_rows(&a, &b).iter().map(|(_, qa, qb)| (qa - qb).abs()).sum()
}

/// Aligns two rows by target: `(j, a_j, b_j)` in increasing `j`.
fn merge_rows(a: &[Transition], b: &[Transition]) -> Vec<(Regime, f64, f64)> {
    let mut out: Vec<(Regime, f64, f64)> = Vec::with_capacity(a.len() + b.len());
    for t in a {
        match out.iter_mut().find(|e| e.0 == t.to) {
            Some(e) => e.1 += t.rate,
            None => out.push((t.to, t.rate, 0.0)),
        }
    }
    for t in b {
        match out.iter_mut().find(|e| e.0 == t.to) {
            Some(e) => e.2 += t.rate,
            None => out.push((t.to, 0.0, t.rate)),
        }
    }
    out.sort_by_key(|e| e.0);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledOutcome {
    /// `ϑ <= T ∧ τ_h`.
    pub decoupled: bool,
    /// First time `α(t) != α̂(t)`.
    pub vartheta: Option<f64>,
    pub tau_h: Option<f64>,
    pub end_time: f64,
    pub regime0: Regime,
    /// Switches of `α`, driven by `Q(X(t))`.
    pub alpha_jumps: Vec<Jump>,
    /// Switches of `α̂`, driven by `Q(0)`.
    pub alpha_hat_jumps: Vec<Jump>,
    pub blew_up: bool,
}

impl CoupledOutcome {
    pub fn alpha_occupation(&self, regime: Regime) -> f64 {
        occupation_from_jumps(self.regime0, &self.alpha_jumps, self.end_time, regime)
    }

    pub fn alpha_hat_occupation(&self, regime: Regime) -> f64 {
        occupation_from_jumps(self.regime0, &self.alpha_hat_jumps, self.end_time, regime)
    }
}

enum Move {
    Both(Regime),
    Alpha(Regime),
    AlphaHat(Regime),
}

/// One thinning step of a single chain; same draw pattern as the uncoupled
/// simulator.
fn single_switch(kernel: &dyn RateKernel, x: &[f64], i: Regime, t: f64, dt: f64, rng: &mut PathRng, row: &mut Vec<Transition>, jumps: &mut Vec<Jump>) -> Regime {
    kernel.row(x, i, row);
    row.sort_by_key(|t| t.to);
    let q: f64 = row.iter().map(|t| t.rate).sum();
    let pieces = ((q * dt / SWITCH_GUARD).ceil() as usize).max(1);
    let h = dt / pieces as f64;
    let mut cur = i;
    for s in 0..pieces {
        let u_accept: f64 = rng.random();
        let u_select: f64 = rng.random();
        if s > 0 && cur != i {
            kernel.row(x, cur, row);
            row.sort_by_key(|t| t.to);
        }
        let q: f64 = row.iter().map(|t| t.rate).sum();
        if q > 0.0 && u_accept < q * h {
            let target = u_select * q;
            let mut acc = 0.0;
            let mut to = row.last().expect("non-empty").to;
            for tr in row.iter() {
                acc += tr.rate;
                if target < acc {
                    to = tr.to;
                    break;
                }
            }
            jumps.push(Jump { time: t + (s + 1) as f64 * h, from: cur, to });
            cur = to;
        }
    }
    cur
}

/// Simulates `(X, α, α̂)` where `X` follows `α`, `α` switches with `Q(X)` and
/// `α̂` with `Q(0)`, under the basic coupling: while `α = α̂ = k` they jump
/// together to `j` at rate `q_kj(X) ∧ q_kj(0)`, and separately at the
/// positive parts of the difference. Runs to `T ∧ τ_h`.
pub fn simulate_coupled(spec: &ModelSpec, config: &SimConfig) -> Result<CoupledOutcome> {
    let mut out = CoupledOutcome {
        decoupled: false,
        vartheta: None,
        tau_h: None,
        end_time: 0.0,
        regime0: config.regime0,
        alpha_jumps: Vec::new(),
        alpha_hat_jumps: Vec::new(),
        blew_up: false,
    };
    if config.horizon == 0.0 {
        return Ok(out);
    }
    config.validate(spec.dim())?;
    let mut rng = path_rng(config.seed, config.path_index);
    let kernel = spec.kernel.as_ref();
    let steps = config.steps();
    let dt = config.horizon / steps as f64;
    let zero = vec![0.0; spec.dim()];
    let mut ws = Workspace::new(spec);
    let mut x = config.x0.clone();
    let mut x_next = x.clone();
    let (mut a, mut a_hat) = (config.regime0, config.regime0);
    let (mut row_x, mut row_0, mut scratch) = (Vec::new(), Vec::new(), Vec::new());
    out.end_time = config.horizon;
    if let Some(h) = config.stop_radius {
        if norm(&x) >= h {
            out.tau_h = Some(0.0);
            out.end_time = 0.0;
            return Ok(out);
        }
    }

    for k in 0..steps {
        let t = k as f64 * dt;
        ws.draw_noise(&mut rng, dt);
        let noise = std::mem::take(&mut ws.noise);
        ws.euler(spec, &x, a, dt, &noise, &mut x_next);
        ws.noise = noise;

        if a == a_hat {
            kernel.row(&x, a, &mut row_x);
            kernel.row(&zero, a, &mut row_0);
            let merged = merge_rows(&row_x, &row_0);
            let total: f64 = merged.iter().map(|(_, qa, qb)| qa.max(*qb)).sum();
            let pieces = ((total * dt / SWITCH_GUARD).ceil() as usize).max(1);
            let h = dt / pieces as f64;
            let mut moved = false;
            for s in 0..pieces {
                let u_accept: f64 = rng.random();
                let u_select: f64 = rng.random();
                if moved || total <= 0.0 || u_accept >= total * h {
                    continue;
                }
                let target = u_select * total;
                let mut acc = 0.0;
                let mut mv = None;
                'find: for (j, qa, qb) in &merged {
                    for (rate, m) in [
                        (qa.min(*qb), Move::Both(*j)),
                        ((qa - qb).max(0.0), Move::Alpha(*j)),
                        ((qb - qa).max(0.0), Move::AlphaHat(*j)),
                    ] {
                        acc += rate;
                        if target < acc {
                            mv = Some(m);
                            break 'find;
                        }
                    }
                }
                let time = t + (s + 1) as f64 * h;
                let from = a;
                match mv.unwrap_or(Move::Both(merged.last().expect("non-empty").0)) {
                    Move::Both(j) => {
                        out.alpha_jumps.push(Jump { time, from, to: j });
                        out.alpha_hat_jumps.push(Jump { time, from, to: j });
                        a = j;
                        a_hat = j;
                    }
                    Move::Alpha(j) => {
                        out.alpha_jumps.push(Jump { time, from, to: j });
                        a = j;
                    }
                    Move::AlphaHat(j) => {
                        out.alpha_hat_jumps.push(Jump { time, from, to: j });
                        a_hat = j;
                    }
                }
                // Rows changed; remaining sub-steps of this grid step are
                // consumed without effect and the next step re-evaluates.
                moved = true;
                if a != a_hat && out.vartheta.is_none() {
                    out.vartheta = Some(time);
                }
            }
        } else {
            a = single_switch(kernel, &x, a, t, dt, &mut rng, &mut scratch, &mut out.alpha_jumps);
            a_hat = single_switch(kernel, &zero, a_hat, t, dt, &mut rng, &mut scratch, &mut out.alpha_hat_jumps);
        }

        std::mem::swap(&mut x, &mut x_next);
        let t_next = (k + 1) as f64 * dt;
        if super::is_blow_up(&x) {
            out.blew_up = true;
            out.end_time = t_next;
            break;
        }
        if let Some(h) = config.stop_radius {
            if norm(&x) >= h {
                out.tau_h = Some(t_next);
                out.end_time = t_next;
                break;
            }
        }
    }
    out.decoupled = out.vartheta.is_some();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledSummary {
    pub n_paths: usize,
    pub n_decoupled: usize,
    /// Empirical `P{ϑ <= T ∧ τ_h}`.
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// `sqrt(p̂(1 − p̂)/n)`.
    pub std_error: f64,
    pub n_exited: usize,
    pub n_blowups: usize,
    pub seed: u64,
}

pub fn run_coupled_ensemble(spec: &ModelSpec, config: &SimConfig, n_paths: usize) -> Result<CoupledSummary> {
    if n_paths == 0 {
        return Err(Error::Config("n_paths must be at least 1".into()));
    }
    let outcomes: Vec<(bool, bool, bool)> = (0..n_paths as u64)
        .into_par_iter()
        .map(|k| {
            let o = simulate_coupled(spec, &config.for_path(k))?;
            Ok((o.decoupled, o.tau_h.is_some(), o.blew_up))
        })
        .collect::<Result<_>>()?;
    let n_decoupled = outcomes.iter().filter(|o| o.0).count();
    let p = n_decoupled as f64 / n_paths as f64;
    let (ci_low, ci_high) = wilson_interval(n_decoupled, n_paths);
    Ok(CoupledSummary {
        n_paths,
        n_decoupled,
        estimate: p,
        ci_low,
        ci_high,
        std_error: (p * (1.0 - p) / n_paths as f64).sqrt(),
        n_exited: outcomes.iter().filter(|o| o.1).count(),
        n_blowups: outcomes.iter().filter(|o| o.2).count(),
        seed: config.seed,
    })
}
