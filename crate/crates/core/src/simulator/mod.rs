//! Pathwise simulation of the hybrid process: Euler–Maruyama for the
//! continuous component interleaved with thinning for the switching
//! component.

mod coupled;
mod ensemble;
mod rng;

pub use coupled::{kernel_discrepancy, run_coupled_ensemble, simulate_coupled, CoupledOutcome, CoupledSummary};
pub use ensemble::{run_ensemble, simulate_paths, wilson_interval, EnsembleSummary, Functional, FunctionalEstimate};
pub use rng::{path_rng, PathRng};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{exit_rate, norm, ModelSpec, RateKernel, Regime, Transition};

/// Largest switching probability allowed in one thinning step.
pub const SWITCH_GUARD: f64 = 0.1;

/// Paths whose norm exceeds this are terminated as blow-ups.
pub const BLOW_UP_NORM: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchScheme {
    /// One accept/select pair per grid step, sub-divided when `q_i(x) dt > 0.1`.
    #[default]
    PerStepThinning,
    /// Proposal times from a Poisson clock of rate `M`, accepted with
    /// probability `q_i(X)/M`.
    ExponentialProposals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    #[serde(default)]
    pub path_index: u64,
    #[serde(default)]
    pub scheme: SwitchScheme,
    /// Radius `h` of the ball whose first exit `τ_h` stops the path.
    #[serde(default)]
    pub stop_radius: Option<f64>,
    #[serde(default = "default_stride")]
    pub record_stride: usize,
    pub x0: Vec<f64>,
    #[serde(default = "first_regime")]
    pub regime0: Regime,
}

fn default_stride() -> usize {
    1
}

fn first_regime() -> Regime {
    Regime::FIRST
}

impl SimConfig {
    pub fn new(x0: Vec<f64>, regime0: Regime, dt: f64, horizon: f64, seed: u64) -> Self {
        SimConfig {
            dt,
            horizon,
            seed,
            path_index: 0,
            scheme: SwitchScheme::PerStepThinning,
            stop_radius: None,
            record_stride: 1,
            x0,
            regime0,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt = {} must be positive", self.dt)));
        }
        if !(self.horizon >= self.dt && self.horizon.is_finite()) {
            return Err(Error::Config(format!(
                "horizon {} must be at least dt = {}",
                self.horizon, self.dt
            )));
        }
        if self.record_stride == 0 {
            return Err(Error::Config("record_stride must be at least 1".into()));
        }
        if self.x0.len() != dim {
            return Err(Error::Config(format!(
                "initial point has length {}, model dimension is {dim}",
                self.x0.len()
            )));
        }
        if let Some(h) = self.stop_radius {
            if !(h > 0.0) {
                return Err(Error::Config(format!("stop radius {h} must be positive")));
            }
        }
        Ok(())
    }

    /// Number of grid steps; the step is `horizon / steps`.
    pub fn steps(&self) -> usize {
        ((self.horizon / self.dt).round() as usize).max(1)
    }

    pub fn for_path(&self, path_index: u64) -> Self {
        SimConfig {
            path_index,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub time: f64,
    pub from: Regime,
    pub to: Regime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub x_path: Vec<Vec<f64>>,
    pub regime_path: Vec<Regime>,
    pub jumps: Vec<Jump>,
    /// First simulation-grid time with `|X| >= h`; always also recorded.
    pub tau_h: Option<f64>,
    pub exited: bool,
    pub blew_up: bool,
    /// `max |X(t)|` over every simulation-grid time, not only recorded ones.
    pub sup_norm: f64,
    /// Time at which the path stopped (the horizon unless terminated).
    pub end_time: f64,
    pub regime0: Regime,
}

impl Trajectory {
    pub fn final_state(&self) -> (&[f64], Regime) {
        (
            self.x_path.last().expect("trajectory has a start point"),
            *self.regime_path.last().expect("trajectory has a start point"),
        )
    }

    pub fn reached_horizon(&self) -> bool {
        !self.exited && !self.blew_up
    }

    /// Time spent in `regime` on `[0, end_time]`, from the jump log.
    pub fn occupation_time(&self, regime: Regime) -> f64 {
        occupation_from_jumps(self.regime0, &self.jumps, self.end_time, regime)
    }

    /// Sojourn lengths completed before `end_time`, with the regime occupied.
    pub fn sojourns(&self) -> Vec<(Regime, f64)> {
        self.jumps
            .windows(2)
            .map(|w| (w[0].to, w[1].time - w[0].time))
            .collect()
    }
}

pub(crate) fn occupation_from_jumps(start: Regime, jumps: &[Jump], end: f64, regime: Regime) -> f64 {
    let mut current = start;
    let mut since = 0.0;
    let mut total = 0.0;
    for j in jumps {
        if current == regime {
            total += j.time - since;
        }
        current = j.to;
        since = j.time;
    }
    if current == regime {
        total += end - since;
    }
    total
}

/// One Euler–Maruyama sub-step of the continuous component with the regime
/// frozen: `x' = x + b(x,i) dt + σ(x,i) noise`, where `noise ~ N(0, dt I)`.
pub fn step(spec: &ModelSpec, x: &[f64], i: Regime, dt: f64, noise: &[f64]) -> Vec<f64> {
    let mut ws = Workspace::new(spec);
    let mut out = x.to_vec();
    ws.euler(spec, x, i, dt, noise, &mut out);
    out
}

pub fn is_blow_up(x: &[f64]) -> bool {
    x.iter().any(|v| !v.is_finite()) || norm(x) > BLOW_UP_NORM
}

/// Locates `u` in the consecutive intervals of lengths `row[k].rate`.
fn select_target(row: &[Transition], u: f64) -> Regime {
    let mut acc = 0.0;
    for t in row {
        acc += t.rate;
        if u < acc {
            return t.to;
        }
    }
    row.last().expect("non-empty row").to
}

/// Thinning decision for one step: jumps with probability `q_i(x) dt`, the
/// target chosen by placing `u_select · q_i(x)` in the intervals `Δ_ij(x)`
/// laid out in increasing `j`.
pub fn switch_step(kernel: &dyn RateKernel, x: &[f64], i: Regime, dt: f64, u_accept: f64, u_select: f64) -> Result<Regime> {
    let mut row = Vec::new();
    kernel.row(x, i, &mut row);
    row.sort_by_key(|t| t.to);
    decide_switch(&row, i, dt, u_accept, u_select)
}

fn decide_switch(row: &[Transition], i: Regime, dt: f64, u_accept: f64, u_select: f64) -> Result<Regime> {
    let q = exit_rate(row);
    if q * dt > SWITCH_GUARD {
        return Err(Error::SwitchGuard { rate: q, dt, guard: SWITCH_GUARD });
    }
    if q > 0.0 && u_accept < q * dt {
        Ok(select_target(row, u_select * q))
    } else {
        Ok(i)
    }
}

pub(crate) struct Workspace {
    drift: Vec<f64>,
    sigma: Vec<f64>,
    pub(crate) noise: Vec<f64>,
    pub(crate) row: Vec<Transition>,
    n: usize,
    d: usize,
}

impl Workspace {
    pub(crate) fn new(spec: &ModelSpec) -> Self {
        let (n, d) = (spec.dim(), spec.noise_dim());
        Workspace {
            drift: vec![0.0; n],
            sigma: vec![0.0; n * d],
            noise: vec![0.0; d],
            row: Vec::new(),
            n,
            d,
        }
    }

    pub(crate) fn draw_noise(&mut self, rng: &mut PathRng, dt: f64) {
        let scale = dt.sqrt();
        for z in &mut self.noise {
            let g: f64 = StandardNormal.sample(rng);
            *z = g * scale;
        }
    }

    pub(crate) fn euler(&mut self, spec: &ModelSpec, x: &[f64], i: Regime, dt: f64, noise: &[f64], out: &mut [f64]) {
        spec.coefficients.drift(x, i, &mut self.drift);
        spec.coefficients.diffusion(x, i, &mut self.sigma);
        for r in 0..self.n {
            let mut v = x[r] + self.drift[r] * dt;
            for k in 0..self.d {
                v += self.sigma[r * self.d + k] * noise[k];
            }
            out[r] = v;
        }
    }

    pub(crate) fn load_row(&mut self, kernel: &dyn RateKernel, x: &[f64], i: Regime) -> f64 {
        kernel.row(x, i, &mut self.row);
        self.row.sort_by_key(|t| t.to);
        exit_rate(&self.row)
    }
}

/// Advances the regime over one grid step `[t, t + dt)` with the continuous
/// state frozen at `x`, appending jumps to `jumps`.
fn switch_over_step(
    spec: &ModelSpec,
    ws: &mut Workspace,
    rng: &mut PathRng,
    scheme: SwitchScheme,
    next_proposal: &mut f64,
    x: &[f64],
    mut i: Regime,
    t: f64,
    dt: f64,
    jumps: &mut Vec<Jump>,
) -> Result<Regime> {
    let kernel = spec.kernel.as_ref();
    match scheme {
        SwitchScheme::PerStepThinning => {
            let q = ws.load_row(kernel, x, i);
            let pieces = ((q * dt / SWITCH_GUARD).ceil() as usize).max(1);
            let h = dt / pieces as f64;
            for s in 0..pieces {
                let u_accept: f64 = rng.random();
                let u_select: f64 = rng.random();
                if s > 0 {
                    ws.load_row(kernel, x, i);
                }
                let to = decide_switch(&ws.row, i, h, u_accept, u_select)?;
                if to != i {
                    jumps.push(Jump { time: t + (s + 1) as f64 * h, from: i, to });
                    i = to;
                }
            }
        }
        SwitchScheme::ExponentialProposals => {
            let m = kernel.global_bound().ok_or_else(|| {
                Error::Config("exponential_proposals needs a kernel with a global bound".into())
            })?;
            while *next_proposal < t + dt {
                let u_accept: f64 = rng.random();
                let u_select: f64 = rng.random();
                let q = ws.load_row(kernel, x, i);
                if q > m * (1.0 + 1e-12) {
                    return Err(Error::Contract(format!(
                        "exit rate {q} exceeds the declared global bound {m}"
                    )));
                }
                if q > 0.0 && u_accept * m < q {
                    let to = select_target(&ws.row, u_select * q);
                    jumps.push(Jump { time: *next_proposal, from: i, to });
                    i = to;
                }
                let u: f64 = rng.random();
                *next_proposal += -(1.0 - u).ln() / m;
            }
        }
    }
    Ok(i)
}

pub(crate) fn initial_proposal(spec: &ModelSpec, scheme: SwitchScheme, rng: &mut PathRng) -> Result<f64> {
    match scheme {
        SwitchScheme::PerStepThinning => Ok(f64::INFINITY),
        SwitchScheme::ExponentialProposals => {
            let m = spec.kernel.global_bound().ok_or_else(|| {
                Error::Config("exponential_proposals needs a kernel with a global bound".into())
            })?;
            if !(m > 0.0) {
                return Ok(f64::INFINITY);
            }
            let u: f64 = rng.random();
            Ok(-(1.0 - u).ln() / m)
        }
    }
}

/// Simulates one path on `[0, horizon]`.
///
/// Per grid step the path consumes its random stream in a fixed order: the
/// Gaussian increment first, then the switching draws.
pub fn simulate(spec: &ModelSpec, config: &SimConfig) -> Result<Trajectory> {
    config.validate(spec.dim())?;
    let mut rng = path_rng(config.seed, config.path_index);
    let steps = config.steps();
    let dt = config.horizon / steps as f64;
    let mut ws = Workspace::new(spec);
    let mut next_proposal = initial_proposal(spec, config.scheme, &mut rng)?;

    let mut x = config.x0.clone();
    let mut x_next = x.clone();
    let mut i = config.regime0;
    let mut traj = Trajectory {
        times: vec![0.0],
        x_path: vec![x.clone()],
        regime_path: vec![i],
        jumps: Vec::new(),
        tau_h: None,
        exited: false,
        blew_up: false,
        sup_norm: norm(&x),
        end_time: config.horizon,
        regime0: i,
    };
    if let Some(h) = config.stop_radius {
        if norm(&x) >= h {
            traj.tau_h = Some(0.0);
            traj.exited = true;
            traj.end_time = 0.0;
            return Ok(traj);
        }
    }

    for k in 0..steps {
        let t = k as f64 * dt;
        ws.draw_noise(&mut rng, dt);
        let noise = std::mem::take(&mut ws.noise);
        ws.euler(spec, &x, i, dt, &noise, &mut x_next);
        ws.noise = noise;
        let regime = switch_over_step(spec, &mut ws, &mut rng, config.scheme, &mut next_proposal, &x, i, t, dt, &mut traj.jumps)?;
        std::mem::swap(&mut x, &mut x_next);
        i = regime;
        let t_next = (k + 1) as f64 * dt;
        let r = norm(&x);
        if is_blow_up(&x) {
            traj.blew_up = true;
            traj.sup_norm = f64::INFINITY;
            traj.end_time = t_next;
            traj.times.push(t_next);
            traj.x_path.push(x.clone());
            traj.regime_path.push(i);
            return Ok(traj);
        }
        traj.sup_norm = traj.sup_norm.max(r);
        if let Some(h) = config.stop_radius {
            if r >= h {
                traj.tau_h = Some(t_next);
                traj.exited = true;
                traj.end_time = t_next;
                traj.times.push(t_next);
                traj.x_path.push(x.clone());
                traj.regime_path.push(i);
                return Ok(traj);
            }
        }
        if (k + 1) % config.record_stride == 0 || k + 1 == steps {
            traj.times.push(t_next);
            traj.x_path.push(x.clone());
            traj.regime_path.push(i);
        }
    }
    Ok(traj)
}
