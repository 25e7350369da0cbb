//! JSON scenario files: a model family, a rate kernel, Lyapunov data and
//! default run settings.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::families::{
    power_lyapunov, square_lyapunov, BirthDeathKernel, Example51Coefficients, Example51Drift, Example51Params,
    Example52Kernel, LinearCoefficients, Sequence, TableKernel, TwoStateKernel,
};
use crate::markov_chain::TruncationMode;
use crate::model::{LinearPart, LyapunovSpec, ModelSpec, RateKernel, Regime};
use crate::rates::RateProfile;
use crate::simulator::{SimConfig, SwitchScheme};
use crate::stability::{regime_linearization, Theorem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Example51 {
        b: Sequence,
        sigma: Sequence,
        gamma: f64,
        #[serde(default)]
        drift: Example51Drift,
    },
    /// `A(i) = [[a_i, b_i], [0, c_i]]`, no diffusion.
    Example52 { a: Sequence, b: Sequence, c: Sequence },
    /// `b(x,i) = A(i) x`, `σ(x,i) = (σ_1(i) x, …)`. Matrices are lists of
    /// rows; the last regime entry repeats.
    Linear {
        drift: Vec<Vec<Vec<f64>>>,
        #[serde(default)]
        diffusion: Vec<Vec<Vec<Vec<f64>>>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelConfig {
    BirthDeath {
        check_p: Sequence,
        hat_p: Sequence,
        #[serde(default)]
        modulation: f64,
    },
    Example52Q {
        #[serde(default = "one")]
        scale: f64,
    },
    TwoState { q12: f64, q21: f64 },
    /// `rows[k]` lists `(j, q_{k+1, j})`.
    #[serde(alias = "custom-table")]
    CustomTable { rows: Vec<Vec<(usize, f64)>> },
    None,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum LyapunovConfig {
    Square,
    PowerP { p: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "g", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileConfig {
    Identity { h: f64 },
    #[serde(rename = "power_1_plus_gamma")]
    Power { gamma: f64, h: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundSide {
    #[default]
    Upper,
    Lower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CConfig {
    Table { values: Vec<f64>, tail: f64 },
    Constant { value: f64 },
    /// `c_i = factor · b(i) + offset` for the `example51` family.
    DriftScaled { factor: f64, offset: f64 },
    /// `c_i = 2Λ_1i + Σ_k Λ_2ik + offset` (upper) or the same with minimum
    /// eigenvalues (lower), valid for `V = |x|²` and linear families.
    SymmetricPartBound {
        #[serde(default)]
        side: BoundSide,
        #[serde(default)]
        offset: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    #[serde(default = "default_truncation")]
    pub truncation: usize,
    #[serde(default)]
    pub mode: TruncationMode,
}

fn default_truncation() -> usize {
    50
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            truncation: default_truncation(),
            mode: TruncationMode::Lump,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimDefaults {
    pub dt: f64,
    pub horizon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scheme: SwitchScheme,
    #[serde(default)]
    pub stop_radius: Option<f64>,
    #[serde(default = "one_usize")]
    pub record_stride: usize,
    pub x0: Vec<f64>,
    #[serde(default = "first")]
    pub regime0: Regime,
}

fn one_usize() -> usize {
    1
}

fn first() -> Regime {
    Regime::FIRST
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Initial radii `|x0|` tried in the stay-in-ball sweep, largest first.
    #[serde(default)]
    pub delta_sweep: Vec<f64>,
    /// Ball radius for stay-in-ball; defaults to the profile's `h`.
    #[serde(default)]
    pub h: Option<f64>,
    /// Start of the rate window; defaults to a quarter of the horizon.
    #[serde(default)]
    pub t0: Option<f64>,
}

fn default_paths() -> usize {
    1000
}

fn default_epsilon() -> f64 {
    0.05
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            n_paths: default_paths(),
            epsilon: default_epsilon(),
            delta_sweep: Vec::new(),
            h: None,
            t0: None,
        }
    }
}

fn default_theorems() -> Vec<Theorem> {
    Theorem::ALL.to_vec()
}

fn default_probe_radii() -> Vec<f64> {
    vec![1e-1, 1e-2, 1e-3]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub model: ModelConfig,
    pub kernel: KernelConfig,
    pub lyapunov: LyapunovConfig,
    pub profile: ProfileConfig,
    pub c: CConfig,
    /// Radius of a ball inside the domain on which the drift condition is claimed.
    pub domain_radius: f64,
    #[serde(default)]
    pub chain: ChainConfig,
    pub sim: SimDefaults,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default = "default_theorems")]
    pub theorems: Vec<Theorem>,
    #[serde(default = "default_probe_radii")]
    pub probe_radii: Vec<f64>,
    #[serde(default)]
    pub outputs: Option<String>,
}

/// A scenario turned into runtime objects.
#[derive(Clone)]
pub struct Built {
    pub spec: ModelSpec,
    pub lyap: LyapunovSpec,
    pub sim: SimConfig,
}

impl Scenario {
    /// Parses and validates; parse errors carry the line and column.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let sc: Scenario = serde_json::from_str(text)
            .map_err(|e| Error::Scenario(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text).map_err(|e| Error::Scenario(format!("{}: {e}", path.display())))
    }

    pub fn dim(&self) -> usize {
        match &self.model {
            ModelConfig::Example51 { .. } => 1,
            ModelConfig::Example52 { .. } => 2,
            ModelConfig::Linear { drift, .. } => drift.last().map_or(0, |m| m.len()),
        }
    }

    pub fn profile(&self) -> Result<RateProfile> {
        match self.profile {
            ProfileConfig::Identity { h } => {
                if !(h > 0.0) {
                    return Err(Error::Scenario(format!("profile h = {h} must be positive")));
                }
                Ok(RateProfile::identity(h))
            }
            ProfileConfig::Power { gamma, h } => RateProfile::power(gamma, h),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Scenario(m));
        if let ModelConfig::Example51 { gamma, b, sigma, .. } = &self.model {
            if !(*gamma > 0.0 && *gamma < 1.0) {
                return fail(format!("model.gamma = {gamma} must lie in (0, 1)"));
            }
            if !b.is_finite() || !sigma.is_finite() {
                return fail("model.b and model.sigma must be finite".into());
            }
        }
        match &self.kernel {
            KernelConfig::BirthDeath { check_p, hat_p, modulation } => {
                if check_p.inf() < 0.0 || hat_p.inf() < 0.0 || *modulation < 0.0 {
                    return fail("kernel rates must be non-negative".into());
                }
            }
            KernelConfig::TwoState { q12, q21 } => {
                if !(*q12 >= 0.0 && *q21 >= 0.0) {
                    return fail("kernel rates must be non-negative".into());
                }
            }
            KernelConfig::Example52Q { scale } => {
                if !(*scale >= 0.0) {
                    return fail("kernel.scale must be non-negative".into());
                }
            }
            KernelConfig::CustomTable { rows } => {
                TableKernel::new(rows.clone())?;
            }
            KernelConfig::None => {}
        }
        if let CConfig::DriftScaled { .. } = self.c {
            if !matches!(self.model, ModelConfig::Example51 { .. }) {
                return fail("c.kind = drift_scaled needs the example51 family".into());
            }
        }
        if let CConfig::SymmetricPartBound { .. } = self.c {
            if matches!(self.model, ModelConfig::Example51 { .. }) || !matches!(self.lyapunov, LyapunovConfig::Square) {
                return fail("c.kind = symmetric_part_bound needs a linear family and V = |x|²".into());
            }
        }
        if !(self.domain_radius > 0.0) {
            return fail(format!("domain_radius = {} must be positive", self.domain_radius));
        }
        if self.chain.truncation < 2 {
            return fail("chain.truncation must be at least 2".into());
        }
        if !(self.mc.epsilon > 0.0 && self.mc.epsilon < 1.0) {
            return fail(format!("mc.epsilon = {} must lie in (0, 1)", self.mc.epsilon));
        }
        if self.mc.delta_sweep.iter().any(|d| !(*d > 0.0)) {
            return fail("mc.delta_sweep entries must be positive".into());
        }
        self.profile()?;
        let built = self.build()?;
        built.sim.validate(built.spec.dim())?;
        Ok(())
    }

    fn linear_parts(&self) -> Result<Option<Vec<LinearPart>>> {
        let parts = match &self.model {
            ModelConfig::Example51 { .. } => return Ok(None),
            ModelConfig::Example52 { a, b, c } => {
                let explicit = a.values.len().max(b.values.len()).max(c.values.len());
                (0..=explicit)
                    .map(|k| {
                        let i = Regime::from_index(k);
                        LinearPart {
                            drift: DMatrix::from_row_slice(2, 2, &[a.at(i), b.at(i), 0.0, c.at(i)]),
                            diffusion: Vec::new(),
                        }
                    })
                    .collect()
            }
            ModelConfig::Linear { drift, diffusion } => {
                let matrix = |rows: &Vec<Vec<f64>>| -> Result<DMatrix<f64>> {
                    let n = rows.len();
                    if n == 0 || rows.iter().any(|r| r.len() != n) {
                        return Err(Error::Scenario("linear matrices must be square and non-empty".into()));
                    }
                    Ok(DMatrix::from_row_iterator(n, n, rows.iter().flatten().copied()))
                };
                if drift.is_empty() {
                    return Err(Error::Scenario("model.drift needs at least one regime".into()));
                }
                if !diffusion.is_empty() && diffusion.len() != drift.len() {
                    return Err(Error::Scenario("model.diffusion must list one entry per drift regime".into()));
                }
                let mut parts = Vec::with_capacity(drift.len());
                for (k, a) in drift.iter().enumerate() {
                    let sig = match diffusion.get(k) {
                        Some(list) => list.iter().map(matrix).collect::<Result<Vec<_>>>()?,
                        None => Vec::new(),
                    };
                    parts.push(LinearPart { drift: matrix(a)?, diffusion: sig });
                }
                parts
            }
        };
        Ok(Some(parts))
    }

    fn kernel(&self) -> Result<Arc<dyn RateKernel>> {
        Ok(match &self.kernel {
            KernelConfig::BirthDeath { check_p, hat_p, modulation } => Arc::new(BirthDeathKernel {
                check_p: check_p.clone(),
                hat_p: hat_p.clone(),
                modulation: *modulation,
            }),
            KernelConfig::Example52Q { scale } => Arc::new(Example52Kernel { scale: *scale }),
            KernelConfig::TwoState { q12, q21 } => Arc::new(TwoStateKernel::new(*q12, *q21)),
            KernelConfig::CustomTable { rows } => Arc::new(TableKernel::new(rows.clone())?),
            KernelConfig::None => Arc::new(TableKernel::default()),
        })
    }

    /// `c_i` as a table over the explicitly parameterized regimes plus a tail.
    pub fn c_sequence(&self) -> Result<Sequence> {
        match &self.c {
            CConfig::Table { values, tail } => Ok(Sequence::new(values.clone(), *tail)),
            CConfig::Constant { value } => Ok(Sequence::constant(*value)),
            CConfig::DriftScaled { factor, offset } => match &self.model {
                ModelConfig::Example51 { b, .. } => Ok(b.map(|v| factor * v + offset)),
                _ => Err(Error::Scenario("drift_scaled needs the example51 family".into())),
            },
            CConfig::SymmetricPartBound { side, offset } => {
                let parts = self
                    .linear_parts()?
                    .ok_or_else(|| Error::Scenario("symmetric_part_bound needs a linear family".into()))?;
                let mut values: Vec<f64> = parts
                    .into_iter()
                    .enumerate()
                    .map(|(k, p)| {
                        let l = regime_linearization(Regime::from_index(k), p);
                        match side {
                            BoundSide::Upper => 2.0 * l.big_lambda1 + l.big_lambda2.iter().sum::<f64>() + offset,
                            BoundSide::Lower => 2.0 * l.small_lambda1 + l.small_lambda2.iter().sum::<f64>() + offset,
                        }
                    })
                    .collect();
                let tail = values.pop().expect("at least one regime");
                Ok(Sequence::new(values, tail))
            }
        }
    }

    pub fn build(&self) -> Result<Built> {
        let kernel = self.kernel()?;
        let spec = match &self.model {
            ModelConfig::Example51 { b, sigma, gamma, drift } => {
                let params = Example51Params {
                    b: b.clone(),
                    sigma: sigma.clone(),
                    gamma: *gamma,
                    drift: *drift,
                    ..Default::default()
                };
                ModelSpec::new(Arc::new(Example51Coefficients::new(params)), kernel)
            }
            _ => {
                let parts = self.linear_parts()?.expect("linear family");
                ModelSpec::new(Arc::new(LinearCoefficients::new(parts)?), kernel)
            }
        };
        let profile = self.profile()?;
        let c = self.c_sequence()?;
        let c_bound = c.sup_abs();
        let c_fn: Arc<dyn Fn(Regime) -> f64 + Send + Sync> = Arc::new(move |i| c.at(i));
        let lyap = match self.lyapunov {
            LyapunovConfig::Square => square_lyapunov(profile, c_fn, c_bound, self.domain_radius),
            LyapunovConfig::PowerP { p } => power_lyapunov(p, profile, c_fn, c_bound, self.domain_radius)?,
        };
        let s = &self.sim;
        let sim = SimConfig {
            dt: s.dt,
            horizon: s.horizon,
            seed: s.seed,
            path_index: 0,
            scheme: s.scheme,
            stop_radius: s.stop_radius,
            record_stride: s.record_stride,
            x0: s.x0.clone(),
            regime0: s.regime0,
        };
        Ok(Built { spec, lyap, sim })
    }

    /// The `example51` parameterization with `b(i) → |b(i)|` and the drift
    /// bound moved to the other side: `c_i = factor · |b(i)| − |offset|`.
    pub fn mirrored(&self) -> Result<Scenario> {
        let mut out = self.clone();
        match &mut out.model {
            ModelConfig::Example51 { b, .. } => *b = b.map(f64::abs),
            _ => return Err(Error::Scenario("mirroring is defined for the example51 family".into())),
        }
        if let CConfig::DriftScaled { offset, .. } = &mut out.c {
            *offset = -offset.abs();
        }
        out.name = format!("{}_mirrored", self.name);
        out.validate()?;
        Ok(out)
    }
}
