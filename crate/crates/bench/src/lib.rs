//! Fixtures shared by the criterion benches in `benches/`.

use switchdiff::families::{example51_model, example52_model, Example51Params, Example52Params};
use switchdiff::{ModelSpec, Regime, SimConfig};

pub fn example51() -> ModelSpec {
    example51_model(&Example51Params::default())
}

pub fn example52() -> ModelSpec {
    example52_model(&Example52Params::default()).expect("default parameters are valid")
}

/// A short path from `x0` in regime 1 with a fixed seed.
pub fn short_run(x0: Vec<f64>, dt: f64, horizon: f64) -> SimConfig {
    SimConfig::new(x0, Regime::FIRST, dt, horizon, 1)
}
