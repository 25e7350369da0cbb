//! Simulation and stability analysis of diffusions whose coefficients switch
//! among countably many regimes at state-dependent rates.

pub mod error;
pub mod export;
pub mod families;
pub mod markov_chain;
pub mod model;
pub mod quadrature;
pub mod rates;
pub mod scenario;
pub mod simulator;
pub mod stability;

#[cfg(any(test, feature = "oracles"))]
pub mod oracles;

pub use error::{Error, Result};
pub use markov_chain::{InvariantMeasure, TruncatedChain, TruncationMode};
pub use model::{Coefficients, LyapunovSpec, ModelSpec, RateKernel, Regime, Transition};
pub use rates::RateProfile;
pub use scenario::Scenario;
pub use simulator::{SimConfig, SwitchScheme, Trajectory};
pub use stability::{CriterionReport, Theorem, Verdict};
