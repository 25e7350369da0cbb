//! Scenarios shipped with the binary.

pub struct Preset {
    pub name: &'static str,
    pub json: &'static str,
    pub stages: &'static [Stage],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Analyze,
    Simulate,
    DeltaSweep,
    VerifyRate,
    CoupledTest,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Analyze => "analyze",
            Stage::Simulate => "simulate",
            Stage::DeltaSweep => "delta_sweep",
            Stage::VerifyRate => "verify_rate",
            Stage::CoupledTest => "coupled_test",
        }
    }
}

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "example51",
        json: include_str!("../scenarios/example51.json"),
        stages: &[Stage::Analyze, Stage::DeltaSweep, Stage::VerifyRate],
    },
    Preset {
        name: "example52",
        json: include_str!("../scenarios/example52.json"),
        stages: &[Stage::Analyze, Stage::CoupledTest],
    },
    Preset {
        name: "contraction",
        json: include_str!("../scenarios/contraction.json"),
        stages: &[Stage::VerifyRate],
    },
    Preset {
        name: "two_state",
        json: include_str!("../scenarios/two_state.json"),
        stages: &[Stage::Analyze, Stage::Simulate],
    },
];

pub fn find(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}
