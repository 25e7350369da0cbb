//! Command-line orchestration: scenario loading, stage wiring and reports.

pub mod args;
pub mod pipeline;
pub mod presets;
pub mod report;

use anyhow::{bail, Context, Result};

use args::{Cli, Command, ReproduceArgs, RunArgs};
use pipeline::{load, prepare, InputError, Job};
use presets::{Stage, PRESETS};

/// Environment variable holding the worker count.
pub const THREADS_ENV: &str = "SWITCHDIFF_THREADS";

/// Worker pool sized by `SWITCHDIFF_THREADS` (rayon's default when unset or 0).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| InputError(format!("{THREADS_ENV} = {v:?} is not a worker count")))?,
        Err(_) => 0,
    };
    Ok(rayon::ThreadPoolBuilder::new().num_threads(threads).build()?)
}

fn run_job(command: &str, a: &RunArgs, stages: &[Stage]) -> Result<Job> {
    let mut job = load(command, &a.scenario, &a.overrides, a.out.clone())?;
    let result = job.run(stages);
    print_summary(&job);
    result.map(|_| job)
}

fn print_summary(job: &Job) {
    println!("scenario {} (sha256 {})", job.scenario.name, &job.report.provenance.scenario_sha256[..16]);
    for line in job.summary_lines() {
        println!("  {line}");
    }
    if let Some(dir) = &job.out {
        println!("  report: {}", dir.join("report.json").display());
    }
}

fn reproduce(a: &ReproduceArgs) -> Result<()> {
    if a.preset == "list" {
        for p in PRESETS {
            let stages: Vec<&str> = p.stages.iter().map(|s| s.name()).collect();
            println!("{}: {}", p.name, stages.join(", "));
        }
        return Ok(());
    }
    let Some(preset) = presets::find(&a.preset) else {
        let names: Vec<&str> = PRESETS.iter().map(|p| p.name).collect();
        bail!(InputError(format!("unknown preset {:?}; available: {}", a.preset, names.join(", "))));
    };
    let out = a.out.as_ref().map(|d| d.join(preset.name));
    let mut job = prepare("reproduce", preset.json.as_bytes(), format!("preset:{}", preset.name), &a.overrides, out)?;
    let result = job.run(preset.stages);
    print_summary(&job);
    result
}

/// Executes a parsed command line inside the configured worker pool.
pub fn run(cli: Cli) -> Result<()> {
    let pool = thread_pool()?;
    pool.install(|| match &cli.command {
        Command::Analyze(a) => run_job("analyze", a, &[Stage::Analyze]).map(|_| ()),
        Command::Simulate(a) => run_job("simulate", a, &[Stage::Simulate]).map(|_| ()),
        Command::VerifyRate(a) => run_job("verify-rate", a, &[Stage::VerifyRate]).map(|_| ()),
        Command::CoupledTest(a) => run_job("coupled-test", a, &[Stage::CoupledTest]).map(|_| ()),
        Command::Reproduce(a) => reproduce(a),
    })
    .context("switchdiff")
}

/// Exit status for an error returned by [`run`]: 2 for bad input, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<InputError>()) {
        2
    } else {
        1
    }
}
