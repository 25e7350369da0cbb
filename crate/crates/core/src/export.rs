//! CSV and JSON writers for trajectories, matrices, measures and curves.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::Result;
use crate::markov_chain::InvariantMeasure;
use crate::rates::QuantilePoint;
use crate::simulator::Trajectory;

/// Columns `t, x1..xn, regime`, one row per recorded time.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let n = traj.x_path.first().map_or(0, |x| x.len());
    let mut out = String::from("t");
    for k in 1..=n {
        let _ = write!(out, ",x{k}");
    }
    out.push_str(",regime\n");
    for ((t, x), r) in traj.times.iter().zip(&traj.x_path).zip(&traj.regime_path) {
        let _ = write!(out, "{t}");
        for v in x {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{r}");
    }
    out
}

pub fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| m[(i, j)].to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn measure_csv(nu: &InvariantMeasure) -> String {
    let mut out = String::from("regime,nu\n");
    for (k, v) in nu.nu.iter().enumerate() {
        let _ = writeln!(out, "{},{v}", k + 1);
    }
    out
}

pub fn quantile_curve_csv(curve: &[QuantilePoint]) -> String {
    let mut out = String::from("lambda,quantile,n_surviving\n");
    for p in curve {
        let _ = writeln!(out, "{},{},{}", p.lambda, p.quantile, p.n_surviving);
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}
