//! Scaling metrics and the weak-scaling report format.
//!
//! Weak scaling holds the per-worker load fixed while the worker count
//! grows, so the ideal wall time is flat and efficiency is the baseline
//! time over the measured time. Strong scaling divides a fixed total load,
//! so the ideal time shrinks like 1/N and efficiency is speedup over N.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

fn positive(name: &'static str, v: f64) -> Result<()> {
    if !v.is_finite() || v <= 0.0 {
        return Err(Error::rejected(format!("{name} must be a positive time, got {v}")));
    }
    Ok(())
}

/// Weak-scaling efficiency `W_e = T_base / T_n` for a fixed per-worker
/// load; 1.0 means the added workers were free.
pub fn weak_efficiency(t_base: f64, t_n: f64) -> Result<f64> {
    positive("baseline time", t_base)?;
    positive("measured time", t_n)?;
    Ok(t_base / t_n)
}

/// Speedup `s = T_base / T_n` for a fixed total load.
pub fn speedup(t_base: f64, t_n: f64) -> Result<f64> {
    positive("baseline time", t_base)?;
    positive("measured time", t_n)?;
    Ok(t_base / t_n)
}

/// Strong-scaling efficiency `S_e = s / N` on `workers` workers.
pub fn strong_efficiency(t_base: f64, t_n: f64, workers: u32) -> Result<f64> {
    if workers == 0 {
        return Err(Error::rejected("efficiency needs at least one worker"));
    }
    Ok(speedup(t_base, t_n)? / workers as f64)
}

/// Residual points processed per second of wall time.
pub fn throughput(points: u64, seconds: f64) -> Result<f64> {
    positive("wall time", seconds)?;
    Ok(points as f64 / seconds)
}

/// One worker count's measurements in a weak-scaling sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub workers: u32,
    /// Total residual points across all workers.
    pub points: u64,
    /// Slowest worker's wall time.
    pub wall_s: f64,
    /// Slowest worker's time inside loss and optimizer work.
    pub compute_s: f64,
    /// Slowest worker's time in sends, receive posts, and waits.
    pub comm_s: f64,
    /// Slowest worker's time in barriers.
    pub barrier_s: f64,
    /// Baseline wall time over this wall time.
    pub weak_efficiency: f64,
}

/// Column header for weak-scaling reports.
pub const BENCH_HEADER: &str =
    "workers,points,wall_s,compute_s,comm_s,barrier_s,throughput_pts_per_s,weak_efficiency";

pub fn bench_line(rec: &ScalingRecord) -> String {
    let tp = if rec.wall_s > 0.0 { rec.points as f64 / rec.wall_s } else { 0.0 };
    format!(
        "{},{},{:.6},{:.6},{:.6},{:.6},{:.3},{:.4}",
        rec.workers,
        rec.points,
        rec.wall_s,
        rec.compute_s,
        rec.comm_s,
        rec.barrier_s,
        tp,
        rec.weak_efficiency
    )
}

/// Writes a weak-scaling sweep as CSV.
pub fn write_report(path: &Path, records: &[ScalingRecord]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "{BENCH_HEADER}")?;
    for rec in records {
        writeln!(f, "{}", bench_line(rec))?;
    }
    f.flush()?;
    Ok(())
}
