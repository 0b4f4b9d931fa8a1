use std::fs::OpenOptions;
use std::path::Path;

use serde::Serialize;

use crate::workload::{BenchError, BenchStats, Distribution, WorkloadConfig};

/// One CSV row: the full configuration followed by the measurements.
#[derive(Debug, Serialize)]
pub struct Row {
    pub experiment: String,
    pub mode: String,
    pub threads: usize,
    pub objects: usize,
    pub distribution: &'static str,
    pub alpha: Option<f64>,
    pub ops_per_thread: usize,
    pub write_ratio: f64,
    pub trustees: String,
    pub seed: u64,
    pub fibers_per_thread: usize,
    pub inflight_cap: usize,
    pub offered_load: Option<f64>,
    pub total_ops: u64,
    pub throughput: f64,
    pub mean_latency: Option<f64>,
    pub p999_latency: Option<f64>,
    pub saturated: bool,
}

impl Row {
    pub fn new(experiment: &str, cfg: &WorkloadConfig, stats: &BenchStats) -> Row {
        let (distribution, alpha) = match cfg.distribution {
            Distribution::Uniform => ("uniform", None),
            Distribution::Zipf { alpha } => ("zipf", Some(alpha)),
        };
        Row {
            experiment: experiment.to_string(),
            mode: cfg.mode.to_string(),
            threads: cfg.threads,
            objects: cfg.objects,
            distribution,
            alpha,
            ops_per_thread: cfg.ops_per_thread,
            write_ratio: cfg.write_ratio,
            trustees: cfg.trustee_layout.to_string(),
            seed: cfg.seed,
            fibers_per_thread: cfg.fibers_per_thread,
            inflight_cap: cfg.inflight_cap,
            offered_load: stats.offered_load,
            total_ops: stats.total_ops(),
            throughput: stats.throughput,
            mean_latency: stats.mean_latency(),
            p999_latency: stats.p999_latency(),
            saturated: stats.saturated,
        }
    }
}

/// Appends `row` to the CSV file at `path`, writing the header only when
/// the file is new or empty.
pub fn append_row<R: Serialize>(path: &Path, row: &R) -> Result<(), BenchError> {
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let fresh = file.metadata()?.len() == 0;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(row)?;
    w.flush()?;
    Ok(())
}

pub fn emit_csv(
    experiment: &str,
    cfg: &WorkloadConfig,
    stats: &BenchStats,
    path: &Path,
) -> Result<(), BenchError> {
    append_row(path, &Row::new(experiment, cfg, stats))
}
