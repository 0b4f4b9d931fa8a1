//! Fetch-and-add and latency benchmarks comparing delegation against lock
//! baselines.

pub mod fna;
pub mod latency;
pub mod locks;
pub mod report;
pub mod workload;
pub mod zipf;

pub use fna::{run_counted, run_fetch_add};
pub use latency::run_latency;
pub use report::emit_csv;
pub use workload::{BenchError, BenchStats, Distribution, Latency, Layout, Mode, WorkloadConfig};
pub use zipf::{zipf_sampler, Sampler};
