use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use crate::zipf::{Sampler, SamplerError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distribution {
    Uniform,
    Zipf { alpha: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Fibers issuing blocking `apply`.
    TrustSync,
    /// One fiber per thread issuing `apply_then` with a bounded window.
    TrustAsync,
    MutexLock,
    SpinLock,
    QueueLock,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::TrustSync,
        Mode::TrustAsync,
        Mode::MutexLock,
        Mode::SpinLock,
        Mode::QueueLock,
    ];
    pub const LOCKS: [Mode; 3] = [Mode::MutexLock, Mode::SpinLock, Mode::QueueLock];

    pub fn is_delegation(self) -> bool {
        matches!(self, Mode::TrustSync | Mode::TrustAsync)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::TrustSync => "trust",
            Mode::TrustAsync => "async",
            Mode::MutexLock => "mutex",
            Mode::SpinLock => "spin",
            Mode::QueueLock => "mcs",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Mode, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode {s:?} (trust, async, mutex, spin, mcs)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Every worker is both a client and a trustee.
    Shared,
    /// `n` extra workers act only as trustees.
    Dedicated(usize),
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layout::Shared => f.write_str("shared"),
            Layout::Dedicated(n) => write!(f, "dedicated:{n}"),
        }
    }
}

impl FromStr for Layout {
    type Err = String;

    fn from_str(s: &str) -> Result<Layout, String> {
        if s == "shared" {
            return Ok(Layout::Shared);
        }
        match s.strip_prefix("dedicated:").map(str::parse::<usize>) {
            Some(Ok(n)) if n > 0 => Ok(Layout::Dedicated(n)),
            _ => Err(format!("bad trustee layout {s:?} (shared or dedicated:N)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct WorkloadConfig {
    pub threads: usize,
    pub objects: usize,
    pub distribution: Distribution,
    pub ops_per_thread: usize,
    /// Fraction of writes; used by key-value runs only.
    pub write_ratio: f64,
    pub mode: Mode,
    pub trustee_layout: Layout,
    pub seed: u64,
    /// Blocking fibers per thread in `TrustSync` mode.
    pub fibers_per_thread: usize,
    /// Outstanding `apply_then` calls per thread in `TrustAsync` mode.
    pub inflight_cap: usize,
}

impl WorkloadConfig {
    pub fn new(mode: Mode, threads: usize, objects: usize, ops_per_thread: usize) -> Self {
        WorkloadConfig {
            threads,
            objects,
            distribution: Distribution::Uniform,
            ops_per_thread,
            write_ratio: 0.0,
            mode,
            trustee_layout: Layout::Shared,
            seed: 1,
            fibers_per_thread: 16,
            inflight_cap: 64,
        }
    }

    pub fn zipf(mut self, alpha: f64) -> Self {
        self.distribution = Distribution::Zipf { alpha };
        self
    }

    pub fn layout(mut self, layout: Layout) -> Self {
        self.trustee_layout = layout;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Usage(m.to_string()));
        if self.threads == 0 {
            return bad("threads must be at least 1");
        }
        if self.objects == 0 || self.objects > u32::MAX as usize {
            return bad("objects must be in 1..2^32");
        }
        if let Distribution::Zipf { alpha } = self.distribution {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return bad("alpha must be positive");
            }
        }
        if !(0.0..=1.0).contains(&self.write_ratio) {
            return bad("write ratio must be within [0, 1]");
        }
        if self.fibers_per_thread == 0 || self.inflight_cap == 0 {
            return bad("fibers per thread and in-flight cap must be positive");
        }
        if !self.mode.is_delegation() && self.trustee_layout != Layout::Shared {
            return bad("dedicated trustees only apply to delegation modes");
        }
        Ok(())
    }

    pub fn sampler(&self) -> Result<Sampler, SamplerError> {
        match self.distribution {
            Distribution::Uniform => Sampler::uniform(self.objects as u64),
            Distribution::Zipf { alpha } => Sampler::zipf(self.objects as u64, alpha),
        }
    }

    /// Per-thread object index sequences. They depend only on the seed and
    /// the distribution, never on the mode.
    pub fn sequences(&self) -> Result<Vec<Vec<u32>>, BenchError> {
        let sampler = self.sampler().map_err(|e| BenchError::Usage(e.to_string()))?;
        Ok((0..self.threads)
            .map(|t| {
                sampler
                    .stream(thread_seed(self.seed, t))
                    .take(self.ops_per_thread)
                    .map(|rank| (rank - 1) as u32)
                    .collect()
            })
            .collect())
    }

    /// Number of leading operations excluded from the throughput window.
    pub fn warmup_ops(&self) -> usize {
        self.ops_per_thread / 20
    }
}

pub fn thread_seed(seed: u64, thread: usize) -> u64 {
    seed ^ (thread as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Expected per-object totals for a set of sequences.
pub fn histogram(objects: usize, sequences: &[Vec<u32>]) -> Vec<u64> {
    let mut h = vec![0u64; objects];
    for s in sequences {
        for &o in s {
            h[o as usize] += 1;
        }
    }
    h
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("object {object}: counter is {actual}, expected {expected}")]
    SumMismatch {
        object: usize,
        expected: u64,
        actual: u64,
    },
    #[error("runtime: {0}")]
    Runtime(#[from] trust_core::RuntimeError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Latency {
    /// Seconds.
    pub mean: f64,
    /// Seconds.
    pub p999: f64,
    pub samples: usize,
}

impl Latency {
    pub fn from_samples(samples: &mut [f64]) -> Option<Latency> {
        if samples.is_empty() {
            return None;
        }
        samples.sort_by(f64::total_cmp);
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let rank = ((samples.len() as f64) * 0.999).ceil() as usize;
        Some(Latency {
            mean,
            p999: samples[rank.clamp(1, samples.len()) - 1],
            samples: samples.len(),
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct BenchStats {
    /// Operations per second over the measurement window.
    pub throughput: f64,
    pub latency: Option<Latency>,
    /// Operations completed by each thread.
    pub per_thread: Vec<u64>,
    /// Offered load for open-loop runs, operations per second.
    pub offered_load: Option<f64>,
    /// Open-loop run that could not keep up with its schedule.
    pub saturated: bool,
}

impl BenchStats {
    pub fn total_ops(&self) -> u64 {
        self.per_thread.iter().sum()
    }

    pub fn mean_latency(&self) -> Option<f64> {
        self.latency.map(|l| l.mean)
    }

    pub fn p999_latency(&self) -> Option<f64> {
        self.latency.map(|l| l.p999)
    }
}

/// What one measuring thread reports back.
#[derive(Clone, Copy, Debug)]
pub struct Window {
    pub ops: u64,
    pub measured_ops: u64,
    pub start: Instant,
    pub end: Instant,
}

/// Aggregate throughput: measured operations over the union of windows.
pub fn throughput(windows: &[Window]) -> f64 {
    let Some(start) = windows.iter().map(|w| w.start).min() else {
        return 0.0;
    };
    let end = windows.iter().map(|w| w.end).max().unwrap();
    let ops: u64 = windows.iter().map(|w| w.measured_ops).sum();
    let secs = end.duration_since(start).max(Duration::from_nanos(1)).as_secs_f64();
    ops as f64 / secs
}
