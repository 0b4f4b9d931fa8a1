use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use trust_bench::workload::Distribution;
use trust_bench::{emit_csv, run_fetch_add, run_latency, BenchError, BenchStats, Layout, Mode, WorkloadConfig};

#[derive(Parser)]
#[command(name = "bench", about = "Delegation vs. lock fetch-and-add benchmarks")]
struct Cli {
    #[command(subcommand)]
    experiment: Experiment,
}

#[derive(Subcommand)]
enum Experiment {
    /// Closed-loop fetch-and-add throughput.
    Fna(Args),
    /// Open-loop latency at a fixed offered load.
    Latency {
        #[command(flatten)]
        args: Args,
        /// Offered load in operations per second, across all threads.
        #[arg(long)]
        load: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Dist {
    Uniform,
    Zipf,
}

#[derive(clap::Args)]
struct Args {
    #[arg(long, default_value = "trust")]
    mode: Mode,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 1)]
    objects: usize,
    #[arg(long, value_enum, default_value = "uniform")]
    dist: Dist,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Operations per thread.
    #[arg(long, default_value_t = 100_000)]
    ops: usize,
    /// `shared` or `dedicated:N`.
    #[arg(long, default_value = "shared")]
    trustees: Layout,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Blocking fibers per thread (trust mode).
    #[arg(long, default_value_t = 16)]
    fibers: usize,
    /// Outstanding requests per thread (async mode).
    #[arg(long, default_value_t = 64)]
    inflight: usize,
    /// Append one result row to this CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
}

impl Args {
    fn config(&self) -> WorkloadConfig {
        let mut cfg = WorkloadConfig::new(self.mode, self.threads, self.objects, self.ops)
            .layout(self.trustees)
            .seed(self.seed);
        if let Dist::Zipf = self.dist {
            cfg.distribution = Distribution::Zipf { alpha: self.alpha };
        }
        cfg.fibers_per_thread = self.fibers;
        cfg.inflight_cap = self.inflight;
        cfg
    }
}

fn report(name: &str, cfg: &WorkloadConfig, stats: &BenchStats, csv: Option<&PathBuf>) -> Result<(), BenchError> {
    let mut line = format!(
        "{name} mode={} threads={} objects={} ops={} throughput={:.0}/s",
        cfg.mode,
        cfg.threads,
        cfg.objects,
        stats.total_ops(),
        stats.throughput
    );
    if let Some(l) = stats.latency {
        line += &format!(" mean={:.3}us p999={:.3}us", l.mean * 1e6, l.p999 * 1e6);
    }
    if stats.saturated {
        line += " saturated";
    }
    println!("{line}");
    if let Some(path) = csv {
        emit_csv(name, cfg, stats, path)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), BenchError> {
    match cli.experiment {
        Experiment::Fna(args) => {
            let cfg = args.config();
            let stats = run_fetch_add(&cfg)?;
            report("fna", &cfg, &stats, args.csv.as_ref())
        }
        Experiment::Latency { args, load } => {
            let cfg = args.config();
            let stats = run_latency(&cfg, load)?;
            report("latency", &cfg, &stats, args.csv.as_ref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bench: {e}");
            match e {
                BenchError::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
