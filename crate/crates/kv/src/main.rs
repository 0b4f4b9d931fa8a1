use std::net::{SocketAddr, ToSocketAddrs};
use std::path::PathBuf;
use std::process::ExitCode;
use std::thread;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use trust_bench::report::append_row;
use trust_bench::Distribution;
use trust_kv::{load_client, prefill, LoadConfig, Server, ServerConfig, ServerMode};

#[derive(Parser)]
#[command(name = "kv", about = "Sharded key-value server and load client")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve until killed.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Dedicated trustee threads (trust mode).
        #[arg(long, default_value_t = 1)]
        trustees: usize,
        /// Defaults to the trustee count in trust mode, 512 in lock mode.
        #[arg(long)]
        shards: Option<usize>,
        #[arg(long, default_value = "trust")]
        mode: ServerMode,
    },
    /// Prefill the table, then drive pipelined load for a fixed time.
    Bench {
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Outstanding requests per connection.
        #[arg(long, default_value_t = 32)]
        pipeline: usize,
        #[arg(long, default_value_t = 1000)]
        keys: u64,
        #[arg(long, value_enum, default_value = "uniform")]
        dist: Dist,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        /// Fraction of requests that are PUTs.
        #[arg(long, default_value_t = 0.05)]
        writes: f64,
        #[arg(long, default_value_t = 5.0)]
        seconds: f64,
        /// Record every operation and check the per-key histories.
        #[arg(long)]
        verify: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Append one result row to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Dist {
    Uniform,
    Zipf,
}

#[derive(Serialize)]
struct Row {
    experiment: &'static str,
    threads: usize,
    pipeline: usize,
    keys: u64,
    distribution: &'static str,
    alpha: Option<f64>,
    write_ratio: f64,
    seconds: f64,
    seed: u64,
    total_ops: u64,
    gets: u64,
    puts: u64,
    misses: u64,
    throughput: f64,
    mean_latency: Option<f64>,
    p999_latency: Option<f64>,
    verified: bool,
}

fn resolve(addr: &str) -> Result<SocketAddr, String> {
    addr.to_socket_addrs()
        .map_err(|e| format!("{addr}: {e}"))?
        .next()
        .ok_or_else(|| format!("{addr}: no address"))
}

fn run(cli: Cli) -> Result<(), (String, u8)> {
    let fail = |e: &dyn std::fmt::Display| (e.to_string(), 1);
    let usage = |e: &dyn std::fmt::Display| (e.to_string(), 2);
    match cli.command {
        Command::Serve { addr, workers, trustees, shards, mode } => {
            let mut cfg = ServerConfig::new(mode, workers, trustees);
            cfg.addr = addr;
            cfg.shards = shards;
            let server = Server::start(&cfg).map_err(|e| fail(&e))?;
            println!("listening on {}", server.local_addr());
            loop {
                thread::sleep(Duration::from_secs(3600));
            }
        }
        Command::Bench {
            addr,
            threads,
            pipeline,
            keys,
            dist,
            alpha,
            writes,
            seconds,
            verify,
            seed,
            csv,
        } => {
            if !(seconds > 0.0 && seconds.is_finite()) {
                return Err(usage(&"--seconds must be positive"));
            }
            let addr = resolve(&addr).map_err(|e| usage(&e))?;
            let mut cfg = LoadConfig::new(addr, threads, pipeline, keys);
            if let Dist::Zipf = dist {
                cfg.distribution = Distribution::Zipf { alpha };
            }
            cfg.write_ratio = writes;
            cfg.duration = Duration::from_secs_f64(seconds);
            cfg.verify = verify;
            cfg.seed = seed;
            prefill(addr, keys, pipeline).map_err(|e| fail(&e))?;
            let report = load_client(&cfg).map_err(|e| match e {
                trust_kv::ClientError::Usage(_) => usage(&e),
                _ => fail(&e),
            })?;
            let stats = &report.stats;
            let mut line = format!(
                "kv threads={threads} pipeline={pipeline} keys={keys} ops={} throughput={:.0}/s",
                stats.total_ops(),
                stats.throughput
            );
            if let Some(l) = stats.latency {
                line += &format!(" mean={:.3}us p999={:.3}us", l.mean * 1e6, l.p999 * 1e6);
            }
            if let Some(s) = report.verified {
                line += &format!(" verified keys={} reads={} writes={}", s.keys, s.reads, s.writes);
            }
            println!("{line}");
            if let Some(path) = csv {
                let (distribution, alpha) = match cfg.distribution {
                    Distribution::Uniform => ("uniform", None),
                    Distribution::Zipf { alpha } => ("zipf", Some(alpha)),
                };
                let row = Row {
                    experiment: "kv",
                    threads,
                    pipeline,
                    keys,
                    distribution,
                    alpha,
                    write_ratio: writes,
                    seconds,
                    seed,
                    total_ops: stats.total_ops(),
                    gets: report.gets,
                    puts: report.puts,
                    misses: report.misses,
                    throughput: stats.throughput,
                    mean_latency: stats.mean_latency(),
                    p999_latency: stats.p999_latency(),
                    verified: report.verified.is_some(),
                };
                append_row(&path, &row).map_err(|e| fail(&e))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err((msg, code)) => {
            eprintln!("kv: {msg}");
            ExitCode::from(code)
        }
    }
}
