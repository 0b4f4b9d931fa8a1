//! Pipelined load generator with optional history capture.
//!
//! Keys are the 8-byte little-endian encoding of an index in `0..keys`.
//! Values are 16 bytes: a 64-bit value id written twice, so a torn or
//! foreign value is detectable. Every PUT writes a fresh id, which lets the
//! history checker map each GET to the PUT it observed.

use std::collections::HashMap;
use std::io::{self, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trust_bench::workload::{thread_seed, Window};
use trust_bench::zipf::{Sampler, SamplerError};
use trust_bench::{BenchStats, Distribution, Latency};

use crate::verify::{self, Event, Kind, Summary, Violation};
use crate::wire::{Op, Request, Response, Status, WireError};

pub const VALUE_LEN: usize = 16;

pub fn key_bytes(index: u64) -> [u8; 8] {
    index.to_le_bytes()
}

pub fn value_bytes(id: u64) -> [u8; VALUE_LEN] {
    let mut v = [0u8; VALUE_LEN];
    v[..8].copy_from_slice(&id.to_le_bytes());
    v[8..].copy_from_slice(&id.to_le_bytes());
    v
}

/// Value id carried by a 16-byte value, if well formed.
pub fn value_id(value: &[u8]) -> Option<u64> {
    if value.len() != VALUE_LEN || value[..8] != value[8..] {
        return None;
    }
    Some(u64::from_le_bytes(value[..8].try_into().unwrap()))
}

/// Value id a key holds after [`prefill`].
pub fn initial_id(key: u32) -> u64 {
    key as u64
}

#[derive(Clone, Debug)]
pub struct LoadConfig {
    pub addr: SocketAddr,
    pub threads: usize,
    pub pipeline: usize,
    pub keys: u64,
    pub distribution: Distribution,
    pub write_ratio: f64,
    pub duration: Duration,
    /// Capture every operation and check the per-key histories.
    pub verify: bool,
    pub seed: u64,
}

impl LoadConfig {
    pub fn new(addr: SocketAddr, threads: usize, pipeline: usize, keys: u64) -> LoadConfig {
        LoadConfig {
            addr,
            threads,
            pipeline,
            keys,
            distribution: Distribution::Uniform,
            write_ratio: 0.05,
            duration: Duration::from_secs(1),
            verify: false,
            seed: 1,
        }
    }

    pub fn sampler(&self) -> Result<Sampler, SamplerError> {
        match self.distribution {
            Distribution::Uniform => Sampler::uniform(self.keys),
            Distribution::Zipf { alpha } => Sampler::zipf(self.keys, alpha),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("protocol: {0}")]
    Wire(#[from] WireError),
    #[error("response for unknown request id {0}")]
    UnknownId(u64),
    #[error("server closed the connection with {0} requests outstanding")]
    Orphans(usize),
    #[error("request {id}: unexpected response {detail}")]
    Corrupt { id: u64, detail: String },
    #[error("history check failed: {0}")]
    Violation(#[from] Violation),
}

#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub stats: BenchStats,
    pub gets: u64,
    pub puts: u64,
    pub misses: u64,
    /// Present when the run was verified.
    pub verified: Option<Summary>,
}

/// Writes every key with its initial value over one pipelined connection.
pub fn prefill(addr: SocketAddr, keys: u64, pipeline: usize) -> Result<(), ClientError> {
    let mut conn = Client::connect(addr)?;
    let pipeline = pipeline.max(1);
    let mut next = 0u64;
    let mut outstanding = HashMap::new();
    while next < keys || !outstanding.is_empty() {
        while next < keys && outstanding.len() < pipeline {
            let op = Op::Put {
                key: key_bytes(next).to_vec(),
                value: value_bytes(initial_id(next as u32)).to_vec(),
            };
            outstanding.insert(conn.send(op), ());
            next += 1;
        }
        conn.flush()?;
        for resp in conn.receive()? {
            outstanding.remove(&resp.id).ok_or(ClientError::UnknownId(resp.id))?;
            if resp.status != Status::Ok(Vec::new()) {
                return Err(corrupt(resp.id, &resp.status));
            }
        }
    }
    Ok(())
}

/// Minimal blocking client: requests get consecutive ids.
pub struct Client {
    stream: TcpStream,
    next_id: u64,
    out: Vec<u8>,
    inbuf: Vec<u8>,
}

impl Client {
    pub fn connect(addr: SocketAddr) -> io::Result<Client> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Client {
            stream,
            next_id: 0,
            out: Vec::new(),
            inbuf: Vec::new(),
        })
    }

    /// Queues a request; returns its id.
    pub fn send(&mut self, op: Op) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        Request { id, op }.encode(&mut self.out);
        id
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.stream.write_all(&self.out)?;
        self.out.clear();
        Ok(())
    }

    /// Blocks until at least one response is available and returns all
    /// complete responses.
    pub fn receive(&mut self) -> Result<Vec<Response>, ClientError> {
        let mut got = Vec::new();
        let mut chunk = [0u8; 64 * 1024];
        loop {
            let mut at = 0;
            while let Some((resp, n)) = Response::decode(&self.inbuf[at..])? {
                got.push(resp);
                at += n;
            }
            self.inbuf.drain(..at);
            if !got.is_empty() {
                return Ok(got);
            }
            match self.stream.read(&mut chunk) {
                Ok(0) => return Err(io::Error::from(ErrorKind::UnexpectedEof).into()),
                Ok(n) => self.inbuf.extend_from_slice(&chunk[..n]),
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Sends one request and waits for its response.
    pub fn call(&mut self, op: Op) -> Result<Status, ClientError> {
        let id = self.send(op);
        self.flush()?;
        let mut resps = self.receive()?;
        match (resps.len(), resps.pop()) {
            (1, Some(r)) if r.id == id => Ok(r.status),
            (_, Some(r)) => Err(ClientError::UnknownId(r.id)),
            (_, None) => unreachable!("receive returns at least one response"),
        }
    }

    pub fn get(&mut self, key: &[u8]) -> Result<Option<Vec<u8>>, ClientError> {
        Ok(match self.call(Op::Get { key: key.to_vec() })? {
            Status::Ok(v) => Some(v),
            Status::Miss => None,
        })
    }

    pub fn put(&mut self, key: &[u8], value: &[u8]) -> Result<(), ClientError> {
        match self.call(Op::Put { key: key.to_vec(), value: value.to_vec() })? {
            Status::Ok(v) if v.is_empty() => Ok(()),
            s => Err(corrupt(self.next_id - 1, &s)),
        }
    }
}

fn corrupt(id: u64, status: &Status) -> ClientError {
    ClientError::Corrupt {
        id,
        detail: format!("{status:?}"),
    }
}

struct Pending {
    key: u32,
    put: Option<u64>,
    issued: Instant,
}

struct ThreadResult {
    window: Window,
    latencies: Vec<f64>,
    history: Vec<Event>,
    gets: u64,
    puts: u64,
    misses: u64,
}

/// Runs the load for `cfg.duration` against an already prefilled server.
pub fn load_client(cfg: &LoadConfig) -> Result<LoadReport, ClientError> {
    if cfg.threads == 0 || cfg.pipeline == 0 {
        return Err(ClientError::Usage("threads and pipeline depth must be positive".into()));
    }
    if cfg.keys == 0 || cfg.keys > u32::MAX as u64 {
        return Err(ClientError::Usage(format!("key count {} out of range", cfg.keys)));
    }
    if !(0.0..=1.0).contains(&cfg.write_ratio) {
        return Err(ClientError::Usage(format!("write ratio {} not in [0, 1]", cfg.write_ratio)));
    }
    let sampler = cfg.sampler().map_err(|e| ClientError::Usage(e.to_string()))?;
    let epoch = Instant::now();
    let results: Vec<Result<ThreadResult, ClientError>> = thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.threads)
            .map(|t| {
                let sampler = &sampler;
                s.spawn(move || run_thread(cfg, sampler, t, epoch))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("client thread panicked")).collect()
    });

    let mut report = LoadReport::default();
    let mut windows = Vec::new();
    let mut latencies = Vec::new();
    let mut history = Vec::new();
    for r in results {
        let r = r?;
        windows.push(r.window);
        report.stats.per_thread.push(r.window.ops);
        latencies.extend(r.latencies);
        history.extend(r.history);
        report.gets += r.gets;
        report.puts += r.puts;
        report.misses += r.misses;
    }
    report.stats.throughput = trust_bench::workload::throughput(&windows);
    report.stats.latency = Latency::from_samples(&mut latencies);
    if cfg.verify {
        report.verified = Some(verify::check(&history, |k| Some(initial_id(k)))?);
    }
    Ok(report)
}

/// Key indices client thread `t` requests, in order.
pub fn key_stream(sampler: &Sampler, seed: u64, t: usize) -> impl Iterator<Item = u32> {
    sampler.stream(thread_seed(seed, t)).map(|rank| (rank - 1) as u32)
}

fn run_thread(cfg: &LoadConfig, sampler: &Sampler, t: usize, epoch: Instant) -> Result<ThreadResult, ClientError> {
    let mut conn = Client::connect(cfg.addr)?;
    let mut keys = key_stream(sampler, cfg.seed, t);
    let mut coin = ChaCha8Rng::seed_from_u64(thread_seed(cfg.seed, t).rotate_left(17));
    let mut pending: HashMap<u64, Pending> = HashMap::with_capacity(cfg.pipeline);
    let mut res = ThreadResult {
        window: Window {
            ops: 0,
            measured_ops: 0,
            start: Instant::now(),
            end: Instant::now(),
        },
        latencies: Vec::new(),
        history: Vec::new(),
        gets: 0,
        puts: 0,
        misses: 0,
    };
    let stamp = |at: Instant| at.duration_since(epoch).as_nanos() as u64 + 1;
    let mut writes = 0u64;
    let deadline = res.window.start + cfg.duration;
    loop {
        if Instant::now() < deadline {
            while pending.len() < cfg.pipeline {
                let key = keys.next().unwrap();
                let kb = key_bytes(key as u64).to_vec();
                let (op, put) = if coin.random_bool(cfg.write_ratio) {
                    writes += 1;
                    let id = ((t as u64 + 1) << 40) | writes;
                    (Op::Put { key: kb, value: value_bytes(id).to_vec() }, Some(id))
                } else {
                    (Op::Get { key: kb }, None)
                };
                let id = conn.send(op);
                pending.insert(id, Pending { key, put, issued: Instant::now() });
            }
            conn.flush()?;
        }
        if pending.is_empty() {
            break;
        }
        let resps = match conn.receive() {
            Ok(r) => r,
            Err(ClientError::Io(e)) if e.kind() == ErrorKind::UnexpectedEof => {
                return Err(ClientError::Orphans(pending.len()));
            }
            Err(e) => return Err(e),
        };
        let now = Instant::now();
        for resp in resps {
            let p = pending.remove(&resp.id).ok_or(ClientError::UnknownId(resp.id))?;
            let value = match (p.put, &resp.status) {
                (Some(id), Status::Ok(v)) if v.is_empty() => {
                    res.puts += 1;
                    Some(id)
                }
                (None, Status::Ok(v)) => {
                    res.gets += 1;
                    Some(value_id(v).ok_or_else(|| corrupt(resp.id, &resp.status))?)
                }
                (None, Status::Miss) => {
                    res.gets += 1;
                    res.misses += 1;
                    None
                }
                _ => return Err(corrupt(resp.id, &resp.status)),
            };
            res.latencies.push(now.duration_since(p.issued).as_secs_f64());
            if cfg.verify {
                res.history.push(Event {
                    key: p.key,
                    kind: if p.put.is_some() { Kind::Put } else { Kind::Get },
                    value,
                    invoke: stamp(p.issued),
                    respond: stamp(now),
                });
            }
            res.window.ops += 1;
        }
    }
    res.window.end = Instant::now();
    res.window.measured_ops = res.window.ops;
    Ok(res)
}
