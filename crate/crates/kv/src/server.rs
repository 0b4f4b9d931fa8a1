//! The key-value server.
//!
//! In trust mode the table is split into shards, each entrusted to one of
//! `trustees` dedicated trustee threads, and socket workers turn every
//! request into a non-blocking `apply_with_then`. Responses are written
//! as the callbacks fire, so they may leave in a different order than the
//! requests arrived. Lock mode serves the same protocol from a sharded
//! mutex-protected table with the same socket handling.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use trust_core::{trustee_at, yield_now, Runtime, RuntimeConfig, Trust};

use crate::conn::{Conn, Idle};
use crate::shard::ShardMap;
use crate::wire::{encode_response, Op, Request};

pub type Table = HashMap<Vec<u8>, Vec<u8>>;

/// Shard count of the lock-based server when none is given.
pub const DEFAULT_LOCK_SHARDS: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ServerMode {
    Trust,
    Locks,
}

impl std::str::FromStr for ServerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "trust" => Ok(ServerMode::Trust),
            "locks" => Ok(ServerMode::Locks),
            _ => Err(format!("unknown server mode {s:?} (trust or locks)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub addr: String,
    pub mode: ServerMode,
    /// Socket worker threads.
    pub workers: usize,
    /// Dedicated trustee threads (trust mode).
    pub trustees: usize,
    /// Defaults to `trustees` in trust mode and 512 in lock mode.
    pub shards: Option<usize>,
}

impl ServerConfig {
    pub fn new(mode: ServerMode, workers: usize, trustees: usize) -> ServerConfig {
        ServerConfig {
            addr: "127.0.0.1:0".to_string(),
            mode,
            workers,
            trustees,
            shards: None,
        }
    }

    pub fn shard_count(&self) -> usize {
        self.shards.unwrap_or(match self.mode {
            ServerMode::Trust => self.trustees,
            ServerMode::Locks => DEFAULT_LOCK_SHARDS,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("runtime: {0}")]
    Runtime(#[from] trust_core::RuntimeError),
}

/// Counters shared by all connections.
#[derive(Default)]
pub struct ServerStats {
    pub connections: AtomicU64,
    pub requests: AtomicU64,
    pub protocol_errors: AtomicU64,
}

enum Backend {
    Trust {
        rt: Arc<Runtime>,
        shards: Option<Arc<Vec<Trust<Table>>>>,
    },
    Locks {
        threads: Vec<thread::JoinHandle<()>>,
    },
}

pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    stats: Arc<ServerStats>,
    acceptor: Option<thread::JoinHandle<()>>,
    backend: Backend,
}

impl Server {
    pub fn start(cfg: &ServerConfig) -> Result<Server, ServerError> {
        if cfg.workers == 0 {
            return Err(ServerError::Config("at least one socket worker is needed".into()));
        }
        if cfg.mode == ServerMode::Trust && cfg.trustees == 0 {
            return Err(ServerError::Config("trust mode needs at least one trustee".into()));
        }
        if cfg.shard_count() == 0 {
            return Err(ServerError::Config("at least one shard is needed".into()));
        }
        let listener = TcpListener::bind(&cfg.addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stats = Arc::new(ServerStats::default());
        let map = ShardMap::new(cfg.shard_count(), cfg.trustees.max(1));
        let (backend, dispatch): (Backend, Box<dyn FnMut(TcpStream) + Send>) = match cfg.mode {
            ServerMode::Trust => {
                let rt = Runtime::start(
                    RuntimeConfig::new(cfg.trustees + cfg.workers).dedicated(cfg.trustees),
                )?;
                let n = map.shards();
                let shards = Arc::new(rt.block_on(move || {
                    (0..n)
                        .map(|s| trustee_at(map.trustee_of(s)).unwrap().entrust(Table::new()))
                        .collect::<Vec<_>>()
                }));
                let rt = Arc::new(rt);
                let (first, workers) = (cfg.trustees, cfg.workers);
                let mut next = 0;
                let (sh, st, stp, r) = (shards.clone(), stats.clone(), stop.clone(), rt.clone());
                let dispatch = Box::new(move |stream: TcpStream| {
                    let (sh, st, stp) = (sh.clone(), st.clone(), stp.clone());
                    let worker = first + next % workers;
                    next += 1;
                    drop(r.spawn_on(worker, move || serve_delegated(stream, sh, map, st, stp)));
                });
                (
                    Backend::Trust {
                        rt,
                        shards: Some(shards),
                    },
                    dispatch,
                )
            }
            ServerMode::Locks => {
                let table: Arc<Vec<Mutex<Table>>> =
                    Arc::new((0..map.shards()).map(|_| Mutex::new(Table::new())).collect());
                let mut senders = Vec::new();
                let mut threads = Vec::new();
                for i in 0..cfg.workers {
                    let (tx, rx) = mpsc::channel();
                    senders.push(tx);
                    let (table, stats, stop) = (table.clone(), stats.clone(), stop.clone());
                    threads.push(
                        thread::Builder::new()
                            .name(format!("kv-worker-{i}"))
                            .spawn(move || lock_worker(rx, table, map, stats, stop))?,
                    );
                }
                let mut next = 0;
                let dispatch = Box::new(move |stream: TcpStream| {
                    let _ = senders[next % senders.len()].send(stream);
                    next += 1;
                });
                (Backend::Locks { threads }, dispatch)
            }
        };
        let acceptor = {
            let (stop, stats) = (stop.clone(), stats.clone());
            thread::Builder::new()
                .name("kv-accept".into())
                .spawn(move || accept_loop(listener, dispatch, stop, stats))?
        };
        Ok(Server {
            addr,
            stop,
            stats,
            acceptor: Some(acceptor),
            backend,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> &ServerStats {
        &self.stats
    }

    /// Delegation counters of the trust-mode runtime.
    pub fn runtime_stats(&self) -> Option<trust_core::RuntimeStats> {
        match &self.backend {
            Backend::Trust { rt, .. } => Some(rt.stats()),
            Backend::Locks { .. } => None,
        }
    }

    /// Stops accepting, closes connections once their pending responses
    /// are written, and releases all resources.
    pub fn shutdown(mut self) -> Result<(), ServerError> {
        self.stop_all()
    }

    fn stop_all(&mut self) -> Result<(), ServerError> {
        self.stop.store(true, Ordering::Release);
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        match &mut self.backend {
            Backend::Trust { rt, shards } => {
                if let Some(s) = shards.take() {
                    rt.block_on(move || drop(s));
                }
                rt.shutdown()?;
            }
            Backend::Locks { threads } => {
                for t in threads.drain(..) {
                    let _ = t.join();
                }
            }
        }
        Ok(())
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.stop_all();
    }
}

fn accept_loop(
    listener: TcpListener,
    mut dispatch: Box<dyn FnMut(TcpStream) + Send>,
    stop: Arc<AtomicBool>,
    stats: Arc<ServerStats>,
) {
    while !stop.load(Ordering::Acquire) {
        match listener.accept() {
            Ok((stream, _)) => {
                stats.connections.fetch_add(1, Ordering::Relaxed);
                dispatch(stream);
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(1)),
            Err(_) => thread::sleep(Duration::from_millis(1)),
        }
    }
}

/// One connection, served by a fiber on a socket worker.
fn serve_delegated(
    stream: TcpStream,
    shards: Arc<Vec<Trust<Table>>>,
    map: ShardMap,
    stats: Arc<ServerStats>,
    stop: Arc<AtomicBool>,
) {
    let Ok(mut conn) = Conn::new(stream) else { return };
    let out = Rc::new(RefCell::new(Vec::<u8>::new()));
    let pending = Rc::new(Cell::new(0usize));
    let mut local = Vec::new();
    loop {
        let mut progress = false;
        match conn.fill() {
            Ok(n) => progress |= n > 0,
            Err(_) => break,
        }
        loop {
            match conn.next_request() {
                Ok(Some(req)) => {
                    progress = true;
                    stats.requests.fetch_add(1, Ordering::Relaxed);
                    issue(&shards, map, req, &out, &pending);
                }
                Ok(None) => break,
                Err(_) => {
                    stats.protocol_errors.fetch_add(1, Ordering::Relaxed);
                    // Drop the connection; late callbacks write into a
                    // buffer nobody flushes.
                    return;
                }
            }
        }
        std::mem::swap(&mut local, &mut *out.borrow_mut());
        if !local.is_empty() {
            progress = true;
            if conn.flush(&mut local).is_err() {
                return;
            }
            // Unwritten bytes go back in front of newer responses.
            let mut o = out.borrow_mut();
            local.append(&mut o);
            std::mem::swap(&mut local, &mut *o);
        }
        let drained = pending.get() == 0 && out.borrow().is_empty();
        if drained && (conn.eof() || stop.load(Ordering::Acquire)) {
            break;
        }
        // Pausing the thread would stall every connection on this worker,
        // so only sleep once the whole worker has gone quiet.
        if progress {
            WORKER_PROGRESS.set(Some(Instant::now()));
        } else if pending.get() == 0 && WORKER_PROGRESS.get().is_none_or(|t| t.elapsed() > WORKER_QUIET) {
            thread::sleep(Duration::from_micros(100));
        }
        yield_now();
    }
}

/// Time without progress on any connection after which a socket worker
/// starts sleeping between polls.
const WORKER_QUIET: Duration = Duration::from_millis(2);

thread_local! {
    static WORKER_PROGRESS: Cell<Option<Instant>> = const { Cell::new(None) };
}

fn issue(
    shards: &[Trust<Table>],
    map: ShardMap,
    req: Request,
    out: &Rc<RefCell<Vec<u8>>>,
    pending: &Rc<Cell<usize>>,
) {
    let shard = &shards[map.shard_of(req.op.key())];
    let (out, pending_c) = (out.clone(), pending.clone());
    pending.set(pending.get() + 1);
    let id = req.id;
    let sent = match req.op {
        Op::Get { key } => shard.apply_with_then(
            |t, key: Vec<u8>| t.get(&key).cloned(),
            key,
            move |v: Option<Vec<u8>>| {
                encode_response(id, v.as_deref(), &mut out.borrow_mut());
                pending_c.set(pending_c.get() - 1);
            },
        ),
        Op::Put { key, value } => shard.apply_with_then(
            |t, (k, v): (Vec<u8>, Vec<u8>)| {
                t.insert(k, v);
            },
            (key, value),
            move |()| {
                encode_response(id, Some(&[]), &mut out.borrow_mut());
                pending_c.set(pending_c.get() - 1);
            },
        ),
    };
    sent.expect("byte strings always serialize");
}

/// Lock mode: one OS thread polling its share of the connections.
fn lock_worker(
    incoming: mpsc::Receiver<TcpStream>,
    table: Arc<Vec<Mutex<Table>>>,
    map: ShardMap,
    stats: Arc<ServerStats>,
    stop: Arc<AtomicBool>,
) {
    let mut conns: Vec<(Conn, Vec<u8>)> = Vec::new();
    let mut idle = Idle::default();
    loop {
        while let Ok(s) = incoming.try_recv() {
            if let Ok(c) = Conn::new(s) {
                conns.push((c, Vec::new()));
            }
        }
        let mut progress = false;
        conns.retain_mut(|(conn, out)| {
            match conn.fill() {
                Ok(n) => progress |= n > 0,
                Err(_) => return false,
            }
            loop {
                match conn.next_request() {
                    Ok(Some(req)) => {
                        stats.requests.fetch_add(1, Ordering::Relaxed);
                        let shard = &table[map.shard_of(req.op.key())];
                        match req.op {
                            Op::Get { key } => {
                                let v = shard.lock().unwrap().get(&key).cloned();
                                encode_response(req.id, v.as_deref(), out);
                            }
                            Op::Put { key, value } => {
                                shard.lock().unwrap().insert(key, value);
                                encode_response(req.id, Some(&[]), out);
                            }
                        }
                    }
                    Ok(None) => break,
                    Err(_) => {
                        stats.protocol_errors.fetch_add(1, Ordering::Relaxed);
                        return false;
                    }
                }
            }
            if !out.is_empty() {
                progress = true;
                if conn.flush(out).is_err() {
                    return false;
                }
            }
            !(out.is_empty() && (conn.eof() || stop.load(Ordering::Acquire)))
        });
        if stop.load(Ordering::Acquire) && conns.is_empty() {
            break;
        }
        if progress {
            idle.reset();
        } else {
            idle.pause();
        }
    }
}
