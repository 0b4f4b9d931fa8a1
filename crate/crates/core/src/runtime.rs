//! Worker threads, trustee placement, pending-request queues and lifecycle.
//!
//! Every worker thread runs a fiber scheduler whose service pass
//!
//! 1. runs jobs injected from outside the runtime,
//! 2. runs locally deferred delegation work,
//! 3. serves every inbound request slot addressed to this thread,
//! 4. polls response slots and completes the waiting callers,
//! 5. flushes per-trustee pending queues into free request slots.
//!
//! Threads `0..dedicated` are dedicated trustees: they never run client
//! fibers unless explicitly told to.

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, VecDeque};
use std::mem::MaybeUninit;
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex, OnceLock, Weak};
use std::thread::{self, Thread};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::channel::{encode_request, ChannelMatrix, EncodedRequest, RequestView, ResponseShape, ResponseWriter, OVERFLOW_BLOCK};
use crate::fibers::{self, check_can_block, panic_message, FiberKind, Next, Scheduler, SchedulerConfig, WakeToken};
use crate::trust::TrusteeRef;

pub const DEFAULT_HIGH_WATER_MARK: usize = 4096;
pub const DEFAULT_DRAIN_TIMEOUT: Duration = Duration::from_secs(5);

/// Consecutive service passes without progress before a worker with
/// runnable fibers yields its OS thread.
const FRUITLESS_YIELD: u32 = 64;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("invalid runtime configuration: {0}")]
    InvalidConfig(String),
    #[error("a runtime cannot be started from one of its own worker threads")]
    AlreadyRunning,
    #[error("failed to start worker {index}: {reason}")]
    Startup { index: usize, reason: String },
    #[error("trustee index {index} out of range for {threads} threads")]
    OutOfRange { index: usize, threads: usize },
    #[error("shutdown finished with problems: {}", .0.join("; "))]
    Shutdown(Vec<String>),
}

/// Runtime topology and tuning.
#[derive(Clone, Debug)]
pub struct RuntimeConfig {
    pub worker_threads: usize,
    /// Threads `0..n` run only trustee work.
    pub dedicated_trustees: Option<usize>,
    /// Core for each worker thread, best effort.
    pub pinning: Option<Vec<usize>>,
    pub stack_size: usize,
    pub fiber_pool: usize,
    /// Pending requests per trustee above which blocking callers wait.
    pub high_water_mark: usize,
    pub drain_timeout: Duration,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            worker_threads: thread::available_parallelism().map_or(1, |n| n.get()),
            dedicated_trustees: None,
            pinning: None,
            stack_size: fibers::DEFAULT_STACK_SIZE,
            fiber_pool: fibers::DEFAULT_FIBER_POOL,
            high_water_mark: DEFAULT_HIGH_WATER_MARK,
            drain_timeout: DEFAULT_DRAIN_TIMEOUT,
        }
    }
}

impl RuntimeConfig {
    pub fn new(worker_threads: usize) -> Self {
        RuntimeConfig {
            worker_threads,
            ..Default::default()
        }
    }

    pub fn dedicated(mut self, n: usize) -> Self {
        self.dedicated_trustees = Some(n);
        self
    }

    pub fn pinned(mut self, cores: Vec<usize>) -> Self {
        self.pinning = Some(cores);
        self
    }

    pub fn stack_size(mut self, bytes: usize) -> Self {
        self.stack_size = bytes;
        self
    }

    /// Defaults overridden by `TRUST_WORKERS`, `TRUST_DEDICATED`,
    /// `TRUST_STACK_SIZE`, `TRUST_FIBER_POOL`, `TRUST_HIGH_WATER` and
    /// `TRUST_PIN` (comma-separated core ids).
    pub fn from_env() -> Result<Self, RuntimeError> {
        fn var<T: std::str::FromStr>(name: &str) -> Result<Option<T>, RuntimeError> {
            match std::env::var(name) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map(Some)
                    .map_err(|_| RuntimeError::InvalidConfig(format!("{name}={v}"))),
                Err(_) => Ok(None),
            }
        }
        let mut cfg = RuntimeConfig::default();
        if let Some(n) = var("TRUST_WORKERS")? {
            cfg.worker_threads = n;
        }
        cfg.dedicated_trustees = var("TRUST_DEDICATED")?;
        if let Some(n) = var("TRUST_STACK_SIZE")? {
            cfg.stack_size = n;
        }
        if let Some(n) = var("TRUST_FIBER_POOL")? {
            cfg.fiber_pool = n;
        }
        if let Some(n) = var("TRUST_HIGH_WATER")? {
            cfg.high_water_mark = n;
        }
        if let Ok(v) = std::env::var("TRUST_PIN") {
            let cores = v
                .split(',')
                .map(|c| c.trim().parse())
                .collect::<Result<Vec<usize>, _>>()
                .map_err(|_| RuntimeError::InvalidConfig(format!("TRUST_PIN={v}")))?;
            cfg.pinning = Some(cores);
        }
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), RuntimeError> {
        let bad = |m: String| Err(RuntimeError::InvalidConfig(m));
        if self.worker_threads == 0 {
            return bad("worker_threads must be at least 1".into());
        }
        if let Some(d) = self.dedicated_trustees {
            if d == 0 || d >= self.worker_threads {
                return bad(format!(
                    "dedicated_trustees ({d}) must be in 1..{}",
                    self.worker_threads
                ));
            }
        }
        if let Some(p) = &self.pinning {
            if p.len() != self.worker_threads {
                return bad(format!(
                    "pinning lists {} cores for {} workers",
                    p.len(),
                    self.worker_threads
                ));
            }
        }
        if self.high_water_mark == 0 {
            return bad("high_water_mark must be positive".into());
        }
        Ok(())
    }
}

/// Counters of one worker thread.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WorkerStats {
    /// Requests this thread queued for remote trustees.
    pub tasks_issued: u64,
    /// Requests this thread executed as a trustee.
    pub tasks_served: u64,
    /// Responses this thread consumed as a client.
    pub responses: u64,
    pub batches_sent: u64,
    pub service_passes: u64,
    pub context_switches: u64,
    /// Client fibers spawned here (block_on, spawn).
    pub client_fibers: u64,
    /// Delegation calls that ran through the local shortcut.
    pub local_shortcuts: u64,
    /// Requests waiting in pending queues at the last service pass.
    pub queue_depth: u64,
}

#[derive(Clone, Debug, Default)]
pub struct RuntimeStats {
    pub workers: Vec<WorkerStats>,
}

impl RuntimeStats {
    pub fn total(&self) -> WorkerStats {
        let mut t = WorkerStats::default();
        for w in &self.workers {
            t.tasks_issued += w.tasks_issued;
            t.tasks_served += w.tasks_served;
            t.responses += w.responses;
            t.batches_sent += w.batches_sent;
            t.service_passes += w.service_passes;
            t.context_switches += w.context_switches;
            t.client_fibers += w.client_fibers;
            t.local_shortcuts += w.local_shortcuts;
            t.queue_depth += w.queue_depth;
        }
        t
    }
}

#[repr(align(64))]
#[derive(Default)]
struct Padded<T>(T);

impl<T> std::ops::Deref for Padded<T> {
    type Target = T;
    fn deref(&self) -> &T {
        &self.0
    }
}

/// Owner-written counters: plain load + store, no read-modify-write.
#[derive(Default)]
struct Counters {
    tasks_issued: AtomicU64,
    tasks_served: AtomicU64,
    responses: AtomicU64,
    batches_sent: AtomicU64,
    service_passes: AtomicU64,
    context_switches: AtomicU64,
    client_fibers: AtomicU64,
    local_shortcuts: AtomicU64,
    queue_depth: AtomicU64,
    /// activity << 1 | idle
    status: AtomicU64,
    suspended: AtomicUsize,
    properties: AtomicUsize,
}

#[inline]
fn bump(c: &AtomicU64, n: u64) {
    c.store(c.load(Ordering::Relaxed) + n, Ordering::Relaxed);
}

impl Counters {
    fn snapshot(&self) -> WorkerStats {
        let l = |c: &AtomicU64| c.load(Ordering::Relaxed);
        WorkerStats {
            tasks_issued: l(&self.tasks_issued),
            tasks_served: l(&self.tasks_served),
            responses: l(&self.responses),
            batches_sent: l(&self.batches_sent),
            service_passes: l(&self.service_passes),
            context_switches: l(&self.context_switches),
            client_fibers: l(&self.client_fibers),
            local_shortcuts: l(&self.local_shortcuts),
            queue_depth: l(&self.queue_depth),
        }
    }
}

pub(crate) type Job = Box<dyn FnOnce() + Send>;

#[derive(Default)]
struct Injector {
    jobs: Mutex<VecDeque<Job>>,
    pending: AtomicBool,
}

pub(crate) struct Shared {
    pub(crate) id: u64,
    pub(crate) threads: usize,
    pub(crate) dedicated: usize,
    pub(crate) matrix: ChannelMatrix,
    cfg: RuntimeConfig,
    injectors: Box<[Padded<Injector>]>,
    counters: Box<[Padded<Counters>]>,
    handles: OnceLock<Vec<Thread>>,
    next_client: AtomicUsize,
    exit: AtomicBool,
    terminated: AtomicBool,
    errors: Mutex<Vec<String>>,
}

impl Shared {
    pub(crate) fn is_terminated(&self) -> bool {
        self.terminated.load(Ordering::Acquire) || self.exit.load(Ordering::Acquire)
    }

    pub(crate) fn inject(&self, index: usize, job: Job) {
        let inj = &self.injectors[index];
        inj.jobs.lock().unwrap().push_back(job);
        inj.pending.store(true, Ordering::Release);
        if let Some(h) = self.handles.get() {
            h[index].unpark();
        }
    }

    /// Runs `f` on worker `index` during its service pass and blocks the
    /// calling OS thread until it returns. Panics inside `f` are re-raised.
    pub(crate) fn run_blocking<R: Send + 'static>(
        &self,
        index: usize,
        f: impl FnOnce() -> R + Send + 'static,
    ) -> R {
        if self.is_terminated() {
            panic!("the runtime has shut down");
        }
        let (tx, rx) = mpsc::sync_channel(1);
        self.inject(
            index,
            Box::new(move || {
                let r = catch_unwind(AssertUnwindSafe(f));
                let _ = tx.send(r);
            }),
        );
        match rx.recv() {
            Ok(Ok(v)) => v,
            Ok(Err(p)) => resume_unwind(p),
            Err(_) => panic!("the runtime shut down before the operation completed"),
        }
    }

    pub(crate) fn record_error(&self, msg: String) {
        self.errors.lock().unwrap().push(msg);
    }

    fn client_workers(&self) -> std::ops::Range<usize> {
        if self.dedicated > 0 {
            self.dedicated..self.threads
        } else {
            0..self.threads
        }
    }

    fn pick_client(&self) -> usize {
        let r = self.client_workers();
        let n = self.next_client.fetch_add(1, Ordering::Relaxed);
        r.start + n % r.len()
    }

    fn stats(&self) -> RuntimeStats {
        RuntimeStats {
            workers: self.counters.iter().map(|c| c.snapshot()).collect(),
        }
    }

    fn injectors_empty(&self) -> bool {
        self.injectors.iter().all(|i| !i.pending.load(Ordering::Acquire))
    }

    /// All workers idle, no batch in flight, nothing injected, twice in a
    /// row with unchanged activity counters.
    fn quiescent(&self) -> bool {
        let snap = || -> Option<Vec<u64>> {
            let v: Vec<u64> = self
                .counters
                .iter()
                .map(|c| c.status.load(Ordering::SeqCst))
                .collect();
            v.iter().all(|s| s & 1 == 1).then_some(v)
        };
        let Some(a) = snap() else { return false };
        if !self.matrix.all_idle() || !self.injectors_empty() {
            return false;
        }
        thread::sleep(Duration::from_micros(300));
        let Some(b) = snap() else { return false };
        a == b && self.matrix.all_idle() && self.injectors_empty()
    }

    fn suspended_fibers(&self) -> usize {
        self.counters
            .iter()
            .map(|c| c.suspended.load(Ordering::Relaxed))
            .sum()
    }

    fn wait_quiescent(&self, deadline: Instant) -> bool {
        loop {
            if self.quiescent() && self.suspended_fibers() == 0 {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_micros(200));
        }
    }
}

fn registry() -> &'static Mutex<HashMap<u64, Weak<Shared>>> {
    static REG: OnceLock<Mutex<HashMap<u64, Weak<Shared>>>> = OnceLock::new();
    REG.get_or_init(Default::default)
}

pub(crate) fn lookup(rt: u64) -> Option<Arc<Shared>> {
    registry().lock().unwrap().get(&rt).and_then(Weak::upgrade)
}

static NEXT_RUNTIME: AtomicU64 = AtomicU64::new(1);

/// Type-erased request body executed on the trustee.
pub(crate) type Trampoline = unsafe fn(&RequestView<'_>, &mut ResponseWriter<'_>);

/// Handler for one response, run on the client thread during its service
/// pass.
pub(crate) type ReplyFn = unsafe fn(*mut (), &[MaybeUninit<u8>], Option<&str>);

pub(crate) struct Completion {
    pub(crate) shape: ResponseShape,
    pub(crate) on_reply: ReplyFn,
    pub(crate) data: *mut (),
}

struct Outstanding {
    len: usize,
    completion: Completion,
}

/// Client-side queue of requests for one trustee. Entries at the front are
/// either in the request slot (`in_flight`) or waiting to be sent.
#[derive(Default)]
struct PeerQueue {
    bytes: Vec<MaybeUninit<u8>>,
    head: usize,
    entries: VecDeque<Outstanding>,
    in_flight: usize,
}

impl PeerQueue {
    fn unsent(&self) -> usize {
        self.entries.len() - self.in_flight
    }
}

pub(crate) struct Worker {
    pub(crate) index: usize,
    pub(crate) shared: Arc<Shared>,
    pub(crate) sched: Box<Scheduler>,
    peers: Box<[RefCell<PeerQueue>]>,
    deferred: RefCell<VecDeque<Box<dyn FnOnce()>>>,
    registry: RefCell<HashMap<usize, unsafe fn(usize)>>,
    destroying: Cell<bool>,
    activity: Cell<u64>,
    published: Cell<u64>,
    last_switches: Cell<u64>,
    idle_passes: Cell<u32>,
    fruitless: Cell<u32>,
    round_robin: Cell<usize>,
}

thread_local! {
    static WORKER: Cell<*const Worker> = const { Cell::new(ptr::null()) };
}

/// Runs `f` with this thread's worker, if it is one.
pub(crate) fn with_worker<R>(f: impl FnOnce(Option<&Worker>) -> R) -> R {
    let p = WORKER.with(Cell::get);
    // SAFETY: set for the lifetime of the worker's main loop, which outlives
    // every call made from code running on that thread.
    f(unsafe { p.as_ref() })
}

/// How a delegation call reaches a trustee from the current thread.
pub(crate) enum Route<'a> {
    /// The current thread is the trustee.
    Local(&'a Worker),
    /// Another worker of the same runtime.
    Remote(&'a Worker),
    /// Not a worker of this runtime; `None` once the runtime is gone.
    Foreign(Option<Arc<Shared>>),
}

pub(crate) fn with_route<R>(t: TrusteeRef, f: impl FnOnce(Route<'_>) -> R) -> R {
    with_worker(|w| match w {
        Some(w) if w.shared.id == t.runtime_id() => {
            if w.index == t.index() {
                f(Route::Local(w))
            } else {
                f(Route::Remote(w))
            }
        }
        _ => f(Route::Foreign(lookup(t.runtime_id()).filter(|s| !s.is_terminated()))),
    })
}

impl Worker {
    fn counters(&self) -> &Counters {
        &self.shared.counters[self.index]
    }

    pub(crate) fn count_local_shortcut(&self) {
        bump(&self.counters().local_shortcuts, 1);
    }

    pub(crate) fn trustee_ref(&self, index: usize) -> TrusteeRef {
        TrusteeRef::new(self.shared.id, index)
    }

    /// Appends an encoded request to the pending queue for `trustee`.
    pub(crate) fn enqueue(
        &self,
        trustee: usize,
        code: Trampoline,
        property: usize,
        env: &[MaybeUninit<u8>],
        arg: Option<&[u8]>,
        completion: Completion,
    ) {
        debug_assert_ne!(trustee, self.index);
        let req = EncodedRequest::from_raw(code as usize, property, env, arg);
        let len = req.encoded_len();
        assert!(len <= OVERFLOW_BLOCK, "request too large for a slot block");
        let mut peer = self.peers[trustee].borrow_mut();
        let at = peer.bytes.len();
        peer.bytes.resize(at + len, MaybeUninit::uninit());
        encode_request(&req, &mut peer.bytes[at..]).expect("reserved space");
        peer.entries.push_back(Outstanding { len, completion });
        drop(peer);
        bump(&self.counters().tasks_issued, 1);
    }

    pub(crate) fn unsent_to(&self, trustee: usize) -> usize {
        self.peers[trustee].borrow().unsent()
    }

    /// Lets other fibers run while the queue for `trustee` is over the
    /// high-water mark. Only called where the caller may block.
    pub(crate) fn throttle(&self, trustee: usize) {
        while self.unsent_to(trustee) >= self.shared.cfg.high_water_mark {
            fibers::yield_now();
        }
    }

    pub(crate) fn has_deferred(&self) -> bool {
        !self.deferred.borrow().is_empty()
    }

    pub(crate) fn defer(&self, f: Box<dyn FnOnce()>) {
        self.deferred.borrow_mut().push_back(f);
    }

    pub(crate) fn register_property(&self, addr: usize, destroy: unsafe fn(usize)) {
        let mut reg = self.registry.borrow_mut();
        reg.insert(addr, destroy);
        self.counters().properties.store(reg.len(), Ordering::Relaxed);
    }

    pub(crate) fn unregister_property(&self, addr: usize) -> bool {
        let mut reg = self.registry.borrow_mut();
        let hit = reg.remove(&addr).is_some();
        self.counters().properties.store(reg.len(), Ordering::Relaxed);
        hit
    }

    /// During final teardown properties may already be gone; releases for
    /// unknown addresses are then ignored.
    pub(crate) fn property_alive(&self, addr: usize) -> bool {
        !self.destroying.get() || self.registry.borrow().contains_key(&addr)
    }

    pub(crate) fn spawn_fiber(&self, kind: FiberKind, f: Box<dyn FnOnce()>) {
        if kind == FiberKind::User {
            bump(&self.counters().client_fibers, 1);
        }
        if let Err(e) = self.sched.spawn_boxed(f) {
            panic!("failed to allocate a fiber stack: {e}");
        }
    }

    pub(crate) fn run_callback(&self, f: impl FnOnce()) {
        if let Err(p) = catch_unwind(AssertUnwindSafe(f)) {
            self.shared
                .record_error(format!("completion callback panicked: {}", panic_message(&*p)));
        }
    }

    /// Round-robin over the trustee set: dedicated trustees when present,
    /// every worker otherwise.
    pub(crate) fn next_trustee(&self) -> usize {
        let n = self.round_robin.get();
        self.round_robin.set(n + 1);
        let set = if self.shared.dedicated > 0 {
            self.shared.dedicated
        } else {
            self.shared.threads
        };
        n % set
    }

    fn service_pass(&self) -> bool {
        let c = self.counters();
        let mut worked = false;

        let inj = &self.shared.injectors[self.index];
        if inj.pending.load(Ordering::Acquire) {
            self.mark_busy();
            let jobs = {
                let mut q = inj.jobs.lock().unwrap();
                inj.pending.store(false, Ordering::Release);
                std::mem::take(&mut *q)
            };
            for job in jobs {
                job();
            }
            worked = true;
        }

        if self.has_deferred() {
            self.mark_busy();
            let jobs = std::mem::take(&mut *self.deferred.borrow_mut());
            for job in jobs {
                job();
            }
            worked = true;
        }

        let mut served = 0;
        for client in 0..self.shared.threads {
            if client == self.index {
                continue;
            }
            let pair = self.shared.matrix.pair(client, self.index);
            if pair.has_pending_batch() {
                self.mark_busy();
                served += pair.poll_serve(|req, out| {
                    // SAFETY: code words are always trampolines written by
                    // `Worker::enqueue` within this process.
                    unsafe {
                        let f: Trampoline = std::mem::transmute(req.code);
                        f(req, out)
                    }
                });
            }
        }
        if served > 0 {
            bump(&c.tasks_served, served as u64);
            worked = true;
        }

        let mut responses = 0u64;
        for trustee in 0..self.shared.threads {
            let n = self.peers[trustee].borrow().in_flight;
            if n == 0 {
                continue;
            }
            let pair = self.shared.matrix.pair(self.index, trustee);
            let Ok(mut reader) = pair.response_reader() else {
                continue;
            };
            self.mark_busy();
            for _ in 0..n {
                let done = {
                    let mut peer = self.peers[trustee].borrow_mut();
                    peer.in_flight -= 1;
                    peer.entries.pop_front().expect("in-flight entry")
                };
                let item = reader.next(done.completion.shape);
                // SAFETY: the handler matches the request that produced the
                // response; `data` was set up by the issuing call.
                unsafe { (done.completion.on_reply)(done.completion.data, item.bytes, item.fault) };
                let _ = done.len;
            }
            drop(reader);
            responses += n as u64;
        }
        if responses > 0 {
            bump(&c.responses, responses);
            worked = true;
        }

        let mut depth = 0u64;
        for trustee in 0..self.shared.threads {
            let mut peer = self.peers[trustee].borrow_mut();
            let unsent = peer.unsent();
            if unsent == 0 {
                continue;
            }
            let pair = self.shared.matrix.pair(self.index, trustee);
            if peer.in_flight == 0 && !pair.awaiting_responses() {
                let mut batch = pair.begin_batch().expect("slot is free");
                let mut off = peer.head;
                let mut n = 0;
                for e in peer.entries.iter() {
                    if !batch.try_push_encoded(&peer.bytes[off..off + e.len]) {
                        break;
                    }
                    off += e.len;
                    n += 1;
                }
                batch.commit();
                peer.in_flight = n;
                peer.head = off;
                if peer.head == peer.bytes.len() {
                    peer.bytes.clear();
                    peer.head = 0;
                } else if peer.head > 1 << 16 {
                    let h = peer.head;
                    peer.bytes.drain(..h);
                    peer.head = 0;
                }
                bump(&c.batches_sent, 1);
                worked = true;
                // An idle trustee may be parked; don't make the batch wait
                // out the park timeout.
                if self.shared.counters[trustee].status.load(Ordering::SeqCst) & 1 == 1 {
                    if let Some(h) = self.shared.handles.get() {
                        h[trustee].unpark();
                    }
                }
            }
            depth += peer.unsent() as u64;
        }
        c.queue_depth.store(depth, Ordering::Relaxed);

        bump(&c.service_passes, 1);
        let switches = self.sched.context_switches();
        if switches != self.last_switches.get() {
            c.context_switches.store(switches, Ordering::Relaxed);
            self.last_switches.set(switches);
            // Fibers ran: visible to quiescence detection, but not progress.
            self.activity.set(self.activity.get() + 1);
        }
        worked
    }

    fn mark_busy(&self) {
        self.activity.set(self.activity.get() + 1);
        let v = self.activity.get() << 1;
        self.published.set(v);
        self.counters().status.store(v, Ordering::SeqCst);
    }

    fn has_local_work(&self) -> bool {
        self.sched.ready_fibers() > 0
            || self.has_deferred()
            || self
                .peers
                .iter()
                .any(|p| !p.borrow().entries.is_empty())
    }

    fn awaiting_responses(&self) -> bool {
        self.peers.iter().any(|p| p.borrow().in_flight > 0)
    }

    fn publish_idle(&self) {
        let v = self.activity.get() << 1 | 1;
        if self.published.get() != v {
            self.published.set(v);
            let c = self.counters();
            c.suspended
                .store(self.sched.suspended_fibers(), Ordering::Relaxed);
            c.status.store(v, Ordering::SeqCst);
        }
    }

    fn idle_wait(&self) {
        let n = self.idle_passes.get();
        self.idle_passes.set(n.saturating_add(1));
        if n < 16 {
            std::hint::spin_loop();
        } else if n < 2048 {
            thread::yield_now();
        } else {
            thread::park_timeout(Duration::from_micros(200));
        }
    }

    fn run(&self) {
        loop {
            match self.sched.step() {
                Next::Ran => {}
                Next::Empty => unreachable!("service marker missing"),
                Next::Service => {
                    let worked = self.service_pass();
                    if worked || self.has_local_work() {
                        if worked {
                            self.activity.set(self.activity.get() + 1);
                            self.fruitless.set(0);
                        } else {
                            // Fibers that only poll (yield loops) would
                            // otherwise keep other threads off a shared core.
                            // While responses are outstanding the trustees
                            // may need this core right away.
                            let n = self.fruitless.get() + 1;
                            self.fruitless.set(n);
                            if n.is_multiple_of(FRUITLESS_YIELD) || self.awaiting_responses() {
                                thread::yield_now();
                            }
                        }
                        self.idle_passes.set(0);
                        if self.sched.ready_fibers() == 0 {
                            // Waiting on remote responses only.
                            thread::yield_now();
                        }
                        continue;
                    }
                    self.publish_idle();
                    if self.shared.exit.load(Ordering::Acquire) {
                        break;
                    }
                    self.idle_wait();
                }
            }
        }
    }

    fn destroy_all(&self) {
        self.destroying.set(true);
        let entries: Vec<(usize, unsafe fn(usize))> = self.registry.borrow_mut().drain().collect();
        self.counters().properties.store(0, Ordering::Relaxed);
        for (addr, destroy) in entries {
            let _g = fibers::DelegatedGuard::enter();
            // SAFETY: registry entries are live properties owned by this
            // trustee; each is removed before its destructor runs.
            if let Err(p) = catch_unwind(AssertUnwindSafe(|| unsafe { destroy(addr) })) {
                self.shared
                    .record_error(format!("property destructor panicked: {}", panic_message(&*p)));
            }
        }
    }
}

fn worker_main(shared: Arc<Shared>, index: usize, ready: mpsc::Sender<Result<(), String>>) {
    if let Some(cores) = &shared.cfg.pinning {
        let id = core_affinity::CoreId { id: cores[index] };
        if !core_affinity::set_for_current(id) {
            let _ = ready.send(Err(format!("could not pin to core {}", cores[index])));
            return;
        }
    }
    let sched = Scheduler::install(SchedulerConfig {
        stack_size: shared.cfg.stack_size,
        fiber_pool: shared.cfg.fiber_pool,
    });
    let worker = Worker {
        index,
        peers: (0..shared.threads).map(|_| Default::default()).collect(),
        shared,
        sched,
        deferred: Default::default(),
        registry: Default::default(),
        destroying: Cell::new(false),
        activity: Cell::new(0),
        published: Cell::new(u64::MAX),
        last_switches: Cell::new(0),
        idle_passes: Cell::new(0),
        fruitless: Cell::new(0),
        round_robin: Cell::new(0),
    };
    WORKER.with(|w| w.set(&worker));
    let _ = ready.send(Ok(()));
    worker.run();
    let stuck = worker.sched.abandon_all();
    if stuck > 0 {
        worker
            .shared
            .record_error(format!("worker {index}: {stuck} fiber(s) never completed"));
    }
    for p in worker.sched.take_escaped_panics() {
        worker.shared.record_error(format!("worker {index}: fiber panicked: {p}"));
    }
    WORKER.with(|w| w.set(ptr::null()));
}

/// Handle to a running runtime. Shareable across threads; dropping it shuts
/// the runtime down.
pub struct Runtime {
    shared: Arc<Shared>,
    threads: Mutex<Vec<thread::JoinHandle<()>>>,
    outcome: Mutex<Option<Result<(), Vec<String>>>>,
}

impl Runtime {
    pub fn start(cfg: RuntimeConfig) -> Result<Runtime, RuntimeError> {
        if with_worker(|w| w.is_some()) {
            return Err(RuntimeError::AlreadyRunning);
        }
        cfg.validate()?;
        let threads = cfg.worker_threads;
        let shared = Arc::new(Shared {
            id: NEXT_RUNTIME.fetch_add(1, Ordering::Relaxed),
            threads,
            dedicated: cfg.dedicated_trustees.unwrap_or(0),
            matrix: ChannelMatrix::new(threads),
            injectors: (0..threads).map(|_| Default::default()).collect(),
            counters: (0..threads).map(|_| Default::default()).collect(),
            handles: OnceLock::new(),
            next_client: AtomicUsize::new(0),
            exit: AtomicBool::new(false),
            terminated: AtomicBool::new(false),
            errors: Mutex::new(Vec::new()),
            cfg,
        });
        let (tx, rx) = mpsc::channel();
        let mut joins = Vec::with_capacity(threads);
        for index in 0..threads {
            let s = shared.clone();
            let tx = tx.clone();
            let spawned = thread::Builder::new()
                .name(format!("trust-worker-{index}"))
                .spawn(move || worker_main(s, index, tx));
            match spawned {
                Ok(j) => joins.push(j),
                Err(e) => {
                    shared.exit.store(true, Ordering::Release);
                    return Err(RuntimeError::Startup {
                        index,
                        reason: e.to_string(),
                    });
                }
            }
        }
        let _ = shared
            .handles
            .set(joins.iter().map(|j| j.thread().clone()).collect());
        let mut failure = None;
        for index in 0..threads {
            match rx.recv() {
                Ok(Ok(())) => {}
                Ok(Err(reason)) => failure = Some(RuntimeError::Startup { index, reason }),
                Err(_) => {
                    failure = Some(RuntimeError::Startup {
                        index,
                        reason: "worker exited during startup".into(),
                    })
                }
            }
        }
        if let Some(e) = failure {
            shared.exit.store(true, Ordering::Release);
            for j in joins {
                j.thread().unpark();
                let _ = j.join();
            }
            return Err(e);
        }
        registry()
            .lock()
            .unwrap()
            .insert(shared.id, Arc::downgrade(&shared));
        Ok(Runtime {
            shared,
            threads: Mutex::new(joins),
            outcome: Mutex::new(None),
        })
    }

    pub fn threads(&self) -> usize {
        self.shared.threads
    }

    pub fn dedicated_trustees(&self) -> usize {
        self.shared.dedicated
    }

    pub fn trustee_at(&self, index: usize) -> Result<TrusteeRef, RuntimeError> {
        if index >= self.shared.threads {
            return Err(RuntimeError::OutOfRange {
                index,
                threads: self.shared.threads,
            });
        }
        Ok(TrusteeRef::new(self.shared.id, index))
    }

    /// Trustees that round-robin placement uses.
    pub fn trustees(&self) -> Vec<TrusteeRef> {
        let n = if self.shared.dedicated > 0 {
            self.shared.dedicated
        } else {
            self.shared.threads
        };
        (0..n).map(|i| TrusteeRef::new(self.shared.id, i)).collect()
    }

    /// Runs `f` in a client fiber and waits for its result. Panics in `f`
    /// propagate to the caller.
    pub fn block_on<R, F>(&self, f: F) -> R
    where
        F: FnOnce() -> R + Send + 'static,
        R: Send + 'static,
    {
        let index = self.shared.client_workers().start;
        self.block_on_at(index, f)
    }

    /// Like [`Runtime::block_on`] on a chosen worker thread.
    pub fn block_on_at<R, F>(&self, index: usize, f: F) -> R
    where
        F: FnOnce() -> R + Send + 'static,
        R: Send + 'static,
    {
        if with_worker(|w| w.is_some_and(|w| w.shared.id == self.shared.id)) {
            panic!("block_on called from a worker thread of the same runtime");
        }
        match self.spawn_on(index, f).join() {
            Ok(v) => v,
            Err(JoinError::Panicked(p)) => resume_unwind(p),
            Err(e) => panic!("{e}"),
        }
    }

    /// Spawns a client fiber on worker `index`.
    pub fn spawn_on<R, F>(&self, index: usize, f: F) -> JoinHandle<R>
    where
        F: FnOnce() -> R + Send + 'static,
        R: Send + 'static,
    {
        assert!(index < self.shared.threads, "worker index out of range");
        spawn_on_worker(&self.shared, index, f)
    }

    pub fn stats(&self) -> RuntimeStats {
        self.shared.stats()
    }

    /// Drains queued work, runs the destructors of properties still alive,
    /// and joins the worker threads. Idempotent: later calls return the
    /// first outcome.
    pub fn shutdown(&self) -> Result<(), RuntimeError> {
        let mut outcome = self.outcome.lock().unwrap();
        if outcome.is_none() {
            *outcome = Some(self.shutdown_inner());
        }
        outcome
            .as_ref()
            .unwrap()
            .clone()
            .map_err(RuntimeError::Shutdown)
    }

    fn shutdown_inner(&self) -> Result<(), Vec<String>> {
        let s = &self.shared;
        let mut problems = Vec::new();
        let deadline = Instant::now() + s.cfg.drain_timeout;
        if !s.wait_quiescent(deadline) {
            problems.push(format!(
                "drain timed out with {} suspended fiber(s)",
                s.suspended_fibers()
            ));
        }
        // Destructors may delegate drops to other trustees, so destroy in
        // rounds until no trustee owns anything.
        for _ in 0..8 {
            for i in 0..s.threads {
                s.inject(
                    i,
                    Box::new(|| with_worker(|w| w.expect("worker").destroy_all())),
                );
            }
            let d = Instant::now() + s.cfg.drain_timeout;
            if !s.wait_quiescent(d) {
                break;
            }
            if s.counters.iter().all(|c| c.properties.load(Ordering::Relaxed) == 0) {
                break;
            }
        }
        s.exit.store(true, Ordering::Release);
        for j in self.threads.lock().unwrap().drain(..) {
            j.thread().unpark();
            if j.join().is_err() {
                problems.push("a worker thread panicked".into());
            }
        }
        s.terminated.store(true, Ordering::Release);
        registry().lock().unwrap().remove(&s.id);
        problems.append(&mut s.errors.lock().unwrap());
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

#[derive(Debug, Error)]
pub enum JoinError {
    #[error("fiber panicked: {}", panic_message(&**.0))]
    Panicked(Box<dyn std::any::Any + Send>),
    #[error("the runtime shut down before the fiber finished")]
    Cancelled,
}

struct JoinInner<R> {
    result: Option<Result<R, JoinError>>,
    waiter: Option<(Arc<Shared>, usize, WakeToken)>,
    finished: bool,
}

struct JoinState<R> {
    inner: Mutex<JoinInner<R>>,
    cv: Condvar,
}

impl<R> JoinState<R> {
    fn complete(&self, r: Result<R, JoinError>) {
        let mut g = self.inner.lock().unwrap();
        g.result = Some(r);
        g.finished = true;
        if let Some((shared, index, token)) = g.waiter.take() {
            let here = with_worker(|w| w.is_some_and(|w| w.shared.id == shared.id && w.index == index));
            if here {
                fibers::resume(token);
            } else {
                shared.inject(index, Box::new(move || {
                    fibers::resume(token);
                }));
            }
        }
        self.cv.notify_all();
    }
}

/// Result of a spawned fiber.
pub struct JoinHandle<R> {
    state: Arc<JoinState<R>>,
}

impl<R> JoinHandle<R> {
    fn new() -> Self {
        JoinHandle {
            state: Arc::new(JoinState {
                inner: Mutex::new(JoinInner {
                    result: None,
                    waiter: None,
                    finished: false,
                }),
                cv: Condvar::new(),
            }),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.state.inner.lock().unwrap().finished
    }

    /// Waits for the fiber. Inside a fiber this suspends; on other threads
    /// it blocks the OS thread.
    pub fn join(self) -> Result<R, JoinError> {
        let on_worker = with_worker(|w| w.map(|w| (w.shared.clone(), w.index)));
        if let Some((shared, index)) = on_worker {
            check_can_block("JoinHandle::join");
            loop {
                if let Some(r) = self.state.inner.lock().unwrap().result.take() {
                    return r;
                }
                let state = self.state.clone();
                let shared = shared.clone();
                fibers::suspend_current(move |tok| {
                    let mut g = state.inner.lock().unwrap();
                    if g.result.is_some() {
                        drop(g);
                        fibers::resume(tok);
                    } else {
                        g.waiter = Some((shared, index, tok));
                    }
                });
            }
        }
        let mut g = self.state.inner.lock().unwrap();
        loop {
            if let Some(r) = g.result.take() {
                return r;
            }
            g = self.state.cv.wait(g).unwrap();
        }
    }
}

fn fiber_body<R, F>(state: Arc<JoinState<R>>, f: F) -> impl FnOnce()
where
    F: FnOnce() -> R,
{
    move || {
        let r = catch_unwind(AssertUnwindSafe(f)).map_err(JoinError::Panicked);
        state.complete(r);
    }
}

/// Spawns a client fiber on the next client worker in round-robin order.
/// Must be called from a worker thread.
pub fn spawn<R, F>(f: F) -> JoinHandle<R>
where
    F: FnOnce() -> R + Send + 'static,
    R: Send + 'static,
{
    let shared = with_worker(|w| w.map(|w| w.shared.clone()))
        .expect("spawn must be called from a runtime worker thread");
    let index = shared.pick_client();
    spawn_on_worker(&shared, index, f)
}

fn spawn_on_worker<R, F>(shared: &Arc<Shared>, index: usize, f: F) -> JoinHandle<R>
where
    F: FnOnce() -> R + Send + 'static,
    R: Send + 'static,
{
    let handle = JoinHandle::new();
    let body = fiber_body(handle.state.clone(), f);
    let here = with_worker(|w| w.is_some_and(|w| w.shared.id == shared.id && w.index == index));
    if here {
        with_worker(|w| w.unwrap().spawn_fiber(FiberKind::User, Box::new(body)));
    } else {
        if shared.is_terminated() {
            panic!("the runtime has shut down");
        }
        shared.inject(
            index,
            Box::new(move || {
                with_worker(|w| w.expect("worker").spawn_fiber(FiberKind::User, Box::new(body)))
            }),
        );
    }
    handle
}

/// Spawns a client fiber on the current worker. The closure need not be
/// `Send`.
pub fn spawn_local<R, F>(f: F) -> JoinHandle<R>
where
    F: FnOnce() -> R + 'static,
    R: 'static,
{
    let handle = JoinHandle::new();
    let body = fiber_body(handle.state.clone(), f);
    with_worker(|w| {
        w.expect("spawn_local must be called from a runtime worker thread")
            .spawn_fiber(FiberKind::User, Box::new(body))
    });
    handle
}

/// The trustee running on the current worker thread.
///
/// # Panics
///
/// Outside a runtime worker thread.
pub fn local_trustee() -> TrusteeRef {
    with_worker(|w| {
        let w = w.expect("local_trustee must be called from a runtime worker thread");
        w.trustee_ref(w.index)
    })
}

/// Trustee `index` of the current thread's runtime.
pub fn trustee_at(index: usize) -> Result<TrusteeRef, RuntimeError> {
    with_worker(|w| {
        let w = w.expect("trustee_at must be called from a runtime worker thread");
        if index >= w.shared.threads {
            Err(RuntimeError::OutOfRange {
                index,
                threads: w.shared.threads,
            })
        } else {
            Ok(w.trustee_ref(index))
        }
    })
}

/// Next trustee in round-robin order, for spreading properties evenly.
pub fn next_trustee() -> TrusteeRef {
    with_worker(|w| {
        let w = w.expect("next_trustee must be called from a runtime worker thread");
        w.trustee_ref(w.next_trustee())
    })
}

/// Index of the current worker thread, if any.
pub fn current_worker() -> Option<usize> {
    with_worker(|w| w.map(|w| w.index))
}

/// Number of worker threads of the current thread's runtime.
pub fn worker_count() -> Option<usize> {
    with_worker(|w| w.map(|w| w.shared.threads))
}
