//! Cooperative fibers pinned to one OS thread each.
//!
//! Every worker thread owns a [`Scheduler`]: a FIFO ready queue of fibers
//! plus one marker entry for the service pass, so the service work runs once
//! per full rotation of the queue. Fibers never migrate between threads.
//!
//! A per-thread depth counter marks delegated context. Suspending (and so
//! any blocking delegation call) while the counter is non-zero, or outside
//! any fiber, panics with a message containing
//! [`DELEGATED_CONTEXT_VIOLATION`].

use std::cell::{Cell, RefCell};
use std::collections::VecDeque;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::atomic::{AtomicU64, Ordering};

use corosensei::stack::DefaultStack;
use corosensei::{Coroutine, CoroutineResult, Yielder};
use slab::Slab;

pub const DEFAULT_STACK_SIZE: usize = 64 * 1024;
pub const DEFAULT_FIBER_POOL: usize = 256;

/// Substring of every panic raised for a blocking operation attempted where
/// the thread may not block.
pub const DELEGATED_CONTEXT_VIOLATION: &str = "delegated context violation";

type Co = Coroutine<(), (), (), DefaultStack>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FiberState {
    Ready,
    Running,
    Suspended,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum FiberKind {
    User,
    Launch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FiberId {
    key: usize,
    uid: u64,
}

/// Permission to resume one particular suspension of one fiber. Consumed on
/// use; a second token for the same suspension can never exist.
#[derive(Debug, PartialEq, Eq)]
pub struct WakeToken {
    sched: u64,
    key: usize,
    uid: u64,
    seq: u64,
}

impl WakeToken {
    pub fn scheduler_id(&self) -> u64 {
        self.sched
    }
}

struct Slot {
    uid: u64,
    state: FiberState,
    seq: u64,
    co: Option<Co>,
    yielder: *const Yielder<(), ()>,
}

#[derive(Clone, Copy)]
enum Entry {
    Service,
    Fiber(usize, u64),
}

/// What the next ready-queue entry asks the owning thread to do.
pub(crate) enum Next {
    Service,
    Ran,
    Empty,
}

#[derive(Clone, Debug)]
pub struct SchedulerConfig {
    pub stack_size: usize,
    pub fiber_pool: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            stack_size: DEFAULT_STACK_SIZE,
            fiber_pool: DEFAULT_FIBER_POOL,
        }
    }
}

static NEXT_SCHED: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static CURRENT: Cell<*const Scheduler> = const { Cell::new(ptr::null()) };
    static DEPTH: Cell<usize> = const { Cell::new(0) };
}

pub struct Scheduler {
    id: u64,
    cfg: SchedulerConfig,
    slots: RefCell<Slab<Slot>>,
    ready: RefCell<VecDeque<Entry>>,
    current: Cell<Option<usize>>,
    pool: RefCell<Vec<DefaultStack>>,
    next_uid: Cell<u64>,
    switches: Cell<u64>,
    ready_fibers: Cell<usize>,
    escaped_panics: RefCell<Vec<String>>,
}

impl Scheduler {
    /// Creates a scheduler and installs it as the current thread's scheduler.
    /// The returned box must stay alive while fibers run on this thread.
    pub fn install(cfg: SchedulerConfig) -> Box<Scheduler> {
        let sched = Box::new(Scheduler {
            id: NEXT_SCHED.fetch_add(1, Ordering::Relaxed),
            cfg,
            slots: RefCell::new(Slab::new()),
            ready: RefCell::new(VecDeque::from([Entry::Service])),
            current: Cell::new(None),
            pool: RefCell::new(Vec::new()),
            next_uid: Cell::new(1),
            switches: Cell::new(0),
            ready_fibers: Cell::new(0),
            escaped_panics: RefCell::new(Vec::new()),
        });
        CURRENT.with(|c| {
            assert!(c.get().is_null(), "a scheduler is already installed on this thread");
            c.set(&*sched);
        });
        sched
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn context_switches(&self) -> u64 {
        self.switches.get()
    }

    /// Fibers alive on this thread (any state but Done).
    pub fn live_fibers(&self) -> usize {
        self.slots.borrow().len()
    }

    pub fn ready_fibers(&self) -> usize {
        self.ready_fibers.get()
    }

    pub fn suspended_fibers(&self) -> usize {
        self.slots
            .borrow()
            .iter()
            .filter(|(_, s)| s.state == FiberState::Suspended)
            .count()
    }

    pub fn state(&self, id: FiberId) -> FiberState {
        match self.slots.borrow().get(id.key) {
            Some(s) if s.uid == id.uid => s.state,
            _ => FiberState::Done,
        }
    }

    /// Queues a new fiber at the tail of the ready queue.
    pub fn spawn(&self, f: impl FnOnce() + 'static) -> std::io::Result<FiberId> {
        self.spawn_boxed(Box::new(f))
    }

    pub(crate) fn spawn_boxed(&self, f: Box<dyn FnOnce()>) -> std::io::Result<FiberId> {
        let stack = match self.pool.borrow_mut().pop() {
            Some(s) => s,
            None => DefaultStack::new(self.cfg.stack_size)?,
        };
        let uid = self.next_uid.get();
        self.next_uid.set(uid + 1);
        let mut slots = self.slots.borrow_mut();
        let key = slots.vacant_key();
        let sched: *const Scheduler = self;
        let co = Co::with_stack(stack, move |yielder, ()| {
            // SAFETY: the scheduler outlives every fiber it runs.
            let sched = unsafe { &*sched };
            sched.slots.borrow_mut()[key].yielder = yielder;
            if let Err(p) = catch_unwind(AssertUnwindSafe(f)) {
                sched.escaped_panics.borrow_mut().push(panic_message(&*p));
            }
        });
        slots.insert(Slot {
            uid,
            state: FiberState::Ready,
            seq: 0,
            co: Some(co),
            yielder: ptr::null(),
        });
        drop(slots);
        self.ready.borrow_mut().push_back(Entry::Fiber(key, uid));
        self.ready_fibers.set(self.ready_fibers.get() + 1);
        Ok(FiberId { key, uid })
    }

    /// Pops the head of the ready queue and runs it if it is a fiber. The
    /// service marker is re-queued at the tail and reported to the caller,
    /// which runs the service pass on the thread's own stack.
    pub(crate) fn step(&self) -> Next {
        let entry = {
            let mut ready = self.ready.borrow_mut();
            match ready.pop_front() {
                Some(Entry::Service) => {
                    ready.push_back(Entry::Service);
                    return Next::Service;
                }
                Some(e) => e,
                None => return Next::Empty,
            }
        };
        if let Entry::Fiber(key, uid) = entry {
            self.run_fiber(key, uid);
        }
        Next::Ran
    }

    fn run_fiber(&self, key: usize, uid: u64) {
        let mut co = {
            let mut slots = self.slots.borrow_mut();
            let Some(slot) = slots.get_mut(key).filter(|s| s.uid == uid) else {
                return;
            };
            slot.state = FiberState::Running;
            slot.co.take().expect("ready fiber without a context")
        };
        self.ready_fibers.set(self.ready_fibers.get() - 1);
        self.current.set(Some(key));
        self.switches.set(self.switches.get() + 1);
        let result = co.resume(());
        self.current.set(None);
        match result {
            CoroutineResult::Yield(()) => {
                let mut slots = self.slots.borrow_mut();
                let slot = &mut slots[key];
                slot.co = Some(co);
                if slot.state == FiberState::Ready {
                    drop(slots);
                    self.ready.borrow_mut().push_back(Entry::Fiber(key, uid));
                    self.ready_fibers.set(self.ready_fibers.get() + 1);
                }
            }
            CoroutineResult::Return(()) => {
                self.slots.borrow_mut().remove(key);
                let mut pool = self.pool.borrow_mut();
                if pool.len() < self.cfg.fiber_pool {
                    pool.push(co.into_stack());
                }
            }
        }
    }

    /// Runs fibers until none is ready. Service markers are skipped.
    pub fn run_until_idle(&self) {
        while self.ready_fibers.get() > 0 {
            self.step();
        }
    }

    fn current_slot_yielder(&self, key: usize) -> *const Yielder<(), ()> {
        self.slots.borrow()[key].yielder
    }

    /// Hands a token for the current fiber to `register`, then suspends
    /// until the token is used with [`resume`].
    fn suspend(&self, register: impl FnOnce(WakeToken)) {
        let key = self.current.get().expect("suspend outside a fiber");
        let token = {
            let mut slots = self.slots.borrow_mut();
            let slot = &mut slots[key];
            slot.state = FiberState::Suspended;
            WakeToken {
                sched: self.id,
                key,
                uid: slot.uid,
                seq: slot.seq,
            }
        };
        register(token);
        self.switch_out(key);
    }

    fn yield_current(&self) {
        let key = self.current.get().expect("yield outside a fiber");
        self.slots.borrow_mut()[key].state = FiberState::Ready;
        self.switch_out(key);
    }

    fn switch_out(&self, key: usize) {
        let yielder = self.current_slot_yielder(key);
        // SAFETY: the yielder belongs to the running coroutine and stays valid
        // until it returns.
        unsafe { (*yielder).suspend(()) };
        self.slots.borrow_mut()[key].state = FiberState::Running;
    }

    /// Makes the suspended fiber named by `token` ready again. Returns false
    /// when the fiber is gone. Must run on the fiber's own thread.
    pub fn resume(&self, token: WakeToken) -> bool {
        assert_eq!(token.sched, self.id, "wake token used on a foreign thread");
        let mut slots = self.slots.borrow_mut();
        let Some(slot) = slots.get_mut(token.key) else {
            return false;
        };
        if slot.uid != token.uid || slot.seq != token.seq || slot.state != FiberState::Suspended {
            return false;
        }
        slot.seq += 1;
        slot.state = FiberState::Ready;
        drop(slots);
        self.ready
            .borrow_mut()
            .push_back(Entry::Fiber(token.key, token.uid));
        self.ready_fibers.set(self.ready_fibers.get() + 1);
        true
    }

    /// Panics that escaped a fiber body. Runtime wrappers catch their own
    /// panics, so this is normally empty.
    pub fn take_escaped_panics(&self) -> Vec<String> {
        std::mem::take(&mut self.escaped_panics.borrow_mut())
    }

    /// Leaks every unfinished fiber. Dropping an unfinished coroutine would
    /// unwind user code at an arbitrary suspension point.
    pub(crate) fn abandon_all(&self) -> usize {
        let mut slots = self.slots.borrow_mut();
        let n = slots.len();
        for (_, slot) in slots.iter_mut() {
            if let Some(co) = slot.co.take() {
                std::mem::forget(co);
            }
        }
        slots.clear();
        self.ready.borrow_mut().retain(|e| matches!(e, Entry::Service));
        self.ready_fibers.set(0);
        n
    }
}

impl Drop for Scheduler {
    fn drop(&mut self) {
        self.abandon_all();
        CURRENT.with(|c| {
            if std::ptr::eq(c.get(), self) {
                c.set(ptr::null());
            }
        });
    }
}

pub(crate) fn panic_message(p: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        (*s).to_owned()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".to_owned()
    }
}

/// Runs `f` with the current thread's scheduler, if any.
pub(crate) fn with_current<R>(f: impl FnOnce(Option<&Scheduler>) -> R) -> R {
    let p = CURRENT.with(Cell::get);
    // SAFETY: the pointer is installed by `Scheduler::install` and cleared
    // when the scheduler drops.
    f(unsafe { p.as_ref() })
}

pub fn current_scheduler_id() -> Option<u64> {
    with_current(|s| s.map(Scheduler::id))
}

/// True when the caller runs inside a fiber of this thread's scheduler.
pub fn in_fiber() -> bool {
    with_current(|s| s.is_some_and(|s| s.current.get().is_some()))
}

pub fn delegated_depth() -> usize {
    DEPTH.with(Cell::get)
}

/// Marks delegated context for the lifetime of the guard.
pub(crate) struct DelegatedGuard(());

impl DelegatedGuard {
    pub(crate) fn enter() -> Self {
        DEPTH.with(|d| d.set(d.get() + 1));
        DelegatedGuard(())
    }
}

impl Drop for DelegatedGuard {
    fn drop(&mut self) {
        DEPTH.with(|d| d.set(d.get() - 1));
    }
}

/// Fails unless the caller may suspend: inside a fiber and outside
/// delegated context.
pub(crate) fn check_can_block(op: &str) {
    if delegated_depth() > 0 {
        panic!("{DELEGATED_CONTEXT_VIOLATION}: {op} called inside a delegated body");
    }
    if !in_fiber() {
        panic!("{DELEGATED_CONTEXT_VIOLATION}: {op} called outside a fiber on a worker thread");
    }
}

/// Suspends the current fiber. `register` receives the token that resumes
/// it and runs before the switch, so the token cannot be used too early.
///
/// # Panics
///
/// With a delegated-context violation when called from a delegated body or
/// outside a fiber.
pub fn suspend_current(register: impl FnOnce(WakeToken)) {
    check_can_block("suspend_current");
    with_current(|s| s.expect("no scheduler").suspend(register));
}

/// Moves the current fiber to the tail of the ready queue.
///
/// # Panics
///
/// With a delegated-context violation when called from a delegated body or
/// outside a fiber.
pub fn yield_now() {
    check_can_block("yield_now");
    with_current(|s| s.expect("no scheduler").yield_current());
}

/// Resumes a fiber of the current thread. See [`Scheduler::resume`].
pub fn resume(token: WakeToken) -> bool {
    with_current(|s| s.expect("resume needs a scheduler on this thread").resume(token))
}

/// Spawns a fiber on the current thread's scheduler.
pub fn spawn_fiber(f: impl FnOnce() + 'static) -> std::io::Result<FiberId> {
    with_current(|s| s.expect("spawn_fiber needs a scheduler on this thread").spawn(f))
}
