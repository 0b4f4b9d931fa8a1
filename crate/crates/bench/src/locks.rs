//! Lock baselines sharing one critical-section interface.
//!
//! Waiters spin with a relax hint and fall back to yielding the CPU after a
//! bounded number of rounds, so that oversubscribed runs (more threads than
//! cores) make progress when a lock holder is descheduled.

use std::cell::UnsafeCell;
use std::hint::spin_loop;
use std::ptr;
use std::sync::atomic::{AtomicBool, AtomicPtr, Ordering};
use std::sync::Mutex;

pub trait Lock<T: Send>: Send + Sync {
    fn new(value: T) -> Self;

    /// Runs `f` with exclusive access to the protected value.
    fn with<R>(&self, f: impl FnOnce(&mut T) -> R) -> R;

    fn into_inner(self) -> T;
}

/// Exponential relax-hint backoff, then `sched_yield`.
pub struct Backoff {
    round: u32,
}

impl Backoff {
    const SPIN_ROUNDS: u32 = 10;

    pub fn new() -> Self {
        Backoff { round: 0 }
    }

    pub fn snooze(&mut self) {
        if self.round < Self::SPIN_ROUNDS {
            for _ in 0..(1u32 << self.round.min(6)) {
                spin_loop();
            }
            self.round += 1;
        } else {
            std::thread::yield_now();
        }
    }
}

impl Default for Backoff {
    fn default() -> Self {
        Self::new()
    }
}

pub struct MutexLock<T>(Mutex<T>);

impl<T: Send> Lock<T> for MutexLock<T> {
    fn new(value: T) -> Self {
        MutexLock(Mutex::new(value))
    }

    fn with<R>(&self, f: impl FnOnce(&mut T) -> R) -> R {
        let mut g = self.0.lock().unwrap_or_else(|e| e.into_inner());
        f(&mut g)
    }

    fn into_inner(self) -> T {
        self.0.into_inner().unwrap_or_else(|e| e.into_inner())
    }
}

/// Test-and-test-and-set spin lock.
pub struct SpinLock<T> {
    locked: AtomicBool,
    value: UnsafeCell<T>,
}

// SAFETY: the flag grants exclusive access to `value`.
unsafe impl<T: Send> Sync for SpinLock<T> {}

struct Unlock<'a>(&'a AtomicBool);

impl Drop for Unlock<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

impl<T: Send> Lock<T> for SpinLock<T> {
    fn new(value: T) -> Self {
        SpinLock {
            locked: AtomicBool::new(false),
            value: UnsafeCell::new(value),
        }
    }

    fn with<R>(&self, f: impl FnOnce(&mut T) -> R) -> R {
        let mut backoff = Backoff::new();
        loop {
            if !self.locked.load(Ordering::Relaxed) && !self.locked.swap(true, Ordering::Acquire) {
                break;
            }
            backoff.snooze();
        }
        let _unlock = Unlock(&self.locked);
        // SAFETY: we hold the flag.
        f(unsafe { &mut *self.value.get() })
    }

    fn into_inner(self) -> T {
        self.value.into_inner()
    }
}

struct QNode {
    next: AtomicPtr<QNode>,
    waiting: AtomicBool,
}

/// Queue lock: each waiter spins on its own node, and the holder hands
/// the lock to its successor in arrival order.
pub struct McsLock<T> {
    tail: AtomicPtr<QNode>,
    value: UnsafeCell<T>,
}

// SAFETY: the queue discipline grants exclusive access to `value`.
unsafe impl<T: Send> Sync for McsLock<T> {}

struct McsRelease<'a> {
    tail: &'a AtomicPtr<QNode>,
    node: &'a QNode,
}

impl Drop for McsRelease<'_> {
    fn drop(&mut self) {
        let me = self.node as *const QNode as *mut QNode;
        let mut next = self.node.next.load(Ordering::Acquire);
        if next.is_null() {
            if self
                .tail
                .compare_exchange(me, ptr::null_mut(), Ordering::Release, Ordering::Relaxed)
                .is_ok()
            {
                return;
            }
            // A successor swapped the tail but has not linked itself yet.
            let mut backoff = Backoff::new();
            loop {
                next = self.node.next.load(Ordering::Acquire);
                if !next.is_null() {
                    break;
                }
                backoff.snooze();
            }
        }
        // SAFETY: the successor's node stays alive until it observes the
        // handoff below.
        unsafe { (*next).waiting.store(false, Ordering::Release) };
    }
}

impl<T: Send> Lock<T> for McsLock<T> {
    fn new(value: T) -> Self {
        McsLock {
            tail: AtomicPtr::new(ptr::null_mut()),
            value: UnsafeCell::new(value),
        }
    }

    fn with<R>(&self, f: impl FnOnce(&mut T) -> R) -> R {
        let node = QNode {
            next: AtomicPtr::new(ptr::null_mut()),
            waiting: AtomicBool::new(true),
        };
        let me = &node as *const QNode as *mut QNode;
        let prev = self.tail.swap(me, Ordering::AcqRel);
        if !prev.is_null() {
            // SAFETY: `prev` is queued ahead of us and cannot leave before
            // handing off to us.
            unsafe { (*prev).next.store(me, Ordering::Release) };
            let mut backoff = Backoff::new();
            while node.waiting.load(Ordering::Acquire) {
                backoff.snooze();
            }
        }
        let _release = McsRelease {
            tail: &self.tail,
            node: &node,
        };
        // SAFETY: we are at the head of the queue.
        f(unsafe { &mut *self.value.get() })
    }

    fn into_inner(self) -> T {
        self.value.into_inner()
    }
}
