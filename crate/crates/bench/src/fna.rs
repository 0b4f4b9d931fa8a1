//! Fetch-and-add throughput: threads repeatedly increment counters picked
//! from a fixed per-thread sequence.

use std::cell::{Cell, RefCell};
use std::hint::spin_loop;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Barrier};
use std::time::Instant;

use trust_core::fibers::{self, WakeToken};
use trust_core::{spawn_local, trustee_at, yield_now, Runtime, RuntimeConfig, Trust};

use crate::locks::{Lock, McsLock, MutexLock, SpinLock};
use crate::workload::{histogram, throughput, BenchError, BenchStats, Layout, Mode, Window, WorkloadConfig};

/// The critical section: one increment and one relax hint.
#[inline]
pub fn bump(counter: &mut u64) {
    *counter += 1;
    spin_loop();
}

#[repr(align(64))]
pub struct Padded<T>(pub T);

/// Runs the workload and checks every counter against the issue histogram.
pub fn run_fetch_add(cfg: &WorkloadConfig) -> Result<BenchStats, BenchError> {
    let (stats, expected, finals) = run_counted(cfg)?;
    verify(&expected, &finals)?;
    Ok(stats)
}

/// Runs the workload and returns the stats, the per-object totals the
/// generated sequences call for, and the final counter values.
pub fn run_counted(cfg: &WorkloadConfig) -> Result<(BenchStats, Vec<u64>, Vec<u64>), BenchError> {
    cfg.validate()?;
    let sequences = cfg.sequences()?;
    let expected = histogram(cfg.objects, &sequences);
    let (stats, finals) = match cfg.mode {
        Mode::MutexLock => run_locked::<MutexLock<u64>>(cfg, sequences),
        Mode::SpinLock => run_locked::<SpinLock<u64>>(cfg, sequences),
        Mode::QueueLock => run_locked::<McsLock<u64>>(cfg, sequences),
        Mode::TrustSync | Mode::TrustAsync => run_delegated(cfg, sequences)?,
    };
    Ok((stats, expected, finals))
}

pub fn verify(expected: &[u64], actual: &[u64]) -> Result<(), BenchError> {
    assert_eq!(expected.len(), actual.len());
    match expected.iter().zip(actual).position(|(e, a)| e != a) {
        None => Ok(()),
        Some(object) => Err(BenchError::SumMismatch {
            object,
            expected: expected[object],
            actual: actual[object],
        }),
    }
}

fn run_locked<L: Lock<u64>>(cfg: &WorkloadConfig, sequences: Vec<Vec<u32>>) -> (BenchStats, Vec<u64>) {
    let counters: Vec<Padded<L>> = (0..cfg.objects).map(|_| Padded(L::new(0))).collect();
    let warm = cfg.warmup_ops();
    let barrier = Barrier::new(cfg.threads);
    let windows: Vec<Window> = std::thread::scope(|s| {
        let handles: Vec<_> = sequences
            .iter()
            .map(|seq| {
                let (counters, barrier) = (&counters, &barrier);
                s.spawn(move || {
                    barrier.wait();
                    let mut start = Instant::now();
                    for (k, &o) in seq.iter().enumerate() {
                        if k == warm {
                            start = Instant::now();
                        }
                        counters[o as usize].0.with(bump);
                    }
                    Window {
                        ops: seq.len() as u64,
                        measured_ops: (seq.len() - warm.min(seq.len())) as u64,
                        start,
                        end: Instant::now(),
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let finals = counters.into_iter().map(|c| c.0.into_inner()).collect();
    (stats_from(&windows), finals)
}

fn stats_from(windows: &[Window]) -> BenchStats {
    BenchStats {
        throughput: throughput(windows),
        per_thread: windows.iter().map(|w| w.ops).collect(),
        ..Default::default()
    }
}

/// A runtime laid out for a delegation run.
pub struct Harness {
    pub rt: Runtime,
    /// Worker indices that run client fibers.
    pub clients: Vec<usize>,
    pub trustees: usize,
}

impl Harness {
    pub fn start(threads: usize, layout: Layout) -> Result<Harness, BenchError> {
        let (cfg, clients, trustees) = match layout {
            Layout::Shared => (RuntimeConfig::new(threads), (0..threads).collect(), threads),
            Layout::Dedicated(n) => (
                RuntimeConfig::new(threads + n).dedicated(n),
                (n..n + threads).collect(),
                n,
            ),
        };
        Ok(Harness {
            rt: Runtime::start(cfg)?,
            clients,
            trustees,
        })
    }

    /// Entrusts `objects` zeroed counters, round-robin over the trustees.
    pub fn counters(&self, objects: usize) -> Arc<Vec<Trust<u64>>> {
        let trustees = self.trustees;
        Arc::new(self.rt.block_on_at(self.clients[0], move || {
            (0..objects)
                .map(|i| trustee_at(i % trustees).unwrap().entrust(0u64))
                .collect::<Vec<_>>()
        }))
    }

    /// Reads every counter, then releases the handles.
    pub fn collect(&self, counters: Arc<Vec<Trust<u64>>>) -> Vec<u64> {
        self.rt.block_on_at(self.clients[0], move || {
            let n = counters.len();
            let out = Rc::new(RefCell::new(vec![0u64; n]));
            let left = Rc::new(Cell::new(n));
            for (i, t) in counters.iter().enumerate() {
                let (out, left) = (out.clone(), left.clone());
                t.apply_then(|c| *c, move |v| {
                    out.borrow_mut()[i] = v;
                    left.set(left.get() - 1);
                });
            }
            while left.get() > 0 {
                yield_now();
            }
            drop(counters);
            Rc::try_unwrap(out).unwrap().into_inner()
        })
    }

    pub fn finish(self) -> Result<(), BenchError> {
        self.rt.shutdown()?;
        Ok(())
    }
}

/// Start line for client fibers spread over several workers.
pub fn rendezvous(arrived: &AtomicUsize, parties: usize) {
    arrived.fetch_add(1, Ordering::AcqRel);
    while arrived.load(Ordering::Acquire) < parties {
        yield_now();
        std::thread::yield_now();
    }
}

/// Bounds the number of outstanding `apply_then` calls issued by one fiber.
#[derive(Default)]
pub struct Gate {
    inflight: Cell<usize>,
    parked: Cell<Option<WakeToken>>,
}

impl Gate {
    pub fn acquire(&self, cap: usize) {
        while self.inflight.get() >= cap {
            fibers::suspend_current(|t| self.parked.set(Some(t)));
        }
        self.inflight.set(self.inflight.get() + 1);
    }

    pub fn release(&self) {
        self.inflight.set(self.inflight.get() - 1);
        if let Some(t) = self.parked.take() {
            fibers::resume(t);
        }
    }

    pub fn drain(&self) {
        while self.inflight.get() > 0 {
            fibers::suspend_current(|t| self.parked.set(Some(t)));
        }
    }
}

fn run_delegated(
    cfg: &WorkloadConfig,
    sequences: Vec<Vec<u32>>,
) -> Result<(BenchStats, Vec<u64>), BenchError> {
    let h = Harness::start(cfg.threads, cfg.trustee_layout)?;
    let counters = h.counters(cfg.objects);
    let arrived = Arc::new(AtomicUsize::new(0));
    let handles: Vec<_> = sequences
        .into_iter()
        .zip(&h.clients)
        .map(|(seq, &worker)| {
            let (counters, arrived) = (counters.clone(), arrived.clone());
            let (mode, threads, fibers, cap, warm) = (
                cfg.mode,
                cfg.threads,
                cfg.fibers_per_thread,
                cfg.inflight_cap,
                cfg.warmup_ops(),
            );
            h.rt.spawn_on(worker, move || {
                rendezvous(&arrived, threads);
                match mode {
                    Mode::TrustSync => sync_client(seq, counters, fibers, warm),
                    _ => async_client(seq, counters, cap, warm),
                }
            })
        })
        .collect();
    let windows: Vec<Window> = handles
        .into_iter()
        .map(|j| j.join().expect("client fiber failed"))
        .collect();
    let finals = h.collect(counters);
    h.finish()?;
    Ok((stats_from(&windows), finals))
}

fn sync_client(seq: Vec<u32>, counters: Arc<Vec<Trust<u64>>>, fibers: usize, warm: usize) -> Window {
    let seq = Rc::new(seq);
    let done = Rc::new(Cell::new(0usize));
    let start = Rc::new(Cell::new(Instant::now()));
    let joins: Vec<_> = (0..fibers)
        .map(|f| {
            let (seq, counters, done, start) = (seq.clone(), counters.clone(), done.clone(), start.clone());
            spawn_local(move || {
                for &o in seq.iter().skip(f).step_by(fibers) {
                    counters[o as usize].apply(bump);
                    done.set(done.get() + 1);
                    if done.get() == warm {
                        start.set(Instant::now());
                    }
                }
            })
        })
        .collect();
    for j in joins {
        j.join().unwrap();
    }
    Window {
        ops: seq.len() as u64,
        measured_ops: (seq.len() - warm.min(seq.len())) as u64,
        start: start.get(),
        end: Instant::now(),
    }
}

struct AsyncClient {
    gate: Gate,
    done: Cell<usize>,
    warm: usize,
    start: Cell<Instant>,
}

impl AsyncClient {
    fn completed(&self) {
        let done = self.done.get() + 1;
        self.done.set(done);
        if done == self.warm {
            self.start.set(Instant::now());
        }
        self.gate.release();
    }
}

fn async_client(seq: Vec<u32>, counters: Arc<Vec<Trust<u64>>>, cap: usize, warm: usize) -> Window {
    let client = Rc::new(AsyncClient {
        gate: Gate::default(),
        done: Cell::new(0),
        warm,
        start: Cell::new(Instant::now()),
    });
    for &o in &seq {
        client.gate.acquire(cap);
        let c = client.clone();
        counters[o as usize].apply_then(bump, move |()| c.completed());
    }
    client.gate.drain();
    Window {
        ops: seq.len() as u64,
        measured_ops: (seq.len() - warm.min(seq.len())) as u64,
        start: client.start.get(),
        end: Instant::now(),
    }
}
