//! Open-loop latency: operations are issued on a fixed-rate schedule and
//! each latency is measured from the operation's scheduled issue time, so
//! falling behind the schedule shows up as queueing delay.

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::atomic::AtomicUsize;
use std::sync::{Arc, Barrier, OnceLock};
use std::time::{Duration, Instant};

use trust_core::{spawn_local, yield_now, Trust};

use crate::fna::{bump, rendezvous, Gate, Harness, Padded};
use crate::locks::{Lock, McsLock, MutexLock, SpinLock};
use crate::workload::{throughput, BenchError, BenchStats, Latency, Mode, Window, WorkloadConfig};

/// Slack between setup and the first scheduled issue.
const LEAD_IN: Duration = Duration::from_millis(2);

/// A run is saturated when it completes less than this share of its
/// offered load.
const SATURATION: f64 = 0.9;

struct Outcome {
    window: Window,
    samples: Vec<f64>,
}

pub fn run_latency(cfg: &WorkloadConfig, offered_load: f64) -> Result<BenchStats, BenchError> {
    cfg.validate()?;
    if !(offered_load > 0.0 && offered_load.is_finite()) {
        return Err(BenchError::Usage("offered load must be positive".into()));
    }
    if cfg.ops_per_thread == 0 {
        return Ok(BenchStats {
            per_thread: vec![0; cfg.threads],
            offered_load: Some(offered_load),
            ..Default::default()
        });
    }
    let interval = Duration::from_secs_f64(cfg.threads as f64 / offered_load);
    let sequences = cfg.sequences()?;
    let outcomes = match cfg.mode {
        Mode::MutexLock => paced_locked::<MutexLock<u64>>(cfg, sequences, interval),
        Mode::SpinLock => paced_locked::<SpinLock<u64>>(cfg, sequences, interval),
        Mode::QueueLock => paced_locked::<McsLock<u64>>(cfg, sequences, interval),
        Mode::TrustSync | Mode::TrustAsync => paced_delegated(cfg, sequences, interval)?,
    };
    let windows: Vec<Window> = outcomes.iter().map(|o| o.window).collect();
    let mut samples: Vec<f64> = outcomes.into_iter().flat_map(|o| o.samples).collect();
    let achieved = throughput(&windows);
    Ok(BenchStats {
        throughput: achieved,
        latency: Latency::from_samples(&mut samples),
        per_thread: windows.iter().map(|w| w.ops).collect(),
        offered_load: Some(offered_load),
        saturated: achieved < SATURATION * offered_load,
    })
}

fn schedule(t0: Instant, interval: Duration, k: usize) -> Instant {
    t0 + interval.mul_f64(k as f64)
}

/// Waits on an OS thread until `target`.
fn pace_thread(target: Instant) {
    loop {
        let now = Instant::now();
        if now >= target {
            return;
        }
        let gap = target - now;
        if gap > Duration::from_millis(2) {
            std::thread::sleep(gap - Duration::from_millis(1));
        } else {
            std::thread::yield_now();
        }
    }
}

/// Waits in a fiber until `target`, keeping the worker's service loop and
/// other threads running meanwhile.
fn pace_fiber(target: Instant) {
    while Instant::now() < target {
        yield_now();
        std::thread::yield_now();
    }
}

fn paced_locked<L: Lock<u64>>(
    cfg: &WorkloadConfig,
    sequences: Vec<Vec<u32>>,
    interval: Duration,
) -> Vec<Outcome> {
    let counters: Vec<Padded<L>> = (0..cfg.objects).map(|_| Padded(L::new(0))).collect();
    let warm = cfg.warmup_ops();
    let barrier = Barrier::new(cfg.threads);
    let start = OnceLock::new();
    std::thread::scope(|s| {
        let handles: Vec<_> = sequences
            .iter()
            .map(|seq| {
                let (counters, barrier, start) = (&counters, &barrier, &start);
                s.spawn(move || {
                    barrier.wait();
                    let t0 = *start.get_or_init(|| Instant::now() + LEAD_IN);
                    let mut samples = Vec::with_capacity(seq.len());
                    for (k, &o) in seq.iter().enumerate() {
                        let due = schedule(t0, interval, k);
                        pace_thread(due);
                        counters[o as usize].0.with(bump);
                        if k >= warm {
                            samples.push(due.elapsed().as_secs_f64());
                        }
                    }
                    Outcome {
                        window: window(seq.len(), warm, t0, interval),
                        samples,
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

fn window(ops: usize, warm: usize, t0: Instant, interval: Duration) -> Window {
    Window {
        ops: ops as u64,
        measured_ops: (ops - warm.min(ops)) as u64,
        start: schedule(t0, interval, warm.min(ops)),
        end: Instant::now(),
    }
}

fn paced_delegated(
    cfg: &WorkloadConfig,
    sequences: Vec<Vec<u32>>,
    interval: Duration,
) -> Result<Vec<Outcome>, BenchError> {
    let h = Harness::start(cfg.threads, cfg.trustee_layout)?;
    let counters = h.counters(cfg.objects);
    let arrived = Arc::new(AtomicUsize::new(0));
    let t0 = Arc::new(OnceLock::new());
    let handles: Vec<_> = sequences
        .into_iter()
        .zip(&h.clients)
        .map(|(seq, &worker)| {
            let (counters, arrived, t0) = (counters.clone(), arrived.clone(), t0.clone());
            let (mode, threads, fibers, cap, warm) = (
                cfg.mode,
                cfg.threads,
                cfg.fibers_per_thread,
                cfg.inflight_cap,
                cfg.warmup_ops(),
            );
            h.rt.spawn_on(worker, move || {
                rendezvous(&arrived, threads);
                let t0 = *t0.get_or_init(|| Instant::now() + LEAD_IN);
                let samples = match mode {
                    Mode::TrustSync => paced_sync(&seq, counters, fibers, warm, t0, interval),
                    _ => paced_async(&seq, counters, cap, warm, t0, interval),
                };
                Outcome {
                    window: window(seq.len(), warm, t0, interval),
                    samples,
                }
            })
        })
        .collect();
    let outcomes = handles
        .into_iter()
        .map(|j| j.join().expect("client fiber failed"))
        .collect();
    h.collect(counters);
    h.finish()?;
    Ok(outcomes)
}

fn paced_async(
    seq: &[u32],
    counters: Arc<Vec<Trust<u64>>>,
    cap: usize,
    warm: usize,
    t0: Instant,
    interval: Duration,
) -> Vec<f64> {
    let gate = Rc::new(Gate::default());
    let samples = Rc::new(RefCell::new(Vec::with_capacity(seq.len())));
    for (k, &o) in seq.iter().enumerate() {
        let due = schedule(t0, interval, k);
        pace_fiber(due);
        gate.acquire(cap);
        let (gate, samples) = (gate.clone(), samples.clone());
        counters[o as usize].apply_then(bump, move |()| {
            if k >= warm {
                samples.borrow_mut().push(due.elapsed().as_secs_f64());
            }
            gate.release();
        });
    }
    gate.drain();
    Rc::try_unwrap(samples).unwrap().into_inner()
}

fn paced_sync(
    seq: &[u32],
    counters: Arc<Vec<Trust<u64>>>,
    fibers: usize,
    warm: usize,
    t0: Instant,
    interval: Duration,
) -> Vec<f64> {
    let samples = Rc::new(RefCell::new(Vec::with_capacity(seq.len())));
    let next = Rc::new(Cell::new(0usize));
    let seq: Rc<[u32]> = seq.into();
    // Fibers take the next scheduled operation as they become free.
    let joins: Vec<_> = (0..fibers)
        .map(|_| {
            let (seq, counters, samples, next) = (seq.clone(), counters.clone(), samples.clone(), next.clone());
            spawn_local(move || loop {
                let k = next.get();
                if k >= seq.len() {
                    break;
                }
                next.set(k + 1);
                let due = schedule(t0, interval, k);
                pace_fiber(due);
                counters[seq[k] as usize].apply(bump);
                if k >= warm {
                    samples.borrow_mut().push(due.elapsed().as_secs_f64());
                }
            })
        })
        .collect();
    for j in joins {
        j.join().unwrap();
    }
    Rc::try_unwrap(samples).unwrap().into_inner()
}
