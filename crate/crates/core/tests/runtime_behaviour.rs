use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use trust_core::*;

fn rt(threads: usize) -> Runtime {
    Runtime::start(RuntimeConfig::new(threads)).unwrap()
}

fn panic_text(p: &(dyn std::any::Any + Send)) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_default()
}

#[test]
fn local_shortcut_sends_no_messages() {
    let rt = rt(2);
    let before = rt.stats().total();
    let v = rt.block_on(|| {
        let t = local_trustee().entrust(0u32);
        for _ in 0..100 {
            t.apply(|c| *c += 1);
        }
        t.apply(|c| *c)
    });
    let after = rt.stats().total();
    assert_eq!(v, 100);
    assert_eq!(after.tasks_issued, before.tasks_issued);
    assert_eq!(after.batches_sent, before.batches_sent);
    assert!(after.local_shortcuts >= before.local_shortcuts + 101);
    rt.shutdown().unwrap();
}

#[test]
fn apply_then_inside_body_is_allowed() {
    let rt = rt(3);
    let v = rt.block_on(|| {
        let a = trustee_at(1).unwrap().entrust(0u32);
        let b = trustee_at(2).unwrap().entrust(0u32);
        let b2 = b.clone();
        a.apply(move |x| {
            *x += 1;
            b2.apply_then(|y| *y += 10, |_| {});
        });
        // Drain: b's trustee received the nested request before this one.
        loop {
            let v = b.apply(|y| *y);
            if v == 10 {
                break v + a.apply(|x| *x);
            }
            yield_now();
        }
    });
    assert_eq!(v, 11);
    rt.shutdown().unwrap();
}

#[test]
fn many_apply_then_sum() {
    let rt = rt(2);
    let (sum, calls) = rt.block_on(|| {
        let t = trustee_at(1).unwrap().entrust(0u64);
        let calls = Rc::new(Cell::new(0u64));
        let acc = Rc::new(Cell::new(0u64));
        for i in 1..=10_000u64 {
            let (c, a) = (calls.clone(), acc.clone());
            t.apply_then(
                move |v| {
                    *v += i;
                    i
                },
                move |r| {
                    c.set(c.get() + 1);
                    a.set(a.get() + r);
                },
            );
        }
        let total = t.apply(|v| *v);
        assert_eq!(acc.get(), total);
        (total, calls.get())
    });
    assert_eq!(sum, 10_000 * 10_001 / 2);
    assert_eq!(calls, 10_000);
    rt.shutdown().unwrap();
}

#[test]
fn apply_with_key_value_insert() {
    let rt = rt(2);
    rt.block_on(|| {
        let table = trustee_at(1).unwrap().entrust(HashMap::<String, String>::new());
        let prev = table
            .apply_with(
                |m, (k, v): (String, String)| m.insert(k, v),
                ("key".to_string(), "value".to_string()),
            )
            .unwrap();
        assert_eq!(prev, None);
        let got = table
            .apply_with(|m, k: String| m.get(&k).cloned(), "key".to_string())
            .unwrap();
        assert_eq!(got.as_deref(), Some("value"));
        let n = table.apply_with(|m, b: Vec<u8>| m.len() + b.len(), Vec::new()).unwrap();
        assert_eq!(n, 1);
    });
    rt.shutdown().unwrap();
}

#[test]
fn apply_with_then_delivers_copies() {
    let rt = rt(2);
    let got = rt.block_on(|| {
        let t = trustee_at(1).unwrap().entrust(vec![1u8, 2, 3]);
        let out = Rc::new(Cell::new(None));
        let o = out.clone();
        t.apply_with_then(
            |v, extra: Vec<u8>| {
                v.extend(extra);
                v.clone()
            },
            vec![4u8],
            move |mut copy| {
                copy.push(99);
                o.set(Some(copy));
            },
        )
        .unwrap();
        let stored = t.apply(|v| v.clone());
        (out.take(), stored)
    });
    assert_eq!(got.0, Some(vec![1, 2, 3, 4, 99]));
    assert_eq!(got.1, vec![1, 2, 3, 4]);
    rt.shutdown().unwrap();
}

#[test]
fn launch_then_and_latch_log_serialize_bodies() {
    let rt = rt(3);
    let log = rt.block_on(|| {
        let state = trustee_at(0).unwrap().entrust(Latch::new(Vec::<(u32, bool)>::new()));
        let other = trustee_at(1).unwrap().entrust(0u32);
        let mut joins = Vec::new();
        for id in 0..6u32 {
            let (s, o) = (state.clone(), other.clone());
            joins.push(spawn(move || {
                for _ in 0..5 {
                    let o = o.clone();
                    s.launch(move |log| {
                        log.push((id, true));
                        // Suspends while holding the latch.
                        o.apply(|x| *x += 1);
                        log.push((id, false));
                    });
                }
            }));
        }
        for j in joins {
            j.join().unwrap();
        }
        assert_eq!(other.apply(|x| *x), 30);
        state.launch(|log| log.clone())
    });
    assert_eq!(log.len(), 60);
    for pair in log.chunks(2) {
        assert!(pair[0].1 && !pair[1].1);
        assert_eq!(pair[0].0, pair[1].0, "interleaved latch bodies: {pair:?}");
    }
    rt.shutdown().unwrap();
}

#[test]
fn latch_without_runtime() {
    let l = Latch::new(5);
    {
        let mut g = l.try_lock().unwrap();
        *g += 1;
        assert!(l.is_locked());
        assert!(l.try_lock().is_none());
    }
    assert!(!l.is_locked());
    assert_eq!(l.into_inner(), 6);
}

#[test]
fn dedicated_trustees_run_no_client_fibers() {
    let rt = Runtime::start(RuntimeConfig::new(4).dedicated(2)).unwrap();
    assert_eq!(rt.dedicated_trustees(), 2);
    let placements = rt.block_on(|| {
        let mut joins = Vec::new();
        for _ in 0..40 {
            joins.push(spawn(|| (current_worker().unwrap(), next_trustee().index())));
        }
        joins.into_iter().map(|j| j.join().unwrap()).collect::<Vec<_>>()
    });
    for (worker, trustee) in placements {
        assert!(worker >= 2, "client fiber on dedicated trustee {worker}");
        assert!(trustee < 2);
    }
    let stats = rt.stats();
    assert_eq!(stats.workers[0].client_fibers, 0);
    assert_eq!(stats.workers[1].client_fibers, 0);
    rt.shutdown().unwrap();
}

#[test]
fn trustee_at_range_and_round_robin() {
    let rt = rt(4);
    assert!(matches!(
        rt.trustee_at(4),
        Err(RuntimeError::OutOfRange { index: 4, threads: 4 })
    ));
    let hist = rt.block_on(|| {
        assert!(trustee_at(9).is_err());
        let mut hist = [0usize; 4];
        for _ in 0..400 {
            hist[next_trustee().index()] += 1;
        }
        hist
    });
    assert_eq!(hist, [100; 4]);
    assert!(local_trustee_outside_panics());
    rt.shutdown().unwrap();
}

fn local_trustee_outside_panics() -> bool {
    std::panic::catch_unwind(local_trustee).is_err()
}

#[test]
fn start_from_worker_is_rejected() {
    let rt = rt(1);
    let r = rt.block_on(|| Runtime::start(RuntimeConfig::new(1)).map(|_| ()));
    assert!(matches!(r, Err(RuntimeError::AlreadyRunning)));
    assert!(Runtime::start(RuntimeConfig::new(0)).is_err());
    rt.shutdown().unwrap();
}

#[test]
fn shutdown_drains_queued_callbacks_and_is_idempotent() {
    let rt = rt(2);
    let fired = Arc::new(AtomicUsize::new(0));
    let f = fired.clone();
    let t = rt.block_on(move || {
        let t = trustee_at(1).unwrap().entrust(0u64);
        for _ in 0..10_000 {
            let f = f.clone();
            t.apply_then(
                |v| {
                    *v += 1;
                    *v
                },
                move |_| {
                    f.fetch_add(1, Ordering::Relaxed);
                },
            );
        }
        t
    });
    rt.shutdown().unwrap();
    assert_eq!(fired.load(Ordering::SeqCst), 10_000);
    rt.shutdown().unwrap();
    drop(t);
}

#[test]
fn conservation_of_requests() {
    let rt = rt(4);
    rt.block_on(|| {
        let ts: Vec<_> = (0..4).map(|i| trustee_at(i).unwrap().entrust(0u64)).collect();
        let mut joins = Vec::new();
        for k in 0..8 {
            let ts = ts.clone();
            joins.push(spawn(move || {
                for i in 0..1000 {
                    ts[(i + k) % 4].apply(|v| *v += 1);
                }
            }));
        }
        for j in joins {
            j.join().unwrap();
        }
        let sum: u64 = ts.iter().map(|t| t.apply(|v| *v)).sum();
        assert_eq!(sum, 8000);
    });
    rt.shutdown().unwrap();
    let s = rt.stats().total();
    assert_eq!(s.tasks_issued, s.tasks_served);
    assert_eq!(s.tasks_issued, s.responses);
}

#[test]
fn panics_in_bodies_propagate_to_caller() {
    let rt = rt(2);
    let text = rt.block_on(|| {
        let t = trustee_at(1).unwrap().entrust(0u32);
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            t.apply(|_| -> u32 { panic!("boom in body") })
        }));
        let msg = panic_text(&*r.unwrap_err());
        // The property is still usable afterwards.
        t.apply(|v| *v += 1);
        assert_eq!(t.apply(|v| *v), 1);
        msg
    });
    assert!(text.contains("boom in body"), "{text}");
    rt.shutdown().unwrap();
}

#[test]
fn join_reports_fiber_panic() {
    let rt = rt(2);
    let r = rt.block_on(|| spawn(|| -> u32 { panic!("fiber failed") }).join());
    match r {
        Err(JoinError::Panicked(p)) => assert!(panic_text(&*p).contains("fiber failed")),
        other => panic!("unexpected {other:?}"),
    }
    rt.shutdown().unwrap();
}

#[test]
fn each_property_destroyed_once_under_churn() {
    let drops = Arc::new(Mutex::new(HashMap::<u32, u32>::new()));
    struct Tracked(u32, Arc<Mutex<HashMap<u32, u32>>>);
    impl Drop for Tracked {
        fn drop(&mut self) {
            *self.1.lock().unwrap().entry(self.0).or_default() += 1;
        }
    }
    let rt = rt(4);
    let d = drops.clone();
    rt.block_on(move || {
        let mut joins = Vec::new();
        for k in 0..4u32 {
            let d = d.clone();
            joins.push(spawn(move || {
                for i in 0..200u32 {
                    let t = next_trustee().entrust(Tracked(k * 1000 + i, d.clone()));
                    let c = t.clone();
                    c.apply(|x| x.0);
                    drop(t);
                    if i % 3 == 0 {
                        let cc = c.clone();
                        drop(c);
                        cc.apply_then(|x| x.0, |_| {});
                    }
                }
            }));
        }
        for j in joins {
            j.join().unwrap();
        }
    });
    rt.shutdown().unwrap();
    let drops = drops.lock().unwrap();
    assert_eq!(drops.len(), 800);
    assert!(drops.values().all(|&n| n == 1));
}

#[test]
fn properties_alive_at_shutdown_are_destroyed() {
    let drops = Arc::new(AtomicUsize::new(0));
    struct D(Arc<AtomicUsize>);
    impl Drop for D {
        fn drop(&mut self) {
            self.0.fetch_add(1, Ordering::SeqCst);
        }
    }
    let rt = rt(2);
    let d = drops.clone();
    let kept = rt.block_on(move || {
        let t = trustee_at(1).unwrap().entrust(D(d));
        std::mem::forget(t.clone());
        t
    });
    rt.shutdown().unwrap();
    assert_eq!(drops.load(Ordering::SeqCst), 1);
    drop(kept);
    assert_eq!(drops.load(Ordering::SeqCst), 1);
}
