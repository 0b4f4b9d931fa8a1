//! Per-key history checker for a register store with unique written
//! values.
//!
//! Each key's history must be explainable by a serial order that respects
//! real time. With every PUT writing a distinct value the checker can map
//! each GET to the PUT it observed and test the conditions such an order
//! requires:
//!
//! * the value was written by some PUT (or is the key's initial value);
//! * that PUT was invoked before the GET returned;
//! * no other PUT ran entirely between that PUT and the GET;
//! * a GET never observes a PUT that entirely precedes the PUT observed
//!   by an earlier, non-overlapping GET.

use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Get,
    Put,
}

/// One completed operation. Times are nanoseconds on a clock shared by all
/// client threads; `invoke <= respond`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub key: u32,
    pub kind: Kind,
    /// Value written, or value observed (`None`: GET miss).
    pub value: Option<u64>,
    pub invoke: u64,
    pub respond: u64,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum Violation {
    #[error("key {key}: value {value:?} written more than once")]
    DuplicateWrite { key: u32, value: Option<u64> },
    #[error("key {key}: read {value:?}, which was never written")]
    UnknownValue { key: u32, value: Option<u64> },
    #[error("key {key}: read {value:?} before it was written")]
    FutureRead { key: u32, value: Option<u64> },
    #[error("key {key}: read {value:?} after it had been overwritten")]
    StaleRead { key: u32, value: Option<u64> },
    #[error("key {key}: read {value:?} after an earlier read observed a newer write")]
    Inversion { key: u32, value: Option<u64> },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Summary {
    pub keys: usize,
    pub reads: usize,
    pub writes: usize,
}

#[derive(Clone, Copy)]
struct Write {
    invoke: u64,
    respond: u64,
}

/// Checks every key's history. `initial` gives the value each key held
/// before the history started (`None`: absent).
pub fn check(events: &[Event], initial: impl Fn(u32) -> Option<u64>) -> Result<Summary, Violation> {
    let mut by_key: HashMap<u32, Vec<&Event>> = HashMap::new();
    for e in events {
        by_key.entry(e.key).or_default().push(e);
    }
    let mut summary = Summary {
        keys: by_key.len(),
        ..Default::default()
    };
    for (key, evs) in by_key {
        let (r, w) = check_key(key, &evs, initial(key))?;
        summary.reads += r;
        summary.writes += w;
    }
    Ok(summary)
}

fn check_key(key: u32, events: &[&Event], initial: Option<u64>) -> Result<(usize, usize), Violation> {
    let mut writes: HashMap<Option<u64>, Write> = HashMap::new();
    writes.insert(initial, Write { invoke: 0, respond: 0 });
    let mut reads = Vec::new();
    for e in events {
        match e.kind {
            Kind::Put => {
                let w = Write {
                    invoke: e.invoke,
                    respond: e.respond,
                };
                if writes.insert(e.value, w).is_some() {
                    return Err(Violation::DuplicateWrite { key, value: e.value });
                }
            }
            Kind::Get => reads.push(*e),
        }
    }

    // Latest invocation among writes finished by a given time.
    let mut finished: Vec<Write> = writes.values().copied().collect();
    finished.sort_by_key(|w| w.respond);
    let mut prefix = Vec::with_capacity(finished.len());
    let mut m = 0;
    for w in &finished {
        m = m.max(w.invoke);
        prefix.push(m);
    }
    let latest_before = |t: u64, sorted: &[u64], prefix: &[u64]| -> Option<u64> {
        let i = sorted.partition_point(|&r| r < t);
        (i > 0).then(|| prefix[i - 1])
    };
    let finished_at: Vec<u64> = finished.iter().map(|w| w.respond).collect();

    let mut observed = Vec::with_capacity(reads.len());
    for r in &reads {
        let Some(w) = writes.get(&r.value) else {
            return Err(Violation::UnknownValue { key, value: r.value });
        };
        if w.invoke > r.respond {
            return Err(Violation::FutureRead { key, value: r.value });
        }
        if latest_before(r.invoke, &finished_at, &prefix).is_some_and(|m| m > w.respond) {
            return Err(Violation::StaleRead { key, value: r.value });
        }
        observed.push((r, *w));
    }

    // Latest observed-write invocation among reads finished by a time.
    let mut by_end: Vec<(u64, u64)> = observed.iter().map(|(r, w)| (r.respond, w.invoke)).collect();
    by_end.sort_unstable();
    let ends: Vec<u64> = by_end.iter().map(|p| p.0).collect();
    let mut seen = Vec::with_capacity(by_end.len());
    let mut m = 0;
    for &(_, inv) in &by_end {
        m = m.max(inv);
        seen.push(m);
    }
    for (r, w) in &observed {
        if latest_before(r.invoke, &ends, &seen).is_some_and(|n| w.respond < n) {
            return Err(Violation::Inversion { key, value: r.value });
        }
    }
    Ok((reads.len(), writes.len() - 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn put(key: u32, v: u64, invoke: u64, respond: u64) -> Event {
        Event { key, kind: Kind::Put, value: Some(v), invoke, respond }
    }

    fn get(key: u32, v: Option<u64>, invoke: u64, respond: u64) -> Event {
        Event { key, kind: Kind::Get, value: v, invoke, respond }
    }

    #[test]
    fn serial_history_passes() {
        let h = [
            get(1, None, 1, 2),
            put(1, 10, 3, 4),
            get(1, Some(10), 5, 6),
            put(1, 11, 7, 8),
            get(1, Some(11), 9, 10),
        ];
        let s = check(&h, |_| None).unwrap();
        assert_eq!(s, Summary { keys: 1, reads: 3, writes: 2 });
    }

    #[test]
    fn concurrent_writes_may_be_seen_in_either_order() {
        for last in [10, 11] {
            let h = [put(1, 10, 1, 10), put(1, 11, 2, 9), get(1, Some(last), 11, 12)];
            assert!(check(&h, |_| None).is_ok());
        }
        // A read overlapping a write may see old or new.
        for seen in [None, Some(5)] {
            let h = [put(2, 5, 1, 10), get(2, seen, 2, 3)];
            assert!(check(&h, |_| None).is_ok());
        }
    }

    #[test]
    fn stale_read_is_caught() {
        let h = [put(1, 10, 1, 2), put(1, 11, 3, 4), get(1, Some(10), 5, 6)];
        assert_eq!(check(&h, |_| None), Err(Violation::StaleRead { key: 1, value: Some(10) }));
        let h = [put(1, 10, 1, 2), get(1, Some(7), 5, 6)];
        assert_eq!(check(&h, |_| Some(7)), Err(Violation::StaleRead { key: 1, value: Some(7) }));
    }

    #[test]
    fn future_and_unknown_reads_are_caught() {
        let h = [get(1, Some(10), 1, 2), put(1, 10, 3, 4)];
        assert_eq!(check(&h, |_| None), Err(Violation::FutureRead { key: 1, value: Some(10) }));
        let h = [get(1, Some(99), 1, 2)];
        assert_eq!(check(&h, |_| None), Err(Violation::UnknownValue { key: 1, value: Some(99) }));
    }

    #[test]
    fn new_old_inversion_is_caught() {
        // w10 precedes w11; both overlap the reads, but the second read goes
        // back to the older value after the first saw the newer one.
        let h = [
            put(1, 10, 1, 2),
            put(1, 11, 3, 20),
            get(1, Some(11), 4, 5),
            get(1, Some(10), 6, 7),
        ];
        assert_eq!(check(&h, |_| None), Err(Violation::Inversion { key: 1, value: Some(10) }));
    }

    #[test]
    fn duplicate_write_values_are_rejected() {
        let h = [put(1, 10, 1, 2), put(1, 10, 3, 4)];
        assert!(matches!(check(&h, |_| None), Err(Violation::DuplicateWrite { .. })));
    }

    #[test]
    fn keys_are_independent() {
        let h = [put(1, 10, 1, 2), put(2, 20, 1, 2), get(1, Some(10), 3, 4), get(2, Some(20), 3, 4)];
        assert_eq!(check(&h, |_| None).unwrap().keys, 2);
    }
}
