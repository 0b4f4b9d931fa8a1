pub mod channel;
pub mod fibers;
pub mod runtime;
pub mod trust;

pub use fibers::{yield_now, DELEGATED_CONTEXT_VIOLATION};
pub use runtime::{
    current_worker, local_trustee, next_trustee, spawn, spawn_local, trustee_at, worker_count,
    JoinError, JoinHandle, Runtime, RuntimeConfig, RuntimeError, RuntimeStats, WorkerStats,
};
pub use trust::{Latch, LatchGuard, Trust, TrustError, TrusteeRef};
