//! TCP key-value store whose shards are entrusted to trustees, a
//! lock-based baseline server speaking the same protocol, and a pipelined
//! load client with a per-key history checker.

pub mod client;
pub mod conn;
pub mod server;
pub mod shard;
pub mod verify;
pub mod wire;

pub use client::{load_client, prefill, Client, ClientError, LoadConfig, LoadReport};
pub use server::{Server, ServerConfig, ServerError, ServerMode, Table};
pub use shard::{key_hash, ShardMap};
