use std::hash::Hasher;

use fnv::FnvHasher;

/// 64-bit FNV-1a over the raw key bytes.
pub fn key_hash(key: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(key);
    h.finish()
}

/// Fixed assignment of keys to shards and of shards to trustees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShardMap {
    shards: usize,
    trustees: usize,
}

impl ShardMap {
    pub fn new(shards: usize, trustees: usize) -> ShardMap {
        assert!(shards > 0 && trustees > 0, "shard and trustee counts must be positive");
        ShardMap { shards, trustees }
    }

    pub fn shards(&self) -> usize {
        self.shards
    }

    pub fn shard_of(&self, key: &[u8]) -> usize {
        (key_hash(key) % self.shards as u64) as usize
    }

    pub fn trustee_of(&self, shard: usize) -> usize {
        shard % self.trustees
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv1a_reference_values() {
        assert_eq!(key_hash(b""), 0xcbf29ce484222325);
        assert_eq!(key_hash(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(key_hash(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn stable_assignment() {
        let m = ShardMap::new(512, 3);
        for k in 0..1000u64 {
            let key = k.to_le_bytes();
            let s = m.shard_of(&key);
            assert!(s < 512);
            assert_eq!(s, m.shard_of(&key));
            assert_eq!(m.trustee_of(s), s % 3);
        }
    }
}
