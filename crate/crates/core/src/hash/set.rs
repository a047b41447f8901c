use std::ops::ControlFlow;

use super::raw::{HashConfig, RawTable};
use super::{BlockKey, HashError};

/// Concurrent set of block keys, used for per-destination stream sets.
pub struct ConcurrentHashSet {
    raw: RawTable,
}

impl ConcurrentHashSet {
    pub fn new(config: HashConfig) -> Self {
        Self { raw: RawTable::new(config) }
    }

    /// Returns `true` if this call added the key.
    pub fn insert(&self, key: BlockKey) -> Result<bool, HashError> {
        Ok(self.raw.insert_with(key, &mut |_| {})?.inserted)
    }

    pub fn contains(&self, key: BlockKey) -> bool {
        self.raw.find(key).is_some()
    }

    pub fn position(&self, key: BlockKey) -> Option<u32> {
        self.raw.find(key)
    }

    /// Returns `true` if this call removed the key.
    pub fn remove(&self, key: BlockKey) -> bool {
        self.raw.remove_with(key, &mut |_| {})
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Remove and return up to `max_n` keys.
    ///
    /// Keys are taken in scan order from a rotating pseudo-random start, which
    /// stands in for a random subset. Concurrent extractors never return the
    /// same key: each claim goes through the locked removal path.
    pub fn extract_batch(&self, max_n: usize) -> Vec<BlockKey> {
        self.extract_matching(max_n, |_| true)
    }

    /// Like [`extract_batch`](Self::extract_batch), restricted to keys satisfying `pred`.
    pub fn extract_matching<P>(&self, max_n: usize, mut pred: P) -> Vec<BlockKey>
    where
        P: FnMut(BlockKey) -> bool,
    {
        let mut out = Vec::new();
        if max_n == 0 || self.is_empty() {
            return out;
        }
        self.raw.scan_from(self.raw.next_scan_start(), |_, key| {
            if pred(key) && self.remove(key) {
                out.push(key);
                if out.len() >= max_n {
                    return ControlFlow::Break(());
                }
            }
            ControlFlow::Continue(())
        });
        out
    }

    /// Every key present for the whole scan appears exactly once.
    pub fn snapshot_keys(&self) -> Vec<BlockKey> {
        let mut out = Vec::with_capacity(self.len());
        self.raw.scan_from(0, |_, k| {
            out.push(k);
            ControlFlow::Continue(())
        });
        out
    }

    pub fn raw(&self) -> &RawTable {
        &self.raw
    }
}
