//! Per-destination set of pending block keys.

use std::collections::{HashMap, VecDeque};

use parking_lot::Mutex;

use crate::hash::{BlockKey, ConcurrentHashSet, HashConfig, HashError};

/// Concurrent key set with a side queue remembering first-insertion order.
///
/// The queue may hold entries for keys that were since extracted by another
/// path. Each entry carries the sequence number of the insertion that queued
/// it, so a stale entry never jumps ahead of a later re-insertion.
pub struct StreamSet {
    set: ConcurrentHashSet,
    order: Mutex<Order>,
}

#[derive(Default)]
struct Order {
    queue: VecDeque<(BlockKey, u64)>,
    latest: HashMap<BlockKey, u64>,
    next_seq: u64,
}

impl StreamSet {
    pub fn new(config: HashConfig) -> Self {
        Self { set: ConcurrentHashSet::new(config), order: Mutex::new(Order::default()) }
    }

    /// Returns `true` if the key was not pending before.
    pub fn insert(&self, key: BlockKey) -> Result<bool, HashError> {
        let fresh = self.set.insert(key)?;
        if fresh {
            let mut o = self.order.lock();
            let seq = o.next_seq;
            o.next_seq += 1;
            o.latest.insert(key, seq);
            o.queue.push_back((key, seq));
            if o.queue.len() > 2 * self.set.len() + 1024 {
                o.compact(&self.set);
            }
        }
        Ok(fresh)
    }

    /// Insert, sleeping while the table is out of capacity. Returns `true` if the key was not pending.
    pub fn insert_waiting(&self, key: BlockKey) -> bool {
        let mut attempt = 0u32;
        loop {
            match self.insert(key) {
                Ok(fresh) => return fresh,
                Err(HashError::CapacityExhausted) => {
                    if attempt % 100 == 0 {
                        log::warn!("stream set full, waiting for capacity");
                    }
                    attempt += 1;
                    std::thread::sleep(std::time::Duration::from_millis(5));
                }
                Err(e) => panic!("unexpected hash error: {e}"),
            }
        }
    }

    pub fn remove(&self, key: BlockKey) -> bool {
        self.set.remove(key)
    }

    pub fn contains(&self, key: BlockKey) -> bool {
        self.set.contains(key)
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    pub fn extract_batch(&self, max_n: usize) -> Vec<BlockKey> {
        self.set.extract_batch(max_n)
    }

    pub fn extract_matching<P: FnMut(BlockKey) -> bool>(&self, max_n: usize, pred: P) -> Vec<BlockKey> {
        self.set.extract_matching(max_n, pred)
    }

    /// Up to `max_n` keys in the order they were first queued.
    pub fn extract_ordered(&self, max_n: usize) -> Vec<BlockKey> {
        let mut out = Vec::new();
        let mut o = self.order.lock();
        while out.len() < max_n {
            let Some((k, seq)) = o.queue.pop_front() else { break };
            if o.latest.get(&k) != Some(&seq) {
                continue;
            }
            o.latest.remove(&k);
            if self.set.remove(k) {
                out.push(k);
            }
        }
        let drained = o.queue.is_empty();
        drop(o);
        // keys inserted but not yet queued by a racing insert are picked up in scan order
        if out.len() < max_n && drained && !self.set.is_empty() {
            out.extend(self.set.extract_batch(max_n - out.len()));
        }
        out
    }

    pub fn snapshot_keys(&self) -> Vec<BlockKey> {
        self.set.snapshot_keys()
    }

    pub fn queue_len(&self) -> usize {
        self.order.lock().queue.len()
    }
}

impl Order {
    fn compact(&mut self, set: &ConcurrentHashSet) {
        self.latest.retain(|k, _| set.contains(*k));
        let latest = &self.latest;
        self.queue.retain(|(k, seq)| latest.get(k) == Some(seq));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set() -> StreamSet {
        StreamSet::new(HashConfig::new(256, 1024).unwrap())
    }

    #[test]
    fn duplicates_collapse() {
        let s = set();
        assert!(s.insert(BlockKey::new(1, 2, 3)).unwrap());
        assert!(!s.insert(BlockKey::new(1, 2, 3)).unwrap());
        assert_eq!(s.len(), 1);
        assert_eq!(s.queue_len(), 1);
    }

    #[test]
    fn ordered_extraction_follows_first_insertion() {
        let s = set();
        let keys: Vec<BlockKey> = (0..20).map(|i| BlockKey::new(i * 7 % 20, 0, -i)).collect();
        for &k in &keys {
            s.insert(k).unwrap();
        }
        s.insert(keys[0]).unwrap();
        assert_eq!(s.extract_ordered(5), keys[..5].to_vec());
        assert_eq!(s.extract_ordered(100), keys[5..].to_vec());
        assert!(s.is_empty());
    }

    #[test]
    fn ordered_extraction_skips_keys_taken_elsewhere() {
        let s = set();
        for i in 0..10 {
            s.insert(BlockKey::new(i, 0, 0)).unwrap();
        }
        assert!(s.remove(BlockKey::new(0, 0, 0)));
        s.extract_matching(10, |k| k.x % 2 == 1);
        let got = s.extract_ordered(10);
        assert_eq!(got, [2, 4, 6, 8].map(|x| BlockKey::new(x, 0, 0)).to_vec());
    }

    #[test]
    fn reinsert_after_extraction_requeues() {
        let s = set();
        let a = BlockKey::new(1, 0, 0);
        let b = BlockKey::new(2, 0, 0);
        s.insert(a).unwrap();
        s.insert(b).unwrap();
        assert_eq!(s.extract_batch(10).len(), 2);
        s.insert(b).unwrap();
        s.insert(a).unwrap();
        assert_eq!(s.extract_ordered(10), vec![b, a]);
    }

    #[test]
    fn queue_is_compacted() {
        let s = set();
        for round in 0..50 {
            for i in 0..100 {
                s.insert(BlockKey::new(i, round, 0)).unwrap();
            }
            s.extract_batch(100);
        }
        assert!(s.queue_len() <= 2 * s.len() + 1024 + 100);
    }
}
