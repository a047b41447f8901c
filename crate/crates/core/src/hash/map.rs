use std::ops::ControlFlow;

use parking_lot::RwLock;

use super::raw::{Backoff, HashConfig, RawTable, Slot};
use super::{BlockKey, HashError};

/// Concurrent map from block keys to payloads.
///
/// Payloads live in a slot array indexed like the entries. Each slot also
/// records its key so a reader that raced with removal and reuse of a
/// position never observes a foreign payload.
pub struct ConcurrentHashMap<V> {
    raw: RawTable,
    slots: Box<[RwLock<Option<(BlockKey, V)>>]>,
}

impl<V> ConcurrentHashMap<V> {
    pub fn new(config: HashConfig) -> Self {
        let raw = RawTable::new(config);
        let slots = (0..config.capacity()).map(|_| RwLock::new(None)).collect();
        Self { raw, slots }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, key: BlockKey) -> bool {
        self.raw.find(key).is_some()
    }

    pub fn position(&self, key: BlockKey) -> Option<u32> {
        self.raw.find(key)
    }

    /// Insert unless present. An existing payload is left untouched; the
    /// returned slot tells the caller where it lives so it can merge.
    pub fn insert(&self, key: BlockKey, value: V) -> Result<Slot, HashError> {
        self.insert_with(key, || value)
    }

    /// Like [`insert`](Self::insert); `make` runs only if the key is new.
    pub fn insert_with<F>(&self, key: BlockKey, make: F) -> Result<Slot, HashError>
    where
        F: FnOnce() -> V,
    {
        let mut make = Some(make);
        self.raw.insert_with(key, &mut |pos| {
            let v = (make.take().expect("payload initialised twice"))();
            *self.slots[pos as usize].write() = Some((key, v));
        })
    }

    /// Insert or overwrite. Returns `true` if the key was new.
    pub fn upsert(&self, key: BlockKey, value: V) -> Result<bool, HashError> {
        let mut value = Some(value);
        let mut backoff = Backoff::default();
        loop {
            let slot = self.raw.insert_with(key, &mut |pos| {
                let v = value.take().expect("payload initialised twice");
                *self.slots[pos as usize].write() = Some((key, v));
            })?;
            if slot.inserted {
                return Ok(true);
            }
            let mut guard = self.slots[slot.position as usize].write();
            if let Some((k, v)) = guard.as_mut() {
                if *k == key {
                    *v = value.take().expect("payload consumed");
                    return Ok(false);
                }
            }
            drop(guard);
            backoff.snooze();
        }
    }

    /// Read the payload of `key` in place.
    pub fn with<R, F>(&self, key: BlockKey, f: F) -> Option<R>
    where
        F: FnOnce(&V) -> R,
    {
        let mut backoff = Backoff::default();
        loop {
            let pos = self.raw.find(key)?;
            let guard = self.slots[pos as usize].read();
            if let Some((k, v)) = guard.as_ref() {
                if *k == key {
                    return Some(f(v));
                }
            }
            drop(guard);
            backoff.snooze();
        }
    }

    /// Update the payload of `key` in place.
    pub fn with_mut<R, F>(&self, key: BlockKey, f: F) -> Option<R>
    where
        F: FnOnce(&mut V) -> R,
    {
        let mut backoff = Backoff::default();
        loop {
            let pos = self.raw.find(key)?;
            let mut guard = self.slots[pos as usize].write();
            if let Some((k, v)) = guard.as_mut() {
                if *k == key {
                    return Some(f(v));
                }
            }
            drop(guard);
            backoff.snooze();
        }
    }

    /// Remove `key`, returning its payload.
    pub fn remove(&self, key: BlockKey) -> Option<V> {
        let mut out = None;
        self.raw.remove_with(key, &mut |pos| {
            out = self.slots[pos as usize].write().take().map(|(_, v)| v);
        });
        out
    }

    pub fn keys(&self) -> Vec<BlockKey> {
        let mut out = Vec::with_capacity(self.len());
        self.raw.scan_from(0, |_, k| {
            out.push(k);
            ControlFlow::Continue(())
        });
        out
    }

    /// Visit every entry. Entries modified during the scan may or may not be seen.
    pub fn for_each<F>(&self, mut f: F)
    where
        F: FnMut(BlockKey, &V),
    {
        self.raw.scan_from(0, |pos, key| {
            if let Some((k, v)) = self.slots[pos as usize].read().as_ref() {
                if *k == key {
                    f(key, v);
                }
            }
            ControlFlow::Continue(())
        });
    }

    pub fn raw(&self) -> &RawTable {
        &self.raw
    }
}

impl<V: Clone> ConcurrentHashMap<V> {
    pub fn get(&self, key: BlockKey) -> Option<V> {
        self.with(key, V::clone)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::thread;

    fn map() -> ConcurrentHashMap<u64> {
        ConcurrentHashMap::new(HashConfig::new(32, 128).unwrap())
    }

    #[test]
    fn insert_does_not_overwrite() {
        let m = map();
        let k = BlockKey::new(1, 2, 3);
        let first = m.insert(k, 10).unwrap();
        assert!(first.inserted);
        let second = m.insert(k, 20).unwrap();
        assert!(!second.inserted);
        assert_eq!(second.position, first.position);
        assert_eq!(m.get(k), Some(10));
    }

    #[test]
    fn upsert_overwrites_and_reports_novelty() {
        let m = map();
        let k = BlockKey::new(0, 0, 9);
        assert!(m.upsert(k, 1).unwrap());
        assert!(!m.upsert(k, 2).unwrap());
        assert_eq!(m.get(k), Some(2));
    }

    #[test]
    fn with_mut_updates_in_place() {
        let m = map();
        let k = BlockKey::new(5, 5, 5);
        m.insert(k, 1).unwrap();
        m.with_mut(k, |v| *v += 41);
        assert_eq!(m.get(k), Some(42));
        assert_eq!(m.with_mut(BlockKey::new(6, 6, 6), |v| *v), None);
    }

    #[test]
    fn remove_returns_payload() {
        let m = map();
        let k = BlockKey::new(-3, 0, 3);
        m.insert(k, 7).unwrap();
        assert_eq!(m.remove(k), Some(7));
        assert_eq!(m.remove(k), None);
        assert_eq!(m.get(k), None);
        m.raw().check_invariants().unwrap();
    }

    #[test]
    fn insert_with_runs_factory_once() {
        let m = map();
        let k = BlockKey::new(2, 2, 2);
        let mut calls = 0;
        m.insert_with(k, || {
            calls += 1;
            3
        })
        .unwrap();
        m.insert_with(k, || unreachable!("factory must not run for an existing key")).unwrap();
        assert_eq!(calls, 1);
    }

    #[test]
    fn concurrent_upserts_on_owned_keys_keep_last_value() {
        let m = Arc::new(ConcurrentHashMap::<u64>::new(HashConfig::new(16, 4096).unwrap()));
        let handles: Vec<_> = (0..8)
            .map(|t| {
                let m = Arc::clone(&m);
                thread::spawn(move || {
                    for round in 0..50u64 {
                        for i in 0..40 {
                            m.upsert(BlockKey::new(t, i, 0), round).unwrap();
                            if round % 7 == 3 {
                                m.remove(BlockKey::new(t, i, 0));
                            }
                        }
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        for t in 0..8 {
            for i in 0..40 {
                assert_eq!(m.get(BlockKey::new(t, i, 0)), Some(49));
            }
        }
        assert_eq!(m.len(), 320);
        m.raw().check_invariants().unwrap();
    }
}
