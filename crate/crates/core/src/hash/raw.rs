//! Shared retrieval / insertion / removal algorithm behind the map and set.
//!
//! Layout: `buckets` bucket entries followed by `excess` collision-list
//! entries in one array. A bucket's `offset` points at the first excess entry
//! of its collision list, each excess entry at the next one; 0 ends a list
//! (entry 0 is a bucket, so it is never a link target).
//!
//! Invariant: an occupied entry never moves and no link that a reader may be
//! following is severed. Removal of a bucket entry only clears it; removal of
//! an excess entry re-links its predecessor past it but leaves the removed
//! entry's own offset intact, so readers standing on it still reach the rest
//! of the list. The stale offset is reset when the entry is reused.
//!
//! All modifications of one collision list take the lock word of its bucket
//! entry with a try-lock; a failed try-lock makes the attempt fail and the
//! caller loops. Retrieval never locks. Entry contents are published through
//! a per-entry sequence counter and every unlink bumps a per-bucket epoch, so
//! a reader whose traversal raced with an unlink (and possibly with reuse of
//! the unlinked entry elsewhere) detects it and walks again.

use std::ops::ControlFlow;
use std::sync::atomic::{fence, AtomicI32, AtomicU32, AtomicU64, AtomicUsize, Ordering};

use super::key::{hash_key, BlockKey};
use super::stack::FreeListStack;
use super::HashError;

const LOCKED: u32 = 1;
const OCCUPIED: u32 = 2;

/// What `insert` does when an attempt loses a lock race.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InsertPolicy {
    /// Loop over non-blocking attempts until the key is present.
    #[default]
    Guaranteed,
    /// Single attempt; a lost race is reported as [`HashError::Contended`].
    /// Emulates the failure-permitting allocation of earlier voxel hashing maps.
    FailurePermitting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashConfig {
    pub buckets: u32,
    pub excess: u32,
    pub policy: InsertPolicy,
}

impl HashConfig {
    pub const DEFAULT_BUCKETS: u32 = 1 << 20;
    pub const DEFAULT_EXCESS: u32 = 1 << 20;

    pub fn new(buckets: u32, excess: u32) -> Result<Self, HashError> {
        if buckets == 0 {
            return Err(HashError::InvalidConfig("bucket count must be positive"));
        }
        if excess == 0 {
            return Err(HashError::InvalidConfig("excess capacity must be positive"));
        }
        if u64::from(buckets) + u64::from(excess) >= u64::from(u32::MAX) {
            return Err(HashError::InvalidConfig("total capacity must fit in 32 bits"));
        }
        Ok(Self { buckets, excess, policy: InsertPolicy::Guaranteed })
    }

    pub fn with_policy(mut self, policy: InsertPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn capacity(&self) -> usize {
        self.buckets as usize + self.excess as usize
    }
}

impl Default for HashConfig {
    fn default() -> Self {
        Self::new(Self::DEFAULT_BUCKETS, Self::DEFAULT_EXCESS).expect("default config is valid")
    }
}

/// Result of an insertion: where the key lives and whether this call put it there.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub position: u32,
    pub inserted: bool,
}

pub(crate) enum Attempt<T> {
    Done(T),
    Retry,
}

#[derive(Default)]
struct Entry {
    seq: AtomicU32,
    x: AtomicI32,
    y: AtomicI32,
    z: AtomicI32,
    offset: AtomicU32,
    flags: AtomicU32,
}

impl Entry {
    /// Consistent (occupied, key) snapshot.
    fn read(&self) -> Option<BlockKey> {
        let mut backoff = Backoff::default();
        loop {
            let s1 = self.seq.load(Ordering::Acquire);
            if s1 & 1 == 0 {
                let occupied = self.flags.load(Ordering::Relaxed) & OCCUPIED != 0;
                let key = BlockKey::new(
                    self.x.load(Ordering::Relaxed),
                    self.y.load(Ordering::Relaxed),
                    self.z.load(Ordering::Relaxed),
                );
                fence(Ordering::Acquire);
                if self.seq.load(Ordering::Relaxed) == s1 {
                    return occupied.then_some(key);
                }
            }
            backoff.snooze();
        }
    }

    /// Publish a new occupancy state. Caller holds the list's bucket lock.
    fn write(&self, key: Option<BlockKey>) {
        let s = self.seq.load(Ordering::Relaxed);
        self.seq.store(s.wrapping_add(1), Ordering::Relaxed);
        fence(Ordering::Release);
        match key {
            Some(k) => {
                self.x.store(k.x, Ordering::Relaxed);
                self.y.store(k.y, Ordering::Relaxed);
                self.z.store(k.z, Ordering::Relaxed);
                self.flags.fetch_or(OCCUPIED, Ordering::Relaxed);
            }
            None => {
                self.flags.fetch_and(!OCCUPIED, Ordering::Relaxed);
            }
        }
        self.seq.store(s.wrapping_add(2), Ordering::Release);
    }

    fn try_lock(&self) -> bool {
        self.flags.fetch_or(LOCKED, Ordering::Acquire) & LOCKED == 0
    }

    fn unlock(&self) {
        self.flags.fetch_and(!LOCKED, Ordering::Release);
    }
}

struct LockGuard<'a>(&'a Entry);

impl Drop for LockGuard<'_> {
    fn drop(&mut self) {
        self.0.unlock();
    }
}

/// Spin briefly, then yield; lock holders may be descheduled.
#[derive(Default)]
pub(crate) struct Backoff(u32);

impl Backoff {
    pub(crate) fn snooze(&mut self) {
        if self.0 < 6 {
            for _ in 0..(1 << self.0) {
                std::hint::spin_loop();
            }
        } else {
            std::thread::yield_now();
        }
        self.0 = self.0.saturating_add(1);
    }
}

enum Walk {
    Found { pred: Option<u32>, pos: u32 },
    Tail(u32),
}

enum Probe {
    Found(u32),
    Absent,
    Diverted,
}

pub struct RawTable {
    config: HashConfig,
    entries: Box<[Entry]>,
    epochs: Box<[AtomicU32]>,
    stack: FreeListStack,
    len: AtomicUsize,
    cursor: AtomicU64,
}

impl RawTable {
    pub fn new(config: HashConfig) -> Self {
        let entries = (0..config.capacity()).map(|_| Entry::default()).collect();
        let epochs = (0..config.buckets).map(|_| AtomicU32::new(0)).collect();
        Self {
            config,
            entries,
            epochs,
            stack: FreeListStack::full(config.excess),
            len: AtomicUsize::new(0),
            cursor: AtomicU64::new(rand::random()),
        }
    }

    pub fn config(&self) -> &HashConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.len.load(Ordering::Acquire)
    }

    pub fn free_excess(&self) -> usize {
        self.stack.len()
    }

    #[inline]
    fn bucket(&self, key: BlockKey) -> u32 {
        hash_key(key, self.config.buckets)
    }

    #[inline]
    fn entry(&self, pos: u32) -> &Entry {
        &self.entries[pos as usize]
    }

    fn probe(&self, bucket: u32, key: BlockKey) -> Probe {
        let n = self.config.buckets;
        let total = self.entries.len() as u32;
        let mut idx = bucket;
        let mut steps = 0u32;
        loop {
            let e = self.entry(idx);
            if e.read() == Some(key) {
                return Probe::Found(idx);
            }
            let next = e.offset.load(Ordering::Acquire);
            if next == 0 {
                return Probe::Absent;
            }
            if next < n || next >= total {
                return Probe::Diverted;
            }
            steps += 1;
            if steps > self.config.excess {
                return Probe::Diverted;
            }
            idx = next;
        }
    }

    /// Lock-free retrieval of the entry position holding `key`.
    pub fn find(&self, key: BlockKey) -> Option<u32> {
        let b = self.bucket(key);
        let epoch = &self.epochs[b as usize];
        let mut backoff = Backoff::default();
        loop {
            let e1 = epoch.load(Ordering::Acquire);
            match self.probe(b, key) {
                Probe::Found(pos) => return Some(pos),
                Probe::Absent if e1 & 1 == 0 => {
                    fence(Ordering::Acquire);
                    if epoch.load(Ordering::Relaxed) == e1 {
                        return None;
                    }
                }
                _ => {}
            }
            backoff.snooze();
        }
    }

    /// Exact traversal; the caller holds the bucket lock so the list is frozen.
    fn walk_locked(&self, bucket: u32, key: BlockKey) -> Walk {
        let mut pred = None;
        let mut idx = bucket;
        loop {
            let e = self.entry(idx);
            if e.read() == Some(key) {
                return Walk::Found { pred, pos: idx };
            }
            let next = e.offset.load(Ordering::Acquire);
            if next == 0 {
                return Walk::Tail(idx);
            }
            pred = Some(idx);
            idx = next;
        }
    }

    pub(crate) fn try_insert(
        &self,
        key: BlockKey,
        init: &mut dyn FnMut(u32),
    ) -> Result<Attempt<Slot>, HashError> {
        if let Some(pos) = self.find(key) {
            return Ok(Attempt::Done(Slot { position: pos, inserted: false }));
        }
        let b = self.bucket(key);
        let bucket = self.entry(b);
        if !bucket.try_lock() {
            return Ok(Attempt::Retry);
        }
        let _guard = LockGuard(bucket);
        match self.walk_locked(b, key) {
            Walk::Found { pos, .. } => Ok(Attempt::Done(Slot { position: pos, inserted: false })),
            Walk::Tail(tail) => {
                if bucket.read().is_none() {
                    init(b);
                    bucket.write(Some(key));
                    self.len.fetch_add(1, Ordering::AcqRel);
                    return Ok(Attempt::Done(Slot { position: b, inserted: true }));
                }
                let rel = self.stack.pop().ok_or(HashError::CapacityExhausted)?;
                let pos = self.config.buckets + rel;
                let e = self.entry(pos);
                // stale link left behind by an earlier removal
                e.offset.store(0, Ordering::Relaxed);
                init(pos);
                e.write(Some(key));
                self.entry(tail).offset.store(pos, Ordering::Release);
                self.len.fetch_add(1, Ordering::AcqRel);
                Ok(Attempt::Done(Slot { position: pos, inserted: true }))
            }
        }
    }

    pub fn insert_with(&self, key: BlockKey, init: &mut dyn FnMut(u32)) -> Result<Slot, HashError> {
        let mut backoff = Backoff::default();
        loop {
            match self.try_insert(key, init)? {
                Attempt::Done(slot) => return Ok(slot),
                Attempt::Retry if self.config.policy == InsertPolicy::FailurePermitting => {
                    return Err(HashError::Contended)
                }
                Attempt::Retry => backoff.snooze(),
            }
        }
    }

    pub(crate) fn try_remove(&self, key: BlockKey, take: &mut dyn FnMut(u32)) -> Attempt<bool> {
        if self.find(key).is_none() {
            return Attempt::Done(false);
        }
        let b = self.bucket(key);
        let bucket = self.entry(b);
        if !bucket.try_lock() {
            return Attempt::Retry;
        }
        let _guard = LockGuard(bucket);
        match self.walk_locked(b, key) {
            Walk::Tail(_) => Attempt::Done(false),
            Walk::Found { pred: None, pos } => {
                // bucket entry: offset and downstream links stay in place
                bucket.write(None);
                take(pos);
                self.len.fetch_sub(1, Ordering::AcqRel);
                Attempt::Done(true)
            }
            Walk::Found { pred: Some(pred), pos } => {
                let epoch = &self.epochs[b as usize];
                let s = epoch.load(Ordering::Relaxed);
                epoch.store(s.wrapping_add(1), Ordering::Relaxed);
                fence(Ordering::Release);
                let target = self.entry(pos);
                let next = target.offset.load(Ordering::Relaxed);
                self.entry(pred).offset.store(next, Ordering::Release);
                // the target keeps its offset on purpose
                target.write(None);
                epoch.store(s.wrapping_add(2), Ordering::Release);
                take(pos);
                self.stack.push(pos - self.config.buckets);
                self.len.fetch_sub(1, Ordering::AcqRel);
                Attempt::Done(true)
            }
        }
    }

    pub fn remove_with(&self, key: BlockKey, take: &mut dyn FnMut(u32)) -> bool {
        let mut backoff = Backoff::default();
        loop {
            match self.try_remove(key, take) {
                Attempt::Done(r) => return r,
                Attempt::Retry => backoff.snooze(),
            }
        }
    }

    /// Key stored at `pos`, if occupied.
    pub fn key_at(&self, pos: u32) -> Option<BlockKey> {
        self.entries.get(pos as usize).and_then(Entry::read)
    }

    /// A pseudo-random scan start, rotated on every call.
    pub fn next_scan_start(&self) -> usize {
        let mut z = self.cursor.fetch_add(0x9E37_79B9_7F4A_7C15, Ordering::Relaxed);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z % self.entries.len() as u64) as usize
    }

    /// Visit every occupied entry once, starting at `start` and wrapping.
    pub fn scan_from<F>(&self, start: usize, mut f: F)
    where
        F: FnMut(u32, BlockKey) -> ControlFlow<()>,
    {
        let total = self.entries.len();
        for i in 0..total {
            let pos = (start + i) % total;
            if let Some(k) = self.entries[pos].read() {
                if f(pos as u32, k).is_break() {
                    return;
                }
            }
        }
    }

    /// Structural self-check. Only meaningful when no operation is running.
    pub fn check_invariants(&self) -> Result<(), String> {
        let n = self.config.buckets;
        let mut seen_keys = std::collections::HashSet::new();
        let mut on_list = vec![false; self.config.excess as usize];
        let mut occupied = 0usize;
        for b in 0..n {
            let mut idx = b;
            loop {
                let e = self.entry(idx);
                if let Some(k) = e.read() {
                    occupied += 1;
                    if hash_key(k, n) != b {
                        return Err(format!("key {k:?} at {idx} is on the list of bucket {b}"));
                    }
                    if !seen_keys.insert(k) {
                        return Err(format!("key {k:?} stored twice"));
                    }
                }
                let next = e.offset.load(Ordering::Acquire);
                if next == 0 {
                    break;
                }
                if next < n {
                    return Err(format!("entry {idx} links to bucket entry {next}"));
                }
                let rel = (next - n) as usize;
                if on_list[rel] {
                    return Err(format!("excess entry {next} reachable twice"));
                }
                on_list[rel] = true;
                if self.entry(next).read().is_none() {
                    return Err(format!("unoccupied excess entry {next} still linked"));
                }
                idx = next;
            }
        }
        let reachable = on_list.iter().filter(|&&r| r).count();
        if reachable + self.stack.len() != self.config.excess as usize {
            return Err(format!(
                "free-list conservation broken: {reachable} linked + {} free != {}",
                self.stack.len(),
                self.config.excess
            ));
        }
        if occupied != self.len() {
            return Err(format!("len counter {} but {occupied} occupied entries", self.len()));
        }
        Ok(())
    }

    /// (excess entries reachable from buckets, indices on the free list)
    pub fn excess_accounting(&self) -> (usize, usize) {
        let n = self.config.buckets;
        let mut reachable = 0;
        for b in 0..n {
            let mut idx = self.entry(b).offset.load(Ordering::Acquire);
            while idx != 0 {
                reachable += 1;
                idx = self.entry(idx).offset.load(Ordering::Acquire);
            }
        }
        (reachable, self.stack.len())
    }

    /// Collision-list length of the bucket that `key` hashes to, counting occupied entries.
    pub fn list_len(&self, key: BlockKey) -> usize {
        let mut idx = self.bucket(key);
        let mut count = 0;
        loop {
            let e = self.entry(idx);
            if e.read().is_some() {
                count += 1;
            }
            idx = e.offset.load(Ordering::Acquire);
            if idx == 0 {
                return count;
            }
        }
    }
}
