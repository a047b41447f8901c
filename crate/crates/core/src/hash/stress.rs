//! Randomized concurrent workloads checked against a sequential oracle.
//!
//! Phase one gives every thread its own keys, all hashed into a small table so
//! the threads share buckets and collision lists; each result must match a
//! thread-local oracle. Phase two has the threads insert and remove
//! overlapping subsets of one shared pool; the final contents must equal the
//! set-algebra result and every key must be reported new by exactly one thread.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use super::{BlockKey, ConcurrentHashMap, ConcurrentHashSet, HashConfig, HashError, InsertPolicy};

#[derive(Debug, Clone, Copy)]
pub struct StressConfig {
    pub threads: usize,
    /// Random operations per thread on its own keys.
    pub ops_per_thread: usize,
    /// Keys owned by each thread.
    pub keys_per_thread: u32,
    /// Size of the pool shared by all threads.
    pub shared_keys: u32,
    pub buckets: u32,
    pub policy: InsertPolicy,
    pub seed: u64,
}

impl Default for StressConfig {
    fn default() -> Self {
        Self {
            threads: 8,
            ops_per_thread: 120_000,
            keys_per_thread: 2048,
            shared_keys: 16_384,
            buckets: 1024,
            policy: InsertPolicy::Guaranteed,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct StressReport {
    pub threads: usize,
    pub ops: u64,
    /// Results that disagree with the oracle.
    pub mismatches: u64,
    pub first_mismatch: Option<String>,
    /// Insertions refused because of a lost lock race.
    pub contended: u64,
    /// Keys that should be present at the end but are not.
    pub lost_keys: u64,
    /// Keys present at the end that should not be.
    pub extra_keys: u64,
    pub invariant_error: Option<String>,
    pub elapsed: Duration,
}

impl StressReport {
    pub fn is_exact(&self) -> bool {
        self.mismatches == 0
            && self.contended == 0
            && self.lost_keys == 0
            && self.extra_keys == 0
            && self.invariant_error.is_none()
    }

    fn merge(&mut self, o: &StressReport) {
        self.ops += o.ops;
        self.mismatches += o.mismatches;
        self.contended += o.contended;
        self.lost_keys += o.lost_keys;
        self.extra_keys += o.extra_keys;
        if self.first_mismatch.is_none() {
            self.first_mismatch = o.first_mismatch.clone();
        }
        if self.invariant_error.is_none() {
            self.invariant_error = o.invariant_error.clone();
        }
    }

    fn mismatch(&mut self, what: impl FnOnce() -> String) {
        self.mismatches += 1;
        if self.first_mismatch.is_none() {
            self.first_mismatch = Some(what());
        }
    }
}

/// The operations both structures offer, with set payloads reported as 0.
pub trait Target: Send + Sync + 'static {
    fn build(config: HashConfig) -> Self;
    /// Insert unless present; `true` if this call added the key.
    fn insert(&self, k: BlockKey, v: u64) -> Result<bool, HashError>;
    /// Insert or overwrite; `true` if the key was new.
    fn upsert(&self, k: BlockKey, v: u64) -> Result<bool, HashError>;
    fn remove(&self, k: BlockKey) -> Option<u64>;
    fn get(&self, k: BlockKey) -> Option<u64>;
    fn keys(&self) -> Vec<BlockKey>;
    fn len(&self) -> usize;
    fn check(&self) -> Result<(), String>;
    /// Whether payloads are stored; sets keep only keys.
    const VALUED: bool;
}

impl Target for ConcurrentHashSet {
    const VALUED: bool = false;

    fn build(config: HashConfig) -> Self {
        Self::new(config)
    }
    fn insert(&self, k: BlockKey, _: u64) -> Result<bool, HashError> {
        ConcurrentHashSet::insert(self, k)
    }
    fn upsert(&self, k: BlockKey, _: u64) -> Result<bool, HashError> {
        ConcurrentHashSet::insert(self, k)
    }
    fn remove(&self, k: BlockKey) -> Option<u64> {
        ConcurrentHashSet::remove(self, k).then_some(0)
    }
    fn get(&self, k: BlockKey) -> Option<u64> {
        self.contains(k).then_some(0)
    }
    fn keys(&self) -> Vec<BlockKey> {
        self.snapshot_keys()
    }
    fn len(&self) -> usize {
        ConcurrentHashSet::len(self)
    }
    fn check(&self) -> Result<(), String> {
        self.raw().check_invariants()
    }
}

impl Target for ConcurrentHashMap<u64> {
    const VALUED: bool = true;

    fn build(config: HashConfig) -> Self {
        Self::new(config)
    }
    fn insert(&self, k: BlockKey, v: u64) -> Result<bool, HashError> {
        Ok(ConcurrentHashMap::insert(self, k, v)?.inserted)
    }
    fn upsert(&self, k: BlockKey, v: u64) -> Result<bool, HashError> {
        ConcurrentHashMap::upsert(self, k, v)
    }
    fn remove(&self, k: BlockKey) -> Option<u64> {
        ConcurrentHashMap::remove(self, k)
    }
    fn get(&self, k: BlockKey) -> Option<u64> {
        ConcurrentHashMap::get(self, k)
    }
    fn keys(&self) -> Vec<BlockKey> {
        ConcurrentHashMap::keys(self)
    }
    fn len(&self) -> usize {
        ConcurrentHashMap::len(self)
    }
    fn check(&self) -> Result<(), String> {
        self.raw().check_invariants()
    }
}

/// Distinct keys packed into a small cube so neighbouring indices collide often.
pub fn key_of(i: u32) -> BlockKey {
    BlockKey::new((i % 97) as i32 - 48, (i / 97 % 97) as i32 - 48, (i / 9409) as i32 - 8)
}

const SHARED_BASE: u32 = 1 << 22;
const FRESH_BASE: u32 = 1 << 23;

fn table_config(cfg: &StressConfig, entries: u32) -> HashConfig {
    HashConfig::new(cfg.buckets, (2 * entries).max(64)).expect("valid").with_policy(cfg.policy)
}

/// Run both phases on a fresh structure of type `T`.
pub fn run<T: Target>(cfg: &StressConfig) -> StressReport {
    let start = Instant::now();
    let mut report = StressReport { threads: cfg.threads, ..StressReport::default() };
    report.merge(&owned_phase::<T>(cfg));
    report.merge(&shared_phase::<T>(cfg));
    report.elapsed = start.elapsed();
    report
}

fn owned_phase<T: Target>(cfg: &StressConfig) -> StressReport {
    let table = Arc::new(T::build(table_config(cfg, cfg.threads as u32 * cfg.keys_per_thread)));
    let barrier = Arc::new(Barrier::new(cfg.threads));
    let handles: Vec<_> = (0..cfg.threads)
        .map(|t| {
            let (table, barrier, cfg) = (Arc::clone(&table), Arc::clone(&barrier), *cfg);
            thread::spawn(move || {
                let mut rng = StdRng::seed_from_u64(cfg.seed ^ (t as u64 + 1) * 0x9e37_79b9);
                let mut oracle: HashMap<BlockKey, u64> = HashMap::new();
                let mut r = StressReport::default();
                let own = |j: u32| key_of(t as u32 * cfg.keys_per_thread + j);
                barrier.wait();
                for op in 0..cfg.ops_per_thread {
                    let k = own(rng.gen_range(0..cfg.keys_per_thread));
                    let v = if T::VALUED { rng.gen::<u64>() } else { 0 };
                    r.ops += 1;
                    match rng.gen_range(0..100) {
                        0..=34 => match table.insert(k, v) {
                            Ok(new) => {
                                let want = !oracle.contains_key(&k);
                                oracle.entry(k).or_insert(v);
                                if new != want {
                                    r.mismatch(|| format!("thread {t} op {op}: insert {k:?} returned {new}"));
                                }
                            }
                            Err(HashError::Contended) => {
                                r.contended += 1;
                                oracle.entry(k).or_insert(v);
                            }
                            Err(e) => r.mismatch(|| format!("thread {t} op {op}: insert {k:?} failed: {e}")),
                        },
                        35..=49 => match table.upsert(k, v) {
                            Ok(new) => {
                                if new != oracle.insert(k, v).is_none() {
                                    r.mismatch(|| format!("thread {t} op {op}: upsert {k:?} returned {new}"));
                                }
                            }
                            Err(HashError::Contended) => {
                                r.contended += 1;
                                oracle.insert(k, v);
                            }
                            Err(e) => r.mismatch(|| format!("thread {t} op {op}: upsert {k:?} failed: {e}")),
                        },
                        50..=69 => {
                            let got = table.remove(k);
                            let want = oracle.remove(&k);
                            if got != want {
                                r.mismatch(|| format!("thread {t} op {op}: remove {k:?} gave {got:?}, want {want:?}"));
                            }
                        }
                        _ => {
                            let got = table.get(k);
                            let want = oracle.get(&k).copied();
                            if got != want {
                                r.mismatch(|| format!("thread {t} op {op}: get {k:?} gave {got:?}, want {want:?}"));
                            }
                        }
                    }
                }
                (r, oracle)
            })
        })
        .collect();
    let mut report = StressReport::default();
    let mut expected: HashMap<BlockKey, u64> = HashMap::new();
    for h in handles {
        let (r, oracle) = h.join().expect("worker panicked");
        report.merge(&r);
        expected.extend(oracle);
    }
    compare_final(&*table, &expected, &mut report);
    report
}

fn shared_phase<T: Target>(cfg: &StressConfig) -> StressReport {
    let fresh_per_thread = cfg.keys_per_thread;
    let table = Arc::new(T::build(table_config(cfg, cfg.shared_keys + cfg.threads as u32 * fresh_per_thread)));
    let pool: Vec<BlockKey> = (0..cfg.shared_keys).map(|j| key_of(SHARED_BASE + j)).collect();
    let mut rng = StdRng::seed_from_u64(cfg.seed.wrapping_mul(31).wrapping_add(5));
    let mut subset = |p: f64| -> Vec<BlockKey> {
        let mut s: Vec<BlockKey> = pool.iter().copied().filter(|_| rng.gen_bool(p)).collect();
        s.shuffle(&mut rng);
        s
    };
    let inserts: Vec<Vec<BlockKey>> = (0..cfg.threads).map(|_| subset(0.5)).collect();
    let removals: Vec<Vec<BlockKey>> = (0..cfg.threads).map(|_| subset(0.3)).collect();
    let mut report = StressReport::default();
    let contended = Arc::new(AtomicU64::new(0));

    // union of the insert subsets, each key claimed by exactly one thread
    let claimed = run_workers(cfg.threads, |t| {
        let (table, keys, contended) = (Arc::clone(&table), inserts[t].clone(), Arc::clone(&contended));
        move || {
            let mut won = Vec::new();
            for k in keys {
                match table.insert(k, t as u64 + 1) {
                    Ok(true) => won.push(k),
                    Ok(false) => {}
                    Err(_) => {
                        contended.fetch_add(1, Ordering::Relaxed);
                    }
                }
            }
            won
        }
    });
    report.ops += inserts.iter().map(|s| s.len() as u64).sum::<u64>();
    let union: HashSet<BlockKey> = inserts.iter().flatten().copied().collect();
    let mut owner: HashMap<BlockKey, u64> = HashMap::new();
    for (t, won) in claimed.iter().enumerate() {
        for &k in won {
            if owner.insert(k, t as u64 + 1).is_some() {
                report.mismatch(|| format!("{k:?} reported new by two threads"));
            }
        }
    }
    let expected: HashMap<BlockKey, u64> =
        union.iter().map(|&k| (k, if T::VALUED { owner.get(&k).copied().unwrap_or(0) } else { 0 })).collect();
    compare_final(&*table, &expected, &mut report);

    // remove overlapping subsets while inserting per-thread fresh keys
    let removed = run_workers(cfg.threads, |t| {
        let table = Arc::clone(&table);
        let contended = Arc::clone(&contended);
        let mut rng = StdRng::seed_from_u64(cfg.seed ^ 0xabcd ^ t as u64);
        let mut ops: Vec<(bool, BlockKey)> = removals[t].iter().map(|&k| (false, k)).collect();
        ops.extend((0..fresh_per_thread).map(|j| (true, key_of(FRESH_BASE + t as u32 * fresh_per_thread + j))));
        ops.shuffle(&mut rng);
        move || {
            let mut hits = Vec::new();
            for (insert, k) in ops {
                if insert {
                    if table.insert(k, t as u64 + 100).is_err() {
                        contended.fetch_add(1, Ordering::Relaxed);
                    }
                } else if table.remove(k).is_some() {
                    hits.push(k);
                }
            }
            hits
        }
    });
    report.ops += removals.iter().map(|s| s.len() as u64).sum::<u64>() + (cfg.threads as u32 * fresh_per_thread) as u64;
    let all_removed: HashSet<BlockKey> = removals.iter().flatten().copied().collect();
    let mut seen = HashSet::new();
    for k in removed.into_iter().flatten() {
        if !seen.insert(k) {
            report.mismatch(|| format!("{k:?} removed by two threads"));
        }
    }
    let want_removed: HashSet<BlockKey> = union.intersection(&all_removed).copied().collect();
    if seen != want_removed {
        let (got, want) = (seen.len(), want_removed.len());
        report.mismatch(|| format!("{got} successful removals, expected {want}"));
    }
    let mut expected: HashMap<BlockKey, u64> =
        expected.into_iter().filter(|(k, _)| !all_removed.contains(k)).collect();
    for t in 0..cfg.threads {
        for j in 0..fresh_per_thread {
            expected.insert(key_of(FRESH_BASE + t as u32 * fresh_per_thread + j), if T::VALUED { t as u64 + 100 } else { 0 });
        }
    }
    compare_final(&*table, &expected, &mut report);
    report.contended += contended.load(Ordering::Relaxed);
    report
}

fn run_workers<F, W, R>(threads: usize, mut make: F) -> Vec<R>
where
    F: FnMut(usize) -> W,
    W: FnOnce() -> R + Send + 'static,
    R: Send + 'static,
{
    let barrier = Arc::new(Barrier::new(threads));
    let handles: Vec<_> = (0..threads)
        .map(|t| {
            let work = make(t);
            let barrier = Arc::clone(&barrier);
            thread::spawn(move || {
                barrier.wait();
                work()
            })
        })
        .collect();
    handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
}

fn compare_final<T: Target>(table: &T, expected: &HashMap<BlockKey, u64>, report: &mut StressReport) {
    let actual: HashSet<BlockKey> = table.keys().into_iter().collect();
    for (&k, &v) in expected {
        match table.get(k) {
            None => report.lost_keys += 1,
            Some(got) if got != v => report.mismatch(|| format!("{k:?} holds {got}, want {v}")),
            Some(_) => {}
        }
    }
    report.extra_keys += actual.iter().filter(|k| !expected.contains_key(k)).count() as u64;
    if table.len() != actual.len() && report.invariant_error.is_none() {
        report.invariant_error = Some(format!("len {} but {} keys reachable", table.len(), actual.len()));
    }
    if let Err(e) = table.check() {
        report.invariant_error.get_or_insert(e);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SameKeyReport {
    pub trials: usize,
    /// Trials that did not end with exactly one entry reported new by exactly one thread.
    pub violations: usize,
    pub contended: u64,
}

/// `threads` threads insert one key into a fresh set at the same moment, `trials` times.
pub fn same_key_trials(trials: usize, threads: usize, policy: InsertPolicy) -> SameKeyReport {
    let sets: Arc<Vec<ConcurrentHashSet>> = Arc::new(
        (0..trials).map(|_| ConcurrentHashSet::new(HashConfig::new(8, 64).expect("valid").with_policy(policy))).collect(),
    );
    let contended = Arc::new(AtomicU64::new(0));
    let start = Arc::new(Barrier::new(threads));
    let wins = run_workers(threads, |_| {
        let (sets, contended, start) = (Arc::clone(&sets), Arc::clone(&contended), Arc::clone(&start));
        move || {
            let mut won = vec![false; sets.len()];
            for (i, s) in sets.iter().enumerate() {
                start.wait();
                // spread trials over buckets and list positions
                let k = key_of(i as u32);
                match s.insert(k) {
                    Ok(w) => won[i] = w,
                    Err(_) => {
                        contended.fetch_add(1, Ordering::Relaxed);
                    }
                }
            }
            won
        }
    });
    let mut violations = 0;
    for (i, s) in sets.iter().enumerate() {
        let winners = wins.iter().filter(|w| w[i]).count();
        if winners != 1 || s.len() != 1 || s.snapshot_keys() != vec![key_of(i as u32)] {
            violations += 1;
        }
    }
    SameKeyReport { trials, violations, contended: contended.load(Ordering::Relaxed) }
}
