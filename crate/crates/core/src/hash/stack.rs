use std::sync::atomic::{AtomicU32, AtomicU64, AtomicUsize, Ordering};

const NIL: u32 = u32::MAX;

/// Free list of excess-entry indices.
///
/// An index-linked stack: `head` packs an ABA tag with the top index, and
/// `next` links each stored index to the one below it. Push and pop are
/// lock-free; under quiescence the order is LIFO.
pub struct FreeListStack {
    head: AtomicU64,
    next: Box<[AtomicU32]>,
    len: AtomicUsize,
}

#[inline]
fn pack(tag: u32, idx: u32) -> u64 {
    (u64::from(tag) << 32) | u64::from(idx)
}

#[inline]
fn unpack(v: u64) -> (u32, u32) {
    ((v >> 32) as u32, v as u32)
}

impl FreeListStack {
    /// A stack able to hold indices `0..capacity`, initially empty.
    pub fn empty(capacity: u32) -> Self {
        assert!(capacity < NIL, "capacity too large");
        Self {
            head: AtomicU64::new(pack(0, NIL)),
            next: (0..capacity).map(|_| AtomicU32::new(NIL)).collect(),
            len: AtomicUsize::new(0),
        }
    }

    /// A stack holding every index of `0..capacity`; index 0 is popped first.
    pub fn full(capacity: u32) -> Self {
        let s = Self::empty(capacity);
        for i in (0..capacity).rev() {
            s.push(i);
        }
        s
    }

    pub fn capacity(&self) -> u32 {
        self.next.len() as u32
    }

    /// Number of stored indices. Exact only at quiescence.
    pub fn len(&self) -> usize {
        self.len.load(Ordering::Acquire)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Push an index that is not currently stored.
    pub fn push(&self, idx: u32) {
        assert!((idx as usize) < self.next.len(), "index {idx} out of range");
        let mut cur = self.head.load(Ordering::Relaxed);
        loop {
            let (tag, top) = unpack(cur);
            self.next[idx as usize].store(top, Ordering::Relaxed);
            match self.head.compare_exchange_weak(
                cur,
                pack(tag.wrapping_add(1), idx),
                Ordering::Release,
                Ordering::Relaxed,
            ) {
                Ok(_) => break,
                Err(actual) => cur = actual,
            }
        }
        self.len.fetch_add(1, Ordering::AcqRel);
    }

    /// Pop the top index, or `None` when the stack is exhausted.
    pub fn pop(&self) -> Option<u32> {
        let mut cur = self.head.load(Ordering::Acquire);
        loop {
            let (tag, top) = unpack(cur);
            if top == NIL {
                return None;
            }
            let below = self.next[top as usize].load(Ordering::Relaxed);
            match self.head.compare_exchange_weak(
                cur,
                pack(tag.wrapping_add(1), below),
                Ordering::AcqRel,
                Ordering::Acquire,
            ) {
                Ok(_) => {
                    self.len.fetch_sub(1, Ordering::AcqRel);
                    return Some(top);
                }
                Err(actual) => cur = actual,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::thread;

    #[test]
    fn push_then_pop_returns_same_index() {
        let s = FreeListStack::empty(16);
        s.push(7);
        assert_eq!(s.pop(), Some(7));
        assert_eq!(s.pop(), None);
    }

    #[test]
    fn lifo_when_quiescent() {
        let s = FreeListStack::empty(8);
        for i in [3, 1, 4] {
            s.push(i);
        }
        assert_eq!(s.pop(), Some(4));
        assert_eq!(s.pop(), Some(1));
        assert_eq!(s.pop(), Some(3));
    }

    #[test]
    fn full_stack_drains_capacity_then_reports_empty() {
        let c = 37;
        let s = FreeListStack::full(c);
        let mut seen = Vec::new();
        for _ in 0..c {
            seen.push(s.pop().expect("stack should still hold indices"));
        }
        assert_eq!(s.pop(), None);
        seen.sort_unstable();
        assert_eq!(seen, (0..c).collect::<Vec<_>>());
    }

    #[test]
    fn concurrent_push_then_pop_preserves_multiset() {
        let n = 8 * 2000u32;
        let s = Arc::new(FreeListStack::empty(n));
        let pushers: Vec<_> = (0..8)
            .map(|t| {
                let s = Arc::clone(&s);
                thread::spawn(move || {
                    for i in (t..n).step_by(8) {
                        s.push(i);
                    }
                })
            })
            .collect();
        for h in pushers {
            h.join().unwrap();
        }
        assert_eq!(s.len(), n as usize);
        let poppers: Vec<_> = (0..8)
            .map(|_| {
                let s = Arc::clone(&s);
                thread::spawn(move || {
                    let mut got = Vec::new();
                    while let Some(i) = s.pop() {
                        got.push(i);
                    }
                    got
                })
            })
            .collect();
        let mut all: Vec<u32> = poppers.into_iter().flat_map(|h| h.join().unwrap()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn interleaved_push_pop_never_duplicates() {
        let cap = 64u32;
        let s = Arc::new(FreeListStack::full(cap));
        let workers: Vec<_> = (0..8)
            .map(|_| {
                let s = Arc::clone(&s);
                thread::spawn(move || {
                    for _ in 0..20_000 {
                        if let Some(i) = s.pop() {
                            s.push(i);
                        }
                    }
                })
            })
            .collect();
        for h in workers {
            h.join().unwrap();
        }
        let mut all = Vec::new();
        while let Some(i) = s.pop() {
            all.push(i);
        }
        all.sort_unstable();
        assert_eq!(all, (0..cap).collect::<Vec<_>>());
    }
}
