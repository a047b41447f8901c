//! Concurrent hash map and hash set keyed by [`BlockKey`].
//!
//! Both structures share one algorithm ([`RawTable`]): guaranteed concurrent
//! retrieval, insertion and removal with key uniqueness, collision lists in an
//! excess region fed by a [`FreeListStack`]. The map adds a payload slot per
//! entry; the set stores keys only.

mod key;
mod map;
mod raw;
mod set;
mod stack;
pub mod stress;

pub use key::{hash_key, BlockKey, P1, P2, P3};
pub use map::ConcurrentHashMap;
pub use raw::{HashConfig, InsertPolicy, RawTable, Slot};
pub use set::ConcurrentHashSet;
pub use stack::FreeListStack;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum HashError {
    #[error("collision list capacity exhausted")]
    CapacityExhausted,
    #[error("insertion attempt lost a lock race")]
    Contended,
    #[error("invalid hash configuration: {0}")]
    InvalidConfig(&'static str),
}
