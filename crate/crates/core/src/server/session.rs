use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::Sender;
use std::time::Instant;

use parking_lot::Mutex;

use crate::geometry::Pose;
use crate::hash::BlockKey;
use crate::stream::StreamSet;
use crate::wire::{ClientId, Role};

/// Request-path state; its lock orders request handling against resets.
#[derive(Default)]
pub(crate) struct SessionIo {
    /// Deletes not yet sent.
    pub pending_deletes: Vec<BlockKey>,
    /// Keys of the last response, until the next request acknowledges it.
    pub inflight: Vec<BlockKey>,
    pub inflight_deletes: Vec<BlockKey>,
}

#[derive(Default)]
pub(crate) struct Link {
    pub outbox: Option<Sender<Vec<u8>>>,
    pub generation: u64,
    pub disconnected_at: Option<Instant>,
}

#[derive(Default)]
pub(crate) struct PoseRelay {
    pub last_sent: Option<Instant>,
    /// Pose version of every peer at the last broadcast to this session.
    pub seen: HashMap<ClientId, u64>,
}

/// Everything the server keeps about one client, across reconnects.
pub struct Session {
    pub id: ClientId,
    pub role: Role,
    pub(crate) stream: Option<StreamSet>,
    pub(crate) io: Mutex<SessionIo>,
    pub(crate) link: Mutex<Link>,
    pub(crate) pose: Mutex<Option<(Pose, u64)>>,
    pub(crate) relay: Mutex<PoseRelay>,
    pub bytes_in: AtomicU64,
    pub bytes_out: AtomicU64,
    pub blocks_out: AtomicU64,
}

impl Session {
    pub(crate) fn new(id: ClientId, role: Role, stream: Option<StreamSet>) -> Self {
        Self {
            id,
            role,
            stream,
            io: Mutex::new(SessionIo::default()),
            link: Mutex::new(Link::default()),
            pose: Mutex::new(None),
            relay: Mutex::new(PoseRelay::default()),
            bytes_in: AtomicU64::new(0),
            bytes_out: AtomicU64::new(0),
            blocks_out: AtomicU64::new(0),
        }
    }

    pub fn stream(&self) -> Option<&StreamSet> {
        self.stream.as_ref()
    }

    pub fn pending(&self) -> usize {
        self.stream.as_ref().map_or(0, StreamSet::len)
    }

    pub fn is_connected(&self) -> bool {
        self.link.lock().outbox.is_some()
    }

    /// Queue an encoded frame; `false` if the client is not connected.
    pub fn send(&self, frame: Vec<u8>) -> bool {
        let n = frame.len() as u64;
        let link = self.link.lock();
        match &link.outbox {
            Some(tx) if tx.send(frame).is_ok() => {
                self.bytes_out.fetch_add(n, Ordering::Relaxed);
                true
            }
            _ => false,
        }
    }

    /// Put the unacknowledged part of the last response back in the queues.
    pub(crate) fn requeue_inflight(&self) {
        let mut io = self.io.lock();
        let keys = std::mem::take(&mut io.inflight);
        let deletes = std::mem::take(&mut io.inflight_deletes);
        io.pending_deletes.extend(deletes);
        if let Some(s) = &self.stream {
            for k in keys {
                // capacity was available when these keys were queued before
                if let Err(e) = s.insert(k) {
                    log::error!("re-queueing {k:?} failed: {e}");
                }
            }
        }
    }
}
