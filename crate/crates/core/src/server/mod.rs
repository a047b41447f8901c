//! Central model store and per-client streaming state, independent of transport.
//!
//! Drivers ([`net`]) hand every decoded message to [`Server::handle`] and
//! forward the frames a session queues to its socket.

mod metrics;
pub mod net;
mod session;

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::Sender;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use rayon::prelude::*;

pub use metrics::MetricsWriter;
pub use session::Session;

use crate::geometry::{Frustum, Pose, BLOCK_EDGE};
use crate::hash::{BlockKey, ConcurrentHashMap, HashConfig, HashError};
use crate::mc::{affected_mc_blocks, recompute_mc_block, McBlock};
use crate::stream::StreamSet;
use crate::voxel::TsdfBlock;
use crate::wire::{
    encode, error_code, AckStatus, BlockRequest, ClientId, Codec, Hello, HelloAck, Message, PeerPose, Role,
    Stats, StatsKind, Strategy, TextureImage,
};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub voxel_size: f32,
    pub model_hash: HashConfig,
    pub stream_hash: HashConfig,
    pub codec: Codec,
    pub retention: Duration,
    /// Cap on blocks per request.
    pub max_request: u32,
    /// Send texture images to every exploration client, not only requesters.
    pub texture_fanout: bool,
    pub pose_interval: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.005,
            model_hash: HashConfig::default(),
            stream_hash: HashConfig::new(1 << 18, 1 << 18).expect("valid"),
            codec: Codec::Zstd,
            retention: Duration::from_secs(3600),
            max_request: 4096,
            texture_fanout: false,
            pose_interval: Duration::from_millis(50),
        }
    }
}

impl ServerConfig {
    /// Small tables for tests and desk-scale runs.
    pub fn small(voxel_size: f32) -> Self {
        Self {
            voxel_size,
            model_hash: HashConfig::new(1 << 16, 1 << 16).expect("valid"),
            stream_hash: HashConfig::new(1 << 15, 1 << 15).expect("valid"),
            ..Self::default()
        }
    }
}

/// A live connection bound to a session.
#[derive(Clone)]
pub struct Connection {
    pub session: Arc<Session>,
    generation: u64,
}

pub struct Server {
    cfg: ServerConfig,
    tsdf: ConcurrentHashMap<TsdfBlock>,
    mc: ConcurrentHashMap<McBlock>,
    sessions: RwLock<HashMap<ClientId, Arc<Session>>>,
    rc: Mutex<Option<Arc<Session>>>,
    texture_waiters: Mutex<Vec<ClientId>>,
    /// Serialises model mutations (batches and resets).
    model_lock: Mutex<()>,
    generations: AtomicU64,
    pose_versions: AtomicU64,
    started: Instant,
}

impl Server {
    pub fn new(cfg: ServerConfig) -> Self {
        Self {
            tsdf: ConcurrentHashMap::new(cfg.model_hash),
            mc: ConcurrentHashMap::new(cfg.model_hash),
            cfg,
            sessions: RwLock::new(HashMap::new()),
            rc: Mutex::new(None),
            texture_waiters: Mutex::new(Vec::new()),
            model_lock: Mutex::new(()),
            generations: AtomicU64::new(1),
            pose_versions: AtomicU64::new(1),
            started: Instant::now(),
        }
    }

    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    pub fn tsdf_map(&self) -> &ConcurrentHashMap<TsdfBlock> {
        &self.tsdf
    }

    pub fn mc_map(&self) -> &ConcurrentHashMap<McBlock> {
        &self.mc
    }

    pub fn session(&self, id: &ClientId) -> Option<Arc<Session>> {
        self.sessions.read().get(id).cloned()
    }

    pub fn sessions(&self) -> Vec<Arc<Session>> {
        self.sessions.read().values().cloned().collect()
    }

    fn exploration_sessions(&self) -> Vec<Arc<Session>> {
        self.sessions.read().values().filter(|s| s.role == Role::Exploration).cloned().collect()
    }

    fn frame(&self, m: &Message) -> Vec<u8> {
        encode(m, self.cfg.codec)
    }

    fn ack(&self, status: AckStatus, resumed: bool, pending: u32) -> Vec<u8> {
        self.frame(&Message::HelloAck(HelloAck { status, resumed, pending }))
    }

    /// Negotiate a new connection. On rejection the returned frame is the error ack to send before closing.
    pub fn connect(&self, hello: &Hello, outbox: Sender<Vec<u8>>) -> Result<Connection, Vec<u8>> {
        let Some(role) = Role::from_u8(hello.role) else {
            return Err(self.ack(AckStatus::BadRole, false, 0));
        };
        if hello.block_edge as i32 != BLOCK_EDGE || (hello.voxel_size - self.cfg.voxel_size).abs() > 1e-7 {
            return Err(self.ack(AckStatus::ConfigMismatch, false, 0));
        }
        let now = Instant::now();
        let (session, resumed, fresh) = {
            let mut sessions = self.sessions.write();
            let existing = sessions.get(&hello.client_id).cloned().filter(|s| {
                let link = s.link.lock();
                let expired = link.disconnected_at.is_some_and(|t| now.duration_since(t) > self.cfg.retention);
                s.role == role && !expired
            });
            match existing {
                Some(s) => (s, true, false),
                None => {
                    let stream = (role == Role::Exploration).then(|| StreamSet::new(self.cfg.stream_hash));
                    let s = Arc::new(Session::new(hello.client_id, role, stream));
                    sessions.insert(hello.client_id, Arc::clone(&s));
                    (s, false, true)
                }
            }
        };
        if resumed {
            // the previous connection may not have been torn down yet
            session.requeue_inflight();
        }
        let generation = self.generations.fetch_add(1, Ordering::Relaxed);
        {
            let mut link = session.link.lock();
            link.outbox = Some(outbox);
            link.generation = generation;
            link.disconnected_at = None;
        }
        if fresh {
            if let Some(stream) = session.stream() {
                // registered first, so concurrent updates are not missed
                for k in self.mc.keys() {
                    stream.insert_waiting(k);
                }
            }
        }
        if role == Role::Reconstruction {
            *self.rc.lock() = Some(Arc::clone(&session));
        }
        log::info!(
            "{:?} client {} connected (resumed: {resumed}, pending: {})",
            role,
            hex_id(&hello.client_id),
            session.pending()
        );
        session.send(self.ack(AckStatus::Ok, resumed, session.pending() as u32));
        Ok(Connection { session, generation })
    }

    /// Tear down a connection; the session is kept for the retention window.
    pub fn disconnect(&self, conn: &Connection) {
        {
            let mut link = conn.session.link.lock();
            if link.generation != conn.generation {
                return;
            }
            link.outbox = None;
            link.disconnected_at = Some(Instant::now());
        }
        conn.session.requeue_inflight();
        self.texture_waiters.lock().retain(|id| *id != conn.session.id);
        let mut rc = self.rc.lock();
        if rc.as_ref().is_some_and(|s| Arc::ptr_eq(s, &conn.session)) {
            *rc = None;
        }
        log::info!("client {} disconnected", hex_id(&conn.session.id));
    }

    /// Drop sessions that stayed disconnected longer than the retention window.
    pub fn expire_sessions(&self, now: Instant) -> usize {
        let mut sessions = self.sessions.write();
        let before = sessions.len();
        sessions.retain(|_, s| {
            let link = s.link.lock();
            !link.disconnected_at.is_some_and(|t| now.duration_since(t) > self.cfg.retention)
        });
        before - sessions.len()
    }

    pub fn handle(&self, conn: &Connection, msg: Message) {
        let s = &conn.session;
        match (s.role, msg) {
            (Role::Reconstruction, Message::TsdfBatch(blocks)) => {
                self.on_tsdf_batch(blocks);
            }
            (Role::Reconstruction, Message::ResetBlocks(keys)) => self.on_reset_blocks(&keys),
            (Role::Reconstruction, Message::TextureImage(img)) => self.on_texture_image(img),
            (Role::Exploration, Message::BlockRequest(req)) => self.on_block_request(s, &req),
            (Role::Exploration, Message::TextureRequest) => self.on_texture_request(s),
            (Role::Exploration, Message::ResetRequest) => self.on_reset_request(s),
            (_, Message::PoseUpdate(p)) => self.on_pose_update(s, p),
            (_, Message::Stats(st)) if st.kind == StatsKind::Report => {
                s.send(self.frame(&Message::Stats(self.stats_for(s))));
            }
            (_, Message::Unknown { msg_type, .. }) => log::debug!("skipping unknown message type {msg_type}"),
            (role, other) => log::warn!("ignoring message type {} from {role:?} client", other.msg_type()),
        }
    }

    pub fn stats_for(&self, s: &Session) -> Stats {
        Stats {
            kind: StatsKind::Report,
            code: error_code::NONE,
            tsdf_blocks: self.tsdf.len() as u32,
            mc_blocks: self.mc.len() as u32,
            pending: s.pending() as u32,
            message: String::new(),
        }
    }

    /// Integrate a batch of TSDF blocks and queue the affected MC blocks for every exploration client.
    pub fn on_tsdf_batch(&self, blocks: Vec<(BlockKey, TsdfBlock)>) -> Vec<BlockKey> {
        if blocks.is_empty() {
            return Vec::new();
        }
        let _model = self.model_lock.lock();
        let mut affected = HashSet::new();
        for (k, b) in blocks {
            upsert_with_backpressure(&self.tsdf, k, b);
            affected.extend(affected_mc_blocks(k));
        }
        let mut affected: Vec<BlockKey> = affected.into_iter().filter(|&k| self.tsdf.contains(k)).collect();
        affected.sort();
        let recomputed: Vec<(BlockKey, McBlock)> =
            affected.par_iter().map(|&k| (k, recompute_mc_block(k, |n| self.tsdf.get(n)))).collect();
        for (k, b) in recomputed {
            upsert_with_backpressure(&self.mc, k, b);
        }
        for s in self.exploration_sessions() {
            let stream = s.stream().expect("exploration session");
            for &k in &affected {
                stream.insert_waiting(k);
            }
        }
        affected
    }

    /// Answer one block request with an optional DELETE_BLOCKS and one MC_BATCH.
    pub fn on_block_request(&self, s: &Session, req: &BlockRequest) {
        let Some(stream) = s.stream() else { return };
        let mut io = s.io.lock();
        // this request acknowledges the previous response
        io.inflight.clear();
        io.inflight_deletes.clear();
        if req.max_blocks == 0 {
            s.send(self.frame(&Message::Stats(Stats::error(error_code::BAD_REQUEST, "max_blocks must be positive"))));
            s.send(self.frame(&Message::McBatch(Vec::new())));
            return;
        }
        let max = req.max_blocks.min(self.cfg.max_request) as usize;
        let keys = match req.strategy {
            Strategy::Random => stream.extract_batch(max),
            Strategy::GenerationOrder => stream.extract_ordered(max),
            Strategy::VisibleFirst => {
                let [fx, fy, cx, cy, near, far] = req.intrinsics;
                let f = Frustum::from_request(req.pose, fx, fy, cx, cy, near, far);
                let vs = self.cfg.voxel_size;
                let mut keys = stream.extract_matching(max, |k| f.intersects_block(k, vs));
                if keys.len() < max {
                    keys.extend(stream.extract_batch(max - keys.len()));
                }
                keys
            }
        };
        if !io.pending_deletes.is_empty() {
            let mut deletes = std::mem::take(&mut io.pending_deletes);
            deletes.sort();
            deletes.dedup();
            s.send(self.frame(&Message::DeleteBlocks(deletes.clone())));
            io.inflight_deletes = deletes;
        }
        let blocks: Vec<(BlockKey, McBlock)> = keys.iter().filter_map(|&k| self.mc.get(k).map(|b| (k, b))).collect();
        s.blocks_out.fetch_add(blocks.len() as u64, Ordering::Relaxed);
        io.inflight = keys;
        s.send(self.frame(&Message::McBatch(blocks)));
    }

    pub fn on_pose_update(&self, s: &Session, pose: Pose) {
        let v = self.pose_versions.fetch_add(1, Ordering::Relaxed);
        *s.pose.lock() = Some((pose, v));
    }

    /// Relay changed foreign poses, at most once per interval per receiver.
    pub fn pose_tick(&self, now: Instant) -> usize {
        let sessions = self.sessions();
        let poses: Vec<(ClientId, Role, Pose, u64)> = sessions
            .iter()
            .filter(|s| s.is_connected())
            .filter_map(|s| s.pose.lock().map(|(p, v)| (s.id, s.role, p, v)))
            .collect();
        let mut sent = 0;
        for r in sessions.iter().filter(|s| s.is_connected()) {
            let mut relay = r.relay.lock();
            if relay.last_sent.is_some_and(|t| now.duration_since(t) < self.cfg.pose_interval) {
                continue;
            }
            let peers: Vec<_> = poses.iter().filter(|p| p.0 != r.id).collect();
            let changed = peers.iter().any(|p| relay.seen.get(&p.0) != Some(&p.3));
            if !changed {
                continue;
            }
            let msg = Message::PoseBroadcast(
                peers.iter().map(|p| PeerPose { client_id: p.0, role: p.1 as u8, pose: p.2 }).collect(),
            );
            if r.send(self.frame(&msg)) {
                relay.last_sent = Some(now);
                relay.seen = peers.iter().map(|p| (p.0, p.3)).collect();
                sent += 1;
            }
        }
        sent
    }

    fn connected_rc(&self) -> Option<Arc<Session>> {
        self.rc.lock().clone().filter(|s| s.is_connected())
    }

    pub fn on_texture_request(&self, s: &Session) {
        let Some(rc) = self.connected_rc() else {
            s.send(self.frame(&Message::Stats(Stats::error(
                error_code::NO_RECONSTRUCTION_CLIENT,
                "no reconstruction client connected",
            ))));
            return;
        };
        let first = {
            let mut w = self.texture_waiters.lock();
            let first = w.is_empty();
            if !w.contains(&s.id) {
                w.push(s.id);
            }
            first
        };
        if first {
            rc.send(self.frame(&Message::TextureRequest));
        }
    }

    pub fn on_texture_image(&self, img: TextureImage) {
        let waiters = std::mem::take(&mut *self.texture_waiters.lock());
        let frame = self.frame(&Message::TextureImage(img));
        let targets: Vec<Arc<Session>> = if self.cfg.texture_fanout {
            self.exploration_sessions()
        } else {
            waiters.iter().filter_map(|id| self.session(id)).collect()
        };
        for t in targets {
            t.send(frame.clone());
        }
    }

    pub fn on_reset_request(&self, s: &Session) {
        match self.connected_rc() {
            Some(rc) => {
                rc.send(self.frame(&Message::ResetRequest));
            }
            None => {
                s.send(self.frame(&Message::Stats(Stats::error(
                    error_code::NO_RECONSTRUCTION_CLIENT,
                    "no reconstruction client connected",
                ))));
            }
        }
    }

    /// Remove blocks from both models, recompute their negative neighbours and tell every exploration client.
    pub fn on_reset_blocks(&self, keys: &[BlockKey]) {
        if keys.is_empty() {
            return;
        }
        let _model = self.model_lock.lock();
        let removed: HashSet<BlockKey> = keys.iter().copied().collect();
        for &k in &removed {
            self.tsdf.remove(k);
            self.mc.remove(k);
        }
        let mut neighbours: Vec<BlockKey> = removed
            .iter()
            .flat_map(|&k| affected_mc_blocks(k))
            .filter(|k| !removed.contains(k) && self.tsdf.contains(*k))
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        neighbours.sort();
        let recomputed: Vec<(BlockKey, McBlock)> =
            neighbours.par_iter().map(|&k| (k, recompute_mc_block(k, |n| self.tsdf.get(n)))).collect();
        for (k, b) in recomputed {
            upsert_with_backpressure(&self.mc, k, b);
        }
        let mut sorted: Vec<BlockKey> = removed.into_iter().collect();
        sorted.sort();
        for s in self.exploration_sessions() {
            let stream = s.stream().expect("exploration session");
            {
                let mut io = s.io.lock();
                for &k in &sorted {
                    stream.remove(k);
                }
                io.pending_deletes.extend_from_slice(&sorted);
            }
            for &k in &neighbours {
                stream.insert_waiting(k);
            }
        }
        log::info!("reset {} blocks, {} neighbours recomputed", sorted.len(), neighbours.len());
    }

    pub fn uptime(&self) -> Duration {
        self.started.elapsed()
    }
}

fn backpressure_wait(what: &str, attempt: &mut u32) {
    if *attempt % 100 == 0 {
        log::warn!("{what} full, waiting for capacity");
    }
    *attempt += 1;
    std::thread::sleep(Duration::from_millis(5));
}

fn upsert_with_backpressure<V: Clone>(map: &ConcurrentHashMap<V>, k: BlockKey, v: V) {
    let mut attempt = 0;
    loop {
        match map.upsert(k, v.clone()) {
            Ok(_) => return,
            Err(HashError::CapacityExhausted) => backpressure_wait("block map", &mut attempt),
            Err(e) => panic!("unexpected hash error: {e}"),
        }
    }
}

pub fn hex_id(id: &ClientId) -> String {
    id.iter().take(4).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests;
