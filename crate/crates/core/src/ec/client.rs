use std::io;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use super::{LocalModel, PoseScript};
use crate::geometry::BLOCK_EDGE;
use crate::hash::HashConfig;
use crate::link::{self, LinkError, LinkReader, LinkWriter};
use crate::meter::{Activity, ActivityMeter};
use crate::wire::{
    BlockRequest, ClientId, Codec, Hello, Message, PeerPose, RequestIntrinsics, Role, Stats, StatsKind, Strategy,
    TextureImage,
};

#[derive(Debug, Clone)]
pub struct EcConfig {
    pub server: String,
    pub client_id: ClientId,
    pub codec: Codec,
    pub voxel_size: f32,
    /// Requests per second.
    pub request_rate: f64,
    pub max_blocks: u32,
    pub strategy: Strategy,
    pub poses: PoseScript,
    /// fx, fy, cx, cy, near, far sent with every request.
    pub intrinsics: RequestIntrinsics,
    pub discard: bool,
    pub build_meshes: bool,
    /// Regions rebuilt per rebuild tick.
    pub rebuild_budget: usize,
    /// Stop after this long without receiving a block.
    pub idle_stop: Option<Duration>,
    pub model_hash: HashConfig,
}

impl EcConfig {
    pub fn new(server: impl Into<String>, voxel_size: f32) -> Self {
        Self {
            server: server.into(),
            client_id: link::new_client_id(),
            codec: Codec::Zstd,
            voxel_size,
            request_rate: 100.0,
            max_blocks: 512,
            strategy: Strategy::Random,
            poses: PoseScript::default(),
            intrinsics: [525.0, 525.0, 319.5, 239.5, 0.1, 10.0],
            discard: false,
            build_meshes: false,
            rebuild_budget: 8,
            idle_stop: None,
            model_hash: HashConfig::new(1 << 18, 1 << 18).expect("valid"),
        }
    }
}

enum Command {
    Texture,
    Reset,
    Outage(Duration),
    Stats,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct EcCounters {
    pub requests: u64,
    pub responses: u64,
    pub empty_responses: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub blocks: u64,
    pub reconnects: u64,
}

#[derive(Default)]
struct Counters {
    requests: AtomicU64,
    responses: AtomicU64,
    empty_responses: AtomicU64,
    bytes_in: AtomicU64,
    bytes_out: AtomicU64,
    reconnects: AtomicU64,
    /// Consecutive empty responses.
    empty_streak: AtomicU64,
}

struct Shared {
    cfg: EcConfig,
    model: Arc<LocalModel>,
    stop: AtomicBool,
    connected: AtomicBool,
    failed: Mutex<Option<String>>,
    counters: Counters,
    textures: Mutex<Vec<TextureImage>>,
    peers: Mutex<Vec<PeerPose>>,
    stats: Mutex<Vec<Stats>>,
    meter: ActivityMeter,
}

/// A running exploration client.
pub struct EcHandle {
    shared: Arc<Shared>,
    commands: Sender<Command>,
    threads: Vec<JoinHandle<()>>,
}

impl EcHandle {
    pub fn model(&self) -> &Arc<LocalModel> {
        &self.shared.model
    }

    pub fn config(&self) -> &EcConfig {
        &self.shared.cfg
    }

    pub fn counters(&self) -> EcCounters {
        let c = &self.shared.counters;
        EcCounters {
            requests: c.requests.load(Ordering::Relaxed),
            responses: c.responses.load(Ordering::Relaxed),
            empty_responses: c.empty_responses.load(Ordering::Relaxed),
            bytes_in: c.bytes_in.load(Ordering::Relaxed),
            bytes_out: c.bytes_out.load(Ordering::Relaxed),
            blocks: self.shared.model.blocks_received.load(Ordering::Relaxed),
            reconnects: c.reconnects.load(Ordering::Relaxed),
        }
    }

    /// Consecutive empty responses; a response acknowledges everything before it.
    pub fn empty_streak(&self) -> u64 {
        self.shared.counters.empty_streak.load(Ordering::Relaxed)
    }

    pub fn is_connected(&self) -> bool {
        self.shared.connected.load(Ordering::SeqCst)
    }

    pub fn failure(&self) -> Option<String> {
        self.shared.failed.lock().clone()
    }

    pub fn is_finished(&self) -> bool {
        self.threads.first().is_none_or(|t| t.is_finished())
    }

    pub fn request_texture(&self) {
        let _ = self.commands.send(Command::Texture);
    }

    pub fn request_reset(&self) {
        let _ = self.commands.send(Command::Reset);
    }

    pub fn request_stats(&self) {
        let _ = self.commands.send(Command::Stats);
    }

    /// Drop the connection and stay offline for `d`, then reconnect with the same id.
    pub fn outage(&self, d: Duration) {
        let _ = self.commands.send(Command::Outage(d));
    }

    /// Block traffic between the first and the last non-empty response.
    pub fn activity(&self) -> Option<Activity> {
        self.shared.meter.activity()
    }

    pub fn textures(&self) -> Vec<TextureImage> {
        self.shared.textures.lock().clone()
    }

    pub fn peers(&self) -> Vec<PeerPose> {
        self.shared.peers.lock().clone()
    }

    pub fn stats_messages(&self) -> Vec<Stats> {
        self.shared.stats.lock().clone()
    }

    pub fn stop(mut self) -> Arc<LocalModel> {
        self.shared.stop.store(true, Ordering::SeqCst);
        self.join_threads();
        Arc::clone(&self.shared.model)
    }

    /// Wait for the client to stop on its own (idle stop or failure).
    pub fn join(mut self) -> Arc<LocalModel> {
        self.join_threads();
        Arc::clone(&self.shared.model)
    }

    fn join_threads(&mut self) {
        let mut threads = self.threads.drain(..);
        if let Some(net) = threads.next() {
            let _ = net.join();
        }
        self.shared.stop.store(true, Ordering::SeqCst);
        for t in threads {
            let _ = t.join();
        }
    }
}

pub fn spawn(cfg: EcConfig) -> io::Result<EcHandle> {
    if !(cfg.request_rate > 0.0) || cfg.max_blocks == 0 {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "request rate and size must be positive"));
    }
    let model = Arc::new(LocalModel::new(cfg.voxel_size, cfg.model_hash, cfg.discard));
    let shared = Arc::new(Shared {
        cfg,
        model,
        stop: AtomicBool::new(false),
        connected: AtomicBool::new(false),
        failed: Mutex::new(None),
        counters: Counters::default(),
        textures: Mutex::new(Vec::new()),
        peers: Mutex::new(Vec::new()),
        stats: Mutex::new(Vec::new()),
        meter: ActivityMeter::default(),
    });
    let (tx, rx) = channel();
    let s = Arc::clone(&shared);
    let mut threads = vec![thread::spawn(move || network_loop(&s, &rx))];
    if shared.cfg.build_meshes && !shared.cfg.discard {
        let s = Arc::clone(&shared);
        threads.push(thread::spawn(move || {
            while !s.stop.load(Ordering::SeqCst) {
                if s.model.rebuild_dirty(s.cfg.rebuild_budget) == 0 {
                    thread::sleep(Duration::from_millis(20));
                }
            }
        }));
    }
    Ok(EcHandle { shared, commands: tx, threads })
}

struct Conn {
    reader: LinkReader,
    writer: LinkWriter,
    counted_in: u64,
    counted_out: u64,
}

impl Conn {
    fn send(&mut self, s: &Shared, msg: &Message) -> io::Result<()> {
        self.writer.send(msg)?;
        s.counters.bytes_out.fetch_add(self.writer.bytes_out - self.counted_out, Ordering::Relaxed);
        self.counted_out = self.writer.bytes_out;
        Ok(())
    }

    fn recv(&mut self, s: &Shared, timeout: Duration) -> Result<Option<Message>, LinkError> {
        let m = self.reader.recv(timeout)?;
        s.counters.bytes_in.fetch_add(self.reader.bytes_in - self.counted_in, Ordering::Relaxed);
        self.counted_in = self.reader.bytes_in;
        Ok(m)
    }
}

fn connect(s: &Shared) -> Result<Conn, LinkError> {
    let hello = Hello {
        role: Role::Exploration as u8,
        client_id: s.cfg.client_id,
        voxel_size: s.cfg.voxel_size,
        block_edge: BLOCK_EDGE as u8,
    };
    let (reader, writer, ack) = link::connect(&s.cfg.server, &hello, s.cfg.codec, Duration::from_secs(5))?;
    log::debug!("connected (resumed: {}, pending: {})", ack.resumed, ack.pending);
    // handshake bytes are picked up by the first send/recv
    Ok(Conn { reader, writer, counted_in: 0, counted_out: 0 })
}

/// Sleep in short steps so a stop request is noticed.
fn nap(s: &Shared, d: Duration) {
    let end = Instant::now() + d;
    while !s.stop.load(Ordering::SeqCst) {
        let left = end.saturating_duration_since(Instant::now());
        if left.is_zero() {
            break;
        }
        thread::sleep(left.min(Duration::from_millis(20)));
    }
}

fn network_loop(s: &Shared, commands: &Receiver<Command>) {
    let period = Duration::from_secs_f64(1.0 / s.cfg.request_rate);
    let start = Instant::now();
    let mut conn: Option<Conn> = None;
    let mut ever_connected = false;
    let mut backoff = Duration::from_millis(50);
    let mut last_block = Instant::now();
    let mut last_pose = None::<Instant>;
    let mut next = Instant::now();
    while !s.stop.load(Ordering::SeqCst) {
        let c = match conn.as_mut() {
            Some(c) => c,
            None => match connect(s) {
                Ok(c) => {
                    if ever_connected {
                        s.counters.reconnects.fetch_add(1, Ordering::Relaxed);
                    }
                    ever_connected = true;
                    backoff = Duration::from_millis(50);
                    s.connected.store(true, Ordering::SeqCst);
                    conn.insert(c)
                }
                Err(LinkError::Rejected(status)) => {
                    *s.failed.lock() = Some(format!("server rejected handshake: {status:?}"));
                    break;
                }
                Err(e) => {
                    log::debug!("connect failed: {e}");
                    nap(s, backoff);
                    backoff = (backoff * 2).min(Duration::from_secs(2));
                    continue;
                }
            },
        };
        let mut drop_for = None;
        let mut ok = true;
        while let Ok(cmd) = commands.try_recv() {
            let r = match cmd {
                Command::Texture => c.send(s, &Message::TextureRequest),
                Command::Reset => c.send(s, &Message::ResetRequest),
                Command::Stats => c.send(s, &Message::Stats(Stats::query())),
                Command::Outage(d) => {
                    drop_for = Some(d);
                    Ok(())
                }
            };
            ok &= r.is_ok();
        }
        if let Some(d) = drop_for {
            log::info!("simulated outage for {d:?}");
            c.writer.shutdown();
            conn = None;
            s.connected.store(false, Ordering::SeqCst);
            nap(s, d);
            next = Instant::now();
            continue;
        }
        let pose = s.cfg.poses.at(start.elapsed().as_secs_f64());
        if ok && last_pose.is_none_or(|t| t.elapsed() >= Duration::from_millis(50)) {
            ok = c.send(s, &Message::PoseUpdate(pose)).is_ok();
            last_pose = Some(Instant::now());
        }
        let t = Instant::now();
        let before = s.counters.bytes_in.load(Ordering::Relaxed);
        if ok {
            let req = BlockRequest {
                max_blocks: s.cfg.max_blocks,
                strategy: s.cfg.strategy,
                pose,
                intrinsics: s.cfg.intrinsics,
            };
            ok = c.send(s, &Message::BlockRequest(req)).is_ok();
            s.counters.requests.fetch_add(1, Ordering::Relaxed);
        }
        let got = if ok { await_batch(s, c) } else { Err(LinkError::Closed) };
        match got {
            Ok(n) => {
                if n > 0 {
                    last_block = Instant::now();
                    s.meter.record(t, before, s.counters.bytes_in.load(Ordering::Relaxed), n as u64);
                }
            }
            Err(e) => {
                log::info!("connection lost: {e}");
                c.writer.shutdown();
                conn = None;
                s.connected.store(false, Ordering::SeqCst);
                continue;
            }
        }
        if s.cfg.idle_stop.is_some_and(|d| last_block.elapsed() >= d) {
            break;
        }
        next += period;
        let now = Instant::now();
        if next > now {
            nap(s, next - now);
        } else {
            next = now;
        }
    }
    if let Some(c) = conn {
        c.writer.shutdown();
    }
    s.connected.store(false, Ordering::SeqCst);
}

/// Read until the MC_BATCH answering the last request; returns its block count.
fn await_batch(s: &Shared, c: &mut Conn) -> Result<usize, LinkError> {
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return Err(LinkError::Io(io::Error::new(io::ErrorKind::TimedOut, "no response")));
        }
        match c.recv(s, left.min(Duration::from_millis(200)))? {
            Some(Message::McBatch(blocks)) => {
                let n = blocks.len();
                s.counters.responses.fetch_add(1, Ordering::Relaxed);
                if n == 0 {
                    s.counters.empty_responses.fetch_add(1, Ordering::Relaxed);
                    s.counters.empty_streak.fetch_add(1, Ordering::Relaxed);
                } else {
                    s.counters.empty_streak.store(0, Ordering::Relaxed);
                }
                if let Err(e) = s.model.on_batch(blocks) {
                    *s.failed.lock() = Some(format!("local model full: {e}"));
                    s.stop.store(true, Ordering::SeqCst);
                }
                return Ok(n);
            }
            Some(Message::DeleteBlocks(keys)) => {
                s.counters.empty_streak.store(0, Ordering::Relaxed);
                s.model.on_delete(&keys);
            }
            Some(Message::PoseBroadcast(p)) => *s.peers.lock() = p,
            Some(Message::TextureImage(img)) => s.textures.lock().push(img),
            Some(Message::Stats(st)) => {
                if st.kind == StatsKind::Error {
                    log::warn!("server error {}: {}", st.code, st.message);
                }
                s.stats.lock().push(st);
            }
            Some(_) | None => {}
        }
    }
}
