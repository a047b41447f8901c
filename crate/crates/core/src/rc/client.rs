use std::io::{self, ErrorKind};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use super::Reconstruction;
use crate::geometry::BLOCK_EDGE;
use crate::link::{self, LinkError, LinkReader, LinkWriter};
use crate::meter::{Activity, ActivityMeter};
use crate::voxel::Frame;
use crate::wire::{ClientId, Codec, Hello, Message, Role};

#[derive(Debug, Clone)]
pub struct RcRunConfig {
    pub server: String,
    pub client_id: ClientId,
    pub codec: Codec,
    /// Replay speed relative to frame timestamps; 0 processes frames back to back.
    pub speed: f64,
}

impl RcRunConfig {
    pub fn new(server: impl Into<String>) -> Self {
        Self { server: server.into(), client_id: link::new_client_id(), codec: Codec::Zstd, speed: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RcStatus {
    Running,
    /// All frames fused and everything queued has been sent.
    Drained,
    Failed,
}

struct Shared {
    core: Arc<Reconstruction>,
    run: RcRunConfig,
    writer: Mutex<Option<LinkWriter>>,
    stop: AtomicBool,
    frames_done: AtomicBool,
    failed: AtomicBool,
    connected_once: AtomicBool,
    /// Bumped on every connect, so a stale reader cannot drop a newer link.
    generation: AtomicU64,
    bytes_out: AtomicU64,
    meter: ActivityMeter,
}

impl Shared {
    fn send(&self, msg: &Message) -> io::Result<usize> {
        let mut w = self.writer.lock();
        let Some(link) = w.as_mut() else {
            return Err(io::Error::new(ErrorKind::NotConnected, "not connected"));
        };
        match link.send(msg) {
            Ok(n) => {
                self.bytes_out.fetch_add(n as u64, Ordering::Relaxed);
                Ok(n)
            }
            Err(e) => {
                link.shutdown();
                *w = None;
                Err(e)
            }
        }
    }

    fn is_connected(&self) -> bool {
        self.writer.lock().is_some()
    }
}

/// A running reconstruction client.
pub struct RcHandle {
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl RcHandle {
    pub fn core(&self) -> &Arc<Reconstruction> {
        &self.shared.core
    }

    pub fn status(&self) -> RcStatus {
        let s = &self.shared;
        if s.failed.load(Ordering::SeqCst) {
            RcStatus::Failed
        } else if s.frames_done.load(Ordering::SeqCst) && s.is_connected() && s.core.is_idle() {
            RcStatus::Drained
        } else {
            RcStatus::Running
        }
    }

    pub fn bytes_out(&self) -> u64 {
        self.shared.bytes_out.load(Ordering::Relaxed)
    }

    pub fn is_connected(&self) -> bool {
        self.shared.is_connected()
    }

    /// Batch traffic between the first and the last batch sent.
    pub fn activity(&self) -> Option<Activity> {
        self.shared.meter.activity()
    }

    /// Drop the connection now; the client reconnects on its own.
    pub fn drop_connection(&self) {
        if let Some(w) = self.shared.writer.lock().take() {
            w.shutdown();
        }
    }

    pub fn stop(mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        self.drop_connection();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

/// Start fusing `frames` and streaming to the server. Returns once the first connection is up.
pub fn spawn<I>(core: Arc<Reconstruction>, run: RcRunConfig, frames: I) -> Result<RcHandle, LinkError>
where
    I: Iterator<Item = Frame> + Send + 'static,
{
    let shared = Arc::new(Shared {
        core,
        run,
        writer: Mutex::new(None),
        stop: AtomicBool::new(false),
        frames_done: AtomicBool::new(false),
        failed: AtomicBool::new(false),
        connected_once: AtomicBool::new(false),
        generation: AtomicU64::new(0),
        bytes_out: AtomicU64::new(0),
        meter: ActivityMeter::default(),
    });
    let reader = connect(&shared)?;
    let mut threads = vec![spawn_reader(Arc::clone(&shared), reader)];
    let s = Arc::clone(&shared);
    threads.push(thread::spawn(move || pump_loop(s)));
    let s = Arc::clone(&shared);
    threads.push(thread::spawn(move || fusion_loop(s, frames)));
    Ok(RcHandle { shared, threads })
}

fn connect(s: &Arc<Shared>) -> Result<(LinkReader, u64), LinkError> {
    let hello = Hello {
        role: Role::Reconstruction as u8,
        client_id: s.run.client_id,
        voxel_size: s.core.config().fusion.voxel_size,
        block_edge: BLOCK_EDGE as u8,
    };
    let (reader, writer, _ack) = link::connect(&s.run.server, &hello, s.run.codec, Duration::from_secs(5))?;
    let generation = {
        let mut w = s.writer.lock();
        *w = Some(writer);
        s.generation.fetch_add(1, Ordering::SeqCst) + 1
    };
    if s.connected_once.swap(true, Ordering::SeqCst) {
        // batches written just before the drop may never have been read
        let n = s.core.requeue_all();
        log::info!("reconnected, re-queued {n} blocks");
    }
    Ok((reader, generation))
}

fn spawn_reader(s: Arc<Shared>, (mut reader, generation): (LinkReader, u64)) -> JoinHandle<()> {
    thread::spawn(move || {
        while !s.stop.load(Ordering::SeqCst) {
            match reader.recv(Duration::from_millis(100)) {
                Ok(Some(Message::TextureRequest)) => {
                    let _ = s.send(&s.core.texture());
                }
                Ok(Some(Message::ResetRequest)) => {
                    if let Err(e) = s.core.reset(|m| s.send(m)) {
                        log::warn!("reset not delivered: {e}");
                    }
                }
                Ok(Some(_)) => {}
                Ok(None) => {
                    if !s.is_connected() || s.generation.load(Ordering::SeqCst) != generation {
                        break;
                    }
                }
                Err(e) => {
                    log::debug!("rc link closed: {e}");
                    let mut w = s.writer.lock();
                    if s.generation.load(Ordering::SeqCst) == generation {
                        if let Some(w) = w.take() {
                            w.shutdown();
                        }
                    }
                    break;
                }
            }
        }
    })
}

fn pump_loop(s: Arc<Shared>) {
    let rate = s.core.config().send_rate;
    let period = if rate > 0.0 { Duration::from_secs_f64(1.0 / rate) } else { Duration::ZERO };
    let mut backoff = Duration::from_millis(50);
    let mut readers = Vec::new();
    let mut next = Instant::now();
    while !s.stop.load(Ordering::SeqCst) {
        if !s.is_connected() {
            thread::sleep(backoff);
            match connect(&s) {
                Ok(r) => {
                    readers.push(spawn_reader(Arc::clone(&s), r));
                    backoff = Duration::from_millis(50);
                }
                Err(LinkError::Rejected(status)) => {
                    log::error!("server rejected reconnect: {status:?}");
                    s.failed.store(true, Ordering::SeqCst);
                    break;
                }
                Err(e) => {
                    log::debug!("reconnect failed: {e}");
                    backoff = (backoff * 2).min(Duration::from_secs(1));
                }
            }
            continue;
        }
        let t = Instant::now();
        let before = s.bytes_out.load(Ordering::Relaxed);
        let sent = match s.core.pump(|m| s.send(m)) {
            Ok(n) => {
                if n > 0 {
                    s.meter.record(t, before, s.bytes_out.load(Ordering::Relaxed), n as u64);
                }
                n
            }
            Err(e) => {
                log::warn!("batch send failed: {e}");
                0
            }
        };
        if period.is_zero() {
            if sent == 0 {
                thread::sleep(Duration::from_millis(2));
            }
        } else {
            next += period;
            let now = Instant::now();
            if next > now {
                thread::sleep(next - now);
            } else {
                next = now;
            }
        }
    }
    for r in readers {
        let _ = r.join();
    }
}

fn fusion_loop<I: Iterator<Item = Frame>>(s: Arc<Shared>, frames: I) {
    let start = Instant::now();
    let mut t0 = None;
    for frame in frames {
        if s.stop.load(Ordering::SeqCst) {
            return;
        }
        let ts = frame.timestamp_us;
        if s.run.speed > 0.0 {
            let first = *t0.get_or_insert(ts);
            let due = Duration::from_secs_f64(ts.saturating_sub(first) as f64 * 1e-6 / s.run.speed);
            if let Some(wait) = due.checked_sub(start.elapsed()) {
                thread::sleep(wait);
            }
        }
        let pose = frame.pose;
        if let Err(e) = s.core.process_frame(frame) {
            log::error!("fusion failed: {e}");
            s.failed.store(true, Ordering::SeqCst);
            return;
        }
        let _ = s.send(&Message::PoseUpdate(pose));
    }
    let n = s.core.final_flush();
    log::info!("all frames fused, flushed {n} visible blocks");
    s.frames_done.store(true, Ordering::SeqCst);
}
