//! Reconstruction client: fusion, retirement-gated streaming, prefetch, reset and texture service.

mod client;
mod ema;

use std::io;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

pub use client::{spawn, RcHandle, RcRunConfig, RcStatus};
pub use ema::{ema_coefficients, ema_step, EmaError, EmaParams, EmaState};

use crate::geometry::{CameraIntrinsics, Pose};
use crate::hash::{BlockKey, HashConfig, HashError};
use crate::stream::StreamSet;
use crate::voxel::{Frame, FrameUpdate, FusionConfig, VoxelModel};
use crate::wire::{error_code, Message, Stats, TextureImage};

#[derive(Debug, Clone)]
pub struct RcConfig {
    pub package_size: usize,
    /// Batches per second; 0 sends as fast as the link allows.
    pub send_rate: f64,
    pub fusion: FusionConfig,
    pub ema: EmaParams,
    pub model_hash: HashConfig,
    pub stream_hash: HashConfig,
}

impl Default for RcConfig {
    fn default() -> Self {
        Self {
            package_size: 512,
            send_rate: 100.0,
            fusion: FusionConfig::default(),
            ema: EmaParams::default(),
            model_hash: HashConfig::new(1 << 18, 1 << 18).expect("valid"),
            stream_hash: HashConfig::new(1 << 16, 1 << 16).expect("valid"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RcError {
    #[error("package size must be at least 1")]
    PackageSize,
    #[error("invalid fusion config: {0}")]
    Fusion(String),
    #[error("block table full: {0}")]
    Hash(#[from] HashError),
    #[error(transparent)]
    Ema(#[from] EmaError),
}

#[derive(Debug, Clone, Default)]
pub struct FrameReport {
    pub update: FrameUpdate,
    /// Retired keys that were not pending yet.
    pub queued: usize,
    pub prefetched: usize,
    pub ema: f64,
}

/// Transport-independent state of the reconstruction client.
pub struct Reconstruction {
    cfg: RcConfig,
    model: VoxelModel,
    stream: StreamSet,
    ema: Mutex<Option<EmaState>>,
    latest: Mutex<Option<Arc<Frame>>>,
    /// Held while a batch or a reset is on its way, so the two never interleave.
    send_lock: Mutex<()>,
    pub frames: AtomicU64,
    pub blocks_sent: AtomicU64,
    pub batches_sent: AtomicU64,
}

impl Reconstruction {
    pub fn new(cfg: RcConfig, intrinsics: CameraIntrinsics, near: f32, far: f32) -> Result<Self, RcError> {
        if cfg.package_size == 0 {
            return Err(RcError::PackageSize);
        }
        cfg.fusion.validate().map_err(RcError::Fusion)?;
        EmaState::new(cfg.ema, 0.0)?;
        Ok(Self {
            model: VoxelModel::new(cfg.fusion, intrinsics, near, far, cfg.model_hash),
            stream: StreamSet::new(cfg.stream_hash),
            cfg,
            ema: Mutex::new(None),
            latest: Mutex::new(None),
            send_lock: Mutex::new(()),
            frames: AtomicU64::new(0),
            blocks_sent: AtomicU64::new(0),
            batches_sent: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &RcConfig {
        &self.cfg
    }

    pub fn model(&self) -> &VoxelModel {
        &self.model
    }

    pub fn stream(&self) -> &StreamSet {
        &self.stream
    }

    pub fn ema_value(&self) -> f64 {
        self.ema.lock().as_ref().map_or(0.0, EmaState::value)
    }

    /// Fuse one frame, queue retired blocks and run the prefetch trigger.
    pub fn process_frame(&self, frame: Frame) -> Result<FrameReport, RcError> {
        let t = frame.timestamp_us as f64 * 1e-6;
        let update = self.model.process_frame(&frame)?;
        let mut queued = 0;
        for &k in &update.retired {
            queued += usize::from(self.insert(k));
        }
        let mut ema = self.ema.lock();
        let state = match ema.as_mut() {
            Some(s) => s,
            None => ema.insert(EmaState::new(self.cfg.ema, t - 1e-6)?),
        };
        let value = state.observe(t, self.stream.len() as f64)?;
        let prefetched = if state.prefetch_due(t) { self.prefetch() } else { 0 };
        drop(ema);
        *self.latest.lock() = Some(Arc::new(frame));
        self.frames.fetch_add(1, Ordering::Relaxed);
        Ok(FrameReport { update, queued, prefetched, ema: value })
    }

    fn insert(&self, k: BlockKey) -> bool {
        self.stream.insert_waiting(k)
    }

    /// Queue every updated block that has not retired yet. Returns how many keys were offered.
    pub fn prefetch(&self) -> usize {
        let visible = self.model.visible_blocks();
        for &k in &visible {
            self.insert(k);
        }
        visible.len()
    }

    /// End of acquisition: everything still visible goes out.
    pub fn final_flush(&self) -> usize {
        self.prefetch()
    }

    /// Queue the whole model, e.g. after a connection loss that may have swallowed batches.
    pub fn requeue_all(&self) -> usize {
        let keys = self.model.blocks().keys();
        for &k in &keys {
            self.insert(k);
        }
        keys.len()
    }

    /// Nothing queued and no batch on its way.
    pub fn is_idle(&self) -> bool {
        let _g = self.send_lock.lock();
        self.stream.is_empty()
    }

    /// Extract one package and hand it to `send`. On failure the keys are queued again.
    pub fn pump<F>(&self, send: F) -> io::Result<usize>
    where
        F: FnOnce(&Message) -> io::Result<usize>,
    {
        let _g = self.send_lock.lock();
        let keys = self.stream.extract_batch(self.cfg.package_size);
        if keys.is_empty() {
            return Ok(0);
        }
        let blocks: Vec<_> = keys.iter().filter_map(|&k| self.model.get(k).map(|b| (k, b))).collect();
        if blocks.is_empty() {
            return Ok(0);
        }
        let n = blocks.len();
        match send(&Message::TsdfBatch(blocks)) {
            Ok(_) => {
                self.blocks_sent.fetch_add(n as u64, Ordering::Relaxed);
                self.batches_sent.fetch_add(1, Ordering::Relaxed);
                Ok(n)
            }
            Err(e) => {
                for k in keys {
                    self.insert(k);
                }
                Err(e)
            }
        }
    }

    /// Delete what the camera currently sees and announce it. Returns the deleted keys.
    pub fn reset<F>(&self, send: F) -> io::Result<Vec<BlockKey>>
    where
        F: FnOnce(&Message) -> io::Result<usize>,
    {
        let Some(pose) = self.latest.lock().as_ref().map(|f| f.pose) else {
            return Ok(Vec::new());
        };
        let _g = self.send_lock.lock();
        let keys = self.visible_keys(pose);
        if keys.is_empty() {
            return Ok(Vec::new());
        }
        self.model.delete_blocks(&keys);
        for &k in &keys {
            self.stream.remove(k);
        }
        send(&Message::ResetBlocks(keys.clone()))?;
        log::info!("reset {} blocks", keys.len());
        Ok(keys)
    }

    fn visible_keys(&self, pose: Pose) -> Vec<BlockKey> {
        let f = self.model.frustum(pose).with_margin(0.0);
        let vs = self.cfg.fusion.voxel_size;
        let mut keys: Vec<BlockKey> =
            self.model.blocks().keys().into_iter().filter(|&k| f.intersects_block(k, vs)).collect();
        keys.sort();
        keys
    }

    /// Reply to a texture request: the most recent color frame, or an error if none yet.
    pub fn texture(&self) -> Message {
        match self.latest.lock().clone() {
            Some(f) => {
                let k = self.model.intrinsics();
                Message::TextureImage(TextureImage {
                    pose: f.pose,
                    intrinsics: [k.fx, k.fy, k.cx, k.cy],
                    width: f.width,
                    height: f.height,
                    pixels: f.color.clone(),
                })
            }
            None => Message::Stats(Stats::error(error_code::NO_FRAME, "no frame captured yet")),
        }
    }

    pub fn latest_pose(&self) -> Option<Pose> {
        self.latest.lock().as_ref().map(|f| f.pose)
    }
}

#[cfg(test)]
mod tests;
