//! Sparse TSDF block model: ray-band allocation, weighted fusion, retirement.

use std::collections::HashSet;

use glam::{IVec3, Vec3};
use parking_lot::Mutex;
use rayon::prelude::*;

use crate::geometry::{CameraIntrinsics, Frustum, Pose, BLOCK_EDGE, BLOCK_VOXELS};
use crate::hash::{BlockKey, ConcurrentHashMap, HashConfig, HashError};

/// Bytes per voxel on the wire.
pub const TSDF_VOXEL_BYTES: usize = 12;
/// Bytes per block payload on the wire.
pub const TSDF_BLOCK_BYTES: usize = BLOCK_VOXELS * TSDF_VOXEL_BYTES;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsdfVoxel {
    pub tsdf: f32,
    pub weight: f32,
    pub color: [u8; 3],
}

impl Default for TsdfVoxel {
    fn default() -> Self {
        Self { tsdf: 1.0, weight: 0.0, color: [0; 3] }
    }
}

impl TsdfVoxel {
    pub fn is_observed(&self) -> bool {
        self.weight > 0.0
    }

    pub fn write_le(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.tsdf.to_le_bytes());
        out.extend_from_slice(&self.weight.to_le_bytes());
        out.extend_from_slice(&[self.color[0], self.color[1], self.color[2], 0]);
    }

    pub fn read_le(b: &[u8]) -> Self {
        Self {
            tsdf: f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
            weight: f32::from_le_bytes([b[4], b[5], b[6], b[7]]),
            color: [b[8], b[9], b[10]],
        }
    }
}

/// Linear index of a voxel inside a block, x fastest.
#[inline]
pub fn voxel_index(x: usize, y: usize, z: usize) -> usize {
    x + 8 * y + 64 * z
}

#[derive(Clone, PartialEq)]
pub struct TsdfBlock {
    pub voxels: Box<[TsdfVoxel; BLOCK_VOXELS]>,
}

impl Default for TsdfBlock {
    fn default() -> Self {
        Self { voxels: Box::new([TsdfVoxel::default(); BLOCK_VOXELS]) }
    }
}

impl std::fmt::Debug for TsdfBlock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let observed = self.voxels.iter().filter(|v| v.is_observed()).count();
        write!(f, "TsdfBlock({observed} observed)")
    }
}

impl TsdfBlock {
    pub fn get(&self, x: usize, y: usize, z: usize) -> &TsdfVoxel {
        &self.voxels[voxel_index(x, y, z)]
    }

    pub fn get_mut(&mut self, x: usize, y: usize, z: usize) -> &mut TsdfVoxel {
        &mut self.voxels[voxel_index(x, y, z)]
    }

    pub fn write_le(&self, out: &mut Vec<u8>) {
        out.reserve(TSDF_BLOCK_BYTES);
        for v in self.voxels.iter() {
            v.write_le(out);
        }
    }

    /// `b` must hold exactly [`TSDF_BLOCK_BYTES`] bytes.
    pub fn read_le(b: &[u8]) -> Self {
        let mut block = Self::default();
        for (v, chunk) in block.voxels.iter_mut().zip(b.chunks_exact(TSDF_VOXEL_BYTES)) {
            *v = TsdfVoxel::read_le(chunk);
        }
        block
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub voxel_size: f32,
    pub truncation: f32,
    pub max_weight: f32,
    /// Visibility margin in block edges.
    pub margin_blocks: f32,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { voxel_size: 0.005, truncation: 0.060, max_weight: 128.0, margin_blocks: 2.0 }
    }
}

impl FusionConfig {
    pub fn with_voxel_size(voxel_size: f32) -> Self {
        Self { voxel_size, ..Self::default() }
    }

    pub fn block_size(&self) -> f32 {
        BLOCK_EDGE as f32 * self.voxel_size
    }

    pub fn margin(&self) -> f32 {
        self.margin_blocks * self.block_size()
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.voxel_size > 0.0) {
            return Err("voxel size must be positive".into());
        }
        if self.truncation < 4.0 * self.voxel_size {
            return Err(format!(
                "truncation {} must be at least 4 voxels ({})",
                self.truncation,
                4.0 * self.voxel_size
            ));
        }
        if !(self.max_weight >= 1.0) {
            return Err("max weight must be at least 1".into());
        }
        Ok(())
    }

    /// World position of a voxel (its grid point).
    pub fn voxel_position(&self, key: BlockKey, x: usize, y: usize, z: usize) -> Vec3 {
        let g = IVec3::new(key.x, key.y, key.z) * BLOCK_EDGE + IVec3::new(x as i32, y as i32, z as i32);
        g.as_vec3() * self.voxel_size
    }
}

/// One depth/colour observation. Depth in meters, 0 = invalid; colour RGB8.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp_us: u64,
    pub pose: Pose,
    pub width: u32,
    pub height: u32,
    pub depth: Vec<f32>,
    pub color: Vec<u8>,
}

impl Frame {
    pub fn depth_at(&self, u: u32, v: u32) -> f32 {
        self.depth[(v * self.width + u) as usize]
    }

    pub fn color_at(&self, u: u32, v: u32) -> [u8; 3] {
        let i = 3 * (v * self.width + u) as usize;
        [self.color[i], self.color[i + 1], self.color[i + 2]]
    }
}

/// Keys of all blocks touched by the band `[d - mu, d + mu]` along each valid pixel ray.
///
/// The ray is sampled every half voxel and every sample is grown by half a
/// voxel on each axis, so every block the band passes through is reported.
pub fn band_blocks(frame: &Frame, intr: &CameraIntrinsics, cfg: &FusionConfig) -> HashSet<BlockKey> {
    let block = cfg.block_size();
    let half = 0.5 * cfg.voxel_size;
    let step = 0.5 * cfg.voxel_size;
    let mu = cfg.truncation;
    let rows: Vec<HashSet<BlockKey>> = (0..frame.height)
        .into_par_iter()
        .map(|v| {
            let mut out = HashSet::new();
            for u in 0..frame.width {
                let d = frame.depth_at(u, v);
                if !(d > 0.0) || !d.is_finite() {
                    continue;
                }
                let dir = intr.ray(u as f32, v as f32);
                let z0 = (d - mu).max(0.0);
                let z1 = d + mu;
                let n = ((z1 - z0) / step).ceil() as i32;
                for i in 0..=n {
                    let z = (z0 + i as f32 * step).min(z1);
                    let p = frame.pose.camera_to_world(dir * z);
                    let lo = ((p - Vec3::splat(half)) / block).floor().as_ivec3();
                    let hi = ((p + Vec3::splat(half)) / block).floor().as_ivec3();
                    for bz in lo.z..=hi.z {
                        for by in lo.y..=hi.y {
                            for bx in lo.x..=hi.x {
                                out.insert(BlockKey::new(bx, by, bz));
                            }
                        }
                    }
                }
            }
            out
        })
        .collect();
    let mut all = HashSet::new();
    for r in rows {
        all.extend(r);
    }
    all
}

/// What one frame did to the model.
#[derive(Debug, Default, Clone)]
pub struct FrameUpdate {
    pub allocated: Vec<BlockKey>,
    pub touched: Vec<BlockKey>,
    pub retired: Vec<BlockKey>,
}

/// Sparse block model with a visibility state per updated block.
pub struct VoxelModel {
    cfg: FusionConfig,
    intrinsics: CameraIntrinsics,
    near: f32,
    far: f32,
    blocks: ConcurrentHashMap<TsdfBlock>,
    visible: Mutex<HashSet<BlockKey>>,
}

impl VoxelModel {
    pub fn new(
        cfg: FusionConfig,
        intrinsics: CameraIntrinsics,
        near: f32,
        far: f32,
        hash: HashConfig,
    ) -> Self {
        Self {
            cfg,
            intrinsics,
            near,
            far,
            blocks: ConcurrentHashMap::new(hash),
            visible: Mutex::new(HashSet::new()),
        }
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn blocks(&self) -> &ConcurrentHashMap<TsdfBlock> {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn frustum(&self, pose: Pose) -> Frustum {
        Frustum::new(pose, self.intrinsics, self.near, self.far, self.cfg.margin())
    }

    /// Allocate every block in the truncation band of the frame. Returns the newly allocated keys.
    pub fn allocate_blocks(&self, frame: &Frame) -> Result<Vec<BlockKey>, HashError> {
        let keys = band_blocks(frame, &self.intrinsics, &self.cfg);
        let mut fresh = Vec::new();
        for k in keys {
            if self.blocks.insert_with(k, TsdfBlock::default)?.inserted {
                fresh.push(k);
            }
        }
        fresh.sort();
        Ok(fresh)
    }

    /// Fuse the frame into the given blocks. Returns the keys where any voxel changed.
    pub fn integrate_blocks(&self, frame: &Frame, keys: &[BlockKey]) -> Vec<BlockKey> {
        let mut touched: Vec<BlockKey> = keys
            .par_iter()
            .copied()
            .filter(|&k| self.blocks.with_mut(k, |b| self.fuse_block(k, b, frame)).unwrap_or(false))
            .collect();
        touched.sort();
        self.visible.lock().extend(touched.iter().copied());
        touched
    }

    /// Fuse the frame into every allocated block intersecting its view frustum.
    pub fn integrate_frame(&self, frame: &Frame) -> Vec<BlockKey> {
        let f = Frustum::new(frame.pose, self.intrinsics, self.near, self.far, 0.0);
        let keys: Vec<BlockKey> = self
            .blocks
            .keys()
            .into_iter()
            .filter(|&k| f.intersects_block(k, self.cfg.voxel_size))
            .collect();
        self.integrate_blocks(frame, &keys)
    }

    fn fuse_block(&self, key: BlockKey, block: &mut TsdfBlock, frame: &Frame) -> bool {
        let mu = self.cfg.truncation;
        let mut changed = false;
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    let p = frame.pose.world_to_camera(self.cfg.voxel_position(key, x, y, z));
                    let Some((u, v)) = self.intrinsics.project(p) else { continue };
                    if u >= frame.width || v >= frame.height {
                        continue;
                    }
                    let d = frame.depth_at(u, v);
                    if !(d > 0.0) || !d.is_finite() {
                        continue;
                    }
                    let sdf = d - p.z;
                    if sdf < -mu {
                        continue;
                    }
                    let sample = frame.color_at(u, v);
                    fuse_voxel(block.get_mut(x, y, z), sdf, mu, sample, self.cfg.max_weight);
                    changed = true;
                }
            }
        }
        changed
    }

    /// Allocate, integrate and retire for one frame.
    pub fn process_frame(&self, frame: &Frame) -> Result<FrameUpdate, HashError> {
        let band: Vec<BlockKey> = band_blocks(frame, &self.intrinsics, &self.cfg).into_iter().collect();
        let mut allocated = Vec::new();
        for &k in &band {
            if self.blocks.insert_with(k, TsdfBlock::default)?.inserted {
                allocated.push(k);
            }
        }
        allocated.sort();
        // blocks that no voxel sample reaches still have to be streamed once
        self.visible.lock().extend(allocated.iter().copied());
        let touched = self.integrate_blocks(frame, &band);
        let retired = self.retire_invisible(&self.frustum(frame.pose));
        Ok(FrameUpdate { allocated, touched, retired })
    }

    /// Visible blocks that left `frustum` (margin included) become retired and are returned.
    pub fn retire_invisible(&self, frustum: &Frustum) -> Vec<BlockKey> {
        let mut visible = self.visible.lock();
        let mut retired = Vec::new();
        visible.retain(|&k| {
            let keep = frustum.intersects_block(k, self.cfg.voxel_size);
            if !keep {
                retired.push(k);
            }
            keep
        });
        retired.sort();
        retired
    }

    /// Updated blocks that have not retired since their last update.
    pub fn visible_blocks(&self) -> Vec<BlockKey> {
        let mut v: Vec<_> = self.visible.lock().iter().copied().collect();
        v.sort();
        v
    }

    pub fn delete_blocks(&self, keys: &[BlockKey]) -> usize {
        let mut visible = self.visible.lock();
        keys.iter()
            .filter(|&&k| {
                visible.remove(&k);
                self.blocks.remove(k).is_some()
            })
            .count()
    }

    pub fn get(&self, key: BlockKey) -> Option<TsdfBlock> {
        self.blocks.get(key)
    }
}

/// Weighted running-average update of one voxel with a projective distance sample.
pub fn fuse_voxel(v: &mut TsdfVoxel, sdf: f32, mu: f32, sample: [u8; 3], max_weight: f32) {
    let w = v.weight;
    let t = (sdf / mu).clamp(-1.0, 1.0);
    v.tsdf = (v.tsdf * w + t) / (w + 1.0);
    for c in 0..3 {
        let mixed = (f32::from(v.color[c]) * w + f32::from(sample[c])) / (w + 1.0);
        v.color[c] = mixed.round().clamp(0.0, 255.0) as u8;
    }
    v.weight = (w + 1.0).min(max_weight);
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f32::consts::PI;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(50.0, 50.0, 20.0, 15.0, 40, 30)
    }

    fn model(voxel: f32) -> VoxelModel {
        let cfg = FusionConfig { voxel_size: voxel, truncation: 0.06, ..FusionConfig::default() };
        VoxelModel::new(cfg, intr(), 0.1, 4.0, HashConfig::new(1 << 12, 1 << 14).unwrap())
    }

    fn flat_frame(d: f32) -> Frame {
        let k = intr();
        Frame {
            timestamp_us: 0,
            pose: Pose::IDENTITY,
            width: k.width,
            height: k.height,
            depth: vec![d; (k.width * k.height) as usize],
            color: vec![200; (3 * k.width * k.height) as usize],
        }
    }

    #[test]
    fn voxel_wire_size_is_twelve_bytes() {
        let mut out = Vec::new();
        TsdfVoxel { tsdf: -0.5, weight: 3.0, color: [1, 2, 3] }.write_le(&mut out);
        assert_eq!(out.len(), TSDF_VOXEL_BYTES);
        assert_eq!(TsdfVoxel::read_le(&out).color, [1, 2, 3]);
        assert_eq!(TSDF_BLOCK_BYTES, 6144);
    }

    #[test]
    fn block_roundtrip() {
        let mut b = TsdfBlock::default();
        b.get_mut(1, 2, 3).tsdf = 0.25;
        b.get_mut(7, 7, 7).weight = 5.0;
        let mut out = Vec::new();
        b.write_le(&mut out);
        assert_eq!(out.len(), TSDF_BLOCK_BYTES);
        assert_eq!(TsdfBlock::read_le(&out), b);
    }

    #[test]
    fn all_invalid_depth_allocates_nothing() {
        let m = model(0.01);
        assert!(m.allocate_blocks(&flat_frame(0.0)).unwrap().is_empty());
    }

    #[test]
    fn single_centre_pixel_allocation() {
        let m = model(0.01);
        let mut f = flat_frame(0.0);
        let k = intr();
        f.depth[(k.cy as u32 * k.width + k.cx as u32) as usize] = 1.0;
        let got = m.allocate_blocks(&f).unwrap();
        let mut want = Vec::new();
        for x in -1..=0 {
            for y in -1..=0 {
                for z in 11..=13 {
                    want.push(BlockKey::new(x, y, z));
                }
            }
        }
        want.sort();
        assert_eq!(got, want);
        assert!(m.allocate_blocks(&f).unwrap().is_empty());
    }

    #[test]
    fn fusion_update_examples() {
        let mut v = TsdfVoxel::default();
        v.weight = 0.0;
        fuse_voxel(&mut v, 0.0, 0.06, [10, 20, 30], 128.0);
        assert_eq!((v.tsdf, v.weight, v.color), (0.0, 1.0, [10, 20, 30]));

        let mut v = TsdfVoxel { tsdf: 1.0, weight: 1.0, color: [0; 3] };
        fuse_voxel(&mut v, 0.03, 0.06, [0; 3], 128.0);
        assert_eq!(v.tsdf, 0.75);
        assert_eq!(v.weight, 2.0);
    }

    #[test]
    fn weight_is_capped() {
        let mut v = TsdfVoxel { tsdf: 0.0, weight: 128.0, color: [0; 3] };
        fuse_voxel(&mut v, 0.0, 0.06, [0; 3], 128.0);
        assert_eq!(v.weight, 128.0);
    }

    #[test]
    fn plane_fusion_places_zero_crossing_at_depth() {
        let m = model(0.01);
        let f = flat_frame(1.0);
        let up = m.process_frame(&f).unwrap();
        assert!(!up.touched.is_empty());
        // voxels at z=0.99 and z=1.01 on the optical axis
        let near = m.get(BlockKey::new(0, 0, 12)).unwrap();
        let a = near.get(0, 0, 3); // z = 0.99
        let b = near.get(0, 0, 5); // z = 1.01
        assert!((a.tsdf - 0.01 / 0.06).abs() < 1e-4, "{}", a.tsdf);
        assert!((b.tsdf + 0.01 / 0.06).abs() < 1e-4, "{}", b.tsdf);
        assert_eq!(a.color, [200; 3]);
    }

    #[test]
    fn delete_and_reintegrate_restarts_weight() {
        let m = model(0.01);
        let f = flat_frame(1.0);
        m.process_frame(&f).unwrap();
        m.process_frame(&f).unwrap();
        let k = BlockKey::new(0, 0, 12);
        assert_eq!(m.get(k).unwrap().get(0, 0, 4).weight, 2.0);
        assert_eq!(m.delete_blocks(&[]), 0);
        assert_eq!(m.delete_blocks(&[k, BlockKey::new(99, 99, 99)]), 1);
        assert!(m.get(k).is_none());
        m.process_frame(&f).unwrap();
        assert_eq!(m.get(k).unwrap().get(0, 0, 4).weight, 1.0);
    }

    #[test]
    fn retirement_follows_the_frustum() {
        let m = model(0.01);
        let f = flat_frame(1.0);
        let up = m.process_frame(&f).unwrap();
        assert!(up.retired.is_empty());
        let visible = m.visible_blocks();
        let mut expect: Vec<BlockKey> = up.touched.iter().chain(&up.allocated).copied().collect();
        expect.sort();
        expect.dedup();
        assert_eq!(visible, expect);
        // unchanged frustum retires nothing
        assert!(m.retire_invisible(&m.frustum(Pose::IDENTITY)).is_empty());
        // turn around: everything retires, and the union is preserved
        let back = Pose::new(glam::Mat3::from_rotation_y(PI), Vec3::ZERO);
        let retired = m.retire_invisible(&m.frustum(back));
        assert_eq!(retired, visible);
        assert!(m.visible_blocks().is_empty());
        // updated again, visible again
        let up = m.process_frame(&f).unwrap();
        assert_eq!(m.visible_blocks(), up.touched);
    }

    #[test]
    fn fusion_is_order_insensitive_within_tolerance() {
        let a = model(0.01);
        let b = model(0.01);
        let f1 = flat_frame(1.0);
        let f2 = flat_frame(1.02);
        a.process_frame(&f1).unwrap();
        a.process_frame(&f2).unwrap();
        b.process_frame(&f2).unwrap();
        b.process_frame(&f1).unwrap();
        for k in a.blocks().keys() {
            let ba = a.get(k).unwrap();
            let bb = b.get(k).unwrap();
            for (va, vb) in ba.voxels.iter().zip(bb.voxels.iter()) {
                assert_eq!(va.weight, vb.weight);
                if va.weight > 0.0 {
                    assert!((va.tsdf - vb.tsdf).abs() <= 1e-4);
                }
            }
        }
    }
}
