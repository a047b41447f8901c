//! TSDF block to Marching-Cubes-index block conversion.
//!
//! Corner `k` of a cube sits at `(k & 1, k >> 1 & 1, k >> 2 & 1)` from the cube
//! origin and sets bit `k` of the index when inside (tsdf < 0). The triangle
//! table uses the classic corner numbering; [`to_table_index`] converts.

use crate::geometry::BLOCK_VOXELS;
use crate::hash::BlockKey;
use crate::voxel::{voxel_index, TsdfBlock, TsdfVoxel};

pub const MC_VOXEL_BYTES: usize = 4;
pub const MC_BLOCK_BYTES: usize = BLOCK_VOXELS * MC_VOXEL_BYTES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct McVoxel {
    pub index: u8,
    pub color: [u8; 3],
}

impl McVoxel {
    pub fn new(index: u8, color: [u8; 3]) -> Self {
        Self { index, color }
    }

    pub fn to_bytes(self) -> [u8; 4] {
        [self.index, self.color[0], self.color[1], self.color[2]]
    }

    pub fn from_bytes(b: [u8; 4]) -> Self {
        Self { index: b[0], color: [b[1], b[2], b[3]] }
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct McBlock {
    pub voxels: Box<[McVoxel; BLOCK_VOXELS]>,
}

impl Default for McBlock {
    fn default() -> Self {
        Self { voxels: Box::new([McVoxel::default(); BLOCK_VOXELS]) }
    }
}

impl std::fmt::Debug for McBlock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "McBlock({} surface voxels)", self.surface_voxels())
    }
}

impl McBlock {
    pub fn get(&self, x: usize, y: usize, z: usize) -> McVoxel {
        self.voxels[voxel_index(x, y, z)]
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.iter().all(|v| v.index == 0)
    }

    pub fn surface_voxels(&self) -> usize {
        self.voxels.iter().filter(|v| v.index != 0).count()
    }

    pub fn write_le(&self, out: &mut Vec<u8>) {
        out.reserve(MC_BLOCK_BYTES);
        for v in self.voxels.iter() {
            out.extend_from_slice(&v.to_bytes());
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MC_BLOCK_BYTES);
        self.write_le(&mut out);
        out
    }

    /// `b` must hold exactly [`MC_BLOCK_BYTES`] bytes.
    pub fn read_le(b: &[u8]) -> Self {
        let mut block = Self::default();
        for (v, c) in block.voxels.iter_mut().zip(b.chunks_exact(MC_VOXEL_BYTES)) {
            *v = McVoxel::from_bytes([c[0], c[1], c[2], c[3]]);
        }
        block
    }
}

/// Cube case from the eight corners in local corner order.
///
/// Any unobserved corner yields 0.
pub fn compute_mc_index(corners: &[TsdfVoxel; 8]) -> u8 {
    let mut index = 0u8;
    for (k, c) in corners.iter().enumerate() {
        if !c.is_observed() {
            return 0;
        }
        if c.tsdf < 0.0 {
            index |= 1 << k;
        }
    }
    index
}

/// Cases without triangles carry no information on the wire.
pub fn apply_cutoff(v: McVoxel) -> McVoxel {
    if v.index == 0 || v.index == 255 {
        McVoxel::default()
    } else {
        v
    }
}

/// Local corner order to the classic table's corner order (a swap of 2/3 and 6/7).
const LOCAL_TO_TABLE: [u8; 8] = [0, 1, 3, 2, 4, 5, 7, 6];

/// Re-number the bits of a wire index into the triangle table's corner order.
pub fn to_table_index(index: u8) -> u8 {
    let mut out = 0u8;
    for (k, &t) in LOCAL_TO_TABLE.iter().enumerate() {
        if index & (1 << k) != 0 {
            out |= 1 << t;
        }
    }
    out
}

/// The block itself and its seven neighbours in negative direction: every
/// block whose cubes read corner voxels from `updated`.
pub fn affected_mc_blocks(updated: BlockKey) -> [BlockKey; 8] {
    let mut out = [updated; 8];
    for (i, k) in out.iter_mut().enumerate() {
        *k = updated.offset(-((i & 1) as i32), -((i >> 1 & 1) as i32), -((i >> 2 & 1) as i32));
    }
    out
}

/// The 9x9x9 voxel neighbourhood a block's cubes read from.
pub(crate) struct Neighbourhood {
    voxels: Vec<TsdfVoxel>,
}

impl Neighbourhood {
    pub(crate) fn gather<F>(key: BlockKey, mut lookup: F) -> Option<Self>
    where
        F: FnMut(BlockKey) -> Option<TsdfBlock>,
    {
        let centre = lookup(key)?;
        let unobserved = TsdfVoxel { tsdf: 1.0, weight: 0.0, color: [0; 3] };
        let mut voxels = vec![unobserved; 9 * 9 * 9];
        for dz in 0..2usize {
            for dy in 0..2usize {
                for dx in 0..2usize {
                    let block = if (dx, dy, dz) == (0, 0, 0) {
                        Some(centre.clone())
                    } else {
                        lookup(key.offset(dx as i32, dy as i32, dz as i32))
                    };
                    let Some(block) = block else { continue };
                    let range = |d: usize| if d == 0 { 0..8 } else { 0..1 };
                    for z in range(dz) {
                        for y in range(dy) {
                            for x in range(dx) {
                                let (gx, gy, gz) = (x + 8 * dx, y + 8 * dy, z + 8 * dz);
                                voxels[gx + 9 * gy + 81 * gz] = *block.get(x, y, z);
                            }
                        }
                    }
                }
            }
        }
        Some(Self { voxels })
    }

    #[inline]
    pub(crate) fn at(&self, x: usize, y: usize, z: usize) -> &TsdfVoxel {
        &self.voxels[x + 9 * y + 81 * z]
    }

    pub(crate) fn corners(&self, x: usize, y: usize, z: usize) -> [TsdfVoxel; 8] {
        std::array::from_fn(|k| *self.at(x + (k & 1), y + (k >> 1 & 1), z + (k >> 2 & 1)))
    }
}

/// Full recomputation of one MC block from the TSDF model.
///
/// Corners on the positive faces come from the +1 neighbours; missing blocks
/// count as unobserved. A missing centre block gives an all-zero block.
pub fn recompute_mc_block<F>(key: BlockKey, lookup: F) -> McBlock
where
    F: FnMut(BlockKey) -> Option<TsdfBlock>,
{
    let mut out = McBlock::default();
    let Some(n) = Neighbourhood::gather(key, lookup) else { return out };
    for z in 0..8 {
        for y in 0..8 {
            for x in 0..8 {
                let corners = n.corners(x, y, z);
                let v = McVoxel::new(compute_mc_index(&corners), corners[0].color);
                out.voxels[voxel_index(x, y, z)] = apply_cutoff(v);
            }
        }
    }
    out
}
