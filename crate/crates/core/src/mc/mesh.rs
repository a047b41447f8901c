//! Triangulation of MC blocks, 15^3-block mesh regions and point LoDs.

use std::collections::BTreeMap;

use glam::{IVec3, Vec3};

use super::encode::{to_table_index, McBlock, Neighbourhood};
use super::tables::TRI_TABLE;
use crate::geometry::BLOCK_EDGE;
use crate::hash::BlockKey;
use crate::voxel::TsdfBlock;

/// Voxel blocks per mesh-region edge.
pub const REGION_EDGE: i32 = 15;

/// Classic corner positions (table numbering).
const TABLE_CORNERS: [[u8; 3]; 8] =
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]];
/// Classic edges as table-corner pairs.
const TABLE_EDGES: [(usize, usize); 12] =
    [(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4), (0, 4), (1, 5), (2, 6), (3, 7)];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vertex {
    pub position: Vec3,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vertex>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn append(&mut self, other: &TriangleMesh) {
        let base = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles.extend(other.triangles.iter().map(|t| t.map(|i| i + base)));
    }
}

fn edge_endpoints(edge: usize) -> (IVec3, IVec3) {
    let (a, b) = TABLE_EDGES[edge];
    let c = |i: usize| IVec3::new(TABLE_CORNERS[i][0] as i32, TABLE_CORNERS[i][1] as i32, TABLE_CORNERS[i][2] as i32);
    (c(a), c(b))
}

fn block_origin(key: BlockKey) -> IVec3 {
    IVec3::new(key.x, key.y, key.z) * BLOCK_EDGE
}

/// Triangles of every non-zero cube, vertices at edge midpoints, flat cube colour.
pub fn triangulate_block(key: BlockKey, mc: &McBlock, voxel_size: f32) -> TriangleMesh {
    let mut mesh = TriangleMesh::default();
    let origin = block_origin(key);
    for z in 0..8 {
        for y in 0..8 {
            for x in 0..8 {
                let v = mc.get(x, y, z);
                if v.index == 0 {
                    continue;
                }
                let cube = origin + IVec3::new(x as i32, y as i32, z as i32);
                for &e in TRI_TABLE[to_table_index(v.index) as usize].iter().take_while(|&&e| e >= 0) {
                    let (a, b) = edge_endpoints(e as usize);
                    let mid = (cube + a).as_vec3().lerp((cube + b).as_vec3(), 0.5);
                    mesh.vertices.push(Vertex { position: mid * voxel_size, color: v.color });
                }
            }
        }
    }
    let n = mesh.vertices.len() as u32;
    mesh.triangles = (0..n / 3).map(|t| [3 * t, 3 * t + 1, 3 * t + 2]).collect();
    mesh
}

/// Reference triangulation straight from TSDF values with linear edge
/// interpolation. Vertices come out in the same order as [`triangulate_block`]
/// on the encoded block.
pub fn triangulate_interpolated<F>(key: BlockKey, voxel_size: f32, lookup: F) -> TriangleMesh
where
    F: FnMut(BlockKey) -> Option<TsdfBlock>,
{
    let mut mesh = TriangleMesh::default();
    let Some(n) = Neighbourhood::gather(key, lookup) else { return mesh };
    let origin = block_origin(key);
    let local_of_table = [0usize, 1, 3, 2, 4, 5, 7, 6];
    for z in 0..8 {
        for y in 0..8 {
            for x in 0..8 {
                let corners = n.corners(x, y, z);
                let index = super::encode::apply_cutoff(super::McVoxel::new(
                    super::encode::compute_mc_index(&corners),
                    corners[0].color,
                ))
                .index;
                if index == 0 {
                    continue;
                }
                let cube = origin + IVec3::new(x as i32, y as i32, z as i32);
                for &e in TRI_TABLE[to_table_index(index) as usize].iter().take_while(|&&e| e >= 0) {
                    let (ta, tb) = TABLE_EDGES[e as usize];
                    let fa = corners[local_of_table[ta]].tsdf;
                    let fb = corners[local_of_table[tb]].tsdf;
                    let t = if (fa - fb).abs() > f32::EPSILON { fa / (fa - fb) } else { 0.5 };
                    let (a, b) = edge_endpoints(e as usize);
                    let p = (cube + a).as_vec3().lerp((cube + b).as_vec3(), t.clamp(0.0, 1.0));
                    mesh.vertices.push(Vertex { position: p * voxel_size, color: corners[0].color });
                }
            }
        }
    }
    let count = mesh.vertices.len() as u32;
    mesh.triangles = (0..count / 3).map(|t| [3 * t, 3 * t + 1, 3 * t + 2]).collect();
    mesh
}

/// Mesh region containing a voxel block.
pub fn region_of(key: BlockKey) -> BlockKey {
    key.div_floor(REGION_EDGE)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LodPoint {
    pub position: Vec3,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeshBlock {
    pub key: BlockKey,
    pub mesh: TriangleMesh,
    pub lod1: Vec<LodPoint>,
    pub lod2: Vec<LodPoint>,
    pub lod3: Vec<LodPoint>,
}

fn lod_points(surface: &[(IVec3, [u8; 3])], group: i32, voxel_size: f32) -> Vec<LodPoint> {
    let mut groups: BTreeMap<(i32, i32, i32), ([u32; 3], u32)> = BTreeMap::new();
    for &(g, c) in surface {
        let k = g.div_euclid(IVec3::splat(group));
        let e = groups.entry((k.x, k.y, k.z)).or_insert(([0; 3], 0));
        for i in 0..3 {
            e.0[i] += u32::from(c[i]);
        }
        e.1 += 1;
    }
    groups
        .into_iter()
        .map(|((x, y, z), (sum, n))| {
            let centre = (IVec3::new(x, y, z).as_vec3() + Vec3::splat(0.5)) * group as f32;
            LodPoint {
                position: centre * voxel_size,
                color: sum.map(|s| ((s as f32) / n as f32).round() as u8),
            }
        })
        .collect()
}

/// Triangulate the member blocks of one region and derive its three point LoDs.
///
/// Blocks outside the region are ignored.
pub fn build_mesh_block<'a, I>(region: BlockKey, blocks: I, voxel_size: f32) -> MeshBlock
where
    I: IntoIterator<Item = (BlockKey, &'a McBlock)>,
{
    let mut members: Vec<(BlockKey, &McBlock)> =
        blocks.into_iter().filter(|(k, _)| region_of(*k) == region).collect();
    members.sort_by_key(|(k, _)| *k);
    let mut out = MeshBlock { key: region, ..MeshBlock::default() };
    let mut surface = Vec::new();
    for (k, b) in members {
        out.mesh.append(&triangulate_block(k, b, voxel_size));
        let origin = block_origin(k);
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    let v = b.get(x, y, z);
                    if v.index != 0 {
                        surface.push((origin + IVec3::new(x as i32, y as i32, z as i32), v.color));
                    }
                }
            }
        }
    }
    out.lod1 = lod_points(&surface, 1, voxel_size);
    out.lod2 = lod_points(&surface, 2, voxel_size);
    out.lod3 = lod_points(&surface, 4, voxel_size);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Lod {
    Mesh,
    Lod1,
    Lod2,
    Lod3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LodThresholds {
    pub lod1: f32,
    pub lod2: f32,
    pub lod3: f32,
}

impl Default for LodThresholds {
    fn default() -> Self {
        Self { lod1: 5.0, lod2: 10.0, lod3: 20.0 }
    }
}

/// Half-open distance bands: a distance equal to a threshold picks the coarser level.
pub fn choose_lod(distance: f32, t: &LodThresholds) -> Lod {
    if distance < t.lod1 {
        Lod::Mesh
    } else if distance < t.lod2 {
        Lod::Lod1
    } else if distance < t.lod3 {
        Lod::Lod2
    } else {
        Lod::Lod3
    }
}
