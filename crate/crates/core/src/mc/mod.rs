//! Marching-Cubes index encoding of TSDF blocks and client-side triangulation.

mod encode;
mod mesh;
mod tables;

pub use encode::{
    affected_mc_blocks, apply_cutoff, compute_mc_index, recompute_mc_block, to_table_index, McBlock,
    McVoxel, MC_BLOCK_BYTES, MC_VOXEL_BYTES,
};
pub use mesh::{
    build_mesh_block, choose_lod, region_of, triangulate_block, triangulate_interpolated, Lod,
    LodPoint, LodThresholds, MeshBlock, TriangleMesh, Vertex, REGION_EDGE,
};
