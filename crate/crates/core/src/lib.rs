pub mod dataset;
pub mod ec;
pub mod geometry;
pub mod hash;
pub mod link;
pub mod mc;
pub mod meter;
pub mod rc;
pub mod scenario;
pub mod server;
pub mod stream;
pub mod voxel;
pub mod wire;
