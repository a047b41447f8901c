//! Camera model, poses and the conservative block-vs-frustum test.
//!
//! Camera frame: +z forward, +x right, +y down (pixel rows grow downwards).

use glam::{Mat3, Vec3};

use crate::hash::BlockKey;

/// Voxels per block edge.
pub const BLOCK_EDGE: i32 = 8;
/// Voxels per block.
pub const BLOCK_VOXELS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f32, fy: f32, cx: f32, cy: f32, width: u32, height: u32) -> Self {
        Self { fx, fy, cx, cy, width, height }
    }

    /// Pinhole camera with principal point at the image centre.
    pub fn centered(width: u32, height: u32, hfov_deg: f32) -> Self {
        let fx = (width as f32 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        Self::new(fx, fx, width as f32 / 2.0, height as f32 / 2.0, width, height)
    }

    pub fn is_valid(&self) -> bool {
        self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && (0.0..self.width as f32).contains(&self.cx)
            && (0.0..self.height as f32).contains(&self.cy)
    }

    /// Camera-frame direction (z = 1) through pixel coordinates `(u, v)`.
    pub fn ray(&self, u: f32, v: f32) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Nearest pixel of a camera-frame point, if it lies in front and inside the image.
    pub fn project(&self, p: Vec3) -> Option<(u32, u32)> {
        if p.z <= 0.0 {
            return None;
        }
        let u = (self.fx * p.x / p.z + self.cx).round();
        let v = (self.fy * p.y / p.z + self.cy).round();
        if u < 0.0 || v < 0.0 || u >= self.width as f32 || v >= self.height as f32 {
            return None;
        }
        Some((u as u32, v as u32))
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Pose {
    pub const IDENTITY: Pose = Pose { rotation: Mat3::IDENTITY, translation: Vec3::ZERO };

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    /// Camera at `eye` looking at `target`; `up` is the approximate world up.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(up).normalize();
        let y = z.cross(x);
        Self { rotation: Mat3::from_cols(x, y, z), translation: eye }
    }

    pub fn is_valid(&self) -> bool {
        (self.rotation.determinant() - 1.0).abs() <= 1e-5
    }

    pub fn camera_to_world(&self, p: Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Row-major rotation followed by translation.
    pub fn to_array(&self) -> [f32; 12] {
        let r = self.rotation.transpose().to_cols_array();
        let t = self.translation;
        [r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8], t.x, t.y, t.z]
    }

    pub fn from_array(a: &[f32; 12]) -> Self {
        let rows = Mat3::from_cols_array(&[a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8]]);
        Self { rotation: rows.transpose(), translation: Vec3::new(a[9], a[10], a[11]) }
    }
}

/// World-space bounds of a block.
pub fn block_aabb(key: BlockKey, voxel_size: f32) -> (Vec3, Vec3) {
    let e = BLOCK_EDGE as f32 * voxel_size;
    let min = Vec3::new(key.x as f32, key.y as f32, key.z as f32) * e;
    (min, min + Vec3::splat(e))
}

#[derive(Debug, Clone, Copy)]
struct Plane {
    normal: Vec3,
    d: f32,
}

impl Plane {
    fn distance(&self, p: Vec3) -> f32 {
        self.normal.dot(p) + self.d
    }
}

/// View volume of a camera, optionally grown by `margin` meters.
#[derive(Debug, Clone, Copy)]
pub struct Frustum {
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
    pub near: f32,
    pub far: f32,
    pub margin: f32,
    planes: [Plane; 6],
}

impl Frustum {
    pub fn new(pose: Pose, intrinsics: CameraIntrinsics, near: f32, far: f32, margin: f32) -> Self {
        let k = &intrinsics;
        let w = k.width as f32;
        let h = k.height as f32;
        // inward normals in the camera frame; all side planes pass through the centre
        let cam = [
            (Vec3::new(1.0, 0.0, k.cx / k.fx), 0.0),
            (Vec3::new(-1.0, 0.0, (w - k.cx) / k.fx), 0.0),
            (Vec3::new(0.0, 1.0, k.cy / k.fy), 0.0),
            (Vec3::new(0.0, -1.0, (h - k.cy) / k.fy), 0.0),
            (Vec3::new(0.0, 0.0, -1.0), far),
            // everything in front of the camera centre; a block around the camera counts as seen
            (Vec3::new(0.0, 0.0, 1.0), 0.0),
        ];
        let planes = cam.map(|(n, d)| {
            let len = n.length();
            let n_w = pose.rotation * (n / len);
            Plane { normal: n_w, d: d / len - n_w.dot(pose.translation) }
        });
        Self { pose, intrinsics, near, far, margin, planes }
    }

    /// Frustum from request-style intrinsics; the image size is taken as twice the principal point.
    pub fn from_request(pose: Pose, fx: f32, fy: f32, cx: f32, cy: f32, near: f32, far: f32) -> Self {
        let k = CameraIntrinsics::new(fx, fy, cx, cy, (2.0 * cx).ceil().max(1.0) as u32, (2.0 * cy).ceil().max(1.0) as u32);
        Self::new(pose, k, near, far, 0.0)
    }

    pub fn with_margin(mut self, margin: f32) -> Self {
        self.margin = margin;
        self
    }

    /// Conservative AABB test: false only if the box lies fully outside one plane by more than `margin`.
    pub fn intersects_aabb(&self, min: Vec3, max: Vec3) -> bool {
        self.planes.iter().all(|p| {
            let v = Vec3::select(p.normal.cmpge(Vec3::ZERO), max, min);
            p.distance(v) >= -self.margin
        })
    }

    pub fn intersects_block(&self, key: BlockKey, voxel_size: f32) -> bool {
        let (min, max) = block_aabb(key, voxel_size);
        self.intersects_aabb(min, max)
    }

    pub fn contains_point(&self, p: Vec3) -> bool {
        self.intersects_aabb(p, p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 40.0, 100, 80)
    }

    #[test]
    fn pose_array_roundtrip_is_row_major() {
        let p = Pose::look_at(Vec3::new(1.0, 2.0, 3.0), Vec3::ZERO, Vec3::Y);
        let a = p.to_array();
        assert_eq!(a[0], p.rotation.x_axis.x);
        assert_eq!(a[1], p.rotation.y_axis.x);
        assert_eq!(&a[9..], &[1.0, 2.0, 3.0]);
        assert_eq!(Pose::from_array(&a), p);
        assert!(p.is_valid());
    }

    #[test]
    fn world_camera_transforms_invert() {
        let p = Pose::look_at(Vec3::new(0.3, -0.2, 1.0), Vec3::new(0.0, 0.0, 2.0), -Vec3::Y);
        let q = Vec3::new(0.5, 0.1, -0.7);
        assert!((p.camera_to_world(p.world_to_camera(q)) - q).length() < 1e-5);
        let fwd = p.world_to_camera(Vec3::new(0.0, 0.0, 2.0));
        assert!(fwd.x.abs() < 1e-5 && fwd.y.abs() < 1e-5 && fwd.z > 0.0);
    }

    #[test]
    fn projection_rounds_to_nearest_pixel() {
        let k = cam();
        assert_eq!(k.project(Vec3::new(0.0, 0.0, 1.0)), Some((50, 40)));
        assert_eq!(k.project(Vec3::new(0.0, 0.0, -1.0)), None);
        assert_eq!(k.project(Vec3::new(10.0, 0.0, 1.0)), None);
    }

    #[test]
    fn block_containing_camera_is_visible() {
        let f = Frustum::new(Pose::IDENTITY, cam(), 0.1, 4.0, 0.0);
        assert!(f.intersects_block(BlockKey::new(0, 0, 0), 0.01));
        assert!(f.intersects_block(BlockKey::new(-1, -1, -1), 0.01));
    }

    #[test]
    fn block_far_behind_camera_is_not_visible() {
        let f = Frustum::new(Pose::IDENTITY, cam(), 0.1, 4.0, 0.0);
        // 8 m behind, edge 0.08 m
        assert!(!f.intersects_block(BlockKey::new(0, 0, -100), 0.01));
    }

    #[test]
    fn lateral_plane_respects_margin() {
        // right plane: x = z * 0.5; at z = 1 the boundary is x = 0.5
        let f = Frustum::new(Pose::IDENTITY, cam(), 0.1, 4.0, 0.0);
        let n = Vec3::new(-1.0, 0.0, 0.5).normalize();
        let inside = Vec3::new(0.5 - 0.05, 0.0, 1.0);
        let outside = Vec3::new(0.5 + 0.05, 0.0, 1.0);
        assert!(f.contains_point(inside));
        assert!(!f.contains_point(outside));
        let dist = -(n.dot(outside));
        assert!(f.with_margin(dist + 1e-4).contains_point(outside));
        assert!(!f.with_margin(dist - 1e-4).contains_point(outside));
    }

    #[test]
    fn far_plane_and_margin() {
        let f = Frustum::new(Pose::IDENTITY, cam(), 0.1, 4.0, 0.0);
        assert!(f.contains_point(Vec3::new(0.0, 0.0, 3.99)));
        assert!(!f.contains_point(Vec3::new(0.0, 0.0, 4.2)));
        assert!(f.with_margin(0.3).contains_point(Vec3::new(0.0, 0.0, 4.2)));
    }

    #[test]
    fn rotated_frusta_are_disjoint() {
        let a = Frustum::new(Pose::IDENTITY, cam(), 0.1, 4.0, 0.0);
        let b_pose = Pose::new(Mat3::from_rotation_y(std::f32::consts::PI), Vec3::ZERO);
        let b = Frustum::new(b_pose, cam(), 0.1, 4.0, 0.0);
        let p = Vec3::new(0.1, 0.0, 2.0);
        assert!(a.contains_point(p));
        assert!(!b.contains_point(p));
    }

    #[test]
    fn request_frustum_uses_twice_principal_point() {
        let f = Frustum::from_request(Pose::IDENTITY, 100.0, 100.0, 50.0, 40.0, 0.1, 4.0);
        assert_eq!((f.intrinsics.width, f.intrinsics.height), (100, 80));
    }
}
