//! Analytic ray-cast scenes: a small furnished room and a lone sphere.
//!
//! World frame is y-up. Depth is the camera-frame z of the first hit.

use glam::Vec3;

use super::SequenceHeader;
use crate::geometry::{CameraIntrinsics, Pose};
use crate::voxel::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    Room,
    Sphere,
}

impl std::str::FromStr for SceneKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "room" => Ok(Self::Room),
            "sphere" => Ok(Self::Sphere),
            other => Err(format!("unknown synthetic scene '{other}' (room|sphere)")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    /// Inside faces of an axis-aligned box.
    Shell { min: Vec3, max: Vec3 },
    Cuboid { min: Vec3, max: Vec3, color: [u8; 3] },
    Ball { center: Vec3, radius: f32, color: [u8; 3] },
}

/// A static scene of analytic shapes.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    shapes: Vec<Shape>,
}

impl SyntheticScene {
    /// Room of 1.2 x 1.0 x 1.2 m with a crate and a ball on the floor.
    pub fn room() -> Self {
        Self {
            shapes: vec![
                Shape::Shell { min: Vec3::new(-0.6, -0.5, -0.6), max: Vec3::new(0.6, 0.5, 0.6) },
                Shape::Cuboid {
                    min: Vec3::new(0.15, -0.5, 0.2),
                    max: Vec3::new(0.45, -0.25, 0.5),
                    color: [170, 110, 60],
                },
                Shape::Ball { center: Vec3::new(-0.3, -0.35, -0.3), radius: 0.15, color: [40, 90, 200] },
            ],
        }
    }

    pub fn sphere(radius: f32) -> Self {
        Self { shapes: vec![Shape::Ball { center: Vec3::ZERO, radius, color: [220, 60, 60] }] }
    }

    /// Distance along `dir` (unit length) to the first surface, with its colour.
    pub fn cast(&self, origin: Vec3, dir: Vec3) -> Option<(f32, [u8; 3])> {
        let mut best: Option<(f32, [u8; 3])> = None;
        for s in &self.shapes {
            let hit = match *s {
                Shape::Shell { min, max } => shell_hit(origin, dir, min, max).map(|(t, axis)| {
                    let p = origin + dir * t;
                    (t, wall_color(p, axis))
                }),
                Shape::Cuboid { min, max, color } => box_hit(origin, dir, min, max).map(|t| (t, color)),
                Shape::Ball { center, radius, color } => {
                    sphere_hit(origin, dir, center, radius).map(|t| (t, shade(color, origin + dir * t)))
                }
            };
            if let Some((t, c)) = hit {
                if best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, c));
                }
            }
        }
        best
    }

    pub fn render(&self, pose: Pose, k: &CameraIntrinsics, near: f32, far: f32, timestamp_us: u64) -> Frame {
        let n = (k.width * k.height) as usize;
        let mut depth = vec![0f32; n];
        let mut color = vec![0u8; 3 * n];
        for v in 0..k.height {
            for u in 0..k.width {
                let ray = k.ray(u as f32, v as f32);
                let dir = (pose.rotation * ray).normalize();
                if let Some((t, c)) = self.cast(pose.translation, dir) {
                    // camera z of the hit point
                    let z = t / ray.length();
                    if z >= near && z <= far {
                        let i = (v * k.width + u) as usize;
                        depth[i] = z;
                        color[3 * i..3 * i + 3].copy_from_slice(&c);
                    }
                }
            }
        }
        Frame { timestamp_us, pose, width: k.width, height: k.height, depth, color }
    }
}

fn shell_hit(o: Vec3, d: Vec3, min: Vec3, max: Vec3) -> Option<(f32, usize)> {
    let mut best: Option<(f32, usize)> = None;
    for axis in 0..3 {
        if d[axis].abs() < 1e-9 {
            continue;
        }
        let bound = if d[axis] > 0.0 { max[axis] } else { min[axis] };
        let t = (bound - o[axis]) / d[axis];
        if t > 0.0 && best.map_or(true, |(bt, _)| t < bt) {
            best = Some((t, axis));
        }
    }
    best
}

fn box_hit(o: Vec3, d: Vec3, min: Vec3, max: Vec3) -> Option<f32> {
    let inv = d.recip();
    let t0 = (min - o) * inv;
    let t1 = (max - o) * inv;
    let tmin = t0.min(t1).max_element();
    let tmax = t0.max(t1).min_element();
    (tmax >= tmin.max(0.0) && tmin > 0.0).then_some(tmin)
}

fn sphere_hit(o: Vec3, d: Vec3, c: Vec3, r: f32) -> Option<f32> {
    let oc = o - c;
    let b = oc.dot(d);
    let disc = b * b - (oc.length_squared() - r * r);
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    [-b - s, -b + s].into_iter().find(|&t| t > 0.0)
}

fn wall_color(p: Vec3, axis: usize) -> [u8; 3] {
    match axis {
        // floor / ceiling: 10 cm checker
        1 => {
            let c = ((p.x / 0.1).floor() as i32 + (p.z / 0.1).floor() as i32).rem_euclid(2);
            if p.y < 0.0 {
                if c == 0 { [120, 120, 110] } else { [90, 90, 80] }
            } else {
                [235, 235, 230]
            }
        }
        0 => stripes([200, 190, 160], p.y),
        _ => stripes([170, 200, 180], p.y + 0.07),
    }
}

fn stripes(base: [u8; 3], coord: f32) -> [u8; 3] {
    if ((coord / 0.15).floor() as i32).rem_euclid(2) == 0 {
        base
    } else {
        base.map(|c| c.saturating_sub(25))
    }
}

fn shade(color: [u8; 3], p: Vec3) -> [u8; 3] {
    let f = 0.75 + 0.25 * (p.y * 4.0).sin();
    color.map(|c| (f32::from(c) * f).round().clamp(0.0, 255.0) as u8)
}

/// A scene together with a camera trajectory.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub kind: SceneKind,
    pub scene: SyntheticScene,
    pub header: SequenceHeader,
    pub frames: usize,
    pub fps: f32,
}

impl SyntheticSequence {
    pub const SPHERE_RADIUS: f32 = 0.25;

    pub fn new(kind: SceneKind, frames: usize) -> Self {
        let (scene, far) = match kind {
            SceneKind::Room => (SyntheticScene::room(), 3.0),
            SceneKind::Sphere => (SyntheticScene::sphere(Self::SPHERE_RADIUS), 2.0),
        };
        let intrinsics = CameraIntrinsics::centered(160, 120, 70.0);
        Self { kind, scene, header: SequenceHeader { intrinsics, near: 0.1, far }, frames, fps: 30.0 }
    }

    pub fn with_resolution(mut self, width: u32, height: u32) -> Self {
        self.header.intrinsics = CameraIntrinsics::centered(width, height, 70.0);
        self
    }

    /// Room: one slow turn around the room centre with a slight downward tilt.
    /// Sphere: a full orbit at 0.9 m looking at the centre.
    pub fn pose(&self, i: usize) -> Pose {
        let s = i as f32 / self.frames.max(1) as f32;
        let ang = s * std::f32::consts::TAU;
        match self.kind {
            SceneKind::Room => {
                let eye = Vec3::new(0.08 * ang.cos(), 0.05, 0.08 * ang.sin());
                let look = Vec3::new(ang.sin(), -0.45 + 0.15 * (2.0 * ang).sin(), ang.cos());
                Pose::look_at(eye, eye + look, Vec3::Y)
            }
            SceneKind::Sphere => {
                let eye = Vec3::new(0.9 * ang.sin(), 0.3 * (ang * 2.0).sin(), 0.9 * ang.cos());
                Pose::look_at(eye, Vec3::ZERO, Vec3::Y)
            }
        }
    }

    pub fn frame(&self, i: usize) -> Frame {
        let ts = (i as f64 * 1e6 / f64::from(self.fps)) as u64;
        let h = &self.header;
        self.scene.render(self.pose(i), &h.intrinsics, h.near, h.far, ts)
    }

    pub fn iter(&self) -> impl Iterator<Item = Frame> + '_ {
        (0..self.frames).map(move |i| self.frame(i))
    }

    pub fn into_frames(self) -> impl Iterator<Item = Frame> + Send {
        (0..self.frames).map(move |i| self.frame(i))
    }
}
