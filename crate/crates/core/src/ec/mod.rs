//! Exploration client: request loop, local MC model, mesh regions and completeness.

mod client;
mod model;

use std::str::FromStr;

use glam::Vec3;

pub use client::{spawn, EcConfig, EcCounters, EcHandle};
pub use model::{completeness, LocalModel};

use crate::geometry::Pose;

/// Camera path as timed eye/target waypoints, linearly interpolated, y up.
///
/// Text form: one waypoint per line, `t ex ey ez tx ty tz`; `#` starts a comment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoseScript {
    waypoints: Vec<(f64, Vec3, Vec3)>,
}

impl PoseScript {
    pub fn fixed(eye: Vec3, target: Vec3) -> Self {
        Self { waypoints: vec![(0.0, eye, target)] }
    }

    pub fn from_waypoints(mut waypoints: Vec<(f64, Vec3, Vec3)>) -> Self {
        waypoints.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self { waypoints }
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn at(&self, t: f64) -> Pose {
        let w = &self.waypoints;
        let (eye, target) = match w.iter().position(|p| p.0 > t) {
            _ if w.is_empty() => return Pose::IDENTITY,
            Some(0) => (w[0].1, w[0].2),
            None => (w[w.len() - 1].1, w[w.len() - 1].2),
            Some(i) => {
                let (a, b) = (&w[i - 1], &w[i]);
                let s = ((t - a.0) / (b.0 - a.0)) as f32;
                (a.1.lerp(b.1, s), a.2.lerp(b.2, s))
            }
        };
        Pose::look_at(eye, target, Vec3::Y)
    }
}

impl FromStr for PoseScript {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut waypoints = Vec::new();
        for (n, line) in s.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|x| x.parse::<f64>().map_err(|e| format!("line {}: {e}", n + 1)))
                .collect::<Result<_, _>>()?;
            if v.len() != 7 {
                return Err(format!("line {}: expected 7 numbers, got {}", n + 1, v.len()));
            }
            let p = |i: usize| Vec3::new(v[i] as f32, v[i + 1] as f32, v[i + 2] as f32);
            waypoints.push((v[0], p(1), p(4)));
        }
        Ok(Self::from_waypoints(waypoints))
    }
}
