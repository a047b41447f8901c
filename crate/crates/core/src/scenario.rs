//! Declarative end-to-end runs: one server, one reconstruction client and any number of
//! exploration clients in one process, talking over localhost TCP.
//!
//! Spec file (TOML):
//!
//! ```toml
//! name = "room"
//! scene = "room"          # room | sphere, or `dataset = "seq.vcseq"`
//! frames = 240
//! width = 160             # optional synthetic resolution
//! height = 120
//! voxel = 0.005
//! codec = "zstd"          # identity | deflate | zstd
//! speed = 0.0             # replay speed, 0 = back to back
//! timeout_s = 240
//!
//! [rc]
//! package = 512
//! rate = 100
//!
//! [[ec]]
//! max_blocks = 512
//! rate = 100
//! strategy = "random"     # random | visible | order
//! after_rc = false        # true: start once the reconstruction is fully streamed
//! discard = false
//!
//! [[outage]]
//! ec = 0
//! at_s = 1.0
//! duration_s = 5.0
//!
//! [[reset]]
//! ec = 0
//! at_s = 2.0
//! ```
//!
//! Clients with `after_rc = true` run one after another, each alone on the link.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::Deserialize;

use crate::dataset::{SceneKind, SequenceHeader, SequenceReader, SyntheticSequence};
use crate::ec::{self, EcConfig, EcHandle, LocalModel};
use crate::hash::{BlockKey, HashConfig};
use crate::meter::Activity;
use crate::rc::{self, RcConfig, RcRunConfig, RcStatus, Reconstruction};
use crate::server::net::{self, ListenConfig};
use crate::server::{Server, ServerConfig};
use crate::voxel::{Frame, FusionConfig};
use crate::wire::{Codec, Role, Strategy};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub scene: Option<String>,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default)]
    pub width: Option<u32>,
    #[serde(default)]
    pub height: Option<u32>,
    #[serde(default = "default_voxel")]
    pub voxel: f32,
    #[serde(default)]
    pub truncation: Option<f32>,
    #[serde(default = "default_codec")]
    pub codec: String,
    #[serde(default)]
    pub speed: f64,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_buckets")]
    pub buckets: u32,
    #[serde(default)]
    pub rc: RcSpec,
    #[serde(default)]
    pub ec: Vec<EcSpec>,
    #[serde(default)]
    pub outage: Vec<OutageSpec>,
    #[serde(default)]
    pub reset: Vec<ResetSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RcSpec {
    #[serde(default = "default_package")]
    pub package: usize,
    #[serde(default = "default_rate")]
    pub rate: f64,
}

impl Default for RcSpec {
    fn default() -> Self {
        Self { package: default_package(), rate: default_rate() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EcSpec {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "default_package_u32")]
    pub max_blocks: u32,
    #[serde(default = "default_rate")]
    pub rate: f64,
    #[serde(default = "default_strategy")]
    pub strategy: String,
    #[serde(default)]
    pub after_rc: bool,
    #[serde(default)]
    pub discard: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutageSpec {
    pub ec: usize,
    pub at_s: f64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResetSpec {
    pub ec: usize,
    pub at_s: f64,
}

fn default_name() -> String {
    "scenario".into()
}
fn default_frames() -> usize {
    240
}
fn default_voxel() -> f32 {
    0.005
}
fn default_codec() -> String {
    "zstd".into()
}
fn default_timeout() -> f64 {
    240.0
}
fn default_buckets() -> u32 {
    1 << 17
}
fn default_package() -> usize {
    512
}
fn default_package_u32() -> u32 {
    512
}
fn default_rate() -> f64 {
    100.0
}
fn default_strategy() -> String {
    "random".into()
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("bad scenario spec: {0}")]
    Spec(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("scenario failed: {0}")]
    Failed(String),
}

impl ScenarioSpec {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let spec: Self = toml::from_str(text).map_err(|e| ScenarioError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Spec(m));
        if self.scene.is_some() == self.dataset.is_some() {
            return bad("set exactly one of `scene` and `dataset`".into());
        }
        if let Some(s) = &self.scene {
            s.parse::<SceneKind>().map_err(ScenarioError::Spec)?;
        }
        self.codec.parse::<Codec>().map_err(|e| ScenarioError::Spec(e.to_string()))?;
        if self.rc.package == 0 {
            return bad("rc.package must be at least 1".into());
        }
        for (i, e) in self.ec.iter().enumerate() {
            e.strategy.parse::<Strategy>().map_err(ScenarioError::Spec)?;
            if e.max_blocks == 0 || !(e.rate > 0.0) {
                return bad(format!("ec {i}: max_blocks and rate must be positive"));
            }
        }
        for o in &self.outage {
            if o.ec >= self.ec.len() {
                return bad(format!("outage refers to missing ec {}", o.ec));
            }
        }
        for r in &self.reset {
            if r.ec >= self.ec.len() {
                return bad(format!("reset refers to missing ec {}", r.ec));
            }
        }
        Ok(())
    }

    pub fn fusion(&self) -> FusionConfig {
        let mut f = FusionConfig::with_voxel_size(self.voxel);
        if let Some(t) = self.truncation {
            f.truncation = t;
        } else {
            f.truncation = f.truncation.max(4.0 * self.voxel);
        }
        f
    }
}

/// One link's traffic.
#[derive(Debug, Clone, Default)]
pub struct LinkReport {
    pub name: String,
    pub package: usize,
    /// All bytes on the link over the whole run.
    pub bytes: u64,
    pub blocks: u64,
    pub activity: Option<Activity>,
}

impl LinkReport {
    /// Bytes per second while the link carried blocks.
    pub fn mean_bandwidth(&self) -> f64 {
        self.activity.map_or(0.0, |a| a.bytes_per_second())
    }
}

#[derive(Debug, Clone, Default)]
pub struct EcOutcome {
    pub link: LinkReport,
    pub discard: bool,
    pub local_blocks: usize,
    pub missing: usize,
    pub extra: usize,
    pub differing: usize,
    pub completeness: f64,
    pub reconnects: u64,
    pub deletes: u64,
    /// Seconds from scenario start until this client held the final model.
    pub finished_s: f64,
}

impl EcOutcome {
    pub fn is_exact(&self) -> bool {
        self.discard || (self.missing == 0 && self.extra == 0 && self.differing == 0)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ScenarioReport {
    pub name: String,
    pub seconds: f64,
    pub rc: LinkReport,
    pub ecs: Vec<EcOutcome>,
    pub tsdf_blocks: usize,
    pub mc_blocks: usize,
    pub rc_blocks: usize,
    /// Per-second samples: t_s, rc bytes, then bytes for each exploration client.
    pub csv: String,
}

impl ScenarioReport {
    pub fn all_exact(&self) -> bool {
        self.ecs.iter().all(EcOutcome::is_exact) && self.tsdf_blocks == self.rc_blocks
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario {}: {:.1} s, tsdf {} blocks (rc {}), mc {} blocks", self.name, self.seconds, self.tsdf_blocks, self.rc_blocks, self.mc_blocks);
        let _ = writeln!(s, "{:<8} {:>7} {:>12} {:>9} {:>12} {:>8}  result", "link", "package", "bytes", "blocks", "mean B/s", "active s");
        let row = |s: &mut String, l: &LinkReport, result: &str| {
            let secs = l.activity.map_or(0.0, |a| a.seconds);
            let _ = writeln!(s, "{:<8} {:>7} {:>12} {:>9} {:>12.0} {:>8.2}  {result}", l.name, l.package, l.bytes, l.blocks, l.mean_bandwidth(), secs);
        };
        row(&mut s, &self.rc, "");
        for e in &self.ecs {
            let result = if e.discard {
                "discarded".to_string()
            } else if e.is_exact() {
                format!("exact, done at {:.1} s", e.finished_s)
            } else {
                format!("MISMATCH missing {} extra {} differing {}", e.missing, e.extra, e.differing)
            };
            row(&mut s, &e.link, &result);
        }
        s
    }
}

/// Boxed frame stream of a synthetic scene or a recorded sequence file.
pub type FrameStream = Box<dyn Iterator<Item = Frame> + Send>;

/// Frames from `dataset` when given, else from the named synthetic scene.
pub fn frame_source(
    scene: Option<&str>,
    dataset: Option<&Path>,
    frames: usize,
    resolution: Option<(u32, u32)>,
) -> Result<(SequenceHeader, FrameStream), ScenarioError> {
    if let Some(path) = dataset {
        let r = SequenceReader::new(io::BufReader::new(std::fs::File::open(path)?))?;
        let header = *r.header();
        let frames = r.take(frames).map_while(|f| f.map_err(|e| log::error!("dataset read failed: {e}")).ok());
        return Ok((header, Box::new(frames)));
    }
    let kind: SceneKind = scene.unwrap_or("room").parse().map_err(ScenarioError::Spec)?;
    let mut seq = SyntheticSequence::new(kind, frames);
    if let Some((w, h)) = resolution {
        seq = seq.with_resolution(w, h);
    }
    Ok((seq.header, Box::new(seq.into_frames())))
}

fn server_config(spec: &ScenarioSpec) -> Result<ServerConfig, ScenarioError> {
    let hash = |b: u32| HashConfig::new(b, b).map_err(|e| ScenarioError::Spec(e.to_string()));
    Ok(ServerConfig {
        voxel_size: spec.voxel,
        model_hash: hash(spec.buckets)?,
        stream_hash: hash((spec.buckets / 2).max(1024))?,
        codec: spec.codec.parse().map_err(ScenarioError::Spec)?,
        ..ServerConfig::default()
    })
}

fn ec_config(spec: &ScenarioSpec, e: &EcSpec, addr: &str) -> Result<EcConfig, ScenarioError> {
    let mut c = EcConfig::new(addr, spec.voxel);
    c.codec = spec.codec.parse().map_err(ScenarioError::Spec)?;
    c.request_rate = e.rate;
    c.max_blocks = e.max_blocks;
    c.strategy = e.strategy.parse().map_err(ScenarioError::Spec)?;
    c.discard = e.discard;
    c.model_hash = HashConfig::new(spec.buckets, spec.buckets).map_err(|e| ScenarioError::Spec(e.to_string()))?;
    Ok(c)
}

struct Running {
    handle: EcHandle,
    index: usize,
    started: Instant,
    /// Responses seen when the model was last known to be final.
    settled_at: Option<u64>,
}

/// Run a scenario to quiescence and compare every client's model with the server's.
pub fn run(spec: &ScenarioSpec) -> Result<ScenarioReport, ScenarioError> {
    spec.validate()?;
    let server = Arc::new(Server::new(server_config(spec)?));
    let handle = net::spawn(Arc::clone(&server), &ListenConfig { tcp: Some("127.0.0.1:0".into()), ..Default::default() })?;
    let addr = handle.tcp_addr().expect("tcp listener").to_string();
    let result = drive(spec, &server, &addr);
    handle.shutdown();
    result
}

fn drive(spec: &ScenarioSpec, server: &Arc<Server>, addr: &str) -> Result<ScenarioReport, ScenarioError> {
    let start = Instant::now();
    let timeout = Duration::from_secs_f64(spec.timeout_s);
    let resolution = spec.width.zip(spec.height);
    let (header, frames) = frame_source(spec.scene.as_deref(), spec.dataset.as_deref(), spec.frames, resolution)?;
    let rc_cfg = RcConfig {
        package_size: spec.rc.package,
        send_rate: spec.rc.rate,
        fusion: spec.fusion(),
        model_hash: HashConfig::new(spec.buckets, spec.buckets).map_err(|e| ScenarioError::Spec(e.to_string()))?,
        stream_hash: HashConfig::new(spec.buckets / 2, spec.buckets / 2).map_err(|e| ScenarioError::Spec(e.to_string()))?,
        ..RcConfig::default()
    };
    let core = Arc::new(
        Reconstruction::new(rc_cfg, header.intrinsics, header.near, header.far)
            .map_err(|e| ScenarioError::Spec(e.to_string()))?,
    );
    let mut run_cfg = RcRunConfig::new(addr);
    run_cfg.codec = spec.codec.parse().map_err(ScenarioError::Spec)?;
    run_cfg.speed = spec.speed;
    let rc = rc::spawn(Arc::clone(&core), run_cfg, frames).map_err(|e| ScenarioError::Failed(format!("rc connect: {e}")))?;

    let mut waiting: Vec<usize> = Vec::new();
    let mut running: Vec<Running> = Vec::new();
    for (i, e) in spec.ec.iter().enumerate() {
        if e.after_rc {
            waiting.push(i);
        } else {
            running.push(Running { handle: ec::spawn(ec_config(spec, e, addr)?)?, index: i, started: start, settled_at: None });
        }
    }
    let mut outages: Vec<&OutageSpec> = spec.outage.iter().collect();
    let mut resets: Vec<&ResetSpec> = spec.reset.iter().collect();
    let mut outage_until = start;
    let mut done: Vec<(usize, EcOutcome)> = Vec::new();
    let mut csv = String::from("t_s,rc_bytes");
    for i in 0..spec.ec.len() {
        let _ = write!(csv, ",ec{i}_bytes");
    }
    csv.push('\n');
    let mut next_row = start;

    loop {
        let now = Instant::now();
        let t = now.duration_since(start).as_secs_f64();
        if now.duration_since(start) > timeout {
            let msg = format!(
                "timed out after {:.0} s (rc {:?}, server tsdf {} vs rc {}, pending {:?})",
                t,
                rc.status(),
                server.tsdf_map().len(),
                core.model().len(),
                server.sessions().iter().filter(|s| s.role == Role::Exploration).map(|s| s.pending()).collect::<Vec<_>>()
            );
            for r in running {
                r.handle.stop();
            }
            rc.stop();
            return Err(ScenarioError::Failed(msg));
        }
        if rc.status() == RcStatus::Failed {
            return Err(ScenarioError::Failed("reconstruction client failed".into()));
        }
        if now >= next_row {
            next_row += Duration::from_secs(1);
            let _ = write!(csv, "{t:.0},{}", rc.bytes_out());
            for i in 0..spec.ec.len() {
                let b = running
                    .iter()
                    .find(|r| r.index == i)
                    .map(|r| r.handle.counters().bytes_in)
                    .or_else(|| done.iter().find(|d| d.0 == i).map(|d| d.1.link.bytes))
                    .unwrap_or(0);
                let _ = write!(csv, ",{b}");
            }
            csv.push('\n');
        }
        outages.retain(|o| {
            if t < o.at_s {
                return true;
            }
            if let Some(r) = running.iter().find(|r| r.index == o.ec) {
                r.handle.outage(Duration::from_secs_f64(o.duration_s));
                outage_until = outage_until.max(now + Duration::from_secs_f64(o.duration_s));
                return false;
            }
            true
        });
        resets.retain(|r| {
            if t < r.at_s {
                return true;
            }
            match running.iter().find(|x| x.index == r.ec) {
                Some(x) if x.handle.is_connected() => {
                    x.handle.request_reset();
                    false
                }
                _ => true,
            }
        });
        for r in &running {
            if let Some(f) = r.handle.failure() {
                return Err(ScenarioError::Failed(format!("ec {}: {f}", r.index)));
            }
        }

        let events_pending = !outages.is_empty() || !resets.is_empty() || now < outage_until;
        let model_final = !events_pending && rc.status() == RcStatus::Drained && server.tsdf_map().len() == core.model().len();
        if model_final {
            for r in running.iter_mut() {
                let c = r.handle.counters();
                let settled = *r.settled_at.get_or_insert(c.responses);
                // two full empty responses after the model settled: everything was sent and acknowledged
                if c.responses < settled + 2 || r.handle.empty_streak() < 2 || !r.handle.is_connected() {
                    continue;
                }
                let finished_s = r.started.duration_since(start).as_secs_f64() + r.started.elapsed().as_secs_f64();
                done.push((r.index, outcome(&spec.ec[r.index], r.index, &r.handle, server, finished_s)));
                r.settled_at = Some(u64::MAX);
            }
            let finished: Vec<usize> =
                running.iter().enumerate().filter(|(_, r)| r.settled_at == Some(u64::MAX)).map(|(i, _)| i).collect();
            for i in finished.into_iter().rev() {
                running.remove(i).handle.stop();
            }
            if running.is_empty() {
                if let Some(i) = waiting.first().copied() {
                    waiting.remove(0);
                    running.push(Running {
                        handle: ec::spawn(ec_config(spec, &spec.ec[i], addr)?)?,
                        index: i,
                        started: Instant::now(),
                        settled_at: None,
                    });
                } else {
                    break;
                }
            }
        } else {
            for r in running.iter_mut() {
                r.settled_at = None;
            }
        }
        thread::sleep(Duration::from_millis(10));
    }

    let rc_link = LinkReport {
        name: "rc".into(),
        package: spec.rc.package,
        bytes: rc.bytes_out(),
        blocks: core.blocks_sent.load(std::sync::atomic::Ordering::Relaxed),
        activity: rc.activity(),
    };
    let rc_blocks = core.model().len();
    rc.stop();
    done.sort_by_key(|d| d.0);
    Ok(ScenarioReport {
        name: spec.name.clone(),
        seconds: start.elapsed().as_secs_f64(),
        rc: rc_link,
        ecs: done.into_iter().map(|d| d.1).collect(),
        tsdf_blocks: server.tsdf_map().len(),
        mc_blocks: server.mc_map().len(),
        rc_blocks,
        csv,
    })
}

fn outcome(spec: &EcSpec, index: usize, h: &EcHandle, server: &Server, finished_s: f64) -> EcOutcome {
    let c = h.counters();
    let link = LinkReport {
        name: spec.name.clone().unwrap_or_else(|| format!("ec{index}")),
        package: spec.max_blocks as usize,
        bytes: c.bytes_in,
        blocks: c.blocks,
        activity: h.activity(),
    };
    let mut out = EcOutcome { link, discard: spec.discard, reconnects: c.reconnects, deletes: h.model().deletes_received.load(std::sync::atomic::Ordering::Relaxed), finished_s, ..EcOutcome::default() };
    if !spec.discard {
        let (missing, extra, differing, completeness) = compare(h.model(), server);
        out.local_blocks = h.model().len();
        out.missing = missing;
        out.extra = extra;
        out.differing = differing;
        out.completeness = completeness;
    }
    out
}

/// Missing, extra and differing blocks of `local` against the server's MC model, plus completeness.
pub fn compare(local: &LocalModel, server: &Server) -> (usize, usize, usize, f64) {
    let reference: HashSet<BlockKey> = server.mc_map().keys().into_iter().collect();
    let mine: HashSet<BlockKey> = local.blocks().keys().into_iter().collect();
    let missing = reference.difference(&mine).count();
    let extra = mine.difference(&reference).count();
    let differing = reference
        .intersection(&mine)
        .filter(|&&k| server.mc_map().get(k) != local.get(k))
        .count();
    (missing, extra, differing, ec::completeness(&mine, &reference))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_spec() {
        let s = ScenarioSpec::parse(
            r#"
            name = "t"
            scene = "sphere"
            frames = 10
            voxel = 0.01
            [rc]
            package = 64
            [[ec]]
            max_blocks = 128
            strategy = "visible"
            [[ec]]
            after_rc = true
            discard = true
            [[outage]]
            ec = 1
            at_s = 0.5
            duration_s = 5
            [[reset]]
            ec = 0
            at_s = 1
            "#,
        )
        .unwrap();
        assert_eq!(s.ec.len(), 2);
        assert_eq!(s.rc.package, 64);
        assert!(s.ec[1].after_rc);
        assert_eq!(s.outage[0].duration_s, 5.0);
    }

    #[test]
    fn rejects_inconsistent_specs() {
        assert!(ScenarioSpec::parse("frames = 3").is_err());
        assert!(ScenarioSpec::parse("scene = \"moon\"").is_err());
        assert!(ScenarioSpec::parse("scene = \"room\"\ncodec = \"lzma\"").is_err());
        assert!(ScenarioSpec::parse("scene = \"room\"\n[[outage]]\nec = 0\nat_s = 1\nduration_s = 1").is_err());
        assert!(ScenarioSpec::parse("scene = \"room\"\nbogus = 1").is_err());
        assert!(ScenarioSpec::parse("scene = \"room\"\n[[ec]]\nmax_blocks = 0").is_err());
    }
}
