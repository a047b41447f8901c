use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use scenestream::dataset;
use scenestream::ec::{self, EcConfig, PoseScript};
use scenestream::hash::HashConfig;
use scenestream::rc::{self, RcConfig, RcRunConfig, RcStatus, Reconstruction};
use scenestream::scenario::{self, ScenarioSpec};
use scenestream::server::net::{self, ListenConfig};
use scenestream::server::{Server, ServerConfig};
use scenestream::voxel::FusionConfig;
use scenestream::wire::{Codec, Strategy};

#[derive(Parser)]
#[command(name = "scenestream", version, about = "Live voxel-block scene streaming")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the streaming server.
    Server(ServerArgs),
    /// Fuse a sequence and stream it to a server.
    Rc(RcArgs),
    /// Headless exploration client.
    Ec(EcArgs),
    /// Declarative end-to-end runs.
    Scenario {
        #[command(subcommand)]
        command: ScenarioCommand,
    },
    /// Write a synthetic sequence file.
    Generate(GenerateArgs),
}

#[derive(Subcommand)]
enum ScenarioCommand {
    /// Run a scenario file in-process and check every client against the server.
    Run {
        spec: PathBuf,
        /// Per-second byte counters.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Source {
    /// Synthetic scene (room|sphere); ignored with --dataset.
    #[arg(long, alias = "synthetic", default_value = "room")]
    scene: String,
    /// Recorded sequence file.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 240)]
    frames: usize,
    #[arg(long, requires = "height")]
    width: Option<u32>,
    #[arg(long, requires = "width")]
    height: Option<u32>,
}

#[derive(Args)]
struct ServerArgs {
    #[arg(long, alias = "listen", default_value = "0.0.0.0:7801")]
    tcp: String,
    /// WebSocket listener, served on /ws.
    #[arg(long, alias = "ws-listen")]
    ws: Option<String>,
    #[arg(long, default_value_t = 0.005)]
    voxel: f32,
    #[arg(long, default_value = "zstd")]
    codec: Codec,
    /// Hash buckets of the global models.
    #[arg(long, default_value_t = 1 << 20)]
    buckets: u32,
    /// Excess entries of the global models.
    #[arg(long, default_value_t = 1 << 20)]
    excess: u32,
    /// Cap on blocks per request.
    #[arg(long, default_value_t = 4096)]
    max_request: u32,
    /// Send texture images to every exploration client.
    #[arg(long)]
    texture_fanout: bool,
    /// Seconds a disconnected client keeps its stream state.
    #[arg(long, default_value_t = 3600)]
    retention_s: u64,
    /// CSV file with one row per second.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct RcArgs {
    #[arg(long, default_value = "127.0.0.1:7801")]
    server: String,
    #[command(flatten)]
    source: Source,
    #[arg(long, default_value_t = 0.005)]
    voxel: f32,
    #[arg(long)]
    truncation: Option<f32>,
    /// Blocks per TSDF batch.
    #[arg(long, default_value_t = 512)]
    package: usize,
    /// Batches per second.
    #[arg(long, default_value_t = 100.0)]
    rate: f64,
    /// Replay speed relative to frame timestamps; 0 runs back to back.
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
    #[arg(long, default_value = "zstd")]
    codec: Codec,
    /// Keep running after the sequence is streamed, serving texture and reset requests.
    #[arg(long)]
    linger: bool,
    /// CSV file with bytes sent per second.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct EcArgs {
    #[arg(long, default_value = "127.0.0.1:7801")]
    server: String,
    #[arg(long, default_value_t = 0.005)]
    voxel: f32,
    #[arg(long, alias = "max", default_value_t = 512)]
    max_blocks: u32,
    /// Requests per second.
    #[arg(long, default_value_t = 100.0)]
    rate: f64,
    #[arg(long, default_value = "random")]
    strategy: Strategy,
    /// Waypoint file, lines of `t ex ey ez tx ty tz`.
    #[arg(long, alias = "pose-script")]
    poses: Option<PathBuf>,
    /// Count payloads without storing them.
    #[arg(long)]
    discard: bool,
    /// Triangulate received regions.
    #[arg(long)]
    meshes: bool,
    /// Stop after this many seconds without new blocks.
    #[arg(long, default_value_t = 5.0)]
    idle_stop_s: f64,
    #[arg(long, default_value = "zstd")]
    codec: Codec,
    /// CSV file with bytes received per second.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long, short)]
    out: PathBuf,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Server(a) => run_server(a),
        Command::Rc(a) => run_rc(a),
        Command::Ec(a) => run_ec(a),
        Command::Scenario { command: ScenarioCommand::Run { spec, csv } } => run_scenario(&spec, csv),
        Command::Generate(a) => generate(a),
    }
}

fn hash(buckets: u32, excess: u32) -> Result<HashConfig> {
    HashConfig::new(buckets, excess).context("hash size")
}

/// Appends `seconds,bytes,bytes_per_second` rows once a second.
struct ByteLog {
    out: Option<std::io::BufWriter<std::fs::File>>,
    start: Instant,
    next: u64,
    last: u64,
}

impl ByteLog {
    fn create(path: Option<&PathBuf>) -> Result<Self> {
        let out = match path {
            Some(p) => {
                let mut w = std::io::BufWriter::new(
                    std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
                );
                writeln!(w, "seconds,bytes,bytes_per_second")?;
                Some(w)
            }
            None => None,
        };
        Ok(Self { out, start: Instant::now(), next: 1, last: 0 })
    }

    fn sample(&mut self, bytes: u64) -> Result<()> {
        let Some(w) = self.out.as_mut() else { return Ok(()) };
        if self.start.elapsed().as_secs() >= self.next {
            writeln!(w, "{},{},{}", self.next, bytes, bytes - self.last)?;
            w.flush()?;
            self.next += 1;
            self.last = bytes;
        }
        Ok(())
    }
}

fn run_server(a: ServerArgs) -> Result<()> {
    let cfg = ServerConfig {
        voxel_size: a.voxel,
        model_hash: hash(a.buckets, a.excess)?,
        stream_hash: hash((a.buckets / 4).max(1024), (a.excess / 4).max(1024))?,
        codec: a.codec,
        retention: Duration::from_secs(a.retention_s),
        max_request: a.max_request,
        texture_fanout: a.texture_fanout,
        ..ServerConfig::default()
    };
    let handle = net::spawn(Arc::new(Server::new(cfg)), &ListenConfig { tcp: Some(a.tcp), ws: a.ws, metrics: a.metrics })?;
    if let Some(addr) = handle.tcp_addr() {
        log::info!("tcp on {addr}");
    }
    if let Some(addr) = handle.ws_addr() {
        log::info!("websocket on ws://{addr}{}", net::WS_PATH);
    }
    handle.wait();
    Ok(())
}

fn source(s: &Source) -> Result<(dataset::SequenceHeader, scenario::FrameStream)> {
    let res = s.width.zip(s.height);
    Ok(scenario::frame_source(Some(&s.scene), s.dataset.as_deref(), s.frames, res)?)
}

fn run_rc(a: RcArgs) -> Result<()> {
    let (header, frames) = source(&a.source)?;
    let mut fusion = FusionConfig::with_voxel_size(a.voxel);
    fusion.truncation = a.truncation.unwrap_or(fusion.truncation.max(4.0 * a.voxel));
    let cfg = RcConfig { package_size: a.package, send_rate: a.rate, fusion, ..RcConfig::default() };
    let core = Arc::new(Reconstruction::new(cfg, header.intrinsics, header.near, header.far)?);
    let mut run = RcRunConfig::new(a.server);
    run.codec = a.codec;
    run.speed = a.speed;
    let mut log = ByteLog::create(a.metrics.as_ref())?;
    let handle = rc::spawn(Arc::clone(&core), run, frames)?;
    let start = Instant::now();
    loop {
        thread::sleep(Duration::from_millis(200));
        log.sample(handle.bytes_out())?;
        match handle.status() {
            RcStatus::Failed => bail!("reconstruction client failed"),
            RcStatus::Drained if !a.linger => break,
            _ => {}
        }
    }
    let act = handle.activity();
    println!(
        "rc: {} blocks in model, {} bytes sent in {:.1} s, mean {:.0} B/s while streaming",
        core.model().len(),
        handle.bytes_out(),
        start.elapsed().as_secs_f64(),
        act.map_or(0.0, |x| x.bytes_per_second())
    );
    handle.stop();
    Ok(())
}

fn run_ec(a: EcArgs) -> Result<()> {
    let mut cfg = EcConfig::new(a.server, a.voxel);
    cfg.codec = a.codec;
    cfg.max_blocks = a.max_blocks;
    cfg.request_rate = a.rate;
    cfg.strategy = a.strategy;
    cfg.discard = a.discard;
    cfg.build_meshes = a.meshes;
    cfg.idle_stop = Some(Duration::from_secs_f64(a.idle_stop_s));
    if let Some(p) = &a.poses {
        cfg.poses = std::fs::read_to_string(p)?.parse::<PoseScript>().map_err(anyhow::Error::msg)?;
    }
    let mut log = ByteLog::create(a.metrics.as_ref())?;
    let handle = ec::spawn(cfg)?;
    while !handle.is_finished() {
        thread::sleep(Duration::from_millis(200));
        log.sample(handle.counters().bytes_in)?;
    }
    if let Some(f) = handle.failure() {
        bail!("exploration client failed: {f}");
    }
    let c = handle.counters();
    let act = handle.activity();
    let model = handle.join();
    println!(
        "ec: {} blocks held, {} received in {} responses, {} bytes, mean {:.0} B/s while streaming, {} meshes",
        model.len(),
        c.blocks,
        c.responses,
        c.bytes_in,
        act.map_or(0.0, |x| x.bytes_per_second()),
        model.mesh_count()
    );
    Ok(())
}

fn run_scenario(path: &PathBuf, csv: Option<PathBuf>) -> Result<()> {
    let spec = ScenarioSpec::load(path)?;
    let report = scenario::run(&spec)?;
    print!("{}", report.summary());
    if let Some(p) = csv {
        std::fs::write(&p, &report.csv).with_context(|| format!("writing {}", p.display()))?;
    }
    if !report.all_exact() {
        bail!("at least one client diverged from the server model");
    }
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let (header, frames) = source(&a.source)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(&a.out)?);
    let n = dataset::write_sequence(&mut w, &header, frames)?;
    w.flush()?;
    println!("wrote {n} frames to {}", a.out.display());
    Ok(())
}
