//! Message payloads and their raw (uncompressed) byte layouts.

use crate::geometry::Pose;
use crate::hash::BlockKey;
use crate::mc::{McBlock, MC_BLOCK_BYTES};
use crate::voxel::{TsdfBlock, TSDF_BLOCK_BYTES};

use super::WireError;

pub type ClientId = [u8; 16];

pub mod msg_type {
    pub const HELLO: u8 = 1;
    pub const HELLO_ACK: u8 = 2;
    pub const TSDF_BATCH: u8 = 3;
    pub const MC_BATCH: u8 = 4;
    pub const BLOCK_REQUEST: u8 = 5;
    pub const POSE_UPDATE: u8 = 6;
    pub const POSE_BROADCAST: u8 = 7;
    pub const TEXTURE_REQUEST: u8 = 8;
    pub const TEXTURE_IMAGE: u8 = 9;
    pub const RESET_REQUEST: u8 = 10;
    pub const RESET_BLOCKS: u8 = 11;
    pub const DELETE_BLOCKS: u8 = 12;
    pub const STATS: u8 = 13;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Reconstruction = 1,
    Exploration = 2,
}

impl Role {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(Self::Reconstruction),
            2 => Some(Self::Exploration),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hello {
    pub role: u8,
    pub client_id: ClientId,
    pub voxel_size: f32,
    pub block_edge: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AckStatus {
    Ok = 0,
    ConfigMismatch = 1,
    BadRole = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HelloAck {
    pub status: AckStatus,
    /// The server recognised the client id and kept its pending set.
    pub resumed: bool,
    pub pending: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Strategy {
    GenerationOrder = 0,
    VisibleFirst = 1,
    #[default]
    Random = 2,
}

impl Strategy {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::GenerationOrder),
            1 => Some(Self::VisibleFirst),
            2 => Some(Self::Random),
            _ => None,
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "order" | "generation" => Ok(Self::GenerationOrder),
            "visible" => Ok(Self::VisibleFirst),
            "random" => Ok(Self::Random),
            other => Err(format!("unknown strategy '{other}' (random|visible|order)")),
        }
    }
}

/// fx, fy, cx, cy, near, far
pub type RequestIntrinsics = [f32; 6];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockRequest {
    pub max_blocks: u32,
    pub strategy: Strategy,
    pub pose: Pose,
    pub intrinsics: RequestIntrinsics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeerPose {
    pub client_id: ClientId,
    pub role: u8,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextureImage {
    pub pose: Pose,
    /// fx, fy, cx, cy
    pub intrinsics: [f32; 4],
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsKind {
    Report = 0,
    Error = 1,
}

pub mod error_code {
    pub const NONE: u16 = 0;
    pub const NO_RECONSTRUCTION_CLIENT: u16 = 1;
    pub const NO_FRAME: u16 = 2;
    pub const BAD_REQUEST: u16 = 3;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stats {
    pub kind: StatsKind,
    pub code: u16,
    pub tsdf_blocks: u32,
    pub mc_blocks: u32,
    pub pending: u32,
    pub message: String,
}

impl Stats {
    pub fn error(code: u16, message: impl Into<String>) -> Self {
        Self { kind: StatsKind::Error, code, tsdf_blocks: 0, mc_blocks: 0, pending: 0, message: message.into() }
    }

    pub fn query() -> Self {
        Self { kind: StatsKind::Report, code: 0, tsdf_blocks: 0, mc_blocks: 0, pending: 0, message: String::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    HelloAck(HelloAck),
    TsdfBatch(Vec<(BlockKey, TsdfBlock)>),
    McBatch(Vec<(BlockKey, McBlock)>),
    BlockRequest(BlockRequest),
    PoseUpdate(Pose),
    PoseBroadcast(Vec<PeerPose>),
    TextureRequest,
    TextureImage(TextureImage),
    ResetRequest,
    ResetBlocks(Vec<BlockKey>),
    DeleteBlocks(Vec<BlockKey>),
    Stats(Stats),
    /// A type this build does not know; skipped by consumers.
    Unknown { msg_type: u8, payload: Vec<u8> },
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        use msg_type::*;
        match self {
            Message::Hello(_) => HELLO,
            Message::HelloAck(_) => HELLO_ACK,
            Message::TsdfBatch(_) => TSDF_BATCH,
            Message::McBatch(_) => MC_BATCH,
            Message::BlockRequest(_) => BLOCK_REQUEST,
            Message::PoseUpdate(_) => POSE_UPDATE,
            Message::PoseBroadcast(_) => POSE_BROADCAST,
            Message::TextureRequest => TEXTURE_REQUEST,
            Message::TextureImage(_) => TEXTURE_IMAGE,
            Message::ResetRequest => RESET_REQUEST,
            Message::ResetBlocks(_) => RESET_BLOCKS,
            Message::DeleteBlocks(_) => DELETE_BLOCKS,
            Message::Stats(_) => STATS,
            Message::Unknown { msg_type, .. } => *msg_type,
        }
    }

    /// Raw payload bytes.
    pub fn encode_payload(&self) -> Vec<u8> {
        let mut w = Vec::new();
        match self {
            Message::Hello(h) => {
                w.push(h.role);
                w.extend_from_slice(&h.client_id);
                put_f32(&mut w, h.voxel_size);
                w.push(h.block_edge);
            }
            Message::HelloAck(a) => {
                w.push(a.status as u8);
                w.push(u8::from(a.resumed));
                put_u32(&mut w, a.pending);
            }
            Message::TsdfBatch(blocks) => {
                w.reserve(4 + blocks.len() * (12 + TSDF_BLOCK_BYTES));
                put_u32(&mut w, blocks.len() as u32);
                for (k, b) in blocks {
                    w.extend_from_slice(&k.to_le_bytes());
                    b.write_le(&mut w);
                }
            }
            Message::McBatch(blocks) => {
                w.reserve(4 + blocks.len() * (12 + MC_BLOCK_BYTES));
                put_u32(&mut w, blocks.len() as u32);
                for (k, b) in blocks {
                    w.extend_from_slice(&k.to_le_bytes());
                    b.write_le(&mut w);
                }
            }
            Message::BlockRequest(r) => {
                put_u32(&mut w, r.max_blocks);
                w.push(r.strategy as u8);
                put_pose(&mut w, &r.pose);
                for v in r.intrinsics {
                    put_f32(&mut w, v);
                }
            }
            Message::PoseUpdate(p) => put_pose(&mut w, p),
            Message::PoseBroadcast(peers) => {
                put_u32(&mut w, peers.len() as u32);
                for p in peers {
                    w.extend_from_slice(&p.client_id);
                    w.push(p.role);
                    put_pose(&mut w, &p.pose);
                }
            }
            Message::TextureRequest | Message::ResetRequest => {}
            Message::TextureImage(t) => {
                put_pose(&mut w, &t.pose);
                for v in t.intrinsics {
                    put_f32(&mut w, v);
                }
                put_u32(&mut w, t.width);
                put_u32(&mut w, t.height);
                w.extend_from_slice(&t.pixels);
            }
            Message::ResetBlocks(keys) | Message::DeleteBlocks(keys) => {
                put_u32(&mut w, keys.len() as u32);
                for k in keys {
                    w.extend_from_slice(&k.to_le_bytes());
                }
            }
            Message::Stats(s) => {
                w.push(s.kind as u8);
                w.extend_from_slice(&s.code.to_le_bytes());
                put_u32(&mut w, s.tsdf_blocks);
                put_u32(&mut w, s.mc_blocks);
                put_u32(&mut w, s.pending);
                let text = &s.message.as_bytes()[..s.message.len().min(u16::MAX as usize)];
                w.extend_from_slice(&(text.len() as u16).to_le_bytes());
                w.extend_from_slice(text);
            }
            Message::Unknown { payload, .. } => w.extend_from_slice(payload),
        }
        w
    }

    pub fn decode_payload(msg_type: u8, payload: &[u8]) -> Result<Self, WireError> {
        use msg_type::*;
        let mut r = Reader { buf: payload, pos: 0 };
        let m = match msg_type {
            HELLO => Message::Hello(Hello {
                role: r.u8()?,
                client_id: r.array()?,
                voxel_size: r.f32()?,
                block_edge: r.u8()?,
            }),
            HELLO_ACK => {
                let status = match r.u8()? {
                    0 => AckStatus::Ok,
                    1 => AckStatus::ConfigMismatch,
                    2 => AckStatus::BadRole,
                    other => return Err(WireError::Malformed(format!("ack status {other}"))),
                };
                Message::HelloAck(HelloAck { status, resumed: r.u8()? != 0, pending: r.u32()? })
            }
            TSDF_BATCH => {
                let n = r.count(12 + TSDF_BLOCK_BYTES)?;
                let mut blocks = Vec::with_capacity(n);
                for _ in 0..n {
                    let k = r.key()?;
                    blocks.push((k, TsdfBlock::read_le(r.take(TSDF_BLOCK_BYTES)?)));
                }
                Message::TsdfBatch(blocks)
            }
            MC_BATCH => {
                let n = r.count(12 + MC_BLOCK_BYTES)?;
                let mut blocks = Vec::with_capacity(n);
                for _ in 0..n {
                    let k = r.key()?;
                    blocks.push((k, McBlock::read_le(r.take(MC_BLOCK_BYTES)?)));
                }
                Message::McBatch(blocks)
            }
            BLOCK_REQUEST => {
                let max_blocks = r.u32()?;
                let s = r.u8()?;
                let strategy =
                    Strategy::from_u8(s).ok_or_else(|| WireError::Malformed(format!("strategy {s}")))?;
                let pose = r.pose()?;
                let mut intrinsics = [0f32; 6];
                for v in intrinsics.iter_mut() {
                    *v = r.f32()?;
                }
                Message::BlockRequest(BlockRequest { max_blocks, strategy, pose, intrinsics })
            }
            POSE_UPDATE => Message::PoseUpdate(r.pose()?),
            POSE_BROADCAST => {
                let n = r.count(16 + 1 + 48)?;
                let mut peers = Vec::with_capacity(n);
                for _ in 0..n {
                    peers.push(PeerPose { client_id: r.array()?, role: r.u8()?, pose: r.pose()? });
                }
                Message::PoseBroadcast(peers)
            }
            TEXTURE_REQUEST => Message::TextureRequest,
            TEXTURE_IMAGE => {
                let pose = r.pose()?;
                let intrinsics = [r.f32()?, r.f32()?, r.f32()?, r.f32()?];
                let width = r.u32()?;
                let height = r.u32()?;
                let n = (width as usize)
                    .checked_mul(height as usize)
                    .and_then(|p| p.checked_mul(3))
                    .ok_or_else(|| WireError::Malformed("image size overflow".into()))?;
                let pixels = r.take(n)?.to_vec();
                Message::TextureImage(TextureImage { pose, intrinsics, width, height, pixels })
            }
            RESET_REQUEST => Message::ResetRequest,
            RESET_BLOCKS | DELETE_BLOCKS => {
                let n = r.count(12)?;
                let mut keys = Vec::with_capacity(n);
                for _ in 0..n {
                    keys.push(r.key()?);
                }
                if msg_type == RESET_BLOCKS {
                    Message::ResetBlocks(keys)
                } else {
                    Message::DeleteBlocks(keys)
                }
            }
            STATS => {
                let kind = match r.u8()? {
                    0 => StatsKind::Report,
                    1 => StatsKind::Error,
                    other => return Err(WireError::Malformed(format!("stats kind {other}"))),
                };
                let code = u16::from_le_bytes(r.array()?);
                let tsdf_blocks = r.u32()?;
                let mc_blocks = r.u32()?;
                let pending = r.u32()?;
                let len = u16::from_le_bytes(r.array()?) as usize;
                let message = String::from_utf8_lossy(r.take(len)?).into_owned();
                Message::Stats(Stats { kind, code, tsdf_blocks, mc_blocks, pending, message })
            }
            other => return Ok(Message::Unknown { msg_type: other, payload: payload.to_vec() }),
        };
        if r.pos != payload.len() {
            return Err(WireError::Malformed(format!(
                "{} trailing payload bytes for type {msg_type}",
                payload.len() - r.pos
            )));
        }
        Ok(m)
    }
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(w: &mut Vec<u8>, v: f32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_pose(w: &mut Vec<u8>, p: &Pose) {
    for v in p.to_array() {
        put_f32(w, v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(WireError::Malformed("payload shorter than its contents".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32, WireError> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn key(&mut self) -> Result<BlockKey, WireError> {
        Ok(BlockKey::from_le_bytes(&self.array()?))
    }

    fn pose(&mut self) -> Result<Pose, WireError> {
        let mut a = [0f32; 12];
        for v in a.iter_mut() {
            *v = self.f32()?;
        }
        Ok(Pose::from_array(&a))
    }

    /// Element count, checked against the bytes left.
    fn count(&mut self, elem: usize) -> Result<usize, WireError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(elem) > self.buf.len() - self.pos {
            return Err(WireError::Malformed(format!("count {n} exceeds payload")));
        }
        Ok(n)
    }
}
