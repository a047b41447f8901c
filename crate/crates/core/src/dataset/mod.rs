//! Frame sequence replay format and synthetic sequence generation.
//!
//! Layout (little-endian): magic `VCSEQ1`, intrinsics `fx fy cx cy near far`
//! as f32 and `width height` as u32, then per frame: u64 timestamp in
//! microseconds, 12 f32 pose values (rotation row-major, then translation),
//! u32 width, u32 height, `w*h` f32 depths in meters (0 = invalid) and
//! `w*h*3` RGB bytes.

mod synthetic;

use std::io::{self, Read, Write};

use crate::geometry::{CameraIntrinsics, Pose};
use crate::voxel::Frame;

pub use synthetic::{SceneKind, SyntheticScene, SyntheticSequence};

pub const MAGIC: &[u8; 6] = b"VCSEQ1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceHeader {
    pub intrinsics: CameraIntrinsics,
    pub near: f32,
    pub far: f32,
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn read_f32<R: Read>(r: &mut R) -> io::Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_header<W: Write>(w: &mut W, h: &SequenceHeader) -> io::Result<()> {
    let k = &h.intrinsics;
    w.write_all(MAGIC)?;
    for v in [k.fx, k.fy, k.cx, k.cy, h.near, h.far] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&k.width.to_le_bytes())?;
    w.write_all(&k.height.to_le_bytes())
}

pub fn write_frame<W: Write>(w: &mut W, f: &Frame) -> io::Result<()> {
    let n = (f.width * f.height) as usize;
    if f.depth.len() != n || f.color.len() != 3 * n {
        return Err(invalid("frame buffers do not match its dimensions"));
    }
    let mut buf = Vec::with_capacity(8 + 48 + 8 + 7 * n);
    buf.extend_from_slice(&f.timestamp_us.to_le_bytes());
    for v in f.pose.to_array() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&f.width.to_le_bytes());
    buf.extend_from_slice(&f.height.to_le_bytes());
    for d in &f.depth {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    buf.extend_from_slice(&f.color);
    w.write_all(&buf)
}

pub fn read_header<R: Read>(r: &mut R) -> io::Result<SequenceHeader> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(invalid("not a VCSEQ1 sequence"));
    }
    let mut v = [0f32; 6];
    for x in v.iter_mut() {
        *x = read_f32(r)?;
    }
    let width = read_u32(r)?;
    let height = read_u32(r)?;
    let intrinsics = CameraIntrinsics::new(v[0], v[1], v[2], v[3], width, height);
    if !intrinsics.is_valid() {
        return Err(invalid("invalid intrinsics in header"));
    }
    Ok(SequenceHeader { intrinsics, near: v[4], far: v[5] })
}

/// Reads the next frame; `Ok(None)` at a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Frame>> {
    let mut ts = [0u8; 8];
    match r.read_exact(&mut ts) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let mut pose = [0f32; 12];
    for x in pose.iter_mut() {
        *x = read_f32(r)?;
    }
    let width = read_u32(r)?;
    let height = read_u32(r)?;
    let n = width as usize * height as usize;
    if n > 1 << 26 {
        return Err(invalid("frame dimensions out of range"));
    }
    let mut raw = vec![0u8; 4 * n];
    r.read_exact(&mut raw)?;
    let depth = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let mut color = vec![0u8; 3 * n];
    r.read_exact(&mut color)?;
    Ok(Some(Frame {
        timestamp_us: u64::from_le_bytes(ts),
        pose: Pose::from_array(&pose),
        width,
        height,
        depth,
        color,
    }))
}

/// Streaming reader over a sequence.
pub struct SequenceReader<R> {
    inner: R,
    header: SequenceHeader,
}

impl<R: Read> SequenceReader<R> {
    pub fn new(mut inner: R) -> io::Result<Self> {
        let header = read_header(&mut inner)?;
        Ok(Self { inner, header })
    }

    pub fn header(&self) -> &SequenceHeader {
        &self.header
    }
}

impl<R: Read> Iterator for SequenceReader<R> {
    type Item = io::Result<Frame>;

    fn next(&mut self) -> Option<Self::Item> {
        read_frame(&mut self.inner).transpose()
    }
}

/// Write a whole sequence to `w`.
pub fn write_sequence<W: Write, I>(w: &mut W, header: &SequenceHeader, frames: I) -> io::Result<usize>
where
    I: IntoIterator<Item = Frame>,
{
    write_header(w, header)?;
    let mut n = 0;
    for f in frames {
        write_frame(w, &f)?;
        n += 1;
    }
    Ok(n)
}
