//! Client side of a TCP connection: handshake plus framed send/receive halves.

use std::io::{self, ErrorKind, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use crate::wire::{self, AckStatus, Codec, FrameDecoder, Hello, HelloAck, Message, WireError};

#[derive(Debug, thiserror::Error)]
pub enum LinkError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("wire: {0}")]
    Wire(#[from] WireError),
    #[error("server rejected handshake: {0:?}")]
    Rejected(AckStatus),
    #[error("connection closed")]
    Closed,
    #[error("unexpected message type {0} during handshake")]
    Unexpected(u8),
}

pub struct LinkWriter {
    stream: TcpStream,
    codec: Codec,
    pub bytes_out: u64,
}

impl LinkWriter {
    /// Encode and write one message; returns the frame length.
    pub fn send(&mut self, msg: &Message) -> io::Result<usize> {
        let frame = wire::encode(msg, self.codec);
        self.stream.write_all(&frame)?;
        self.bytes_out += frame.len() as u64;
        Ok(frame.len())
    }

    pub fn shutdown(&self) {
        let _ = self.stream.shutdown(std::net::Shutdown::Both);
    }
}

pub struct LinkReader {
    stream: TcpStream,
    decoder: FrameDecoder,
    buf: Vec<u8>,
    pub bytes_in: u64,
}

impl LinkReader {
    /// Next message, or `None` if nothing complete arrived within `timeout`.
    pub fn recv(&mut self, timeout: Duration) -> Result<Option<Message>, LinkError> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some((msg, n)) = self.decoder.next_message()? {
                self.bytes_in += n as u64;
                return Ok(Some(msg));
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Ok(None);
            }
            self.stream.set_read_timeout(Some(left.max(Duration::from_millis(1))))?;
            match self.stream.read(&mut self.buf) {
                Ok(0) => return Err(LinkError::Closed),
                Ok(n) => self.decoder.push(&self.buf[..n]),
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
}

/// Connect, send HELLO and wait for an accepting HELLO_ACK.
pub fn connect<A: ToSocketAddrs>(
    addr: A,
    hello: &Hello,
    codec: Codec,
    timeout: Duration,
) -> Result<(LinkReader, LinkWriter, HelloAck), LinkError> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let mut writer = LinkWriter { stream: stream.try_clone()?, codec, bytes_out: 0 };
    let mut reader = LinkReader { stream, decoder: FrameDecoder::new(), buf: vec![0; 1 << 16], bytes_in: 0 };
    writer.send(&Message::Hello(*hello))?;
    match reader.recv(timeout)? {
        Some(Message::HelloAck(ack)) if ack.status == AckStatus::Ok => Ok((reader, writer, ack)),
        Some(Message::HelloAck(ack)) => Err(LinkError::Rejected(ack.status)),
        Some(other) => Err(LinkError::Unexpected(other.msg_type())),
        None => Err(LinkError::Io(io::Error::new(ErrorKind::TimedOut, "no HELLO_ACK"))),
    }
}

/// Random client id.
pub fn new_client_id() -> wire::ClientId {
    rand::random()
}
