//! TCP and WebSocket drivers around [`Server`].
//!
//! TCP: one reader thread (which also runs the handlers) and one writer thread
//! per connection. WebSocket: one thread per connection polling both
//! directions, one frame per message, served at `/ws` only.

use std::io::{self, ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, TryRecvError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tungstenite::http::StatusCode;

use super::{Connection, MetricsWriter, Server};
use crate::wire::{self, FrameDecoder, Message};

pub const WS_PATH: &str = "/ws";
const POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Clone, Default)]
pub struct ListenConfig {
    pub tcp: Option<String>,
    pub ws: Option<String>,
    pub metrics: Option<PathBuf>,
}

pub struct ServerHandle {
    server: Arc<Server>,
    tcp_addr: Option<SocketAddr>,
    ws_addr: Option<SocketAddr>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    connections: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl ServerHandle {
    pub fn server(&self) -> &Arc<Server> {
        &self.server
    }

    pub fn tcp_addr(&self) -> Option<SocketAddr> {
        self.tcp_addr
    }

    pub fn ws_addr(&self) -> Option<SocketAddr> {
        self.ws_addr
    }

    /// Block until [`shutdown`](Self::shutdown) is requested from elsewhere (never, for the CLI).
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        let conns = std::mem::take(&mut *self.connections.lock());
        for t in conns {
            let _ = t.join();
        }
    }
}

/// Bind the configured listeners and start serving.
pub fn spawn(server: Arc<Server>, cfg: &ListenConfig) -> io::Result<ServerHandle> {
    let stop = Arc::new(AtomicBool::new(false));
    let connections = Arc::new(Mutex::new(Vec::new()));
    let mut threads = Vec::new();
    let mut tcp_addr = None;
    let mut ws_addr = None;
    if let Some(addr) = &cfg.tcp {
        let l = TcpListener::bind(addr)?;
        tcp_addr = Some(l.local_addr()?);
        threads.push(accept_loop(l, Arc::clone(&server), Arc::clone(&stop), Arc::clone(&connections), serve_tcp));
    }
    if let Some(addr) = &cfg.ws {
        let l = TcpListener::bind(addr)?;
        ws_addr = Some(l.local_addr()?);
        threads.push(accept_loop(l, Arc::clone(&server), Arc::clone(&stop), Arc::clone(&connections), serve_ws));
    }
    let metrics = match &cfg.metrics {
        Some(p) => Some(MetricsWriter::new(io::BufWriter::new(std::fs::File::create(p)?))),
        None => None,
    };
    threads.push(housekeeping(Arc::clone(&server), Arc::clone(&stop), metrics));
    Ok(ServerHandle { server, tcp_addr, ws_addr, stop, threads, connections })
}

type Serve = fn(Arc<Server>, TcpStream, Arc<AtomicBool>);

fn accept_loop(
    l: TcpListener,
    server: Arc<Server>,
    stop: Arc<AtomicBool>,
    connections: Arc<Mutex<Vec<JoinHandle<()>>>>,
    serve: Serve,
) -> JoinHandle<()> {
    thread::spawn(move || {
        l.set_nonblocking(true).expect("nonblocking listener");
        while !stop.load(Ordering::SeqCst) {
            match l.accept() {
                Ok((stream, peer)) => {
                    log::debug!("connection from {peer}");
                    if let Err(e) = stream.set_nonblocking(false) {
                        log::warn!("dropping {peer}: {e}");
                        continue;
                    }
                    let (server, stop) = (Arc::clone(&server), Arc::clone(&stop));
                    let h = thread::spawn(move || serve(server, stream, stop));
                    let mut c = connections.lock();
                    c.retain(|h| !h.is_finished());
                    c.push(h);
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    thread::sleep(Duration::from_millis(50));
                }
            }
        }
    })
}

fn housekeeping(
    server: Arc<Server>,
    stop: Arc<AtomicBool>,
    mut metrics: Option<MetricsWriter<io::BufWriter<std::fs::File>>>,
) -> JoinHandle<()> {
    thread::spawn(move || {
        let mut last_row = Instant::now();
        while !stop.load(Ordering::SeqCst) {
            let now = Instant::now();
            server.pose_tick(now);
            if now.duration_since(last_row) >= Duration::from_secs(1) {
                last_row = now;
                server.expire_sessions(now);
                if let Some(m) = metrics.as_mut() {
                    if let Err(e) = m.write_rows(&server) {
                        log::warn!("metrics write failed: {e}");
                    }
                }
            }
            thread::sleep(Duration::from_millis(10));
        }
        if let Some(m) = metrics.as_mut() {
            let _ = m.write_rows(&server);
        }
    })
}

/// Outcome of feeding one decoded message to the connection state.
enum Step {
    Continue,
    Close,
}

fn on_message(
    server: &Server,
    conn: &mut Option<Connection>,
    outbox: &mpsc::Sender<Vec<u8>>,
    msg: Message,
    frame_len: usize,
) -> Step {
    match conn {
        Some(c) => {
            c.session.bytes_in.fetch_add(frame_len as u64, Ordering::Relaxed);
            server.handle(c, msg);
            Step::Continue
        }
        None => match msg {
            Message::Hello(h) => match server.connect(&h, outbox.clone()) {
                Ok(c) => {
                    c.session.bytes_in.fetch_add(frame_len as u64, Ordering::Relaxed);
                    *conn = Some(c);
                    Step::Continue
                }
                Err(nack) => {
                    let _ = outbox.send(nack);
                    Step::Close
                }
            },
            other => {
                log::warn!("expected HELLO, got type {}", other.msg_type());
                Step::Close
            }
        },
    }
}

fn serve_tcp(server: Arc<Server>, stream: TcpStream, stop: Arc<AtomicBool>) {
    let _ = stream.set_nodelay(true);
    if let Err(e) = stream.set_read_timeout(Some(POLL * 5)) {
        log::warn!("read timeout: {e}");
        return;
    }
    let (tx, rx) = mpsc::channel::<Vec<u8>>();
    let writer = match stream.try_clone() {
        Ok(w) => thread::spawn(move || write_frames(w, rx)),
        Err(e) => {
            log::warn!("cannot clone stream: {e}");
            return;
        }
    };
    let mut reader = &stream;
    let mut conn: Option<Connection> = None;
    let mut dec = FrameDecoder::new();
    let mut buf = vec![0u8; 1 << 16];
    'outer: while !stop.load(Ordering::SeqCst) {
        match reader.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => dec.push(&buf[..n]),
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => {
                continue
            }
            Err(e) => {
                log::debug!("read failed: {e}");
                break;
            }
        }
        loop {
            match dec.next_message() {
                Ok(Some((msg, n))) => {
                    if let Step::Close = on_message(&server, &mut conn, &tx, msg, n) {
                        break 'outer;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    log::warn!("closing connection on protocol error: {e}");
                    break 'outer;
                }
            }
        }
    }
    if let Some(c) = &conn {
        server.disconnect(c);
    }
    drop(conn);
    drop(tx);
    let _ = writer.join();
    let _ = stream.shutdown(Shutdown::Both);
}

fn write_frames(mut w: TcpStream, rx: Receiver<Vec<u8>>) {
    for frame in rx {
        if let Err(e) = w.write_all(&frame) {
            log::debug!("write failed: {e}");
            let _ = w.shutdown(Shutdown::Both);
            return;
        }
    }
}

fn serve_ws(server: Arc<Server>, stream: TcpStream, stop: Arc<AtomicBool>) {
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(Duration::from_secs(5)));
    let check_path = |req: &Request, resp: Response| -> Result<Response, ErrorResponse> {
        if req.uri().path() == WS_PATH {
            Ok(resp)
        } else {
            let mut err = ErrorResponse::new(Some(format!("no endpoint at {}", req.uri().path())));
            *err.status_mut() = StatusCode::NOT_FOUND;
            Err(err)
        }
    };
    let mut ws = match tungstenite::accept_hdr(stream, check_path) {
        Ok(ws) => ws,
        Err(e) => {
            log::debug!("websocket handshake failed: {e}");
            return;
        }
    };
    let _ = ws.get_ref().set_read_timeout(Some(POLL));
    let (tx, rx) = mpsc::channel::<Vec<u8>>();
    let mut conn: Option<Connection> = None;
    let mut closing = false;
    while !stop.load(Ordering::SeqCst) {
        loop {
            match rx.try_recv() {
                Ok(frame) => {
                    if ws.send(tungstenite::Message::Binary(frame)).is_err() {
                        closing = true;
                        break;
                    }
                }
                Err(TryRecvError::Empty | TryRecvError::Disconnected) => break,
            }
        }
        if closing {
            break;
        }
        match ws.read() {
            Ok(tungstenite::Message::Binary(b)) => match wire::decode(&b) {
                Ok(msg) => {
                    if let Step::Close = on_message(&server, &mut conn, &tx, msg, b.len()) {
                        // flush the rejection before closing
                        while let Ok(frame) = rx.try_recv() {
                            let _ = ws.send(tungstenite::Message::Binary(frame));
                        }
                        break;
                    }
                }
                Err(e) => {
                    log::warn!("closing websocket on protocol error: {e}");
                    break;
                }
            },
            Ok(tungstenite::Message::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                let _ = ws.flush();
            }
            Err(e) => {
                log::debug!("websocket read failed: {e}");
                break;
            }
        }
    }
    if let Some(c) = &conn {
        server.disconnect(c);
    }
    let _ = ws.close(None);
    let _ = ws.flush();
}
