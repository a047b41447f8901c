use std::collections::BTreeMap;
use std::io::ErrorKind;
use std::net::TcpStream;
use std::sync::Arc;
use std::time::{Duration, Instant};

use scenestream::geometry::Pose;
use scenestream::hash::BlockKey;
use scenestream::link::{self, LinkError, LinkReader};
use scenestream::mc::McBlock;
use scenestream::server::net::{self, ListenConfig, ServerHandle, WS_PATH};
use scenestream::server::{Server, ServerConfig};
use scenestream::voxel::{TsdfBlock, TsdfVoxel};
use scenestream::wire::{self, AckStatus, BlockRequest, Codec, Hello, Message, Role, Strategy};
use tungstenite::stream::MaybeTlsStream;
use tungstenite::WebSocket;

const VOXEL: f32 = 0.01;

fn start() -> ServerHandle {
    let server = Arc::new(Server::new(ServerConfig::small(VOXEL)));
    let cfg = ListenConfig { tcp: Some("127.0.0.1:0".into()), ws: Some("127.0.0.1:0".into()), metrics: None };
    net::spawn(server, &cfg).unwrap()
}

fn hello(role: Role) -> Hello {
    Hello { role: role as u8, client_id: link::new_client_id(), voxel_size: VOXEL, block_edge: 8 }
}

/// A plane crossing z = 4 voxels inside every block.
fn plane_batch(n: i32) -> Vec<(BlockKey, TsdfBlock)> {
    (0..n)
        .map(|i| {
            let mut b = TsdfBlock::default();
            for z in 0..8 {
                for y in 0..8 {
                    for x in 0..8 {
                        *b.get_mut(x, y, z) = TsdfVoxel { tsdf: (z as f32 - 4.5) / 4.0, weight: 1.0, color: [i as u8, 9, 9] };
                    }
                }
            }
            (BlockKey::new(i, 0, 0), b)
        })
        .collect()
}

fn request(max_blocks: u32) -> Message {
    Message::BlockRequest(BlockRequest { max_blocks, strategy: Strategy::Random, pose: Pose::IDENTITY, intrinsics: [0.0; 6] })
}

fn wait_for(mut cond: impl FnMut() -> bool) {
    let deadline = Instant::now() + Duration::from_secs(10);
    while !cond() {
        assert!(Instant::now() < deadline, "timed out");
        std::thread::sleep(Duration::from_millis(5));
    }
}

fn recv_batch(r: &mut LinkReader) -> Vec<(BlockKey, McBlock)> {
    loop {
        match r.recv(Duration::from_secs(5)).unwrap() {
            Some(Message::McBatch(b)) => return b,
            Some(_) => continue,
            None => panic!("no MC_BATCH"),
        }
    }
}

fn server_blocks(h: &ServerHandle) -> BTreeMap<BlockKey, McBlock> {
    let mc = h.server().mc_map();
    mc.keys().into_iter().map(|k| (k, mc.get(k).unwrap())).collect()
}

#[test]
fn tcp_clients_receive_the_server_model() {
    let h = start();
    let addr = h.tcp_addr().unwrap();
    let (mut er, mut ew, ack) = link::connect(addr, &hello(Role::Exploration), Codec::Deflate, Duration::from_secs(5)).unwrap();
    assert!(!ack.resumed);
    let (_rr, mut rw, _) = link::connect(addr, &hello(Role::Reconstruction), Codec::Zstd, Duration::from_secs(5)).unwrap();
    rw.send(&Message::TsdfBatch(plane_batch(12))).unwrap();
    wait_for(|| h.server().mc_map().len() == 12);

    let mut got = BTreeMap::new();
    for _ in 0..4 {
        ew.send(&request(5)).unwrap();
        let batch = recv_batch(&mut er);
        assert!(batch.len() <= 5);
        got.extend(batch);
    }
    assert_eq!(got, server_blocks(&h));
    assert!(got.values().all(|b| !b.is_empty()));
    assert!(er.bytes_in > 0 && ew.bytes_out > 0);
    h.shutdown();
}

#[test]
fn tcp_config_mismatch_is_rejected() {
    let h = start();
    let mut bad = hello(Role::Exploration);
    bad.voxel_size = 0.02;
    match link::connect(h.tcp_addr().unwrap(), &bad, Codec::Identity, Duration::from_secs(5)) {
        Err(LinkError::Rejected(AckStatus::ConfigMismatch)) => {}
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("mismatched voxel size accepted"),
    }
    h.shutdown();
}

fn ws_connect(h: &ServerHandle, path: &str) -> tungstenite::Result<WebSocket<MaybeTlsStream<TcpStream>>> {
    let url = format!("ws://{}{path}", h.ws_addr().unwrap());
    tungstenite::connect(url).map(|(ws, _)| ws)
}

fn ws_recv(ws: &mut WebSocket<MaybeTlsStream<TcpStream>>) -> Message {
    loop {
        match ws.read().unwrap() {
            tungstenite::Message::Binary(b) => return wire::decode(&b).unwrap(),
            tungstenite::Message::Close(_) => panic!("closed"),
            _ => continue,
        }
    }
}

#[test]
fn websocket_carries_one_frame_per_message() {
    let h = start();
    let mut ws = ws_connect(&h, WS_PATH).unwrap();
    ws.send(tungstenite::Message::Binary(wire::encode(&Message::Hello(hello(Role::Exploration)), Codec::Identity).into()))
        .unwrap();
    match ws_recv(&mut ws) {
        Message::HelloAck(ack) => assert_eq!(ack.status, AckStatus::Ok),
        other => panic!("expected HELLO_ACK, got {other:?}"),
    }
    let (_rr, mut rw, _) =
        link::connect(h.tcp_addr().unwrap(), &hello(Role::Reconstruction), Codec::Zstd, Duration::from_secs(5)).unwrap();
    rw.send(&Message::TsdfBatch(plane_batch(6))).unwrap();
    wait_for(|| h.server().mc_map().len() == 6);

    ws.send(tungstenite::Message::Binary(wire::encode(&request(64), Codec::Zstd).into())).unwrap();
    let got: BTreeMap<BlockKey, McBlock> = loop {
        if let Message::McBatch(b) = ws_recv(&mut ws) {
            break b.into_iter().collect();
        }
    };
    assert_eq!(got, server_blocks(&h));
    ws.close(None).unwrap();
    h.shutdown();
}

#[test]
fn websocket_on_other_paths_is_not_found() {
    let h = start();
    match ws_connect(&h, "/socket") {
        Err(tungstenite::Error::Http(resp)) => assert_eq!(resp.status(), 404),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("handshake on a foreign path succeeded"),
    }
    h.shutdown();
}

#[test]
fn websocket_must_start_with_hello() {
    let h = start();
    let mut ws = ws_connect(&h, WS_PATH).unwrap();
    ws.send(tungstenite::Message::Binary(wire::encode(&request(4), Codec::Identity).into())).unwrap();
    let closed = loop {
        match ws.read() {
            Ok(tungstenite::Message::Close(_)) => break true,
            Ok(tungstenite::Message::Binary(b)) => {
                let m = wire::decode(&b).unwrap();
                assert!(matches!(m, Message::Stats(_) | Message::HelloAck(_)), "{m:?}");
            }
            Ok(_) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => break true,
            Err(tungstenite::Error::Io(e)) if e.kind() == ErrorKind::ConnectionReset => break true,
            Err(e) => panic!("{e}"),
        }
    };
    assert!(closed);
    h.shutdown();
}
