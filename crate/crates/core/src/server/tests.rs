use std::collections::HashSet;
use std::sync::mpsc::{channel, Receiver};
use std::time::{Duration, Instant};

use super::*;
use crate::wire::{decode, Hello};

const VS: f32 = 0.05;

fn server() -> Server {
    Server::new(ServerConfig::small(VS))
}

fn hello(role: Role, id: u8) -> Hello {
    Hello { role: role as u8, client_id: [id; 16], voxel_size: VS, block_edge: 8 }
}

fn join(s: &Server, role: Role, id: u8) -> (Connection, Receiver<Vec<u8>>) {
    let (tx, rx) = channel();
    let c = s.connect(&hello(role, id), tx).ok().expect("accepted");
    (c, rx)
}

fn drain(rx: &Receiver<Vec<u8>>) -> Vec<Message> {
    rx.try_iter().map(|f| decode(&f).expect("valid frame")).collect()
}

fn request(max: u32, strategy: Strategy) -> Message {
    Message::BlockRequest(BlockRequest {
        max_blocks: max,
        strategy,
        pose: Pose::IDENTITY,
        intrinsics: [100.0, 100.0, 100.0, 100.0, 0.1, 10.0],
    })
}

fn batch(keys: &[BlockKey]) -> Vec<(BlockKey, TsdfBlock)> {
    keys.iter().map(|&k| (k, TsdfBlock::default())).collect()
}

fn mc_keys(msgs: &[Message]) -> Vec<BlockKey> {
    msgs.iter()
        .flat_map(|m| match m {
            Message::McBatch(b) => b.iter().map(|(k, _)| *k).collect(),
            _ => Vec::new(),
        })
        .collect()
}

fn cube(n: i32) -> Vec<BlockKey> {
    let mut v = Vec::new();
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                v.push(BlockKey::new(x, y, z));
            }
        }
    }
    v
}

#[test]
fn batch_without_exploration_clients_updates_models() {
    let s = server();
    let affected = s.on_tsdf_batch(batch(&[BlockKey::new(3, 3, 3)]));
    assert_eq!(affected, vec![BlockKey::new(3, 3, 3)]);
    assert_eq!(s.tsdf_map().len(), 1);
    assert_eq!(s.mc_map().len(), 1);
}

#[test]
fn batch_queues_affected_set_for_each_client() {
    let s = server();
    s.on_tsdf_batch(batch(&cube(2)));
    let conns: Vec<_> = (1..=3).map(|i| join(&s, Role::Exploration, i)).collect();
    for (c, rx) in &conns {
        assert_eq!(c.session.pending(), 8);
        s.handle(c, request(100, Strategy::Random));
        assert_eq!(mc_keys(&drain(rx)).len(), 8);
    }
    s.on_tsdf_batch(batch(&[BlockKey::new(1, 1, 1)]));
    for (c, _) in &conns {
        assert_eq!(c.session.pending(), 8);
    }
    s.on_tsdf_batch(batch(&[BlockKey::new(0, 0, 0)]));
    for (c, _) in &conns {
        // (0,0,0) only touches itself, which is already pending
        assert_eq!(c.session.pending(), 8);
    }
}

#[test]
fn duplicate_batch_is_delivered_once() {
    let s = server();
    let (c, rx) = join(&s, Role::Exploration, 1);
    let k = BlockKey::new(-4, 2, 9);
    s.on_tsdf_batch(batch(&[k]));
    s.on_tsdf_batch(batch(&[k]));
    assert_eq!(c.session.pending(), 1);
    s.handle(&c, request(10, Strategy::Random));
    s.handle(&c, request(10, Strategy::Random));
    assert_eq!(mc_keys(&drain(&rx)), vec![k]);
}

#[test]
fn request_on_empty_set_returns_empty_batch() {
    let s = server();
    let (c, rx) = join(&s, Role::Exploration, 1);
    drain(&rx);
    s.handle(&c, request(10, Strategy::Random));
    let msgs = drain(&rx);
    assert_eq!(msgs, vec![Message::McBatch(Vec::new())]);
}

#[test]
fn request_larger_than_pending_drains_all() {
    let s = server();
    let (c, rx) = join(&s, Role::Exploration, 1);
    let keys: Vec<BlockKey> = (0..5).map(|i| BlockKey::new(i * 3, 0, 0)).collect();
    s.on_tsdf_batch(batch(&keys));
    s.handle(&c, request(10, Strategy::Random));
    let mut got = mc_keys(&drain(&rx));
    got.sort();
    assert_eq!(got, keys);
    assert_eq!(c.session.pending(), 0);
}

#[test]
fn zero_max_blocks_is_rejected() {
    let s = server();
    let (c, rx) = join(&s, Role::Exploration, 1);
    drain(&rx);
    s.on_tsdf_batch(batch(&[BlockKey::new(0, 0, 0)]));
    s.handle(&c, request(0, Strategy::Random));
    let msgs = drain(&rx);
    assert!(matches!(&msgs[0], Message::Stats(st) if st.code == error_code::BAD_REQUEST));
    assert_eq!(msgs[1], Message::McBatch(Vec::new()));
    assert_eq!(c.session.pending(), 1);
}

#[test]
fn visible_first_drains_visible_keys_first() {
    let s = server();
    let visible: Vec<BlockKey> = (-2..3).map(|x| BlockKey::new(x * 2, 0, 5)).collect();
    let hidden: Vec<BlockKey> = (-2..3).map(|x| BlockKey::new(x * 2, 0, -8)).collect();
    let all: Vec<BlockKey> = visible.iter().chain(&hidden).copied().collect();
    s.on_tsdf_batch(batch(&all));
    let (c, rx) = join(&s, Role::Exploration, 1);
    drain(&rx);
    s.handle(&c, request(5, Strategy::VisibleFirst));
    let first: HashSet<BlockKey> = mc_keys(&drain(&rx)).into_iter().collect();
    assert_eq!(first, visible.iter().copied().collect());
    s.handle(&c, request(5, Strategy::VisibleFirst));
    let second: HashSet<BlockKey> = mc_keys(&drain(&rx)).into_iter().collect();
    assert_eq!(second, hidden.iter().copied().collect());
}

#[test]
fn visible_first_tops_up_with_hidden_keys() {
    let s = server();
    s.on_tsdf_batch(batch(&[BlockKey::new(0, 0, 5), BlockKey::new(0, 0, -8), BlockKey::new(4, 0, -8)]));
    let (c, rx) = join(&s, Role::Exploration, 1);
    drain(&rx);
    s.handle(&c, request(2, Strategy::VisibleFirst));
    let got = mc_keys(&drain(&rx));
    assert_eq!(got.len(), 2);
    assert_eq!(got[0], BlockKey::new(0, 0, 5));
}

#[test]
fn generation_order_follows_first_queueing() {
    let s = server();
    let (c, rx) = join(&s, Role::Exploration, 1);
    let keys: Vec<BlockKey> = (0..6).map(|i| BlockKey::new(10 - i * 3, 0, 0)).collect();
    for &k in &keys {
        s.on_tsdf_batch(batch(&[k]));
    }
    s.handle(&c, request(6, Strategy::GenerationOrder));
    assert_eq!(mc_keys(&drain(&rx)), keys);
}

#[test]
fn new_client_is_filled_with_whole_model() {
    let s = server();
    s.on_tsdf_batch(batch(&cube(4)));
    let (c, rx) = join(&s, Role::Exploration, 1);
    assert_eq!(c.session.pending(), 64);
    let msgs = drain(&rx);
    assert!(matches!(msgs[0], Message::HelloAck(HelloAck { status: AckStatus::Ok, resumed: false, pending: 64 })));
}

#[test]
fn reconnect_keeps_updates_from_outage() {
    let s = server();
    let (c, rx) = join(&s, Role::Exploration, 7);
    s.on_tsdf_batch(batch(&cube(2)));
    s.handle(&c, request(100, Strategy::Random));
    drain(&rx);
    s.disconnect(&c);
    assert!(!c.session.is_connected());
    let outage: Vec<BlockKey> = (0..50).map(|i| BlockKey::new(i * 2, 20, 0)).collect();
    s.on_tsdf_batch(batch(&outage));
    let (c2, rx2) = join(&s, Role::Exploration, 7);
    assert!(std::sync::Arc::ptr_eq(&c.session, &c2.session));
    let msgs = drain(&rx2);
    assert!(matches!(msgs[0], Message::HelloAck(HelloAck { resumed: true, .. })));
    let pending = c2.session.stream().unwrap().snapshot_keys();
    assert!(pending.len() >= 50);
    assert!(pending.iter().all(|&k| s.mc_map().contains(k)));
}

#[test]
fn unacknowledged_response_is_requeued_on_disconnect() {
    let s = server();
    let (c, rx) = join(&s, Role::Exploration, 2);
    s.on_tsdf_batch(batch(&cube(2)));
    s.handle(&c, request(3, Strategy::Random));
    let lost = mc_keys(&drain(&rx));
    assert_eq!(lost.len(), 3);
    s.disconnect(&c);
    let (c2, _rx2) = join(&s, Role::Exploration, 2);
    assert_eq!(c2.session.pending(), 8);
    for k in lost {
        assert!(c2.session.stream().unwrap().contains(k));
    }
}

#[test]
fn acknowledged_response_is_not_requeued() {
    let s = server();
    let (c, rx) = join(&s, Role::Exploration, 2);
    s.on_tsdf_batch(batch(&cube(2)));
    s.handle(&c, request(3, Strategy::Random));
    s.handle(&c, request(2, Strategy::Random));
    drain(&rx);
    s.disconnect(&c);
    let (c2, _rx2) = join(&s, Role::Exploration, 2);
    assert_eq!(c2.session.pending(), 5);
}

#[test]
fn stale_disconnect_does_not_drop_new_link() {
    let s = server();
    let (old, _rx) = join(&s, Role::Exploration, 3);
    let (new, _rx2) = join(&s, Role::Exploration, 3);
    s.disconnect(&old);
    assert!(new.session.is_connected());
}

#[test]
fn expired_session_is_treated_as_new() {
    let s = Server::new(ServerConfig { retention: Duration::from_millis(0), ..ServerConfig::small(VS) });
    let (c, _rx) = join(&s, Role::Exploration, 4);
    s.disconnect(&c);
    assert_eq!(s.expire_sessions(Instant::now() + Duration::from_secs(1)), 1);
    let (_, rx) = join(&s, Role::Exploration, 4);
    assert!(matches!(drain(&rx)[0], Message::HelloAck(HelloAck { resumed: false, .. })));
}

#[test]
fn mismatched_configuration_is_rejected() {
    let s = server();
    let (tx, _rx) = channel();
    let h = Hello { voxel_size: 0.01, ..hello(Role::Exploration, 1) };
    let nack = s.connect(&h, tx.clone()).err().expect("rejected");
    assert!(matches!(decode(&nack).unwrap(), Message::HelloAck(HelloAck { status: AckStatus::ConfigMismatch, .. })));
    let h = Hello { block_edge: 16, ..hello(Role::Exploration, 1) };
    assert!(s.connect(&h, tx.clone()).is_err());
    let h = Hello { role: 9, ..hello(Role::Exploration, 1) };
    let nack = s.connect(&h, tx).err().expect("rejected");
    assert!(matches!(decode(&nack).unwrap(), Message::HelloAck(HelloAck { status: AckStatus::BadRole, .. })));
    assert!(s.sessions().is_empty());
}

fn broadcasts(rx: &Receiver<Vec<u8>>) -> Vec<Vec<PeerPose>> {
    drain(rx)
        .into_iter()
        .filter_map(|m| match m {
            Message::PoseBroadcast(p) => Some(p),
            _ => None,
        })
        .collect()
}

#[test]
fn poses_are_relayed_to_other_clients() {
    let s = server();
    let (rc, _rc_rx) = join(&s, Role::Reconstruction, 1);
    let (a, a_rx) = join(&s, Role::Exploration, 2);
    let (b, b_rx) = join(&s, Role::Exploration, 3);
    for c in [&rc, &a, &b] {
        s.handle(c, Message::PoseUpdate(Pose::IDENTITY));
    }
    s.pose_tick(Instant::now());
    for (rx, own) in [(&a_rx, [2u8; 16]), (&b_rx, [3u8; 16])] {
        let got = broadcasts(rx);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].len(), 2);
        assert!(got[0].iter().all(|p| p.client_id != own));
    }
}

#[test]
fn single_client_gets_no_broadcast() {
    let s = server();
    let (a, rx) = join(&s, Role::Exploration, 2);
    s.handle(&a, Message::PoseUpdate(Pose::IDENTITY));
    assert_eq!(s.pose_tick(Instant::now()), 0);
    assert!(broadcasts(&rx).is_empty());
}

#[test]
fn pose_relay_is_rate_limited() {
    let s = server();
    let (a, _a_rx) = join(&s, Role::Exploration, 2);
    let (_b, b_rx) = join(&s, Role::Exploration, 3);
    let t0 = Instant::now();
    for i in 0..100u64 {
        s.handle(&a, Message::PoseUpdate(Pose::IDENTITY));
        s.pose_tick(t0 + Duration::from_millis(i * 10));
    }
    let n = broadcasts(&b_rx).len();
    assert!((10..=20).contains(&n), "{n} broadcasts in one second");
}

#[test]
fn unchanged_poses_are_not_resent() {
    let s = server();
    let (a, _a_rx) = join(&s, Role::Exploration, 2);
    let (_b, b_rx) = join(&s, Role::Exploration, 3);
    s.handle(&a, Message::PoseUpdate(Pose::IDENTITY));
    let t0 = Instant::now();
    for i in 0..10 {
        s.pose_tick(t0 + Duration::from_secs(i));
    }
    assert_eq!(broadcasts(&b_rx).len(), 1);
}

fn image() -> TextureImage {
    TextureImage { pose: Pose::IDENTITY, intrinsics: [1.0, 1.0, 1.0, 1.0], width: 2, height: 1, pixels: vec![7; 6] }
}

fn textures(rx: &Receiver<Vec<u8>>) -> usize {
    drain(rx).iter().filter(|m| matches!(m, Message::TextureImage(_))).count()
}

#[test]
fn texture_without_reconstruction_client_is_an_error() {
    let s = server();
    let (a, rx) = join(&s, Role::Exploration, 2);
    drain(&rx);
    s.handle(&a, Message::TextureRequest);
    let msgs = drain(&rx);
    assert!(matches!(&msgs[..], [Message::Stats(st)] if st.kind == StatsKind::Error && st.code == error_code::NO_RECONSTRUCTION_CLIENT));
}

#[test]
fn texture_is_relayed_to_requester() {
    let s = server();
    let (rc, rc_rx) = join(&s, Role::Reconstruction, 1);
    let (a, a_rx) = join(&s, Role::Exploration, 2);
    let (_b, b_rx) = join(&s, Role::Exploration, 3);
    drain(&rc_rx);
    s.handle(&a, Message::TextureRequest);
    assert_eq!(drain(&rc_rx), vec![Message::TextureRequest]);
    s.handle(&rc, Message::TextureImage(image()));
    assert_eq!(textures(&a_rx), 1);
    assert_eq!(textures(&b_rx), 0);
}

#[test]
fn concurrent_texture_requests_share_one_image() {
    let s = server();
    let (rc, rc_rx) = join(&s, Role::Reconstruction, 1);
    let (a, a_rx) = join(&s, Role::Exploration, 2);
    let (b, b_rx) = join(&s, Role::Exploration, 3);
    drain(&rc_rx);
    s.handle(&a, Message::TextureRequest);
    s.handle(&b, Message::TextureRequest);
    assert_eq!(drain(&rc_rx).len(), 1);
    s.handle(&rc, Message::TextureImage(image()));
    assert_eq!(textures(&a_rx), 1);
    assert_eq!(textures(&b_rx), 1);
    // a stray image with nobody waiting goes nowhere
    s.handle(&rc, Message::TextureImage(image()));
    assert_eq!(textures(&a_rx) + textures(&b_rx), 0);
}

#[test]
fn texture_fanout_reaches_every_exploration_client() {
    let s = Server::new(ServerConfig { texture_fanout: true, ..ServerConfig::small(VS) });
    let (rc, _rc_rx) = join(&s, Role::Reconstruction, 1);
    let (a, a_rx) = join(&s, Role::Exploration, 2);
    let (_b, b_rx) = join(&s, Role::Exploration, 3);
    s.handle(&a, Message::TextureRequest);
    s.handle(&rc, Message::TextureImage(image()));
    assert_eq!(textures(&a_rx), 1);
    assert_eq!(textures(&b_rx), 1);
}

#[test]
fn reset_request_is_forwarded() {
    let s = server();
    let (a, a_rx) = join(&s, Role::Exploration, 2);
    drain(&a_rx);
    s.handle(&a, Message::ResetRequest);
    assert!(matches!(&drain(&a_rx)[..], [Message::Stats(st)] if st.code == error_code::NO_RECONSTRUCTION_CLIENT));
    let (_rc, rc_rx) = join(&s, Role::Reconstruction, 1);
    drain(&rc_rx);
    s.handle(&a, Message::ResetRequest);
    assert_eq!(drain(&rc_rx), vec![Message::ResetRequest]);
}

#[test]
fn empty_reset_is_a_no_op() {
    let s = server();
    let (rc, _rc_rx) = join(&s, Role::Reconstruction, 1);
    let (a, a_rx) = join(&s, Role::Exploration, 2);
    s.on_tsdf_batch(batch(&cube(2)));
    s.handle(&rc, Message::ResetBlocks(Vec::new()));
    s.handle(&a, request(100, Strategy::Random));
    assert!(!drain(&a_rx).iter().any(|m| matches!(m, Message::DeleteBlocks(_))));
    assert_eq!(s.mc_map().len(), 8);
}

#[test]
fn reset_deletes_precede_new_blocks() {
    let s = server();
    let (rc, _rc_rx) = join(&s, Role::Reconstruction, 1);
    let (a, a_rx) = join(&s, Role::Exploration, 2);
    s.on_tsdf_batch(batch(&cube(2)));
    s.handle(&a, request(100, Strategy::Random));
    drain(&a_rx);
    let gone = BlockKey::new(1, 1, 1);
    s.handle(&rc, Message::ResetBlocks(vec![gone]));
    assert!(!s.tsdf_map().contains(gone));
    assert!(!s.mc_map().contains(gone));
    // all seven negative neighbours were recomputed and queued
    assert_eq!(a.session.pending(), 7);
    s.on_tsdf_batch(batch(&[gone]));
    s.handle(&a, request(100, Strategy::Random));
    let msgs = drain(&a_rx);
    assert_eq!(msgs[0], Message::DeleteBlocks(vec![gone]));
    assert!(mc_keys(&msgs[1..]).contains(&gone));
}

#[test]
fn reset_of_keys_absent_from_stream_leaves_set_unchanged() {
    let s = server();
    let (rc, _rc_rx) = join(&s, Role::Reconstruction, 1);
    let (a, a_rx) = join(&s, Role::Exploration, 2);
    let far = BlockKey::new(50, 50, 50);
    s.on_tsdf_batch(batch(&[far]));
    s.handle(&a, request(100, Strategy::Random));
    drain(&a_rx);
    let near = BlockKey::new(0, 0, 0);
    s.on_tsdf_batch(batch(&[near]));
    s.handle(&rc, Message::ResetBlocks(vec![far]));
    assert_eq!(a.session.stream().unwrap().snapshot_keys(), vec![near]);
}

#[test]
fn stats_query_reports_counts() {
    let s = server();
    let (a, rx) = join(&s, Role::Exploration, 2);
    s.on_tsdf_batch(batch(&cube(2)));
    drain(&rx);
    s.handle(&a, Message::Stats(Stats::query()));
    match &drain(&rx)[..] {
        [Message::Stats(st)] => {
            assert_eq!((st.tsdf_blocks, st.mc_blocks, st.pending), (8, 8, 8));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn metrics_rows_cover_every_session() {
    let s = server();
    let _a = join(&s, Role::Exploration, 2);
    let _b = join(&s, Role::Reconstruction, 3);
    let mut out = Vec::new();
    let mut w = MetricsWriter::new(&mut out);
    w.write_rows(&s).unwrap();
    w.write_rows(&s).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 3);
    assert!(text.starts_with("t_s,link,role"));
}
