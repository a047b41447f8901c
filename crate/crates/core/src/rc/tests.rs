use std::cell::RefCell;
use std::collections::HashSet;

use glam::Vec3;

use super::*;
use crate::dataset::{SceneKind, SyntheticSequence};
use crate::voxel::TsdfBlock;

fn config(voxel: f32) -> RcConfig {
    RcConfig {
        fusion: FusionConfig::with_voxel_size(voxel),
        model_hash: HashConfig::new(1 << 14, 1 << 14).unwrap(),
        stream_hash: HashConfig::new(1 << 13, 1 << 13).unwrap(),
        ..RcConfig::default()
    }
}

fn sphere_rc(cfg: RcConfig) -> (Reconstruction, SyntheticSequence) {
    let seq = SyntheticSequence::new(SceneKind::Sphere, 40).with_resolution(80, 60);
    let h = &seq.header;
    (Reconstruction::new(cfg, h.intrinsics, h.near, h.far).unwrap(), seq)
}

fn sent_keys(msg: &Message) -> Vec<BlockKey> {
    match msg {
        Message::TsdfBatch(b) => b.iter().map(|(k, _)| *k).collect(),
        _ => panic!("unexpected {msg:?}"),
    }
}

#[test]
fn rejects_zero_package() {
    let seq = SyntheticSequence::new(SceneKind::Sphere, 1);
    let h = &seq.header;
    let cfg = RcConfig { package_size: 0, ..config(0.01) };
    assert!(matches!(Reconstruction::new(cfg, h.intrinsics, h.near, h.far), Err(RcError::PackageSize)));
}

#[test]
fn pump_splits_into_packages() {
    let (rc, _) = sphere_rc(config(0.01));
    for i in 0..1300 {
        let k = BlockKey::new(i % 50, i / 50, 0);
        rc.model().blocks().insert(k, TsdfBlock::default()).unwrap();
        rc.stream().insert(k).unwrap();
    }
    let mut sizes = Vec::new();
    loop {
        let n = rc.pump(|m| Ok(sent_keys(m).len())).unwrap();
        if n == 0 {
            break;
        }
        sizes.push(n);
    }
    assert_eq!(sizes, vec![512, 512, 276]);
}

#[test]
fn empty_stream_sends_nothing() {
    let (rc, _) = sphere_rc(config(0.01));
    let called = RefCell::new(false);
    assert_eq!(
        rc.pump(|_| {
            *called.borrow_mut() = true;
            Ok(0)
        })
        .unwrap(),
        0
    );
    assert!(!*called.borrow());
}

#[test]
fn failed_send_requeues_keys() {
    let (rc, _) = sphere_rc(RcConfig { package_size: 7, ..config(0.01) });
    for i in 0..20 {
        let k = BlockKey::new(i, 0, 0);
        rc.model().blocks().insert(k, TsdfBlock::default()).unwrap();
        rc.stream().insert(k).unwrap();
    }
    let err = rc.pump(|_| Err(io::Error::new(io::ErrorKind::BrokenPipe, "down")));
    assert!(err.is_err());
    assert_eq!(rc.stream().len(), 20);
}

/// Runs the whole sequence with a sink that fails every `fail_every`-th batch.
fn run_to_end(rc: &Reconstruction, seq: &SyntheticSequence, fail_every: usize) -> HashSet<BlockKey> {
    let delivered = RefCell::new(HashSet::new());
    let mut calls = 0usize;
    let mut pump = |rc: &Reconstruction| {
        calls += 1;
        let fail = fail_every > 0 && calls % fail_every == 0;
        let _ = rc.pump(|m| {
            if fail {
                return Err(io::Error::new(io::ErrorKind::BrokenPipe, "injected"));
            }
            delivered.borrow_mut().extend(sent_keys(m));
            Ok(0)
        });
    };
    for f in seq.iter() {
        rc.process_frame(f).unwrap();
        pump(rc);
    }
    rc.final_flush();
    while !rc.stream().is_empty() {
        pump(rc);
    }
    delivered.into_inner()
}

#[test]
fn every_block_is_delivered_despite_send_failures() {
    let (rc, seq) = sphere_rc(RcConfig { package_size: 64, ..config(0.01) });
    let delivered = run_to_end(&rc, &seq, 3);
    let model: HashSet<BlockKey> = rc.model().blocks().keys().into_iter().collect();
    assert!(!model.is_empty());
    assert_eq!(delivered, model);
}

#[test]
fn static_camera_streams_only_at_the_end() {
    let cfg = RcConfig { ema: EmaParams { threshold: 0.0, ..EmaParams::default() }, ..config(0.01) };
    let (rc, seq) = sphere_rc(cfg);
    let mut f0 = seq.frame(0);
    for i in 0..20u64 {
        f0.timestamp_us = i * 33_000;
        let r = rc.process_frame(f0.clone()).unwrap();
        assert!(r.update.retired.is_empty());
        assert_eq!(r.prefetched, 0);
    }
    assert!(rc.stream().is_empty());
    let n = rc.final_flush();
    assert_eq!(n, rc.model().len());
    assert_eq!(rc.stream().len(), rc.model().len());
}

#[test]
fn panning_camera_retires_blocks() {
    let cfg = RcConfig { ema: EmaParams { threshold: 0.0, ..EmaParams::default() }, ..config(0.01) };
    let seq = SyntheticSequence::new(SceneKind::Room, 60).with_resolution(80, 60);
    let h = &seq.header;
    let rc = Reconstruction::new(cfg, h.intrinsics, h.near, h.far).unwrap();
    let mut retired = HashSet::new();
    let mut first_retirement = None;
    for (i, f) in seq.iter().enumerate() {
        let r = rc.process_frame(f).unwrap();
        if !r.update.retired.is_empty() && first_retirement.is_none() {
            first_retirement = Some(i);
        }
        retired.extend(r.update.retired);
    }
    assert!(first_retirement.is_some_and(|i| i > 0));
    assert!(retired.iter().all(|&k| rc.stream().contains(k)));
}

#[test]
fn prefetch_queues_visible_blocks_once_per_cooldown() {
    let (rc, seq) = sphere_rc(config(0.01));
    let first = rc.process_frame(seq.frame(0)).unwrap();
    assert!(first.prefetched > 0);
    assert_eq!(rc.stream().len(), first.prefetched);
    let again = rc.process_frame(seq.frame(1)).unwrap();
    assert_eq!(again.prefetched, 0);
}

#[test]
fn prefetch_collapses_duplicates() {
    let (rc, seq) = sphere_rc(RcConfig { ema: EmaParams { threshold: 0.0, ..EmaParams::default() }, ..config(0.01) });
    rc.process_frame(seq.frame(0)).unwrap();
    let visible = rc.model().visible_blocks();
    for &k in visible.iter().take(visible.len() / 4) {
        rc.stream().insert(k).unwrap();
    }
    let before = rc.stream().len();
    let offered = rc.prefetch();
    assert_eq!(offered, visible.len());
    assert!(rc.stream().len() - before <= offered);
    assert_eq!(rc.stream().len(), visible.len());
}

#[test]
fn texture_before_first_frame_is_an_error() {
    let (rc, seq) = sphere_rc(config(0.01));
    assert!(matches!(rc.texture(), Message::Stats(s) if s.code == error_code::NO_FRAME));
    for f in seq.iter().take(10) {
        rc.process_frame(f).unwrap();
    }
    let a = rc.texture();
    let b = rc.texture();
    assert_eq!(a, b);
    match a {
        Message::TextureImage(img) => {
            assert_eq!(img.pose, seq.pose(9));
            assert_eq!(img.pixels, seq.frame(9).color);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn reset_deletes_visible_blocks() {
    let (rc, seq) = sphere_rc(config(0.01));
    assert!(rc.reset(|_| panic!("nothing to send")).unwrap().is_empty());
    for f in seq.iter().take(5) {
        rc.process_frame(f).unwrap();
    }
    let before = rc.model().len();
    let mut sent = None;
    let keys = rc
        .reset(|m| {
            sent = Some(m.clone());
            Ok(0)
        })
        .unwrap();
    assert!(!keys.is_empty());
    assert_eq!(rc.model().len(), before - keys.len());
    assert_eq!(sent, Some(Message::ResetBlocks(keys.clone())));
    assert!(keys.iter().all(|&k| !rc.stream().contains(k)));
    // the same view fuses the region back
    let mut f = seq.frame(4);
    f.timestamp_us += 1_000_000;
    rc.process_frame(f).unwrap();
    assert!(keys.iter().any(|&k| rc.model().get(k).is_some()));
}

#[test]
fn reset_with_nothing_in_view_is_suppressed() {
    let (rc, seq) = sphere_rc(config(0.01));
    rc.process_frame(seq.frame(0)).unwrap();
    let mut away = seq.frame(1);
    away.pose = Pose::look_at(Vec3::new(0.0, 0.0, 1.5), Vec3::new(0.0, 0.0, 3.0), Vec3::Y);
    away.depth.iter_mut().for_each(|d| *d = 0.0);
    rc.process_frame(away).unwrap();
    assert!(rc.reset(|_| panic!("suppressed")).unwrap().is_empty());
}
