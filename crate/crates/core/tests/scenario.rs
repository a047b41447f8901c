use scenestream::scenario::{self, ScenarioSpec};

fn small(extra: &str) -> ScenarioSpec {
    let text = format!(
        "name = \"small\"\nscene = \"sphere\"\nframes = 24\nwidth = 80\nheight = 60\nvoxel = 0.01\ntimeout_s = 120\nbuckets = 16384\n[rc]\npackage = 128\nrate = 200\n{extra}"
    );
    ScenarioSpec::parse(&text).unwrap()
}

#[test]
fn clients_converge_to_server_model() {
    let spec = small("[[ec]]\nmax_blocks = 128\nrate = 200\n[[ec]]\nmax_blocks = 64\nrate = 200\nstrategy = \"order\"\n");
    let report = scenario::run(&spec).unwrap();
    println!("{}", report.summary());
    assert!(report.mc_blocks > 0);
    assert_eq!(report.tsdf_blocks, report.rc_blocks);
    assert_eq!(report.ecs.len(), 2);
    for e in &report.ecs {
        assert!(e.is_exact(), "{e:?}");
        assert_eq!(e.local_blocks, report.mc_blocks);
        assert_eq!(e.completeness, 1.0);
    }
    assert!(report.csv.starts_with("t_s,rc_bytes,ec0_bytes,ec1_bytes\n"));
}

#[test]
fn outage_and_reset_still_converge() {
    // 60 frames at real time span 2 s, so the reset lands mid-sequence and gets re-scanned
    let mut spec = small(
        "[[ec]]\nmax_blocks = 64\nrate = 100\n[[outage]]\nec = 0\nat_s = 0.8\nduration_s = 2\n[[reset]]\nec = 0\nat_s = 0.4\n",
    );
    spec.frames = 60;
    spec.speed = 1.0;
    let report = scenario::run(&spec).unwrap();
    println!("{}", report.summary());
    let e = &report.ecs[0];
    assert!(e.is_exact(), "{e:?}");
    assert!(e.reconnects >= 1);
    assert!(e.deletes > 0, "{e:?}");
    assert!(report.mc_blocks > 0);
}

#[test]
fn sequential_clients_run_alone() {
    let spec = small("[[ec]]\nmax_blocks = 256\nafter_rc = true\ndiscard = true\n[[ec]]\nmax_blocks = 32\nafter_rc = true\n");
    let report = scenario::run(&spec).unwrap();
    println!("{}", report.summary());
    assert!(report.ecs[0].discard);
    assert!(report.ecs[0].link.blocks >= report.mc_blocks as u64);
    assert!(report.ecs[1].is_exact());
    assert!(report.ecs[1].finished_s > report.ecs[0].finished_s);
}
