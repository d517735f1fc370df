mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vfr::checkpoint::Checkpoint;
use vfr::config::RunConfig;

fn vfr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vfr")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny toy dataset, its config, and a checkpoint trained for `steps`.
struct Fixture {
    _dir: tempfile::TempDir,
    scene: PathBuf,
    config: PathBuf,
    out: PathBuf,
}

impl Fixture {
    fn new(steps: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let scene = dir.path().join("toy");
        let o = vfr(&[
            "gen-toy",
            "--out",
            s(&scene),
            "--views",
            "4",
            "--val-views",
            "1",
            "--test-views",
            "2",
            "--resolution",
            "16",
            "--quadrature",
            "256",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(scene.join("toy.conf").exists());
        let config = dir.path().join("tiny.conf");
        std::fs::write(&config, common::tiny_config(4, 2).dump()).unwrap();
        let out = dir.path().join("run");
        let steps = steps.to_string();
        let o = vfr(&[
            "train",
            "--scene",
            s(&scene),
            "--config",
            s(&config),
            "--out",
            s(&out),
            "--steps",
            &steps,
            "--mode",
            "vfr",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        Self {
            _dir: dir,
            scene,
            config,
            out,
        }
    }

    fn checkpoint(&self) -> PathBuf {
        self.out.join("model.vfr")
    }
}

#[test]
fn one_step_run_writes_a_checkpoint_and_metrics() {
    let f = Fixture::new(1);
    let ckpt = Checkpoint::load(&f.checkpoint()).unwrap();
    assert_eq!(ckpt.step, 1);
    let metrics = std::fs::read_to_string(f.out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert!(metrics.lines().nth(1).unwrap().starts_with("1,"));
}

#[test]
fn render_is_deterministic_and_reports_psnr() {
    let f = Fixture::new(3);
    let a = f.out.join("a.png");
    let b = f.out.join("b.png");
    for p in [&a, &b] {
        let o = vfr(&[
            "render",
            "--checkpoint",
            s(&f.checkpoint()),
            "--pose",
            "0",
            "--out",
            s(p),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("PSNR"), "{}", stdout(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let pose = f.out.join("pose.json");
    let frame = &vfr::scene::load_nerf_synthetic(&f.scene, [1.0; 3]).unwrap().test[0];
    std::fs::write(&pose, serde_json::json!({ "transform_matrix": frame.pose }).to_string()).unwrap();
    let c = f.out.join("c.png");
    let o = vfr(&[
        "render",
        "--checkpoint",
        s(&f.checkpoint()),
        "--pose",
        s(&pose),
        "--out",
        s(&c),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let d = f.out.join("d.png");
    let o = vfr(&[
        "render",
        "--checkpoint",
        s(&f.checkpoint()),
        "--pose",
        "0",
        "--split",
        "test",
        "--out",
        s(&d),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&c).unwrap(), std::fs::read(&d).unwrap());
}

#[test]
fn render_rejects_an_out_of_range_pose() {
    let f = Fixture::new(1);
    let o = vfr(&[
        "render",
        "--checkpoint",
        s(&f.checkpoint()),
        "--pose",
        "99",
        "--out",
        s(&f.out.join("x.png")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("out of range"), "{}", stderr(&o));
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let f = Fixture::new(1);
    let mut bytes = std::fs::read(f.checkpoint()).unwrap();
    bytes[..4].copy_from_slice(b"JUNK");
    let bad = f.out.join("bad.vfr");
    std::fs::write(&bad, bytes).unwrap();
    let o = vfr(&[
        "render",
        "--checkpoint",
        s(&bad),
        "--pose",
        "0",
        "--out",
        s(&f.out.join("x.png")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad magic"), "{}", stderr(&o));
}

#[test]
fn eval_mean_is_the_mean_of_the_rows() {
    let f = Fixture::new(2);
    let csv = f.out.join("eval.csv");
    let o = vfr(&[
        "eval",
        "--checkpoint",
        s(&f.checkpoint()),
        "--scene",
        s(&f.scene),
        "--csv",
        s(&csv),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("| mean |"));
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    let views: Vec<f64> = rows[..2].iter().map(|r| r[1].parse().unwrap()).collect();
    let mean: f64 = rows[2][1].parse().unwrap();
    assert!((mean - (views[0] + views[1]) / 2.0).abs() < 1e-5);
}

#[test]
fn bench_reports_eval_counts() {
    let f = Fixture::new(1);
    let csv = f.out.join("bench.csv");
    let o = vfr(&[
        "bench",
        "--scene",
        s(&f.scene),
        "--config",
        s(&f.config),
        "--mlp-sizes",
        "2x8",
        "--steps",
        "1",
        "--csv",
        s(&csv),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("step-time ratio"));
    let text = std::fs::read_to_string(&csv).unwrap();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let (evals, samples): (f64, f64) = (cols[3].parse().unwrap(), cols[4].parse().unwrap());
        match cols[0] {
            "vfr" => assert_eq!(evals, 1.0),
            "standard" => assert_eq!(evals, samples),
            other => panic!("unexpected mode {other}"),
        }
    }
}

#[test]
fn config_errors_exit_with_usage_status() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "steps = 10\nwidht = 3\n").unwrap();
    let o = vfr(&["train", "--config", s(&conf), "--dump-config"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("widht") && stderr(&o).contains("line 2"),
        "{}",
        stderr(&o)
    );
    assert_eq!(vfr(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(vfr(&["render"]).status.code(), Some(1));
}

#[test]
fn dump_config_round_trips() {
    let o = vfr(&[
        "train",
        "--dump-config",
        "--steps",
        "50",
        "--pilot-steps",
        "7",
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let c = RunConfig::parse(&stdout(&o)).unwrap();
    assert_eq!((c.train.steps, c.train.pilot_steps, c.train.seed), (50, 7, 3));
    let default = RunConfig::default().dump();
    let o = vfr(&["train", "--dump-config"]);
    assert_eq!(stdout(&o), default);
}

#[test]
fn missing_scene_is_a_data_error() {
    let o = vfr(&[
        "train",
        "--scene",
        "/nonexistent/scene",
        "--out",
        "/tmp/unused",
        "--steps",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_numeric_status() {
    let f = Fixture::new(1);
    let mut cfg = common::tiny_config(20, 2);
    cfg.train.lr = 1e-12;
    cfg.train.divergence_factor = 0.5;
    cfg.train.divergence_patience = 3;
    let conf = f.out.join("stall.conf");
    std::fs::write(&conf, cfg.dump()).unwrap();
    let out = f.out.join("stall");
    let o = vfr(&["train", "--scene", s(&f.scene), "--config", s(&conf), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
    // The partial model is kept for inspection.
    assert_eq!(Checkpoint::load(&out.join("model.vfr")).unwrap().step, 2);
}
