use std::path::Path;
use std::process::{Command, Output};

use occfuse::objectives::MetricsReport;
use occfuse::scene::PointCloud;

/// Small settings so a whole chain runs in seconds.
const FAST: &[&str] = &[
    "init.num_gaussians=32",
    "train.iterations=2",
    "lcd.train.steps=3",
    "lcd.steps=2",
    "cameras.size=64",
    "lidar.sweeps=3",
];

fn occfuse(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_occfuse"));
    cmd.current_dir(dir);
    for s in FAST {
        cmd.args(["--set", s]);
    }
    cmd.args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = occfuse(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn oracle_completion_reproduces_the_target() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["simulate-lidar", "--scan", "scan.gopc", "--target", "target.gopc"]);
    ok(d, &["--set", "lcd.steps=1", "complete", "--scan", "scan.gopc", "--target", "target.gopc", "--oracle", "--out", "out.gopc"]);
    let target = PointCloud::read(&d.join("target.gopc")).unwrap();
    let out = PointCloud::read(&d.join("out.gopc")).unwrap();
    assert_eq!(out.len(), target.len());
    let worst = out.points.iter().zip(&target.points).flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs())).fold(0.0, f64::max);
    // both files store f32 coordinates
    assert!(worst <= 1e-5, "{worst}");
}

#[test]
fn stage_by_stage_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-scene", "--gt", "gt.gocc"]);
    ok(d, &["simulate-lidar", "--scan", "scan.gopc", "--target", "target.gopc", "--sweeps-dir", "sweeps"]);
    assert_eq!(std::fs::read_dir(d.join("sweeps")).unwrap().count(), 3);
    ok(d, &["complete", "--scan", "scan.gopc", "--target", "target.gopc", "--out", "done.gopc", "--save-denoiser", "den.gowt"]);
    // reloading the saved denoiser reproduces the completion
    ok(d, &["complete", "--scan", "scan.gopc", "--denoiser", "den.gowt", "--out", "again.gopc"]);
    assert_eq!(std::fs::read(d.join("done.gopc")).unwrap(), std::fs::read(d.join("again.gopc")).unwrap());
    ok(d, &["init-gaussians", "--cloud", "done.gopc", "--out", "g0.gowt"]);
    let msg = ok(d, &["train", "--cloud", "done.gopc", "--gaussians", "g0.gowt", "--gt", "gt.gocc", "--net-out", "net.gowt", "--gaussians-out", "g1.gowt"]);
    assert!(msg.contains("2 iterations"), "{msg}");
    ok(d, &["predict", "--cloud", "done.gopc", "--gaussians", "g1.gowt", "--net", "net.gowt", "--out", "pred.gocc"]);
    ok(d, &["predict", "--cloud", "done.gopc", "--gaussians", "g1.gowt", "--net", "net.gowt", "--out", "logits.gocc", "--logits"]);
    ok(d, &["eval", "--pred", "pred.gocc", "--gt", "gt.gocc", "--out", "r1.json"]);
    ok(d, &["eval", "--pred", "logits.gocc", "--gt", "gt.gocc", "--out", "r2.json"]);
    let r1 = MetricsReport::from_json(&std::fs::read_to_string(d.join("r1.json")).unwrap()).unwrap();
    let r2 = MetricsReport::from_json(&std::fs::read_to_string(d.join("r2.json")).unwrap()).unwrap();
    assert!((0.0..=1.0).contains(&r1.iou) && (0.0..=1.0).contains(&r1.miou));
    assert_eq!((r1.iou, r1.miou), (r2.iou, r2.miou));
}

#[test]
fn eval_of_identical_files_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-scene", "--gt", "gt.gocc"]);
    let out = ok(d, &["eval", "--pred", "gt.gocc", "--gt", "gt.gocc"]);
    let r = MetricsReport::from_json(&out).unwrap();
    assert_eq!((r.iou, r.miou), (1.0, 1.0));
}

fn report_without_time(dir: &Path) -> String {
    let mut r = MetricsReport::from_json(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    r.wall_ms = 0;
    r.to_json()
}

#[test]
fn run_is_deterministic_and_lcd_can_be_disabled() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["--threads", "1", "run", "--out-dir", "a"]);
    ok(d, &["run", "--out-dir", "b"]);
    assert_eq!(report_without_time(&d.join("a")), report_without_time(&d.join("b")));
    for f in ["scan.gopc", "target.gopc", "completed.gopc", "gt.gocc", "pred.gocc", "net.gowt", "gaussians.gowt", "denoiser.gowt"] {
        assert!(d.join("a").join(f).exists(), "{f}");
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let r = MetricsReport::from_json(&std::fs::read_to_string(d.join("a/report.json")).unwrap()).unwrap();
    assert!((0.0..=1.0).contains(&r.iou));

    ok(d, &["--set", "lcd.enabled=false", "run", "--out-dir", "raw"]);
    assert!(d.join("raw/report.json").exists());
    assert!(!d.join("raw/completed.gopc").exists());
    let raw = MetricsReport::from_json(&std::fs::read_to_string(d.join("raw/report.json")).unwrap()).unwrap();
    assert_ne!(raw.config_hash, r.config_hash);
}

#[test]
fn config_file_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("c.txt"), "# comment\nseed = 5\n").unwrap();
    ok(d, &["--config", "c.txt", "gen-scene", "--gt", "a.gocc"]);
    ok(d, &["--set", "seed=5", "gen-scene", "--gt", "b.gocc"]);
    ok(d, &["gen-scene", "--gt", "c.gocc"]);
    let read = |f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read("a.gocc"), read("b.gocc"));
    assert_ne!(read("a.gocc"), read("c.gocc"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&occfuse(d, &["no-such-command"])), 1);
    assert_eq!(code(&occfuse(d, &["eval", "--pred", "x.gocc"])), 1);
    assert_eq!(code(&occfuse(d, &["--set", "nonsense.key=1", "gen-scene", "--gt", "g.gocc"])), 1);
    assert_eq!(code(&occfuse(d, &["--set", "gaf.d=0", "gen-scene", "--gt", "g.gocc"])), 1);
    let missing = occfuse(d, &["eval", "--pred", "missing.gocc", "--gt", "missing.gocc"]);
    assert_eq!(code(&missing), 2);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing.gocc"));
    std::fs::write(d.join("junk.gocc"), b"not a grid").unwrap();
    assert_eq!(code(&occfuse(d, &["eval", "--pred", "junk.gocc", "--gt", "junk.gocc"])), 2);
    // a learning rate this large drives the loss to infinity
    let blown = occfuse(d, &["--set", "train.optim.lr=1e200", "--set", "train.iterations=4", "run", "--out-dir", "nan"]);
    assert_eq!(code(&blown), 3, "{}", String::from_utf8_lossy(&blown.stderr));
    assert_eq!(code(&occfuse(d, &["--help"])), 0);
}

#[test]
fn gradcheck_and_bench() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = ok(d, &["gradcheck"]);
    assert_eq!(out.lines().filter(|l| l.ends_with(" ok")).count(), 4, "{out}");
    let out = ok(d, &["bench", "--counts", "16,64", "--repeats", "1", "--out", "bench.json"]);
    assert!(out.contains("splat_occupancy") && out.contains("gaf_forward") && out.contains("peak RSS"), "{out}");
    let json = std::fs::read_to_string(d.join("bench.json")).unwrap();
    assert!(json.contains("\"n_gaussians\": 64"));
}
