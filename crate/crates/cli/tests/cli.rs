use std::path::Path;
use std::process::{Command, Output};

fn tednet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tednet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tednet(args);
    assert!(
        out.status.success(),
        "tednet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn mean_field(json: &str, field: &str) -> f64 {
    let v: serde_json::Value = serde_json::from_str(json).unwrap();
    v["mean"][field].as_f64().unwrap()
}

#[test]
fn shape_check_prints_default_plan() {
    let out = ok(&["shape-check"]);
    assert!(out.contains("64 -> 32"), "{out}");
    assert!(out.contains("2304 -> 256"), "{out}");
    assert!(out.contains("output 1x64x64"), "{out}");
    let desk = ok(&["shape-check", "--preset", "desk"]);
    assert!(desk.contains("output 1x32x32"), "{desk}");
}

#[test]
fn usage_errors_exit_2() {
    for args in [&["frobnicate"][..], &["shape-check", "--bogus"], &[], &["--preset", "huge", "shape-check"]] {
        let out = tednet(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn runtime_errors_exit_nonzero_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.tdv");
    let out = tednet(&["eval", "--in", p(&missing), "--reference", p(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: ") && err.contains("nope.tdv"), "{err}");

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "heads = 7\n").unwrap();
    let out = tednet(&["shape-check", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_of_identical_volumes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--out", p(&data), "--side", "24", "--count", "2", "--seed", "3"]);
    let clean = data.join("clean.tdv");
    let report = ok(&["eval", "--in", p(&clean), "--reference", p(&clean)]);
    assert_eq!(mean_field(&report, "ssim"), 1.0);
    assert_eq!(mean_field(&report, "rmse"), 0.0);
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["images"].as_array().unwrap().len(), 2);
}

#[test]
fn gen_data_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["gen-data", "--out", p(&a), "--side", "16", "--count", "1", "--seed", "5"]);
    ok(&["gen-data", "--out", p(&b), "--side", "16", "--count", "1", "--seed", "5"]);
    ok(&["gen-data", "--out", p(&c), "--side", "16", "--count", "1", "--seed", "6"]);
    let read = |d: &Path| std::fs::read(d.join("noisy.tdv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn gradcheck_primitives() {
    let out = ok(&["gradcheck", "--primitives-only", "--seed", "2"]);
    assert!(out.lines().count() >= 18, "{out}");
    assert!(out.lines().all(|l| l.starts_with("ok ")), "{out}");
}

#[test]
fn pipeline_improves_ssim() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = dir.path().join("small.cfg");
    std::fs::write(
        &cfg,
        "patch_side = 16\nembed_dim = 16\nheads = 2\nbatch_size = 8\nlearning_rate = 2e-3\nmax_steps = 300\n",
    )
    .unwrap();
    let common = ["--preset", "desk", "--config", p(&cfg), "--seed", "1"];
    let with = |args: &[&str]| -> Vec<String> {
        args.iter().chain(common.iter()).map(|s| s.to_string()).collect()
    };
    let run = |args: Vec<String>| ok(&args.iter().map(String::as_str).collect::<Vec<_>>());

    run(with(&["gen-data", "--out", p(&data), "--side", "48", "--count", "2", "--sigma", "0.15"]));
    let params = dir.path().join("p.tdnw");
    let log = dir.path().join("loss.txt");
    run(with(&["train", "--in", p(&data), "--out", p(&params), "--log", p(&log)]));
    let log_text = std::fs::read_to_string(&log).unwrap();
    assert_eq!(log_text.lines().count(), 300);
    assert!(log_text.starts_with("epoch 0 loss "));

    let denoised = dir.path().join("denoised.tdv");
    run(with(&["denoise", "--in", p(&data.join("noisy.tdv")), "--params", p(&params), "--out", p(&denoised)]));
    let clean = data.join("clean.tdv");
    let before = run(with(&["eval", "--in", p(&data.join("noisy.tdv")), "--reference", p(&clean)]));
    let report = dir.path().join("report.json");
    let after = run(with(&["eval", "--in", p(&denoised), "--reference", p(&clean), "--out", p(&report)]));
    assert!(report.exists());
    let (s0, s1) = (mean_field(&before, "ssim"), mean_field(&after, "ssim"));
    assert!(s1 > s0, "denoised SSIM {s1} not above noisy {s0}");

    // same arguments and seed, same parameter bytes
    let again = dir.path().join("p2.tdnw");
    run(with(&["train", "--in", p(&data), "--out", p(&again)]));
    assert_eq!(std::fs::read(&params).unwrap(), std::fs::read(&again).unwrap());
}
