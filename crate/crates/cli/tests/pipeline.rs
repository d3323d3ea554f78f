use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fpdiff::io::{load_checkpoint, load_dataset, RunManifest};

fn fpdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpdiff"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = fpdiff(args);
    assert!(
        out.status.success(),
        "fpdiff {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    fpdiff(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn sibling(p: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}{suffix}", p.display()))
}

/// 2000 reference samples on the Mueller-Brown surface.
fn small_reference(dir: &Path) -> PathBuf {
    let out = dir.join("ref.fpds");
    ok(&["gen-data", "--steps", "20000", "--save-every", "10", "--seed", "3", "--out", s(&out)]);
    out
}

#[test]
fn gen_data_evaluate_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let reference = small_reference(dir.path());
    let set = load_dataset(&reference).unwrap();
    assert_eq!(set.len(), 2000);
    assert_eq!(set.dim(), 2);

    let report = dir.path().join("self.txt");
    let out = ok(&["evaluate", "--ref", s(&reference), "--samples", s(&reference), "--out", s(&report)]);
    let text = String::from_utf8(out.stdout).unwrap();
    for key in ["js", "pmf", "w1.x", "w1.y"] {
        assert!(text.lines().any(|l| l.starts_with(key)), "{key} missing from\n{text}");
    }
    let csv = std::fs::read_to_string(sibling(&report, ".csv")).unwrap();
    for line in csv.lines().skip(1) {
        let v: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(v, 0.0, "{line}");
    }

    // A second seed differs, and replay regenerates the recorded bytes.
    let other = dir.path().join("other.fpds");
    ok(&["gen-data", "--steps", "20000", "--save-every", "10", "--seed", "4", "--out", s(&other)]);
    assert_ne!(std::fs::read(&other).unwrap(), std::fs::read(&reference).unwrap());
    let manifest = sibling(&reference, ".manifest");
    let recorded = RunManifest::load(&manifest).unwrap();
    assert_eq!(recorded.seeds, vec![3]);
    assert_eq!(recorded.config.get("gen.system"), Some("mueller-brown"));
    std::fs::remove_file(&reference).unwrap();
    ok(&["replay", "--manifest", s(&manifest)]);
    recorded.verify_artifacts().unwrap();

    // A manifest whose hash no longer matches the regenerated output fails.
    let mut tampered = recorded.clone();
    tampered.artifacts[0].1 = "0".repeat(64);
    let bad = dir.path().join("bad.manifest");
    tampered.save(&bad).unwrap();
    assert_eq!(code(&["replay", "--manifest", s(&bad)]), 4);
}

#[test]
fn train_sample_simulate_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let reference = small_reference(dir.path());
    let cfg = dir.path().join("train.cfg");
    std::fs::write(&cfg, "train.epochs = 1\ntrain.batch_size = 256\ntrain.log_every = 2\n").unwrap();
    let ckpt = dir.path().join("model.fpck");
    ok(&[
        "train", "--config", s(&cfg), "--data", s(&reference), "--out", s(&ckpt), "--variant", "diffusion", "--seed", "5",
    ]);
    let ck = load_checkpoint(&ckpt).unwrap();
    assert_eq!(ck.configs[0].epochs, 1);
    let log = std::fs::read_to_string(sibling(&ckpt, ".log")).unwrap();
    assert!(log.lines().count() > 1);

    let samples = dir.path().join("iid.fpds");
    ok(&["sample", "--ckpt", s(&ckpt), "--n", "300", "--steps", "50", "--seed", "1", "--out", s(&samples)]);
    let set = load_dataset(&samples).unwrap();
    assert_eq!((set.len(), set.dim()), (300, 2));
    assert!(set.points().data().iter().all(|v| v.is_finite()));

    let traj = dir.path().join("traj.fpds");
    ok(&[
        "simulate", "--ckpt", s(&ckpt), "--data", s(&reference), "--chains", "3", "--steps", "200", "--save-every",
        "10", "--out", s(&traj),
    ]);
    let t = load_dataset(&traj).unwrap();
    assert_eq!(t.columns().last().map(String::as_str), Some("chain"));
    assert_eq!(t.len(), 3 * 20);
    // The chain column is dropped before comparing.
    let report = dir.path().join("traj.txt");
    ok(&["evaluate", "--ref", s(&reference), "--samples", s(&traj), "--metrics", "w1", "--out", s(&report)]);

    let curve = dir.path().join("fp.csv");
    ok(&[
        "fp-error", "--ckpt", s(&ckpt), "--data", s(&reference), "--t-grid", "1e-4:1e-2:3", "--n-eval", "50", "--out",
        s(&curve),
    ]);
    let rows: Vec<String> = std::fs::read_to_string(&curve).unwrap().lines().map(String::from).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("1e-4,"), "{}", rows[1]);

    let grid = dir.path().join("energy.grid");
    ok(&["energy-grid", "--ckpt", s(&ckpt), "--resolution", "12", "--out", s(&grid)]);
    let image = dir.path().join("energy.ppm");
    ok(&["plot", "--grid", s(&grid), "--out", s(&image)]);
    let ppm = std::fs::read(&image).unwrap();
    assert!(ppm.starts_with(b"P6\n12 12\n255\n"));
    assert_eq!(ppm.len(), b"P6\n12 12\n255\n".len() + 12 * 12 * 3);

    let hist = dir.path().join("hist.ppm");
    ok(&["plot", "--hist", s(&reference), "--resolution", "20", "--out", s(&hist)]);
    assert!(std::fs::read(&hist).unwrap().starts_with(b"P6\n20 20\n"));
    assert!(dir.path().join("hist.txt").exists());

    // Training replays to the same checkpoint bytes.
    let before = std::fs::read(&ckpt).unwrap();
    ok(&["replay", "--manifest", s(&sibling(&ckpt, ".manifest"))]);
    assert_eq!(std::fs::read(&ckpt).unwrap(), before);
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.fpds");
    let out = dir.path().join("x");
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["evaluate", "--ref", s(&missing), "--samples", s(&missing), "--out", s(&out)]), 4);
    assert_eq!(code(&["gen-data", "--system", "nowhere", "--out", s(&out)]), 2);
    assert_eq!(code(&["gen-data", "--steps", "5", "--save-every", "10", "--out", s(&out)]), 2);
    assert_eq!(code(&["plot", "--out", s(&out)]), 2);

    let reference = small_reference(dir.path());
    let r = s(&reference);
    assert_eq!(code(&["evaluate", "--ref", r, "--samples", r, "--bins", "63", "--out", s(&out)]), 2);
    assert_eq!(code(&["evaluate", "--ref", r, "--samples", r, "--extent", "1:0:0:1", "--out", s(&out)]), 2);
    assert_eq!(code(&["evaluate", "--ref", r, "--samples", r, "--metrics", "kl", "--out", s(&out)]), 2);

    let cfg = dir.path().join("c.cfg");
    let train = |text: &str, extra: &[&str]| {
        std::fs::write(&cfg, text).unwrap();
        let mut args = vec!["train", "--config", s(&cfg), "--data", r, "--out", s(&out)];
        args.extend_from_slice(extra);
        code(&args)
    };
    assert_eq!(train("train.epoch = 3\n", &["--variant", "fp"]), 2);
    assert_eq!(train("train.variant = fp\n", &["--variant", "both"]), 2);
    assert_eq!(train("train.seed = 1\n", &["--variant", "fp", "--seed", "2"]), 2);
    assert_eq!(train("train.alpha = 0.1\n", &["--variant", "diffusion"]), 2);
    assert_eq!(train("train.weighting = cubic\n", &["--variant", "fp"]), 2);
    assert_eq!(train("", &[]), 2);
    assert!(!out.exists());

    // Corrupted artifacts are I/O failures.
    let mut bytes = std::fs::read(&reference).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&reference, bytes).unwrap();
    assert_eq!(code(&["evaluate", "--ref", r, "--samples", r, "--out", s(&out)]), 4);
}
