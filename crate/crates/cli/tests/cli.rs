use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dernn::cassi::{HsiCube, Measurement, SensingOperator};
use dernn::hqs::{init_estimate, InitMode};
use dernn::io;
use dernn::train::{init_params, toy_recon};

fn dernn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dernn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn dernn")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = dernn(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    dernn(dir, args).status.code().unwrap()
}

fn bytes(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap()
}

fn scene(dir: &Path, h: &str, w: &str, b: &str) {
    ok(dir, &["phantom", "--height", h, "--width", w, "--bands", b, "--seed", "1", "--out", "t.hsic"]);
    ok(dir, &["simulate", "--truth", "t.hsic", "--seed", "1", "--out", "y.hsic"]);
}

#[test]
fn phantom_and_simulate_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut first = Vec::new();
    for _ in 0..2 {
        ok(d, &["phantom", "--height", "16", "--width", "16", "--bands", "4", "--seed", "3", "--out", "t.hsic"]);
        ok(d, &["simulate", "--truth", "t.hsic", "--noise", "shot", "--bits", "11", "--seed", "9", "--out", "y.hsic"]);
        let run = [bytes(d, "t.hsic"), bytes(d, "y.hsic"), bytes(d, "y.mask.hsic")];
        if first.is_empty() {
            first = run.to_vec();
        } else {
            assert_eq!(first, run);
        }
    }
    ok(d, &["simulate", "--truth", "t.hsic", "--noise", "shot", "--seed", "10", "--out", "y2.hsic"]);
    assert_ne!(bytes(d, "y.hsic"), bytes(d, "y2.hsic"));
}

#[test]
fn simulate_geometry_256_by_310() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--height", "256", "--width", "256", "--bands", "28", "--out", "t.hsic"]);
    ok(d, &["simulate", "--truth", "t.hsic", "--step", "2", "--out", "y.hsic", "--mask-out", "phi.hsic"]);
    assert_eq!(io::read_hsic(&d.join("y.hsic")).unwrap().shape(), &[256, 310, 1]);
    assert_eq!(io::read_hsic(&d.join("phi.hsic")).unwrap().shape(), &[256, 310, 28]);
}

#[test]
fn noiseless_single_band_ones_mask_reproduces_truth() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--height", "8", "--width", "6", "--bands", "1", "--out", "t.hsic"]);
    io::write_hsic(&dernn::Tensor::full(&[8, 6, 1], 1.0), &d.join("ones.hsic")).unwrap();
    ok(d, &["simulate", "--truth", "t.hsic", "--mask", "ones.hsic", "--noise", "none", "--out", "y.hsic"]);
    assert_eq!(bytes(d, "y.hsic"), bytes(d, "t.hsic"));
}

#[test]
fn reconstruct_zero_stages_returns_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scene(d, "16", "16", "4");
    ok(d, &["reconstruct", "--measurement", "y.hsic", "--mask", "y.mask.hsic", "--stages", "0", "--out", "r.hsic"]);
    let y = Measurement::new(io::read_hsic(&d.join("y.hsic")).unwrap()).unwrap();
    let op = SensingOperator::from_shifted(io::read_hsic(&d.join("y.mask.hsic")).unwrap(), 2).unwrap();
    let init = init_estimate(&y, &op, InitMode::NormalizedAdjoint).unwrap();
    assert_eq!(bytes(d, "r.hsic"), io::encode_hsic(init.tensor()).unwrap());
}

#[test]
fn reconstruct_tv_improves_psnr_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scene(d, "32", "32", "4");
    let args = [
        "reconstruct", "--measurement", "y.hsic", "--mask", "y.mask.hsic", "--stages", "9", "--denoiser", "tv",
        "--truth", "t.hsic", "--out", "r.hsic", "--trace", "trace.csv",
    ];
    let stdout = ok(d, &args);
    let (r1, t1) = (bytes(d, "r.hsic"), bytes(d, "trace.csv"));
    assert_eq!(ok(d, &args), stdout);
    assert_eq!((bytes(d, "r.hsic"), bytes(d, "trace.csv")), (r1, t1));

    let psnr: Vec<f64> = stdout
        .lines()
        .filter_map(|l| l.split("PSNR ").nth(1))
        .map(|rest| rest.split_whitespace().next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(psnr.len(), 2, "{stdout}");
    assert!(psnr[1] > psnr[0], "{stdout}");
    let trace = String::from_utf8(bytes(d, "trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 11);
}

#[test]
fn two_dimensional_mask_with_bands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--height", "8", "--width", "8", "--bands", "3", "--out", "t.hsic"]);
    io::write_hsic(&dernn::Tensor::full(&[8, 8, 1], 1.0), &d.join("m.hsic")).unwrap();
    ok(d, &["simulate", "--truth", "t.hsic", "--mask", "m.hsic", "--out", "y.hsic"]);
    ok(d, &["reconstruct", "--measurement", "y.hsic", "--mask", "y.mask.hsic", "--stages", "2", "--out", "a.hsic"]);
    ok(d, &["reconstruct", "--measurement", "y.hsic", "--mask", "m.hsic", "--bands", "3", "--stages", "2", "--out", "b.hsic"]);
    assert_eq!(bytes(d, "a.hsic"), bytes(d, "b.hsic"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scene(d, "16", "16", "2");
    let recon = |extra: &[&str]| {
        let mut a = vec!["reconstruct", "--measurement", "y.hsic", "--mask", "y.mask.hsic", "--out", "r.hsic"];
        a.extend_from_slice(extra);
        code(d, &a)
    };
    assert_eq!(recon(&["--denoiser", "lnlt"]), 4);
    assert_eq!(recon(&["--denoiser", "lnlt", "--params", "absent.dprm"]), 4);
    assert_eq!(recon(&["--use-den", "true", "--denoiser", "tv"]), 4);

    fs::write(d.join("bad.hsic"), b"XSIC\x01\x00\x00\x00").unwrap();
    assert_eq!(code(d, &["reconstruct", "--measurement", "bad.hsic", "--mask", "y.mask.hsic", "--out", "r.hsic"]), 2);
    let mut truncated = bytes(d, "y.hsic");
    truncated.truncate(truncated.len() - 2);
    fs::write(d.join("short.hsic"), truncated).unwrap();
    assert_eq!(code(d, &["reconstruct", "--measurement", "short.hsic", "--mask", "y.mask.hsic", "--out", "r.hsic"]), 2);

    // A cube is not a valid shifted mask for this measurement.
    assert_eq!(code(d, &["reconstruct", "--measurement", "y.hsic", "--mask", "t.hsic", "--out", "r.hsic"]), 3);
    assert_eq!(recon(&["--denoiser", "bm3d"]), 3);
}

#[test]
fn config_file_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scene(d, "16", "16", "2");
    let base = ["reconstruct", "--measurement", "y.hsic", "--mask", "y.mask.hsic"];
    let run = |extra: &[&str]| {
        let mut a = base.to_vec();
        a.extend_from_slice(extra);
        ok(d, &a);
    };
    run(&["--stages", "0", "--out", "zero.hsic"]);
    run(&["--stages", "3", "--out", "three.hsic"]);

    fs::write(d.join("c.cfg"), "# reconstruction\nstages = 0\ndenoiser = tv\n").unwrap();
    run(&["--config", "c.cfg", "--out", "a.hsic"]);
    assert_eq!(bytes(d, "a.hsic"), bytes(d, "zero.hsic"));
    run(&["--config", "c.cfg", "--stages", "3", "--out", "b.hsic"]);
    assert_eq!(bytes(d, "b.hsic"), bytes(d, "three.hsic"));

    fs::write(d.join("typo.cfg"), "stagez = 1\n").unwrap();
    assert_eq!(code(d, &["reconstruct", "--config", "typo.cfg", "--measurement", "y.hsic", "--mask", "y.mask.hsic", "--out", "c.hsic"]), 3);
    fs::write(d.join("broken.cfg"), "stages\n").unwrap();
    assert_eq!(code(d, &["reconstruct", "--config", "broken.cfg", "--measurement", "y.hsic", "--mask", "y.mask.hsic", "--out", "c.hsic"]), 2);
}

#[test]
fn selftest_quick_passes_and_tamper_is_caught() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let stdout = ok(d, &["selftest", "--level", "quick"]);
    assert!(stdout.contains("local-msa-oracle") && !stdout.contains("FAIL"), "{stdout}");

    let out = dernn(d, &["selftest", "--level", "quick", "--tamper-conv-sign"]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("failed: local-msa-oracle, nonlocal-msa-oracle"), "{stdout}");
}

fn train_args<'a>(steps: &'a str, lr: &'a str, out: &'a str, curve: &'a str) -> Vec<&'a str> {
    vec![
        "train", "--truth", "t.hsic", "--stages", "2", "--steps", steps, "--seed", "4", "--lr", lr, "--out", out,
        "--curve", curve,
    ]
}

#[test]
fn train_zero_lr_keeps_initialisation_and_curves_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--height", "16", "--width", "16", "--bands", "2", "--out", "t.hsic"]);

    ok(d, &train_args("1", "0", "p0.dprm", "c0.csv"));
    let init = init_params(&toy_recon(2, 2), 4);
    assert_eq!(bytes(d, "p0.dprm"), io::encode_params(&init).unwrap());

    ok(d, &train_args("3", "2e-3", "p1.dprm", "c1.csv"));
    ok(d, &train_args("3", "2e-3", "p2.dprm", "c2.csv"));
    assert_eq!(bytes(d, "c1.csv"), bytes(d, "c2.csv"));
    assert_eq!(bytes(d, "p1.dprm"), bytes(d, "p2.dprm"));
    let curve = String::from_utf8(bytes(d, "c1.csv")).unwrap();
    assert!(curve.starts_with("step,lr,loss\n0,"));
    assert_eq!(curve.lines().count(), 4);

    // Trained weights drive the learned reconstruction.
    ok(d, &["simulate", "--truth", "t.hsic", "--seed", "4", "--out", "y.hsic"]);
    let recon = [
        "reconstruct", "--measurement", "y.hsic", "--mask", "y.mask.hsic", "--stages", "2", "--denoiser", "lnlt",
        "--use-den", "true", "--params", "p1.dprm", "--out", "r.hsic",
    ];
    ok(d, &recon);
    let first = bytes(d, "r.hsic");
    ok(d, &recon);
    assert_eq!(bytes(d, "r.hsic"), first);
    assert!(HsiCube::new(io::read_hsic(&d.join("r.hsic")).unwrap()).is_ok());
}

#[test]
fn train_divergence_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["phantom", "--height", "16", "--width", "16", "--bands", "2", "--out", "t.hsic"]);
    let out = dernn(d, &train_args("6", "1e300", "p.dprm", "c.csv"));
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged at step"));
    assert!(!PathBuf::from(d.join("p.dprm")).exists());
}
