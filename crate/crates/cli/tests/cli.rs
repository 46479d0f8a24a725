use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use foe_core::image::{read_pgm, write_pgm, SplitMix64};
use foe_core::Image;

fn foe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_foe"))
        .args(args)
        .output()
        .expect("run foe")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Value after `key: ` on its own line.
fn field(text: &str, key: &str) -> f64 {
    let prefix = format!("{key}: ");
    text.lines()
        .find_map(|l| l.strip_prefix(&prefix))
        .unwrap_or_else(|| panic!("no {key:?} in {text}"))
        .trim()
        .parse()
        .unwrap()
}

fn save(dir: &Path, name: &str, img: &Image) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, write_pgm(img, false).unwrap()).unwrap();
    path
}

fn load(path: &Path) -> Image {
    read_pgm(&std::fs::read(path).unwrap()).unwrap()
}

fn random_pgm(dir: &Path, name: &str, w: usize, h: usize, seed: u64) -> PathBuf {
    let mut rng = SplitMix64::new(seed);
    let data = (0..w * h)
        .map(|_| (255.0 * rng.next_f64()).round())
        .collect();
    save(dir, name, &Image::new(w, h, data).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn add_noise_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let input = random_pgm(dir.path(), "in.pgm", 40, 30, 1);
    let (a, b, c) = (
        dir.path().join("a.pgm"),
        dir.path().join("b.pgm"),
        dir.path().join("c.pgm"),
    );
    for (out, seed) in [(&a, "1"), (&b, "1"), (&c, "2")] {
        let o = foe(&[
            "add-noise",
            s(&input),
            s(out),
            "--sigma",
            "20",
            "--seed",
            seed,
        ]);
        assert!(o.status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn tiny_noise_leaves_image_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let input = random_pgm(dir.path(), "in.pgm", 17, 9, 4);
    let out = dir.path().join("out.pgm");
    let o = foe(&[
        "add-noise",
        s(&input),
        s(&out),
        "--sigma",
        "0.0001",
        "--seed",
        "3",
    ]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&input).unwrap(), std::fs::read(&out).unwrap());
}

#[test]
fn add_noise_has_requested_spread() {
    let dir = tempfile::tempdir().unwrap();
    let input = save(
        dir.path(),
        "flat.pgm",
        &Image::filled(256, 256, 128.0).unwrap(),
    );
    let out = dir.path().join("noisy.pgm");
    let o = foe(&[
        "add-noise",
        s(&input),
        s(&out),
        "--sigma",
        "20",
        "--seed",
        "9",
    ]);
    assert!(o.status.success());
    let noisy = load(&out);
    let n = noisy.len() as f64;
    let diffs: Vec<f64> = noisy.data().iter().map(|v| v - 128.0).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((19.0..=21.0).contains(&sd), "{sd}");
}

#[test]
fn energy_hand_instances_via_files() {
    let dir = tempfile::tempdir().unwrap();
    let zero = save(dir.path(), "zero.pgm", &Image::filled(2, 2, 0.0).unwrap());
    let x1 = save(
        dir.path(),
        "x1.pgm",
        &Image::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
    );
    let x2 = save(
        dir.path(),
        "x2.pgm",
        &Image::new(2, 2, vec![2.0, 0.0, 0.0, 0.0]).unwrap(),
    );
    let m1 = dir.path().join("checker.foe");
    std::fs::write(&m1, "FOE\n2 1\n1.0\n1 -1 -1 1\n").unwrap();
    let m2 = dir.path().join("corner.foe");
    std::fs::write(&m2, "FOE\n2 1\n1.0\n1 0 0 0\n").unwrap();

    let o = foe(&[
        "energy",
        s(&zero),
        s(&x1),
        "--model",
        s(&m1),
        "--sigma",
        "1",
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(field(&text, "data"), 15.0);
    assert_eq!(field(&text, "prior"), 0.0);
    assert_eq!(field(&text, "total"), 15.0);

    let o = foe(&[
        "energy",
        s(&zero),
        s(&x2),
        "--model",
        s(&m2),
        "--sigma",
        "1",
    ]);
    let text = stdout(&o);
    assert_eq!(field(&text, "data"), 2.0);
    assert!((field(&text, "total") - 3.0986123).abs() < 1e-7);
}

#[test]
fn energy_of_observation_with_no_experts_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let u = random_pgm(dir.path(), "u.pgm", 9, 7, 2);
    let model = dir.path().join("empty.foe");
    std::fs::write(&model, "FOE\n3 0\n").unwrap();
    let o = foe(&[
        "energy",
        s(&u),
        s(&u),
        "--model",
        s(&model),
        "--sigma",
        "20",
    ]);
    assert_eq!(field(&stdout(&o), "total"), 0.0);
    let other = random_pgm(dir.path(), "v.pgm", 9, 6, 2);
    let o = foe(&[
        "energy",
        s(&u),
        s(&other),
        "--model",
        s(&model),
        "--sigma",
        "20",
    ]);
    assert!(!o.status.success());
}

#[test]
fn denoise_without_experts_returns_input() {
    let dir = tempfile::tempdir().unwrap();
    let u = random_pgm(dir.path(), "u.pgm", 12, 10, 5);
    let model = dir.path().join("empty.foe");
    std::fs::write(&model, "FOE\n2 0\n").unwrap();
    let out = dir.path().join("out.pgm");
    let o = foe(&[
        "denoise",
        s(&u),
        s(&out),
        "--model",
        s(&model),
        "--sigma",
        "20",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(field(&stdout(&o), "final objective"), 0.0);
    assert_eq!(load(&out), load(&u));
}

#[test]
fn denoise_round_reports_gap_and_matches_energy() {
    let dir = tempfile::tempdir().unwrap();
    let u = random_pgm(dir.path(), "u.pgm", 24, 20, 6);
    let out = dir.path().join("out.pgm");
    let report = dir.path().join("trace.csv");
    let o = foe(&[
        "denoise",
        s(&u),
        s(&out),
        "--builtin",
        "diff2x2",
        "--sigma",
        "20",
        "--round",
        "--report",
        s(&report),
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    let initial = field(&text, "initial objective");
    let fin = field(&text, "final objective");
    let rounded = field(&text, "rounded objective");
    let gap = field(&text, "rounding gap");
    assert!(fin < initial);
    assert!(((rounded - fin) / fin - gap).abs() < 1e-9);
    assert!(field(&text, "wall seconds") >= 0.0);
    let iterations = field(&text, "iterations") as usize;
    assert_eq!(
        std::fs::read_to_string(&report).unwrap().lines().count(),
        iterations + 2
    );

    let o = foe(&[
        "energy",
        s(&u),
        s(&out),
        "--builtin",
        "diff2x2",
        "--sigma",
        "20",
    ]);
    let total = field(&stdout(&o), "total");
    assert!((total - rounded).abs() <= 1e-9 * rounded);
}

#[test]
fn denoise_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let u = random_pgm(dir.path(), "u.pgm", 4, 4, 1);
    let out = dir.path().join("out.pgm");
    let o = foe(&[
        "denoise",
        s(&u),
        s(&out),
        "--random-model",
        "5:2",
        "--sigma",
        "20",
    ]);
    assert!(!o.status.success());
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
    let bad = dir.path().join("bad.foe");
    std::fs::write(&bad, "FOE\n2 1\n1.0 1 2\n").unwrap();
    let o = foe(&[
        "denoise",
        s(&u),
        s(&out),
        "--model",
        s(&bad),
        "--sigma",
        "20",
    ]);
    assert!(!o.status.success());
    let o = foe(&[
        "denoise",
        s(&u),
        s(&out),
        "--builtin",
        "diff2x2",
        "--model",
        s(&bad),
        "--sigma",
        "20",
    ]);
    assert!(!o.status.success());
}

#[test]
fn check_grad_exit_codes() {
    let o = foe(&[
        "check-grad",
        "--builtin",
        "diff2x2",
        "--size",
        "8x8",
        "--trials",
        "20",
    ]);
    assert!(o.status.success());
    assert!(field(&stdout(&o), "worst relative error") <= 1e-5);

    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.foe");
    std::fs::write(&empty, "FOE\n2 0\n").unwrap();
    let o = foe(&["check-grad", "--model", s(&empty), "--trials", "5"]);
    assert!(o.status.success());
    assert!(field(&stdout(&o), "worst relative error") <= 1e-9);

    let o = foe(&[
        "check-grad",
        "--builtin",
        "diff2x2",
        "--trials",
        "3",
        "--inject-gradient-error",
        "1e-3",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn benchmark_emits_one_row_per_scale() {
    let dir = tempfile::tempdir().unwrap();
    let input = random_pgm(dir.path(), "base.pgm", 20, 16, 8);
    let csv = dir.path().join("scaling.csv");
    let o = foe(&[
        "benchmark",
        s(&input),
        "--builtin",
        "diff2x2",
        "--sigma",
        "20",
        "--scales",
        "0.5,1,1.5",
        "--csv",
        s(&csv),
    ]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("pixels,seconds,final_objective,iterations")
    );
    let pixels: Vec<usize> = lines
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(pixels, vec![10 * 8, 20 * 16, 30 * 24]);
    assert!(stdout(&o).contains("per-pixel time ratio max/min: "));
}

#[test]
fn psnr_of_identical_images_is_infinite() {
    let dir = tempfile::tempdir().unwrap();
    let a = random_pgm(dir.path(), "a.pgm", 8, 8, 1);
    let b = random_pgm(dir.path(), "b.pgm", 8, 8, 2);
    assert_eq!(stdout(&foe(&["psnr", s(&a), s(&a)])).trim(), "psnr: inf");
    let v = field(&stdout(&foe(&["psnr", s(&a), s(&b)])), "psnr");
    assert!(v > 0.0 && v < 20.0);
}

#[test]
fn bench_suite_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    std::fs::create_dir(&images).unwrap();
    for (i, name) in ["one.pgm", "two.pgm"].iter().enumerate() {
        random_pgm(&images, name, 14, 12, i as u64);
    }
    let csv = dir.path().join("results.csv");
    let md = dir.path().join("results.md");
    let outputs = dir.path().join("out");
    let o = foe(&[
        "--threads",
        "1",
        "bench-suite",
        "--images",
        s(&images),
        "--models",
        "diff2x2,random:3:4",
        "--sigma",
        "20",
        "--seed",
        "3",
        "--out",
        s(&csv),
        "--markdown",
        s(&md),
        "--output-dir",
        s(&outputs),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 5);
    assert_eq!(std::fs::read_to_string(&md).unwrap().lines().count(), 6);
    assert!(outputs.join("one__diff2x2__denoised.pgm").exists());
    assert!(outputs.join("two__random3x3k4__denoised.pgm").exists());
    assert!(stdout(&o).contains("rows: 4 (0 failed)"));
}
