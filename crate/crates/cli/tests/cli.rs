use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hvqc::synth::{ar1_coefficient, row_autocorrelation};
use hvqc::tensor::Tensor;

fn hvqc(args: &[&str]) -> Output {
    hvqc_env(args, &[])
}

fn hvqc_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hvqc"));
    cmd.args(args).env_remove("HVQC_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn hvqc")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn load_rgb(path: &Path) -> Tensor {
    let img = image::open(path).unwrap().to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data).unwrap()
}

struct Trained {
    _dir: tempfile::TempDir,
    root: PathBuf,
    model: PathBuf,
    codebook: PathBuf,
    image: PathBuf,
}

fn trained_small() -> Trained {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    ok(&hvqc(&["synth-data", "--len", "6", "--n", "4", "--size", "32", "--seed", "3", "--out", s(&data)]));
    let model = root.join("m.ckpt");
    let codebook = root.join("cb.vqcb");
    ok(&hvqc(&[
        "train", "--data", s(&data), "--k", "16", "--steps-a", "20", "--steps-b", "10", "--steps-c", "10", "--batch", "2",
        "--out-model", s(&model), "--out-codebook", s(&codebook),
    ]));
    Trained {
        image: data.join("synth_00000.png"),
        _dir: dir,
        root,
        model,
        codebook,
    }
}

#[test]
fn compress_decompress_report_roundtrip() {
    let t = trained_small();
    let c1 = t.root.join("a.hvqc");
    let c2 = t.root.join("b.hvqc");
    let stdout = ok(&hvqc(&[
        "compress", "-i", s(&t.image), "--model", s(&t.model), "--codebook", s(&t.codebook), "-o", s(&c1), "--dump-layout",
    ]));
    assert!(stdout.contains("bpp") && stdout.contains("crc32") && stdout.contains("offset"), "{stdout}");
    ok(&hvqc_env(
        &["compress", "-i", s(&t.image), "--model", s(&t.model), "--codebook", s(&t.codebook), "-o", s(&c2)],
        &[("HVQC_THREADS", "1")],
    ));
    assert_eq!(fs::read(&c1).unwrap(), fs::read(&c2).unwrap());

    let out = t.root.join("out.png");
    ok(&hvqc(&["decompress", "-i", s(&c1), "--model", s(&t.model), "--codebook", s(&t.codebook), "-o", s(&out)]));
    let (x, y) = (load_rgb(&t.image), load_rgb(&out));
    assert_eq!(x.shape(), y.shape());
    let psnr = hvqc::pipeline::psnr(&x, &y);
    assert!(psnr.is_finite() && psnr > 5.0, "psnr {psnr}");

    let ppm = t.root.join("out.ppm");
    ok(&hvqc(&["decompress", "-i", s(&c1), "--model", s(&t.model), "--codebook", s(&t.codebook), "-o", s(&ppm)]));
    assert_eq!(&fs::read(&ppm).unwrap()[..2], b"P6");
    assert_eq!(load_rgb(&ppm), y);

    let csv = t.root.join("report.csv");
    let stdout = ok(&hvqc(&[
        "report", "-i", s(&t.image), "--container", s(&c1), "--model", s(&t.model), "--codebook", s(&t.codebook), "--csv",
        s(&csv),
    ]));
    assert!(stdout.contains("PSNR"), "{stdout}");
    let csv = fs::read_to_string(csv).unwrap();
    assert!(csv.starts_with("# hvqc-report-csv v1\nsegment,bytes,bpp\n"), "{csv}");
    let total: usize = csv.lines().find(|l| l.starts_with("total,")).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(total, fs::metadata(&c1).unwrap().len() as usize);
}

#[test]
fn error_classes_have_distinct_exit_codes() {
    let t = trained_small();
    let base = ["--model", s(&t.model), "--codebook", s(&t.codebook)];
    let out = t.root.join("never.hvqc");

    let r = hvqc(&[&["compress", "-i", s(&t.image), "--ratios", "0.3,0.3,0.3", "-o", s(&out)][..], &base].concat());
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());

    let r = hvqc(&[&["compress", "-i", s(&t.root.join("missing.png")), "-o", s(&out)][..], &base].concat());
    assert_eq!(r.status.code(), Some(3));
    assert!(!out.exists());

    let good = t.root.join("good.hvqc");
    ok(&hvqc(&[&["compress", "-i", s(&t.image), "-o", s(&good)][..], &base].concat()));
    let mut bytes = fs::read(&good).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let bad = t.root.join("bad.hvqc");
    fs::write(&bad, &bytes).unwrap();
    let png = t.root.join("never.png");
    let r = hvqc(&[&["decompress", "-i", s(&bad), "-o", s(&png)][..], &base].concat());
    assert_eq!(r.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&r.stderr).contains("checksum"));
    assert!(!png.exists());

    let other_cb = t.root.join("other.vqcb");
    fs::write(&other_cb, hvqc::codebook::Codebook::random_normal(16, 5, 1.0, 0).unwrap().to_bytes()).unwrap();
    let r = hvqc(&["decompress", "-i", s(&good), "--model", s(&t.model), "--codebook", s(&other_cb), "-o", s(&png)]);
    assert_eq!(r.status.code(), Some(5));
    assert!(!png.exists());

    let r = hvqc_env(&[&["compress", "-i", s(&t.image), "-o", s(&out)][..], &base].concat(), &[("HVQC_THREADS", "0")]);
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(hvqc(&["bench", "--strategies", "o1,lzma"]).status.code(), Some(2));
    assert_eq!(hvqc(&["frobnicate"]).status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn synth_data_matches_ar1_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("imgs");
    ok(&hvqc(&["synth-data", "--len", "8", "--n", "100", "--seed", "11", "--out", s(&out)]));
    let files: Vec<PathBuf> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(files.len(), 100);
    let mean = files.iter().map(|p| row_autocorrelation(&load_rgb(p))).sum::<f64>() / files.len() as f64;
    let want = (-1.0f64 / 8.0).exp();
    assert!((ar1_coefficient(8.0) - want).abs() < 1e-12);
    assert!((mean - want).abs() < 0.05, "measured {mean}, expected {want}");

    let again = dir.path().join("again");
    ok(&hvqc(&["synth-data", "--len", "8", "--n", "3", "--seed", "11", "--out", s(&again)]));
    for name in ["synth_00000.png", "synth_00002.png"] {
        assert_eq!(fs::read(out.join(name)).unwrap(), fs::read(again.join(name)).unwrap());
    }
    let r = hvqc(&["synth-data", "--len", "8", "--n", "3", "--out", s(&again)]);
    assert_eq!(r.status.code(), Some(2));
}

fn bench_rows(csv: &str) -> Vec<(String, f64, bool)> {
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(hvqc::harness::CSV_VERSION_LINE));
    assert_eq!(lines.next(), Some(hvqc::harness::CSV_COLUMNS));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[6].parse().unwrap(), f[9] == "true")
        })
        .collect()
}

fn mean_of(rows: &[(String, f64, bool)], name: &str) -> f64 {
    let v: Vec<f64> = rows.iter().filter(|r| r.0 == name).map(|r| r.1).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn bench_uniform_source_is_incompressible() {
    let out = hvqc(&[
        "bench", "--source", "uniform", "--k", "64", "--size", "64", "--trials", "2", "--train-fields", "8", "--train-steps",
        "300", "--batch", "2", "--seed", "5",
    ]);
    let rows = bench_rows(&ok(&out));
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| r.2));
    for name in ["static", "o0", "o1", "o2", "o3", "hyper"] {
        let b = mean_of(&rows, name);
        assert!((b - 6.0).abs() <= 0.15, "{name}: {b} bits/index");
    }
}

#[test]
fn bench_markov_source_hyper_beats_order_one() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let stdout = ok(&hvqc(&[
        "bench", "--source", "markov", "--corr-len", "4", "--strategies", "o1,hyper", "--size", "32", "--trials", "2",
        "--train-fields", "12", "--train-steps", "200", "--batch", "2", "--seed", "1", "--csv", s(&csv),
    ]));
    assert!(stdout.contains("hyper"), "{stdout}");
    let rows = bench_rows(&fs::read_to_string(&csv).unwrap());
    assert!(rows.iter().all(|r| r.2));
    let (o1, hyper) = (mean_of(&rows, "o1"), mean_of(&rows, "hyper"));
    assert!(hyper < o1, "hyper {hyper} vs o1 {o1}");
}

#[test]
fn train_loss_trends_down_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let (m, cb, curve) = (dir.path().join(format!("{tag}.ckpt")), dir.path().join(format!("{tag}.vqcb")), dir.path().join(format!("{tag}.csv")));
        ok(&hvqc(&[
            "train", "--synthetic", "50", "--size", "32", "--k", "64", "--steps-a", "1000", "--steps-b", "500", "--steps-c",
            "500", "--batch", "1", "--seed", "9", "--out-model", s(&m), "--out-codebook", s(&cb), "--curve", s(&curve),
        ]));
        (fs::read(m).unwrap(), fs::read(cb).unwrap(), fs::read_to_string(curve).unwrap())
    };
    let (m, cb, curve) = run("a");
    let mut lines = curve.lines();
    assert_eq!(lines.next(), Some("# hvqc-train-csv v1"));
    assert_eq!(lines.next(), Some("stage,step,loss,mse,bpp"));
    let losses: Vec<f64> = lines.map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(losses.len(), 2000);
    let n = losses.len() / 10;
    let first = losses[..n].iter().sum::<f64>() / n as f64;
    let last = losses[losses.len() - n..].iter().sum::<f64>() / n as f64;
    assert!(last < first, "first decile {first}, last decile {last}");
    let (m2, cb2, curve2) = run("b");
    assert_eq!((m, cb, curve), (m2, cb2, curve2));
}
