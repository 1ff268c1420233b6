use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fined_core::io::{read_image, write_image, BitDepth};
use fined_core::network::{init_params_with, save_params, Init};
use fined_core::synth::{scenes, SceneConfig};
use fined_core::{Mode, NetworkSpec, Variant};

fn fined(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fined"))
        .args(args)
        .env("FINED_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes `n` small synthetic scenes plus a training manifest.
fn toy_dataset(dir: &Path, n: usize) -> PathBuf {
    let cfg = SceneConfig {
        height: 32,
        width: 32,
        ..Default::default()
    };
    let mut manifest = String::new();
    for s in scenes(&cfg, n, 7) {
        write_image(dir.join(format!("{}.png", s.id)), &s.image, BitDepth::Eight).unwrap();
        write_image(
            dir.join(format!("{}_gt.pgm", s.id)),
            s.gt.map(),
            BitDepth::Eight,
        )
        .unwrap();
        manifest.push_str(&format!("{0}.png\t{0}_gt.pgm\n", s.id));
    }
    let path = dir.join("train.tsv");
    fs::write(&path, manifest).unwrap();
    path
}

fn train_toy(dir: &Path, out: &Path) -> Output {
    let manifest = toy_dataset(dir, 2);
    fined(&[
        "train",
        "--manifest",
        p(&manifest),
        "--epochs",
        "2",
        "--lr",
        "1e-5",
        "--batch",
        "1",
        "--init",
        "fan",
        "--out",
        p(out),
    ])
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = fined(&["params", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(fined(&[]).status.code(), Some(2));
    assert_eq!(fined(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_fined"))
        .args(["params"])
        .env("FINED_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn params_reports_published_targets() {
    let o = fined(&["params", "--spec", "fined2", "--mode", "inf"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("published 0.23 M"), "{out}");
    let mut sum = 0usize;
    let mut total = 0usize;
    for line in out.lines() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() == 2 {
            let n: usize = cols[1].parse().unwrap();
            if cols[0] == "total" {
                total = n;
            } else {
                sum += n;
            }
        }
    }
    assert!(total > 0);
    assert_eq!(sum, total);

    let o = fined(&["params", "--spec", "fined3", "--mode", "train"]);
    assert!(stdout(&o).contains("published 1.43 M"), "{}", stdout(&o));
}

#[test]
fn train_is_deterministic_and_writes_a_loss_log() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    let o = train_toy(dir.path(), &a);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(train_toy(dir.path(), &b).status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let log = fs::read_to_string(dir.path().join("a.loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("epoch,lr,mean_total_loss"));
}

#[test]
fn missing_ground_truth_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_dataset(dir.path(), 1);
    fs::write(&manifest, "scene7.png\tnowhere_gt.pgm\n").unwrap();
    let out = dir.path().join("w.bin");
    let o = fined(&[
        "train",
        "--manifest",
        p(&manifest),
        "--epochs",
        "1",
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nowhere_gt.pgm"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn prune_shrinks_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let spec = NetworkSpec::new(Variant::Fined3, Mode::Train);
    let train = dir.path().join("train.bin");
    save_params(&init_params_with(&spec, 1, Init::He).unwrap(), &train).unwrap();
    let once = dir.path().join("once.bin");
    let twice = dir.path().join("twice.bin");
    let o = fined(&[
        "prune",
        "--spec",
        "fined3",
        "--weights",
        p(&train),
        "--out",
        p(&once),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fined(&[
        "prune",
        "--spec",
        "fined3",
        "--weights",
        p(&once),
        "--out",
        p(&twice)
    ])
    .status
    .success());
    let (t, a, b) = (
        fs::read(&train).unwrap(),
        fs::read(&once).unwrap(),
        fs::read(&twice).unwrap(),
    );
    assert!(a.len() < t.len());
    assert_eq!(a, b);
}

#[test]
fn infer_writes_one_map_per_image() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("w.bin");
    assert!(train_toy(dir.path(), &weights).status.success());

    let single = dir.path().join("single");
    let o = fined(&[
        "infer",
        "--weights",
        p(&weights),
        "--input",
        p(&dir.path().join("scene7.png")),
        "--out",
        p(&single),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let map = read_image(single.join("scene7.png")).unwrap();
    assert_eq!(map.shape().c, 1);
    assert_eq!((map.shape().h, map.shape().w), (32, 32));
    let bytes = fs::read(single.join("scene7.png")).unwrap();
    assert_eq!(bytes[24], 16, "PNG bit depth");

    let imgs = dir.path().join("imgs");
    fs::create_dir(&imgs).unwrap();
    for id in ["scene7", "scene8"] {
        fs::copy(
            dir.path().join(format!("{id}.png")),
            imgs.join(format!("{id}.png")),
        )
        .unwrap();
    }
    let multi = dir.path().join("multi");
    let o = fined(&[
        "infer",
        "--weights",
        p(&weights),
        "--input",
        p(&imgs),
        "--multiscale",
        "--nms",
        "--out",
        p(&multi),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_dir(&multi).unwrap().count(), 2);

    let plain = dir.path().join("plain");
    assert!(fined(&[
        "infer",
        "--weights",
        p(&weights),
        "--input",
        p(&imgs),
        "--out",
        p(&plain)
    ])
    .status
    .success());
    let ms = dir.path().join("ms");
    assert!(fined(&[
        "infer",
        "--weights",
        p(&weights),
        "--input",
        p(&imgs),
        "--scales",
        "0.5,1,1.5",
        "--out",
        p(&ms),
    ])
    .status
    .success());
    assert_ne!(
        read_image(plain.join("scene8.png")).unwrap(),
        read_image(ms.join("scene8.png")).unwrap()
    );
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    toy_dataset(dir.path(), 2);
    let manifest = dir.path().join("eval.tsv");
    fs::write(
        &manifest,
        "scene7_gt.pgm\tscene7_gt.pgm\nscene8_gt.pgm\tscene8_gt.pgm\n",
    )
    .unwrap();
    let out = dir.path().join("report");
    let o = fined(&["eval", "--manifest", p(&manifest), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("ODS 1.0000"), "{}", stdout(&o));
    for f in ["summary.json", "pr.csv", "pr.svg"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["ods_f"], 1.0);

    let o = fined(&[
        "eval",
        "--manifest",
        p(&manifest),
        "--thresholds",
        "0",
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn viz_renders_first_layer_maps_and_filters() {
    let dir = tempfile::tempdir().unwrap();
    toy_dataset(dir.path(), 1);
    let spec = NetworkSpec::new(Variant::Fined3, Mode::Inference);
    let weights = dir.path().join("w.bin");
    save_params(&init_params_with(&spec, 3, Init::He).unwrap(), &weights).unwrap();
    let out = dir.path().join("viz");
    let img = dir.path().join("scene7.png");
    let o = fined(&[
        "viz",
        "--spec",
        "fined3",
        "--weights",
        p(&weights),
        "--image",
        p(&img),
        "--layer",
        "conv1_1",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    // 16 maps of 32×32 on a 4×4 grid with 1-pixel gutters
    let maps = read_image(out.join("conv1_1_maps.png")).unwrap();
    assert_eq!((maps.shape().h, maps.shape().w), (131, 131));
    let filters = read_image(out.join("conv1_1_filters.png")).unwrap();
    assert_eq!(filters.shape().c, 3);

    let o = fined(&[
        "viz",
        "--spec",
        "fined3",
        "--weights",
        p(&weights),
        "--image",
        p(&img),
        "--layer",
        "conv3_1",
        "--max-maps",
        "9",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let maps = read_image(out.join("conv3_1_maps.png")).unwrap();
    assert_eq!((maps.shape().h, maps.shape().w), (26, 26));

    let o = fined(&[
        "viz",
        "--spec",
        "fined3",
        "--weights",
        p(&weights),
        "--image",
        p(&img),
        "--layer",
        "conv9_9",
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("conv9_9") && err.contains("conv2_2"), "{err}");
}

#[test]
fn gradcheck_passes_on_a_small_problem() {
    let o = fined(&["gradcheck", "--size", "8", "--samples", "30"]);
    assert!(o.status.success(), "{}\n{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("30 elements"));
}
