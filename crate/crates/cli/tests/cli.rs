//! Runs the `histoclass` binary against small on-disk datasets.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use tempfile::TempDir;

const REFERENCE_PATCH: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/data/reference_patch.png");

fn histoclass(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_histoclass"))
        .args(args)
        .env_remove("HISTOCLASS_CONFIG")
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, body).unwrap();
    path
}

/// Config with slides in `<root>/slides` and output in `<root>/out`.
fn config(root: &Path, extra: &str) -> PathBuf {
    let body = format!(
        "out = \"out\"\nseed = 3\n\n[data]\nslides = \"slides\"\nnum_classes = 3\n\n{extra}"
    );
    write_config(root, &body)
}

fn run_ok(cfg: &Path, cmd: &str) -> Output {
    let out = histoclass(&["--config", cfg.to_str().unwrap(), cmd]);
    assert_eq!(code(&out), 0, "{cmd}: {}", stderr(&out));
    out
}

fn manifest_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(str::to_string).collect()
}

#[test]
fn one_large_slide_gives_sixteen_rows() {
    let root = TempDir::new().unwrap();
    fs::create_dir(root.path().join("slides")).unwrap();
    let slide = RgbImage::from_fn(4096, 4096, |x, y| Rgb([(x % 251) as u8, (y % 241) as u8, 128]));
    slide.save(root.path().join("slides/big.png")).unwrap();
    let cfg = config(root.path(), "");
    let out = run_ok(&cfg, "tile");
    let rows = manifest_rows(&root.path().join("out/tile/manifest.csv"));
    assert_eq!(rows.len(), 16);
    assert!(rows[0].starts_with("big,0,0,1024,"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("big\taccepted"));
}

#[test]
fn empty_slide_directory_gives_empty_manifest() {
    let root = TempDir::new().unwrap();
    fs::create_dir(root.path().join("slides")).unwrap();
    let out = run_ok(&config(root.path(), ""), "tile");
    let manifest = fs::read_to_string(root.path().join("out/tile/manifest.csv")).unwrap();
    assert_eq!(manifest, "slide_id,x,y,size,mean,std,label,accepted,path\n");
    assert!(stderr(&out).contains("no slides found"), "{}", stderr(&out));
}

#[test]
fn unreadable_slide_is_an_io_error_naming_the_file() {
    let root = TempDir::new().unwrap();
    fs::create_dir_all(root.path().join("slides/type1")).unwrap();
    fs::write(root.path().join("slides/type1/broken.png"), b"not a png").unwrap();
    let out = histoclass(&["--config", config(root.path(), "").to_str().unwrap(), "tile"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("broken.png"), "{}", stderr(&out));

    let out = histoclass(&["--config", root.path().join("missing.toml").to_str().unwrap(), "tile"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("missing.toml"));
}

#[test]
fn invalid_config_fails_before_writing() {
    let root = TempDir::new().unwrap();
    fs::create_dir(root.path().join("slides")).unwrap();
    for extra in ["[tile]\nsize = 0", "[train]\nk = 1", "[qc]\nstd_max = 3.0", "[model]\nfreeze_boundary = 40"] {
        let out = histoclass(&["--config", config(root.path(), extra).to_str().unwrap(), "tile"]);
        assert_eq!(code(&out), 3, "{extra}: {}", stderr(&out));
        assert!(!root.path().join("out").exists());
    }
    let out = histoclass(&["tile"]);
    assert_eq!(code(&out), 3);
    let out = histoclass(&["no-such-command"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn config_path_from_environment() {
    let root = TempDir::new().unwrap();
    fs::create_dir(root.path().join("slides")).unwrap();
    let cfg = config(root.path(), "");
    let out = Command::new(env!("CARGO_BIN_EXE_histoclass"))
        .arg("tile")
        .env("HISTOCLASS_CONFIG", &cfg)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(root.path().join("out/tile/manifest.csv").exists());
}

/// Reference patch and a blank patch as single-tile slides.
fn stain_corpus(root: &Path) -> PathBuf {
    fs::create_dir_all(root.join("slides/type0")).unwrap();
    fs::copy(REFERENCE_PATCH, root.join("slides/type0/reference.png")).unwrap();
    RgbImage::from_pixel(224, 224, Rgb([255, 255, 255])).save(root.join("slides/type0/white.png")).unwrap();
    config(root, "[tile]\nsize = 224\npatch_side = 224\n\n[qc]\nmean_max = 255.0\nstd_min = 0.0\n")
}

#[test]
fn normalization_fixed_point_and_flags() {
    let root = TempDir::new().unwrap();
    let cfg = stain_corpus(root.path());
    run_ok(&cfg, "tile");
    run_ok(&cfg, "normalize");
    let norm = root.path().join("out/normalize");

    let input = image::open(REFERENCE_PATCH).unwrap().into_rgb8();
    let output = image::open(norm.join("patches/type0/reference_0_0.png")).unwrap().into_rgb8();
    // Very dark pixels carry optical density off the two-stain plane that the
    // projection drops; everything else stays within quantization.
    let mut within = 0;
    for (a, b) in input.pixels().zip(output.pixels()) {
        let worst = a.0.iter().zip(b.0).map(|(x, y)| x.abs_diff(y)).max().unwrap();
        if worst <= 2 {
            within += 1;
        } else {
            assert!(a.0[1] < 50 && worst <= 12, "pixel {a:?} moved to {b:?}");
        }
    }
    let share = within as f64 / (input.width() * input.height()) as f64;
    assert!(share >= 0.995, "only {share:.4} of pixels within 2 levels");

    let log = fs::read_to_string(norm.join("stain_log.csv")).unwrap();
    let white = log.lines().find(|l| l.contains("white")).unwrap();
    assert!(white.contains(",insufficient_tissue,"), "{white}");
    let copied = fs::read(norm.join("patches/type0/white_0_0.png")).unwrap();
    assert_eq!(copied, fs::read(root.path().join("out/tile/patches/type0/white_0_0.png")).unwrap());

    let first = fs::read(norm.join("patches/type0/reference_0_0.png")).unwrap();
    run_ok(&cfg, "normalize");
    assert_eq!(first, fs::read(norm.join("patches/type0/reference_0_0.png")).unwrap());
    assert_eq!(log, fs::read_to_string(norm.join("stain_log.csv")).unwrap());
}

#[test]
fn promoted_patch_becomes_the_reference() {
    let root = TempDir::new().unwrap();
    let cfg = stain_corpus(root.path());
    run_ok(&cfg, "tile");
    let out = histoclass(&["--config", cfg.to_str().unwrap(), "normalize", "--promote", REFERENCE_PATCH]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let profile = fs::read_to_string(root.path().join("out/normalize/reference_profile.txt")).unwrap();
    let bundled = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/data/reference_profile.txt")).unwrap();
    let strip = |s: &str| s.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&profile), strip(&bundled));

    let out = histoclass(&["--config", cfg.to_str().unwrap(), "normalize", "--promote", "/nonexistent.png"]);
    assert_eq!(code(&out), 2);
}

const SMALL_RUN: &str = "[tile]\nsize = 64\npatch_side = 64\n\n[qc]\nstd_min = 10.0\n\n\
    [model]\ninput_side = 32\nuse_pretrained = true\n\n\
    [train]\nbatch_size = 16\nepochs = 2\n\n[pretrain]\nper_class = 6\nepochs = 1\nbatch_size = 8\n";

fn small_dataset(root: &Path) -> PathBuf {
    let slides = root.join("slides");
    let out = histoclass(&["synth", "slides", "--out", slides.to_str().unwrap(), "--per-class", "2", "--size", "256"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    config(root, SMALL_RUN)
}

#[test]
fn evaluate_without_checkpoints_names_the_missing_file() {
    let root = TempDir::new().unwrap();
    let cfg = small_dataset(root.path());
    for cmd in ["tile", "normalize", "split"] {
        run_ok(&cfg, cmd);
    }
    let out = histoclass(&["--config", cfg.to_str().unwrap(), "evaluate"]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("fold0.ckpt"), "{}", stderr(&out));

    // training before pretraining: the configured extractor checkpoint is missing
    let out = histoclass(&["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("extractor.ckpt"), "{}", stderr(&out));

    // a split made for another manifest is refused
    let manifest = root.path().join("out/normalize/manifest.csv");
    let mut rows: Vec<String> = fs::read_to_string(&manifest).unwrap().lines().map(str::to_string).collect();
    let kept = rows.iter().rposition(|r| r.contains(",true,")).unwrap();
    rows.remove(kept);
    fs::write(&manifest, rows.join("\n") + "\n").unwrap();
    run_ok(&cfg, "pretrain");
    let out = histoclass(&["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("split.json"));
}

#[test]
fn small_run_end_to_end() {
    let root = TempDir::new().unwrap();
    let cfg = small_dataset(root.path());
    for cmd in ["tile", "normalize", "split", "pretrain", "train", "evaluate", "report"] {
        run_ok(&cfg, cmd);
    }
    let out = root.path().join("out");
    let epochs = fs::read_to_string(out.join("train/epochs.csv")).unwrap();
    let folds: std::collections::BTreeSet<&str> = epochs.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(folds.len(), 5);
    for k in 0..5 {
        assert!(out.join(format!("train/fold{k}.ckpt")).exists());
        let roc = fs::read_to_string(out.join(format!("report/roc_fold{k}.csv"))).unwrap();
        let classes: std::collections::BTreeSet<&str> = roc.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(classes.into_iter().collect::<Vec<_>>(), vec!["0", "1", "2", "macro"]);
        let svg = fs::read_to_string(out.join(format!("report/roc_fold{k}.svg"))).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 5, "3 classes, macro and chance");
        assert!(out.join(format!("report/confusion_fold{k}.svg")).exists());
        assert!(out.join(format!("report/loss_fold{k}.svg")).exists());
        assert!(out.join(format!("report/accuracy_fold{k}.svg")).exists());
    }
    let report = fs::read_to_string(out.join("evaluate/report.txt")).unwrap();
    for metric in ["Accuracy", "F1-score", "Specificity", "Sensitivity", "AUC", "macro avg", "weighted avg", "Type2"] {
        assert!(report.contains(metric), "{metric} missing from\n{report}");
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("evaluate/metrics.json")).unwrap()).unwrap();
    assert_eq!(json["folds"].as_array().unwrap().len(), 5);
    assert_eq!(json["aggregate"]["num_folds"], 5);
}
