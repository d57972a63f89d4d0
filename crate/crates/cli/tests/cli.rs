use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "image_size = 32
stage_channels = [4, 8]
seg_width = 6
seg_dilations = [1, 2]
embed_dim = 4
batch_size = 2
iter_num = 3
warmup_iters = 2
ae_epochs = 1
";

fn ashplus(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ashplus"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = ashplus(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Workspace with a tiny config, generated data and a pretrained autoencoder.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    ok(
        dir.path(),
        &["--config", "tiny.toml", "--out", "d", "gen-data", "--num-source", "6", "--num-target", "4", "--targets", "2", "--num-styles", "3"],
    );
    ok(dir.path(), &["--config", "tiny.toml", "--data", "d", "--out", "ae", "pretrain-ae"]);
    dir
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn gen_data_populates_layout_and_help_exits_zero() {
    let ws = workspace();
    let d = ws.path().join("d");
    for sub in ["source/images", "source/labels", "targets/target01/images", "targets/target02/labels", "styles/images"] {
        assert!(d.join(sub).is_dir(), "missing {sub}");
    }
    assert!(d.join("source/meta").is_file());
    let manifest = fs::read_to_string(d.join("manifest.txt")).unwrap();
    assert!(manifest.lines().any(|l| l == "source/images/00005.png"));
    assert!(manifest.lines().any(|l| l == "resolved.toml"));
    assert_eq!(manifest.lines().count(), snapshot(&d).len() - 1);
    ok(ws.path(), &["eval", "--help"]);
}

#[test]
fn training_is_deterministic_and_reproducible_from_the_echo() {
    let ws = workspace();
    let p = ws.path();
    let before = snapshot(&p.join("d"));
    let train = |out: &str| {
        ok(p, &["--config", "tiny.toml", "--seed", "7", "--data", "d", "--out", out, "--deterministic", "train-ashplus", "--ae", "ae/autoencoder.ckpt"]);
        fs::read(p.join(out).join("metrics.csv")).unwrap()
    };
    let first = train("r1");
    assert_eq!(first, train("r2"));
    assert_eq!(before, snapshot(&p.join("d")), "input data changed");

    let resolved: toml::Table = toml::from_str(&fs::read_to_string(p.join("r1/resolved.toml")).unwrap()).unwrap();
    assert_eq!(resolved["command"].as_str(), Some("train-ashplus"));
    let cfg = toml::to_string(resolved["config"].as_table().unwrap()).unwrap();
    fs::write(p.join("echoed.toml"), cfg).unwrap();
    ok(p, &["--config", "echoed.toml", "--data", "d", "--out", "r3", "train-ashplus", "--ae", "ae/autoencoder.ckpt"]);
    assert_eq!(first, fs::read(p.join("r3/metrics.csv")).unwrap());

    let manifest = fs::read_to_string(p.join("r1/manifest.txt")).unwrap();
    for f in ["checkpoint.ckpt", "config.toml", "eval.csv", "metrics.csv", "resolved.toml", "summary.toml"] {
        assert!(manifest.lines().any(|l| l == f), "{f} not in manifest");
    }
}

#[test]
fn eval_matches_training_and_is_independent_of_workers() {
    let ws = workspace();
    let p = ws.path();
    ok(p, &["--config", "tiny.toml", "--data", "d", "--out", "r", "train-source"]);
    ok(p, &["--data", "d", "--out", "e1", "eval", "--checkpoint", "r/checkpoint.ckpt"]);
    ok(p, &["--data", "d", "--out", "e2", "--workers", "2", "eval", "--checkpoint", "r/checkpoint.ckpt"]);
    let trained = fs::read(p.join("r/eval.csv")).unwrap();
    assert_eq!(trained, fs::read(p.join("e1/eval.csv")).unwrap());
    assert_eq!(trained, fs::read(p.join("e2/eval.csv")).unwrap());
}

#[test]
fn sigma_sweep_grid_rows() {
    let ws = workspace();
    let p = ws.path();
    ok(p, &["--config", "tiny.toml", "--data", "d", "--out", "s", "sweep-sigma", "--grid", "synthia-default", "--ae", "ae/autoencoder.ckpt"]);
    let mut reader = csv::Reader::from_path(p.join("s/sweep.csv")).unwrap();
    let pairs: Vec<(f64, f64)> = reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[1].parse().unwrap(), r[2].parse().unwrap())
        })
        .collect();
    assert_eq!(pairs, [(0.0, 1.0), (0.25, 0.75), (0.5, 0.5), (0.75, 0.25)]);
    assert_eq!(ashplus(p, &["--config", "tiny.toml", "--data", "d", "--out", "x", "sweep-sigma", "--grid", "coarse"]).status.code(), Some(3));
}

#[test]
fn ablation_writes_five_rows() {
    let ws = workspace();
    let p = ws.path();
    ok(p, &["--config", "tiny.toml", "--data", "d", "--out", "a", "ablate", "--ae", "ae/autoencoder.ckpt"]);
    let text = fs::read_to_string(p.join("a/ablation.csv")).unwrap();
    let names: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["baseline", "+stylization", "+noise", "+transformer", "+alpha"]);
}

#[test]
fn report_over_four_runs_draws_four_bars_and_is_idempotent() {
    let ws = workspace();
    let p = ws.path();
    let mut runs = Vec::new();
    for (i, cmd) in ["train-source", "train-uniform", "train-ashplus", "train-ashplus"].iter().enumerate() {
        let out = format!("run{i}");
        let seed = i.to_string();
        let mut args = vec!["--config", "tiny.toml", "--seed", &seed, "--data", "d", "--out", &out, cmd];
        if *cmd != "train-source" {
            args.extend(["--ae", "ae/autoencoder.ckpt"]);
        }
        ok(p, &args);
        runs.push(out);
    }
    let mut args = vec!["--out", "rep", "report"];
    args.extend(runs.iter().map(String::as_str));
    ok(p, &args);
    let svg = fs::read_to_string(p.join("rep/miou_bars.svg")).unwrap();
    assert_eq!(svg.matches("fill=\"#1F77B4\"").count(), 4);
    let first = snapshot(&p.join("rep"));
    ok(p, &args);
    assert_eq!(first, snapshot(&p.join("rep")));
    let md = fs::read_to_string(p.join("rep/report.md")).unwrap();
    assert!(md.contains("| run2 | ash-plus | 2 |"));
}

#[test]
fn error_classes_have_distinct_exit_codes() {
    let ws = workspace();
    let p = ws.path();
    let code = |args: &[&str]| ashplus(p, args).status.code();
    assert_eq!(code(&["frobnicate"]), Some(2));
    assert_eq!(code(&["train-source", "--no-such-flag"]), Some(2));
    fs::write(p.join("bad.toml"), "sigma3 = 1.0\n").unwrap();
    assert_eq!(code(&["--config", "bad.toml", "--data", "d", "train-source"]), Some(3));
    assert_eq!(code(&["--device", "accel", "--data", "d", "train-source"]), Some(3));
    assert_eq!(code(&["--config", "tiny.toml", "--data", "missing", "train-source"]), Some(4));
    let out = ashplus(p, &["--out", "rep", "report", "no-such-run"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-run"));
}

#[test]
fn classwise_and_feature_dump_outputs() {
    let ws = workspace();
    let p = ws.path();
    ok(p, &["--config", "tiny.toml", "--data", "d", "--out", "r", "train-ashplus", "--ae", "ae/autoencoder.ckpt"]);
    ok(p, &["--data", "d", "--out", "cw", "analyze-classwise", "--checkpoint", "r/checkpoint.ckpt"]);
    let text = fs::read_to_string(p.join("cw/classwise.csv")).unwrap();
    assert!(text.starts_with("# normalization:"));
    assert_eq!(text.lines().count(), 2 + 8);
    assert!(p.join("cw/class_07.png").is_file());
    ok(p, &["--data", "d", "--out", "fd", "--seed", "3", "dump-features", "--checkpoint", "r/checkpoint.ckpt", "--pixels", "50", "--images", "3"]);
    let rows = fs::read_to_string(p.join("fd/features.csv")).unwrap();
    assert_eq!(rows.lines().count(), 51);
    assert_eq!(rows.lines().next().unwrap().split(',').count(), 6 + 1);
    // source-only checkpoints have no transformer
    ok(p, &["--config", "tiny.toml", "--data", "d", "--out", "s", "train-source"]);
    assert_eq!(ashplus(p, &["--data", "d", "--out", "x", "analyze-classwise", "--checkpoint", "s/checkpoint.ckpt"]).status.code(), Some(4));
}

#[test]
fn shipped_desk_recipe_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let cfg = ashplus_core::TrainConfig::load(&path).unwrap();
    assert_eq!((cfg.image_size, cfg.iter_num, cfg.warmup_iters), (32, 2000, 500));
    assert_eq!((cfg.sigma1, cfg.sigma2), (0.0, 1.0));
}
