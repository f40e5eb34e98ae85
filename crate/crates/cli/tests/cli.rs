use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn exconsist(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exconsist"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn make_synth(out: &Path, n: usize, seed: u64, extra: &[&str]) {
    let n = n.to_string();
    let seed = seed.to_string();
    let mut args = vec!["make-synth", "--n", &n, "--resolution", "32", "--seed", &seed, "--out"];
    let out = out.to_str().unwrap();
    args.push(out);
    args.extend_from_slice(extra);
    let o = exconsist(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn tiny_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    make_synth(&dir.join("train"), 6, 1, &[]);
    make_synth(&dir.join("val"), 3, 2, &[]);
    make_synth(&dir.join("test"), 3, 3, &[]);
    let path = dir.join("run.cfg");
    fs::write(
        &path,
        format!(
            r#"
[network]
base_width = 2

[train]
alpha = 0.9
total_steps = 12
batch_labeled = 2
batch_unlabeled = 2
val_every = 4

[ramp]
t1 = 2
t2 = 8

[data]
protocol = "limited_annotation"
height = 32
width = 32
n_labeled = 2
train_dir = "train"
val_dir = "val"
test_dir = "test"
{extra}"#
        ),
    )
    .unwrap();
    path
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["images", "masks"] {
        let mut names: Vec<_> = fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for p in names {
            out.push((format!("{sub}/{}", p.file_name().unwrap().to_str().unwrap()), fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn make_synth_counts_determinism_and_shift() {
    let tmp = tempfile::tempdir().unwrap();
    make_synth(&tmp.path().join("a"), 12, 4, &[]);
    make_synth(&tmp.path().join("b"), 12, 4, &[]);
    make_synth(&tmp.path().join("c"), 12, 4, &["--shifted"]);
    let a = dir_bytes(&tmp.path().join("a"));
    assert_eq!(a.len(), 24);
    assert_eq!(a, dir_bytes(&tmp.path().join("b")));
    let c = dir_bytes(&tmp.path().join("c"));
    for (x, y) in a.iter().zip(&c) {
        assert_eq!(x.0, y.0);
        if x.0.starts_with("masks") {
            assert_eq!(x.1, y.1);
        } else {
            assert_ne!(x.1, y.1);
        }
    }
}

#[test]
fn missing_config_fails_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = exconsist(&["train", "--config", "nope.cfg", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(!out.exists());
}

#[test]
fn bad_keys_are_named_and_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "\n[ablation]\nexclusiv = false\n");
    let o = exconsist(&["train", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("exclusiv"), "{}", stderr(&o));
    let o = exconsist(&["frobnicate"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn train_freezes_reproduces_and_evaluates() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let run1 = tmp.path().join("run1");
    let o = exconsist(&["train", "--config", cfg.to_str().unwrap(), "--out", run1.to_str().unwrap(), "--seed", "17"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["config.toml", "manifest.json", "metrics.jsonl", "checkpoint_last.bin", "checkpoint_best.bin"] {
        assert!(run1.join(f).exists(), "{f}");
    }
    let frozen = fs::read_to_string(run1.join("config.toml")).unwrap();
    assert!(frozen.contains("seed = 17"), "{frozen}");

    // the frozen copy alone reproduces the metrics stream
    let run2 = tmp.path().join("run2");
    let o = exconsist(&["train", "--config", run1.join("config.toml").to_str().unwrap(), "--out", run2.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(run1.join("metrics.jsonl")).unwrap(), fs::read(run2.join("metrics.jsonl")).unwrap());
    assert_eq!(fs::read(run1.join("manifest.json")).unwrap(), fs::read(run2.join("manifest.json")).unwrap());

    // evaluating the last checkpoint on the validation split repeats the last record
    let last_val = fs::read_to_string(run1.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .filter_map(|v| v.get("val_dice").and_then(|d| d.as_f64()))
        .last()
        .unwrap();
    let report = tmp.path().join("eval.json");
    let o = exconsist(&[
        "eval",
        "--checkpoint",
        run1.join("checkpoint_last.bin").to_str().unwrap(),
        "--data",
        tmp.path().join("val").to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["mean_dice"].as_f64().unwrap(), last_val);
    assert_eq!(r["network"], "teacher");

    let o = exconsist(&[
        "eval",
        "--checkpoint",
        run1.join("checkpoint_last.bin").to_str().unwrap(),
        "--data",
        tmp.path().join("val").to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
        "--network",
        "student",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["network"], "student");

    // unlabeled data cannot be scored
    let unl = tmp.path().join("unl");
    fs::create_dir_all(&unl).unwrap();
    fs::rename(tmp.path().join("test").join("images"), unl.join("images")).unwrap();
    let o = exconsist(&[
        "eval",
        "--checkpoint",
        run1.join("checkpoint_last.bin").to_str().unwrap(),
        "--data",
        unl.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn studies_are_deterministic_and_grid_has_every_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "\n[study]\nkind = \"bounds\"\nn_trials = 2\n");
    let mut csv = Vec::new();
    for run in ["s1", "s2"] {
        let out = tmp.path().join(run);
        let o = exconsist(&["study", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        csv.push(fs::read(out.join("study.csv")).unwrap());
        assert!(out.join("study.json").exists());
    }
    assert_eq!(csv[0], csv[1]);
    let text = String::from_utf8(csv.remove(0)).unwrap();
    let ids: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids, ["full", "lower_bound", "upper_bound"]);

    let grid = tiny_config(&tmp.path().join("g"), "\n[study]\nkind = \"ablation\"\nn_trials = 1\n");
    let out = tmp.path().join("grid");
    let o = exconsist(&["study", "--config", grid.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(out.join("study.csv")).unwrap();
    assert_eq!(text.lines().count(), 11);
    assert!(text.lines().any(|l| l.starts_with("no_exclusive,")));
    assert!(text.lines().any(|l| l.starts_with("supervised_extreme_aug,")));
}
