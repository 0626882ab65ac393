use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const RUN: &str = r#"
seed = 2
epochs = 3
views = 3
batch_size = 8
queue_size = 32

[prior]
beta_schedule = [[0, inf], [1, 2.0]]

[encoder]
hidden = [16]
d_out = 8

[data]
n_classes = 3
per_class = 20
d_in = 8
spread = 0.05
"#;

fn lorac(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lorac"))
        .args(args)
        .env("LORAC_OUT", out_root)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn setup() -> (TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, RUN).unwrap();
    (tmp, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains the small run into `<tmp>/run` and returns that directory.
fn trained(tmp: &Path, cfg: &Path) -> PathBuf {
    let dir = tmp.join("run");
    let o = lorac(&["pretrain", "--config", s(cfg), "--out", s(&dir)], tmp);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn missing_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lorac(&["pretrain", "--config", s(&tmp.path().join("absent.toml"))], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn unknown_field_and_bad_value_are_usage_errors() {
    let (tmp, cfg) = setup();
    let o = lorac(&["pretrain", "--config", s(&cfg), "--set", "prior.bogus=1"], tmp.path());
    assert_eq!(code(&o), 2);
    let o = lorac(&["pretrain", "--config", s(&cfg), "--set", "prior.tau=-1"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("prior.tau"));
}

#[test]
fn pretrain_writes_the_run_directory() {
    let (tmp, cfg) = setup();
    let dir = trained(tmp.path(), &cfg);
    for f in ["manifest.json", "metrics.jsonl", "summary.csv", "final.lorc", "dataset.ldset", "heldout.ldset"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    let metrics = fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
    // 48 training samples, batches of 8: 6 steps per epoch.
    assert_eq!(metrics.lines().count(), 18);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "epoch", "loss", "nuc_norm", "lr"] {
            assert!(v[key].is_number(), "{key} in {line}");
        }
    }
    let summary = fs::read_to_string(dir.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows[0], "epoch,mean_loss,mean_nuc_norm,beta,lr");
    assert!(rows[1].split(',').nth(3) == Some("inf"));
    assert!(rows[2].split(',').nth(3) == Some("2"));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "completed");
    assert_eq!(manifest["seed"], 2);
}

#[test]
fn default_output_goes_under_lorac_out() {
    let (tmp, cfg) = setup();
    let root = tmp.path().join("root");
    for expect in ["run-001", "run-002"] {
        let o = lorac(&["pretrain", "--config", s(&cfg), "--set", "epochs=1"], &root);
        assert_eq!(code(&o), 0);
        assert!(root.join(expect).join("final.lorc").is_file());
    }
}

#[test]
fn prior_can_be_switched_off_from_the_command_line() {
    let (tmp, cfg) = setup();
    let dir = tmp.path().join("none");
    let o = lorac(
        &["pretrain", "--config", s(&cfg), "--set", "prior.kind=none", "--out", s(&dir)],
        tmp.path(),
    );
    assert_eq!(code(&o), 0);
    let manifest = fs::read_to_string(dir.join("manifest.json")).unwrap();
    assert!(manifest.contains("prior.kind=none"));
    assert!(manifest.contains(r#"kind = \"none\""#));
}

#[test]
fn identical_invocations_give_identical_logs() {
    let (tmp, cfg) = setup();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(code(&lorac(&["pretrain", "--config", s(&cfg), "--out", s(d)], tmp.path())), 0);
    }
    for f in ["metrics.jsonl", "summary.csv", "final.lorc"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn non_empty_output_directory_is_refused() {
    let (tmp, cfg) = setup();
    let dir = tmp.path().join("busy");
    fs::create_dir(&dir).unwrap();
    fs::write(dir.join("keep.txt"), "x").unwrap();
    let o = lorac(&["pretrain", "--config", s(&cfg), "--out", s(&dir)], tmp.path());
    assert_eq!(code(&o), 2);
    assert_eq!(fs::read_to_string(dir.join("keep.txt")).unwrap(), "x");
}

#[test]
fn numeric_blow_up_exits_3_with_a_dump() {
    let (tmp, cfg) = setup();
    let dir = tmp.path().join("boom");
    let o = lorac(
        &[
            "pretrain",
            "--config",
            s(&cfg),
            "--set",
            "optim.lr_base=1e308",
            "--set",
            "optim.lr_final=1e308",
            "--out",
            s(&dir),
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.join("diagnostic.json").is_file());
    assert!(dir.join("abort-state.lorc").is_file());
}

#[test]
fn probe_is_accurate_and_deterministic() {
    let (tmp, cfg) = setup();
    let dir = trained(tmp.path(), &cfg);
    let (ckpt, ds) = (dir.join("final.lorc"), dir.join("dataset.ldset"));
    let args = ["probe", "--checkpoint", s(&ckpt), "--dataset", s(&ds)];
    let (a, b) = (lorac(&args, tmp.path()), lorac(&args, tmp.path()));
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let v: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert!(v["accuracy"].as_f64().unwrap() > 0.95, "{v}");
    assert_eq!(v["n_classes"], 3);
}

#[test]
fn corrupt_checkpoint_and_mismatched_dataset_are_usage_errors() {
    let (tmp, cfg) = setup();
    let dir = trained(tmp.path(), &cfg);
    let mut bytes = fs::read(dir.join("final.lorc")).unwrap();
    bytes[0] = b'X';
    let bad = tmp.path().join("bad.lorc");
    fs::write(&bad, bytes).unwrap();
    let ds = dir.join("dataset.ldset");
    let o = lorac(&["probe", "--checkpoint", s(&bad), "--dataset", s(&ds)], tmp.path());
    assert_eq!(code(&o), 2);

    let other = tmp.path().join("wide");
    let o = lorac(
        &["pretrain", "--config", s(&cfg), "--set", "data.d_in=12", "--set", "epochs=1", "--out", s(&other)],
        tmp.path(),
    );
    assert_eq!(code(&o), 0);
    let o = lorac(
        &["stats", "--checkpoint", s(&dir.join("final.lorc")), "--dataset", s(&other.join("dataset.ldset"))],
        tmp.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("dimension mismatch"));
}

#[test]
fn stats_writes_bounded_norms() {
    let (tmp, cfg) = setup();
    let dir = trained(tmp.path(), &cfg);
    let out = tmp.path().join("stats");
    let o = lorac(
        &[
            "stats",
            "--checkpoint",
            s(&dir.join("final.lorc")),
            "--dataset",
            s(&dir.join("heldout.ldset")),
            "--views",
            "2",
            "--out",
            s(&out),
        ],
        tmp.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("qhat.csv")).unwrap();
    let norms: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    // 20% of 3 × 20 held out.
    assert_eq!(norms.len(), 12);
    assert!(norms.iter().all(|&n| n >= 2f64.sqrt() - 1e-9 && n <= 2.0 + 1e-9));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("qhat_summary.json")).unwrap()).unwrap();
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    assert!((summary["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert_eq!(summary["v"], 2);
}

#[test]
fn gradcheck_passes_and_detects_an_injected_fault() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lorac(&["gradcheck", "--trials", "3"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let report = String::from_utf8_lossy(&o.stdout);
    assert!(report.contains("max_rel_err"));
    assert!(report.contains("nuclear_norm 8x32"));
    assert!(!report.contains("FAIL"));

    let o = lorac(&["gradcheck", "--trials", "3", "--inject-fault", "nuclear-sign"], tmp.path());
    assert_eq!(code(&o), 1);
    let report = String::from_utf8_lossy(&o.stdout);
    assert!(report.lines().any(|l| l.starts_with("nuclear_norm") && l.ends_with("FAIL")));
    assert!(report.lines().any(|l| l.starts_with("matmul") && l.ends_with("PASS")));
}

#[test]
fn bad_arguments_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&lorac(&["frobnicate"], tmp.path())), 2);
    assert_eq!(code(&lorac(&["gradcheck", "--sizes", "4by8"], tmp.path())), 2);
    assert_eq!(code(&lorac(&["--help"], tmp.path())), 0);
}
