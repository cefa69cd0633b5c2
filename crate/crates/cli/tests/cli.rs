use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use liesa::blocks::{ModelConfig, TaskHead};
use liesa::dynamics::hamiltonian::PotentialConfig;
use liesa::group::GroupId;

fn liesa(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_liesa"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn spring_config(dir: &Path, model: serde_json::Value) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "task": "spring",
        "model": model,
        "data": {"num_particles": 6, "steps": 40, "dt": 0.02, "substeps": 20},
        "train_trajectories": 24,
        "val_trajectories": 8,
        "train": {"epochs": 3, "batch_size": 12, "lr": 0.01, "min_lr": 0.0, "horizon": 5, "seed": 0}
    });
    let path = dir.join("spring.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn small_transformer(group: GroupId) -> serde_json::Value {
    let m = ModelConfig::small(group, 2, 1, TaskHead::Scalar, 8, 2, 1);
    serde_json::to_value(PotentialConfig::Transformer(m)).unwrap()
}

#[test]
fn audit_group_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = liesa(&["audit-group", "--group", "se3", "--samples", "500"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("audit.json")).unwrap()).unwrap();
    assert!(report["violations"].as_array().unwrap().is_empty());
    assert_eq!(report["near_pi_rejections"], report["near_pi_trials"]);
    let m = manifest(dir.path());
    assert_eq!(m["seed"], 0);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert!(m["versions"]["liesa_core"].is_string());
}

#[test]
fn audit_group_so3_reports_near_pi_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let o = liesa(&["audit-group", "--group", "so3", "--samples", "50"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("near-pi rejections"));
}

#[test]
fn tampered_log_exits_with_violation() {
    let dir = tempfile::tempdir().unwrap();
    let o = liesa(&["audit-group", "--group", "se2", "--samples", "50", "--tamper-log"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(dir.path().join("audit.json").exists());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&liesa(&["audit-group", "--group", "xyz"], dir.path())), 2);
    assert_eq!(code(&liesa(&["no-such-command"], dir.path())), 2);
    assert_eq!(code(&liesa(&["train"], dir.path())), 2);
}

#[test]
fn invariance_curve_schema_and_translation_column() {
    let dir = tempfile::tempdir().unwrap();
    let o = liesa(
        &["invariance-curve", "--group", "t2", "--lift-samples", "1,2", "--runs", "4", "--examples", "3", "--precision", "f64"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("invariance_curve.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("lift_samples,median,q25,q75"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert!(r[1] < 1e-9 && r[3] < 1e-9, "{r:?}");
    }
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn train_is_deterministic_and_rollout_eval_reads_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = spring_config(dir.path(), small_transformer(GroupId::T(2)));
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = liesa(&["train", "--config", cfg, "--seed", "3"], out);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ma = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("checkpoint/params.bin")).unwrap(), fs::read(b.join("checkpoint/params.bin")).unwrap());
    let text = String::from_utf8(ma).unwrap();
    assert!(text.starts_with("epoch,lr,train_loss,val_loss,train_accuracy\n"));
    assert_eq!(text.lines().count(), 4);

    let eval = dir.path().join("eval");
    let ckpt = a.join("checkpoint");
    let o = liesa(
        &["rollout-eval", "--checkpoint", ckpt.to_str().unwrap(), "--horizon", "30", "--trajectories", "6"],
        &eval,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(eval.join("rollout.csv")).unwrap();
    assert!(text.starts_with("t,median_mse,q25,q75\n"));
    assert_eq!(text.lines().count(), 31);
    assert!(manifest(&eval)["config"]["checkpoint_config"]["task"] == "spring");
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = spring_config(dir.path(), small_transformer(GroupId::T(2)));
    let run = dir.path().join("run");
    assert_eq!(code(&liesa(&["train", "--config", cfg.to_str().unwrap(), "--epochs", "1"], &run)), 0);
    let path = run.join("checkpoint/config.json");
    let text = fs::read_to_string(&path).unwrap().replace("\"lr\": 0.01", "\"lr\": 0.02");
    fs::write(&path, text).unwrap();
    let o = liesa(&["rollout-eval", "--checkpoint", run.join("checkpoint").to_str().unwrap()], &dir.path().join("eval"));
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("hash mismatch"));
}

#[test]
fn spatial_group_must_match_the_springs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = spring_config(dir.path(), small_transformer(GroupId::T(3)));
    let run = dir.path().join("run");
    let o = liesa(&["train", "--config", cfg.to_str().unwrap(), "--epochs", "1"], &run);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("group mismatch"));
    assert!(!run.join("checkpoint").exists());
}

#[test]
fn particle_count_mismatch_between_checkpoint_and_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = spring_config(dir.path(), serde_json::json!({"kind": "mlp", "num_particles": 6, "hidden": [16]}));
    let run = dir.path().join("run");
    assert_eq!(code(&liesa(&["train", "--config", cfg.to_str().unwrap(), "--epochs", "1"], &run)), 0);
    let data = liesa::dynamics::spring::generate_spring_dataset(
        2,
        &liesa::dynamics::spring::SpringDataConfig { num_particles: 4, steps: 10, ..Default::default() },
        1,
    )
    .unwrap();
    let path = dir.path().join("four.jsonl");
    liesa::dynamics::io::write_jsonl(&path, &data).unwrap();
    let o = liesa(
        &["rollout-eval", "--checkpoint", run.join("checkpoint").to_str().unwrap(), "--dataset", path.to_str().unwrap()],
        &dir.path().join("eval"),
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("dimension mismatch"));
}

#[test]
fn ground_truth_rollout_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let o = liesa(&["rollout-eval", "--ground-truth", "--horizon", "100", "--trajectories", "5"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("rollout.csv")).unwrap();
    let rows: Vec<Vec<f64>> = text.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 100);
    assert!(rows.iter().all(|r| r[1] < 1e-10), "{:?}", rows.last());
}

#[test]
fn bench_conv_reports_every_point() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = serde_json::json!([
        {"group": "t2", "points": 32, "lift_samples": 1, "d_v": 64, "d_out": 64, "d_mid": 8},
        {"group": "t2", "points": 8, "lift_samples": 1, "d_v": 4, "d_out": 4, "d_mid": 16}
    ]);
    let path = dir.path().join("sweep.json");
    fs::write(&path, sweep.to_string()).unwrap();
    let out = dir.path().join("bench");
    let o = liesa(&["bench-conv", "--config", path.to_str().unwrap()], &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("bench_conv.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let ratio = header.iter().position(|h| *h == "analytic_ratio").unwrap();
    let diff = header.iter().position(|h| *h == "max_diff").unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    // n d_out d_v / (n d_mid + d_out d_v d_mid / n) with n = 32 neighbours per element
    let r0: f64 = rows[0][ratio].parse().unwrap();
    let expect = (32.0 * 32.0 * 64.0 * 64.0) / (32.0 * 32.0 * 8.0 + 64.0 * 64.0 * 8.0);
    assert!((r0 - expect).abs() < 1e-9, "{r0} vs {expect}");
    assert!(rows[1][ratio].parse::<f64>().unwrap() <= 1.0);
    assert!(rows.iter().all(|r| r[diff].parse::<f64>().unwrap() <= 1e-6));
}
