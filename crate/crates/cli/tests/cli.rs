use std::path::Path;
use std::process::{Command, Output};

fn keyward(args: &[&str], envs: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_keyward"));
    cmd.args(args).env_remove("KEYWARD_OUT");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

const SMALL_COLLAB: &[&str] = &[
    "--set",
    "data.kind=blobs",
    "--set",
    "data.n_classes=4",
    "--set",
    "data.per_class=20",
    "--set",
    "data.data_dim=8",
    "--set",
    "collab.model.hidden=[16]",
    "--set",
    "collab.model.d_key=16",
    "--set",
    "collab.framework.n_epochs=4",
];

#[test]
fn collab_writes_artifacts_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    let mut args = vec!["collab", "--out", first.to_str().unwrap()];
    args.extend_from_slice(SMALL_COLLAB);
    let out = keyward(&args, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.resolved.json", "metrics.csv", "summary.json", "keys/participant_0.keys", "keys/participant_1.keys"] {
        assert!(first.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(first.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,participant_id,role,local_loss,local_acc,mpa,gen_loss"));
    let s = summary(&first);
    for k in ["experiment", "seed", "headline_name", "headline_value", "runtime_s"] {
        assert!(s.get(k).is_some(), "summary lacks {k}");
    }
    assert_eq!(s["experiment"], "collab");
    assert_eq!(s["headline_name"], "final_mpa");

    let second = tmp.path().join("second");
    let resolved = first.join("config.resolved.json");
    let out = keyward(&["collab", "--config", resolved.to_str().unwrap(), "--out", second.to_str().unwrap()], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(metrics, std::fs::read_to_string(second.join("metrics.csv")).unwrap());
}

#[test]
fn config_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"attack\": {\n    \"n_participants\": 2,,\n  }\n}\n").unwrap();
    let out = keyward(&["attack", "--config", bad.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":3:"), "{}", String::from_utf8_lossy(&out.stderr));

    let out = keyward(&["attack", "--set", "attack.nonsense=1"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonsense"));

    let out = keyward(&["attack", "--set", "experiment=collab"], &[]);
    assert_eq!(out.status.code(), Some(2));

    let out = keyward(&["shared-class", "--set", "shared_class.d_key=1"], &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_code_three() {
    let tmp = tempfile::tempdir().unwrap();
    let out = keyward(
        &["loss-compare", "--set", "data.kind=mnist", "--set", "data.dir=/nonexistent", "--out", tmp.path().to_str().unwrap()],
        &[],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("config.resolved.json").exists());
}

#[test]
fn out_dir_falls_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = keyward(
        &["softmax-oracle", "--set", "softmax_oracle.n_samples=20000", "--set", "softmax_oracle.d_keys=[2,64]"],
        &[("KEYWARD_OUT", tmp.path())],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(tmp.path());
    assert_eq!(s["headline_name"], "mc_estimate");
    let v = s["headline_value"].as_f64().unwrap();
    assert!((v - 0.5f64.exp()).abs() / 0.5f64.exp() < 0.05, "{v}");
}

#[test]
fn key_stats_and_grad_check_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ks");
    let out = keyward(
        &["key-stats", "--out", dir.to_str().unwrap(), "--set", "key_stats.n_repeats=5", "--set", "key_stats.d_keys=[2,64,4096]"],
        &[],
    );
    assert!(out.status.success());
    assert_eq!(summary(&dir)["details"]["strictly_decreasing"], true);
    let rows = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 6);

    let dir = tmp.path().join("gc");
    let out = keyward(&["grad-check", "--out", dir.to_str().unwrap(), "--set", "grad_check.n_instances=3"], &[]);
    assert!(out.status.success());
    assert_eq!(summary(&dir)["details"]["n_failed"], 0);
}

#[test]
fn attack_dumps_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("atk");
    let out = keyward(
        &[
            "attack",
            "--out",
            dir.to_str().unwrap(),
            "--set",
            "data.kind=blobs",
            "--set",
            "data.per_class=40",
            "--set",
            "attack.framework.n_epochs=2",
            "--set",
            "attack.mode={\"regime\":\"delta_key\",\"delta\":0.5}",
            "--set",
            "attack.n_dump_samples=2",
            "--set",
            "attack.oracle.epochs=10",
        ],
        &[],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(&dir);
    assert_eq!(s["headline_name"], "oracle_score");
    assert_eq!(s["details"]["regime"], "delta_key_0.5");
    for e in 1..=2 {
        for i in 0..2 {
            assert!(dir.join(format!("samples/attack_delta_key_0.5_epoch{e}_sample{i}.csv")).exists());
        }
    }
    assert!(dir.join("keys/participant_1.keys").exists());
}
