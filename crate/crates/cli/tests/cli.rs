use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn dba(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dba"))
        .current_dir(dir)
        .arg("--quiet")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn config(name: &str) -> String {
    configs().join(name).to_str().unwrap().to_string()
}

#[test]
fn oracle_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let worked = config("worked_spec.json");
    let pass = dba(
        dir.path(),
        &["oracle", "--check", "theorem1", "--spec", &worked],
    );
    assert_eq!(code(&pass), 0);
    let report: serde_json::Value = serde_json::from_slice(&pass.stdout).unwrap();
    assert_eq!(report["pass"], true);

    let fail = dba(
        dir.path(),
        &[
            "oracle",
            "--check",
            "theorem1",
            "--spec",
            &worked,
            "--variant",
            "maintext",
            "--tol",
            "1e-3",
        ],
    );
    assert_eq!(code(&fail), 3);

    let aug = config("augmentation_cell.json");
    assert_eq!(
        code(&dba(
            dir.path(),
            &["oracle", "--check", "theorem3", "--spec", &aug]
        )),
        0
    );
    let attr = config("attribute_only_spec.json");
    assert_eq!(
        code(&dba(
            dir.path(),
            &["oracle", "--check", "theorem2", "--spec", &attr]
        )),
        0
    );
    assert_eq!(
        code(&dba(
            dir.path(),
            &[
                "oracle",
                "--check",
                "is-identity",
                "--random",
                "5",
                "--tol",
                "1e-12"
            ]
        )),
        0
    );
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dba(
        dir.path(),
        &[
            "gen",
            "--spec",
            "nope.json",
            "--n",
            "10",
            "--role",
            "train",
            "--out",
            "d.csv",
        ],
    );
    assert_eq!(code(&missing), 2);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("no such file"));

    assert_eq!(
        code(&dba(
            dir.path(),
            &["gen", "--spec", &config("worked_spec.json"), "--n", "10"]
        )),
        2
    );
    assert_eq!(
        code(&dba(dir.path(), &["oracle", "--check", "theorem1"])),
        2
    );
    assert_eq!(
        code(&dba(
            dir.path(),
            &["train", "--method", "bogus", "--train", "x.csv", "--out", "m.json"]
        )),
        2
    );

    let mut cfg: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(configs().join("colored_05_known.json")).unwrap(),
    )
    .unwrap();
    cfg["assert"] = serde_json::json!(["erm.avg_mean >>= 0.5"]);
    let path = dir.path().join("bad.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    assert_eq!(
        code(&dba(
            dir.path(),
            &[
                "experiment",
                "--config",
                path.to_str().unwrap(),
                "--out",
                "exp"
            ]
        )),
        2
    );

    std::fs::write(dir.path().join("broken.json"), "{").unwrap();
    assert_eq!(
        code(&dba(
            dir.path(),
            &["oracle", "--check", "theorem1", "--spec", "broken.json"]
        )),
        2
    );
}

#[test]
fn thread_setting_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dba"))
        .current_dir(dir.path())
        .env("DBA_THREADS", "0")
        .args(["oracle", "--check", "theorem1", "--random", "2"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn pipeline_produces_consistent_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = config("colored_05_spec.json");
    for role in ["train", "val", "test"] {
        let out = dba(
            d,
            &[
                "gen",
                "--spec",
                &spec,
                "--n",
                "800",
                "--role",
                role,
                "--out",
                &format!("{role}.csv"),
            ],
        );
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(d.join(format!("{role}.csv")).exists());
    }
    let out = dba(
        d,
        &[
            "estimate",
            "--regime",
            "known",
            "--train",
            "train.csv",
            "--out",
            "rho.csv",
        ],
    );
    assert_eq!(code(&out), 0);
    let rho = std::fs::read_to_string(d.join("rho.csv")).unwrap();
    assert_eq!(rho.lines().next(), Some("rho"));
    assert_eq!(rho.lines().count(), 801);

    let out = dba(
        d,
        &[
            "estimate",
            "--regime",
            "same",
            "--train",
            "train.csv",
            "--out",
            "rho_same.csv",
        ],
    );
    assert_eq!(code(&out), 2);

    let out = dba(
        d,
        &[
            "train",
            "--method",
            "dbcm-known",
            "--train",
            "train.csv",
            "--val",
            "val.csv",
            "--p-m0",
            "0.005",
            "--out",
            "m.json",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let eval = dba(d, &["eval", "--model", "m.json", "--data", "test.csv"]);
    assert_eq!(code(&eval), 0);
    let metrics: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    let avg = metrics["average_accuracy"].as_f64().unwrap();
    let worst = metrics["worst_group"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&avg) && worst <= avg);
    assert_eq!(metrics["per_group"].as_array().unwrap().len(), 25);
}

#[test]
fn all_methods_experiment_reports_every_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(configs().join("colored_05_all.json")).unwrap(),
    )
    .unwrap();
    cfg["n_train"] = 3000.into();
    cfg["n_val"] = 1000.into();
    cfg["n_test"] = 1000.into();
    let path = dir.path().join("all.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let out = dba(
        dir.path(),
        &[
            "experiment",
            "--config",
            path.to_str().unwrap(),
            "--out",
            "exp",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let summary = std::fs::read_to_string(dir.path().join("exp/summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(
        rows[0],
        "method,avg_mean,avg_std,worst_mean,worst_std,seconds"
    );
    let methods: Vec<&str> = rows[1..]
        .iter()
        .map(|r| r.split(',').next().unwrap())
        .collect();
    assert_eq!(
        methods,
        [
            "erm",
            "dbcm-known",
            "reweight",
            "resample",
            "dbcm-same",
            "dbcm-diff",
            "logit-adjust"
        ]
    );

    let runs: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("exp/runs.json")).unwrap())
            .unwrap();
    assert_eq!(runs.as_array().unwrap().len(), 21);
    let plot = std::fs::read_to_string(dir.path().join("exp/plotdata.csv")).unwrap();
    assert_eq!(plot.lines().next(), Some("method,seed,role,metric,value"));
}

#[test]
fn failed_assertion_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(configs().join("colored_05_known.json")).unwrap(),
    )
    .unwrap();
    cfg["n_train"] = 1000.into();
    cfg["n_val"] = 300.into();
    cfg["n_test"] = 300.into();
    cfg["seeds"] = serde_json::json!([0]);
    cfg["assert"] = serde_json::json!(["erm.avg_mean >= 2"]);
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let out = dba(
        dir.path(),
        &[
            "experiment",
            "--config",
            path.to_str().unwrap(),
            "--out",
            "exp",
        ],
    );
    assert_eq!(code(&out), 3);
    assert!(dir.path().join("exp/summary.csv").exists());
}

#[test]
fn misspecification_study_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(configs().join("imbalanced.json")).unwrap())
            .unwrap();
    cfg["n_train"] = 4000.into();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let out = dba(
        dir.path(),
        &[
            "experiment",
            "--config",
            path.to_str().unwrap(),
            "--misspecification",
            "--out",
            "mis",
        ],
    );
    assert!(matches!(code(&out), 0 | 3));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("mis/misspecification.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 9);
}
