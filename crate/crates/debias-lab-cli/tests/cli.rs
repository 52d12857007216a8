use std::fs;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_debias-lab"));
    c.env_remove("DEBIAS_LAB_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn adversary_reports_members_and_derivatives() {
    for kind in ["ate", "lod", "ecc_plm", "ds", "wad", "ape"] {
        let v = json(&run(&["adversary", "--kind", kind, "--pairs", "2"]));
        assert_eq!(v["membership"]["all_members"], true, "{kind}");
        assert!(v["mixture_deviation"].as_f64().unwrap() < 1e-12, "{kind}");
        for inv in v["invariance"].as_array().unwrap() {
            assert!(inv["deviation"].as_f64().unwrap() < 1e-8, "{kind}: {inv}");
        }
        for d in v["derivatives"].as_array().unwrap() {
            if let Some(r) = d["reference"].as_f64() {
                let x = d["value"].as_f64().unwrap();
                assert!((x - r).abs() <= 1e-4 * (1.0 + r.abs()), "{kind}: {d}");
            }
        }
    }
}

#[test]
fn adversary_outside_positivity_is_a_precondition_error() {
    let out = run(&[
        "adversary",
        "--kind",
        "ecc_plm",
        "--eps-gamma",
        "0.3",
        "--eps-alpha",
        "0.3",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn hellinger_is_small_and_consistent() {
    let v = json(&run(&[
        "hellinger",
        "--kind",
        "ate",
        "--n",
        "2",
        "--M",
        "2",
        "--eps-gamma",
        "0.05",
        "--eps-alpha",
        "0.05",
    ]));
    let h2 = v["h2"].as_f64().unwrap();
    assert!(h2 > 0.0 && h2 < 1e-3);
    let fano = v["fano_risk"].as_f64().unwrap();
    assert!(fano <= v["optimal_test_error"].as_f64().unwrap() + 1e-12);
}

#[test]
fn hellinger_beyond_enumeration_limits_exits_two() {
    let out = run(&[
        "hellinger",
        "--kind",
        "ate",
        "--n",
        "9",
        "--M",
        "2",
        "--eps-gamma",
        "0.05",
        "--eps-alpha",
        "0.05",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("size limit"));
}

#[test]
fn estimate_appends_rows_under_one_header() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("est.csv");
    let csv = csv.to_str().unwrap();
    for seed in ["1", "2"] {
        let v = json(&run(&[
            "estimate",
            "--kind",
            "ate",
            "--n",
            "500",
            "--seed",
            seed,
            "--eps-gamma",
            "0.02",
            "--eps-alpha",
            "0.02",
            "--csv",
            csv,
        ]));
        assert_eq!(v["n"], 500);
        assert_eq!(v["clip_constant"], 0.05);
    }
    let text = fs::read_to_string(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("kind,n,seed,eps_gamma,eps_alpha,alignment,point,oracle,abs_error"));
    assert!(lines[1].starts_with("ate,500,1,"));
    assert!(lines[2].starts_with("ate,500,2,"));
}

#[test]
fn population_estimate_matches_product_bias() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("e.csv");
    let v = json(&run(&[
        "estimate",
        "--kind",
        "ate",
        "--profile",
        "constant",
        "--n",
        "10",
        "--population",
        "--eps-gamma",
        "0.01",
        "--eps-alpha",
        "0.01",
        "--csv",
        csv.to_str().unwrap(),
    ]));
    let text = fs::read_to_string(&csv).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    let oracle: f64 = row[7].parse().unwrap();
    let err = (v["point"].as_f64().unwrap() - oracle).abs();
    assert!(err > 0.0 && err < 1e-3, "{err}");
}

#[test]
fn dr_requires_the_treatment_effect() {
    let out = run(&[
        "estimate",
        "--kind",
        "lod",
        "--n",
        "100",
        "--estimator",
        "dr",
        "--csv",
        "/dev/null",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn partition_balances_requested_weights() {
    let v = json(&run(&[
        "partition",
        "--pairs",
        "4",
        "--cells",
        "32",
        "--weights",
        "one,x,x2",
    ]));
    assert!(v["max_relative_residual"].as_f64().unwrap() <= 1e-6);
    let v = json(&run(&["partition", "--pairs", "2", "--kind", "ate", "--x-cells", "16"]));
    assert!(v["max_relative_residual"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn partition_rejects_bad_input() {
    assert_eq!(run(&["partition", "--pairs", "3"]).status.code(), Some(2));
    assert_eq!(
        run(&["partition", "--pairs", "2", "--weights", "one,nope"])
            .status
            .code(),
        Some(2)
    );
}

fn scan_config(dir: &std::path::Path) -> std::path::PathBuf {
    let path = dir.join("scan.json");
    fs::write(
        &path,
        r#"{"kind":"ate","x_cells":16,"population":true,"replications":16,
            "sweep":{"eps_sweep":[[0.01,0.01],[0.02,0.02],[0.04,0.04]]}}"#,
    )
    .unwrap();
    path
}

#[test]
fn scan_writes_records_in_each_format() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scan_config(dir.path());
    for (format, file) in [("csv", "records.csv"), ("json", "records.json"), ("svg", "records.svg")] {
        let out_dir = dir.path().join(format);
        let v = json(&run(&[
            "scan",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--format",
            format,
        ]));
        assert!((v["slope"].as_f64().unwrap() - 2.0).abs() < 0.05);
        assert_eq!(v["records"], 48);
        assert!(out_dir.join(file).exists());
    }
}

#[test]
fn thread_cap_does_not_change_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scan_config(dir.path());
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out_dir = dir.path().join(threads);
        let out = bin()
            .env("DEBIAS_LAB_THREADS", threads)
            .args([
                "scan",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out_dir.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(out.status.success());
        outputs.push(fs::read(out_dir.join("records.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn bad_thread_cap_and_bad_config_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scan_config(dir.path());
    let out = bin()
        .env("DEBIAS_LAB_THREADS", "0")
        .args(["scan", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"kind":"ate","surprise":1,"sweep":{"n_sweep":[10,20]}}"#).unwrap();
    assert_eq!(run(&["scan", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(
        run(&["scan", "--config", "/nonexistent/cfg.json"]).status.code(),
        Some(2)
    );
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
}
