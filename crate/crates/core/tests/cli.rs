use std::path::Path;
use std::process::{Command, Output};

use gfnvi::export::{DistributionExport, GridInfo};
use gfnvi::trainer::{read_metrics_csv, MetricsRow, METRICS_HEADER};
use gfnvi::{DagSpec, PointedDag};

fn gfnvi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gfnvi"))
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, total: u64) -> String {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        format!(
            r#"{{"env": {{"hypergrid": {{"H": 4, "D": 2, "R0": 0.1}}}},
                "objective": {{"pf_loss": "TB"}},
                "policy": {{"kind": "mlp", "hidden": [16]}},
                "batch_size": 16, "total_trajectories": {total}, "eval_every": 64}}"#
        ),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn verify_prints_discrepancies_and_exits_zero() {
    let out = gfnvi(&[
        "verify",
        "--suite",
        "prop1",
        "--instances",
        "20",
        "--seed",
        "0",
    ]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert_eq!(
        text.lines()
            .filter(|l| l.starts_with("prop1 instance"))
            .count(),
        60
    );
    assert_eq!(text.lines().filter(|l| l.starts_with("max ")).count(), 3);
}

#[test]
fn verify_exits_two_on_breach() {
    let out = gfnvi(&["verify", "--suite", "baseline", "--instances", "20"]);
    assert_eq!(code(&out), 2);
    assert!(stdout(&out).contains("BREACH"));
}

#[test]
fn bad_arguments_exit_one() {
    assert_eq!(code(&gfnvi(&["verify", "--suite", "nope"])), 1);
    assert_eq!(code(&gfnvi(&["frobnicate"])), 1);
    assert_eq!(code(&gfnvi(&["grid-info", "--H", "1"])), 1);
    assert_eq!(code(&gfnvi(&["--help"])), 0);
}

#[test]
fn train_with_zero_budget_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 0);
    let run = dir.path().join("run");
    let out = gfnvi(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv, format!("{}\n", METRICS_HEADER.join(",")));
}

#[test]
fn train_eval_export_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 320);
    let run = dir.path().join("run");
    assert_eq!(
        code(&gfnvi(&[
            "train",
            "--config",
            &cfg,
            "--out",
            run.to_str().unwrap()
        ])),
        0
    );
    let rows = read_metrics_csv(std::fs::File::open(run.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.trajectories_seen).collect::<Vec<_>>(),
        vec![64, 128, 192, 256, 320]
    );

    let ckpt = run.join("checkpoint.json");
    let out = gfnvi(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        &cfg,
    ]);
    assert_eq!(code(&out), 0);
    let row: MetricsRow = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert!(row.same_values(rows.last().unwrap()));

    let dist = dir.path().join("dist.json");
    let out = gfnvi(&[
        "export-dist",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--H",
        "4",
        "--out",
        dist.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let e: DistributionExport =
        serde_json::from_str(&std::fs::read_to_string(&dist).unwrap()).unwrap();
    assert_eq!((e.h, e.d), (Some(4), Some(2)));
    assert_eq!(e.states, (0..16).collect::<Vec<_>>());
    assert!((e.learned.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    // A checkpoint for one grid does not fit another.
    let out = gfnvi(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--H", "5"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn io_failures_exit_three() {
    let out = gfnvi(&[
        "train",
        "--config",
        "/nonexistent/c.json",
        "--out",
        "/tmp/x",
    ]);
    assert_eq!(code(&out), 3);
    let out = gfnvi(&[
        "convert-dag",
        "--in",
        "/nonexistent/g.json",
        "--out",
        "/tmp/y.json",
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn malformed_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        r#"{"env": {"hypergrid": {"H": 4, "D": 2, "R0": 0.1}}, "objective": {"pf_loss": "XX"}}"#,
    )
    .unwrap();
    let out = gfnvi(&[
        "train",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn convert_dag_grades_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = DagSpec::new(4, &[(0, 1), (1, 2), (0, 2), (0, 3), (1, 3)], 0, &[2, 3]);
    spec.rewards = Some(vec![1.0, 2.0]);
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let c = dir.path().join("c.json");
    std::fs::write(&a, serde_json::to_string(&spec).unwrap()).unwrap();
    assert_eq!(
        code(&gfnvi(&[
            "convert-dag",
            "--in",
            a.to_str().unwrap(),
            "--out",
            b.to_str().unwrap()
        ])),
        0
    );
    assert_eq!(
        code(&gfnvi(&[
            "convert-dag",
            "--in",
            b.to_str().unwrap(),
            "--out",
            c.to_str().unwrap()
        ])),
        0
    );
    let gb = std::fs::read_to_string(&b).unwrap();
    assert_eq!(gb, std::fs::read_to_string(&c).unwrap());
    let graded: DagSpec = serde_json::from_str(&gb).unwrap();
    assert_eq!(graded.rewards, Some(vec![1.0, 2.0]));
    let dag = PointedDag::from_spec(&graded).unwrap();
    assert!(dag.is_graded());
    assert_eq!(dag.count_complete_trajectories(), 4.0);
}

#[test]
fn grid_info_reports_partition_and_modes() {
    let out = gfnvi(&["grid-info", "--H", "8", "--D", "2", "--R0", "0.1"]);
    assert_eq!(code(&out), 0);
    let info: GridInfo = serde_json::from_str(&stdout(&out)).unwrap();
    assert!((info.z - 22.4).abs() < 1e-9);
    assert_eq!(info.mode_regions.len(), 4);
    assert_eq!(info.rewards.len(), 64);
}
