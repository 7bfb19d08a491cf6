use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gridcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridcast"))
        .args(args)
        .output()
        .expect("failed to launch gridcast")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("terminated by signal")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, buses: &str, steps: &str, seed: &str) -> PathBuf {
    let o = gridcast(&["generate", "--buses", buses, "--steps", steps, "--seed", seed, "--out", s(dir)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir.join("states.csv")
}

/// Small, fast training run shared by several tests.
fn train_small(dir: &Path, data: &Path, arch: &str) -> Output {
    gridcast(&[
        "train", "--data", s(data), "--arch", arch, "--seq-len", "5", "--horizon", "3", "--hidden", "4",
        "--depth", "1", "--epochs", "3", "--seed", "5", "--out", s(dir),
    ])
}

#[test]
fn generate_shape_and_repeatability() {
    let tmp = tempfile::tempdir().unwrap();
    let a = generate(&tmp.path().join("a"), "6", "2000", "7");
    let b = generate(&tmp.path().join("b"), "6", "2000", "7");
    let text = std::fs::read_to_string(&a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2001);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 13));
    assert_eq!(lines[0].split(',').count(), 13);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn zero_steps_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gridcast(&["generate", "--buses", "6", "--steps", "0", "--out", s(tmp.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_flag_and_bad_config_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&gridcast(&["generate", "--bogus"])), 2);
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"buses": 3, "stepz": 10}"#).unwrap();
    let o = gridcast(&["generate", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("stepz"));
}

#[test]
fn config_file_with_flag_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"buses": 3, "steps": 40, "seed": 1}"#).unwrap();
    let o = gridcast(&["generate", "--config", s(&cfg), "--steps", "25", "--out", s(tmp.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(tmp.path().join("states.csv")).unwrap();
    assert_eq!(text.lines().count(), 26);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 7);
}

#[test]
fn corrupt_csv_reports_line_and_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path(), "2", "200", "1");
    let text = std::fs::read_to_string(&data).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[4] = "3,1.0,abc,0.1,0.2".into();
    std::fs::write(&data, lines.join("\n")).unwrap();
    let o = train_small(&tmp.path().join("run"), &data, "gru");
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("line 5"), "{}", stderr(&o));
}

#[test]
fn train_evaluate_forecast_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path(), "2", "300", "3");
    let run = tmp.path().join("run");
    let o = train_small(&run, &data, "bigru");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    let test_nrmse = report["test_nrmse"].as_f64().unwrap();
    assert!(test_nrmse.is_finite() && test_nrmse > 0.0);
    assert_eq!(report["epoch_losses"].as_array().unwrap().len(), 3);

    let eval_dir = tmp.path().join("eval");
    let o = gridcast(&[
        "evaluate", "--checkpoint", s(&run.join("model.ckpt")), "--data", s(&data), "--out", s(&eval_dir),
        "--snapshot-t", "10", "--bus", "2", "--origin", "10", "--trace-steps", "20",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["overall_nrmse"].as_f64().unwrap(), test_nrmse);
    let profile = gridcast::metrics::read_profile_csv(
        &std::fs::read_to_string(eval_dir.join("horizon_profile.csv")).unwrap(),
    )
    .unwrap();
    assert_eq!(profile.len(), 3);
    let json_profile: Vec<f64> = eval["per_horizon_nrmse"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(profile, json_profile);
    assert_eq!(std::fs::read_to_string(eval_dir.join("bus_trace.csv")).unwrap().lines().count(), 21);
    assert_eq!(std::fs::read_to_string(eval_dir.join("snapshot.csv")).unwrap().lines().count(), 5);

    let fc = tmp.path().join("fc");
    let o = gridcast(&[
        "forecast", "--checkpoint", s(&run.join("model.ckpt")), "--data", s(&data), "--horizon", "50", "--out", s(&fc),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(fc.join("forecast.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 51);
    assert_eq!(lines[0], "step,x_r_1,x_r_2,x_i_1,x_i_2");
    assert!(lines[50].starts_with("50,"));
}

#[test]
fn training_twice_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path(), "2", "300", "3");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&train_small(&a, &data, "gru")), 0);
    assert_eq!(code(&train_small(&b, &data, "gru")), 0);
    for f in ["model.ckpt", "report.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn checkpoint_problems_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path(), "2", "300", "3");
    let missing = tmp.path().join("nope.ckpt");
    let o = gridcast(&["evaluate", "--checkpoint", s(&missing), "--data", s(&data), "--out", s(tmp.path())]);
    assert_eq!(code(&o), 4);
    let o = gridcast(&["forecast", "--checkpoint", s(&missing), "--data", s(&data), "--out", s(tmp.path())]);
    assert_eq!(code(&o), 4);

    let run = tmp.path().join("run");
    assert_eq!(code(&train_small(&run, &data, "rnn")), 0);
    let wide = generate(&tmp.path().join("wide"), "3", "300", "3");
    let o = gridcast(&["evaluate", "--checkpoint", s(&run.join("model.ckpt")), "--data", s(&wide), "--out", s(tmp.path())]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("4 state variables"), "{}", stderr(&o));

    let garbage = tmp.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let o = gridcast(&["forecast", "--checkpoint", s(&garbage), "--data", s(&data), "--out", s(tmp.path())]);
    assert_eq!(code(&o), 4);
}

#[test]
fn sequence_lengths_from_the_comparison_are_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path(), "2", "600", "3");
    for l in ["5", "10", "15", "20"] {
        let o = gridcast(&[
            "train", "--data", s(&data), "--arch", "rnn", "--seq-len", l, "--horizon", "1", "--hidden", "2",
            "--depth", "1", "--epochs", "1", "--out", s(&tmp.path().join(l)),
        ]);
        assert_eq!(code(&o), 0, "l={l}: {}", stderr(&o));
    }
}

#[test]
fn gradcheck_passes_and_forced_failure() {
    let o = gridcast(&["gradcheck", "--arch", "gru", "--trials", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let line = String::from_utf8(o.stdout).unwrap();
    let err: f64 = line.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!(err < 1e-5, "{line}");

    let o = gridcast(&["gradcheck", "--arch", "conv_bigru", "--trials", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = gridcast(&["gradcheck", "--arch", "rnn", "--trials", "1", "--threshold", "0"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn benchmark_table_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generate(tmp.path(), "2", "600", "3");
    let o = gridcast(&[
        "benchmark", "--data", s(&data), "--seq-lens", "5,10,15,20", "--reps", "2", "--hidden", "2", "--depth", "1",
        "--horizon", "1", "--epochs", "1", "--out", s(tmp.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = std::fs::read_to_string(tmp.path().join("table.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "architecture,l=5,l=10,l=15,l=20");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("rnn,") && rows[2].starts_with("bigru,"));
    let runs = std::fs::read_to_string(tmp.path().join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 2 * 4 * 2);
}
