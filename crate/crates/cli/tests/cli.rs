use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mrtsim::environment::{default_state_grid, zip_mean};

fn mrtsim(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrtsim"))
        .args(args)
        .current_dir(dir)
        .env("MRT_LOG_LEVEL", "error")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", out.status.code(), String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const DESK: &str = "reps = 8\n[trial]\nnum_participants = 6\ndays_per_participant = 21\n";

fn desk_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("desk.toml"), DESK).unwrap();
    dir
}

#[test]
fn gen_env_default_is_72_models_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&mrtsim(&["gen-env", "--seed", "5", "--out", "a"], dir.path()));
    assert!(stdout.contains("wrote 72 models"), "{stdout}");
    ok(&mrtsim(&["gen-env", "--seed", "5", "--out", "b"], dir.path()));
    let a = fs::read(dir.path().join("a/models.json")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/models.json")).unwrap());
    let models = mrtsim::io::load_models(&dir.path().join("a/models.json")).unwrap();
    assert_eq!(models.len(), 72);
}

#[test]
fn invalid_config_key_exits_1_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[trial]\nnum_participantz = 4\n").unwrap();
    let out = mrtsim(&["gen-env", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("num_participantz"));
    let out = mrtsim(&["simulate", "--bogus-flag"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = mrtsim(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn simulate_is_deterministic_and_writes_all_outputs() {
    let dir = desk_dir();
    ok(&mrtsim(&["simulate", "--config", "desk.toml", "--seed", "3", "--out", "r1"], dir.path()));
    ok(&mrtsim(&["simulate", "--config", "desk.toml", "--seed", "3", "--out", "r2"], dir.path()));
    for f in ["history.csv", "snapshots.jsonl", "events.jsonl"] {
        let a = fs::read(dir.path().join("r1").join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, fs::read(dir.path().join("r2").join(f)).unwrap(), "{f} differs");
    }
    let history = mrtsim::io::load_history(&dir.path().join("r1/history.csv")).unwrap();
    assert_eq!(history.len(), 6 * 42);
    ok(&mrtsim(&["simulate", "--config", "desk.toml", "--seed", "4", "--out", "r3"], dir.path()));
    assert_ne!(fs::read(dir.path().join("r1/history.csv")).unwrap(), fs::read(dir.path().join("r3/history.csv")).unwrap());
}

#[test]
fn simulate_with_transcribed_issues_reports_every_fallback_method() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&mrtsim(&["simulate", "--seed", "1", "--faults", "builtin:trial-issues", "--out", "run"], dir.path()));
    assert!(stdout.contains("fallback I: 4 dates"), "{stdout}");
    assert!(stdout.contains("fallback Ii: 3 dates"), "{stdout}");
    assert!(stdout.contains("fallback Iii: 8 dates"), "{stdout}");
    let events = mrtsim::io::load_events(&dir.path().join("run/events.jsonl")).unwrap();
    assert_eq!(mrtsim::orchestrator::fault_report(&events).rows.len(), 15);
}

#[test]
fn simulate_reads_a_fault_plan_file() {
    let dir = desk_dir();
    fs::write(
        dir.path().join("faults.json"),
        r#"[{"date":"2023-09-05","fault_type":"data_retrieval_failure","participants":[2]},
            {"date":"2023-09-06","fault_type":"schedule_construction_failure","participants":"all"}]"#,
    )
    .unwrap();
    ok(&mrtsim(&["simulate", "--config", "desk.toml", "--faults", "faults.json", "--out", "r"], dir.path()));
    let h = mrtsim::io::load_history(&dir.path().join("r/history.csv")).unwrap();
    assert_eq!(h.records().iter().filter(|r| r.excluded_from_update).count(), 2);
    assert_eq!(h.records().iter().filter(|r| r.pi == 0.5 && r.fallback == mrtsim::trial::Fallback::MethodIi).count(), 10);

    fs::write(dir.path().join("late.json"), r#"[{"date":"2030-01-01","fault_type":"service_down","participants":"all"}]"#).unwrap();
    let out = mrtsim(&["simulate", "--config", "desk.toml", "--faults", "late.json", "--out", "r"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fit_env_round_trip_tracks_source_models() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[trial]\nnum_participants = 8\ncohort_size = 8\n").unwrap();
    ok(&mrtsim(&["gen-env", "--config", "c.toml", "--seed", "9", "--out", "src"], dir.path()));
    ok(&mrtsim(&["simulate", "--config", "c.toml", "--models", "src/models.json", "--seed", "9", "--out", "run"], dir.path()));
    ok(&mrtsim(&["fit-env", "--config", "c.toml", "--data", "run/history.csv", "--restarts", "3", "--out", "fit"], dir.path()));
    let src = mrtsim::io::load_models(&dir.path().join("src/models.json")).unwrap();
    let fit = mrtsim::io::load_models(&dir.path().join("fit/models.json")).unwrap();
    assert_eq!(fit.len(), 8);
    let grid = default_state_grid();
    let avg = |m: &mrtsim::environment::ParticipantEnvModel| {
        grid.states().iter().map(|g| zip_mean(m, g, 0)).sum::<f64>() / grid.len() as f64
    };
    let mut rel = Vec::new();
    for (s, f) in src.iter().zip(&fit) {
        assert_eq!(s.participant_id, f.participant_id);
        assert!(f.fit_log_posterior.is_some());
        rel.push((avg(f) - avg(s)).abs() / avg(s));
    }
    let mean_rel = rel.iter().sum::<f64>() / rel.len() as f64;
    assert!(mean_rel < 0.2, "grid-average mean OSCB off by {:.1}% on average", 100.0 * mean_rel);

    ok(&mrtsim(&["fit-env", "--config", "c.toml", "--data", "run/history.csv", "--restarts", "1", "--out", "fit1"], dir.path()));
    assert_eq!(mrtsim::io::load_models(&dir.path().join("fit1/models.json")).unwrap().len(), 8);
}

#[test]
fn fit_env_rejects_malformed_csv_with_row_numbers() {
    let dir = desk_dir();
    ok(&mrtsim(&["simulate", "--config", "desk.toml", "--out", "run"], dir.path()));
    let text = fs::read_to_string(dir.path().join("run/history.csv")).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[2] = lines[2].replacen(",none,", ",sideways,", 1);
    lines[5] = "1,2,3".to_string();
    fs::write(dir.path().join("bad.csv"), lines.join("\n")).unwrap();
    let out = mrtsim(&["fit-env", "--data", "bad.csv", "--out", "fit"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 2") && err.contains("row 5"), "{err}");
}

#[test]
fn did_we_learn_writes_bands_and_rejects_bad_states() {
    let dir = desk_dir();
    ok(&mrtsim(&["simulate", "--config", "desk.toml", "--out", "run"], dir.path()));
    let out = mrtsim(&["did-we-learn", "--config", "desk.toml", "--state", "0,-0.7,oops,0,1", "--reference", "run/snapshots.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = mrtsim(&["did-we-learn", "--config", "desk.toml", "--state", "0,-0.7,-0.6,0", "--reference", "run/snapshots.jsonl"], dir.path());
    assert_eq!(out.status.code(), Some(1));

    ok(&mrtsim(
        &["did-we-learn", "--config", "desk.toml", "--state", "0,-0.7,-0.6,0,1", "--reps", "10", "--reference", "run/snapshots.jsonl", "--out", "dwl"],
        dir.path(),
    ));
    let text = fs::read_to_string(dir.path().join("dwl/dwl.json")).unwrap();
    for key in ["\"state\"", "\"taus\"", "\"reference\"", "\"band_low\"", "\"band_high\"", "\"rep_values\""] {
        assert!(text.contains(key), "dwl.json lacks {key}");
    }
}

#[test]
fn pooling_and_metrics_outputs() {
    let dir = desk_dir();
    let stdout = ok(&mrtsim(&["pooling", "--config", "desk.toml", "--reps", "1", "--out", "p"], dir.path()));
    assert!(stdout.contains("single rep"));
    let csv = fs::read_to_string(dir.path().join("p/pooling.csv")).unwrap();
    assert!(csv.starts_with("mode,mean,mean_se,q1,q1_se"));
    assert!(csv.contains("\nfull_pooling,") && csv.contains("\nno_pooling,"));

    ok(&mrtsim(&["simulate", "--config", "desk.toml", "--out", "run"], dir.path()));
    let stdout = ok(&mrtsim(&["metrics", "--sim", "run/history.csv", "--ref", "run/history.csv", "--out", "m"], dir.path()));
    assert!(stdout.contains("MSE 0.000  RMSE 0.000  MAE 0.000"), "{stdout}");
    let metrics: mrtsim::io::MetricsFile =
        serde_json::from_str(&fs::read_to_string(dir.path().join("m/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics.errors.unwrap().mse, 0.0);
}
