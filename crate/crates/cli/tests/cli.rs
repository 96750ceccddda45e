use std::path::Path;
use std::process::{Command, Output};

use delaysched::RelaxedSolution;
use delaysched_cli::commands::{DpRow, FluidReport, SimulateReport};
use delaysched_cli::config::{ConfigFile, ExperimentConfig, Preset};

const REFERENCE: &str = r#"{"classes":[{"rate":5,"weight":1,"fraction":0.5},{"rate":10,"weight":1,"fraction":0.5}],"buffer":50,"alpha":0.5}"#;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_delaysched"));
    cmd.env_remove(delaysched_cli::OUTPUT_DIR_ENV);
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn whittle_table_long_buffer() {
    let out = run(&["whittle-table", "--rate", "5", "--weight", "1", "--buffer", "50"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = csv_rows(&stdout(&out));
    assert_eq!(rows[0], ["state", "closed_form_index", "algorithm1_index", "match", "advisory"]);
    assert_eq!(rows.len(), 52);
    assert!(rows[1..].iter().all(|r| r[3] == "true" && r[4] == "false"));
}

#[test]
fn whittle_table_flat_tail() {
    let out = run(&["whittle-table", "--rate", "5", "--buffer", "12"]);
    let rows = csv_rows(&stdout(&out));
    for row in &rows[5..] {
        assert_eq!(row[2].parse::<f64>().unwrap(), 20.0, "{row:?}");
        assert_eq!(row[1].parse::<f64>().unwrap(), 20.0, "{row:?}");
    }
}

#[test]
fn whittle_table_short_buffer_has_advisory_column() {
    let out = run(&["whittle-table", "--rate", "20", "--weight", "1", "--buffer", "10"]);
    assert!(out.status.success());
    let rows = csv_rows(&stdout(&out));
    assert_eq!(rows.len(), 12);
    assert_eq!(rows[0][4], "advisory");
    let alg: Vec<f64> = rows[1..].iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(alg.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn invalid_flags_exit_one() {
    assert_eq!(run(&["whittle-table", "--rate", "x", "--buffer", "3"]).status.code(), Some(1));
    assert_eq!(run(&["whittle-table", "--buffer", "3"]).status.code(), Some(1));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn zero_rate_is_a_model_error() {
    let out = run(&["whittle-table", "--rate", "0", "--buffer", "3"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn stationary_example() {
    let out = run(&["stationary", "--rate", "5", "--buffer", "6", "--threshold", "2"]);
    let rows = csv_rows(&stdout(&out));
    assert_eq!(rows.len(), 8);
    let last: Vec<f64> = rows[7].iter().map(|v| v.parse().unwrap()).collect();
    assert!(last[3] < 1e-12);
    let out = run(&["stationary", "--rate", "5", "--buffer", "6", "--threshold", "-1"]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn relaxed_solve_reference_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "reference.json", REFERENCE);
    let out = run(&["relaxed-solve", &config]);
    assert!(out.status.success(), "{}", stderr(&out));
    let s: RelaxedSolution = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(s.w_star, 10.0);
    assert_eq!(s.m, 2);
    assert_eq!(s.l, [3, 5]);
    assert!((s.theta - 0.8).abs() < 1e-12);
    assert!((s.cost_per_user - 4.55).abs() < 1e-12);

    let again = serde_json::to_string(&s).unwrap();
    assert_eq!(serde_json::from_str::<RelaxedSolution>(&again).unwrap(), s);
}

#[test]
fn relaxed_solve_names_the_violated_assumption() {
    let dir = tempfile::tempdir().unwrap();
    let low_alpha = write(dir.path(), "a.json", &REFERENCE.replace("\"alpha\":0.5", "\"alpha\":0.1"));
    let out = run(&["relaxed-solve", &low_alpha]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Assumption 2"), "{}", stderr(&out));

    let short = write(dir.path(), "b.json", &REFERENCE.replace("\"buffer\":50", "\"buffer\":30"));
    let out = run(&["relaxed-solve", &short]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Assumption 1"), "{}", stderr(&out));
}

#[test]
fn bad_config_files_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write(dir.path(), "u.json", &REFERENCE.replace("\"buffer\"", "\"bufer\""));
    assert_eq!(run(&["relaxed-solve", &unknown]).status.code(), Some(1));
    let class_field = write(dir.path(), "c.json", &REFERENCE.replace("\"fraction\":0.5}", "\"fraction\":0.5,\"colour\":1}"));
    assert_eq!(run(&["relaxed-solve", &class_field]).status.code(), Some(1));
    let broken = write(dir.path(), "b.json", "{");
    assert_eq!(run(&["relaxed-solve", &broken]).status.code(), Some(1));
    let missing = dir.path().join("absent.json");
    assert_eq!(run(&["relaxed-solve", missing.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn fractions_must_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "f.json", &REFERENCE.replace("\"fraction\":0.5}]", "\"fraction\":0.4}]"));
    assert_eq!(run(&["relaxed-solve", &config]).status.code(), Some(2));
}

#[test]
fn fig4_rows() {
    let out = run(&["simulate", "--preset", "fig4", "--horizon", "500", "--sweep", "200,400", "--seeds", "1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: SimulateReport = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report.series.columns, ["n", "whittle_cost", "maxweight_cost", "rp_bound"]);
    assert_eq!(report.series.rows.len(), 2);
    for row in &report.series.rows {
        assert_eq!(row[3], Some(4.55));
        assert!(row[1].unwrap() <= row[2].unwrap());
    }
    assert_eq!(report.runs.len(), 4);
    let again = serde_json::to_string(&report).unwrap();
    assert_eq!(serde_json::from_str::<SimulateReport>(&again).unwrap(), report);
}

#[test]
fn fig2_reports_both_initial_states() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["simulate", "--preset", "fig2", "--epsilon", "0.05", "--horizon", "2000", "--sweep", "400,800"])
        .env(delaysched_cli::OUTPUT_DIR_ENV, dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("fig2.csv")).unwrap();
    let rows = csv_rows(&csv);
    assert_eq!(rows[0], ["n", "seed", "hit_empty", "hit_full"]);
    assert_eq!(rows.len(), 3);
    assert!(rows[1..].iter().all(|r| !r[2].is_empty() && !r[3].is_empty()));
    let json = std::fs::read_to_string(dir.path().join("fig2.json")).unwrap();
    let report: SimulateReport = serde_json::from_str(&json).unwrap();
    assert_eq!(report.config.preset, Some(Preset::Fig2));
}

#[test]
fn fig5_and_fig6_columns() {
    let out = run(&["simulate", "--preset", "fig5", "--horizon", "300", "--sweep", "200", "--seeds", "1"]);
    let report: SimulateReport = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report.series.columns, ["n", "whittle_c1", "whittle_c2", "fair_theta_c1", "fair_theta_c2"]);

    let out = run(&["simulate", "--preset", "fig6", "--horizon", "300", "--sweep", "200", "--seeds", "1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: SimulateReport = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report.config.buffer, 10);
    assert_eq!(report.rp_bound, None);
    assert_eq!(report.series.columns, ["n", "whittle_cost", "maxweight_cost"]);
}

#[test]
fn config_fields_override_the_preset() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(
        dir.path(),
        "o.json",
        r#"{"preset":"fig4","alpha":0.6,"n_sweep":[100],"horizon":200,"seeds":[4],"policies":["max_weight"]}"#,
    );
    let trace = dir.path().join("runs.csv");
    let out = run(&["simulate", &config, "--trace", trace.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: SimulateReport = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report.config.alpha, 0.6);
    assert_eq!(report.config.buffer, 50);
    assert_eq!(report.config.n_sweep, [100]);
    assert_eq!(report.runs.len(), 1);
    assert_eq!(report.runs[0].summary.seed, 4);
    let runs = std::fs::read_to_string(trace).unwrap();
    assert_eq!(runs.lines().count(), 2);
    assert!(runs.starts_with("policy,initial,users,seed"));
}

#[test]
fn simulate_validates_every_population() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "s.json", &REFERENCE.replace("\"alpha\":0.5", "\"alpha\":0.5,\"n_sweep\":[200,201],\"horizon\":10"));
    let out = run(&["simulate", &config]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stdout(&out).is_empty());
}

#[test]
fn fluid_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "reference.json", REFERENCE);
    let traj = dir.path().join("traj.csv");
    let out = run(&["fluid", &config, "--steps", "30", "--trajectory", traj.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: FluidReport = serde_json::from_str(&stdout(&out)).unwrap();
    assert!((report.spectral_radius - 0.5).abs() < 1e-8);
    assert_eq!(report.predicted_rate, 0.5);
    assert!((report.fixed_point_cost - 4.55).abs() < 1e-9);
    assert!(report.started_in_region);
    assert_eq!(report.distances.len(), 31);
    assert!(report.distances[30] < 1e-6 * report.distances[0]);
    let rows = std::fs::read_to_string(traj).unwrap().lines().count();
    assert_eq!(rows, 1 + 31 * 2 * 51);
}

#[test]
fn dp_verify_matches_index_thresholds() {
    let out = run(&["dp-verify", "--rate", "5", "--buffer", "20"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows: Vec<DpRow> = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.matches));
    let again = serde_json::to_string(&rows).unwrap();
    assert_eq!(serde_json::from_str::<Vec<DpRow>>(&again).unwrap(), rows);

    let out = run(&["dp-verify", "--rate", "2", "--buffer", "10", "--subsidy", "0.5"]);
    let rows: Vec<DpRow> = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].threshold, Some(rows[0].index_threshold));
}

#[test]
fn experiment_config_round_trip() {
    let resolved = ConfigFile::preset(Preset::Fig2).resolve().unwrap();
    let text = serde_json::to_string(&resolved).unwrap();
    assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), resolved);
    assert!(serde_json::from_str::<ExperimentConfig>(&text.replacen('{', "{\"extra\":1,", 1)).is_err());
}

#[test]
fn missing_system_fields_without_preset() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "m.json", r#"{"horizon":10}"#);
    let out = run(&["simulate", &config]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("classes"));
}
