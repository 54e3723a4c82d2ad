use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn photocal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_photocal")).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let out = photocal(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

fn result(m: &Value, key: &str) -> f64 {
    m["results"][key].as_f64().unwrap_or_else(|| panic!("missing result {key}"))
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate_klyshko(tmp: &Path, name: &str, seed: &str) -> PathBuf {
    let out = tmp.join(name);
    let cfg = configs().join("simulate_klyshko.toml");
    run_ok(&["simulate", "klyshko", "--config", s(&cfg), "--out", s(&out), "--seed", seed]);
    out
}

#[test]
fn identical_seed_reproduces_data_files() {
    let tmp = TempDir::new().unwrap();
    let a = simulate_klyshko(tmp.path(), "a", "11");
    let b = simulate_klyshko(tmp.path(), "b", "11");
    let c = simulate_klyshko(tmp.path(), "c", "12");
    let records = |d: &Path| fs::read(d.join("klyshko_records.csv")).unwrap();
    assert_eq!(records(&a), records(&b));
    assert_ne!(records(&a), records(&c));
    assert_eq!(manifest(&a)["results"], manifest(&b)["results"]);
    assert_eq!(manifest(&a)["config_sha256"], manifest(&b)["config_sha256"]);
    assert_eq!(manifest(&a)["seed"], 11);
}

#[test]
fn klyshko_records_csv_has_counter_columns() {
    let tmp = TempDir::new().unwrap();
    let dir = simulate_klyshko(tmp.path(), "k", "1");
    let text = fs::read_to_string(dir.join("klyshko_records.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("m_c,m_vs_in,m_vs_out,m_B,A"));
    assert_eq!(lines.count(), 10);
}

#[test]
fn every_listed_output_exists() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("p");
    let cfg = configs().join("simulate_pnrd.toml");
    run_ok(&["simulate", "pnrd", "--config", s(&cfg), "--out", s(&out), "--seed", "3"]);
    let m = manifest(&out);
    let outputs: Vec<&str> = m["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(outputs.iter().any(|p| p.ends_with("pnrd_amplitudes.csv")));
    assert!(outputs.iter().any(|p| p.ends_with("pnrd_counts.json")));
    for path in outputs {
        assert!(Path::new(path).is_file(), "{path} missing");
    }
}

#[test]
fn published_table_counts_give_published_efficiency() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("t");
    let cfg = configs().join("calibrate_pnrd_table.toml");
    let data = configs().join("reference_counts.json");
    run_ok(&["calibrate", "pnrd", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    let m = manifest(&out);
    // Published: eta_0 = eta_1 = (0.709 +- 0.003) %, xi = 0.98793.
    assert!((result(&m, "eta_0") - 0.00709).abs() <= 0.00003, "eta_0 {}", result(&m, "eta_0"));
    assert!((result(&m, "eta_1") - 0.00709).abs() <= 0.00003, "eta_1 {}", result(&m, "eta_1"));
    assert!((result(&m, "xi") - 0.98793).abs() < 5e-6);
    let budget = fs::read_to_string(out.join("pnrd_budget.csv")).unwrap();
    assert!(budget.starts_with("quantity,value,std_uncertainty,sensitivity,contribution_pct"));
}

#[test]
fn empty_record_file_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let data = write(tmp.path(), "empty.csv", "m_c,m_vs_in,m_vs_out,m_B,A\n");
    let cfg = configs().join("calibrate_klyshko.toml");
    let out = photocal(&["calibrate", "klyshko", "--config", s(&cfg), "--data", s(&data), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no count records"));
}

#[test]
fn malformed_record_row_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let data = write(tmp.path(), "bad.csv", "m_c,m_vs_in,m_vs_out,m_B,A\n1,2,three,4,5\n");
    let cfg = configs().join("calibrate_klyshko.toml");
    let out = photocal(&["calibrate", "klyshko", "--config", s(&cfg), "--data", s(&data), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn klyshko_simulate_then_calibrate_recovers_efficiency() {
    let tmp = TempDir::new().unwrap();
    let sim = simulate_klyshko(tmp.path(), "k", "21");
    let out = tmp.path().join("cal");
    let cfg = configs().join("calibrate_klyshko.toml");
    let data = sim.join("klyshko_records.csv");
    run_ok(&["calibrate", "klyshko", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    let truth = result(&manifest(&sim), "true_eta_dut");
    let m = manifest(&out);
    let (eta, u) = (result(&m, "eta_dut"), result(&m, "eta_dut_uncertainty"));
    assert!((eta - truth).abs() <= 3.0 * u, "{eta} +- {u} vs {truth}");
    assert!(out.join("klyshko_budget.csv").is_file());
}

#[test]
fn pnrd_simulate_then_calibrate_recovers_efficiency() {
    let tmp = TempDir::new().unwrap();
    let sim = tmp.path().join("p");
    let sim_cfg = configs().join("simulate_pnrd.toml");
    run_ok(&["simulate", "pnrd", "--config", s(&sim_cfg), "--out", s(&sim), "--seed", "8"]);
    let out = tmp.path().join("cal");
    let cfg = configs().join("calibrate_pnrd_table.toml");
    let data = sim.join("pnrd_counts.json");
    run_ok(&["calibrate", "pnrd", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    let truth = result(&manifest(&sim), "true_eta");
    let m = manifest(&out);
    let (eta, u) = (result(&m, "eta_combined"), result(&m, "eta_combined_uncertainty"));
    assert!((eta - truth).abs() <= 3.0 * u, "{eta} +- {u} vs {truth}");
}

#[test]
fn amplitude_traces_calibrate_with_configured_purity() {
    let tmp = TempDir::new().unwrap();
    let sim = tmp.path().join("p");
    let sim_cfg = configs().join("simulate_pnrd.toml");
    run_ok(&["simulate", "pnrd", "--config", s(&sim_cfg), "--out", s(&sim), "--seed", "3"]);
    let out = tmp.path().join("cal");
    let cfg = configs().join("calibrate_pnrd.toml");
    let data = sim.join("pnrd_amplitudes.csv");
    run_ok(&["calibrate", "pnrd", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    let m = manifest(&out);
    assert_eq!(m["results"]["thresholds"].as_array().unwrap().len(), 2);
    let (eta, u) = (result(&m, "eta_combined"), result(&m, "eta_combined_uncertainty"));
    assert!((eta - 0.05).abs() <= 3.0 * u, "{eta} +- {u}");
    assert!(out.join("pnrd_peak_model.json").is_file());
}

#[test]
fn amplitude_calibration_without_peak_count_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let data = write(tmp.path(), "a.csv", "slot,amplitude\nheralded,0.0\nunheralded,0.1\n");
    let cfg = write(tmp.path(), "c.toml", "[purity]\nn_p = 10\nn_a = 1\n");
    let out = photocal(&["calibrate", "pnrd", "--config", s(&cfg), "--data", s(&data), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_errors_name_the_field() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "k.toml", "records = 3\n[source]\npair_rate = \"fast\"\n");
    let out = photocal(&["simulate", "klyshko", "--config", s(&cfg), "--out", s(&tmp.path().join("o")), "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("source.pair_rate"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn json_configs_are_accepted() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.json", r#"{"tau": 0.1, "tau_uncertainty": 0.001}"#);
    let sim = simulate_klyshko(tmp.path(), "k", "2");
    let data = sim.join("klyshko_records.csv");
    run_ok(&["calibrate", "klyshko", "--config", s(&cfg), "--data", s(&data), "--out", s(&tmp.path().join("o"))]);
}

#[test]
fn unreadable_config_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nope.toml");
    let out = photocal(&["simulate", "klyshko", "--config", s(&missing), "--out", s(&tmp.path().join("o")), "--seed", "1"]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn coherent_tomography_reports_fidelities() {
    let tmp = TempDir::new().unwrap();
    let sim_cfg = write(
        tmp.path(),
        "sim.toml",
        "shots_per_probe = 200000\n[detector]\neta = 0.3\noutcomes = 6\n[probes]\nmin_mean_photons = 0.5\nmax_mean_photons = 8.0\ncount = 12\n",
    );
    let tomo_cfg = write(tmp.path(), "tomo.toml", "[truth]\neta = 0.3\noutcomes = 6\n");
    let sim = tmp.path().join("sim");
    run_ok(&["simulate", "coherent", "--config", s(&sim_cfg), "--out", s(&sim), "--seed", "4"]);
    let out = tmp.path().join("tomo");
    let data = sim.join("coherent_counts.json");
    let status = photocal(&["tomography", "coherent", "--config", s(&tomo_cfg), "--data", s(&data), "--out", s(&out)]);
    assert!(matches!(status.status.code(), Some(0) | Some(4)), "{}", String::from_utf8_lossy(&status.stderr));
    let m = manifest(&out);
    assert!((result(&m, "eta_ml") - 0.3).abs() <= 4.0 * result(&m, "eta_ml_uncertainty"));
    let fidelity = fs::read_to_string(out.join("fidelity.csv")).unwrap();
    assert!(fidelity.starts_with("m,fidelity"));
    let rows = fidelity.lines().skip(1).count();
    assert_eq!(rows as u64, m["results"]["reconstruction_truncation"].as_u64().unwrap());
    for name in ["povm.csv", "lcurve.csv", "solver_log.csv", "ml_fit.json", "model_comparison.csv"] {
        assert!(out.join(name).is_file(), "{name}");
    }
}

fn twin_beam_runs(tmp: &Path) -> PathBuf {
    let cfg = write(tmp, "tb.toml", "mean_photons = 0.5983\ndut_eta = 0.1\nshots_per_setting = 50000\ndatasets = 4\n");
    let sim = tmp.join("tb");
    run_ok(&["simulate", "twinbeam", "--config", s(&cfg), "--out", s(&sim), "--seed", "9"]);
    sim.join("twinbeam_runs.json")
}

#[test]
fn twin_beam_tomography_writes_per_entry_spread() {
    let tmp = TempDir::new().unwrap();
    let data = twin_beam_runs(tmp.path());
    let cfg = configs().join("tomography_twinbeam.toml");
    let out = tmp.path().join("tomo");
    run_ok(&["tomography", "twinbeam", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--threads", "2"]);
    let text = fs::read_to_string(out.join("twinbeam_std.csv")).unwrap();
    assert!(text.starts_with("quantity,n,m,mean,std"));
    let povm_rows = text.lines().filter(|l| l.starts_with("povm,")).count();
    assert_eq!(povm_rows, 3 * 6, "tree outcomes x photon numbers 0..=5");
    assert_eq!(manifest(&out)["results"]["converged"], true);
    assert!(out.join("fidelity.csv").is_file());
}

#[test]
fn missing_tomographer_efficiencies_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let data = twin_beam_runs(tmp.path());
    let cfg = write(tmp.path(), "t.toml", "reconstruction_truncation = 6\n");
    let out = photocal(&["tomography", "twinbeam", "--config", s(&cfg), "--data", s(&data), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tomographer_etas"));
}

#[test]
fn mismatched_tomographer_efficiencies_are_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let data = twin_beam_runs(tmp.path());
    let cfg = write(tmp.path(), "t.toml", "tomographer_etas = [0.1, 0.2, 0.3]\n");
    let out = photocal(&["tomography", "twinbeam", "--config", s(&cfg), "--data", s(&data), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn single_manifest_report_passes_results_through() {
    let tmp = TempDir::new().unwrap();
    let sim = simulate_klyshko(tmp.path(), "k", "5");
    let out = tmp.path().join("r");
    let m = sim.join("manifest.json");
    run_ok(&["report", "summary", "--manifest", s(&m), "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("config_sha256,pipeline,seed,quantity,estimate,ground_truth,published"));
    let rows: Vec<&str> = lines.collect();
    let results = manifest(&sim)["results"].as_object().unwrap().keys().filter(|k| !k.starts_with("true_")).count();
    assert_eq!(rows.len(), results);
    assert!(rows.iter().any(|r| r.contains(",records,10,")));
}

#[test]
fn report_is_sorted_by_config_hash_and_reproducible() {
    let tmp = TempDir::new().unwrap();
    let first = simulate_klyshko(tmp.path(), "k", "5");
    let table = tmp.path().join("t");
    let cfg = configs().join("calibrate_pnrd_table.toml");
    let data = configs().join("reference_counts.json");
    run_ok(&["calibrate", "pnrd", "--config", s(&cfg), "--data", s(&data), "--out", s(&table)]);
    let (a, b) = (first.join("manifest.json"), table.join("manifest.json"));
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    run_ok(&["report", "summary", "--manifest", s(&a), "--manifest", s(&b), "--out", s(&r1)]);
    run_ok(&["report", "summary", "--manifest", s(&b), "--manifest", s(&a), "--out", s(&r2)]);
    for name in ["report.csv", "report.txt"] {
        assert_eq!(fs::read(r1.join(name)).unwrap(), fs::read(r2.join(name)).unwrap(), "{name}");
    }
    let csv = fs::read_to_string(r1.join("report.csv")).unwrap();
    let hashes: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    let mut sorted = hashes.clone();
    sorted.sort();
    assert_eq!(hashes, sorted);
    assert!(csv.lines().any(|l| l.contains("calibrate/pnrd") && l.contains(",eta_0,") && l.ends_with(",0.00709")));
}

#[test]
fn report_warns_on_other_versions() {
    let tmp = TempDir::new().unwrap();
    let sim = simulate_klyshko(tmp.path(), "k", "5");
    let mut m = manifest(&sim);
    m["version"] = "0.0.0-old".into();
    let path = write(tmp.path(), "old.json", &serde_json::to_string(&m).unwrap());
    let out = run_ok(&["report", "summary", "--manifest", s(&path), "--out", s(&tmp.path().join("r"))]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("0.0.0-old"));
}
