use std::path::{Path, PathBuf};
use std::process::Command;

use hypermerton::closed_policies::Policy;
use hypermerton::io::{read_csv, read_json};
use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_hypermerton"))
        .arg(cmd)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap();
    (o.status.code().unwrap(), String::from_utf8_lossy(&o.stderr).into_owned())
}

/// Writes `text` to a config file inside `dir`.
fn config_file(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

fn load(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn solve_writes_one_policy_per_agent() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = run("solve", &configs().join("merton_log.json"), dir.path(), &[]);
    assert_eq!(code, 0, "{err}");
    for agent in ["constant", "precommitment", "naive", "sophisticated"] {
        let p: Policy = read_json(&dir.path().join(format!("policy_{agent}.json"))).unwrap();
        assert!((p.consumption(1.0, 0.0).unwrap() - 0.1 / (1.0 - (-0.1f64).exp() * 0.9)).abs() < 1e-10);
        let (h, rows) = read_csv(&dir.path().join(format!("policy_{agent}.csv"))).unwrap();
        assert_eq!(h, vec!["t", "W", "c", "w_1"]);
        assert_eq!(rows.len(), 101);
    }
}

#[test]
fn power_diagnostics_carry_residual_history() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = run("solve", &configs().join("power_mixture.json"), dir.path(), &[]);
    assert_eq!(code, 0, "{err}");
    let d = load(&dir.path().join("diagnostics.json"));
    let res = d["sophisticated"]["residuals"].as_array().unwrap();
    assert!(!res.is_empty() && res.len() <= 200);
    assert_eq!(d["sophisticated"]["converged"], Value::Bool(true));
    assert_eq!(d["naive"]["closed_form"], Value::Bool(true));
}

#[test]
fn non_convergence_exits_3_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs().join("power_mixture.json"))
        .unwrap()
        .replace("\"fp_max_iters\": 200", "\"fp_max_iters\": 2");
    let cfg = config_file(dir.path(), &text);
    let (code, _) = run("solve", &cfg, dir.path(), &[]);
    assert_eq!(code, 3);
    let d = load(&dir.path().join("diagnostics.json"));
    assert_eq!(d["sophisticated"]["residuals"].as_array().unwrap().len(), 2);
    assert_eq!(d["sophisticated"]["converged"], Value::Bool(false));
}

#[test]
fn invalid_gamma_exits_2_naming_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs().join("power_mixture.json"))
        .unwrap()
        .replace("\"gamma\": 0.5", "\"gamma\": 1.0");
    let cfg = config_file(dir.path(), &text);
    let (code, err) = run("solve", &cfg, dir.path(), &[]);
    assert_eq!(code, 2);
    assert!(err.contains("utility.gamma") && err.contains("line 5"), "{err}");
}

#[test]
fn missing_oracle_block_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = run("oracle", &configs().join("log_mixture.json"), dir.path(), &[]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("oracle"));
}

#[test]
fn empty_agent_list_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs().join("log_mixture.json"))
        .unwrap()
        .replace(r#"["precommitment", "naive", "sophisticated"]"#, "[]");
    let cfg = config_file(dir.path(), &text);
    let (code, err) = run("compare", &cfg, dir.path(), &[]);
    assert_eq!(code, 2);
    assert!(err.contains("agents"), "{err}");
}

#[test]
fn oracle_constant_rate_gap_and_richardson_table() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = run("oracle", &configs().join("merton_log.json"), dir.path(), &[]);
    assert_eq!(code, 0, "{err}");
    let (h, rows) = read_csv(&dir.path().join("convergence.csv")).unwrap();
    assert_eq!(h[3], "relative_gap");
    assert_eq!(rows[0][0], 64.0);
    assert!(rows[0][3] < 2e-2);
    assert!((1.6..=2.4).contains(&rows[1][4]), "ratio {}", rows[1][4]);
    assert!(dir.path().join("oracle_N64.csv").exists());
    assert!(dir.path().join("oracle_N128.csv").exists());
    let d = load(&dir.path().join("oracle_diagnostics.json"));
    assert_eq!(d["runs"].as_array().unwrap().len(), 2);
}

#[test]
fn compare_log_mixture_table() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = run("compare", &configs().join("log_mixture.json"), dir.path(), &[]);
    assert_eq!(code, 0, "{err}");
    let report = load(&dir.path().join("report.json"));
    let gap = report["gaps"]
        .as_array()
        .unwrap()
        .iter()
        .find(|g| g["first"] == "naive" && g["second"] == "sophisticated")
        .unwrap();
    assert!(gap["sup_norm"].as_f64().unwrap() < 1e-10);
    let table = std::fs::read_to_string(dir.path().join("table1.csv")).unwrap();
    assert!(table.lines().count() > 3);
}

#[test]
fn compare_exponential_beta_flag() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs().join("barro_exponential.json"))
        .unwrap()
        .replace("\"oracle\": {\"n_steps\": 32},", "");
    let cfg = config_file(dir.path(), &text);
    let (code, err) = run("compare", &cfg, dir.path(), &[]);
    assert_eq!(code, 0, "{err}");
    let report = load(&dir.path().join("report.json"));
    let flag = report["flags"].as_array().unwrap().iter().find(|f| f["name"] == "beta_equal").unwrap();
    assert_eq!(flag["holds"], Value::Bool(true));
    assert!(dir.path().join("table3.csv").exists());
}

#[test]
fn simulate_repeats_bitwise_and_honours_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs().join("log_mixture.json"))
        .unwrap()
        .replace("\"n_paths\": 20000", "\"n_paths\": 2000");
    let cfg = config_file(dir.path(), &text);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    assert_eq!(run("simulate", &cfg, &a, &[]).0, 0);
    assert_eq!(run("simulate", &cfg, &b, &["--threads", "2"]).0, 0);
    assert_eq!(run("simulate", &cfg, &c, &["--seed-override", "8"]).0, 0);
    let read = |d: &Path| std::fs::read(d.join("simulation.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn solved_policy_reloads_for_simulation() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run("solve", &configs().join("power_mixture.json"), dir.path(), &[]).0, 0);
    let policy = dir.path().join("policy_sophisticated.json");
    let text = format!(
        r#"{{
  "problem": {{
    "discount": {{"kind": "mixture", "weights": [0.5, 0.5], "rates": [0.05, 0.15]}},
    "market": {{"mu0": 0.03, "mu": [0.08], "sigma_bar": [[0.2]]}},
    "utility": {{"kind": "power", "gamma": 0.5, "a": 1.0}},
    "T": 10.0
  }},
  "simulation": {{"n_paths": 4000, "n_steps": 100, "seed": 3, "W0": 1.0}},
  "simulate": {{"policy_file": {:?}}}
}}"#,
        policy.to_str().unwrap()
    );
    let cfg = config_file(dir.path(), &text);
    let out = dir.path().join("sim");
    let (code, err) = run("simulate", &cfg, &out, &[]);
    assert_eq!(code, 0, "{err}");
    let s = load(&out.join("simulation.json"));
    assert_eq!(s["agent"], "sophisticated");
    assert!(s["standard_errors_from_ode"].as_f64().unwrap() < 4.0);
}

#[test]
fn zero_volatility_cash_growth() {
    let dir = tempfile::tempdir().unwrap();
    // Log investor with a riskless market puts nothing at risk.
    let text = r#"{
  "problem": {
    "discount": {"kind": "constant", "rho": 0.1},
    "market": {"mu0": 0.03, "mu": [0.03], "sigma_bar": [[0.0]]},
    "utility": {"kind": "log", "a": 10.0},
    "T": 1.0
  },
  "simulation": {"n_paths": 8, "n_steps": 256, "seed": 1, "W0": 1.0, "scheme": "log_euler"},
  "simulate": {"agent": "precommitment"}
}"#;
    let cfg = config_file(dir.path(), text);
    let (code, err) = run("simulate", &cfg, dir.path(), &[]);
    assert_eq!(code, 0, "{err}");
    let s = load(&dir.path().join("simulation.json"));
    let exact = (0.03f64 - 0.1).exp();
    assert!((s["final_mean_wealth"].as_f64().unwrap() - exact).abs() < 1e-10);
}
