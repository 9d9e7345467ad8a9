use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use hypermerton::analysis::compare_agents;
use hypermerton::closed_policies::Policy;
use hypermerton::io::{fmt_float, read_json, write_csv, write_json};
use hypermerton::mpe_oracle::{convergence_study, ConvergenceRow, OracleDiagnostics};
use hypermerton::problem::time_grid;
use hypermerton::simulator::{mean_wealth_ode, simulate, SimulationResult};
use hypermerton::soph_solver::build_policy;
use hypermerton::{Error, UtilitySpec};
use serde::Serialize;
use serde_json::json;

use crate::config::{AgentName, ExperimentConfig, Format};
use crate::Status;

/// Oracle runs whose control boxes bind at more than this share of node
/// evaluations are flagged.
pub const CONTACT_LIMIT: f64 = 0.01;

pub struct Workspace<'a> {
    pub config: &'a ExperimentConfig,
    pub out: PathBuf,
}

impl Workspace<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn json<T: Serialize + ?Sized>(&self, name: &str, v: &T) -> anyhow::Result<()> {
        if self.config.wants(Format::Json) {
            write_json(&self.path(name), v).with_context(|| format!("writing {name}"))?;
        }
        Ok(())
    }

    fn csv(&self, name: &str, header: &[String], rows: &[Vec<f64>]) -> anyhow::Result<()> {
        if self.config.wants(Format::Csv) {
            write_csv(&self.path(name), header, rows).with_context(|| format!("writing {name}"))?;
        }
        Ok(())
    }
}

fn asset_header(first: &[&str], assets: usize, last: &[&str]) -> Vec<String> {
    first
        .iter()
        .map(|s| s.to_string())
        .chain((1..=assets).map(|k| format!("w_{k}")))
        .chain(last.iter().map(|s| s.to_string()))
        .collect()
}

/// `t, W, c, w_1..w_m` at `W0` on the report grid. Undefined points are NaN.
fn policy_table(policy: &Policy, w0: f64, nodes: usize, assets: usize) -> Vec<Vec<f64>> {
    time_grid(policy.horizon, nodes)
        .into_iter()
        .map(|t| {
            let mut row = vec![t, w0, policy.consumption(w0, t).unwrap_or(f64::NAN)];
            match policy.weights(w0, t) {
                Ok(w) => row.extend(w),
                Err(_) => row.extend(std::iter::repeat_n(f64::NAN, assets)),
            }
            row
        })
        .collect()
}

pub fn solve(cx: &Workspace) -> anyhow::Result<Status> {
    let cfg = cx.config;
    let problem = &cfg.problem;
    let assets = problem.market.assets();
    let mut diagnostics = BTreeMap::new();
    let mut status = Status::Ok;
    for &name in &cfg.agents {
        let label = name.label();
        match build_policy(problem, cfg.agent_kind(name), &cfg.solver) {
            Ok((policy, diag)) => {
                cx.json(&format!("policy_{label}.json"), &policy)?;
                let header = asset_header(&["t", "W", "c"], assets, &[]);
                cx.csv(&format!("policy_{label}.csv"), &header, &policy_table(&policy, problem.w0, cfg.report_nodes, assets))?;
                let entry = match diag {
                    Some(d) => serde_json::to_value(d)?,
                    None => json!({ "closed_form": true }),
                };
                diagnostics.insert(label, entry);
            }
            Err(Error::NonConvergence { iterations, residuals }) => {
                eprintln!("{label}: fixed point did not converge after {iterations} iterations");
                diagnostics.insert(
                    label,
                    json!({ "converged": false, "iterations": iterations, "residuals": residuals }),
                );
                status = status.max(Status::NonConvergence);
            }
            Err(e) => {
                // Diagnostics gathered so far are still useful.
                diagnostics.insert(label, json!({ "error": e.to_string() }));
                write_json(&cx.path("diagnostics.json"), &diagnostics)?;
                return Err(anyhow::Error::new(e).context(format!("building the {label} policy")));
            }
        }
    }
    write_json(&cx.path("diagnostics.json"), &diagnostics)?;
    Ok(status)
}

#[derive(Serialize)]
struct OracleRun {
    n_steps: usize,
    diagnostics: OracleDiagnostics,
    contact_fraction: f64,
}

#[derive(Serialize)]
struct OracleSummary {
    reference: Option<f64>,
    runs: Vec<OracleRun>,
    convergence: Vec<ConvergenceRow>,
}

pub fn oracle(cx: &Workspace) -> anyhow::Result<Status> {
    let cfg = cx.config;
    let oracle = cfg.oracle.as_ref().ok_or_else(|| crate::config_error("missing `oracle` block"))?;
    let problem = &cfg.problem;
    let reference = match build_policy(problem, cfg.agent_kind(AgentName::Sophisticated), &cfg.solver) {
        Ok((p, _)) => p.consumption(problem.w0, 0.0).ok(),
        Err(e) => {
            eprintln!("no solver reference: {e}");
            None
        }
    };
    let n = oracle.n_steps;
    let (rows, results) = convergence_study(problem, oracle, &[n, 2 * n], reference)?;
    let header = asset_header(&["j", "t", "W", "c"], problem.market.assets(), &["V", "H"]);
    for r in &results {
        cx.csv(&format!("oracle_N{}.csv", r.stages.n_steps), &header, &r.table())?;
    }
    let opt = |v: Option<f64>| v.unwrap_or(f64::NAN);
    let table: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            vec![
                r.n_steps as f64,
                r.consumption,
                opt(r.reference),
                opt(r.relative_gap),
                opt(r.ratio),
                opt(r.richardson),
                r.contact_fraction,
            ]
        })
        .collect();
    let conv_header: Vec<String> = ["n_steps", "consumption", "reference", "relative_gap", "ratio", "richardson", "contact_fraction"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    write_csv(&cx.path("convergence.csv"), &conv_header, &table)?;
    let summary = OracleSummary {
        reference,
        runs: results
            .iter()
            .map(|r| OracleRun {
                n_steps: r.stages.n_steps,
                diagnostics: r.diagnostics.clone(),
                contact_fraction: r.diagnostics.contact_fraction(),
            })
            .collect(),
        convergence: rows,
    };
    write_json(&cx.path("oracle_diagnostics.json"), &summary)?;
    let worst = summary.runs.iter().map(|r| r.contact_fraction).fold(0.0, f64::max);
    if worst > CONTACT_LIMIT {
        eprintln!("control box binds at {:.2}% of node evaluations", 100.0 * worst);
        return Ok(Status::BoundaryContact);
    }
    Ok(Status::Ok)
}

pub fn compare(cx: &Workspace) -> anyhow::Result<Status> {
    let cfg = cx.config;
    let mut report = compare_agents(&cfg.problem, &cfg.compare_config())?;
    let keep: Vec<&str> = cfg.agents.iter().map(|a| a.label()).collect();
    report.agents.retain(|a| keep.contains(&a.agent.as_str()));
    report.gaps.retain(|g| keep.contains(&g.first.as_str()) && keep.contains(&g.second.as_str()));
    cx.json("report.json", &report)?;
    let table = match cfg.problem.utility {
        UtilitySpec::Log { .. } => "table1.csv",
        UtilitySpec::Power { .. } => "table2.csv",
        UtilitySpec::Exponential { .. } => "table3.csv",
    };
    if cfg.wants(Format::Csv) {
        report.write_table(&cx.path(table))?;
    }
    for o in &report.omissions {
        eprintln!("omitted {}: {}", o.agent, o.error);
    }
    Ok(if report.is_partial() { Status::Partial } else { Status::Ok })
}

pub fn simulate_cmd(cx: &Workspace, seed_override: Option<u64>) -> anyhow::Result<Status> {
    let cfg = cx.config;
    let mut spec = cfg.simulation.clone().ok_or_else(|| crate::config_error("missing `simulation` block"))?;
    if let Some(s) = seed_override {
        spec.seed = s;
    }
    let policy: Policy = match &cfg.simulate.policy_file {
        Some(p) => read_json(p).with_context(|| format!("reading policy {}", p.display()))?,
        None => build_policy(&cfg.problem, cfg.agent_kind(cfg.simulate.agent), &cfg.solver)?.0,
    };
    let market = &cfg.problem.market;
    let mut result = simulate(&policy, market, &spec)?;
    if spec.keep_paths > 0 {
        result.write_paths(&cx.path("paths.bin"))?;
    }
    let (header, rows) = result.table();
    cx.csv("simulation.csv", &header, &rows)?;
    result.paths.clear();
    let ode = mean_wealth_ode(&policy, market, spec.w0, spec.n_steps, 1e-10).ok();
    let ode_final = ode.as_ref().and_then(|m| m.last().copied());
    let summary = SimulationSummary {
        agent: policy.agent.label(),
        seed: spec.seed,
        n_paths: spec.n_paths,
        n_steps: spec.n_steps,
        final_mean_wealth: *result.mean_wealth.last().unwrap(),
        final_wealth_stderr: result.final_wealth_stderr,
        ode_final_mean_wealth: ode_final,
        standard_errors_from_ode: ode_final.map(|m| (result.mean_wealth.last().unwrap() - m).abs() / result.final_wealth_stderr),
        bankrupt_count: result.bankrupt_count(),
        result: &result,
    };
    cx.json("simulation.json", &summary)?;
    println!(
        "mean W(T) = {} (stderr {}), bankrupt {}",
        fmt_float(summary.final_mean_wealth),
        fmt_float(summary.final_wealth_stderr),
        summary.bankrupt_count
    );
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct SimulationSummary<'a> {
    agent: &'static str,
    seed: u64,
    n_paths: usize,
    n_steps: usize,
    final_mean_wealth: f64,
    final_wealth_stderr: f64,
    ode_final_mean_wealth: Option<f64>,
    standard_errors_from_ode: Option<f64>,
    bankrupt_count: u64,
    result: &'a SimulationResult,
}

pub fn ensure_dir(path: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}
