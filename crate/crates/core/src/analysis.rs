//! Comparative statics: propensities to consume, infinite-horizon limits,
//! observational equivalence and agent comparison reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::closed_policies::{AgentKind, Policy};
use crate::discount::DiscountModel;
use crate::error::{Error, Result};
use crate::io::fmt_float;
use crate::market::{MarketModel, UtilitySpec};
use crate::mpe_oracle::{convergence_study, OracleConfig};
use crate::problem::{time_grid, Problem};
use crate::quad;
use crate::soph_solver::{build_policy, DeltaForm, SolverConfig};

/// `λ(t) = c(W, t)/W` for log and power policies.
pub fn propensity(policy: &Policy, t: f64) -> Result<f64> {
    policy.propensity(t)
}

/// `∫_0^∞ f` for an integrand with exponential decay, over doubling panels.
fn integrate_to_infinity<F: Fn(f64) -> f64>(f: F) -> Result<f64> {
    let mut total = 0.0;
    let (mut a, mut width) = (0.0, 1.0);
    while a < 1e5 {
        let part = quad::integrate(&f, a, a + width);
        if !part.is_finite() {
            return Err(Error::domain("integral diverges"));
        }
        total += part;
        a += width;
        width *= 2.0;
        if a > 64.0 && part.abs() <= 1e-16 * total.abs().max(1e-300) {
            return Ok(total);
        }
    }
    Err(Error::domain("integral does not converge on [0, 1e5]"))
}

/// Infinite-horizon propensities to consume for log and power utility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfinitePropensities {
    pub limit_rate: f64,
    pub delta_p: f64,
    /// `1/∫θ̃^{1/(1−γ)}`.
    pub naive: f64,
    /// The same quantity through `(r̄−δ^p)/(1−γ − ∫(r−r̄)θ̃^{1/(1−γ)})`.
    pub naive_by_limit: f64,
    /// `λ^S` with the Itô reading of Δ.
    pub sophisticated_ito: f64,
    /// `λ^S` with the printed reading of Δ, when its integral converges.
    pub sophisticated_printed: Option<f64>,
}

fn crra_delta(market: &MarketModel, gamma: f64) -> Result<f64> {
    if gamma == 0.0 {
        Ok(0.0)
    } else {
        market.delta_p(gamma)
    }
}

fn crra_gamma(utility: &UtilitySpec) -> Result<f64> {
    match *utility {
        UtilitySpec::Log { .. } => Ok(0.0),
        UtilitySpec::Power { gamma, .. } => Ok(gamma),
        UtilitySpec::Exponential { .. } => Err(Error::Unsupported(
            "propensities need consumption proportional to wealth (log or power)".into(),
        )),
    }
}

fn tilde_power(discount: &DiscountModel, delta: f64, p: f64, s: f64) -> f64 {
    (-p * (discount.cumulative_rate(s).unwrap() - delta * s)).exp()
}

/// `λ^P(t) = θ̃(t)^{1/(1−γ)} / ∫_t^∞ θ̃^{1/(1−γ)}`.
pub fn infinite_precommitment_propensity(discount: &DiscountModel, market: &MarketModel, utility: &UtilitySpec, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::domain("t must be nonnegative"));
    }
    let gamma = crra_gamma(utility)?;
    let delta = crra_delta(market, gamma)?;
    check_transversality(discount, delta)?;
    let p = 1.0 / (1.0 - gamma);
    let base = tilde_power(discount, delta, p, t);
    let tail = integrate_to_infinity(|u| tilde_power(discount, delta, p, t + u) / base)?;
    Ok(1.0 / tail)
}

fn check_transversality(discount: &DiscountModel, delta: f64) -> Result<()> {
    let rbar = discount.limit_rate();
    if rbar <= delta {
        return Err(Error::domain(format!(
            "transversality violated: limiting rate {rbar} does not exceed δ^p = {delta}"
        )));
    }
    Ok(())
}

pub fn infinite_horizon_propensities(discount: &DiscountModel, market: &MarketModel, utility: &UtilitySpec) -> Result<InfinitePropensities> {
    let gamma = crra_gamma(utility)?;
    let delta = crra_delta(market, gamma)?;
    check_transversality(discount, delta)?;
    let rbar = discount.limit_rate();
    let p = 1.0 / (1.0 - gamma);
    let tp = |u: f64| tilde_power(discount, delta, p, u);
    let naive = 1.0 / integrate_to_infinity(tp)?;
    let excess = integrate_to_infinity(|u| (discount.rate(u).unwrap() - rbar) * tp(u))?;
    let naive_by_limit = (rbar - delta) / (1.0 - gamma - excess);
    let m = market.excess_quadratic();
    let mu0 = market.mu0();
    let ito = sophisticated_infinite(discount, gamma, delta, mu0 + 0.5 * m / (1.0 - gamma))?;
    let printed = sophisticated_infinite(discount, gamma, delta, mu0 + m / (1.0 - gamma)).ok();
    Ok(InfinitePropensities {
        limit_rate: rbar,
        delta_p: delta,
        naive,
        naive_by_limit,
        sophisticated_ito: ito,
        sophisticated_printed: printed,
    })
}

/// Solves `λ = (r̄−δ^p)/(1−γ − ∫(r−r̄)θ e^{γ(b−λ)u})` where `Δ = b − λ`.
fn sophisticated_infinite(discount: &DiscountModel, gamma: f64, delta: f64, b: f64) -> Result<f64> {
    let rbar = discount.limit_rate();
    let integral = |lam: f64| -> Option<f64> {
        let g = gamma * (b - lam);
        if g >= rbar {
            return None;
        }
        integrate_to_infinity(|u| (discount.rate(u).unwrap() - rbar) * (g * u - discount.cumulative_rate(u).unwrap()).exp()).ok()
    };
    // g(λ) > 0 means λ is too small.
    let g = |lam: f64| -> f64 {
        match integral(lam) {
            Some(i) if 1.0 - gamma - i > 0.0 => (rbar - delta) / (1.0 - gamma - i) - lam,
            _ => gamma.signum().max(0.0) * 2.0 - 1.0,
        }
    };
    if gamma == 0.0 {
        let i = integral(0.0).ok_or_else(|| Error::domain("discount integral diverges"))?;
        return Ok(rbar / (1.0 - i));
    }
    let lo0 = (rbar - delta) / (1.0 - gamma);
    let (mut lo, mut hi) = (lo0 * 0.5, lo0 * 2.0);
    let mut found = false;
    for _ in 0..80 {
        if g(lo) > 0.0 && g(hi) < 0.0 {
            found = true;
            break;
        }
        if g(lo) <= 0.0 {
            lo *= 0.5;
        }
        if g(hi) >= 0.0 {
            hi *= 2.0;
        }
    }
    if !found {
        return Err(Error::NonConvergence {
            iterations: 80,
            residuals: vec![g(lo), g(hi)],
        });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceVerdict {
    pub max_deviation: f64,
    pub worst_t: f64,
    pub equivalent: bool,
}

/// Equivalence threshold on the α identity.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-9;

/// Tests `aθ(T−t) + ∫_0^{T−t}θ = (a − 1/ρ)e^{−ρ(T−t)} + 1/ρ` on `nodes` times.
pub fn observational_equivalence_log(discount: &DiscountModel, a: f64, rho: f64, horizon: f64, nodes: usize) -> Result<EquivalenceVerdict> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::domain("candidate rate must be positive"));
    }
    if !(a >= 0.0) {
        return Err(Error::invalid("utility.a", "must be nonnegative"));
    }
    if nodes < 2 {
        return Err(Error::domain("need at least two nodes"));
    }
    let mut verdict = EquivalenceVerdict {
        max_deviation: 0.0,
        worst_t: 0.0,
        equivalent: true,
    };
    for t in time_grid(horizon, nodes) {
        let tau = horizon - t;
        let lhs = a * discount.factor(tau)? + discount.factor_integral(0.0, tau)?;
        let rhs = (a - 1.0 / rho) * (-rho * tau).exp() + 1.0 / rho;
        let dev = (lhs - rhs).abs();
        if dev > verdict.max_deviation {
            verdict.max_deviation = dev;
            verdict.worst_t = t;
        }
    }
    verdict.equivalent = verdict.max_deviation <= EQUIVALENCE_TOLERANCE;
    Ok(verdict)
}

/// Brute-force search over the mixing weight `λ ∈ [0, 1]` of
/// `θ = λe^{−ρτ} + (1−λ)e^{−τ/a}` for the weight minimizing the deviation of
/// the equivalence identity at rate `ρ`. A uniform scan is refined by golden
/// section around the best cell.
pub fn equivalence_weight_search(rho: f64, a: f64, horizon: f64, scan: usize) -> Result<(f64, EquivalenceVerdict)> {
    if !(a > 0.0) {
        return Err(Error::invalid("utility.a", "must be positive for a two-rate mixture"));
    }
    let dev = |lam: f64| -> Result<EquivalenceVerdict> {
        let (w, r) = if lam >= 1.0 {
            (vec![1.0], vec![rho])
        } else if lam <= 0.0 {
            (vec![1.0], vec![1.0 / a])
        } else {
            (vec![lam, 1.0 - lam], vec![rho, 1.0 / a])
        };
        observational_equivalence_log(&DiscountModel::mixture(w, r)?, a, rho, horizon, 101)
    };
    let mut best = (0.0, dev(0.0)?);
    for k in 1..=scan {
        let lam = k as f64 / scan as f64;
        let v = dev(lam)?;
        if v.max_deviation < best.1.max_deviation {
            best = (lam, v);
        }
    }
    let h = 1.0 / scan as f64;
    let (mut lo, mut hi) = ((best.0 - h).max(0.0), (best.0 + h).min(1.0));
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let x1 = hi - phi * (hi - lo);
        let x2 = lo + phi * (hi - lo);
        if dev(x1)?.max_deviation <= dev(x2)?.max_deviation {
            hi = x2;
        } else {
            lo = x1;
        }
    }
    let mid = 0.5 * (lo + hi);
    let v = dev(mid)?;
    if v.max_deviation < best.1.max_deviation {
        best = (mid, v);
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub t_nodes: usize,
    pub solver: SolverConfig,
    /// Adds the Richardson oracle check for the sophisticated agent.
    pub oracle: Option<OracleConfig>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            t_nodes: 101,
            solver: SolverConfig::default(),
            oracle: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentReport {
    pub agent: String,
    /// Consumption at `W0` on the report grid.
    pub consumption: Vec<f64>,
    /// `c/W` for log and power.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub propensity: Option<Vec<f64>>,
    /// Portfolio weights at `W0` on the report grid.
    pub weights: Vec<Vec<f64>>,
    #[serde(skip)]
    pub policy: Option<Policy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub first: String,
    pub second: String,
    /// `sup_t |c_1 − c_2|`.
    pub sup_norm: f64,
    /// `sup_t |c_1 − c_2| / |c_2|`.
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flag {
    pub name: String,
    pub holds: bool,
    /// Where the inequality or identity is tightest.
    pub witness_t: f64,
    /// Signed slack at the witness (nonnegative when it holds with room).
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub n_steps: [usize; 2],
    pub oracle: [f64; 2],
    pub richardson: f64,
    pub solver: f64,
    pub relative_gap: f64,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Omission {
    pub agent: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub utility: String,
    pub times: Vec<f64>,
    pub agents: Vec<AgentReport>,
    pub gaps: Vec<Gap>,
    pub flags: Vec<Flag>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleCheck>,
    pub omissions: Vec<Omission>,
    /// The two readings of Δ give different sophisticated power rules.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_form: Option<DeltaForm>,
}

const ORACLE_TOLERANCE: f64 = 5e-3;

impl ComparisonReport {
    pub fn is_partial(&self) -> bool {
        !self.omissions.is_empty()
    }

    pub fn flag(&self, name: &str) -> Option<&Flag> {
        self.flags.iter().find(|f| f.name == name)
    }

    pub fn agent(&self, label: &str) -> Option<&AgentReport> {
        self.agents.iter().find(|a| a.agent == label)
    }

    pub fn gap(&self, first: &str, second: &str) -> Option<&Gap> {
        self.gaps
            .iter()
            .find(|g| (g.first == first && g.second == second) || (g.first == second && g.second == first))
    }

    /// Table rows `agent, rule, value(t_0), value(t_1), …`.
    pub fn table_rows(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let mut header = vec!["agent".to_string(), "rule".to_string()];
        header.extend(self.times.iter().map(|t| format!("t={}", fmt_float(*t))));
        let mut rows = Vec::new();
        for a in &self.agents {
            let mut push = |rule: String, vals: &[f64]| {
                let mut row = vec![a.agent.clone(), rule];
                row.extend(vals.iter().map(|v| fmt_float(*v)));
                rows.push(row);
            };
            push(consumption_formula(&self.utility, &a.agent), &a.consumption);
            if let Some(p) = &a.propensity {
                push("lambda = c/W".into(), p);
            }
            let m = a.weights.first().map_or(0, |w| w.len());
            for i in 0..m {
                let col: Vec<f64> = a.weights.iter().map(|w| w[i]).collect();
                push(weight_formula(&self.utility, i + 1), &col);
            }
        }
        (header, rows)
    }

    pub fn write_table(&self, path: &Path) -> Result<()> {
        let (header, rows) = self.table_rows();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn consumption_formula(utility: &str, agent: &str) -> String {
    let f = match (utility, agent) {
        ("log", "precommitment") => "c = W / (a theta(T)/theta(t) + int_t^T theta(s)/theta(t) ds)",
        ("log", "naive") | ("log", "sophisticated") => "c = W / (a theta(T-t) + int_t^T theta(s-t) ds)",
        ("power", "precommitment") => "c = W / (a^(1/(1-g)) K(T) + int_t^T K(s) ds), K(s) = (theta(s)/theta(t) e^(dp(s-t)))^(1/(1-g))",
        ("power", "naive") => "c = W / (a^(1/(1-g)) K(T) + int_t^T K(s) ds), K(s) = (theta(s-t) e^(dp(s-t)))^(1/(1-g))",
        ("power", "sophisticated") => "c = alpha_S(t)^(-1/(1-g)) W",
        ("exponential", _) => "c = alpha(t) + beta(t) W - ln(a g beta(t))/g",
        _ => "c",
    };
    f.to_string()
}

fn weight_formula(utility: &str, i: usize) -> String {
    match utility {
        "log" => format!("w_{i} = [Sigma^-1 (mu - mu0)]_{i}"),
        "power" => format!("w_{i} = [Sigma^-1 (mu - mu0)]_{i} / (1-g)"),
        _ => format!("w_{i} = [Sigma^-1 (mu - mu0)]_{i} / (g beta(t) W)"),
    }
}

fn sup_gap(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut abs = 0.0f64;
    let mut rel = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = (x - y).abs();
        abs = abs.max(d);
        rel = rel.max(d / y.abs().max(f64::MIN_POSITIVE));
    }
    (abs, rel)
}

/// Builds every applicable agent, evaluates its rules on a time grid and
/// checks the comparative statements. Agents that fail are listed as omissions.
pub fn compare_agents(problem: &Problem, cfg: &CompareConfig) -> Result<ComparisonReport> {
    problem.validate()?;
    cfg.solver.validate()?;
    if cfg.t_nodes < 2 {
        return Err(Error::invalid("compare.t_nodes", "must be at least 2"));
    }
    let horizon = problem.horizon;
    let crra = problem.utility.is_crra();
    // Zero bequest weight makes CRRA consumption singular at T.
    let singular_end = crra && problem.utility.bequest_weight() == 0.0;
    let mut times = time_grid(horizon, cfg.t_nodes);
    if singular_end {
        let last = times.len() - 1;
        times[last] = horizon * (1.0 - 1e-9);
    }
    let w0 = problem.w0;
    let mut agents = Vec::new();
    let mut omissions = Vec::new();
    for kind in [AgentKind::PreCommitment, AgentKind::Naive, AgentKind::Sophisticated] {
        let built = build_policy(problem, kind, &cfg.solver).and_then(|(policy, _)| {
            let consumption = times.iter().map(|&t| policy.consumption(w0, t)).collect::<Result<Vec<_>>>()?;
            let propensity = if crra {
                Some(times.iter().map(|&t| policy.propensity(t)).collect::<Result<Vec<_>>>()?)
            } else {
                None
            };
            let weights = times.iter().map(|&t| policy.weights(w0, t)).collect::<Result<Vec<_>>>()?;
            Ok(AgentReport {
                agent: kind.label().to_string(),
                consumption,
                propensity,
                weights,
                policy: Some(policy),
            })
        });
        match built {
            Ok(r) => agents.push(r),
            Err(e) => omissions.push(Omission {
                agent: kind.label().to_string(),
                error: e.to_string(),
            }),
        }
    }

    let mut gaps = Vec::new();
    for i in 0..agents.len() {
        for j in i + 1..agents.len() {
            let (abs, rel) = sup_gap(&agents[i].consumption, &agents[j].consumption);
            gaps.push(Gap {
                first: agents[i].agent.clone(),
                second: agents[j].agent.clone(),
                sup_norm: abs,
                relative: rel,
            });
        }
    }

    let mut report = ComparisonReport {
        utility: problem.utility.name().to_string(),
        times: times.clone(),
        agents,
        gaps,
        flags: Vec::new(),
        oracle: None,
        omissions,
        delta_form: match problem.utility {
            UtilitySpec::Power { .. } => Some(cfg.solver.delta_form),
            _ => None,
        },
    };
    report.flags = comparison_flags(problem, &report)?;

    if let Some(ocfg) = &cfg.oracle {
        if let Some(soph) = report.agent("sophisticated") {
            let solver = soph.consumption[0];
            let n = ocfg.n_steps;
            let (rows, _) = convergence_study(problem, ocfg, &[n, 2 * n], Some(solver))?;
            let richardson = rows[1].richardson.expect("two rows give a Richardson value");
            let rel = (richardson - solver).abs() / solver.abs();
            report.oracle = Some(OracleCheck {
                n_steps: [n, 2 * n],
                oracle: [rows[0].consumption, rows[1].consumption],
                richardson,
                solver,
                relative_gap: rel,
                within_tolerance: rel <= ORACLE_TOLERANCE,
            });
        }
    }
    Ok(report)
}

fn comparison_flags(problem: &Problem, report: &ComparisonReport) -> Result<Vec<Flag>> {
    let times = &report.times;
    let mut flags = Vec::new();
    let p = report.agent("precommitment");
    let n = report.agent("naive");
    let s = report.agent("sophisticated");
    if let UtilitySpec::Log { .. } = problem.utility {
        if let (Some(n), Some(s)) = (n, s) {
            let (k, gap) = argmax(n.consumption.iter().zip(&s.consumption).map(|(a, b)| (a - b).abs()));
            flags.push(Flag {
                name: "naive_equals_sophisticated".into(),
                holds: gap < 1e-10,
                witness_t: times[k],
                slack: 1e-10 - gap,
            });
        }
    }
    if problem.utility.is_crra() {
        if let (Some(p), Some(n)) = (p, n) {
            if problem.discount.is_nonincreasing(problem.horizon) {
                let lp = p.propensity.as_ref().unwrap();
                let ln = n.propensity.as_ref().unwrap();
                let (k, worst) = argmax(lp.iter().zip(ln).map(|(a, b)| a - b));
                flags.push(Flag {
                    name: "precommitment_below_naive".into(),
                    holds: worst <= 1e-12,
                    witness_t: times[k],
                    slack: -worst,
                });
            }
        }
        let first = report.agents.first();
        let same = report.agents.iter().all(|a| Some(&a.weights) == first.map(|f| &f.weights));
        flags.push(Flag {
            name: "portfolio_invariance".into(),
            holds: same,
            witness_t: 0.0,
            slack: 0.0,
        });
    }
    if let UtilitySpec::Exponential { .. } = problem.utility {
        let mut worst: (f64, f64) = (0.0, 0.0);
        for a in &report.agents {
            let beta = a.policy.as_ref().and_then(|p| p.beta.as_ref());
            if let Some(beta) = beta {
                for (&t, &b) in beta.times().iter().zip(beta.values()) {
                    let d = (b - problem.market.beta_exp(t, problem.horizon)?).abs();
                    if d > worst.0 {
                        worst = (d, t);
                    }
                }
            }
        }
        flags.push(Flag {
            name: "beta_equal".into(),
            holds: worst.0 <= 1e-12,
            witness_t: worst.1,
            slack: 1e-12 - worst.0,
        });
        if let (Some(p), Some(n)) = (p, n) {
            let (pp, np) = (p.policy.as_ref().unwrap(), n.policy.as_ref().unwrap());
            let h = 1e-5;
            let dp = (pp.alpha(h)? - pp.alpha(0.0)?) / h;
            let dn = (np.alpha(h)? - np.alpha(0.0)?) / h;
            let same_start = (pp.alpha(0.0)? - np.alpha(0.0)?).abs();
            flags.push(Flag {
                name: "alpha_start_equal".into(),
                holds: same_start <= 1e-12 * pp.alpha(0.0)?.abs().max(1.0),
                witness_t: 0.0,
                slack: -same_start,
            });
            flags.push(Flag {
                name: "alpha_slope_ordered".into(),
                holds: dp <= dn,
                witness_t: 0.0,
                slack: dn - dp,
            });
        }
    }
    Ok(flags)
}

fn argmax<I: Iterator<Item = f64>>(it: I) -> (usize, f64) {
    it.enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (k, v)| if v > best.1 { (k, v) } else { best })
}
