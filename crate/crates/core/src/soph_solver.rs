//! Sophisticated-agent coefficients: the integro-differential equations of the
//! modified HJB equation, solved by damped Picard iteration over backward ODE
//! sweeps on a uniform time grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::closed_policies::{
    self, beta_grid, closed_form_policy, exp_naive_alpha, portfolio_coeff, power_naive_ratio, AgentKind, Curve, Policy,
};
use crate::discount::DiscountModel;
use crate::error::{Error, Result};
use crate::interp::CubicSpline;
use crate::market::{beta_remaining, MarketModel, UtilitySpec};
use crate::ode::solve_on_grid_partial;
use crate::problem::{time_grid, Problem};
use crate::quad;

/// Which drift enters the power-utility growth factor `e^{γ∫Δ}`.
///
/// `Ito` is `Δ = μ0 + M/(2(1−γ)) − λ`, the exponent of `E[W(s)^γ]/W(t)^γ`
/// under the equilibrium rule. `Printed` is `μ0 + M/(1−γ) − λ`, the expression
/// as typeset, which omits the Itô correction of the power moment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaForm {
    #[default]
    Ito,
    Printed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub time_nodes: usize,
    pub fp_tolerance: f64,
    pub fp_max_iters: usize,
    pub damping: f64,
    pub ode_tolerance: f64,
    pub delta_form: DeltaForm,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            time_nodes: closed_policies::DEFAULT_NODES,
            fp_tolerance: 1e-8,
            fp_max_iters: 200,
            damping: 0.5,
            ode_tolerance: 1e-10,
            delta_form: DeltaForm::Ito,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.time_nodes < 11 {
            return Err(Error::invalid("solver.time_nodes", "must be at least 11"));
        }
        if !(self.fp_tolerance > 0.0) {
            return Err(Error::invalid("solver.fp_tolerance", "must be positive"));
        }
        if self.fp_max_iters == 0 {
            return Err(Error::invalid("solver.fp_max_iters", "must be positive"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::invalid("solver.damping", "must lie in (0, 1]"));
        }
        if !(self.ode_tolerance > 0.0) {
            return Err(Error::invalid("solver.ode_tolerance", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridInfo {
    pub start: f64,
    pub end: f64,
    pub nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    pub residuals: Vec<f64>,
    pub converged: bool,
    pub grid: GridInfo,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_form: Option<DeltaForm>,
    /// `sup |β' + μ0β − β²|` of the returned β grid (exponential only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_riccati_residual: Option<f64>,
}

/// The nonlocal term on the solver grid: `K/(W-part)` for power, the
/// coefficient `A` for exponential, the policy-free integral for log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KTerm {
    pub t: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SophSolution {
    pub alpha: Curve,
    pub beta: Option<Curve>,
    pub k_term: KTerm,
    pub diagnostics: SolverDiagnostics,
}

/// Discount quantities on the uniform solver grid. Both `s − t` and `T − t`
/// fall on grid nodes, so `θ` and `r` are tabulated once.
struct GridTables {
    t: Vec<f64>,
    h: f64,
    theta: Vec<f64>,
    rate: Vec<f64>,
}

impl GridTables {
    fn new(discount: &DiscountModel, horizon: f64, nodes: usize) -> Self {
        let t = time_grid(horizon, nodes);
        let theta = t.iter().map(|&x| discount.factor_unchecked(x)).collect();
        let rate = t.iter().map(|&x| discount.rate_unchecked(x)).collect();
        GridTables {
            h: horizon / (nodes - 1) as f64,
            t,
            theta,
            rate,
        }
    }

    fn n(&self) -> usize {
        self.t.len()
    }

    /// `∫_{t_k}^T θ(s−t_k)[r(s−t_k) − r(T−t_k)] g(k, i) ds` for every k.
    fn nonlocal<G: Fn(usize, usize) -> f64>(&self, g: G) -> Vec<f64> {
        let n = self.n();
        let mut buf = Vec::with_capacity(n);
        (0..n)
            .map(|k| {
                let r_end = self.rate[n - 1 - k];
                buf.clear();
                buf.extend((k..n).map(|i| self.theta[i - k] * (self.rate[i - k] - r_end) * g(k, i)));
                quad::integrate_uniform(&buf, self.h)
            })
            .collect()
    }
}

fn grid_info(horizon: f64, nodes: usize) -> GridInfo {
    GridInfo {
        start: 0.0,
        end: horizon,
        nodes,
    }
}

fn relax_until_converged<F>(init: Vec<f64>, terminal: f64, cfg: &SolverConfig, mut sweep: F) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut alpha = init;
    let mut residuals = Vec::new();
    for _ in 0..cfg.fp_max_iters {
        let fresh = sweep(&alpha)?;
        let mut change: f64 = 0.0;
        for (old, new) in alpha.iter_mut().zip(&fresh) {
            let next = cfg.damping * new + (1.0 - cfg.damping) * *old;
            change = change.max((next - *old).abs());
            *old = next;
        }
        *alpha.last_mut().unwrap() = terminal;
        residuals.push(change);
        if change < cfg.fp_tolerance {
            return Ok((alpha, residuals));
        }
    }
    Err(Error::NonConvergence {
        iterations: cfg.fp_max_iters,
        residuals,
    })
}

/// Integrates `α' = f(t, α)` backward from `α(T)` over the ascending grid `t`.
fn backward_sweep<F: Fn(f64, f64) -> f64>(t: &[f64], terminal: f64, tol: f64, positive: bool, f: F) -> Result<Vec<f64>> {
    let rev: Vec<f64> = t.iter().rev().copied().collect();
    let (mut ys, err) = solve_on_grid_partial(f, &rev, terminal, tol);
    if positive {
        if let Some(k) = ys.iter().position(|y| !(*y > 0.0)) {
            return Err(Error::PositivityViolation { t: rev[k], value: ys[k] });
        }
        if err.is_some() {
            let k = ys.len() - 1;
            return Err(Error::PositivityViolation { t: rev[k], value: ys[k] });
        }
    }
    if let Some(e) = err {
        return Err(e);
    }
    ys.reverse();
    Ok(ys)
}

/// Log utility: `α' = r(T−t)α − 1 + ∫_t^T θ(s−t)[r(s−t) − r(T−t)] ds`,
/// `α(T) = a`. The integral does not involve the policy, so one backward
/// solve suffices; it is evaluated by direct quadrature at every ODE stage.
pub fn solve_log_sophisticated(discount: &DiscountModel, a: f64, horizon: f64, cfg: &SolverConfig) -> Result<SophSolution> {
    cfg.validate()?;
    UtilitySpec::log(a)?;
    let t = time_grid(horizon, cfg.time_nodes);
    let nonlocal = |tau: f64| {
        let r_end = discount.rate_unchecked(tau);
        quad::integrate_with(
            |u| discount.factor_unchecked(u) * (discount.rate_unchecked(u) - r_end),
            0.0,
            tau,
            1e-13,
            1e-12,
        )
        .value
    };
    let alpha = backward_sweep(&t, a, cfg.ode_tolerance, false, |s, y| {
        let tau = (horizon - s).max(0.0);
        discount.rate_unchecked(tau) * y - 1.0 + nonlocal(tau)
    })?;
    let k = t.iter().map(|&s| nonlocal(horizon - s)).collect();
    Ok(SophSolution {
        alpha: Curve::new(t.clone(), alpha)?,
        beta: None,
        k_term: KTerm { t, v: k },
        diagnostics: SolverDiagnostics {
            iterations: 1,
            residuals: Vec::new(),
            converged: true,
            grid: grid_info(horizon, cfg.time_nodes),
            delta_form: None,
            beta_riccati_residual: None,
        },
    })
}

/// Power utility:
/// `α' = (r(T−t) − δ^p)α − (1−γ)α^{−γ/(1−γ)} + ∫_t^T θ(s−t)[r(s−t) − r(T−t)] α(s)^{−γ/(1−γ)} e^{γ∫_t^s Δ} ds`
/// with `α(T) = a` and `Δ` per [`DeltaForm`].
pub fn solve_power_sophisticated(
    discount: &DiscountModel,
    market: &MarketModel,
    gamma: f64,
    a: f64,
    horizon: f64,
    cfg: &SolverConfig,
) -> Result<SophSolution> {
    cfg.validate()?;
    UtilitySpec::power(gamma, a)?;
    if a == 0.0 {
        return Err(Error::UnsupportedTerminal);
    }
    let delta_p = market.delta_p(gamma)?;
    let p = 1.0 / (1.0 - gamma);
    let drift = match cfg.delta_form {
        DeltaForm::Ito => delta_p / gamma,
        DeltaForm::Printed => market.mu0() + market.excess_quadratic() / (1.0 - gamma),
    };
    let g = GridTables::new(discount, horizon, cfg.time_nodes);
    let init = g
        .t
        .iter()
        .map(|&t| power_naive_ratio(discount, market, gamma, a, t, horizon).map(|r| r.powf(1.0 - gamma)))
        .collect::<Result<Vec<_>>>()?;

    let k_of = |alpha: &[f64]| -> Result<Vec<f64>> {
        let h_pow: Vec<f64> = alpha.iter().map(|x| x.powf(-gamma * p)).collect();
        let delta: Vec<f64> = alpha.iter().map(|x| drift - x.powf(-p)).collect();
        let cum = CubicSpline::new(g.t.clone(), delta)?.cumulative_integral();
        Ok(g.nonlocal(|k, i| h_pow[i] * (gamma * (cum[i] - cum[k])).exp()))
    };
    let sweep = |alpha: &[f64]| -> Result<Vec<f64>> {
        let k = CubicSpline::new(g.t.clone(), k_of(alpha)?)?;
        backward_sweep(&g.t, a, cfg.ode_tolerance, true, |s, y| {
            if !(y > 0.0) {
                return f64::NAN;
            }
            let tau = (horizon - s).max(0.0);
            (discount.rate_unchecked(tau) - delta_p) * y - (1.0 - gamma) * y.powf(-gamma * p) + k.eval(s)
        })
    };
    let (alpha, residuals) = relax_until_converged(init, a, cfg, sweep)?;
    let k = k_of(&alpha)?;
    Ok(SophSolution {
        alpha: Curve::new(g.t.clone(), alpha)?,
        beta: None,
        k_term: KTerm { t: g.t.clone(), v: k },
        diagnostics: SolverDiagnostics {
            iterations: residuals.len(),
            residuals,
            converged: true,
            grid: grid_info(horizon, cfg.time_nodes),
            delta_form: Some(cfg.delta_form),
            beta_riccati_residual: None,
        },
    })
}

/// `sup |β' + μ0β − β²|` over the nodes, with β' from fourth-order finite
/// differences of the stored grid.
pub fn riccati_residual(market: &MarketModel, beta: &Curve) -> f64 {
    let mu0 = market.mu0();
    let ts = beta.times();
    let h = (ts[ts.len() - 1] - ts[0]) / (ts.len() - 1) as f64;
    node_derivatives(beta.values(), h)
        .iter()
        .zip(beta.values())
        .map(|(d, &b)| (d + mu0 * b - b * b).abs())
        .fold(0.0, f64::max)
}

/// Fourth-order finite-difference derivatives on a uniform grid (at least five
/// nodes): centred stencils inside, one-sided five-point stencils at the ends.
pub fn node_derivatives(v: &[f64], h: f64) -> Vec<f64> {
    let n = v.len();
    assert!(n >= 5, "need five nodes for fourth-order differences");
    (0..n)
        .map(|i| {
            let (c, start): ([f64; 5], usize) = match i {
                0 => ([-25.0, 48.0, -36.0, 16.0, -3.0], 0),
                1 => ([-3.0, -10.0, 18.0, -6.0, 1.0], 0),
                _ if i == n - 2 => ([-1.0, 6.0, -18.0, 10.0, 3.0], n - 5),
                _ if i == n - 1 => ([3.0, -16.0, 36.0, -48.0, 25.0], n - 5),
                _ => ([1.0, -8.0, 0.0, 8.0, -1.0], i - 2),
            };
            c.iter().zip(&v[start..start + 5]).map(|(c, x)| c * x).sum::<f64>() / (12.0 * h)
        })
        .collect()
}

/// Exponential utility with `β^S = β` imposed:
/// `α' = βα + (δ^e(t) − r(T−t) + A(t))/γ`, `α(T) = 0`, where
/// `A(t) = −∫_t^T θ(s−t)[r(s−t) − r(T−t)] β(s) exp(−γ(α(s)−α(t)) − ½M(s−t) + γ∫_t^s βα − ∫_t^s β ln(aγβ)) ds`.
/// The `−½M(s−t)` combines the drift of `∫βB` with the closed-form Gaussian
/// moment `E[e^{−γ∫βC·dz̄}] = e^{½M(s−t)}`.
pub fn solve_exp_sophisticated(
    discount: &DiscountModel,
    market: &MarketModel,
    gamma: f64,
    a: f64,
    horizon: f64,
    cfg: &SolverConfig,
) -> Result<SophSolution> {
    cfg.validate()?;
    UtilitySpec::exponential(gamma, a)?;
    let beta = beta_grid(market, horizon, cfg.time_nodes)?;
    let g = GridTables::new(discount, horizon, cfg.time_nodes);
    let half_m = 0.5 * market.excess_quadratic();
    let b = beta.values().to_vec();
    let log_term: Vec<f64> = b.iter().map(|x| x * (a * gamma * x).ln()).collect();
    let cum_log = CubicSpline::new(g.t.clone(), log_term)?.cumulative_integral();
    let init = exp_naive_alpha(discount, market, gamma, a, horizon, cfg.time_nodes)?.values().to_vec();

    let a_of = |alpha: &[f64]| -> Result<Vec<f64>> {
        let prod: Vec<f64> = alpha.iter().zip(&b).map(|(x, y)| x * y).collect();
        let cum_ba = CubicSpline::new(g.t.clone(), prod)?.cumulative_integral();
        let v = g.nonlocal(|k, i| {
            let expo = -gamma * (alpha[i] - alpha[k]) - half_m * (g.t[i] - g.t[k]) + gamma * (cum_ba[i] - cum_ba[k])
                - (cum_log[i] - cum_log[k]);
            b[i] * expo.exp()
        });
        Ok(v.into_iter().map(|x| -x).collect())
    };
    let mu0 = market.mu0();
    let sweep = |alpha: &[f64]| -> Result<Vec<f64>> {
        let a_term = CubicSpline::new(g.t.clone(), a_of(alpha)?)?;
        backward_sweep(&g.t, 0.0, cfg.ode_tolerance, false, |s, y| {
            let tau = (horizon - s).max(0.0);
            let bs = beta_remaining(mu0, tau);
            let delta_e = bs - half_m - bs * (a * gamma * bs).ln();
            bs * y + (delta_e - discount.rate_unchecked(tau) + a_term.eval(s)) / gamma
        })
    };
    let (alpha, residuals) = relax_until_converged(init, 0.0, cfg, sweep)?;
    let k = a_of(&alpha)?;
    let residual = riccati_residual(market, &beta);
    Ok(SophSolution {
        alpha: Curve::new(g.t.clone(), alpha)?,
        beta: Some(beta),
        k_term: KTerm { t: g.t.clone(), v: k },
        diagnostics: SolverDiagnostics {
            iterations: residuals.len(),
            residuals,
            converged: true,
            grid: grid_info(horizon, cfg.time_nodes),
            delta_form: None,
            beta_riccati_residual: Some(residual),
        },
    })
}

fn check_k_inputs(h: &Curve, t: f64, horizon: f64) -> Result<()> {
    let ts = h.times();
    let tol = 1e-12 * horizon.max(1.0);
    if ts[0].abs() > tol || (ts[ts.len() - 1] - horizon).abs() > tol {
        return Err(Error::domain(format!(
            "H grid spans [{}, {}], expected [0, {horizon}]",
            ts[0],
            ts[ts.len() - 1]
        )));
    }
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::domain(format!("t = {t} lies outside [0, {horizon}]")));
    }
    Ok(())
}

/// `K(t) = ∫_t^T θ(s−t)[r(s−t) − r(T−t)] H(s) ds` for a time-indexed `H`.
pub fn evaluate_k_term(discount: &DiscountModel, h: &Curve, t: f64, horizon: f64) -> Result<f64> {
    check_k_inputs(h, t, horizon)?;
    let r_end = discount.rate_unchecked(horizon - t);
    Ok(quad::integrate(
        |s| {
            let u = s - t;
            discount.factor_unchecked(u) * (discount.rate_unchecked(u) - r_end) * h.eval(s).unwrap_or(f64::NAN)
        },
        t,
        horizon,
    ))
}

/// The variant without the terminal-rate offset: `∫_t^T θ(s−t) r(s−t) H(s) ds`.
pub fn evaluate_k_bar(discount: &DiscountModel, h: &Curve, t: f64, horizon: f64) -> Result<f64> {
    check_k_inputs(h, t, horizon)?;
    Ok(quad::integrate(
        |s| {
            let u = s - t;
            discount.factor_unchecked(u) * discount.rate_unchecked(u) * h.eval(s).unwrap_or(f64::NAN)
        },
        t,
        horizon,
    ))
}

/// `E[exp(−γ∫_t^s β(τ)C(τ)·dz̄)] = exp(½γ²∫_t^s β²‖C‖² dτ)` with
/// `C = (μ−μ0·1)ᵀΣ⁻¹Σ̄/(γβ)`, the integral taken by quadrature.
pub fn gaussian_moment_closed_form(market: &MarketModel, gamma: f64, t: f64, s: f64, horizon: f64) -> Result<f64> {
    let loadings = market.loadings(market.merton_ratio());
    let norm2: f64 = loadings.iter().map(|x| x * x).sum();
    market.beta_exp(t, horizon)?;
    market.beta_exp(s, horizon)?;
    let mu0 = market.mu0();
    let var = quad::integrate(
        |tau| {
            let b = beta_remaining(mu0, horizon - tau);
            let c2 = norm2 / (gamma * b).powi(2);
            gamma * gamma * b * b * c2
        },
        t,
        s,
    );
    Ok((0.5 * var).exp())
}

/// Monte Carlo estimate (mean, standard error) of the same moment, by summing
/// `β(τ_j)C(τ_j)·Δz̄_j` over `steps` left-point increments per sample.
#[allow(clippy::too_many_arguments)]
pub fn gaussian_moment_monte_carlo(
    market: &MarketModel,
    gamma: f64,
    t: f64,
    s: f64,
    horizon: f64,
    samples: usize,
    steps: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    market.beta_exp(t, horizon)?;
    market.beta_exp(s, horizon)?;
    if samples < 2 || steps == 0 {
        return Err(Error::domain("need at least two samples and one step"));
    }
    let loadings = market.loadings(market.merton_ratio());
    let mu0 = market.mu0();
    let dt = (s - t) / steps as f64;
    // β(τ)C(τ) on the step grid.
    let bc: Vec<Vec<f64>> = (0..steps)
        .map(|j| {
            let b = beta_remaining(mu0, horizon - (t + j as f64 * dt));
            loadings.iter().map(|l| b * l / (gamma * b)).collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut mean, mut m2) = (0.0, 0.0);
    for n in 0..samples {
        let mut integral = 0.0;
        for row in &bc {
            for c in row {
                let z: f64 = StandardNormal.sample(&mut rng);
                integral += c * z * dt.sqrt();
            }
        }
        let x = (-gamma * integral).exp();
        let d = x - mean;
        mean += d / (n + 1) as f64;
        m2 += d * (x - mean);
    }
    let var = m2 / (samples - 1) as f64;
    Ok((mean, (var / samples as f64).sqrt()))
}

/// Builds any policy: closed forms where available, the fixed-point solver for
/// power and exponential sophisticated agents.
pub fn build_policy(problem: &Problem, agent: AgentKind, cfg: &SolverConfig) -> Result<(Policy, Option<SolverDiagnostics>)> {
    problem.validate()?;
    cfg.validate()?;
    let (d, m, horizon) = (&problem.discount, &problem.market, problem.horizon);
    let coeff = portfolio_coeff(&problem.utility, m);
    match (problem.utility, agent) {
        (UtilitySpec::Power { gamma, a }, AgentKind::Sophisticated) => {
            let sol = solve_power_sophisticated(d, m, gamma, a, horizon, cfg)?;
            let p = Policy::new(problem.utility, agent, horizon, sol.alpha, None, coeff)?;
            Ok((p, Some(sol.diagnostics)))
        }
        (UtilitySpec::Exponential { gamma, a }, AgentKind::Sophisticated) => {
            let sol = solve_exp_sophisticated(d, m, gamma, a, horizon, cfg)?;
            let p = Policy::new(problem.utility, agent, horizon, sol.alpha, sol.beta, coeff)?;
            Ok((p, Some(sol.diagnostics)))
        }
        _ => Ok((closed_form_policy(problem, agent, cfg.time_nodes)?, None)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closed_policies::{exp_constant_coeffs, log_naive_alpha, log_constant_alpha, power_constant_ratio};

    fn mixture() -> DiscountModel {
        DiscountModel::mixture(vec![0.5, 0.5], vec![0.05, 0.15]).unwrap()
    }

    fn small_cfg() -> SolverConfig {
        SolverConfig {
            time_nodes: 201,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let bad = SolverConfig {
            damping: 0.0,
            ..SolverConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidParameter { field, .. }) if field == "solver.damping"));
        let cfg: SolverConfig = serde_json::from_str(r#"{"fp_tolerance":1e-9,"delta_form":"printed"}"#).unwrap();
        assert_eq!(cfg.time_nodes, 1001);
        assert_eq!(cfg.delta_form, DeltaForm::Printed);
    }

    #[test]
    fn log_route_matches_closed_form() {
        let d = mixture();
        let sol = solve_log_sophisticated(&d, 0.0, 10.0, &SolverConfig::default()).unwrap();
        let worst = sol
            .alpha
            .times()
            .iter()
            .zip(sol.alpha.values())
            .map(|(&t, v)| (v - log_naive_alpha(&d, 0.0, t, 10.0).unwrap()).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-8, "{worst}");
        assert!((sol.alpha.eval(5.0).unwrap() - 3.970_770_326_8).abs() < 1e-8);
        let c = DiscountModel::constant(0.1).unwrap();
        let sol = solve_log_sophisticated(&c, 1.0, 1.0, &small_cfg()).unwrap();
        for (&t, v) in sol.alpha.times().iter().zip(sol.alpha.values()) {
            assert!((v - log_constant_alpha(0.1, 1.0, t, 1.0).unwrap()).abs() < 1e-10);
        }
        assert!(sol.k_term.v.iter().all(|k| *k == 0.0));
    }

    #[test]
    fn power_constant_rate_collapses() {
        let m = MarketModel::single(0.03, 0.08, 0.2).unwrap();
        let c = DiscountModel::constant(0.1).unwrap();
        for gamma in [0.5, -1.0] {
            let sol = solve_power_sophisticated(&c, &m, gamma, 1.0, 1.0, &small_cfg()).unwrap();
            for (&t, v) in sol.alpha.times().iter().zip(sol.alpha.values()) {
                let exact = power_constant_ratio(0.1, &m, gamma, 1.0, t, 1.0).unwrap().powf(1.0 - gamma);
                assert!((v - exact).abs() < 1e-8 * exact);
            }
            assert_eq!(*sol.alpha.values().last().unwrap(), 1.0);
        }
        assert_eq!(
            solve_power_sophisticated(&c, &m, 0.5, 0.0, 1.0, &small_cfg()).unwrap_err(),
            Error::UnsupportedTerminal
        );
    }

    #[test]
    fn power_mixture_converges_with_monotone_tail() {
        let m = MarketModel::single(0.03, 0.08, 0.2).unwrap();
        let sol = solve_power_sophisticated(&mixture(), &m, 0.5, 1.0, 10.0, &small_cfg()).unwrap();
        let r = &sol.diagnostics.residuals;
        assert!(r.len() <= 200 && *r.last().unwrap() < 1e-8);
        let tail = &r[r.len().saturating_sub(5)..];
        assert!(tail.windows(2).all(|w| w[1] < w[0]));
        assert!(sol.alpha.values().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn power_small_gamma_tracks_log() {
        let m = MarketModel::single(0.03, 0.08, 0.2).unwrap();
        let d = mixture();
        let sol = solve_power_sophisticated(&d, &m, 1e-3, 1.0, 10.0, &small_cfg()).unwrap();
        for t in [0.0, 4.0, 9.0] {
            let c_pow = sol.alpha.eval(t).unwrap().powf(-1.0 / (1.0 - 1e-3));
            let c_log = 1.0 / log_naive_alpha(&d, 1.0, t, 10.0).unwrap();
            assert!((c_pow - c_log).abs() / c_log < 5e-3);
        }
    }

    #[test]
    fn exp_constant_rate_collapses() {
        let m = MarketModel::single(0.05, 0.10, 0.2).unwrap();
        let c = DiscountModel::constant(0.1).unwrap();
        let sol = solve_exp_sophisticated(&c, &m, 1.0, 2.0, 1.0, &small_cfg()).unwrap();
        let (alpha, beta) = exp_constant_coeffs(0.1, &m, 1.0, 2.0, 1.0, 201).unwrap();
        for k in 0..201 {
            assert!((sol.alpha.values()[k] - alpha.values()[k]).abs() < 1e-7);
        }
        assert_eq!(sol.beta.as_ref().unwrap().values(), beta.values());
        let fine = beta_grid(&m, 1.0, 1001).unwrap();
        assert!(riccati_residual(&m, &fine) < 1e-8, "{}", riccati_residual(&m, &fine));
    }

    #[test]
    fn k_term_examples() {
        let d = mixture();
        let ts = time_grid(10.0, 101);
        let ones = Curve::new(ts.clone(), vec![1.0; 101]).unwrap();
        for t in [0.0, 3.0, 7.5] {
            let tau = 10.0 - t;
            let expected = (1.0 - d.factor(tau).unwrap()) - d.rate(tau).unwrap() * d.factor_integral(0.0, tau).unwrap();
            assert!((evaluate_k_term(&d, &ones, t, 10.0).unwrap() - expected).abs() < 1e-9);
            let bar = evaluate_k_bar(&d, &ones, t, 10.0).unwrap();
            assert!((bar - (1.0 - d.factor(tau).unwrap())).abs() < 1e-9);
        }
        assert_eq!(evaluate_k_term(&d, &ones, 10.0, 10.0).unwrap(), 0.0);
        let c = DiscountModel::constant(0.1).unwrap();
        let h = Curve::new(ts.clone(), ts.iter().map(|t| t.sin()).collect()).unwrap();
        assert_eq!(evaluate_k_term(&c, &h, 2.0, 10.0).unwrap(), 0.0);
        assert!(evaluate_k_term(&d, &ones, 1.0, 12.0).is_err());
    }

    #[test]
    fn finite_differences_are_fourth_order() {
        let h = 0.01;
        let v: Vec<f64> = (0..50).map(|k| (0.3 * k as f64 * h).exp()).collect();
        for (k, d) in node_derivatives(&v, h).iter().enumerate() {
            assert!((d - 0.3 * (0.3 * k as f64 * h).exp()).abs() < 1e-10);
        }
    }

    #[test]
    fn gaussian_moment_simplifies_to_half_m() {
        let m = MarketModel::single(0.05, 0.10, 0.2).unwrap();
        let cf = gaussian_moment_closed_form(&m, 1.0, 0.2, 0.9, 1.0).unwrap();
        assert!((cf - (0.5 * m.excess_quadratic() * 0.7).exp()).abs() < 1e-12);
    }
}
