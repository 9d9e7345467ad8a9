//! Closed-form coefficients and policies: constant-rate Merton baselines and
//! the pre-commitment and naive rules for log, power and exponential utility,
//! plus the log sophisticated rule.

use serde::{Deserialize, Serialize};

use crate::discount::DiscountModel;
use crate::error::{Error, Result};
use crate::interp::CubicSpline;
use crate::market::{beta_remaining, MarketModel, UtilitySpec};
use crate::problem::{time_grid, Problem};
use crate::quad;

/// Default number of time nodes in a coefficient grid.
pub const DEFAULT_NODES: usize = 1001;

// Below this magnitude a rate that divides a closed form is replaced by the
// analytic limit.
const DEGENERATE_RATE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    ConstantRate(f64),
    #[serde(rename = "precommitment")]
    PreCommitment,
    Naive,
    Sophisticated,
}

impl AgentKind {
    pub fn label(&self) -> &'static str {
        match self {
            AgentKind::ConstantRate(_) => "constant",
            AgentKind::PreCommitment => "precommitment",
            AgentKind::Naive => "naive",
            AgentKind::Sophisticated => "sophisticated",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CurveWire {
    t: Vec<f64>,
    v: Vec<f64>,
}

/// Coefficient sampled on a time grid, interpolated by a cubic spline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "CurveWire", into = "CurveWire")]
pub struct Curve {
    spline: CubicSpline,
}

impl TryFrom<CurveWire> for Curve {
    type Error = Error;
    fn try_from(w: CurveWire) -> Result<Self> {
        Curve::new(w.t, w.v)
    }
}

impl From<Curve> for CurveWire {
    fn from(c: Curve) -> Self {
        CurveWire {
            t: c.times().to_vec(),
            v: c.values().to_vec(),
        }
    }
}

impl PartialEq for Curve {
    fn eq(&self, other: &Self) -> bool {
        self.times() == other.times() && self.values() == other.values()
    }
}

impl Curve {
    pub fn new(t: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain("coefficient grid contains non-finite values"));
        }
        Ok(Curve {
            spline: CubicSpline::new(t, v)?,
        })
    }

    pub fn times(&self) -> &[f64] {
        self.spline.knots()
    }

    pub fn values(&self) -> &[f64] {
        self.spline.values()
    }

    /// Value at `t`; exact on nodes. Errors outside the grid.
    pub fn eval(&self, t: f64) -> Result<f64> {
        let ts = self.times();
        let (lo, hi) = (ts[0], ts[ts.len() - 1]);
        let slack = 1e-12 * (hi - lo);
        if !(t >= lo - slack && t <= hi + slack) {
            return Err(Error::domain(format!("t = {t} lies outside [{lo}, {hi}]")));
        }
        // Node hits return the stored value bit for bit.
        if let Ok(k) = ts.binary_search_by(|x| x.total_cmp(&t)) {
            return Ok(self.values()[k]);
        }
        Ok(self.spline.eval(t.clamp(lo, hi)))
    }

    pub fn derivative(&self, t: f64) -> f64 {
        self.spline.derivative(t)
    }
}

/// A consumption and portfolio rule `(W, t) → (c, w)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policy {
    pub utility: UtilitySpec,
    pub agent: AgentKind,
    pub horizon: f64,
    pub alpha: Curve,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Curve>,
    pub portfolio_coeff: Vec<f64>,
}

impl Policy {
    pub fn new(
        utility: UtilitySpec,
        agent: AgentKind,
        horizon: f64,
        alpha: Curve,
        beta: Option<Curve>,
        portfolio_coeff: Vec<f64>,
    ) -> Result<Self> {
        if utility.is_crra() == beta.is_some() {
            return Err(Error::domain("a beta grid is required for exponential utility and only there"));
        }
        let p = Policy {
            utility,
            agent,
            horizon,
            alpha,
            beta,
            portfolio_coeff,
        };
        p.check()?;
        Ok(p)
    }

    /// Structural checks, also run after deserialization by callers.
    pub fn check(&self) -> Result<()> {
        self.utility.validate()?;
        let ts = self.alpha.times();
        if ts[0] != 0.0 || ts[ts.len() - 1] != self.horizon {
            return Err(Error::domain("alpha grid must span [0, T]"));
        }
        if let Some(beta) = &self.beta {
            if beta.times() != ts {
                return Err(Error::domain("alpha and beta grids differ"));
            }
            if beta.values().iter().any(|b| *b <= 0.0) {
                return Err(Error::domain("beta must be positive"));
            }
        }
        Ok(())
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::domain(format!("t = {t} lies outside [0, {}]", self.horizon)));
        }
        Ok(())
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        self.alpha.eval(t)
    }

    pub fn beta(&self, t: f64) -> Result<Option<f64>> {
        self.check_time(t)?;
        self.beta.as_ref().map(|b| b.eval(t)).transpose()
    }

    /// Consumption per unit wealth (log and power only).
    pub fn propensity(&self, t: f64) -> Result<f64> {
        let alpha = self.alpha(t)?;
        match self.utility {
            UtilitySpec::Log { .. } => {
                if alpha <= 0.0 {
                    return Err(Error::BoundarySingularity { t });
                }
                Ok(1.0 / alpha)
            }
            UtilitySpec::Power { gamma, .. } => {
                if alpha <= 0.0 {
                    return Err(Error::BoundarySingularity { t });
                }
                Ok(alpha.powf(-1.0 / (1.0 - gamma)))
            }
            UtilitySpec::Exponential { .. } => Err(Error::Unsupported(
                "exponential consumption is affine in wealth, not proportional".into(),
            )),
        }
    }

    pub fn consumption(&self, wealth: f64, t: f64) -> Result<f64> {
        match self.utility {
            UtilitySpec::Exponential { gamma, a } => {
                let alpha = self.alpha(t)?;
                let beta = self.beta(t)?.expect("exponential policies carry beta");
                Ok(alpha + beta * wealth - (a * gamma * beta).ln() / gamma)
            }
            _ => Ok(self.propensity(t)? * wealth),
        }
    }

    /// Portfolio weights (fractions of wealth in each risky asset).
    pub fn weights(&self, wealth: f64, t: f64) -> Result<Vec<f64>> {
        self.check_time(t)?;
        match self.utility {
            UtilitySpec::Exponential { gamma, .. } => {
                if wealth == 0.0 {
                    return Err(Error::DivisionByZero("exponential weights at zero wealth".into()));
                }
                let beta = self.beta(t)?.expect("exponential policies carry beta");
                Ok(self.portfolio_coeff.iter().map(|x| x / (gamma * beta * wealth)).collect())
            }
            _ => Ok(self.portfolio_coeff.clone()),
        }
    }

    /// Dollar amounts held in each risky asset, `w·W`.
    pub fn exposure(&self, wealth: f64, t: f64) -> Result<Vec<f64>> {
        self.check_time(t)?;
        match self.utility {
            UtilitySpec::Exponential { gamma, .. } => {
                let beta = self.beta(t)?.expect("exponential policies carry beta");
                Ok(self.portfolio_coeff.iter().map(|x| x / (gamma * beta)).collect())
            }
            _ => Ok(self.portfolio_coeff.iter().map(|x| x * wealth).collect()),
        }
    }
}

/// Portfolio weights: `Σ⁻¹(μ−μ0·1)` scaled by `1` (log), `1/(1−γ)` (power)
/// or `1/(γβ(t)W)` (exponential).
pub fn portfolio_rule(utility: &UtilitySpec, market: &MarketModel, t: f64, horizon: f64, wealth: f64) -> Result<Vec<f64>> {
    let ratio = market.merton_ratio();
    match *utility {
        UtilitySpec::Log { .. } => Ok(ratio.to_vec()),
        UtilitySpec::Power { gamma, .. } => Ok(ratio.iter().map(|x| x / (1.0 - gamma)).collect()),
        UtilitySpec::Exponential { gamma, .. } => {
            if wealth == 0.0 {
                return Err(Error::DivisionByZero("exponential weights at zero wealth".into()));
            }
            let beta = market.beta_exp(t, horizon)?;
            Ok(ratio.iter().map(|x| x / (gamma * beta * wealth)).collect())
        }
    }
}

/// The wealth-independent part of the portfolio rule stored on a policy.
pub fn portfolio_coeff(utility: &UtilitySpec, market: &MarketModel) -> Vec<f64> {
    match *utility {
        UtilitySpec::Power { gamma, .. } => market.merton_ratio().iter().map(|x| x / (1.0 - gamma)).collect(),
        _ => market.merton_ratio().to_vec(),
    }
}

fn check_times(t: f64, horizon: f64) -> Result<()> {
    if !horizon.is_finite() || horizon <= 0.0 {
        return Err(Error::invalid("problem.T", "horizon must be positive"));
    }
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::domain(format!("t = {t} lies outside [0, {horizon}]")));
    }
    Ok(())
}

// `a e^{−kτ} + (1 − e^{−kτ})/k`, the shared shape of every constant-rate
// denominator, with the k → 0 series.
fn exp_denominator(k: f64, a: f64, tau: f64) -> f64 {
    let x = k * tau;
    let tail = if k.abs() < DEGENERATE_RATE {
        tau * (1.0 - 0.5 * x + x * x / 6.0)
    } else {
        -(-x).exp_m1() / k
    };
    a * (-x).exp() + tail
}

/// Log utility, constant rate: `α(t) = [1 − (1 − aρ)e^{−ρ(T−t)}]/ρ`, with
/// `α = T − t + a` at ρ = 0.
pub fn log_constant_alpha(rho: f64, a: f64, t: f64, horizon: f64) -> Result<f64> {
    check_times(t, horizon)?;
    if !rho.is_finite() || rho < 0.0 {
        return Err(Error::invalid("rho", "must be nonnegative"));
    }
    Ok(exp_denominator(rho, a, horizon - t))
}

fn positive_denominator(den: f64, t: f64) -> Result<f64> {
    if den <= 0.0 {
        return Err(Error::BoundarySingularity { t });
    }
    Ok(den)
}

fn check_wealth(wealth: f64) -> Result<()> {
    if !(wealth > 0.0) || !wealth.is_finite() {
        return Err(Error::domain(format!("wealth must be positive, got {wealth}")));
    }
    Ok(())
}

/// `α^P(t) = (aθ(T) + ∫_t^T θ)/θ(t)`.
pub fn log_precommit_alpha(discount: &DiscountModel, a: f64, t: f64, horizon: f64) -> Result<f64> {
    check_times(t, horizon)?;
    let num = a * discount.factor(horizon)? + discount.factor_integral(t, horizon)?;
    Ok(num / discount.factor(t)?)
}

/// `α^N(t) = aθ(T−t) + ∫_0^{T−t} θ`.
pub fn log_naive_alpha(discount: &DiscountModel, a: f64, t: f64, horizon: f64) -> Result<f64> {
    check_times(t, horizon)?;
    let tau = horizon - t;
    Ok(a * discount.factor(tau)? + discount.factor_integral(0.0, tau)?)
}

/// `c^P = θ(t)W / (aθ(T) + ∫_t^T θ(s) ds)`.
pub fn log_precommit_consumption(discount: &DiscountModel, a: f64, t: f64, horizon: f64, wealth: f64) -> Result<f64> {
    check_wealth(wealth)?;
    Ok(wealth / positive_denominator(log_precommit_alpha(discount, a, t, horizon)?, t)?)
}

/// `c^N = W / (aθ(T−t) + ∫_t^T θ(s−t) ds)`.
pub fn log_naive_consumption(discount: &DiscountModel, a: f64, t: f64, horizon: f64, wealth: f64) -> Result<f64> {
    check_wealth(wealth)?;
    Ok(wealth / positive_denominator(log_naive_alpha(discount, a, t, horizon)?, t)?)
}

/// Sophisticated log coefficient `α^S(t) = aθ(T−t) + ∫_t^T θ(s−t) ds`, taken
/// through the quadrature route so it shares no code path with the naive one.
pub fn log_sophisticated_alpha(discount: &DiscountModel, a: f64, t: f64, horizon: f64) -> Result<f64> {
    check_times(t, horizon)?;
    let tau = horizon - t;
    Ok(a * discount.factor_by_quadrature(tau)? + discount.factor_integral_by_quadrature(0.0, tau))
}

pub fn log_sophisticated_consumption(discount: &DiscountModel, a: f64, t: f64, horizon: f64, wealth: f64) -> Result<f64> {
    check_wealth(wealth)?;
    Ok(wealth / positive_denominator(log_sophisticated_alpha(discount, a, t, horizon)?, t)?)
}

fn power_params(market: &MarketModel, gamma: f64, a: f64) -> Result<(f64, f64)> {
    UtilitySpec::power(gamma, a)?;
    let delta = market.delta_p(gamma)?;
    // Terminal value of y = α^{1/(1−γ)}.
    let y_end = a.powf(1.0 / (1.0 - gamma));
    Ok((delta, y_end))
}

/// Power-utility wealth-to-consumption ratio under a constant rate.
pub fn power_constant_ratio(rho: f64, market: &MarketModel, gamma: f64, a: f64, t: f64, horizon: f64) -> Result<f64> {
    check_times(t, horizon)?;
    let (delta, y_end) = power_params(market, gamma, a)?;
    let k = (rho - delta) / (1.0 - gamma);
    positive_denominator(exp_denominator(k, y_end, horizon - t), t)
}

/// `c = W·k e^{k(T−t)} / (k a^{1/(1−γ)} + e^{k(T−t)} − 1)` with
/// `k = (ρ − δ^p)/(1 − γ)`; the `k → 0` limit is `W/(a^{1/(1−γ)} + T − t)`.
#[allow(clippy::too_many_arguments)]
pub fn power_constant_consumption(
    rho: f64,
    market: &MarketModel,
    gamma: f64,
    a: f64,
    t: f64,
    horizon: f64,
    wealth: f64,
) -> Result<f64> {
    check_wealth(wealth)?;
    Ok(wealth / power_constant_ratio(rho, market, gamma, a, t, horizon)?)
}

/// Wealth-to-consumption ratio of the pre-commitment power rule.
pub fn power_precommit_ratio(
    discount: &DiscountModel,
    market: &MarketModel,
    gamma: f64,
    a: f64,
    t: f64,
    horizon: f64,
) -> Result<f64> {
    check_times(t, horizon)?;
    let (delta, y_end) = power_params(market, gamma, a)?;
    let p = 1.0 / (1.0 - gamma);
    let rt = discount.cumulative_rate(t)?;
    let kernel = |s: f64| (p * (delta * (s - t) - (discount.cumulative_rate(s).unwrap() - rt))).exp();
    let den = y_end * kernel(horizon) + quad::integrate(kernel, t, horizon);
    positive_denominator(den, t)
}

/// `c^P = W / (a^{1/(1−γ)}(θ(T)/θ(t)·e^{δ^p(T−t)})^{1/(1−γ)} + ∫_t^T (θ(s)/θ(t)·e^{δ^p(s−t)})^{1/(1−γ)} ds)`.
#[allow(clippy::too_many_arguments)]
pub fn power_precommit_consumption(
    discount: &DiscountModel,
    market: &MarketModel,
    gamma: f64,
    a: f64,
    t: f64,
    horizon: f64,
    wealth: f64,
) -> Result<f64> {
    check_wealth(wealth)?;
    Ok(wealth / power_precommit_ratio(discount, market, gamma, a, t, horizon)?)
}

/// Wealth-to-consumption ratio of the naive power rule.
pub fn power_naive_ratio(
    discount: &DiscountModel,
    market: &MarketModel,
    gamma: f64,
    a: f64,
    t: f64,
    horizon: f64,
) -> Result<f64> {
    check_times(t, horizon)?;
    let (delta, y_end) = power_params(market, gamma, a)?;
    let p = 1.0 / (1.0 - gamma);
    let kernel = |u: f64| (p * (delta * u - discount.cumulative_rate(u).unwrap())).exp();
    let tau = horizon - t;
    let den = y_end * kernel(tau) + quad::integrate(kernel, 0.0, tau);
    positive_denominator(den, t)
}

/// `c^N = W / (a^{1/(1−γ)}(θ(T−t)e^{δ^p(T−t)})^{1/(1−γ)} + ∫_0^{T−t} (θ(u)e^{δ^p u})^{1/(1−γ)} du)`.
#[allow(clippy::too_many_arguments)]
pub fn power_naive_consumption(
    discount: &DiscountModel,
    market: &MarketModel,
    gamma: f64,
    a: f64,
    t: f64,
    horizon: f64,
    wealth: f64,
) -> Result<f64> {
    check_wealth(wealth)?;
    Ok(wealth / power_naive_ratio(discount, market, gamma, a, t, horizon)?)
}

/// Which rate enters the exponential α kernel.
#[derive(Debug, Clone, Copy)]
enum ExpRate<'a> {
    Constant(f64),
    Calendar(&'a DiscountModel),
    Elapsed(&'a DiscountModel),
}

/// `α(t) = −(β(t)/γ) ∫_t^T [δ^e(s) − r̃(s)] e^{−μ0(s−t)}/β(s) ds`, which is the
/// closed form with `e^{−∫_t^s β} = β(t)e^{−μ0(s−t)}/β(s)`.
fn exp_alpha_value(market: &MarketModel, gamma: f64, a: f64, horizon: f64, t: f64, rate: ExpRate) -> Result<f64> {
    check_times(t, horizon)?;
    UtilitySpec::exponential(gamma, a)?;
    let mu0 = market.mu0();
    let half_m = 0.5 * market.excess_quadratic();
    let beta_t = market.beta_exp(t, horizon)?;
    market.beta_exp(0.0, horizon)?;
    let integrand = |s: f64| {
        let beta = beta_remaining(mu0, horizon - s);
        let delta_e = beta - half_m - beta * (a * gamma * beta).ln();
        let r = match rate {
            ExpRate::Constant(rho) => rho,
            ExpRate::Calendar(d) => d.rate_unchecked(s),
            ExpRate::Elapsed(d) => d.rate_unchecked(s - t),
        };
        (delta_e - r) * (-mu0 * (s - t)).exp() / beta
    };
    let res = quad::integrate_with(integrand, t, horizon, 1e-13, 1e-12);
    Ok(-beta_t / gamma * res.value)
}

/// `β` on the grid, straight from the closed form.
pub fn beta_grid(market: &MarketModel, horizon: f64, nodes: usize) -> Result<Curve> {
    let ts = time_grid(horizon, nodes);
    let vs = ts.iter().map(|&t| market.beta_exp(t, horizon)).collect::<Result<Vec<_>>>()?;
    Curve::new(ts, vs)
}

fn exp_alpha_grid(market: &MarketModel, gamma: f64, a: f64, horizon: f64, nodes: usize, rate: ExpRate) -> Result<Curve> {
    let ts = time_grid(horizon, nodes);
    let mut vs = ts
        .iter()
        .map(|&t| exp_alpha_value(market, gamma, a, horizon, t, rate))
        .collect::<Result<Vec<_>>>()?;
    *vs.last_mut().unwrap() = 0.0;
    Curve::new(ts, vs)
}

/// `(α, β)` for exponential utility with a constant rate ρ.
pub fn exp_constant_coeffs(rho: f64, market: &MarketModel, gamma: f64, a: f64, horizon: f64, nodes: usize) -> Result<(Curve, Curve)> {
    Ok((
        exp_alpha_grid(market, gamma, a, horizon, nodes, ExpRate::Constant(rho))?,
        beta_grid(market, horizon, nodes)?,
    ))
}

/// Pre-commitment `α^P`: the constant-rate kernel with `ρ → r(s)`.
pub fn exp_precommit_alpha(discount: &DiscountModel, market: &MarketModel, gamma: f64, a: f64, horizon: f64, nodes: usize) -> Result<Curve> {
    exp_alpha_grid(market, gamma, a, horizon, nodes, ExpRate::Calendar(discount))
}

/// Naive `α^N`: the kernel with `ρ → r(s − t)`.
pub fn exp_naive_alpha(discount: &DiscountModel, market: &MarketModel, gamma: f64, a: f64, horizon: f64, nodes: usize) -> Result<Curve> {
    exp_alpha_grid(market, gamma, a, horizon, nodes, ExpRate::Elapsed(discount))
}

/// Pointwise `α^P(t)`, `α^N(t)` or constant-rate `α(t)` without a grid.
pub fn exp_alpha_at(problem_rate: ExpAgent, market: &MarketModel, gamma: f64, a: f64, horizon: f64, t: f64) -> Result<f64> {
    let rate = match problem_rate {
        ExpAgent::Constant(rho) => ExpRate::Constant(rho),
        ExpAgent::PreCommitment(d) => ExpRate::Calendar(d),
        ExpAgent::Naive(d) => ExpRate::Elapsed(d),
    };
    exp_alpha_value(market, gamma, a, horizon, t, rate)
}

#[derive(Debug, Clone, Copy)]
pub enum ExpAgent<'a> {
    Constant(f64),
    PreCommitment(&'a DiscountModel),
    Naive(&'a DiscountModel),
}

/// Consumption prescribed by a policy at `(W, t)`.
pub fn consumption_from_policy(policy: &Policy, wealth: f64, t: f64) -> Result<f64> {
    policy.consumption(wealth, t)
}

fn curve_from<F: Fn(f64) -> Result<f64>>(horizon: f64, nodes: usize, f: F) -> Result<Curve> {
    let ts = time_grid(horizon, nodes);
    let vs = ts.iter().map(|&t| f(t)).collect::<Result<Vec<_>>>()?;
    Curve::new(ts, vs)
}

/// The default constant rate used for a Merton baseline: the initial rate `r(0)`.
pub fn baseline_rate(discount: &DiscountModel) -> f64 {
    discount.rate_unchecked(0.0)
}

/// Builds a closed-form policy. Power and exponential sophisticated agents
/// need the fixed-point solver and are rejected here.
pub fn closed_form_policy(problem: &Problem, agent: AgentKind, nodes: usize) -> Result<Policy> {
    problem.validate()?;
    if nodes < 2 {
        return Err(Error::invalid("solver.time_nodes", "at least two nodes are required"));
    }
    let (d, m, horizon) = (&problem.discount, &problem.market, problem.horizon);
    let coeff = portfolio_coeff(&problem.utility, m);
    match problem.utility {
        UtilitySpec::Log { a } => {
            let alpha = match agent {
                AgentKind::ConstantRate(rho) => curve_from(horizon, nodes, |t| log_constant_alpha(rho, a, t, horizon))?,
                AgentKind::PreCommitment => curve_from(horizon, nodes, |t| log_precommit_alpha(d, a, t, horizon))?,
                AgentKind::Naive => curve_from(horizon, nodes, |t| log_naive_alpha(d, a, t, horizon))?,
                AgentKind::Sophisticated => curve_from(horizon, nodes, |t| log_sophisticated_alpha(d, a, t, horizon))?,
            };
            Policy::new(problem.utility, agent, horizon, alpha, None, coeff)
        }
        UtilitySpec::Power { gamma, a } => {
            // Stored coefficient α = (W/c)^{1−γ}; with a = 0 the terminal ratio is 0.
            let to_alpha = |ratio: Result<f64>, t: f64| -> Result<f64> {
                match ratio {
                    Ok(r) => Ok(r.powf(1.0 - gamma)),
                    Err(Error::BoundarySingularity { .. }) if t == horizon => Ok(0.0),
                    Err(e) => Err(e),
                }
            };
            let alpha = match agent {
                AgentKind::ConstantRate(rho) => curve_from(horizon, nodes, |t| {
                    to_alpha(power_constant_ratio(rho, m, gamma, a, t, horizon), t)
                })?,
                AgentKind::PreCommitment => curve_from(horizon, nodes, |t| {
                    to_alpha(power_precommit_ratio(d, m, gamma, a, t, horizon), t)
                })?,
                AgentKind::Naive => {
                    curve_from(horizon, nodes, |t| to_alpha(power_naive_ratio(d, m, gamma, a, t, horizon), t))?
                }
                AgentKind::Sophisticated => {
                    return Err(Error::Unsupported(
                        "power sophisticated policies come from the fixed-point solver".into(),
                    ))
                }
            };
            Policy::new(problem.utility, agent, horizon, alpha, None, coeff)
        }
        UtilitySpec::Exponential { gamma, a } => {
            let alpha = match agent {
                AgentKind::ConstantRate(rho) => exp_constant_coeffs(rho, m, gamma, a, horizon, nodes)?.0,
                AgentKind::PreCommitment => exp_precommit_alpha(d, m, gamma, a, horizon, nodes)?,
                AgentKind::Naive => exp_naive_alpha(d, m, gamma, a, horizon, nodes)?,
                AgentKind::Sophisticated => {
                    return Err(Error::Unsupported(
                        "exponential sophisticated policies come from the fixed-point solver".into(),
                    ))
                }
            };
            let beta = beta_grid(m, horizon, nodes)?;
            Policy::new(problem.utility, agent, horizon, alpha, Some(beta), coeff)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mixture() -> DiscountModel {
        DiscountModel::mixture(vec![0.5, 0.5], vec![0.05, 0.15]).unwrap()
    }

    fn market() -> MarketModel {
        MarketModel::single(0.03, 0.08, 0.2).unwrap()
    }

    fn exp_market() -> MarketModel {
        MarketModel::single(0.05, 0.10, 0.2).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn portfolio_examples() {
        let m = market();
        let w = portfolio_rule(&UtilitySpec::log(0.0).unwrap(), &m, 0.0, 1.0, 10.0).unwrap();
        assert!((w[0] - 1.25).abs() < 1e-12);
        let w = portfolio_rule(&UtilitySpec::power(0.5, 1.0).unwrap(), &m, 0.0, 1.0, 10.0).unwrap();
        assert!((w[0] - 2.5).abs() < 1e-12);
        let em = MarketModel::single(0.05, 0.10, 0.2).unwrap();
        let u = UtilitySpec::exponential(1.0, 2.0).unwrap();
        let w = portfolio_rule(&u, &em, 0.0, 1.0, 10.0).unwrap();
        assert!((w[0] - 0.240_830_116_8).abs() < 1e-9);
        assert!(matches!(portfolio_rule(&u, &em, 0.0, 1.0, 0.0), Err(Error::DivisionByZero(_))));
    }

    #[test]
    fn log_constant_examples() {
        let alpha = log_constant_alpha(0.1, 0.0, 0.0, 1.0).unwrap();
        assert!((alpha - 0.951_625_819_6).abs() < 1e-10);
        assert!((1.0 / alpha - 1.050_833_194_5).abs() < 1e-9);
        for t in [0.0, 0.3, 1.0] {
            assert!((log_constant_alpha(0.1, 10.0, t, 1.0).unwrap() - 10.0).abs() < 1e-13);
        }
        assert!((log_constant_alpha(0.1, 3.0, 1.0, 1.0).unwrap() - 3.0).abs() < 1e-15);
        assert!((log_constant_alpha(0.0, 0.5, 0.25, 1.0).unwrap() - 1.25).abs() < 1e-15);
    }

    #[test]
    fn log_mixture_examples() {
        let d = mixture();
        let c = log_precommit_consumption(&d, 0.0, 0.0, 10.0, 1.0).unwrap();
        assert!((c - 0.153_274_098_7).abs() < 1e-10);
        assert_eq!(c, log_naive_consumption(&d, 0.0, 0.0, 10.0, 1.0).unwrap());
        let cn = log_naive_consumption(&d, 0.0, 5.0, 10.0, 1.0).unwrap();
        assert!((cn - 0.251_840_302_4).abs() < 1e-10);
        let cs = log_sophisticated_consumption(&d, 0.0, 5.0, 10.0, 1.0).unwrap();
        assert!((cs - cn).abs() < 1e-10);
        assert!(matches!(
            log_naive_consumption(&d, 0.0, 10.0, 10.0, 1.0),
            Err(Error::BoundarySingularity { .. })
        ));
        assert!(matches!(
            log_precommit_consumption(&d, 0.0, 10.0, 10.0, 1.0),
            Err(Error::BoundarySingularity { .. })
        ));
    }

    #[test]
    fn log_constant_reduction() {
        let d = DiscountModel::constant(0.1).unwrap();
        for a in [0.0, 1.0, 10.0] {
            for k in 0..100 {
                let t = k as f64 / 100.0;
                let merton = 1.0 / log_constant_alpha(0.1, a, t, 1.0).unwrap();
                assert!(rel(log_precommit_consumption(&d, a, t, 1.0, 1.0).unwrap(), merton) < 1e-12);
                assert!(rel(log_naive_consumption(&d, a, t, 1.0, 1.0).unwrap(), merton) < 1e-12);
                assert!(rel(log_sophisticated_consumption(&d, a, t, 1.0, 1.0).unwrap(), merton) < 1e-10);
            }
        }
    }

    #[test]
    fn power_constant_examples() {
        let m = market();
        let (gamma, a) = (0.5, 1.0);
        let delta = m.delta_p(gamma).unwrap();
        // Terminal value.
        let c = power_constant_consumption(0.1, &m, gamma, 4.0, 2.0, 2.0, 10.0).unwrap();
        assert!((c - 10.0 * 4f64.powf(-2.0)).abs() < 1e-14);
        // Continuity across ρ = δ^p.
        let mid = power_constant_consumption(delta, &m, gamma, a, 0.0, 5.0, 1.0).unwrap();
        assert!((mid - 1.0 / (1.0 + 5.0)).abs() < 1e-14);
        let lo = power_constant_consumption(delta - 1e-6, &m, gamma, a, 0.0, 5.0, 1.0).unwrap();
        let hi = power_constant_consumption(delta + 1e-6, &m, gamma, a, 0.0, 5.0, 1.0).unwrap();
        assert!(lo < mid && mid < hi);
        assert!(rel(0.5 * (lo + hi), mid) < 1e-9);
        // Small-γ limit approaches log utility.
        let cp = power_constant_consumption(0.1, &m, 1e-4, 1.0, 0.0, 1.0, 1.0).unwrap();
        let cl = 1.0 / log_constant_alpha(0.1, 1.0, 0.0, 1.0).unwrap();
        assert!(rel(cp, cl) < 1e-3);
        assert!(matches!(
            power_constant_consumption(0.1, &m, gamma, 0.0, 1.0, 1.0, 1.0),
            Err(Error::BoundarySingularity { .. })
        ));
    }

    #[test]
    fn power_reductions() {
        let m = market();
        let d = DiscountModel::constant(0.1).unwrap();
        for gamma in [0.5, -1.0] {
            for k in 0..=20 {
                let t = k as f64 * 0.5;
                let merton = power_constant_consumption(0.1, &m, gamma, 1.0, t, 10.0, 1.0).unwrap();
                let p = power_precommit_consumption(&d, &m, gamma, 1.0, t, 10.0, 1.0).unwrap();
                let n = power_naive_consumption(&d, &m, gamma, 1.0, t, 10.0, 1.0).unwrap();
                assert!(rel(p, merton) < 1e-10, "gamma={gamma} t={t}");
                assert!(rel(n, merton) < 1e-10);
            }
        }
        let mx = mixture();
        let p0 = power_precommit_consumption(&mx, &m, 0.5, 1.0, 0.0, 10.0, 1.0).unwrap();
        let n0 = power_naive_consumption(&mx, &m, 0.5, 1.0, 0.0, 10.0, 1.0).unwrap();
        assert!(rel(p0, n0) < 1e-12);
        let small = power_naive_consumption(&mx, &m, 1e-4, 1.0, 3.0, 10.0, 1.0).unwrap();
        let log = log_naive_consumption(&mx, 1.0, 3.0, 10.0, 1.0).unwrap();
        assert!(rel(small, log) < 1e-3);
        assert!(power_naive_consumption(&mx, &m, 0.5, 0.0, 10.0, 10.0, 1.0).is_err());
    }

    #[test]
    fn exp_constant_boundary_and_zero_integrand() {
        let m = exp_market();
        let (alpha, beta) = exp_constant_coeffs(0.1, &m, 1.0, 2.0, 1.0, 101).unwrap();
        assert_eq!(alpha.eval(1.0).unwrap(), 0.0);
        assert_eq!(beta.eval(1.0).unwrap(), 1.0);
        assert!((beta.eval(0.0).unwrap() - 0.519_038_074_038_721).abs() < 1e-14);
        // δ^e ≡ ρ: a riskless market with μ0 = 1 gives β ≡ 1, δ^e = 1 − ln(aγ).
        let flat = MarketModel::new(1.0, vec![1.0], vec![vec![0.0]]).unwrap();
        let rho = 1.0 - (2.0f64).ln();
        let (alpha, _) = exp_constant_coeffs(rho, &flat, 1.0, 2.0, 1.0, 51).unwrap();
        assert!(alpha.values().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn exp_constant_solves_backward_ode() {
        let m = exp_market();
        let (gamma, a, rho, horizon) = (1.0, 2.0, 0.1, 1.0);
        let grid: Vec<f64> = time_grid(horizon, 1001).into_iter().rev().collect();
        let ode = crate::ode::solve_on_grid(
            |t, y| {
                let beta = m.beta_exp(t.clamp(0.0, horizon), horizon).unwrap();
                let de = m.delta_e(gamma, a, t.clamp(0.0, horizon), horizon).unwrap();
                beta * y + (de - rho) / gamma
            },
            &grid,
            0.0,
            1e-12,
        )
        .unwrap();
        let (alpha, _) = exp_constant_coeffs(rho, &m, gamma, a, horizon, 1001).unwrap();
        for (t, y) in grid.iter().zip(ode) {
            assert!((alpha.eval(*t).unwrap() - y).abs() < 1e-8);
        }
    }

    #[test]
    fn exp_precommit_and_naive() {
        let m = exp_market();
        let d = DiscountModel::constant(0.1).unwrap();
        let (base, _) = exp_constant_coeffs(0.1, &m, 1.0, 2.0, 1.0, 101).unwrap();
        let p = exp_precommit_alpha(&d, &m, 1.0, 2.0, 1.0, 101).unwrap();
        let n = exp_naive_alpha(&d, &m, 1.0, 2.0, 1.0, 101).unwrap();
        for k in 0..101 {
            assert!((p.values()[k] - base.values()[k]).abs() < 1e-13);
            assert!((n.values()[k] - base.values()[k]).abs() < 1e-13);
        }
        let b = DiscountModel::barro(0.05, 0.05, 1.0).unwrap();
        let p0 = exp_alpha_at(ExpAgent::PreCommitment(&b), &m, 1.0, 2.0, 1.0, 0.0).unwrap();
        let n0 = exp_alpha_at(ExpAgent::Naive(&b), &m, 1.0, 2.0, 1.0, 0.0).unwrap();
        assert_eq!(p0, n0);
        let h = 1e-5;
        let dp = (exp_alpha_at(ExpAgent::PreCommitment(&b), &m, 1.0, 2.0, 1.0, h).unwrap() - p0) / h;
        let dn = (exp_alpha_at(ExpAgent::Naive(&b), &m, 1.0, 2.0, 1.0, h).unwrap() - n0) / h;
        assert!(dp <= dn);
    }

    #[test]
    fn exp_precommit_vanishes_when_rate_tracks_delta_e() {
        let m = exp_market();
        let (gamma, a, horizon) = (1.0, 2.0, 1.0);
        let ts = time_grid(horizon, 4001);
        let rates: Vec<f64> = ts.iter().map(|&s| m.delta_e(gamma, a, s, horizon).unwrap()).collect();
        let d = DiscountModel::tabulated(ts, rates).unwrap();
        let alpha = exp_precommit_alpha(&d, &m, gamma, a, horizon, 21).unwrap();
        assert!(alpha.values().iter().all(|v| v.abs() < 1e-7), "{:?}", alpha.values());
    }

    #[test]
    fn consumption_from_policy_examples() {
        let grid = vec![0.0, 1.0];
        let log = Policy::new(
            UtilitySpec::log(0.0).unwrap(),
            AgentKind::Naive,
            1.0,
            Curve::new(grid.clone(), vec![2.0, 2.0]).unwrap(),
            None,
            vec![1.25],
        )
        .unwrap();
        assert_eq!(consumption_from_policy(&log, 10.0, 0.5).unwrap(), 5.0);
        assert!(log.consumption(10.0, 1.5).is_err());
        let pow = Policy::new(
            UtilitySpec::power(0.5, 1.0).unwrap(),
            AgentKind::Naive,
            1.0,
            Curve::new(grid.clone(), vec![4.0, 4.0]).unwrap(),
            None,
            vec![2.5],
        )
        .unwrap();
        assert!((pow.consumption(10.0, 0.2).unwrap() - 0.625).abs() < 1e-15);
        let exp = Policy::new(
            UtilitySpec::exponential(1.0, 1.0).unwrap(),
            AgentKind::Naive,
            1.0,
            Curve::new(grid.clone(), vec![0.0, 0.0]).unwrap(),
            Some(Curve::new(grid, vec![1.0, 1.0]).unwrap()),
            vec![1.25],
        )
        .unwrap();
        assert_eq!(exp.consumption(10.0, 0.7).unwrap(), 10.0);
        assert_eq!(exp.consumption(-3.0, 0.7).unwrap(), -3.0);
    }

    #[test]
    fn policy_json_round_trip() {
        let problem = Problem::new(mixture(), market(), UtilitySpec::log(1.0).unwrap(), 10.0, 1.0).unwrap();
        let p = closed_form_policy(&problem, AgentKind::PreCommitment, 101).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        let back: Policy = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        for t in [0.0, 0.033, 4.5, 9.99] {
            assert_eq!(back.consumption(2.0, t).unwrap(), p.consumption(2.0, t).unwrap());
        }
        let agent: AgentKind = serde_json::from_str(r#"{"constant_rate":0.1}"#).unwrap();
        assert_eq!(agent, AgentKind::ConstantRate(0.1));
        assert_eq!(serde_json::to_string(&AgentKind::PreCommitment).unwrap(), "\"precommitment\"");
    }

    #[test]
    fn closed_policy_grids_match_pointwise_formulas() {
        let problem = Problem::new(mixture(), market(), UtilitySpec::power(0.5, 1.0).unwrap(), 10.0, 1.0).unwrap();
        let p = closed_form_policy(&problem, AgentKind::Naive, 101).unwrap();
        for t in [0.0, 2.0, 7.3, 10.0] {
            let direct = power_naive_consumption(&problem.discount, &problem.market, 0.5, 1.0, t, 10.0, 3.0).unwrap();
            assert!(rel(p.consumption(3.0, t).unwrap(), direct) < 1e-8);
        }
        assert!(closed_form_policy(&problem, AgentKind::Sophisticated, 101).is_err());
    }

    proptest! {
        #[test]
        fn log_overconsumption(w in 0.05..0.95f64, r1 in 0.01..0.3f64, r2 in 0.01..0.3f64,
                               a in 0.0..20.0f64, t in 0.0..9.9f64) {
            let d = DiscountModel::mixture(vec![w, 1.0 - w], vec![r1, r2]).unwrap();
            let cp = log_precommit_consumption(&d, a, t, 10.0, 1.0).unwrap();
            let cn = log_naive_consumption(&d, a, t, 10.0, 1.0).unwrap();
            prop_assert!(cp <= cn * (1.0 + 1e-12));
        }

        #[test]
        fn portfolio_ignores_discount_and_agent(gamma in -2.0..0.9f64, rho in 0.0..0.3f64) {
            prop_assume!(gamma.abs() > 1e-3);
            let m = market();
            let u = UtilitySpec::power(gamma, 1.0).unwrap();
            let mut seen = Vec::new();
            for d in [DiscountModel::constant(rho).unwrap(), mixture()] {
                let problem = Problem::new(d, m.clone(), u, 2.0, 1.0).unwrap();
                for agent in [AgentKind::ConstantRate(rho), AgentKind::PreCommitment, AgentKind::Naive] {
                    let p = closed_form_policy(&problem, agent, 11).unwrap();
                    seen.push(p.weights(1.0, 0.5).unwrap());
                }
            }
            prop_assert!(seen.windows(2).all(|w| w[0] == w[1]));
        }
    }
}
