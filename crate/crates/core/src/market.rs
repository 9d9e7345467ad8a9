//! Market primitives and utility specifications.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSpec {
    pub mu0: f64,
    pub mu: Vec<f64>,
    pub sigma_bar: Vec<Vec<f64>>,
}

/// Constant-coefficient market with `m` risky assets driven by `L` Brownian
/// motions. The covariance, Merton ratio and `M` are computed once.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "MarketSpec", into = "MarketSpec")]
pub struct MarketModel {
    spec: MarketSpec,
    sigma_bar: DMatrix<f64>,
    sigma: DMatrix<f64>,
    excess: Vec<f64>,
    ratio: Vec<f64>,
    quadratic: f64,
    riskless: bool,
}

impl PartialEq for MarketModel {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
    }
}

impl TryFrom<MarketSpec> for MarketModel {
    type Error = Error;
    fn try_from(spec: MarketSpec) -> Result<Self> {
        MarketModel::from_spec(spec)
    }
}

impl From<MarketModel> for MarketSpec {
    fn from(m: MarketModel) -> Self {
        m.spec
    }
}

impl MarketModel {
    /// `sigma_bar` is given row-wise, one row of `L` loadings per asset.
    pub fn new(mu0: f64, mu: Vec<f64>, sigma_bar: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_spec(MarketSpec { mu0, mu, sigma_bar })
    }

    /// One risky asset with volatility `sigma`.
    pub fn single(mu0: f64, mu: f64, sigma: f64) -> Result<Self> {
        Self::new(mu0, vec![mu], vec![vec![sigma]])
    }

    pub fn from_spec(spec: MarketSpec) -> Result<Self> {
        let m = spec.mu.len();
        if m == 0 {
            return Err(Error::invalid("market.mu", "at least one risky asset is required"));
        }
        if !spec.mu0.is_finite() {
            return Err(Error::invalid("market.mu0", "must be finite"));
        }
        if spec.mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("market.mu", "entries must be finite"));
        }
        if spec.sigma_bar.len() != m {
            return Err(Error::invalid("market.sigma_bar", format!("must have {m} rows, one per asset")));
        }
        let l = spec.sigma_bar[0].len();
        if l == 0 || spec.sigma_bar.iter().any(|row| row.len() != l) {
            return Err(Error::invalid("market.sigma_bar", "rows must share a positive length"));
        }
        if spec.sigma_bar.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("market.sigma_bar", "entries must be finite"));
        }
        let sigma_bar = DMatrix::from_fn(m, l, |i, k| spec.sigma_bar[i][k]);
        let sigma = &sigma_bar * sigma_bar.transpose();
        let excess: Vec<f64> = spec.mu.iter().map(|v| v - spec.mu0).collect();

        // A diffusion-free market is admitted only without excess return, where
        // the portfolio problem is void and every risky exposure is zero.
        if sigma_bar.iter().all(|v| *v == 0.0) && excess.iter().all(|e| *e == 0.0) {
            return Ok(MarketModel {
                spec,
                sigma_bar,
                sigma,
                ratio: vec![0.0; m],
                excess,
                quadratic: 0.0,
                riskless: true,
            });
        }

        if (0..m).any(|i| sigma[(i, i)] <= 0.0) {
            return Err(Error::NotPositiveDefinite);
        }
        let chol = Cholesky::new(sigma.clone()).ok_or(Error::NotPositiveDefinite)?;
        let eig = SymmetricEigen::new(sigma.clone());
        let lo = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        if lo <= 0.0 {
            return Err(Error::NotPositiveDefinite);
        }
        let condition = hi / lo;
        if condition > MAX_CONDITION {
            return Err(Error::IllConditionedMarket { condition });
        }
        let ratio_vec = chol.solve(&DVector::from_column_slice(&excess));
        let ratio: Vec<f64> = ratio_vec.iter().copied().collect();
        let quadratic = excess.iter().zip(&ratio).map(|(e, r)| e * r).sum::<f64>().max(0.0);
        Ok(MarketModel {
            spec,
            sigma_bar,
            sigma,
            excess,
            ratio,
            quadratic,
            riskless: false,
        })
    }

    pub fn mu0(&self) -> f64 {
        self.spec.mu0
    }

    pub fn mu(&self) -> &[f64] {
        &self.spec.mu
    }

    /// Number of risky assets `m`.
    pub fn assets(&self) -> usize {
        self.spec.mu.len()
    }

    /// Number of Brownian drivers `L`.
    pub fn noises(&self) -> usize {
        self.sigma_bar.ncols()
    }

    pub fn sigma_bar(&self) -> &DMatrix<f64> {
        &self.sigma_bar
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn is_riskless(&self) -> bool {
        self.riskless
    }

    /// `μ − μ0·1`.
    pub fn excess(&self) -> &[f64] {
        &self.excess
    }

    /// `Σ⁻¹(μ − μ0·1)`.
    pub fn merton_ratio(&self) -> &[f64] {
        &self.ratio
    }

    /// `M = (μ − μ0·1)ᵀ Σ⁻¹ (μ − μ0·1)`.
    pub fn excess_quadratic(&self) -> f64 {
        self.quadratic
    }

    /// Excess drift `xᵀ(μ − μ0·1)` of a dollar exposure vector `x`.
    pub fn excess_drift(&self, exposure: &[f64]) -> f64 {
        exposure.iter().zip(&self.excess).map(|(x, e)| x * e).sum()
    }

    /// Loadings `Σ̄ᵀx` of a dollar exposure on the Brownian drivers.
    pub fn loadings(&self, exposure: &[f64]) -> Vec<f64> {
        (0..self.noises())
            .map(|k| (0..self.assets()).map(|i| exposure[i] * self.sigma_bar[(i, k)]).sum())
            .collect()
    }

    /// `δ^p = μ0γ + ½·γ/(1−γ)·M`.
    pub fn delta_p(&self, gamma: f64) -> Result<f64> {
        check_power_gamma(gamma)?;
        Ok(self.spec.mu0 * gamma + 0.5 * gamma / (1.0 - gamma) * self.quadratic)
    }

    /// `β(t) = μ0 / (1 + (μ0 − 1)e^{−μ0(T−t)})`, evaluated through its
    /// reciprocal `e^{−μ0τ} + (1 − e^{−μ0τ})/μ0`, which is smooth at μ0 = 0.
    pub fn beta_exp(&self, t: f64, horizon: f64) -> Result<f64> {
        if !(0.0..=horizon).contains(&t) {
            return Err(Error::domain(format!("t = {t} lies outside [0, {horizon}]")));
        }
        let beta = beta_remaining(self.spec.mu0, horizon - t);
        if !beta.is_finite() || beta <= 0.0 {
            return Err(Error::SingularBeta {
                blowup_time: horizon - t,
            });
        }
        Ok(beta)
    }

    /// `δ^e(t) = β − ½M − β·ln(aγβ)`.
    pub fn delta_e(&self, gamma: f64, a: f64, t: f64, horizon: f64) -> Result<f64> {
        let beta = self.beta_exp(t, horizon)?;
        let arg = a * gamma * beta;
        if !(arg > 0.0) {
            return Err(Error::domain(format!("ln(aγβ) needs a positive argument, got {arg}")));
        }
        Ok(beta - 0.5 * self.quadratic - beta * arg.ln())
    }
}

/// `β` as a function of remaining time `τ = T − t`.
pub(crate) fn beta_remaining(mu0: f64, tau: f64) -> f64 {
    let x = mu0 * tau;
    let tail = if x.abs() < 1e-12 { tau * (1.0 - 0.5 * x) } else { -(-x).exp_m1() / mu0 };
    1.0 / ((-x).exp() + tail)
}

fn check_power_gamma(gamma: f64) -> Result<()> {
    if !gamma.is_finite() || gamma >= 1.0 || gamma == 0.0 {
        return Err(Error::invalid("utility.gamma", format!("power utility needs gamma < 1 and gamma != 0, got {gamma}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum UtilityWire {
    Log {
        #[serde(default)]
        a: f64,
    },
    Power {
        gamma: f64,
        #[serde(default)]
        a: f64,
    },
    Exponential {
        gamma: f64,
        a: f64,
    },
}

/// Utility family with bequest weight `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "UtilityWire", into = "UtilityWire")]
pub enum UtilitySpec {
    /// `u = ln c`, `F = a ln W`.
    Log { a: f64 },
    /// `u = c^γ/γ`, `F = a W^γ/γ`.
    Power { gamma: f64, a: f64 },
    /// `u = −e^{−γc}/γ`, `F = −a e^{−γW}`.
    Exponential { gamma: f64, a: f64 },
}

impl TryFrom<UtilityWire> for UtilitySpec {
    type Error = Error;
    fn try_from(w: UtilityWire) -> Result<Self> {
        let u = match w {
            UtilityWire::Log { a } => UtilitySpec::Log { a },
            UtilityWire::Power { gamma, a } => UtilitySpec::Power { gamma, a },
            UtilityWire::Exponential { gamma, a } => UtilitySpec::Exponential { gamma, a },
        };
        u.validate()?;
        Ok(u)
    }
}

impl From<UtilitySpec> for UtilityWire {
    fn from(u: UtilitySpec) -> Self {
        match u {
            UtilitySpec::Log { a } => UtilityWire::Log { a },
            UtilitySpec::Power { gamma, a } => UtilityWire::Power { gamma, a },
            UtilitySpec::Exponential { gamma, a } => UtilityWire::Exponential { gamma, a },
        }
    }
}

impl UtilitySpec {
    pub fn log(a: f64) -> Result<Self> {
        let u = UtilitySpec::Log { a };
        u.validate()?;
        Ok(u)
    }

    pub fn power(gamma: f64, a: f64) -> Result<Self> {
        let u = UtilitySpec::Power { gamma, a };
        u.validate()?;
        Ok(u)
    }

    pub fn exponential(gamma: f64, a: f64) -> Result<Self> {
        let u = UtilitySpec::Exponential { gamma, a };
        u.validate()?;
        Ok(u)
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.bequest_weight();
        match *self {
            UtilitySpec::Log { .. } | UtilitySpec::Power { .. } => {
                if !a.is_finite() || a < 0.0 {
                    return Err(Error::invalid("utility.a", format!("bequest weight must be >= 0, got {a}")));
                }
                if let UtilitySpec::Power { gamma, .. } = *self {
                    check_power_gamma(gamma)?;
                }
            }
            UtilitySpec::Exponential { gamma, .. } => {
                if !gamma.is_finite() || gamma <= 0.0 {
                    return Err(Error::invalid("utility.gamma", format!("exponential utility needs gamma > 0, got {gamma}")));
                }
                if !a.is_finite() || a <= 0.0 {
                    return Err(Error::invalid("utility.a", format!("exponential utility needs a > 0, got {a}")));
                }
            }
        }
        Ok(())
    }

    pub fn bequest_weight(&self) -> f64 {
        match *self {
            UtilitySpec::Log { a } | UtilitySpec::Power { a, .. } | UtilitySpec::Exponential { a, .. } => a,
        }
    }

    pub fn gamma(&self) -> Option<f64> {
        match *self {
            UtilitySpec::Log { .. } => None,
            UtilitySpec::Power { gamma, .. } | UtilitySpec::Exponential { gamma, .. } => Some(gamma),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            UtilitySpec::Log { .. } => "log",
            UtilitySpec::Power { .. } => "power",
            UtilitySpec::Exponential { .. } => "exponential",
        }
    }

    /// Consumption proportional to wealth (log and power).
    pub fn is_crra(&self) -> bool {
        !matches!(self, UtilitySpec::Exponential { .. })
    }

    /// Instantaneous utility `u(c)`; `-inf` outside the domain.
    pub fn utility(&self, c: f64) -> f64 {
        match *self {
            UtilitySpec::Log { .. } => {
                if c > 0.0 {
                    c.ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            UtilitySpec::Power { gamma, .. } => {
                if c > 0.0 {
                    c.powf(gamma) / gamma
                } else {
                    f64::NEG_INFINITY
                }
            }
            UtilitySpec::Exponential { gamma, .. } => -(-gamma * c).exp() / gamma,
        }
    }

    /// Terminal utility `F(W)`.
    pub fn bequest(&self, w: f64) -> f64 {
        match *self {
            UtilitySpec::Log { a } => {
                if a == 0.0 {
                    0.0
                } else if w > 0.0 {
                    a * w.ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            UtilitySpec::Power { gamma, a } => {
                if a == 0.0 {
                    0.0
                } else if w > 0.0 {
                    a * w.powf(gamma) / gamma
                } else {
                    f64::NEG_INFINITY
                }
            }
            UtilitySpec::Exponential { gamma, a } => -a * (-gamma * w).exp(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture() -> MarketModel {
        MarketModel::single(0.03, 0.08, 0.2).unwrap()
    }

    #[test]
    fn merton_ratio_examples() {
        let m = fixture();
        assert!((m.merton_ratio()[0] - 1.25).abs() < 1e-12);
        let id = MarketModel::new(0.03, vec![0.08, 0.05], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((id.merton_ratio()[0] - 0.05).abs() < 1e-15);
        assert!((id.merton_ratio()[1] - 0.02).abs() < 1e-15);
        let flat = MarketModel::single(0.03, 0.03, 0.2).unwrap();
        assert_eq!(flat.merton_ratio(), &[0.0]);
    }

    #[test]
    fn excess_quadratic_examples() {
        assert!((fixture().excess_quadratic() - 0.0625).abs() < 1e-12);
        let id = MarketModel::new(0.03, vec![0.08, 0.05], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((id.excess_quadratic() - 0.0029).abs() < 1e-15);
        assert_eq!(MarketModel::single(0.03, 0.03, 0.2).unwrap().excess_quadratic(), 0.0);
    }

    #[test]
    fn delta_p_examples() {
        let m = fixture();
        assert!((m.delta_p(0.5).unwrap() - 0.04625).abs() < 1e-15);
        assert!((m.delta_p(-1.0).unwrap() + 0.045625).abs() < 1e-15);
        let zero = MarketModel::single(0.0, 0.0, 0.2).unwrap();
        assert_eq!(zero.delta_p(0.3).unwrap(), 0.0);
        assert!(m.delta_p(1.0).is_err());
        assert!(m.delta_p(0.0).is_err());
    }

    #[test]
    fn beta_examples() {
        let m = MarketModel::single(0.05, 0.10, 0.2).unwrap();
        assert_eq!(m.beta_exp(1.0, 1.0).unwrap(), 1.0);
        assert!((m.beta_exp(0.0, 1.0).unwrap() - 0.519_038_074_038_721).abs() < 1e-14);
        let one = MarketModel::single(1.0, 1.05, 0.2).unwrap();
        for t in [0.0, 3.0, 9.5] {
            assert!((one.beta_exp(t, 10.0).unwrap() - 1.0).abs() < 1e-15);
        }
        let zero = MarketModel::single(0.0, 0.05, 0.2).unwrap();
        assert!((zero.beta_exp(0.0, 4.0).unwrap() - 0.2).abs() < 1e-15);
        assert!(m.beta_exp(2.0, 1.0).is_err());
    }

    #[test]
    fn beta_solves_riccati_backward() {
        let m = MarketModel::single(0.05, 0.10, 0.2).unwrap();
        let horizon = 1.0;
        let grid: Vec<f64> = (0..=1000).rev().map(|k| k as f64 / 1000.0).collect();
        let mu0 = m.mu0();
        let ys = crate::ode::solve_on_grid(|_, b| b * b - mu0 * b, &grid, 1.0, 1e-12).unwrap();
        for (t, y) in grid.iter().zip(ys) {
            assert!((y - m.beta_exp(*t, horizon).unwrap()).abs() < 1e-8);
        }
    }

    #[test]
    fn delta_e_examples() {
        let m0 = MarketModel::single(0.05, 0.05, 0.2).unwrap();
        assert!((m0.delta_e(1.0, 1.0, 1.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
        let m = MarketModel::single(0.05, 0.10, 0.2).unwrap();
        assert!((m.delta_e(1.0, 1.0, 1.0, 1.0).unwrap() - 0.96875).abs() < 1e-15);
        assert!((m.delta_e(1.0, 2.0, 0.0, 1.0).unwrap() - 0.468_392_066_3).abs() < 1e-9);
        assert!(m.delta_e(1.0, -2.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn rejects_bad_covariance() {
        assert_eq!(
            MarketModel::new(0.03, vec![0.08, 0.05], vec![vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap_err(),
            Error::NotPositiveDefinite
        );
        let e = MarketModel::new(0.03, vec![0.08, 0.05], vec![vec![1.0, 0.0], vec![1.0, 1e-7]]).unwrap_err();
        assert!(matches!(e, Error::IllConditionedMarket { .. }));
        assert!(MarketModel::new(0.03, vec![0.08], vec![vec![0.0]]).is_err());
        let riskless = MarketModel::new(0.03, vec![0.03], vec![vec![0.0]]).unwrap();
        assert!(riskless.is_riskless());
        assert_eq!(riskless.merton_ratio(), &[0.0]);
    }

    #[test]
    fn utility_validation() {
        assert!(UtilitySpec::power(1.0, 1.0).is_err());
        assert!(UtilitySpec::power(0.0, 1.0).is_err());
        assert!(UtilitySpec::exponential(1.0, 0.0).is_err());
        assert!(UtilitySpec::log(-1.0).is_err());
        let e = serde_json::from_str::<UtilitySpec>(r#"{"kind":"power","gamma":1,"a":1}"#).unwrap_err();
        assert!(e.to_string().contains("utility.gamma"));
        let u: UtilitySpec = serde_json::from_str(r#"{"kind":"exponential","gamma":1,"a":2}"#).unwrap();
        assert_eq!(u, UtilitySpec::Exponential { gamma: 1.0, a: 2.0 });
    }

    #[test]
    fn market_json() {
        let m: MarketModel = serde_json::from_str(r#"{"mu0":0.03,"mu":[0.08],"sigma_bar":[[0.2]]}"#).unwrap();
        assert_eq!(m, fixture());
        assert!(serde_json::from_str::<MarketModel>(r#"{"mu0":0.03,"mu":[0.08],"sigma_bar":[[0.2],[0.1]]}"#).is_err());
    }

    fn market_strategy() -> impl Strategy<Value = MarketModel> {
        (1usize..4, -0.02..0.08f64).prop_flat_map(|(m, mu0)| {
            (
                proptest::collection::vec(-0.1..0.2f64, m),
                proptest::collection::vec(-0.5..0.5f64, m * m),
            )
                .prop_filter_map("well conditioned", move |(mu, raw)| {
                    let rows: Vec<Vec<f64>> = (0..m)
                        .map(|i| (0..m).map(|k| raw[i * m + k] + if i == k { 0.6 } else { 0.0 }).collect())
                        .collect();
                    // The residual bound is ~1e-16 times the condition number.
                    MarketModel::new(mu0, mu, rows).ok().filter(|m| {
                        let ev = m.sigma().symmetric_eigenvalues();
                        ev.max() / ev.min() < 1e4
                    })
                })
        })
    }

    proptest! {
        #[test]
        fn ratio_solves_linear_system(m in market_strategy()) {
            let x = DVector::from_column_slice(m.merton_ratio());
            let resid = m.sigma() * x - DVector::from_column_slice(m.excess());
            let scale = DVector::from_column_slice(m.excess()).norm();
            prop_assert!(resid.norm() <= 1e-10 * scale.max(1e-300) + 1e-300);
            let dot: f64 = m.excess().iter().zip(m.merton_ratio()).map(|(a, b)| a * b).sum();
            prop_assert!((dot - m.excess_quadratic()).abs() <= 1e-12 * dot.abs().max(1e-300));
        }

        #[test]
        fn delta_p_monotone_in_m(mu0 in 0.0..0.05f64, e1 in 0.0..0.2f64, e2 in 0.0..0.2f64, gamma in -3.0..0.99f64) {
            prop_assume!(gamma.abs() > 1e-3 && (e1 - e2).abs() > 1e-6);
            let a = MarketModel::single(mu0, mu0 + e1, 0.2).unwrap();
            let b = MarketModel::single(mu0, mu0 + e2, 0.2).unwrap();
            let (da, db) = (a.delta_p(gamma).unwrap(), b.delta_p(gamma).unwrap());
            let increasing = (da - db) * (a.excess_quadratic() - b.excess_quadratic()) > 0.0;
            prop_assert_eq!(increasing, gamma > 0.0);
        }
    }
}
