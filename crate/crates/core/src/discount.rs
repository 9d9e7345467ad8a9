//! Instantaneous discount rates `r(s)` and discount factors
//! `θ(τ) = exp(-∫₀^τ r)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad;

/// Interpolation rule for tabulated rates. Only piecewise-linear is offered.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateInterpolation {
    #[default]
    Linear,
}

/// Wire form of a discount model, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DiscountKind {
    Constant {
        rho: f64,
    },
    #[serde(rename = "barro")]
    BarroExp { rho: f64, b: f64, gamma_d: f64 },
    #[serde(rename = "mixture")]
    ExpMixture { weights: Vec<f64>, rates: Vec<f64> },
    Tabulated {
        times: Vec<f64>,
        rates: Vec<f64>,
        #[serde(default)]
        interpolation: RateInterpolation,
    },
}

/// A validated discount model. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DiscountKind", into = "DiscountKind")]
pub struct DiscountModel {
    kind: DiscountKind,
    // Tabulated only: ∫₀^{t_k} r at every node.
    cumulative: Vec<f64>,
}

impl TryFrom<DiscountKind> for DiscountModel {
    type Error = Error;

    fn try_from(kind: DiscountKind) -> Result<Self> {
        DiscountModel::new(kind)
    }
}

impl From<DiscountModel> for DiscountKind {
    fn from(m: DiscountModel) -> Self {
        m.kind
    }
}

fn finite_nonneg(field: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v < 0.0 {
        return Err(Error::invalid(field, format!("must be finite and nonnegative, got {v}")));
    }
    Ok(())
}

impl DiscountModel {
    pub fn new(kind: DiscountKind) -> Result<Self> {
        let mut cumulative = Vec::new();
        match &kind {
            DiscountKind::Constant { rho } => finite_nonneg("discount.rho", *rho)?,
            DiscountKind::BarroExp { rho, b, gamma_d } => {
                finite_nonneg("discount.rho", *rho)?;
                if !b.is_finite() || rho + b < 0.0 {
                    return Err(Error::invalid("discount.b", "rho + b must be finite and nonnegative"));
                }
                if !gamma_d.is_finite() || *gamma_d <= 0.0 {
                    return Err(Error::invalid("discount.gamma_d", "must be positive"));
                }
            }
            DiscountKind::ExpMixture { weights, rates } => {
                if weights.is_empty() || weights.len() != rates.len() {
                    return Err(Error::invalid(
                        "discount.weights",
                        "must be nonempty and match the length of rates",
                    ));
                }
                if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
                    return Err(Error::invalid("discount.weights", "weights must be positive"));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid("discount.weights", format!("must sum to 1, got {total}")));
                }
                if rates.iter().any(|r| !r.is_finite() || *r <= 0.0) {
                    return Err(Error::invalid("discount.rates", "rates must be positive"));
                }
            }
            DiscountKind::Tabulated { times, rates, .. } => {
                if times.is_empty() || times.len() != rates.len() {
                    return Err(Error::invalid(
                        "discount.times",
                        "must be nonempty and match the length of rates",
                    ));
                }
                if times[0] < 0.0 || times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::invalid(
                        "discount.times",
                        "must be finite, nonnegative and strictly increasing",
                    ));
                }
                for r in rates {
                    finite_nonneg("discount.rates", *r)?;
                }
                cumulative.push(rates[0] * times[0]);
                for k in 1..times.len() {
                    let seg = 0.5 * (times[k] - times[k - 1]) * (rates[k] + rates[k - 1]);
                    cumulative.push(cumulative[k - 1] + seg);
                }
            }
        }
        Ok(DiscountModel { kind, cumulative })
    }

    pub fn constant(rho: f64) -> Result<Self> {
        Self::new(DiscountKind::Constant { rho })
    }

    pub fn barro(rho: f64, b: f64, gamma_d: f64) -> Result<Self> {
        Self::new(DiscountKind::BarroExp { rho, b, gamma_d })
    }

    pub fn mixture(weights: Vec<f64>, rates: Vec<f64>) -> Result<Self> {
        Self::new(DiscountKind::ExpMixture { weights, rates })
    }

    pub fn tabulated(times: Vec<f64>, rates: Vec<f64>) -> Result<Self> {
        Self::new(DiscountKind::Tabulated {
            times,
            rates,
            interpolation: RateInterpolation::Linear,
        })
    }

    pub fn kind(&self) -> &DiscountKind {
        &self.kind
    }

    /// The constant rate, if this model is exponential discounting.
    pub fn constant_rate(&self) -> Option<f64> {
        match &self.kind {
            DiscountKind::Constant { rho } => Some(*rho),
            DiscountKind::ExpMixture { rates, .. } if rates.iter().all(|r| *r == rates[0]) => Some(rates[0]),
            _ => None,
        }
    }

    fn check_time(name: &str, s: f64) -> Result<()> {
        if s.is_nan() || s < 0.0 {
            return Err(Error::domain(format!("{name} must be nonnegative, got {s}")));
        }
        Ok(())
    }

    /// Instantaneous rate `r(s)`.
    pub fn rate(&self, s: f64) -> Result<f64> {
        Self::check_time("rate argument", s)?;
        Ok(self.rate_unchecked(s))
    }

    pub(crate) fn rate_unchecked(&self, s: f64) -> f64 {
        match &self.kind {
            DiscountKind::Constant { rho } => *rho,
            DiscountKind::BarroExp { rho, b, gamma_d } => rho + b * (-gamma_d * s).exp(),
            DiscountKind::ExpMixture { weights, rates } => {
                let lo = rates.iter().copied().fold(f64::INFINITY, f64::min);
                let (mut num, mut den) = (0.0, 0.0);
                for (w, r) in weights.iter().zip(rates) {
                    let e = w * (-(r - lo) * s).exp();
                    num += r * e;
                    den += e;
                }
                num / den
            }
            DiscountKind::Tabulated { times, rates, .. } => {
                let n = times.len();
                if s <= times[0] {
                    return rates[0];
                }
                if s >= times[n - 1] {
                    return rates[n - 1];
                }
                let k = times.partition_point(|&t| t <= s) - 1;
                let f = (s - times[k]) / (times[k + 1] - times[k]);
                rates[k] + f * (rates[k + 1] - rates[k])
            }
        }
    }

    /// `∫₀^τ r(s) ds`.
    pub fn cumulative_rate(&self, tau: f64) -> Result<f64> {
        Self::check_time("elapsed time", tau)?;
        Ok(self.cumulative_unchecked(tau))
    }

    fn cumulative_unchecked(&self, tau: f64) -> f64 {
        match &self.kind {
            DiscountKind::Constant { rho } => rho * tau,
            DiscountKind::BarroExp { rho, b, gamma_d } => rho * tau - b * (-gamma_d * tau).exp_m1() / gamma_d,
            DiscountKind::ExpMixture { .. } => -self.factor_unchecked(tau).ln(),
            DiscountKind::Tabulated { times, rates, .. } => {
                let n = times.len();
                if tau <= times[0] {
                    return rates[0] * tau;
                }
                if tau >= times[n - 1] {
                    return self.cumulative[n - 1] + rates[n - 1] * (tau - times[n - 1]);
                }
                let k = times.partition_point(|&t| t <= tau) - 1;
                let r = self.rate_unchecked(tau);
                self.cumulative[k] + 0.5 * (tau - times[k]) * (rates[k] + r)
            }
        }
    }

    /// Discount factor `θ(τ)`.
    pub fn factor(&self, tau: f64) -> Result<f64> {
        Self::check_time("elapsed time", tau)?;
        Ok(self.factor_unchecked(tau))
    }

    pub(crate) fn factor_unchecked(&self, tau: f64) -> f64 {
        match &self.kind {
            DiscountKind::ExpMixture { weights, rates } => {
                weights.iter().zip(rates).map(|(w, r)| w * (-r * tau).exp()).sum()
            }
            _ => (-self.cumulative_unchecked(tau)).exp(),
        }
    }

    /// `θ(τ)` computed by adaptive quadrature of the rate, for cross-checks.
    pub fn factor_by_quadrature(&self, tau: f64) -> Result<f64> {
        Self::check_time("elapsed time", tau)?;
        let mut acc = 0.0;
        let breaks = self.breakpoints(0.0, tau);
        for w in breaks.windows(2) {
            acc += quad::integrate(|s| self.rate_unchecked(s), w[0], w[1]);
        }
        Ok((-acc).exp())
    }

    // Interval endpoints plus any tabulation nodes inside, so quadrature never
    // straddles a kink.
    fn breakpoints(&self, lo: f64, hi: f64) -> Vec<f64> {
        let mut pts = vec![lo];
        if let DiscountKind::Tabulated { times, .. } = &self.kind {
            pts.extend(times.iter().copied().filter(|&t| t > lo && t < hi));
        }
        pts.push(hi);
        pts
    }

    /// `∫_{τ0}^{τ1} θ(u) du`.
    pub fn factor_integral(&self, tau0: f64, tau1: f64) -> Result<f64> {
        Self::check_time("lower bound", tau0)?;
        if tau1.is_nan() || tau1 < tau0 {
            return Err(Error::domain(format!("reversed integration bounds [{tau0}, {tau1}]")));
        }
        if tau1 == tau0 {
            return Ok(0.0);
        }
        Ok(match &self.kind {
            DiscountKind::Constant { rho } => exp_integral(*rho, tau0, tau1),
            DiscountKind::ExpMixture { weights, rates } => {
                weights.iter().zip(rates).map(|(w, r)| w * exp_integral(*r, tau0, tau1)).sum()
            }
            _ => self.factor_integral_by_quadrature(tau0, tau1),
        })
    }

    /// Quadrature route for `∫θ`, regardless of model kind.
    pub fn factor_integral_by_quadrature(&self, tau0: f64, tau1: f64) -> f64 {
        self.breakpoints(tau0, tau1)
            .windows(2)
            .map(|w| quad::integrate(|u| self.factor_unchecked(u), w[0], w[1]))
            .sum()
    }

    /// `∫₀^∞ θ(u) du`.
    pub fn factor_integral_infinite(&self) -> Result<f64> {
        let rbar = self.limit_rate();
        if rbar <= 0.0 {
            return Err(Error::domain("discount factor is not integrable: limiting rate is zero"));
        }
        Ok(match &self.kind {
            DiscountKind::Constant { rho } => 1.0 / rho,
            DiscountKind::ExpMixture { weights, rates } => weights.iter().zip(rates).map(|(w, r)| w / r).sum(),
            DiscountKind::BarroExp { gamma_d, .. } => {
                // Past 40 decay times the rate equals ρ to double precision.
                let cut = 40.0 / gamma_d;
                self.factor_integral_by_quadrature(0.0, cut) + self.factor_unchecked(cut) / rbar
            }
            DiscountKind::Tabulated { times, .. } => {
                let last = *times.last().unwrap();
                self.factor_integral_by_quadrature(0.0, last) + self.factor_unchecked(last) / rbar
            }
        })
    }

    /// `r̄ = lim_{s→∞} r(s)`.
    pub fn limit_rate(&self) -> f64 {
        match &self.kind {
            DiscountKind::Constant { rho } => *rho,
            DiscountKind::BarroExp { rho, .. } => *rho,
            DiscountKind::ExpMixture { rates, .. } => rates.iter().copied().fold(f64::INFINITY, f64::min),
            DiscountKind::Tabulated { rates, .. } => *rates.last().unwrap(),
        }
    }

    /// Grid probe (1001 nodes on `[0, horizon]`) for a nonincreasing rate.
    pub fn is_nonincreasing(&self, horizon: f64) -> bool {
        let n = 1000;
        let mut prev = self.rate_unchecked(0.0);
        for k in 1..=n {
            let r = self.rate_unchecked(horizon * k as f64 / n as f64);
            if r > prev + 1e-15 * prev.abs().max(1.0) {
                return false;
            }
            prev = r;
        }
        true
    }
}

// ∫_{a}^{b} e^{-ρu} du, stable as ρ → 0.
fn exp_integral(rho: f64, a: f64, b: f64) -> f64 {
    if rho == 0.0 {
        return b - a;
    }
    let len = b - a;
    if (rho * len).abs() < 1e-8 {
        return (-rho * a).exp() * len * (1.0 - 0.5 * rho * len);
    }
    (-rho * a).exp() * -(-rho * len).exp_m1() / rho
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mixture() -> DiscountModel {
        DiscountModel::mixture(vec![0.5, 0.5], vec![0.05, 0.15]).unwrap()
    }

    fn barro() -> DiscountModel {
        DiscountModel::barro(0.05, 0.05, 1.0).unwrap()
    }

    #[test]
    fn rate_examples() {
        assert_eq!(DiscountModel::constant(0.1).unwrap().rate(5.0).unwrap(), 0.1);
        assert!((barro().rate(0.0).unwrap() - 0.10).abs() < 1e-15);
        assert!((mixture().rate(200.0).unwrap() - 0.05).abs() < 1e-6);
        assert!(mixture().rate(-1.0).is_err());
    }

    #[test]
    fn factor_examples() {
        let c = DiscountModel::constant(0.1).unwrap();
        assert_eq!(c.factor(0.0).unwrap(), 1.0);
        assert!((c.factor(2.0).unwrap() - 0.818_730_753_077_981_9).abs() < 1e-15);
        assert!((c.factor(2.0).unwrap() - c.factor_by_quadrature(2.0).unwrap()).abs() < 1e-10);
        let b = barro();
        assert!((b.factor(1.0).unwrap() - 0.921_634_985_61).abs() < 1e-10);
        assert!((b.factor(1.0).unwrap() - b.factor_by_quadrature(1.0).unwrap()).abs() < 1e-10);
        assert!(b.factor(-0.1).is_err());
    }

    #[test]
    fn factor_integral_examples() {
        let c = DiscountModel::constant(0.1).unwrap();
        assert!((c.factor_integral(0.0, 10.0).unwrap() - 6.321_205_588_285_577).abs() < 1e-12);
        assert!((c.factor_integral(0.0, 10.0).unwrap() - c.factor_integral_by_quadrature(0.0, 10.0)).abs() < 1e-9);
        let m = mixture();
        assert!((m.factor_integral(0.0, 10.0).unwrap() - 6.524_259_535_7).abs() < 1e-9);
        assert!((m.factor_integral(0.0, 5.0).unwrap() - 3.970_770_326_8).abs() < 1e-9);
        assert_eq!(m.factor_integral(3.0, 3.0).unwrap(), 0.0);
        assert!(m.factor_integral(4.0, 3.0).is_err());
    }

    #[test]
    fn zero_rate_constant() {
        let c = DiscountModel::constant(0.0).unwrap();
        assert_eq!(c.factor(7.0).unwrap(), 1.0);
        assert_eq!(c.factor_integral(1.0, 4.0).unwrap(), 3.0);
        assert!(c.factor_integral_infinite().is_err());
    }

    #[test]
    fn tabulated_interpolates_and_extrapolates() {
        let t = DiscountModel::tabulated(vec![0.0, 1.0, 2.0], vec![0.2, 0.1, 0.05]).unwrap();
        assert!((t.rate(0.5).unwrap() - 0.15).abs() < 1e-15);
        assert_eq!(t.rate(10.0).unwrap(), 0.05);
        let exact = (-(0.15 + 0.075 + 0.05 * 3.0f64)).exp();
        assert!((t.factor(5.0).unwrap() - exact).abs() < 1e-15);
        assert!((t.factor(5.0).unwrap() - t.factor_by_quadrature(5.0).unwrap()).abs() < 1e-10);
        let inf = t.factor_integral_infinite().unwrap();
        let direct = t.factor_integral(0.0, 800.0).unwrap();
        assert!((inf - direct).abs() < 1e-8);
    }

    #[test]
    fn infinite_integrals() {
        assert!((mixture().factor_integral_infinite().unwrap() - (10.0 + 10.0 / 3.0)).abs() < 1e-12);
        let b = barro();
        let inf = b.factor_integral_infinite().unwrap();
        assert!((inf - b.factor_integral(0.0, 900.0).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn validation_names_fields() {
        let e = DiscountModel::mixture(vec![0.5, 0.6], vec![0.1, 0.2]).unwrap_err();
        assert!(matches!(e, Error::InvalidParameter { ref field, .. } if field == "discount.weights"));
        assert!(DiscountModel::barro(0.05, 0.05, 0.0).is_err());
        assert!(DiscountModel::constant(-0.1).is_err());
        assert!(DiscountModel::tabulated(vec![0.0, 0.0], vec![0.1, 0.1]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let m: DiscountModel =
            serde_json::from_str(r#"{"kind":"mixture","weights":[0.5,0.5],"rates":[0.05,0.15]}"#).unwrap();
        assert_eq!(m, mixture());
        let back = serde_json::to_string(&m).unwrap();
        let again: DiscountModel = serde_json::from_str(&back).unwrap();
        assert_eq!(again, m);
        let b: DiscountModel = serde_json::from_str(r#"{"kind":"barro","rho":0.05,"b":0.05,"gamma_d":1}"#).unwrap();
        assert_eq!(b, barro());
        let bad = serde_json::from_str::<DiscountModel>(r#"{"kind":"constant","rho":-1}"#);
        assert!(bad.unwrap_err().to_string().contains("discount.rho"));
    }

    #[test]
    fn monotonicity_probe() {
        assert!(mixture().is_nonincreasing(50.0));
        assert!(barro().is_nonincreasing(50.0));
        let up = DiscountModel::tabulated(vec![0.0, 1.0], vec![0.05, 0.1]).unwrap();
        assert!(!up.is_nonincreasing(2.0));
    }

    fn any_model() -> impl Strategy<Value = DiscountModel> {
        prop_oneof![
            (0.0..0.5f64).prop_map(|r| DiscountModel::constant(r).unwrap()),
            (0.0..0.3f64, 0.0..0.3f64, 0.1..3.0f64).prop_map(|(r, b, g)| DiscountModel::barro(r, b, g).unwrap()),
            (0.05..0.95f64, 0.01..0.3f64, 0.01..0.3f64)
                .prop_map(|(w, r1, r2)| DiscountModel::mixture(vec![w, 1.0 - w], vec![r1, r2]).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn factor_starts_at_one_and_decreases(m in any_model(), taus in proptest::collection::vec(0.0..60.0f64, 2..20)) {
            prop_assert_eq!(m.factor(0.0).unwrap(), 1.0);
            let mut taus = taus;
            taus.sort_by(f64::total_cmp);
            for w in taus.windows(2) {
                prop_assert!(m.factor(w[1]).unwrap() <= m.factor(w[0]).unwrap() + 1e-12);
            }
        }

        #[test]
        fn subadditive_under_decreasing_rate(m in any_model(), s in 0.0..40.0f64, t in 0.0..40.0f64) {
            prop_assume!(m.is_nonincreasing(s + t + 1.0));
            prop_assert!(m.factor(s).unwrap() * m.factor(t).unwrap() <= m.factor(s + t).unwrap() + 1e-12);
        }

        #[test]
        fn closed_form_matches_quadrature(m in any_model(), tau in 0.0..30.0f64) {
            let cf = m.factor(tau).unwrap();
            let q = m.factor_by_quadrature(tau).unwrap();
            prop_assert!((cf - q).abs() <= 1e-9 * cf);
            let i_cf = m.factor_integral(0.0, tau).unwrap();
            let i_q = m.factor_integral_by_quadrature(0.0, tau);
            prop_assert!((i_cf - i_q).abs() <= 1e-9 * i_cf.max(1e-300) + 1e-12);
        }
    }
}
