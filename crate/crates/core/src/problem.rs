//! The consumption–investment problem shared by every solver.

use serde::{Deserialize, Serialize};

use crate::discount::DiscountModel;
use crate::error::{Error, Result};
use crate::market::{MarketModel, UtilitySpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Problem {
    pub discount: DiscountModel,
    pub market: MarketModel,
    pub utility: UtilitySpec,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "W0", default = "unit_wealth")]
    pub w0: f64,
}

fn unit_wealth() -> f64 {
    1.0
}

impl Problem {
    pub fn new(discount: DiscountModel, market: MarketModel, utility: UtilitySpec, horizon: f64, w0: f64) -> Result<Self> {
        let p = Problem {
            discount,
            market,
            utility,
            horizon,
            w0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.horizon.is_finite() || self.horizon <= 0.0 {
            return Err(Error::invalid("problem.T", format!("horizon must be positive, got {}", self.horizon)));
        }
        if !self.w0.is_finite() || (self.utility.is_crra() && self.w0 <= 0.0) {
            return Err(Error::invalid("problem.W0", "initial wealth must be positive for log and power utility"));
        }
        self.utility.validate()
    }
}

/// `n` uniform nodes on `[0, horizon]` with exact endpoints.
pub fn time_grid(horizon: f64, n: usize) -> Vec<f64> {
    let last = (n - 1) as f64;
    (0..n)
        .map(|k| if k + 1 == n { horizon } else { horizon * k as f64 / last })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_endpoints_exact() {
        let g = time_grid(0.3, 7);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[6], 0.3);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn parses_with_field_names() {
        let json = r#"{
            "discount": {"kind": "constant", "rho": 0.1},
            "market": {"mu0": 0.03, "mu": [0.08], "sigma_bar": [[0.2]]},
            "utility": {"kind": "log", "a": 1},
            "T": 1
        }"#;
        let p: Problem = serde_json::from_str(json).unwrap();
        p.validate().unwrap();
        assert_eq!(p.w0, 1.0);
        let bad = json.replace("\"T\": 1", "\"T\": -1");
        let p: Problem = serde_json::from_str(&bad).unwrap();
        assert!(matches!(p.validate(), Err(Error::InvalidParameter { field, .. }) if field == "problem.T"));
    }
}
