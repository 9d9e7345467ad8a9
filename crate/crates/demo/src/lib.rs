//! Browser bindings: propensity curves for the three agent types, power
//! consumption curves, and a small Monte Carlo of mean wealth.
//!
//! Every function returns a flat `Float64Array`-compatible vector; the page
//! splits it into series. Errors come back as JS exceptions with the library
//! message.

use hypermerton::closed_policies::{closed_form_policy, AgentKind, Policy};
use hypermerton::problem::{time_grid, Problem};
use hypermerton::simulator::{simulate, Scheme, SimulationSpec};
use hypermerton::soph_solver::{build_policy, SolverConfig};
use hypermerton::{DiscountModel, MarketModel, UtilitySpec};
use wasm_bindgen::prelude::*;

fn js(e: hypermerton::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// `kind`: "constant" (uses `r1`), "mixture" (equal weights on `r1`, `r2`)
/// or "barro" (`r1` = ρ, `r2` = b, γ_d = 1).
fn discount(kind: &str, r1: f64, r2: f64) -> Result<DiscountModel, JsError> {
    match kind {
        "constant" => DiscountModel::constant(r1),
        "mixture" => DiscountModel::mixture(vec![0.5, 0.5], vec![r1, r2]),
        "barro" => DiscountModel::barro(r1, r2, 1.0),
        other => return Err(JsError::new(&format!("unknown discount kind `{other}`"))),
    }
    .map_err(js)
}

fn market(mu0: f64, mu: f64, sigma: f64) -> Result<MarketModel, JsError> {
    MarketModel::single(mu0, mu, sigma).map_err(js)
}

fn policies(problem: &Problem) -> Result<[Policy; 3], JsError> {
    let cfg = SolverConfig {
        time_nodes: 401,
        ..SolverConfig::default()
    };
    let p = closed_form_policy(problem, AgentKind::PreCommitment, 401).map_err(js)?;
    let n = closed_form_policy(problem, AgentKind::Naive, 401).map_err(js)?;
    let (s, _) = build_policy(problem, AgentKind::Sophisticated, &cfg).map_err(js)?;
    Ok([p, n, s])
}

/// Grid times followed by `c/W` for pre-commitment, naive and sophisticated
/// log investors: `4 × points` values. The last point of a zero-bequest
/// horizon is reported as NaN.
#[wasm_bindgen]
pub fn log_propensities(kind: &str, r1: f64, r2: f64, a: f64, horizon: f64, points: usize) -> Result<Vec<f64>, JsError> {
    let problem = Problem::new(
        discount(kind, r1, r2)?,
        market(0.03, 0.08, 0.2)?,
        UtilitySpec::log(a).map_err(js)?,
        horizon,
        1.0,
    )
    .map_err(js)?;
    curves(&problem, points.max(2), |p, t| p.propensity(t))
}

/// Grid times followed by consumption at `W = 1` for the three power
/// investors (`4 × points` values).
#[allow(clippy::too_many_arguments)]
#[wasm_bindgen]
pub fn power_consumption(
    kind: &str,
    r1: f64,
    r2: f64,
    gamma: f64,
    mu0: f64,
    mu: f64,
    sigma: f64,
    horizon: f64,
    points: usize,
) -> Result<Vec<f64>, JsError> {
    let problem = Problem::new(
        discount(kind, r1, r2)?,
        market(mu0, mu, sigma)?,
        UtilitySpec::power(gamma, 1.0).map_err(js)?,
        horizon,
        1.0,
    )
    .map_err(js)?;
    curves(&problem, points.max(2), |p, t| p.consumption(1.0, t))
}

fn curves(problem: &Problem, points: usize, f: impl Fn(&Policy, f64) -> hypermerton::Result<f64>) -> Result<Vec<f64>, JsError> {
    let ts = time_grid(problem.horizon, points);
    let pols = policies(problem)?;
    let mut out = ts.clone();
    for p in &pols {
        out.extend(ts.iter().map(|&t| f(p, t).unwrap_or(f64::NAN)));
    }
    Ok(out)
}

/// Mean wealth paths of naive and pre-commitment log investors: times, then
/// naive means, then pre-commitment means (`3 × (steps + 1)` values).
#[wasm_bindgen]
pub fn mean_wealth(kind: &str, r1: f64, r2: f64, horizon: f64, paths: usize, steps: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    let m = market(0.03, 0.08, 0.2)?;
    let problem = Problem::new(discount(kind, r1, r2)?, m.clone(), UtilitySpec::log(1.0).map_err(js)?, horizon, 1.0).map_err(js)?;
    let spec = SimulationSpec {
        n_paths: paths.clamp(1, 200_000),
        n_steps: steps.clamp(1, 2000),
        seed,
        w0: 1.0,
        scheme: Scheme::EulerMaruyama,
        antithetic: false,
        keep_paths: 0,
    };
    let naive = closed_form_policy(&problem, AgentKind::Naive, 401).map_err(js)?;
    let pre = closed_form_policy(&problem, AgentKind::PreCommitment, 401).map_err(js)?;
    let rn = simulate(&naive, &m, &spec).map_err(js)?;
    let rp = simulate(&pre, &m, &spec).map_err(js)?;
    let mut out = rn.times.clone();
    out.extend(rn.mean_wealth);
    out.extend(rp.mean_wealth);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_curves_have_expected_shape() {
        let v = log_propensities("mixture", 0.05, 0.15, 1.0, 10.0, 11).unwrap();
        assert_eq!(v.len(), 44);
        // Naive and sophisticated coincide; pre-commitment starts equal.
        for k in 0..11 {
            assert!((v[22 + k] - v[33 + k]).abs() < 1e-9);
        }
        assert!((v[11] - v[22]).abs() < 1e-12);
    }

    #[test]
    fn power_and_simulation_run() {
        let v = power_consumption("barro", 0.05, 0.05, 0.5, 0.03, 0.08, 0.2, 5.0, 6).unwrap();
        assert_eq!(v.len(), 24);
        assert!(v[6..].iter().all(|c| c.is_finite() && *c > 0.0));
        let w = mean_wealth("mixture", 0.05, 0.15, 2.0, 500, 20, 1).unwrap();
        assert_eq!(w.len(), 63);
        assert_eq!(w[21], 1.0);
    }
}
