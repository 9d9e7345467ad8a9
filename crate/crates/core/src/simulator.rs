//! Monte Carlo simulation of the wealth equation
//! `dW = [w·(μ−μ0)W + μ0W − c]dt + (Σ̄ᵀw)W·dz̄` under a consumption and
//! portfolio rule, plus the mean-wealth ODE used to check it.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closed_policies::Policy;
use crate::error::{Error, Result};
use crate::market::{MarketModel, UtilitySpec};
use crate::ode;

const BLOCK: usize = 1024;
const BANKRUPTCY_FLOOR: f64 = 1e-12;

/// A rule whose consumption and dollar exposure are affine in wealth:
/// `c = c0 + c1·W`, `π = p0 + p1·W`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineRule {
    pub c0: f64,
    pub c1: f64,
    pub p0: Vec<f64>,
    pub p1: Vec<f64>,
}

impl AffineRule {
    pub fn consumption(&self, wealth: f64) -> f64 {
        self.c0 + self.c1 * wealth
    }

    fn is_proportional(&self) -> bool {
        self.c0 == 0.0 && self.p0.iter().all(|p| *p == 0.0)
    }
}

/// Anything the simulator can follow.
pub trait Strategy: Sync {
    fn horizon(&self) -> f64;
    /// Whether wealth must stay positive (log and power utility).
    fn requires_positive_wealth(&self) -> bool;
    fn rule(&self, t: f64) -> Result<AffineRule>;
}

impl Strategy for Policy {
    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn requires_positive_wealth(&self) -> bool {
        self.utility.is_crra()
    }

    fn rule(&self, t: f64) -> Result<AffineRule> {
        let m = self.portfolio_coeff.len();
        match self.utility {
            UtilitySpec::Exponential { gamma, a } => {
                let alpha = self.alpha(t)?;
                let beta = self.beta(t)?.expect("exponential policies carry beta");
                Ok(AffineRule {
                    c0: alpha - (a * gamma * beta).ln() / gamma,
                    c1: beta,
                    p0: self.portfolio_coeff.iter().map(|x| x / (gamma * beta)).collect(),
                    p1: vec![0.0; m],
                })
            }
            _ => Ok(AffineRule {
                c0: 0.0,
                c1: self.propensity(t)?,
                p0: vec![0.0; m],
                p1: self.portfolio_coeff.clone(),
            }),
        }
    }
}

/// A rule fixed over time, e.g. "consume nothing, hold only cash".
#[derive(Debug, Clone, PartialEq)]
pub struct FixedRule {
    pub rule: AffineRule,
    pub horizon: f64,
    pub positive_wealth: bool,
}

impl FixedRule {
    pub fn cash_only(assets: usize, horizon: f64) -> Self {
        FixedRule {
            rule: AffineRule {
                c0: 0.0,
                c1: 0.0,
                p0: vec![0.0; assets],
                p1: vec![0.0; assets],
            },
            horizon,
            positive_wealth: true,
        }
    }
}

impl Strategy for FixedRule {
    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn requires_positive_wealth(&self) -> bool {
        self.positive_wealth
    }

    fn rule(&self, _t: f64) -> Result<AffineRule> {
        Ok(self.rule.clone())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    EulerMaruyama,
    /// Euler–Maruyama on `ln W` with coefficients frozen over each step;
    /// exact for constant coefficients. Proportional rules only.
    LogEuler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    #[serde(rename = "W0")]
    pub w0: f64,
    #[serde(default)]
    pub scheme: Scheme,
    /// Pairs paths `2i`, `2i+1` on negated normal draws.
    #[serde(default)]
    pub antithetic: bool,
    /// How many leading paths to keep in full.
    #[serde(default)]
    pub keep_paths: usize,
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 {
            return Err(Error::invalid("simulation.n_paths", "must be at least 1"));
        }
        if self.n_steps == 0 {
            return Err(Error::invalid("simulation.n_steps", "must be at least 1"));
        }
        if !self.w0.is_finite() {
            return Err(Error::invalid("simulation.W0", "must be finite"));
        }
        if self.keep_paths > self.n_paths {
            return Err(Error::invalid("simulation.keep_paths", "exceeds n_paths"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub times: Vec<f64>,
    pub mean_wealth: Vec<f64>,
    pub std_wealth: Vec<f64>,
    pub mean_consumption: Vec<f64>,
    pub std_consumption: Vec<f64>,
    /// Paths absorbed at the bankruptcy floor by each time.
    pub bankrupt: Vec<u64>,
    /// Standard error of the mean terminal wealth (antithetic pairs averaged first).
    pub final_wealth_stderr: f64,
    /// Retained paths as `(wealth, consumption)` per time.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub paths: Vec<(Vec<f64>, Vec<f64>)>,
}

impl SimulationResult {
    pub fn bankrupt_count(&self) -> u64 {
        self.bankrupt.last().copied().unwrap_or(0)
    }

    /// Rows `t, mean_W, std_W, mean_c, std_c, bankrupt_count`.
    pub fn table(&self) -> (Vec<String>, Vec<Vec<f64>>) {
        let header = ["t", "mean_W", "std_W", "mean_c", "std_c", "bankrupt_count"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rows = (0..self.times.len())
            .map(|k| {
                vec![
                    self.times[k],
                    self.mean_wealth[k],
                    self.std_wealth[k],
                    self.mean_consumption[k],
                    self.std_consumption[k],
                    self.bankrupt[k] as f64,
                ]
            })
            .collect();
        (header, rows)
    }

    /// Retained paths as little-endian `f64` records `[path, step, W, c]`.
    pub fn write_paths(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (p, (w, c)) in self.paths.iter().enumerate() {
            for k in 0..w.len() {
                for v in [p as f64, k as f64, w[k], c[k]] {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Reads a dump written by [`SimulationResult::write_paths`].
pub fn read_paths(path: &Path) -> Result<Vec<[f64; 4]>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 32 != 0 {
        return Err(Error::Serialization("path dump length is not a multiple of 32 bytes".into()));
    }
    Ok(bytes
        .chunks_exact(32)
        .map(|rec| {
            let mut r = [0.0; 4];
            for (i, v) in r.iter_mut().enumerate() {
                *v = f64::from_le_bytes(rec[8 * i..8 * i + 8].try_into().unwrap());
            }
            r
        })
        .collect())
}

/// Running count, mean and sum of squared deviations.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn merge(&mut self, o: &Moments) {
        if o.n == 0.0 {
            return;
        }
        if self.n == 0.0 {
            *self = *o;
            return;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        self.mean += d * o.n / n;
        self.m2 += o.m2 + d * d * self.n * o.n / n;
        self.n = n;
    }

    fn std(&self) -> f64 {
        if self.n > 1.0 {
            (self.m2 / (self.n - 1.0)).max(0.0).sqrt()
        } else {
            0.0
        }
    }
}

struct BlockStats {
    wealth: Vec<Moments>,
    consumption: Vec<Moments>,
    bankrupt: Vec<u64>,
    terminal: Moments,
    paths: Vec<(Vec<f64>, Vec<f64>)>,
}

struct Prepared {
    dt: f64,
    mu0: f64,
    excess: Vec<f64>,
    sigma_bar: Vec<Vec<f64>>,
    rules: Vec<AffineRule>,
    // Rule at T for reporting terminal consumption, if defined.
    terminal_rule: Option<AffineRule>,
    positive: bool,
    noises: usize,
}

impl Prepared {
    fn loadings(&self, pi: &[f64]) -> Vec<f64> {
        (0..self.noises)
            .map(|l| pi.iter().enumerate().map(|(i, p)| p * self.sigma_bar[i][l]).sum())
            .collect()
    }
}

/// Simulates `spec.n_paths` paths on `spec.n_steps` uniform steps.
pub fn simulate<S: Strategy + ?Sized>(strategy: &S, market: &MarketModel, spec: &SimulationSpec) -> Result<SimulationResult> {
    spec.validate()?;
    let horizon = strategy.horizon();
    let positive = strategy.requires_positive_wealth();
    if positive && spec.w0 <= 0.0 {
        return Err(Error::invalid("simulation.W0", "must be positive for log and power utility"));
    }
    let n = spec.n_steps;
    let dt = horizon / n as f64;
    let times: Vec<f64> = (0..=n).map(|k| if k == n { horizon } else { k as f64 * dt }).collect();
    let rules = times[..n].iter().map(|&t| strategy.rule(t)).collect::<Result<Vec<_>>>()?;
    if rules[0].p1.len() != market.assets() {
        return Err(Error::domain("rule and market disagree on the number of assets"));
    }
    if spec.scheme == Scheme::LogEuler && !rules.iter().all(|r| r.is_proportional()) {
        return Err(Error::Unsupported("log-Euler needs rules proportional to wealth".into()));
    }
    let sb = market.sigma_bar();
    let prep = Prepared {
        dt,
        mu0: market.mu0(),
        excess: market.excess().to_vec(),
        sigma_bar: (0..market.assets()).map(|i| (0..market.noises()).map(|l| sb[(i, l)]).collect()).collect(),
        rules,
        terminal_rule: strategy.rule(horizon).ok(),
        positive,
        noises: market.noises(),
    };

    let blocks = spec.n_paths.div_ceil(BLOCK);
    let run = |b: usize| simulate_block(&prep, spec, b * BLOCK, ((b + 1) * BLOCK).min(spec.n_paths));
    #[cfg(feature = "parallel")]
    let stats: Vec<BlockStats> = (0..blocks).into_par_iter().map(run).collect();
    #[cfg(not(feature = "parallel"))]
    let stats: Vec<BlockStats> = (0..blocks).map(run).collect();

    let mut wealth = vec![Moments::default(); n + 1];
    let mut consumption = vec![Moments::default(); n + 1];
    let mut bankrupt = vec![0u64; n + 1];
    let mut terminal = Moments::default();
    let mut paths = Vec::new();
    for s in stats {
        for k in 0..=n {
            wealth[k].merge(&s.wealth[k]);
            consumption[k].merge(&s.consumption[k]);
            bankrupt[k] += s.bankrupt[k];
        }
        terminal.merge(&s.terminal);
        paths.extend(s.paths);
    }
    Ok(SimulationResult {
        times,
        mean_wealth: wealth.iter().map(|m| m.mean).collect(),
        std_wealth: wealth.iter().map(|m| m.std()).collect(),
        mean_consumption: consumption.iter().map(|m| m.mean).collect(),
        std_consumption: consumption.iter().map(|m| m.std()).collect(),
        bankrupt,
        final_wealth_stderr: terminal.std() / terminal.n.sqrt(),
        paths,
    })
}

fn simulate_block(prep: &Prepared, spec: &SimulationSpec, start: usize, end: usize) -> BlockStats {
    let n = spec.n_steps;
    let mut stats = BlockStats {
        wealth: vec![Moments::default(); n + 1],
        consumption: vec![Moments::default(); n + 1],
        bankrupt: vec![0; n + 1],
        terminal: Moments::default(),
        paths: Vec::new(),
    };
    let floor = BANKRUPTCY_FLOOR * spec.w0.abs();
    let sqrt_dt = prep.dt.sqrt();
    let mut xi = vec![0.0; prep.noises];
    let mut pending_pair: Option<f64> = None;
    for path in start..end {
        let (stream, sign) = if spec.antithetic {
            (path / 2, if path % 2 == 0 { 1.0 } else { -1.0 })
        } else {
            (path, 1.0)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream as u64);
        let keep = path < spec.keep_paths;
        let mut kept_w = Vec::new();
        let mut kept_c = Vec::new();
        let mut w = spec.w0;
        let mut absorbed = false;
        for k in 0..n {
            let rule = &prep.rules[k];
            let c = if absorbed { rule.consumption(floor) } else { rule.consumption(w) };
            stats.wealth[k].push(w);
            stats.consumption[k].push(c);
            if absorbed {
                stats.bankrupt[k] += 1;
            }
            if keep {
                kept_w.push(w);
                kept_c.push(c);
            }
            for x in xi.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = sign * z;
            }
            if absorbed {
                continue;
            }
            let pi: Vec<f64> = rule.p0.iter().zip(&rule.p1).map(|(a, b)| a + b * w).collect();
            let load = prep.loadings(&pi);
            let shock: f64 = load.iter().zip(&xi).map(|(l, x)| l * x).sum::<f64>() * sqrt_dt;
            match spec.scheme {
                Scheme::EulerMaruyama => {
                    let drift = prep.mu0 * w + pi.iter().zip(&prep.excess).map(|(p, e)| p * e).sum::<f64>() - c;
                    w += drift * prep.dt + shock;
                }
                Scheme::LogEuler => {
                    // Rates per unit wealth.
                    let wt: Vec<f64> = rule.p1.clone();
                    let lw = prep.loadings(&wt);
                    let var: f64 = lw.iter().map(|v| v * v).sum();
                    let rate = prep.mu0 + wt.iter().zip(&prep.excess).map(|(p, e)| p * e).sum::<f64>() - rule.c1;
                    let z: f64 = lw.iter().zip(&xi).map(|(l, x)| l * x).sum();
                    w *= ((rate - 0.5 * var) * prep.dt + z * sqrt_dt).exp();
                }
            }
            if prep.positive && w <= 0.0 {
                w = floor;
                absorbed = true;
            }
        }
        let c_end = match &prep.terminal_rule {
            Some(r) => r.consumption(if absorbed { floor } else { w }),
            None => f64::NAN,
        };
        stats.wealth[n].push(w);
        stats.consumption[n].push(c_end);
        if absorbed {
            stats.bankrupt[n] += 1;
        }
        if spec.antithetic {
            match pending_pair.take() {
                Some(first) if path % 2 == 1 => stats.terminal.push(0.5 * (first + w)),
                _ if path % 2 == 0 && path + 1 < spec.n_paths => pending_pair = Some(w),
                _ => stats.terminal.push(w),
            }
        } else {
            stats.terminal.push(w);
        }
        if keep {
            kept_w.push(w);
            kept_c.push(c_end);
            stats.paths.push((kept_w, kept_c));
        }
    }
    stats
}

/// Mean wealth `m(t)` under an affine rule: `m' = (μ0 + p1·(μ−μ0) − c1)m + p0·(μ−μ0) − c0`,
/// reported at `n_steps + 1` uniform times.
pub fn mean_wealth_ode<S: Strategy + ?Sized>(strategy: &S, market: &MarketModel, w0: f64, n_steps: usize, tol: f64) -> Result<Vec<f64>> {
    if n_steps == 0 {
        return Err(Error::invalid("simulation.n_steps", "must be at least 1"));
    }
    let horizon = strategy.horizon();
    let times: Vec<f64> = (0..=n_steps)
        .map(|k| if k == n_steps { horizon } else { horizon * k as f64 / n_steps as f64 })
        .collect();
    // The rule may be singular exactly at T (zero bequest weight); the last
    // interval then stops just short of it.
    let cutoff = if strategy.rule(horizon).is_ok() { horizon } else { horizon * (1.0 - 1e-12) };
    let excess = market.excess();
    let err = std::cell::RefCell::new(None);
    let rhs = |t: f64, m: f64| match strategy.rule(t.min(cutoff)) {
        Ok(r) => {
            let ex = |p: &[f64]| p.iter().zip(excess.iter()).map(|(a, b)| a * b).sum::<f64>();
            (market.mu0() + ex(&r.p1) - r.c1) * m + ex(&r.p0) - r.c0
        }
        Err(e) => {
            err.borrow_mut().get_or_insert(e);
            f64::NAN
        }
    };
    let out = ode::solve_on_grid(rhs, &times, w0, tol);
    if let Some(e) = err.into_inner() {
        return Err(e);
    }
    out
}
