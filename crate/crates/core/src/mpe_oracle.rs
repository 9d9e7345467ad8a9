//! Discrete-time equilibrium dynamic programming on a wealth grid: the
//! brute-force oracle for every continuous-time rule.
//!
//! Stage `j` (with `a = N − j − 1`) maximizes over consumption `c` and dollar
//! exposure `π`
//!
//! ```text
//! θ_a u(c) ε + E[ Σ_k (θ_a θ_k − θ_{a+1} θ_{k−1}) Φ_{j+1,j+k}(x') ε + θ_{a+1} V_{j+1}(x') ]
//! ```
//!
//! where `Φ_{i,n}(y) = E[H_n(x_n) | x_i = y]` under the stored equilibrium
//! rules. `Φ` is propagated one stage at a time on the wealth nodes, which is
//! the transition-operator construction applied function by function.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hermite::GaussHermite;
use crate::interp::{Jet, Pchip};
use crate::market::UtilitySpec;
use crate::problem::Problem;

const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// Spacing of the wealth grid, which is also the interpolation coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WealthSpacing {
    Log,
    Linear,
}

/// Oracle settings as they appear in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub n_steps: usize,
    pub noise_nodes: usize,
    /// Defaults: 201 log-spaced nodes (log/power), 401 linear (exponential).
    pub wealth_nodes: Option<usize>,
    /// Hull half-width: `W0·e^{±span}` (log spacing) or `±span·W0` (linear).
    pub wealth_span: Option<f64>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            n_steps: 64,
            noise_nodes: 7,
            wealth_nodes: None,
            wealth_span: None,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 2 {
            return Err(Error::invalid("oracle.n_steps", "must be at least 2"));
        }
        if self.noise_nodes < 3 {
            return Err(Error::invalid("oracle.noise_nodes", "must be at least 3"));
        }
        if let Some(n) = self.wealth_nodes {
            if n < 5 {
                return Err(Error::invalid("oracle.wealth_nodes", "must be at least 5"));
            }
        }
        if let Some(s) = self.wealth_span {
            if !(s > 0.0) {
                return Err(Error::invalid("oracle.wealth_span", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Discretization of the recursion: steps, wealth nodes and noise rule.
#[derive(Debug, Clone)]
pub struct MpeGrid {
    pub n_steps: usize,
    pub wealth: Vec<f64>,
    pub spacing: WealthSpacing,
    pub noise: GaussHermite,
}

impl MpeGrid {
    pub fn new(n_steps: usize, wealth: Vec<f64>, spacing: WealthSpacing, q: usize, noise_dim: usize) -> Result<Self> {
        if n_steps < 2 {
            return Err(Error::invalid("oracle.n_steps", "must be at least 2"));
        }
        if q < 3 {
            return Err(Error::invalid("oracle.noise_nodes", "must be at least 3"));
        }
        if wealth.len() < 5 || wealth.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("oracle.wealth_nodes", "need at least 5 strictly increasing nodes"));
        }
        if spacing == WealthSpacing::Log && wealth[0] <= 0.0 {
            return Err(Error::invalid("oracle.wealth_nodes", "log spacing needs positive wealth"));
        }
        Ok(MpeGrid {
            n_steps,
            wealth,
            spacing,
            noise: GaussHermite::new(q, noise_dim)?,
        })
    }

    /// The default grid for a problem.
    pub fn standard(problem: &Problem, cfg: &OracleConfig) -> Result<Self> {
        cfg.validate()?;
        let w0 = problem.w0;
        let (spacing, wealth) = if problem.utility.is_crra() {
            let n = cfg.wealth_nodes.unwrap_or(201);
            let span = cfg.wealth_span.unwrap_or(6.0);
            let mid = (n - 1) / 2;
            let nodes = (0..n)
                .map(|k| {
                    if 2 * k == n - 1 {
                        w0
                    } else {
                        w0 * (-span + 2.0 * span * k as f64 / (n - 1) as f64).exp()
                    }
                })
                .collect::<Vec<_>>();
            debug_assert!(mid < n);
            (WealthSpacing::Log, nodes)
        } else {
            let n = cfg.wealth_nodes.unwrap_or(401);
            let span = cfg.wealth_span.unwrap_or(10.0);
            let scale = w0.abs().max(1.0);
            let nodes = (0..n)
                .map(|k| scale * (-span + 2.0 * span * k as f64 / (n - 1) as f64))
                .collect();
            (WealthSpacing::Linear, nodes)
        };
        Self::new(cfg.n_steps, wealth, spacing, cfg.noise_nodes, problem.market.noises())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleDiagnostics {
    /// Next-period wealth points outside the grid hull (extrapolated).
    pub hull_exits: u64,
    /// Nonpositive next-period wealth under log/power, clamped to the smallest node.
    pub negative_clamps: u64,
    /// Stage maximizers on the edge of the control box.
    pub control_contacts: u64,
    pub node_evaluations: u64,
}

impl OracleDiagnostics {
    pub fn contact_fraction(&self) -> f64 {
        if self.node_evaluations == 0 {
            0.0
        } else {
            self.control_contacts as f64 / self.node_evaluations as f64
        }
    }

    fn absorb(&mut self, other: &OracleDiagnostics) {
        self.hull_exits += other.hull_exits;
        self.negative_clamps += other.negative_clamps;
        self.control_contacts += other.control_contacts;
        self.node_evaluations += other.node_evaluations;
    }
}

/// Which recursion to run.
#[derive(Debug, Clone, PartialEq)]
pub enum Recursion {
    /// The equilibrium recursion with H-sums.
    Equilibrium,
    /// Standard dynamic programming `V_j = max E[u ε + d_j V_{j+1}]` with
    /// per-stage discount ratios `d_j`.
    Standard(Vec<f64>),
}

/// Per-stage grids of the recursion. Stage `N` holds the bequest function.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageFunctions {
    pub n_steps: usize,
    pub horizon: f64,
    pub wealth: Vec<f64>,
    /// `V*_j` on the nodes for `j = 0..=N`.
    pub value: Vec<Vec<f64>>,
    /// `H_j = u(c*_j)` for `j = 0..N`.
    pub h: Vec<Vec<f64>>,
    pub consumption: Vec<Vec<f64>>,
    /// Dollar exposure `π = w·W` per asset, `[j][node][asset]`.
    pub exposure: Vec<Vec<Vec<f64>>>,
}

/// Output of a backward induction.
#[derive(Debug, Clone)]
pub struct OracleResult {
    pub stages: StageFunctions,
    pub diagnostics: OracleDiagnostics,
    grid: MpeGrid,
    problem: Problem,
    thetas: Vec<f64>,
    recursion: Recursion,
    // Continuation function Ψ_j on the nodes for each stage.
    psi: Vec<Vec<f64>>,
}

/// A function of wealth stored on the nodes, interpolated by PCHIP in the
/// grid coordinate (`ln W` or `W`) after an optional `ln|f|` transform. For
/// the three utility families every stored function is then affine in the
/// interpolation coordinate up to discretization error.
#[derive(Debug, Clone)]
struct NodeFunction {
    spacing: WealthSpacing,
    log_value: Option<f64>,
    pchip: Pchip,
    x_min: f64,
    x_max: f64,
}

impl NodeFunction {
    fn new(wealth: &[f64], values: &[f64], spacing: WealthSpacing) -> Result<Self> {
        let coords: Vec<f64> = match spacing {
            WealthSpacing::Log => wealth.iter().map(|x| x.ln()).collect(),
            WealthSpacing::Linear => wealth.to_vec(),
        };
        let sign = values[0].signum();
        let one_sign = values.iter().all(|v| v.signum() == sign && *v != 0.0 && v.is_finite());
        let (log_value, ys) = if one_sign {
            (Some(sign), values.iter().map(|v| v.abs().ln()).collect())
        } else {
            (None, values.to_vec())
        };
        Ok(NodeFunction {
            spacing,
            log_value,
            pchip: Pchip::new(coords, ys)?,
            x_min: wealth[0],
            x_max: wealth[wealth.len() - 1],
        })
    }

    /// Value and first two wealth derivatives. Under log spacing, points at or
    /// below zero wealth are clamped to the smallest node (flat).
    fn jet(&self, x: f64) -> (Jet, bool) {
        let (u, du, ddu, clamped) = match self.spacing {
            WealthSpacing::Log => {
                if x <= 0.0 {
                    (self.x_min.ln(), 0.0, 0.0, true)
                } else {
                    (x.ln(), 1.0 / x, -1.0 / (x * x), false)
                }
            }
            WealthSpacing::Linear => (x, 1.0, 0.0, false),
        };
        let p = self.pchip.jet(u);
        let px = p.d1 * du;
        let pxx = p.d2 * du * du + p.d1 * ddu;
        let jet = match self.log_value {
            None => Jet {
                value: p.value,
                d1: px,
                d2: pxx,
            },
            Some(sign) => {
                let v = sign * p.value.exp();
                Jet {
                    value: v,
                    d1: v * px,
                    d2: v * (px * px + pxx),
                }
            }
        };
        (jet, clamped)
    }

    fn value(&self, x: f64) -> f64 {
        self.jet(x).0.value
    }

    fn outside(&self, x: f64) -> bool {
        x < self.x_min || x > self.x_max
    }
}

/// A continuation function of next-period wealth with two derivatives.
trait Continuation: Sync {
    fn jet(&self, x: f64) -> (Jet, bool);
}

impl Continuation for NodeFunction {
    fn jet(&self, x: f64) -> (Jet, bool) {
        NodeFunction::jet(self, x)
    }
}

/// `S ln y` (log) or `S y^γ/γ` (power); nonpositive wealth is infeasible.
struct ScaledContinuation {
    gamma: Option<f64>,
    s: f64,
}

impl Continuation for ScaledContinuation {
    fn jet(&self, y: f64) -> (Jet, bool) {
        if y <= 0.0 {
            let jet = Jet {
                value: f64::NEG_INFINITY,
                d1: 0.0,
                d2: 0.0,
            };
            return (jet, true);
        }
        let jet = match self.gamma {
            None => Jet {
                value: self.s * y.ln(),
                d1: self.s / y,
                d2: -self.s / (y * y),
            },
            Some(g) => {
                let p = y.powf(g);
                Jet {
                    value: self.s * p / g,
                    d1: self.s * p / y,
                    d2: self.s * (g - 1.0) * p / (y * y),
                }
            }
        };
        (jet, false)
    }
}

/// The part of a stage shared by all wealth nodes.
struct Stage<'a> {
    utility: UtilitySpec,
    weight_u: f64,
    eps: f64,
    mu0: f64,
    // Per noise node: ∂x'/∂π = (μ−μ0)ε + √ε Σ̄ξ.
    grads: Vec<Vec<f64>>,
    weights: &'a [f64],
    psi: &'a dyn Continuation,
    scale: f64,
}

#[derive(Debug, Clone)]
struct NodeSolution {
    c: f64,
    pi: Vec<f64>,
    objective: f64,
    contact: bool,
}

impl<'a> Stage<'a> {
    fn next_wealth(&self, x: f64, c: f64, pi: &[f64], q: usize) -> f64 {
        let drift = x + (self.mu0 * x - c) * self.eps;
        drift + pi.iter().zip(&self.grads[q]).map(|(p, g)| p * g).sum::<f64>()
    }

    fn continuation(&self, x: f64, c: f64, pi: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (q, w) in self.weights.iter().enumerate() {
            acc += w * self.psi.jet(self.next_wealth(x, c, pi, q)).0.value;
        }
        acc
    }

    fn objective(&self, x: f64, c: f64, pi: &[f64]) -> f64 {
        let v = self.weight_u * self.utility.utility(c) * self.eps + self.continuation(x, c, pi);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }

    fn exposure_box(&self, x: f64) -> f64 {
        if self.utility.is_crra() {
            100.0 * x
        } else {
            1e3 * (x.abs() + self.scale)
        }
    }

    /// Newton iteration on the exposure at fixed consumption, with backtracking.
    fn best_exposure(&self, x: f64, c: f64, start: &[f64]) -> (Vec<f64>, f64, bool) {
        let m = start.len();
        let bound = self.exposure_box(x);
        let mut pi: Vec<f64> = start.iter().map(|p| p.clamp(-bound, bound)).collect();
        let mut f = self.objective(x, c, &pi);
        for _ in 0..50 {
            let mut grad = vec![0.0; m];
            let mut hess = vec![0.0; m * m];
            for (q, w) in self.weights.iter().enumerate() {
                let (jet, _) = self.psi.jet(self.next_wealth(x, c, &pi, q));
                let g = &self.grads[q];
                for i in 0..m {
                    grad[i] += w * jet.d1 * g[i];
                    for k in 0..m {
                        hess[i * m + k] += w * jet.d2 * g[i] * g[k];
                    }
                }
            }
            let step = newton_step(&grad, &hess, m, bound);
            let mut t = 1.0;
            let mut improved = false;
            for _ in 0..40 {
                let trial: Vec<f64> = pi.iter().zip(&step).map(|(p, s)| (p + t * s).clamp(-bound, bound)).collect();
                let ft = self.objective(x, c, &trial);
                if ft >= f {
                    let moved = pi.iter().zip(&trial).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    pi = trial;
                    f = ft;
                    improved = moved > 0.0;
                    break;
                }
                t *= 0.5;
            }
            let size = step.iter().map(|s| s.abs()).fold(0.0, f64::max) * t;
            if !improved || size <= 1e-13 * (x.abs() + self.scale) {
                break;
            }
        }
        let contact = pi.iter().any(|p| p.abs() >= bound * (1.0 - 1e-9));
        (pi, f, contact)
    }

    fn consumption_box(&self, x: f64) -> (f64, f64) {
        if self.utility.is_crra() {
            ((1e-12 * x).ln(), (x / self.eps).ln())
        } else {
            let width = 2.0 * (x.abs() + self.scale) / self.eps + 10.0 / self.utility.gamma().unwrap();
            (-width, width)
        }
    }

    fn to_c(&self, z: f64) -> f64 {
        if self.utility.is_crra() {
            z.exp()
        } else {
            z
        }
    }

    /// Golden-section search over consumption (in `ln c` for log/power), with
    /// the exposure re-optimized at every trial; ties go to smaller `c`.
    fn solve(&self, x: f64, pi_guess: &[f64]) -> NodeSolution {
        let (lo, hi) = self.consumption_box(x);
        let tol = if self.utility.is_crra() { 1e-11 } else { 1e-11 * (x.abs() + self.scale) };
        let mut pi_warm = pi_guess.to_vec();
        let eval = |z: f64, warm: &mut Vec<f64>| -> f64 {
            let (pi, f, _) = self.best_exposure(x, self.to_c(z), warm);
            *warm = pi;
            f
        };
        let (mut a, mut b) = (lo, hi);
        let mut z1 = b - GOLDEN * (b - a);
        let mut z2 = a + GOLDEN * (b - a);
        let mut f1 = eval(z1, &mut pi_warm);
        let mut f2 = eval(z2, &mut pi_warm);
        while b - a > tol {
            if f1 >= f2 {
                b = z2;
                z2 = z1;
                f2 = f1;
                z1 = b - GOLDEN * (b - a);
                f1 = eval(z1, &mut pi_warm);
            } else {
                a = z1;
                z1 = z2;
                f1 = f2;
                z2 = a + GOLDEN * (b - a);
                f2 = eval(z2, &mut pi_warm);
            }
        }
        let z = if f1 >= f2 { z1 } else { z2 };
        let c = self.to_c(z);
        let (pi, objective, pi_contact) = self.best_exposure(x, c, &pi_warm);
        let edge = 1e-6 * (hi - lo);
        NodeSolution {
            c,
            pi,
            objective,
            contact: pi_contact || z - lo < edge || hi - z < edge,
        }
    }
}

fn newton_step(grad: &[f64], hess: &[f64], m: usize, bound: f64) -> Vec<f64> {
    if m == 1 {
        if hess[0] < 0.0 {
            return vec![-grad[0] / hess[0]];
        }
        return vec![grad[0].signum() * 0.1 * bound];
    }
    let h = nalgebra::DMatrix::from_row_slice(m, m, hess);
    let g = nalgebra::DVector::from_column_slice(grad);
    match nalgebra::Cholesky::new(-h) {
        Some(ch) => ch.solve(&g).iter().copied().collect(),
        None => {
            let n = g.norm();
            if n == 0.0 {
                vec![0.0; m]
            } else {
                g.iter().map(|v| 0.1 * bound * v / n).collect()
            }
        }
    }
}

/// `θ_a θ_k − θ_{a+1} θ_{k−1}`, the weight of `H_{j+k}` at stage `j = N−a−1`.
pub fn h_coefficient(thetas: &[f64], a: usize, k: usize) -> f64 {
    thetas[a] * thetas[k] - thetas[a + 1] * thetas[k - 1]
}

fn map_nodes<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

fn initial_exposure(problem: &Problem, x: f64) -> Vec<f64> {
    let ratio = problem.market.merton_ratio();
    match problem.utility {
        UtilitySpec::Log { .. } => ratio.iter().map(|r| r * x).collect(),
        UtilitySpec::Power { gamma, .. } => ratio.iter().map(|r| r * x / (1.0 - gamma)).collect(),
        UtilitySpec::Exponential { gamma, .. } => ratio.iter().map(|r| r / gamma).collect(),
    }
}

fn stage_grads(problem: &Problem, grid: &MpeGrid, eps: f64) -> Vec<Vec<f64>> {
    let m = problem.market.assets();
    let sb = problem.market.sigma_bar();
    let ex = problem.market.excess();
    (0..grid.noise.len())
        .map(|q| {
            let xi = grid.noise.node(q);
            (0..m)
                .map(|i| ex[i] * eps + eps.sqrt() * (0..xi.len()).map(|l| sb[(i, l)] * xi[l]).sum::<f64>())
                .collect()
        })
        .collect()
}

/// Runs the recursion backward from `j = N − 1` to `0`.
pub fn run_recursion(problem: &Problem, grid: &MpeGrid, recursion: Recursion) -> Result<OracleResult> {
    problem.validate()?;
    let n = grid.n_steps;
    if let Recursion::Standard(r) = &recursion {
        if r.len() != n {
            return Err(Error::domain("standard recursion needs one discount ratio per stage"));
        }
    }
    if grid.noise.dim != problem.market.noises() {
        return Err(Error::domain("noise dimension differs from the market's Brownian drivers"));
    }
    if problem.utility.is_crra() != (grid.spacing == WealthSpacing::Log) {
        return Err(Error::domain("log/power need log-spaced wealth; exponential needs linear spacing"));
    }
    let eps = problem.horizon / n as f64;
    let thetas: Vec<f64> = (0..=n).map(|k| problem.discount.factor_unchecked(k as f64 * eps)).collect();
    let wealth = &grid.wealth;
    let nodes = wealth.len();
    let utility = problem.utility;
    let grads = stage_grads(problem, grid, eps);
    let scale = problem.w0.abs().max(1.0);

    let terminal: Vec<f64> = wealth.iter().map(|&x| utility.bequest(x)).collect();
    let mut value = vec![Vec::new(); n + 1];
    value[n] = terminal;
    let mut h = vec![Vec::new(); n];
    let mut consumption = vec![Vec::new(); n];
    let mut exposure = vec![Vec::new(); n];
    let mut psi_store = vec![Vec::new(); n];
    let mut diagnostics = OracleDiagnostics::default();
    // Φ_{j+1, n} for n = j+1 .. N−1, indexed by n − (j+1).
    let mut phi_next: Vec<Vec<f64>> = Vec::new();
    let mut pi_prev: Vec<Vec<f64>> = wealth.iter().map(|&x| initial_exposure(problem, x)).collect();

    for j in (0..n).rev() {
        let a = n - j - 1;
        let (weight_u, psi_vals): (f64, Vec<f64>) = match &recursion {
            Recursion::Equilibrium => {
                let mut psi = value[j + 1].iter().map(|v| thetas[a + 1] * v).collect::<Vec<_>>();
                for (idx, phi) in phi_next.iter().enumerate() {
                    let k = idx + 1;
                    let coef = h_coefficient(&thetas, a, k) * eps;
                    for (p, f) in psi.iter_mut().zip(phi) {
                        *p += coef * f;
                    }
                }
                (thetas[a], psi)
            }
            Recursion::Standard(ratios) => (1.0, value[j + 1].iter().map(|v| ratios[j] * v).collect()),
        };
        let psi_fn = NodeFunction::new(wealth, &psi_vals, grid.spacing)?;
        let stage = Stage {
            utility,
            weight_u,
            eps,
            mu0: problem.market.mu0(),
            grads: grads.clone(),
            weights: &grid.noise.weights,
            psi: &psi_fn,
            scale,
        };
        let sols: Vec<NodeSolution> = map_nodes(nodes, |i| stage.solve(wealth[i], &pi_prev[i]));

        // Next-period wealth at the maximizers, shared by every Φ update.
        let mut stage_diag = OracleDiagnostics::default();
        let mut next_points = Vec::with_capacity(nodes);
        for (i, s) in sols.iter().enumerate() {
            stage_diag.node_evaluations += 1;
            stage_diag.control_contacts += s.contact as u64;
            let pts: Vec<f64> = (0..grid.noise.len())
                .map(|q| stage.next_wealth(wealth[i], s.c, &s.pi, q))
                .collect();
            for &p in &pts {
                if grid.spacing == WealthSpacing::Log && p <= 0.0 {
                    stage_diag.negative_clamps += 1;
                } else if psi_fn.outside(p) {
                    stage_diag.hull_exits += 1;
                }
            }
            next_points.push(pts);
        }
        diagnostics.absorb(&stage_diag);

        let h_j: Vec<f64> = sols.iter().map(|s| utility.utility(s.c)).collect();
        let v_j: Vec<f64> = sols.iter().map(|s| s.objective / weight_u).collect();
        if matches!(recursion, Recursion::Equilibrium) {
            let expect = |f: &NodeFunction| -> Vec<f64> {
                next_points
                    .iter()
                    .map(|pts| pts.iter().zip(&grid.noise.weights).map(|(p, w)| w * f.value(*p)).sum())
                    .collect()
            };
            let mut phi_j = Vec::with_capacity(phi_next.len() + 1);
            phi_j.push(h_j.clone());
            for phi in &phi_next {
                phi_j.push(expect(&NodeFunction::new(wealth, phi, grid.spacing)?));
            }
            phi_next = phi_j;
        }
        pi_prev = sols.iter().map(|s| s.pi.clone()).collect();
        h[j] = h_j;
        value[j] = v_j;
        consumption[j] = sols.iter().map(|s| s.c).collect();
        exposure[j] = sols.into_iter().map(|s| s.pi).collect();
        psi_store[j] = psi_vals;
    }

    Ok(OracleResult {
        stages: StageFunctions {
            n_steps: n,
            horizon: problem.horizon,
            wealth: wealth.clone(),
            value,
            h,
            consumption,
            exposure,
        },
        diagnostics,
        grid: grid.clone(),
        problem: problem.clone(),
        thetas,
        recursion,
        psi: psi_store,
    })
}

/// The equilibrium recursion.
pub fn backward_induction(problem: &Problem, grid: &MpeGrid) -> Result<OracleResult> {
    run_recursion(problem, grid, Recursion::Equilibrium)
}

/// Classical dynamic programming with `V_j = max E[u ε + e^{−ρε} V_{j+1}]`.
pub fn classical_backward_induction(problem: &Problem, grid: &MpeGrid, rho: f64) -> Result<OracleResult> {
    let eps = problem.horizon / grid.n_steps as f64;
    run_recursion(problem, grid, Recursion::Standard(vec![(-rho * eps).exp(); grid.n_steps]))
}

/// Pre-commitment dynamic programming: calendar discounting `θ(jε)`, so the
/// stage-`j` ratio is `θ_{j+1}/θ_j`.
pub fn precommitment_backward_induction(problem: &Problem, grid: &MpeGrid) -> Result<OracleResult> {
    let eps = problem.horizon / grid.n_steps as f64;
    let d = &problem.discount;
    let ratios = (0..grid.n_steps)
        .map(|j| d.factor_unchecked((j + 1) as f64 * eps) / d.factor_unchecked(j as f64 * eps))
        .collect();
    run_recursion(problem, grid, Recursion::Standard(ratios))
}

/// Coefficient-space equilibrium recursion for log and power utility.
///
/// Rules are linear in wealth, so `c = λ_j W`, `π = φ_j W`, `V_j` is
/// `A_j ln W + const` (log) or `A_j W^γ/γ` (power) and each stage is solved
/// once at unit wealth with no wealth grid at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledOracle {
    pub n_steps: usize,
    pub horizon: f64,
    pub propensity: Vec<f64>,
    /// Portfolio weights per stage.
    pub weights: Vec<Vec<f64>>,
    /// `A_j` for `j = 0..=N`.
    pub value_coeff: Vec<f64>,
}

pub fn scaled_backward_induction(problem: &Problem, n_steps: usize, q: usize) -> Result<ScaledOracle> {
    problem.validate()?;
    let gamma = match problem.utility {
        UtilitySpec::Log { .. } => None,
        UtilitySpec::Power { gamma, .. } => Some(gamma),
        UtilitySpec::Exponential { .. } => {
            return Err(Error::Unsupported("the coefficient-space recursion needs log or power utility".into()))
        }
    };
    // Only the noise rule of this grid is used.
    let grid = MpeGrid::new(n_steps, (1..=5).map(|k| k as f64).collect(), WealthSpacing::Log, q, problem.market.noises())?;
    let n = n_steps;
    let eps = problem.horizon / n as f64;
    let thetas: Vec<f64> = (0..=n).map(|k| problem.discount.factor_unchecked(k as f64 * eps)).collect();
    let grads = stage_grads(problem, &grid, eps);
    let mut value_coeff = vec![0.0; n + 1];
    value_coeff[n] = problem.utility.bequest_weight();
    let mut propensity = vec![0.0; n];
    let mut weights = vec![Vec::new(); n];
    // b_{j+1,n} with Φ_{j+1,n}(x) = b x^γ/γ, for n = j+1 .. N−1 (power only).
    let mut b_next: Vec<f64> = Vec::new();
    let mut pi_prev = initial_exposure(problem, 1.0);
    for j in (0..n).rev() {
        let a = n - j - 1;
        let mut s_coef = thetas[a + 1] * value_coeff[j + 1];
        for k in 1..=a {
            let b = if gamma.is_none() { 1.0 } else { b_next[k - 1] };
            s_coef += h_coefficient(&thetas, a, k) * eps * b;
        }
        let psi = ScaledContinuation { gamma, s: s_coef };
        let stage = Stage {
            utility: problem.utility,
            weight_u: thetas[a],
            eps,
            mu0: problem.market.mu0(),
            grads: grads.clone(),
            weights: &grid.noise.weights,
            psi: &psi,
            scale: 1.0,
        };
        let sol = stage.solve(1.0, &pi_prev);
        if sol.contact {
            return Err(Error::NonConvergence {
                iterations: n - j,
                residuals: vec![sol.c],
            });
        }
        match gamma {
            None => value_coeff[j] = (thetas[a] * eps + s_coef) / thetas[a],
            Some(g) => {
                let eg: f64 = (0..grid.noise.len())
                    .map(|qi| grid.noise.weights[qi] * stage.next_wealth(1.0, sol.c, &sol.pi, qi).powf(g))
                    .sum();
                value_coeff[j] = (thetas[a] * eps * sol.c.powf(g) + s_coef * eg) / thetas[a];
                let mut b = Vec::with_capacity(b_next.len() + 1);
                b.push(sol.c.powf(g));
                b.extend(b_next.iter().map(|v| v * eg));
                b_next = b;
            }
        }
        propensity[j] = sol.c;
        weights[j] = sol.pi.clone();
        pi_prev = sol.pi;
    }
    Ok(ScaledOracle {
        n_steps: n,
        horizon: problem.horizon,
        propensity,
        weights,
        value_coeff,
    })
}

impl OracleResult {
    pub fn grid(&self) -> &MpeGrid {
        &self.grid
    }

    pub fn step(&self) -> f64 {
        self.stages.horizon / self.stages.n_steps as f64
    }

    fn check_wealth(&self, wealth: f64) -> Result<()> {
        let w = &self.stages.wealth;
        if !(wealth >= w[0] && wealth <= w[w.len() - 1]) {
            return Err(Error::domain(format!("W = {wealth} lies outside the grid hull [{}, {}]", w[0], w[w.len() - 1])));
        }
        Ok(())
    }

    fn stage_policy(&self, j: usize, wealth: f64) -> Result<(f64, Vec<f64>)> {
        let w = &self.stages.wealth;
        if let Ok(i) = w.binary_search_by(|x| x.total_cmp(&wealth)) {
            return Ok((self.stages.consumption[j][i], self.stages.exposure[j][i].clone()));
        }
        let c = Pchip::new(w.clone(), self.stages.consumption[j].clone())?.eval(wealth);
        let m = self.problem.market.assets();
        let pi = (0..m)
            .map(|k| {
                let col: Vec<f64> = self.stages.exposure[j].iter().map(|p| p[k]).collect();
                Pchip::new(w.clone(), col).map(|p| p.eval(wealth))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((c, pi))
    }

    /// Consumption and portfolio weights at `(t, W)`. Between stages the two
    /// neighbouring stage rules are blended linearly; after the last decision
    /// date the last rule is held.
    pub fn extract_policy(&self, t: f64, wealth: f64) -> Result<(f64, Vec<f64>)> {
        self.check_wealth(wealth)?;
        if !(0.0..=self.stages.horizon).contains(&t) {
            return Err(Error::domain(format!("t = {t} lies outside [0, {}]", self.stages.horizon)));
        }
        let n = self.stages.n_steps;
        let pos = t / self.step();
        let j = (pos.floor() as usize).min(n - 1);
        let frac = if j + 1 >= n { 0.0 } else { pos - j as f64 };
        let (c0, p0) = self.stage_policy(j, wealth)?;
        let (c, pi) = if frac > 0.0 {
            let (c1, p1) = self.stage_policy(j + 1, wealth)?;
            (
                (1.0 - frac) * c0 + frac * c1,
                p0.iter().zip(&p1).map(|(a, b)| (1.0 - frac) * a + frac * b).collect(),
            )
        } else {
            (c0, p0)
        };
        Ok((c, pi.iter().map(|p| p / wealth).collect()))
    }

    /// Consumption at `(0, W0)`.
    pub fn initial_consumption(&self) -> Result<f64> {
        Ok(self.stage_policy(0, self.problem.w0)?.0)
    }

    /// The bracketed stage-`j` expectation for a candidate `(c, w)`, using the
    /// stored continuation function and this grid's noise rule.
    pub fn stage_objective(&self, j: usize, wealth: f64, c: f64, weights: &[f64]) -> Result<f64> {
        self.stage_objective_with(j, wealth, c, weights, &self.grid.noise)
    }

    /// As [`Self::stage_objective`] with a different noise rule.
    pub fn stage_objective_with(&self, j: usize, wealth: f64, c: f64, weights: &[f64], noise: &GaussHermite) -> Result<f64> {
        if j >= self.stages.n_steps {
            return Err(Error::domain(format!("stage {j} out of range")));
        }
        self.check_wealth(wealth)?;
        let n = self.stages.n_steps;
        let eps = self.step();
        let weight_u = match self.recursion {
            Recursion::Equilibrium => self.thetas[n - j - 1],
            Recursion::Standard(_) => 1.0,
        };
        let psi = NodeFunction::new(&self.stages.wealth, &self.psi[j], self.grid.spacing)?;
        let mut grid = self.grid.clone();
        grid.noise = noise.clone();
        let stage = Stage {
            utility: self.problem.utility,
            weight_u,
            eps,
            mu0: self.problem.market.mu0(),
            grads: stage_grads(&self.problem, &grid, eps),
            weights: &noise.weights,
            psi: &psi,
            scale: self.problem.w0.abs().max(1.0),
        };
        let pi: Vec<f64> = weights.iter().map(|w| w * wealth).collect();
        Ok(stage.objective(wealth, c, &pi))
    }

    /// Rows `j, t, W, c, w_1..w_m, V, H` for every stage and node.
    pub fn table(&self) -> Vec<Vec<f64>> {
        let eps = self.step();
        let mut rows = Vec::new();
        for j in 0..self.stages.n_steps {
            for (i, &x) in self.stages.wealth.iter().enumerate() {
                let mut row = vec![j as f64, j as f64 * eps, x, self.stages.consumption[j][i]];
                row.extend(self.stages.exposure[j][i].iter().map(|p| if x == 0.0 { f64::NAN } else { p / x }));
                row.push(self.stages.value[j][i]);
                row.push(self.stages.h[j][i]);
                rows.push(row);
            }
        }
        rows
    }
}

/// `2c_{2N} − c_N`.
pub fn richardson(coarse: f64, fine: f64) -> f64 {
    2.0 * fine - coarse
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n_steps: usize,
    pub consumption: f64,
    pub reference: Option<f64>,
    /// `|c_N − reference| / |reference|`.
    pub relative_gap: Option<f64>,
    /// Previous gap over this gap.
    pub ratio: Option<f64>,
    /// Richardson value from this row and the previous one.
    pub richardson: Option<f64>,
    pub contact_fraction: f64,
}

/// Runs the equilibrium recursion for each step count and tabulates `c(W0, 0)`.
pub fn convergence_study(
    problem: &Problem,
    cfg: &OracleConfig,
    steps: &[usize],
    reference: Option<f64>,
) -> Result<(Vec<ConvergenceRow>, Vec<OracleResult>)> {
    let mut rows: Vec<ConvergenceRow> = Vec::new();
    let mut results = Vec::new();
    for &n in steps {
        let grid = MpeGrid::standard(
            problem,
            &OracleConfig {
                n_steps: n,
                ..cfg.clone()
            },
        )?;
        let res = backward_induction(problem, &grid)?;
        let c = res.initial_consumption()?;
        let gap = reference.map(|r| (c - r).abs() / r.abs());
        let prev = rows.last();
        let row = ConvergenceRow {
            n_steps: n,
            consumption: c,
            reference,
            relative_gap: gap,
            ratio: match (prev.and_then(|p| p.relative_gap), gap) {
                (Some(p), Some(g)) if g > 0.0 => Some(p / g),
                _ => None,
            },
            richardson: prev.map(|p| richardson(p.consumption, c)),
            contact_fraction: res.diagnostics.contact_fraction(),
        };
        rows.push(row);
        results.push(res);
    }
    Ok((rows, results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closed_policies::log_constant_alpha;
    use crate::discount::DiscountModel;
    use crate::market::MarketModel;

    fn log_problem(discount: DiscountModel, a: f64) -> Problem {
        Problem::new(
            discount,
            MarketModel::single(0.03, 0.08, 0.2).unwrap(),
            UtilitySpec::log(a).unwrap(),
            1.0,
            1.0,
        )
        .unwrap()
    }

    fn small_grid(problem: &Problem, n: usize) -> MpeGrid {
        MpeGrid::standard(
            problem,
            &OracleConfig {
                n_steps: n,
                noise_nodes: 7,
                wealth_nodes: Some(41),
                wealth_span: Some(3.0),
            },
        )
        .unwrap()
    }

    #[test]
    fn coefficients_vanish_for_exponential_discount() {
        let d = DiscountModel::constant(0.1).unwrap();
        let thetas: Vec<f64> = (0..20).map(|k| d.factor(0.05 * k as f64).unwrap()).collect();
        for a in 0..10 {
            for k in 1..9 {
                assert!(h_coefficient(&thetas, a, k).abs() < 4e-16);
            }
        }
    }

    #[test]
    fn terminal_stage_is_bequest_and_h_matches_utility() {
        let p = log_problem(DiscountModel::mixture(vec![0.5, 0.5], vec![0.05, 0.15]).unwrap(), 1.0);
        let res = backward_induction(&p, &small_grid(&p, 8)).unwrap();
        for (x, v) in res.stages.wealth.iter().zip(&res.stages.value[8]) {
            assert_eq!(*v, p.utility.bequest(*x));
        }
        for j in 0..8 {
            for (c, h) in res.stages.consumption[j].iter().zip(&res.stages.h[j]) {
                assert_eq!(*h, c.ln());
            }
        }
    }

    #[test]
    fn last_stage_objective_is_utility_plus_discounted_bequest() {
        let p = log_problem(DiscountModel::mixture(vec![0.5, 0.5], vec![0.05, 0.15]).unwrap(), 1.0);
        let grid = small_grid(&p, 8);
        let res = backward_induction(&p, &grid).unwrap();
        let eps: f64 = 1.0 / 8.0;
        let (x, c, w): (f64, f64, f64) = (1.0, 0.9, 1.1);
        let direct: f64 = (0..grid.noise.len())
            .map(|q| {
                let xi = grid.noise.node(q)[0];
                let next = x + (0.03 * x + w * x * 0.05 - c) * eps + eps.sqrt() * w * x * 0.2 * xi;
                grid.noise.weights[q] * next.ln()
            })
            .sum();
        let theta1 = p.discount.factor(eps).unwrap();
        let expected = c.ln() * eps + theta1 * direct;
        assert!((res.stage_objective(7, x, c, &[w]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn richer_noise_rule_barely_moves_objective() {
        let p = log_problem(DiscountModel::mixture(vec![0.5, 0.5], vec![0.05, 0.15]).unwrap(), 1.0);
        let res = backward_induction(&p, &small_grid(&p, 8)).unwrap();
        let finer = GaussHermite::new(9, 1).unwrap();
        for j in [0, 4, 7] {
            let a = res.stage_objective(j, 1.3, 1.2, &[1.25]).unwrap();
            let b = res.stage_objective_with(j, 1.3, 1.2, &[1.25], &finer).unwrap();
            assert!((a - b).abs() < 1e-8, "{}", (a - b).abs());
        }
    }

    #[test]
    fn constant_rate_matches_classical_dp() {
        let p = log_problem(DiscountModel::constant(0.1).unwrap(), 1.0);
        let grid = small_grid(&p, 8);
        let mpe = backward_induction(&p, &grid).unwrap();
        let dp = classical_backward_induction(&p, &grid, 0.1).unwrap();
        for j in 0..=8 {
            let scale = dp.stages.value[j].iter().map(|v| v.abs()).fold(1.0, f64::max);
            for (a, b) in mpe.stages.value[j].iter().zip(&dp.stages.value[j]) {
                assert!((a - b).abs() < 1e-12 * scale, "j={j} {a} {b}");
            }
        }
    }

    #[test]
    fn log_policy_is_scale_free() {
        let p = log_problem(DiscountModel::constant(0.1).unwrap(), 1.0);
        let res = backward_induction(&p, &small_grid(&p, 16)).unwrap();
        let w: Vec<f64> = res.stages.exposure[0]
            .iter()
            .zip(&res.stages.wealth)
            .map(|(pi, x)| pi[0] / x)
            .collect();
        let (lo, hi) = w.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
        assert!(hi - lo < 1e-3, "{lo} {hi}");
        let c0 = res.initial_consumption().unwrap();
        let merton = 1.0 / log_constant_alpha(0.1, 1.0, 0.0, 1.0).unwrap();
        assert!((c0 - merton).abs() / merton < 2e-2);
    }

    #[test]
    fn deterministic_cake_eating() {
        // No excess return: exposure is zero and wealth evolves deterministically.
        let d = DiscountModel::constant(0.1).unwrap();
        let m = MarketModel::single(0.03, 0.03, 0.2).unwrap();
        let p = Problem::new(d, m, UtilitySpec::log(1.0).unwrap(), 1.0, 1.0).unwrap();
        let n = 16;
        let res = backward_induction(&p, &small_grid(&p, n)).unwrap();
        // V_j = A_j ln x + const with A_N = a; the stage problem
        // max ln c ε + δ A ln((1+μ0ε)x − cε) gives c = (1+μ0ε)x / (ε + δA)
        // and A_j = ε + δ A_{j+1}.
        let eps = 1.0 / n as f64;
        let delta = (-0.1 * eps).exp();
        let mut big_a = 1.0;
        let mut c_ratio = 0.0;
        for _ in 0..n {
            c_ratio = (1.0 + 0.03 * eps) / (eps + delta * big_a);
            big_a = eps + delta * big_a;
        }
        let c0 = res.initial_consumption().unwrap();
        assert!((c0 - c_ratio).abs() < 1e-6, "{c0} {c_ratio}");
        assert!(res.stages.exposure[0].iter().all(|p| p[0].abs() < 1e-6));
    }

    #[test]
    fn extract_policy_contract() {
        let p = log_problem(DiscountModel::constant(0.1).unwrap(), 1.0);
        let res = backward_induction(&p, &small_grid(&p, 8)).unwrap();
        let x = res.stages.wealth[17];
        let (c, w) = res.extract_policy(0.0, x).unwrap();
        assert_eq!(c, res.stages.consumption[0][17]);
        assert_eq!(w[0], res.stages.exposure[0][17][0] / x);
        let (c_mid, _) = res.extract_policy(0.5 / 8.0, x).unwrap();
        let blend = 0.5 * (res.stages.consumption[0][17] + res.stages.consumption[1][17]);
        assert!((c_mid - blend).abs() < 1e-14);
        assert!(res.extract_policy(0.0, 1e6).is_err());
    }

    #[test]
    fn scaled_path_matches_grid_path() {
        let mix = DiscountModel::mixture(vec![0.5, 0.5], vec![0.05, 0.15]).unwrap();
        for utility in [UtilitySpec::log(1.0).unwrap(), UtilitySpec::power(0.5, 1.0).unwrap()] {
            let p = Problem::new(mix.clone(), MarketModel::single(0.03, 0.08, 0.2).unwrap(), utility, 1.0, 1.0).unwrap();
            let grid = small_grid(&p, 8);
            let res = backward_induction(&p, &grid).unwrap();
            let scaled = scaled_backward_induction(&p, 8, 7).unwrap();
            let mid = 20;
            let x = res.stages.wealth[mid];
            assert_eq!(x, 1.0);
            for j in 0..8 {
                let c = res.stages.consumption[j][mid];
                assert!((c - scaled.propensity[j]).abs() < 1e-6 * c, "{utility:?} j={j} {c} {}", scaled.propensity[j]);
                let w = res.stages.exposure[j][mid][0];
                assert!((w - scaled.weights[j][0]).abs() < 1e-6);
            }
        }
    }
}
