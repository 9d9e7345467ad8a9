//! Adaptive Dormand–Prince 5(4) integration of scalar ODEs along a node grid.

use crate::error::{Error, Result};

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Difference between the fifth- and fourth-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const MAX_STEPS_PER_INTERVAL: usize = 100_000;

/// Integrates `y' = f(t, y)` from `grid[0]` through each subsequent node and
/// returns the solution at every node. The grid may run in either direction.
pub fn solve_on_grid<F: Fn(f64, f64) -> f64>(f: F, grid: &[f64], y0: f64, tol: f64) -> Result<Vec<f64>> {
    let (ys, err) = solve_on_grid_partial(f, grid, y0, tol);
    match err {
        Some(e) => Err(e),
        None => Ok(ys),
    }
}

/// Like [`solve_on_grid`], but on failure also returns the nodes reached.
pub fn solve_on_grid_partial<F: Fn(f64, f64) -> f64>(f: F, grid: &[f64], y0: f64, tol: f64) -> (Vec<f64>, Option<Error>) {
    if grid.is_empty() {
        return (Vec::new(), None);
    }
    let mut out = Vec::with_capacity(grid.len());
    out.push(y0);
    let mut y = y0;
    let mut h_guess = f64::NAN;
    for w in grid.windows(2) {
        match integrate_interval(&f, w[0], w[1], y, tol, h_guess) {
            Ok((yn, h_next)) => {
                y = yn;
                h_guess = h_next;
                out.push(y);
            }
            Err(e) => return (out, Some(e)),
        }
    }
    (out, None)
}

fn integrate_interval<F: Fn(f64, f64) -> f64>(
    f: &F,
    ta: f64,
    tb: f64,
    mut y: f64,
    tol: f64,
    h_guess: f64,
) -> Result<(f64, f64)> {
    let span = tb - ta;
    if span == 0.0 {
        return Ok((y, h_guess));
    }
    let dir = span.signum();
    let mut h = if h_guess.is_finite() && h_guess != 0.0 {
        h_guess.abs().min(span.abs()) * dir
    } else {
        span
    };
    let mut t = ta;
    let mut k1 = f(t, y);
    let mut last_ok = h;
    for _ in 0..MAX_STEPS_PER_INTERVAL {
        let remaining = tb - t;
        if remaining * dir <= 1e-15 * span.abs().max(t.abs()) {
            return Ok((y, last_ok));
        }
        let clipped = h.abs() >= remaining.abs();
        if clipped {
            h = remaining;
        }
        let k2 = f(t + h / 5.0, y + h * A21 * k1);
        let k3 = f(t + 3.0 * h / 10.0, y + h * (A31 * k1 + A32 * k2));
        let k4 = f(t + 4.0 * h / 5.0, y + h * (A41 * k1 + A42 * k2 + A43 * k3));
        let k5 = f(t + 8.0 * h / 9.0, y + h * (A51 * k1 + A52 * k2 + A53 * k3 + A54 * k4));
        let k6 = f(t + h, y + h * (A61 * k1 + A62 * k2 + A63 * k3 + A64 * k4 + A65 * k5));
        let y5 = y + h * (B1 * k1 + B3 * k3 + B4 * k4 + B5 * k5 + B6 * k6);
        let k7 = f(t + h, y5);
        let err = (h * (E1 * k1 + E3 * k3 + E4 * k4 + E5 * k5 + E6 * k6 + E7 * k7)).abs();
        if !y5.is_finite() || !err.is_finite() {
            h *= 0.25;
            if h.abs() < 1e-14 * span.abs() {
                return Err(Error::Ode(format!("non-finite state near t = {t}")));
            }
            continue;
        }
        let scale = tol * (1.0 + y.abs().max(y5.abs()));
        let ratio = err / scale;
        if ratio <= 1.0 {
            t = if clipped { tb } else { t + h };
            y = y5;
            k1 = k7;
            if !clipped {
                last_ok = h;
            }
            let grow = if ratio == 0.0 { 5.0 } else { (0.9 * ratio.powf(-0.2)).clamp(0.2, 5.0) };
            h *= grow;
        } else {
            h *= (0.9 * ratio.powf(-0.2)).clamp(0.1, 0.9);
            if h.abs() < 1e-14 * span.abs() {
                return Err(Error::Ode(format!("step size underflow near t = {t}")));
            }
        }
    }
    Err(Error::Ode(format!("step budget exhausted on [{ta}, {tb}]")))
}
