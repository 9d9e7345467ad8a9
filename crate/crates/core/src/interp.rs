//! One-dimensional interpolants: a clamped cubic spline for smooth coefficient
//! grids and a monotone piecewise-cubic Hermite (PCHIP) interpolant for the
//! wealth-grid functions of the discrete oracle.

use crate::error::{Error, Result};

/// Locates knot intervals, with O(1) lookup on uniform grids.
#[derive(Debug, Clone)]
struct Knots {
    x: Vec<f64>,
    uniform: Option<(f64, f64)>,
}

impl Knots {
    fn new(x: Vec<f64>) -> Result<Self> {
        if x.len() < 2 {
            return Err(Error::domain("interpolation needs at least two knots"));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("interpolation knots must be finite and strictly increasing"));
        }
        let n = x.len();
        let h = (x[n - 1] - x[0]) / (n - 1) as f64;
        let scale = x[0].abs().max(x[n - 1].abs()).max(h);
        let uniform = x
            .iter()
            .enumerate()
            .all(|(i, &v)| (v - (x[0] + i as f64 * h)).abs() <= 1e-12 * scale)
            .then_some((x[0], h));
        Ok(Knots { x, uniform })
    }

    /// Index `i` with `x[i] <= t < x[i+1]`, clamped to the first/last interval.
    fn interval(&self, t: f64) -> usize {
        let n = self.x.len();
        let i = match self.uniform {
            Some((x0, h)) => {
                let k = ((t - x0) / h).floor();
                if k < 0.0 {
                    0
                } else {
                    (k as usize).min(n - 2)
                }
            }
            None => self.x.partition_point(|&v| v <= t).saturating_sub(1).min(n - 2),
        };
        // Guard against rounding on uniform lookup.
        if i + 1 < n - 1 && t >= self.x[i + 1] {
            i + 1
        } else if i > 0 && t < self.x[i] {
            i - 1
        } else {
            i
        }
    }
}

/// Derivative at `x[0]` of the cubic through the first four points.
fn lagrange_end_slope(x: &[f64], y: &[f64]) -> f64 {
    let k = x.len().min(4);
    let x0 = x[0];
    let mut slope = 0.0;
    for j in 0..k {
        // d/dx of the j-th Lagrange basis at x0.
        let mut denom = 1.0;
        for m in 0..k {
            if m != j {
                denom *= x[j] - x[m];
            }
        }
        let mut num = 0.0;
        for skip in 0..k {
            if skip == j {
                continue;
            }
            let mut prod = 1.0;
            for (m, &xm) in x.iter().enumerate().take(k) {
                if m != j && m != skip {
                    prod *= x0 - xm;
                }
            }
            num += prod;
        }
        slope += y[j] * num / denom;
    }
    slope
}

/// Cubic spline with end slopes taken from one-sided cubic fits, which keeps
/// the interpolation error fourth order up to the boundary.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    knots: Knots,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl CubicSpline {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::domain("spline abscissae and ordinates differ in length"));
        }
        let knots = Knots::new(x)?;
        let x = &knots.x;
        let n = x.len();
        if n == 2 {
            return Ok(CubicSpline {
                knots,
                y,
                m: vec![0.0; 2],
            });
        }
        let s0 = lagrange_end_slope(x, &y);
        let xr: Vec<f64> = x.iter().rev().copied().collect();
        let yr: Vec<f64> = y.iter().rev().copied().collect();
        let sn = lagrange_end_slope(&xr, &yr);

        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; n];
        let mut lower = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        diag[0] = 2.0 * h[0];
        upper[0] = h[0];
        rhs[0] = 6.0 * ((y[1] - y[0]) / h[0] - s0);
        for i in 1..n - 1 {
            lower[i] = h[i - 1];
            diag[i] = 2.0 * (h[i - 1] + h[i]);
            upper[i] = h[i];
            rhs[i] = 6.0 * ((y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1]);
        }
        lower[n - 1] = h[n - 2];
        diag[n - 1] = 2.0 * h[n - 2];
        rhs[n - 1] = 6.0 * (sn - (y[n - 1] - y[n - 2]) / h[n - 2]);

        // Thomas algorithm.
        for i in 1..n {
            let w = lower[i] / diag[i - 1];
            diag[i] -= w * upper[i - 1];
            rhs[i] -= w * rhs[i - 1];
        }
        let mut m = vec![0.0; n];
        m[n - 1] = rhs[n - 1] / diag[n - 1];
        for i in (0..n - 1).rev() {
            m[i] = (rhs[i] - upper[i] * m[i + 1]) / diag[i];
        }
        Ok(CubicSpline { knots, y, m })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots.x
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    pub fn eval(&self, t: f64) -> f64 {
        let i = self.knots.interval(t);
        let x = &self.knots.x;
        let h = x[i + 1] - x[i];
        let a = (x[i + 1] - t) / h;
        let b = 1.0 - a;
        a * self.y[i]
            + b * self.y[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let i = self.knots.interval(t);
        let x = &self.knots.x;
        let h = x[i + 1] - x[i];
        let a = (x[i + 1] - t) / h;
        let b = 1.0 - a;
        (self.y[i + 1] - self.y[i]) / h - (3.0 * a * a - 1.0) / 6.0 * h * self.m[i]
            + (3.0 * b * b - 1.0) / 6.0 * h * self.m[i + 1]
    }

    /// Exact integral of the spline from the first knot to every knot.
    pub fn cumulative_integral(&self) -> Vec<f64> {
        let x = &self.knots.x;
        let mut out = Vec::with_capacity(x.len());
        out.push(0.0);
        let mut acc = 0.0;
        for i in 0..x.len() - 1 {
            let h = x[i + 1] - x[i];
            acc += 0.5 * h * (self.y[i] + self.y[i + 1]) - h * h * h * (self.m[i] + self.m[i + 1]) / 24.0;
            out.push(acc);
        }
        out
    }
}

/// Value and first two derivatives of an interpolant at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

/// Monotone piecewise-cubic Hermite interpolant (Fritsch–Carlson slopes).
///
/// Reproduces linear data exactly and extrapolates linearly with the end slope.
#[derive(Debug, Clone)]
pub struct Pchip {
    knots: Knots,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::domain("pchip abscissae and ordinates differ in length"));
        }
        let knots = Knots::new(x)?;
        let x = &knots.x;
        let n = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d[0] = delta[0];
            d[1] = delta[0];
        } else {
            for k in 1..n - 1 {
                let (a, b) = (delta[k - 1], delta[k]);
                if a == 0.0 || b == 0.0 || a.signum() != b.signum() {
                    d[k] = 0.0;
                } else if a == b {
                    d[k] = a;
                } else {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    d[k] = (w1 + w2) / (w1 / a + w2 / b);
                }
            }
            d[0] = end_slope(h[0], h[1], delta[0], delta[1]);
            d[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Ok(Pchip { knots, y, d })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots.x
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    pub fn lower(&self) -> f64 {
        self.knots.x[0]
    }

    pub fn upper(&self) -> f64 {
        *self.knots.x.last().unwrap()
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.jet(t).value
    }

    pub fn jet(&self, t: f64) -> Jet {
        let x = &self.knots.x;
        let n = x.len();
        if t < x[0] {
            return Jet {
                value: self.y[0] + self.d[0] * (t - x[0]),
                d1: self.d[0],
                d2: 0.0,
            };
        }
        if t > x[n - 1] {
            return Jet {
                value: self.y[n - 1] + self.d[n - 1] * (t - x[n - 1]),
                d1: self.d[n - 1],
                d2: 0.0,
            };
        }
        let i = self.knots.interval(t);
        let h = x[i + 1] - x[i];
        let s = (t - x[i]) / h;
        let (y0, y1, d0, d1) = (self.y[i], self.y[i + 1], self.d[i] * h, self.d[i + 1] * h);
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let value = h00 * y0 + h10 * d0 + h01 * y1 + h11 * d1;
        let dv = (6.0 * s2 - 6.0 * s) * y0 + (3.0 * s2 - 4.0 * s + 1.0) * d0 + (-6.0 * s2 + 6.0 * s) * y1 + (3.0 * s2 - 2.0 * s) * d1;
        let ddv = (12.0 * s - 6.0) * y0 + (6.0 * s - 4.0) * d0 + (6.0 - 12.0 * s) * y1 + (6.0 * s - 2.0) * d1;
        Jet {
            value,
            d1: dv / h,
            d2: ddv / (h * h),
        }
    }
}

fn end_slope(h0: f64, h1: f64, m0: f64, m1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
    if d.signum() != m0.signum() || m0 == 0.0 {
        0.0
    } else if m0.signum() != m1.signum() && d.abs() > 3.0 * m0.abs() {
        3.0 * m0
    } else {
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spline_reproduces_cubics() {
        let x: Vec<f64> = (0..11).map(|i| i as f64 * 0.3).collect();
        let f = |t: f64| 2.0 * t * t * t - t * t + 0.5;
        let y = x.iter().map(|&t| f(t)).collect();
        let s = CubicSpline::new(x, y).unwrap();
        for k in 0..100 {
            let t = k as f64 * 0.03;
            assert!((s.eval(t) - f(t)).abs() < 1e-11, "t={t}");
        }
        let cum = s.cumulative_integral();
        let exact = |t: f64| 0.5 * t.powi(4) - t.powi(3) / 3.0 + 0.5 * t;
        assert!((cum[10] - exact(3.0)).abs() < 1e-11);
    }

    #[test]
    fn spline_fourth_order_on_exponential() {
        let n = 1001;
        let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let y = x.iter().map(|t| (-3.0 * t).exp()).collect();
        let s = CubicSpline::new(x, y).unwrap();
        let worst = (0..1000)
            .map(|k| {
                let t = k as f64 / 999.0;
                (s.eval(t) - (-3.0 * t).exp()).abs()
            })
            .fold(0.0, f64::max);
        assert!(worst < 1e-11, "worst={worst}");
    }

    #[test]
    fn pchip_exact_on_linear_data() {
        let x: Vec<f64> = (0..21).map(|i| -1.0 + 0.1 * i as f64).collect();
        let y = x.iter().map(|t| 3.0 * t - 2.0).collect();
        let p = Pchip::new(x, y).unwrap();
        for t in [-1.5, -0.93, 0.0, 0.41, 1.0, 2.2] {
            let j = p.jet(t);
            assert!((j.value - (3.0 * t - 2.0)).abs() < 1e-13);
            assert!((j.d1 - 3.0).abs() < 1e-12);
            assert!(j.d2.abs() < 1e-9);
        }
    }

    #[test]
    fn pchip_preserves_monotonicity() {
        let x = vec![0.0, 1.0, 2.0, 3.0, 4.0];
        let y = vec![0.0, 0.1, 0.1, 5.0, 5.1];
        let p = Pchip::new(x, y).unwrap();
        let mut prev = p.eval(0.0);
        for k in 1..=400 {
            let v = p.eval(k as f64 * 0.01);
            assert!(v >= prev - 1e-15);
            prev = v;
        }
    }

    #[test]
    fn rejects_unsorted_knots() {
        assert!(Pchip::new(vec![0.0, 0.0, 1.0], vec![1.0, 2.0, 3.0]).is_err());
        assert!(CubicSpline::new(vec![1.0, 0.5], vec![1.0, 2.0]).is_err());
    }
}
