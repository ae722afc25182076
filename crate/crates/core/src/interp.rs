//! One-dimensional interpolation kernels shared by the surfaces.

/// Index `i` such that `xs[i] <= x < xs[i + 1]`, clamped to `[0, len - 2]`.
pub(crate) fn segment(xs: &[f64], x: f64) -> usize {
    debug_assert!(xs.len() >= 2);
    let i = xs.partition_point(|&v| v <= x);
    i.saturating_sub(1).min(xs.len() - 2)
}

/// Linear interpolation with flat extrapolation outside the knot range.
pub(crate) fn linear_flat(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if n == 1 || x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let i = segment(xs, x);
    let t = (x - xs[i]) / (xs[i + 1] - xs[i]);
    ys[i] + t * (ys[i + 1] - ys[i])
}

/// Natural cubic spline on fixed knots.
///
/// The tridiagonal system for the knot second derivatives depends only on
/// the knots, so its Thomas factorisation is computed once and reused for
/// every right-hand side.
#[derive(Debug, Clone)]
pub(crate) struct SplineBasis {
    knots: Vec<f64>,
    // Modified super-diagonal and pivots of the interior system.
    c_prime: Vec<f64>,
    pivots: Vec<f64>,
}

impl SplineBasis {
    pub(crate) fn new(knots: Vec<f64>) -> Self {
        let n = knots.len();
        let m = n.saturating_sub(2);
        let mut c_prime = vec![0.0; m];
        let mut pivots = vec![0.0; m];
        for k in 0..m {
            let i = k + 1;
            let h0 = knots[i] - knots[i - 1];
            let h1 = knots[i + 1] - knots[i];
            let diag = 2.0 * (h0 + h1);
            let sub = h0;
            let pivot = if k == 0 { diag } else { diag - sub * c_prime[k - 1] };
            pivots[k] = pivot;
            c_prime[k] = h1 / pivot;
        }
        Self { knots, c_prime, pivots }
    }

    pub(crate) fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Knot second derivatives for the given values (natural end conditions).
    pub(crate) fn second_derivatives(&self, values: &[f64], out: &mut Vec<f64>) {
        let n = self.knots.len();
        out.clear();
        out.resize(n, 0.0);
        if n < 3 {
            return;
        }
        let x = &self.knots;
        let m = n - 2;
        // forward sweep
        let mut d_prime = vec![0.0; m];
        for k in 0..m {
            let i = k + 1;
            let h0 = x[i] - x[i - 1];
            let h1 = x[i + 1] - x[i];
            let rhs = 6.0 * ((values[i + 1] - values[i]) / h1 - (values[i] - values[i - 1]) / h0);
            d_prime[k] = if k == 0 { rhs / self.pivots[k] } else { (rhs - h0 * d_prime[k - 1]) / self.pivots[k] };
        }
        // back substitution
        out[m] = d_prime[m - 1];
        for k in (0..m - 1).rev() {
            out[k + 1] = d_prime[k] - self.c_prime[k] * out[k + 2];
        }
    }

    /// Value and first two derivatives at `x`; `x` must lie inside the knots.
    pub(crate) fn eval(&self, values: &[f64], second: &[f64], x: f64) -> (f64, f64, f64) {
        let xs = &self.knots;
        let i = segment(xs, x);
        let h = xs[i + 1] - xs[i];
        let a = (xs[i + 1] - x) / h;
        let b = (x - xs[i]) / h;
        let (m0, m1) = (second[i], second[i + 1]);
        let (y0, y1) = (values[i], values[i + 1]);
        let f = a * y0 + b * y1 + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0;
        let df = (y1 - y0) / h - (3.0 * a * a - 1.0) / 6.0 * h * m0 + (3.0 * b * b - 1.0) / 6.0 * h * m1;
        let d2f = a * m0 + b * m1;
        (f, df, d2f)
    }
}

/// Shape-preserving piecewise cubic Hermite interpolant (Fritsch-Carlson
/// slopes with the three-point end formula). Monotone data gives a monotone
/// interpolant.
#[derive(Debug, Clone)]
pub(crate) struct Pchip {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl Pchip {
    pub(crate) fn new(xs: Vec<f64>, ys: Vec<f64>) -> Self {
        let n = xs.len();
        debug_assert!(n >= 2 && n == ys.len());
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
        let mut slopes = vec![0.0; n];
        if n == 2 {
            slopes[0] = delta[0];
            slopes[1] = delta[0];
        } else {
            for i in 1..n - 1 {
                let (d0, d1) = (delta[i - 1], delta[i]);
                if d0 * d1 <= 0.0 {
                    slopes[i] = 0.0;
                } else {
                    let w1 = 2.0 * h[i] + h[i - 1];
                    let w2 = h[i] + 2.0 * h[i - 1];
                    slopes[i] = (w1 + w2) / (w1 / d0 + w2 / d1);
                }
            }
            slopes[0] = end_slope(h[0], h[1], delta[0], delta[1]);
            slopes[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Self { xs, ys, slopes }
    }

    /// Value and first derivative at `x` inside the knot range.
    pub(crate) fn eval(&self, x: f64) -> (f64, f64) {
        let i = segment(&self.xs, x);
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let (y0, y1) = (self.ys[i], self.ys[i + 1]);
        let (m0, m1) = (self.slopes[i] * h, self.slopes[i + 1] * h);
        let t2 = t * t;
        let t3 = t2 * t;
        let f =
            (2.0 * t3 - 3.0 * t2 + 1.0) * y0 + (t3 - 2.0 * t2 + t) * m0 + (-2.0 * t3 + 3.0 * t2) * y1 + (t3 - t2) * m1;
        let df = ((6.0 * t2 - 6.0 * t) * y0
            + (3.0 * t2 - 4.0 * t + 1.0) * m0
            + (-6.0 * t2 + 6.0 * t) * y1
            + (3.0 * t2 - 2.0 * t) * m1)
            / h;
        (f, df)
    }

    pub(crate) fn last_secant(&self) -> f64 {
        let n = self.xs.len();
        (self.ys[n - 1] - self.ys[n - 2]) / (self.xs[n - 1] - self.xs[n - 2])
    }
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d.signum() != d0.signum() {
        0.0
    } else if d0.signum() != d1.signum() && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}
