//! One-dimensional forward Kolmogorov solver for the deterministic-rate
//! local-vol model, used as an independent check on the Monte-Carlo engine.
//!
//! The density of `x = ln S` is evolved with a finite-volume Crank-Nicolson
//! scheme and zero-flux walls, so the discrete mass is conserved exactly.

use std::path::Path;

use crate::curves::{write_file, DiscountCurve};
use crate::dupire::{LeverageSurface, SurfaceKind, MAX_VARIANCE};
use crate::error::{Error, Result};

/// Densities below this are treated as a sign of instability.
pub const NEGATIVE_DENSITY_TOLERANCE: f64 = 1e-10;

/// Discretisation controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpSettings {
    /// Number of log-spot cells.
    pub n_space: usize,
    /// Half-width of the log-spot domain in standard deviations at the last
    /// kept time.
    pub n_sd: f64,
    pub dt_max: f64,
    /// Leading Crank-Nicolson steps replaced by two implicit half steps each.
    pub rannacher_steps: usize,
}

impl Default for FpSettings {
    fn default() -> Self {
        Self { n_space: 801, n_sd: 8.0, dt_max: 2e-3, rannacher_steps: 2 }
    }
}

/// Marginal T-forward densities `q(S)` of the spot at the kept times.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    s_grid: Vec<f64>,
    times: Vec<f64>,
    q_values: Vec<Vec<f64>>,
}

impl DensityGrid {
    pub fn s_grid(&self) -> &[f64] {
        &self.s_grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn q_values(&self) -> &[Vec<f64>] {
        &self.q_values
    }

    fn time_index(&self, t: f64) -> Result<usize> {
        self.times.iter().position(|&v| (v - t).abs() <= 1e-12 * t.max(1.0)).ok_or(Error::NotOnGrid(t))
    }

    pub fn density(&self, t: f64) -> Result<&[f64]> {
        Ok(&self.q_values[self.time_index(t)?])
    }

    /// Trapezoidal `∫ f(S) q(S) dS`.
    pub fn expectation(&self, t: f64, f: impl Fn(f64) -> f64) -> Result<f64> {
        let q = self.density(t)?;
        let s = &self.s_grid;
        Ok((0..s.len() - 1).map(|j| 0.5 * (s[j + 1] - s[j]) * (f(s[j]) * q[j] + f(s[j + 1]) * q[j + 1])).sum())
    }

    pub fn mass(&self, t: f64) -> Result<f64> {
        self.expectation(t, |_| 1.0)
    }

    /// Writes `time,spot,density`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("time,spot,density\n");
        for (t, q) in self.times.iter().zip(&self.q_values) {
            for (s, v) in self.s_grid.iter().zip(q) {
                out.push_str(&format!("{t},{s},{v}\n"));
            }
        }
        write_file(path.as_ref(), &out)
    }
}

/// Solves the forward equation of `dS/S = (r^d - r^f) dt + σ_LV(S, t) dW`
/// from `S_0 = s0` and keeps the densities at `times`.
pub fn solve_forward_kolmogorov(
    sigma_lv: &LeverageSurface,
    domestic: &DiscountCurve,
    foreign: &DiscountCurve,
    s0: f64,
    times: &[f64],
    settings: &FpSettings,
) -> Result<DensityGrid> {
    if sigma_lv.kind() != SurfaceKind::LocalVol {
        return Err(Error::InvalidInput("the density solver needs a local-vol surface".into()));
    }
    if !(s0 > 0.0) || !s0.is_finite() {
        return Err(Error::Domain(format!("spot must be positive, got {s0}")));
    }
    if times.is_empty() || times.windows(2).any(|w| w[1] <= w[0]) || !(times[0] > 0.0) {
        return Err(Error::InvalidInput("kept times must be positive and strictly increasing".into()));
    }
    if settings.n_space < 3 || !(settings.dt_max > 0.0) || !(settings.n_sd > 0.0) {
        return Err(Error::InvalidInput("need at least 3 cells, dt_max > 0 and n_sd > 0".into()));
    }
    let sigma_max = sigma_lv.values().iter().flatten().fold(0.0_f64, |m, &v| m.max(v));
    if sigma_max * sigma_max > MAX_VARIANCE {
        return Err(Error::Domain(format!("local vol {sigma_max} is too large for the density grid")));
    }
    let t_max = *times.last().unwrap();
    let drift_span = (foreign.log_discount(t_max)? - domestic.log_discount(t_max)?).abs();
    let half = settings.n_sd * sigma_max.max(0.05) * t_max.sqrt() + drift_span;
    let n = settings.n_space;
    let h = 2.0 * half / n as f64;
    let x0 = s0.ln();
    let x: Vec<f64> = (0..n).map(|j| x0 - half + (j as f64 + 0.5) * h).collect();
    let s_grid: Vec<f64> = x.iter().map(|v| v.exp()).collect();

    // One-cell lognormal taken as the exact density at `t_start`, when the
    // diffusion has built up variance h²; centred so that E[S] = F(t_start).
    let sigma0 = sigma_lv.value(s0, 0.0);
    let t_start = (h * h / (sigma0 * sigma0).max(f64::MIN_POSITIVE)).min(0.5 * times[0]);
    let carry = foreign.log_discount(t_start)? - domestic.log_discount(t_start)?;
    let centre = x0 + carry - 0.5 * h * h;
    let mut p: Vec<f64> = x.iter().map(|v| (-0.5 * ((v - centre) / h).powi(2)).exp()).collect();
    let total: f64 = p.iter().sum::<f64>() * h;
    p.iter_mut().for_each(|v| *v /= total);

    let weights = trapezoid_weights(&s_grid);
    let to_q = |p: &[f64]| -> Vec<f64> { p.iter().zip(&weights).map(|(v, w)| (v * h / w).max(0.0)).collect() };

    let mut q_values = Vec::with_capacity(times.len());
    let mut t = t_start;
    let mut step = 0;
    let mut op = Tridiagonal::zeros(n);
    for &target in times {
        let n_steps = ((target - t) / settings.dt_max).ceil().max(1.0) as usize;
        let dt = (target - t) / n_steps as f64;
        for k in 0..n_steps {
            let t0 = t + dt * k as f64;
            let t1 = if k + 1 == n_steps { target } else { t0 + dt };
            let mu = (foreign.log_discount(t1)? - foreign.log_discount(t0)? - domestic.log_discount(t1)?
                + domestic.log_discount(t0)?)
                / (t1 - t0);
            let half_var: Vec<f64> = s_grid.iter().map(|&s| 0.5 * sigma_lv.value(s, 0.5 * (t0 + t1)).powi(2)).collect();
            assemble(&mut op, &half_var, mu, h);
            if step < settings.rannacher_steps {
                let mid = 0.5 * (t0 + t1);
                theta_step(&op, &mut p, 0.5 * (t1 - t0), 1.0);
                check_positive(&p, mid)?;
                theta_step(&op, &mut p, 0.5 * (t1 - t0), 1.0);
            } else {
                theta_step(&op, &mut p, t1 - t0, 0.5);
            }
            check_positive(&p, t1)?;
            step += 1;
        }
        t = target;
        q_values.push(to_q(&p));
    }
    Ok(DensityGrid { s_grid, times: times.to_vec(), q_values })
}

fn trapezoid_weights(s: &[f64]) -> Vec<f64> {
    let n = s.len();
    (0..n)
        .map(|j| {
            let lo = if j == 0 { s[0] } else { s[j - 1] };
            let hi = if j + 1 == n { s[n - 1] } else { s[j + 1] };
            0.5 * (hi - lo)
        })
        .collect()
}

fn check_positive(p: &[f64], time: f64) -> Result<()> {
    let min = p.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -NEGATIVE_DENSITY_TOLERANCE || !min.is_finite() {
        return Err(Error::SolverInstability { min, time });
    }
    Ok(())
}

/// Rows of `dp/dt = A p`.
struct Tridiagonal {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
}

impl Tridiagonal {
    fn zeros(n: usize) -> Self {
        Self { lower: vec![0.0; n], diag: vec![0.0; n], upper: vec![0.0; n] }
    }
}

// Flux through the face between cells j and j+1 is `cl p_j + cr p_{j+1}`;
// central where that keeps the off-diagonals non-negative, upwind otherwise.
fn assemble(op: &mut Tridiagonal, half_var: &[f64], mu: f64, h: f64) {
    let n = half_var.len();
    op.lower.iter_mut().for_each(|v| *v = 0.0);
    op.diag.iter_mut().for_each(|v| *v = 0.0);
    op.upper.iter_mut().for_each(|v| *v = 0.0);
    for j in 0..n - 1 {
        let (dl, dr) = (half_var[j], half_var[j + 1]);
        let a = mu - 0.5 * (dl + dr);
        let (mut cl, mut cr) = (0.5 * a + dl / h, 0.5 * a - dr / h);
        if cl < 0.0 || cr > 0.0 {
            cl = a.max(0.0) + dl / h;
            cr = a.min(0.0) - dr / h;
        }
        op.diag[j] -= cl / h;
        op.upper[j] -= cr / h;
        op.lower[j + 1] += cl / h;
        op.diag[j + 1] += cr / h;
    }
}

/// `(I - θ dt A) p' = (I + (1-θ) dt A) p`, solved by the Thomas algorithm.
fn theta_step(op: &Tridiagonal, p: &mut [f64], dt: f64, theta: f64) {
    let n = p.len();
    let e = (1.0 - theta) * dt;
    let mut rhs: Vec<f64> = (0..n)
        .map(|j| {
            let mut v = p[j] + e * op.diag[j] * p[j];
            if j > 0 {
                v += e * op.lower[j] * p[j - 1];
            }
            if j + 1 < n {
                v += e * op.upper[j] * p[j + 1];
            }
            v
        })
        .collect();
    let i = theta * dt;
    let mut c = vec![0.0; n];
    let mut b = 1.0 - i * op.diag[0];
    c[0] = -i * op.upper[0] / b;
    rhs[0] /= b;
    for j in 1..n {
        let a = -i * op.lower[j];
        b = 1.0 - i * op.diag[j] - a * c[j - 1];
        c[j] = -i * op.upper[j] / b;
        rhs[j] = (rhs[j] - a * rhs[j - 1]) / b;
    }
    for j in (0..n - 1).rev() {
        rhs[j] -= c[j] * rhs[j + 1];
    }
    p.copy_from_slice(&rhs);
}

/// A call price from the density and the convexity `P^d q(K)` it implies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityPrice {
    pub strike: f64,
    pub price: f64,
    pub convexity: f64,
}

/// `C(K) = P^d ∫ (S - K)⁺ q(S) dS` by the trapezoid rule, with the kink
/// segment split at the strike.
pub fn density_call_prices(grid: &DensityGrid, discount: f64, strikes: &[f64], t: f64) -> Result<Vec<DensityPrice>> {
    let q = grid.density(t)?;
    let s = grid.s_grid();
    let (lo, hi) = (s[0], s[s.len() - 1]);
    strikes
        .iter()
        .map(|&k| {
            if !(k >= lo && k < hi) {
                return Err(Error::OutOfRange { what: "strike", value: k, lo, hi });
            }
            let i = s.partition_point(|&v| v <= k) - 1;
            let frac = (k - s[i]) / (s[i + 1] - s[i]);
            let q_k = q[i] + frac * (q[i + 1] - q[i]);
            let mut integral = 0.5 * (s[i + 1] - k) * (s[i + 1] - k) * q[i + 1];
            for j in i + 1..s.len() - 1 {
                integral += 0.5 * (s[j + 1] - s[j]) * ((s[j] - k) * q[j] + (s[j + 1] - k) * q[j + 1]);
            }
            Ok(DensityPrice { strike: k, price: discount * integral, convexity: discount * q_k })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::black_scholes::{bs_call_tiv, BsPoint};

    fn flat(vol: f64) -> LeverageSurface {
        LeverageSurface::constant(SurfaceKind::LocalVol, vol).unwrap()
    }

    fn zero_curve() -> DiscountCurve {
        DiscountCurve::flat(0.0, 5.0).unwrap()
    }

    fn solve(vol: f64, rd: f64, times: &[f64]) -> DensityGrid {
        let dom = DiscountCurve::flat(rd, 5.0).unwrap();
        solve_forward_kolmogorov(&flat(vol), &dom, &zero_curve(), 1.0, times, &FpSettings::default()).unwrap()
    }

    #[test]
    fn lognormal_moments() {
        let g = solve(0.2, 0.0, &[1.0]);
        let m1 = g.expectation(1.0, |s| s).unwrap();
        let m2 = g.expectation(1.0, |s| s * s).unwrap();
        assert!((m1 - 1.0).abs() < 1e-4, "{m1}");
        assert!((m2 / 0.04_f64.exp() - 1.0).abs() < 1e-4, "{m2}");
    }

    #[test]
    fn matches_lognormal_density() {
        let g = solve(0.2, 0.0, &[1.0]);
        let q = g.density(1.0).unwrap();
        let pdf = |s: f64| {
            let z = (s.ln() + 0.02) / 0.2;
            (-0.5 * z * z).exp() / (s * 0.2 * (2.0 * std::f64::consts::PI).sqrt())
        };
        let peak = g.s_grid().iter().map(|&s| pdf(s)).fold(0.0, f64::max);
        let worst = g.s_grid().iter().zip(q).map(|(&s, &v)| (v - pdf(s)).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-3 * peak, "{worst} vs peak {peak}");
    }

    #[test]
    fn mass_is_conserved() {
        let times: Vec<f64> = (1..=10).map(|i| 0.2 * i as f64).collect();
        let g = solve(0.3, 0.01, &times);
        for &t in &times {
            assert!((g.mass(t).unwrap() - 1.0).abs() < 1e-6);
            assert!(g.density(t).unwrap().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zero_vol_is_pure_transport() {
        let g = solve(0.0, 0.02, &[1.0]);
        let s = g.s_grid();
        let cell = s[1] / s[0] - 1.0;
        let target = 0.02_f64.exp();
        let mean = g.expectation(1.0, |v| v).unwrap();
        assert!((mean - target).abs() < cell * target, "{mean} vs {target}");
        assert!((g.mass(1.0).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn atm_call_matches_black_scholes() {
        let g = solve(0.2, 0.0, &[1.0]);
        let c = density_call_prices(&g, 1.0, &[1.0], 1.0).unwrap()[0].price;
        let bs = bs_call_tiv(&BsPoint::unit(0.0, 0.04)).unwrap();
        assert!((c - bs).abs() < 1e-4, "{c} vs {bs}");
    }

    #[test]
    fn deep_itm_is_forward_parity() {
        let g = solve(0.2, 0.03, &[1.0]);
        let p = (-0.03_f64).exp();
        let k = 0.2;
        let c = density_call_prices(&g, p, &[k], 1.0).unwrap()[0].price;
        let fwd = (0.03_f64).exp();
        assert!((c - p * (fwd - k)).abs() < 1e-4, "{c}");
    }

    #[test]
    fn convexity_matches_second_difference() {
        let g = solve(0.2, 0.0, &[1.0]);
        let d = 1e-2;
        let out = density_call_prices(&g, 1.0, &[1.0 - d, 1.0, 1.0 + d], 1.0).unwrap();
        let fd = (out[0].price - 2.0 * out[1].price + out[2].price) / (d * d);
        assert!((fd / out[1].convexity - 1.0).abs() < 1e-3, "{fd} vs {}", out[1].convexity);
    }

    #[test]
    fn strike_off_grid_is_rejected() {
        let g = solve(0.2, 0.0, &[1.0]);
        let err = density_call_prices(&g, 1.0, &[1e3], 1.0).unwrap_err();
        assert!(matches!(err, Error::OutOfRange { .. }));
        assert!(matches!(g.density(0.5), Err(Error::NotOnGrid(_))));
    }

    #[test]
    fn coarse_crank_nicolson_is_caught() {
        let settings = FpSettings { dt_max: 0.25, rannacher_steps: 0, ..FpSettings::default() };
        let err =
            solve_forward_kolmogorov(&flat(0.2), &zero_curve(), &zero_curve(), 1.0, &[1.0], &settings).unwrap_err();
        assert!(matches!(err, Error::SolverInstability { .. }));
    }

    #[test]
    fn density_csv_has_header_and_rows() {
        let g = solve(0.2, 0.0, &[0.5, 1.0]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("density.csv");
        g.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("time,spot,density\n"));
        assert_eq!(text.lines().count(), 1 + 2 * g.s_grid().len());
    }
}
