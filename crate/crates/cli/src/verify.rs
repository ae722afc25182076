//! Numerical self-checks run by the `verify` command and the acceptance
//! suite.

use std::path::Path;

use dupire_core::black_scholes::{bs_call_tiv, bs_partials, bs_theta_tiv, BsPoint};
use dupire_core::dupire::{
    deterministic_drift_expectation, generalized_leverage, lv_deterministic_call, lv_deterministic_tiv,
    lv_single_rate_call, lv_two_rates_call, CallDerivatives,
};
use dupire_core::mc::{mc_implied_vol, simulate_paths_with, t_forward_expectation, SortedSlice};
use dupire_core::{
    density_call_prices, deterministic_local_vol, solve_forward_kolmogorov, validate_model, DensityGrid,
    EstimateWithError, FpSettings, LeverageSurface, MarketSnapshot, ModelSpec, PathBatch, Result, SimulationConfig,
    SimulationGrid,
};

use crate::config::VerifySection;
use crate::error::CliError;

/// One line of `verify.csv`. A check passes when `value <= tolerance`.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.value <= self.tolerance
    }
}

pub fn write_checks(path: &Path, checks: &[Check]) -> std::result::Result<(), CliError> {
    let mut out = String::from("check,value,tolerance,passed\n");
    for c in checks {
        out.push_str(&format!("{},{:e},{:e},{}\n", c.name, c.value, c.tolerance, c.passed()));
    }
    std::fs::write(path, out).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

/// A Black-Scholes point with the surface slopes `(∂w/∂y, ∂w/∂T)` needed by
/// the maturity derivative.
pub type PartialsCase = (BsPoint, f64, f64);

/// `n_y × n_w` points for each of four rate / slope settings.
pub fn bs_lattice(n_y: usize, n_w: usize) -> Vec<PartialsCase> {
    let settings =
        [(0.0, 0.0, 0.0, 0.04), (0.03, 0.01, -0.02, 0.05), (-0.01, 0.04, 0.03, 0.02), (0.05, -0.02, 0.01, 0.08)];
    let mut out = Vec::with_capacity(4 * n_y * n_w);
    for &(fd, ff, dwy, dwt) in &settings {
        for &y in &linspace(-0.8, 0.8, n_y) {
            for &w in &linspace(0.01, 1.0, n_w) {
                let p = BsPoint { t: 1.0, y, w, disc_fwd: 0.95, f_dom: fd, f_for: ff };
                out.push((p, dwy, dwt));
            }
        }
    }
    out
}

/// Largest error of the analytic partials against central differences,
/// relative to `max(|analytic|, 1e-3 P^d F)`. Second partials are checked
/// against differences of the analytic first partials.
pub fn bs_partials_error(cases: &[PartialsCase]) -> Result<f64> {
    let mut worst = 0.0f64;
    for &(p, dwy, dwt) in cases {
        let (y, w) = (p.y, p.w);
        let g = bs_partials(&p)?;
        let c = |y: f64, w: f64| bs_call_tiv(&BsPoint { y, w, ..p });
        let hy = 1e-5 * y.abs().max(1.0);
        let hw = 1e-5 * w.max(1.0) * w.clamp(0.1, 1.0);
        let cdy = (c(y + hy, w)? - c(y - hy, w)?) / (2.0 * hy);
        let cdw = (c(y, w + hw)? - c(y, w - hw)?) / (2.0 * hw);
        let gw = |y: f64, w: f64| bs_partials(&BsPoint { y, w, ..p }).map(|g| g.dc_dw);
        let cdww = (gw(y, w + hw)? - gw(y, w - hw)?) / (2.0 * hw);
        let cdwy = (gw(y + hy, w)? - gw(y - hy, w)?) / (2.0 * hy);
        let gy = |y: f64| bs_partials(&BsPoint { y, ..p }).map(|g| g.dc_dy);
        let cdyy = (gy(y + hy)? - gy(y - hy)?) / (2.0 * hy);
        // along T the discounted forward and y move with the rate curves
        let theta = bs_theta_tiv(&p, dwy, dwt)?;
        let ht = 1e-5;
        let at = |e: f64| {
            let dy = (p.f_for - p.f_dom) * e;
            bs_call_tiv(&BsPoint {
                disc_fwd: p.disc_fwd * (-p.f_for * e).exp(),
                y: y + dy,
                w: w + dwt * e + dwy * dy,
                ..p
            })
        };
        let ct = (at(ht)? - at(-ht)?) / (2.0 * ht);
        let floor = 1e-3 * p.disc_fwd;
        for (a, fd) in
            [(g.dc_dy, cdy), (g.dc_dw, cdw), (g.d2c_dy2, cdyy), (g.d2c_dw2, cdww), (g.d2c_dwdy, cdwy), (theta, ct)]
        {
            worst = worst.max((a - fd).abs() / a.abs().max(floor));
        }
    }
    Ok(worst)
}

/// `(K, T)` pairs spanning `|log(K/S_0)| ≤ y_max` and the surface maturities.
pub fn node_grid(snapshot: &MarketSnapshot, y_max: f64, n_k: usize, n_t: usize) -> (Vec<f64>, Vec<f64>) {
    let ts = snapshot.surface.t_grid();
    let strikes = linspace(-y_max, y_max, n_k).iter().map(|y| snapshot.spot * y.exp()).collect();
    (strikes, linspace(ts[0], ts[ts.len() - 1], n_t))
}

fn rates_at(snapshot: &MarketSnapshot, t: f64) -> Result<(f64, f64)> {
    Ok((snapshot.domestic.instantaneous_forward(t)?, snapshot.foreign.instantaneous_forward(t)?))
}

/// Largest relative gap between the call-price and total-variance forms of
/// the deterministic-rate local vol.
pub fn formulation_gap(snapshot: &MarketSnapshot, strikes: &[f64], maturities: &[f64]) -> Result<f64> {
    let mut worst = 0.0f64;
    for &t in maturities {
        let (rd, rf) = rates_at(snapshot, t)?;
        for &k in strikes {
            let call = lv_deterministic_call(&CallDerivatives::from_market(snapshot, k, t)?, rd, rf)?;
            let (p, w) = snapshot.bs_point(k, t)?;
            let tiv = lv_deterministic_tiv(&w, p.y)?;
            worst = worst.max((call.vol() - tiv.vol()).abs() / tiv.vol());
        }
    }
    Ok(worst)
}

/// Largest relative gap between the deterministic local variance and the
/// single-rate, two-rate and generalized forms fed exact expectations.
pub fn reduction_gap(snapshot: &MarketSnapshot, strikes: &[f64], maturities: &[f64]) -> Result<f64> {
    let mut worst = 0.0f64;
    for &t in maturities {
        let (rd, rf) = rates_at(snapshot, t)?;
        for &k in strikes {
            let cd = CallDerivatives::from_market(snapshot, k, t)?;
            let base = lv_deterministic_call(&cd, rd, rf)?.variance;
            let drift = deterministic_drift_expectation(&cd, rd, rf);
            let single = lv_single_rate_call(&cd, rf, &EstimateWithError::exact(rd * cd.exercise_probability()))?;
            let two = lv_two_rates_call(&cd, &drift)?;
            let gen = generalized_leverage(&cd, &drift, &EstimateWithError::exact(k * k))?;
            for v in [single.variance, two.variance, gen.variance] {
                worst = worst.max((v - base).abs() / base);
            }
        }
    }
    Ok(worst)
}

/// Strikes log-spaced over the surface's log-moneyness range and maturities
/// every `step` up to `horizon`; the grid on which `σ_LV` is tabulated for
/// the density solver and the simulation.
pub fn lv_grid(snapshot: &MarketSnapshot, n_strikes: usize, step: f64, horizon: f64) -> (Vec<f64>, Vec<f64>) {
    let ys = snapshot.surface.y_grid();
    let strikes = linspace(ys[0], ys[ys.len() - 1], n_strikes).iter().map(|y| snapshot.spot * y.exp()).collect();
    let n = (horizon / step - 1e-9).ceil().max(1.0) as usize;
    let mut mats: Vec<f64> = (1..=n).map(|i| (step * i as f64).min(horizon)).collect();
    mats.dedup();
    (strikes, mats)
}

/// Results of the density and simulation checks.
#[derive(Debug, Clone)]
pub struct DensityChecks {
    pub max_mass_error: f64,
    /// Largest implied-vol error of density prices against the market, in bps.
    pub round_trip_bps: f64,
    /// Largest `|MC - FP| / max(3 s.e., 1e-4 S_0)`.
    pub mc_ratio: f64,
    /// Largest `|Ê^T[X] - target| / s.e.` over `X ∈ {1, S_T}`; the
    /// standard error is floored at `1e-12` for deterministic discounting.
    pub martingale_z: f64,
    pub density: DensityGrid,
    pub paths: PathBatch,
}

/// Solves the density and simulates the local-vol model from the same
/// `σ_LV` table, then compares both with each other and with the market.
pub fn density_checks(
    snapshot: &MarketSnapshot,
    spec: &ModelSpec,
    v: &VerifySection,
    seed: u64,
) -> Result<DensityChecks> {
    let horizon = v.times.iter().copied().fold(0.0, f64::max);
    let (strikes, mats) = lv_grid(snapshot, v.lv_strikes, v.lv_time_step, horizon);
    let lv = deterministic_local_vol(snapshot, &strikes, &mats)?;
    let density = solve_forward_kolmogorov(
        &lv,
        &snapshot.domestic,
        &snapshot.foreign,
        snapshot.spot,
        &v.times,
        &FpSettings::default(),
    )?;
    let paths = simulate_lv(snapshot, spec, lv, v, seed)?;
    let ys = linspace(-v.max_abs_log_moneyness, v.max_abs_log_moneyness, 7);
    let mut out =
        DensityChecks { max_mass_error: 0.0, round_trip_bps: 0.0, mc_ratio: 0.0, martingale_z: 0.0, density, paths };
    for &t in &v.times {
        out.max_mass_error = out.max_mass_error.max((out.density.mass(t)? - 1.0).abs());
        let fwd = snapshot.forward_price(t)?;
        let p = snapshot.domestic.discount_factor(t)?;
        let ks: Vec<f64> = ys.iter().map(|y| fwd * y.exp()).collect();
        let fp = density_call_prices(&out.density, p, &ks, t)?;
        let slice = out.paths.slice_at(t)?;
        let sorted = SortedSlice::new(slice, &[]);
        for price in &fp {
            let got = mc_implied_vol(price.price, snapshot, price.strike, t)?.vol;
            let want = snapshot.surface.implied_vol((price.strike / fwd).ln(), t)?;
            out.round_trip_bps = out.round_trip_bps.max((got - want).abs() * 1e4);
            let mc = sorted.vanilla_price(price.strike, true);
            let tol = (3.0 * mc.std_error).max(1e-4 * snapshot.spot);
            out.mc_ratio = out.mc_ratio.max((mc.value - price.price).abs() / tol);
        }
        let one = t_forward_expectation(slice, p, |_| 1.0);
        let s = t_forward_expectation(slice, p, |x| x.s);
        for (e, target) in [(one, 1.0), (s, fwd)] {
            out.martingale_z = out.martingale_z.max((e.value - target).abs() / e.std_error.max(1e-12));
        }
    }
    Ok(out)
}

fn simulate_lv(
    snapshot: &MarketSnapshot,
    spec: &ModelSpec,
    lv: LeverageSurface,
    v: &VerifySection,
    seed: u64,
) -> Result<PathBatch> {
    let spec = ModelSpec { spot: snapshot.spot, variance: None, ..spec.clone() };
    let model = validate_model(&spec, &snapshot.domestic, &snapshot.foreign, Some(lv))?;
    let grid = SimulationGrid::new(&v.times, v.dt_max)?;
    simulate_paths_with(&model, &grid, SimulationConfig { n_paths: v.n_paths, seed, antithetic: true })
}

/// Runs every check. Stochastic-rate models are refused since the density
/// solver and the closed-form reductions hold for deterministic rates only.
pub fn run_checks(
    snapshot: &MarketSnapshot,
    spec: &ModelSpec,
    v: &VerifySection,
    seed: u64,
) -> Result<(Vec<Check>, DensityChecks)> {
    let lattice = bs_lattice(25, 20);
    let (strikes, mats) = node_grid(snapshot, 2.0 * v.max_abs_log_moneyness, 21, 10);
    let dens = density_checks(snapshot, spec, v, seed)?;
    let checks = vec![
        Check { name: "bs_partials_fd", value: bs_partials_error(&lattice)?, tolerance: 1e-6 },
        Check { name: "formulation_equivalence", value: formulation_gap(snapshot, &strikes, &mats)?, tolerance: 1e-5 },
        Check { name: "reduction_chain", value: reduction_gap(snapshot, &strikes, &mats)?, tolerance: 1e-10 },
        Check { name: "fp_mass", value: dens.max_mass_error, tolerance: 1e-6 },
        Check { name: "fp_round_trip_bps", value: dens.round_trip_bps, tolerance: 10.0 },
        Check { name: "fp_vs_mc", value: dens.mc_ratio, tolerance: 1.0 },
        Check { name: "martingale", value: dens.martingale_z, tolerance: 3.0 },
    ];
    Ok((checks, dens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use dupire_core::{DiscountCurve, TotalVarianceSurface};

    fn snapshot() -> MarketSnapshot {
        let surface = TotalVarianceSurface::from_fn(linspace(-1.5, 1.5, 31), vec![0.25, 0.5, 1.0, 2.0], |y, t| {
            (0.04 - 0.01 * y + 0.02 * y * y) * t
        })
        .unwrap();
        MarketSnapshot::new(
            1.0,
            DiscountCurve::flat(0.02, 3.0).unwrap(),
            DiscountCurve::flat(0.01, 3.0).unwrap(),
            surface,
        )
        .unwrap()
    }

    #[test]
    fn analytic_partials_pass_the_lattice() {
        assert!(bs_partials_error(&bs_lattice(9, 7)).unwrap() <= 1e-6);
    }

    #[test]
    fn closed_forms_agree_on_a_smile() {
        let s = snapshot();
        let (k, t) = node_grid(&s, 0.6, 21, 10);
        assert!(formulation_gap(&s, &k, &t).unwrap() <= 1e-5);
        assert!(reduction_gap(&s, &k, &t).unwrap() <= 1e-10);
    }

    #[test]
    fn lv_grid_ends_on_the_horizon() {
        let (k, t) = lv_grid(&snapshot(), 11, 0.3, 1.0);
        assert_eq!(k.len(), 11);
        assert_eq!(t, vec![0.3, 0.6, 0.8999999999999999, 1.0]);
    }

    #[test]
    fn checks_pass_by_threshold() {
        let c = Check { name: "x", value: 1.0, tolerance: 1.0 };
        assert!(c.passed());
        assert!(!Check { value: f64::NAN, ..c }.passed());
    }
}
