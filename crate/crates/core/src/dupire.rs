//! Local-volatility and leverage formulas.
//!
//! Every formula takes precomputed surface partials and, where the model has
//! stochastic drivers, Monte-Carlo estimates of the expectation terms. The
//! outputs are floored and capped, with every adjustment recorded in
//! [`NodeFlags`].

use std::path::Path;

use bitflags::bitflags;

use crate::black_scholes::{bs_call_tiv, bs_partials, bs_theta_tiv, dupire_bracket, strike_derivatives, BsPoint};
use crate::curves::{read_csv, write_file, MarketSnapshot, TotalVariancePartials};
use crate::error::{Error, Result};
use crate::estimate::EstimateWithError;
use crate::interp::linear_flat;

/// Smallest admissible `σ²` (a 1bp volatility).
pub const MIN_VARIANCE: f64 = 1e-8;
/// Largest admissible `σ²` (500% volatility).
pub const MAX_VARIANCE: f64 = 25.0;
/// Floor on the total-variance Dupire bracket.
pub const BRACKET_FLOOR: f64 = 1e-6;
/// Floor on `∂²C/∂K²` in units of `P^d / K`.
pub const CONVEXITY_FLOOR: f64 = 1e-10;
/// Smallest conditional variance accepted when converting to leverage.
pub const MIN_CONDITIONAL_VARIANCE: f64 = 1e-8;

bitflags! {
    /// Diagnostics attached to a surface node.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
    pub struct NodeFlags: u16 {
        const DENOMINATOR_FLOORED = 1;
        const VARIANCE_FLOORED = 1 << 1;
        const VARIANCE_CAPPED = 1 << 2;
        const DEGENERATE = 1 << 3;
        const SPARSE = 1 << 4;
        const NOT_CONVERGED = 1 << 5;
        const EXTRAPOLATED = 1 << 6;
        const REPRICE_FAILED = 1 << 7;
    }
}

const FLAG_NAMES: [(NodeFlags, &str); 8] = [
    (NodeFlags::DENOMINATOR_FLOORED, "denominator_floored"),
    (NodeFlags::VARIANCE_FLOORED, "variance_floored"),
    (NodeFlags::VARIANCE_CAPPED, "variance_capped"),
    (NodeFlags::DEGENERATE, "degenerate"),
    (NodeFlags::SPARSE, "sparse"),
    (NodeFlags::NOT_CONVERGED, "not_converged"),
    (NodeFlags::EXTRAPOLATED, "extrapolated"),
    (NodeFlags::REPRICE_FAILED, "reprice_failed"),
];

impl NodeFlags {
    /// `ok`, or the set flag names joined by `|`.
    pub fn label(&self) -> String {
        if self.is_empty() {
            return "ok".into();
        }
        FLAG_NAMES.iter().filter(|(f, _)| self.contains(*f)).map(|(_, n)| *n).collect::<Vec<_>>().join("|")
    }

    pub fn parse(label: &str) -> Result<Self> {
        let mut flags = NodeFlags::empty();
        if label == "ok" || label.is_empty() {
            return Ok(flags);
        }
        for part in label.split('|') {
            let f = FLAG_NAMES
                .iter()
                .find(|(_, n)| *n == part)
                .ok_or_else(|| Error::InvalidInput(format!("unknown node flag {part:?}")))?;
            flags |= f.0;
        }
        Ok(flags)
    }
}

/// Result of one formula evaluation: `σ_LV²` or `L²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DupireOutput {
    /// Floored and capped value.
    pub variance: f64,
    /// Unadjusted ratio.
    pub raw: f64,
    /// First-order standard error of `raw` from the Monte-Carlo inputs.
    pub std_error: f64,
    pub flags: NodeFlags,
}

impl DupireOutput {
    pub fn vol(&self) -> f64 {
        self.variance.sqrt()
    }

    /// Standard error of `vol()` by the delta method.
    pub fn vol_std_error(&self) -> f64 {
        self.std_error / (2.0 * self.vol())
    }
}

fn finish(numerator: f64, denominator: f64, std_error: f64, mut flags: NodeFlags) -> DupireOutput {
    let raw = numerator / denominator;
    if numerator == 0.0 {
        flags |= NodeFlags::DEGENERATE;
    }
    let variance = if raw < MIN_VARIANCE || raw.is_nan() {
        flags |= NodeFlags::VARIANCE_FLOORED;
        MIN_VARIANCE
    } else if raw > MAX_VARIANCE {
        flags |= NodeFlags::VARIANCE_CAPPED;
        MAX_VARIANCE
    } else {
        raw
    };
    DupireOutput { variance, raw, std_error, flags }
}

fn floored_bracket(p: &BsPoint, w: &TotalVariancePartials) -> (f64, NodeFlags) {
    let b = dupire_bracket(p.y, w.w, w.dw_dy, w.d2w_dy2);
    if b <= BRACKET_FLOOR {
        (BRACKET_FLOOR, NodeFlags::DENOMINATOR_FLOORED)
    } else {
        (b, NodeFlags::empty())
    }
}

/// Deterministic-rate local variance from the total-variance surface:
/// `σ² = ∂w/∂T / bracket`.
pub fn lv_deterministic_tiv(w: &TotalVariancePartials, y: f64) -> Result<DupireOutput> {
    if !(w.w > 0.0) {
        return Err(Error::Domain(format!("total variance must be positive, got {}", w.w)));
    }
    if w.dw_dt < 0.0 {
        return Err(Error::CalendarArbitrage(format!("dw/dT = {} < 0 at y = {y}", w.dw_dt)));
    }
    let mut b = dupire_bracket(y, w.w, w.dw_dy, w.d2w_dy2);
    let mut flags = NodeFlags::empty();
    if b <= BRACKET_FLOOR {
        b = BRACKET_FLOOR;
        flags |= NodeFlags::DENOMINATOR_FLOORED;
    }
    Ok(finish(w.dw_dt, b, 0.0, flags))
}

/// Call price and its strike / maturity derivatives at one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CallDerivatives {
    pub price: f64,
    pub strike: f64,
    /// `P^d(0,T)`.
    pub discount: f64,
    pub dc_dt: f64,
    pub dc_dk: f64,
    pub d2c_dk2: f64,
}

impl CallDerivatives {
    /// Derivatives of the call surface implied by `snapshot`.
    pub fn from_market(snapshot: &MarketSnapshot, strike: f64, t: f64) -> Result<Self> {
        let (p, w) = snapshot.bs_point(strike, t)?;
        Self::from_point(&p, &w, snapshot.domestic.discount_factor(t)?, strike)
    }

    pub fn from_point(p: &BsPoint, w: &TotalVariancePartials, discount: f64, strike: f64) -> Result<Self> {
        let (dc_dk, d2c_dk2) = strike_derivatives(p, strike, w.dw_dy, w.d2w_dy2)?;
        Ok(Self { price: bs_call_tiv(p)?, strike, discount, dc_dt: bs_theta_tiv(p, w.dw_dy, w.dw_dt)?, dc_dk, d2c_dk2 })
    }

    /// `½ K² ∂²C/∂K²` with the convexity floor applied.
    fn half_k2_convexity(&self) -> Result<(f64, NodeFlags)> {
        if !(self.d2c_dk2 > 0.0) {
            return Err(Error::ButterflyArbitrage(format!("∂²C/∂K² = {} at K = {}", self.d2c_dk2, self.strike)));
        }
        let floor = CONVEXITY_FLOOR * self.discount / self.strike;
        let (d2, flags) = if self.d2c_dk2 < floor {
            (floor, NodeFlags::DENOMINATOR_FLOORED)
        } else {
            (self.d2c_dk2, NodeFlags::empty())
        };
        Ok((0.5 * self.strike * self.strike * d2, flags))
    }

    /// `E^T[1_{S_T > K}] = -∂C/∂K / P^d`.
    pub fn exercise_probability(&self) -> f64 {
        -self.dc_dk / self.discount
    }

    /// `E^T[S_T 1_{S_T > K}] = (C - K ∂C/∂K) / P^d`.
    pub fn asset_expectation(&self) -> f64 {
        (self.price - self.strike * self.dc_dk) / self.discount
    }
}

/// Standard Dupire formula with deterministic rates.
pub fn lv_deterministic_call(c: &CallDerivatives, r_d: f64, r_f: f64) -> Result<DupireOutput> {
    let (den, flags) = c.half_k2_convexity()?;
    let num = c.dc_dt + (r_d - r_f) * c.strike * c.dc_dk + r_f * c.price;
    Ok(finish(num, den, 0.0, flags))
}

/// Stochastic domestic rate, deterministic foreign rate `r_f`; `rate_exp`
/// estimates `E^T[r^d_T 1_{S_T > K}]`.
pub fn lv_single_rate_call(c: &CallDerivatives, r_f: f64, rate_exp: &EstimateWithError) -> Result<DupireOutput> {
    let (den, flags) = c.half_k2_convexity()?;
    let num = c.dc_dt - c.discount * c.strike * rate_exp.value + r_f * (c.price - c.strike * c.dc_dk);
    let se = c.discount * c.strike * rate_exp.std_error / den;
    Ok(finish(num, den, se, flags))
}

/// Total-variance form of [`lv_single_rate_call`]; the foreign rate is the
/// curve forward `p.f_for`.
pub fn lv_single_rate_tiv(
    p: &BsPoint,
    w: &TotalVariancePartials,
    discount: f64,
    strike: f64,
    rate_exp: &EstimateWithError,
) -> Result<DupireOutput> {
    let g = bs_partials(p)?;
    let (b, flags) = floored_bracket(p, w);
    let den = g.dc_dw * b;
    let num = g.dc_dw * w.dw_dt - p.f_dom * (g.dc_dy + g.dc_dw * w.dw_dy) - discount * strike * rate_exp.value;
    let se = discount * strike * rate_exp.std_error / den;
    Ok(finish(num, den, se, flags))
}

/// Extended Dupire ratio `(∂C/∂T - P^d E^T[drift]) / denominator`, where the
/// denominator is already `½K²∂²C/∂K²` in either parametrisation and
/// `denom_floor` is its admissible minimum.
pub fn lv_two_rates(
    numerator_base: f64,
    drift_exp: &EstimateWithError,
    discount: f64,
    denom: f64,
    denom_floor: f64,
) -> Result<DupireOutput> {
    let (den, flags) =
        if denom <= denom_floor { (denom_floor, NodeFlags::DENOMINATOR_FLOORED) } else { (denom, NodeFlags::empty()) };
    let num = numerator_base - discount * drift_exp.value;
    Ok(finish(num, den, discount * drift_exp.std_error / den, flags))
}

/// Call-surface form of the extended Dupire formula; `drift_exp` estimates
/// `E^T[(K r^d_T - S_T r^f_T) 1_{S_T > K}]`.
pub fn lv_two_rates_call(c: &CallDerivatives, drift_exp: &EstimateWithError) -> Result<DupireOutput> {
    let (den, flags) = c.half_k2_convexity()?;
    let mut out = lv_two_rates(c.dc_dt, drift_exp, c.discount, den, 0.0)?;
    out.flags |= flags;
    Ok(out)
}

/// Total-variance form of the extended Dupire formula.
pub fn lv_two_rates_tiv(
    p: &BsPoint,
    w: &TotalVariancePartials,
    discount: f64,
    drift_exp: &EstimateWithError,
) -> Result<DupireOutput> {
    let g = bs_partials(p)?;
    let theta = bs_theta_tiv(p, w.dw_dy, w.dw_dt)?;
    let (b, flags) = floored_bracket(p, w);
    let mut out = lv_two_rates(theta, drift_exp, discount, g.dc_dw * b, 0.0)?;
    out.flags |= flags;
    Ok(out)
}

/// Drift expectation implied by deterministic rates through the strike
/// derivatives of the call: `r_d K E[1] - r_f E[S 1]`.
pub fn deterministic_drift_expectation(c: &CallDerivatives, r_d: f64, r_f: f64) -> EstimateWithError {
    EstimateWithError::exact(r_d * c.strike * c.exercise_probability() - r_f * c.asset_expectation())
}

/// Generalized leverage `L²` for `dS = μ dt + L σ̄ dW`: `gen_drift`
/// estimates `E^T[{μ_T - (S_T - K) r^d_T} 1_{S_T > K}]` and `cond_sigbar`
/// estimates `E^T[σ̄²_T | S_T = K]`.
pub fn generalized_leverage(
    c: &CallDerivatives,
    gen_drift: &EstimateWithError,
    cond_sigbar: &EstimateWithError,
) -> Result<DupireOutput> {
    if !(cond_sigbar.value > 0.0) {
        return Err(Error::DegenerateEstimator(format!("E[σ̄²|S=K] = {} at K = {}", cond_sigbar.value, c.strike)));
    }
    let (half_k2, flags) = c.half_k2_convexity()?;
    let half_d2 = half_k2 / (c.strike * c.strike);
    let num = c.dc_dt - c.discount * gen_drift.value;
    let den = half_d2 * cond_sigbar.value;
    let l2 = num / den;
    let se = ((c.discount * gen_drift.std_error / den).powi(2)
        + (l2 * cond_sigbar.std_error / cond_sigbar.value).powi(2))
    .sqrt();
    Ok(finish(num, den, se, flags))
}

/// `L_s = σ_LV / sqrt(E[U_T | S_T = K])`.
pub fn slv_leverage_from_lv(sigma_lv: f64, cond_u: f64) -> Result<f64> {
    if !(sigma_lv >= 0.0) {
        return Err(Error::Domain(format!("local vol must be non-negative, got {sigma_lv}")));
    }
    if !(cond_u > MIN_CONDITIONAL_VARIANCE) {
        return Err(Error::DegenerateEstimator(format!("E[U|S=K] = {cond_u} is too small")));
    }
    Ok(sigma_lv / cond_u.sqrt())
}

/// Total-variance leverage for the stochastic-rate SLV model:
/// `L² = (∂C/∂T - P^d E^T[drift]) / (∂C/∂w · bracket · E^T[U_T | S_T = K])`.
pub fn slv_leverage_tiv(
    p: &BsPoint,
    w: &TotalVariancePartials,
    discount: f64,
    drift_exp: &EstimateWithError,
    cond_u: &EstimateWithError,
) -> Result<DupireOutput> {
    if !(cond_u.value > MIN_CONDITIONAL_VARIANCE) {
        return Err(Error::DegenerateEstimator(format!("E[U|S=K] = {} is too small", cond_u.value)));
    }
    let lv = lv_two_rates_tiv(p, w, discount, drift_exp)?;
    let l2 = lv.raw / cond_u.value;
    let se = ((lv.std_error / cond_u.value).powi(2) + (l2 * cond_u.std_error / cond_u.value).powi(2)).sqrt();
    let mut flags = lv.flags;
    flags.remove(NodeFlags::VARIANCE_FLOORED | NodeFlags::VARIANCE_CAPPED | NodeFlags::DEGENERATE);
    Ok(finish(lv.raw, cond_u.value, se, flags))
}

/// What a [`LeverageSurface`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceKind {
    /// `σ_LV(K, T)` in volatility units.
    LocalVol,
    /// Dimensionless multiplier `L(K, T)`.
    Leverage,
}

/// `σ_LV(K, T)` or `L(K, T)` on a strike by maturity grid.
///
/// Piecewise constant in time: slice `i` applies on `(T_{i-1}, T_i]`, and the
/// last slice beyond. Linear in strike, flat outside the strike range.
#[derive(Debug, Clone, PartialEq)]
pub struct LeverageSurface {
    kind: SurfaceKind,
    k_grid: Vec<f64>,
    t_grid: Vec<f64>,
    values: Vec<Vec<f64>>,
    flags: Vec<Vec<NodeFlags>>,
}

impl LeverageSurface {
    /// `values[i][j]` is the value at `(k_grid[j], t_grid[i])`.
    pub fn new(kind: SurfaceKind, k_grid: Vec<f64>, t_grid: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if k_grid.is_empty() || t_grid.is_empty() {
            return Err(Error::InvalidInput("leverage surface needs a non-empty grid".into()));
        }
        if k_grid.windows(2).any(|w| !(w[1] > w[0])) || t_grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("leverage grids must be strictly increasing".into()));
        }
        if values.len() != t_grid.len() || values.iter().any(|r| r.len() != k_grid.len()) {
            return Err(Error::InvalidInput("leverage values do not match the grid".into()));
        }
        if values.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidInput("leverage values must be finite and non-negative".into()));
        }
        let flags = vec![vec![NodeFlags::empty(); k_grid.len()]; t_grid.len()];
        Ok(Self { kind, k_grid, t_grid, values, flags })
    }

    /// A single-node surface equal to `value` everywhere.
    pub fn constant(kind: SurfaceKind, value: f64) -> Result<Self> {
        Self::new(kind, vec![1.0], vec![1.0], vec![vec![value]])
    }

    pub fn kind(&self) -> SurfaceKind {
        self.kind
    }

    pub fn k_grid(&self) -> &[f64] {
        &self.k_grid
    }

    pub fn t_grid(&self) -> &[f64] {
        &self.t_grid
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn flags(&self) -> &[Vec<NodeFlags>] {
        &self.flags
    }

    pub fn slice(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub(crate) fn set_slice(&mut self, i: usize, values: Vec<f64>, flags: Vec<NodeFlags>) {
        debug_assert_eq!(values.len(), self.k_grid.len());
        self.values[i] = values;
        self.flags[i] = flags;
    }

    /// Index of the slice that applies at time `t`.
    pub fn slice_index(&self, t: f64) -> usize {
        self.t_grid.partition_point(|&v| v < t).min(self.t_grid.len() - 1)
    }

    /// Whether `(k, t)` is inside the grid (no extrapolation needed).
    pub fn covers(&self, k: f64, t: f64) -> bool {
        let n = self.k_grid.len();
        k >= self.k_grid[0] && k <= self.k_grid[n - 1] && t <= *self.t_grid.last().unwrap()
    }

    pub fn value_in_slice(&self, i: usize, k: f64) -> f64 {
        linear_flat(&self.k_grid, &self.values[i], k)
    }

    pub fn value(&self, k: f64, t: f64) -> f64 {
        self.value_in_slice(self.slice_index(t), k)
    }

    /// Writes `maturity,strike,value,flag`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("maturity,strike,value,flag\n");
        for (i, t) in self.t_grid.iter().enumerate() {
            for (j, k) in self.k_grid.iter().enumerate() {
                out.push_str(&format!("{},{},{},{}\n", t, k, self.values[i][j], self.flags[i][j].label()));
            }
        }
        write_file(path.as_ref(), &out)
    }

    pub fn from_csv(path: impl AsRef<Path>, kind: SurfaceKind) -> Result<Self> {
        #[derive(serde::Deserialize)]
        struct Row {
            maturity: f64,
            strike: f64,
            value: f64,
            flag: String,
        }
        let rows: Vec<Row> = read_csv(path.as_ref())?;
        let mut t_grid: Vec<f64> = rows.iter().map(|r| r.maturity).collect();
        let mut k_grid: Vec<f64> = rows.iter().map(|r| r.strike).collect();
        t_grid.sort_by(f64::total_cmp);
        t_grid.dedup();
        k_grid.sort_by(f64::total_cmp);
        k_grid.dedup();
        if rows.len() != t_grid.len() * k_grid.len() {
            return Err(Error::Parse {
                path: path.as_ref().display().to_string(),
                msg: "rows do not form a rectangular strike by maturity grid".into(),
            });
        }
        let mut values = vec![vec![f64::NAN; k_grid.len()]; t_grid.len()];
        let mut flags = vec![vec![NodeFlags::empty(); k_grid.len()]; t_grid.len()];
        for r in &rows {
            let i = t_grid.partition_point(|&v| v < r.maturity);
            let j = k_grid.partition_point(|&v| v < r.strike);
            values[i][j] = r.value;
            flags[i][j] = NodeFlags::parse(&r.flag)?;
        }
        let mut s = Self::new(kind, k_grid, t_grid, values)?;
        s.flags = flags;
        Ok(s)
    }
}
