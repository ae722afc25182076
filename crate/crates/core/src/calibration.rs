//! Forward bootstrap of local-vol and leverage surfaces.
//!
//! Maturity slices are calibrated in order. Each slice is simulated from the
//! stored path state at the previous maturity, so calibrated slices are never
//! revisited. Within a slice the model-dependent expectations are recomputed
//! for a fixed number of sweeps, then the paths are re-simulated once with
//! the final slice ("commit") to carry the state forward and to produce the
//! node diagnostics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::black_scholes::{bs_partials, BsPoint};
use crate::curves::{write_file, MarketSnapshot};
use crate::dupire::{
    deterministic_drift_expectation, lv_deterministic_tiv, lv_two_rates_tiv, slv_leverage_from_lv, CallDerivatives,
    LeverageSurface, NodeFlags, SurfaceKind,
};
use crate::error::{Error, Result};
use crate::estimate::EstimateWithError;
use crate::mc::{
    implied_total_variance, ks_two_sample, Estimator, KsTest, SimulationConfig, SimulationGrid, Simulator, SortedSlice,
    TimeSlice, DEFAULT_DT_MAX,
};
use crate::models::{validate_model, Model, ModelSpec};

fn default_sweeps() -> usize {
    2
}

fn default_tolerance() -> f64 {
    1e-2
}

fn default_dt() -> f64 {
    DEFAULT_DT_MAX
}

/// Grids and Monte-Carlo settings of a calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub strikes: Vec<f64>,
    pub maturities: Vec<f64>,
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
    /// Fixed-point sweeps per maturity slice.
    #[serde(default = "default_sweeps")]
    pub inner_iterations: usize,
    /// Largest `|Δ log L|` between sweeps for a slice to count as converged.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub estimator: Estimator,
    #[serde(default = "default_dt")]
    pub dt_max: f64,
    #[serde(default)]
    pub antithetic: bool,
}

impl CalibrationConfig {
    pub fn new(strikes: Vec<f64>, maturities: Vec<f64>, n_paths: usize, seed: u64) -> Self {
        Self {
            strikes,
            maturities,
            n_paths,
            seed,
            inner_iterations: default_sweeps(),
            tolerance: default_tolerance(),
            estimator: Estimator::default(),
            dt_max: default_dt(),
            antithetic: false,
        }
    }

    fn validate(&self, snapshot: &MarketSnapshot) -> Result<()> {
        if self.strikes.is_empty() || self.maturities.is_empty() {
            return Err(Error::InvalidInput("calibration grids must be non-empty".into()));
        }
        if self.strikes.windows(2).any(|w| !(w[1] > w[0])) || !(self.strikes[0] > 0.0) {
            return Err(Error::InvalidInput("strikes must be positive and increasing".into()));
        }
        if self.maturities.windows(2).any(|w| !(w[1] > w[0])) || !(self.maturities[0] > 0.0) {
            return Err(Error::InvalidInput("maturities must be positive and increasing".into()));
        }
        let last = *self.maturities.last().unwrap();
        if last > snapshot.horizon() {
            return Err(Error::OutOfRange {
                what: "calibration maturity",
                value: last,
                lo: 0.0,
                hi: snapshot.horizon(),
            });
        }
        if self.inner_iterations == 0 {
            return Err(Error::InvalidInput("need at least one sweep per slice".into()));
        }
        if self.n_paths < 2 {
            return Err(Error::InvalidInput("need at least two paths".into()));
        }
        Ok(())
    }

    fn simulation(&self, seed: u64) -> SimulationConfig {
        SimulationConfig { n_paths: self.n_paths, seed, antithetic: self.antithetic }
    }
}

/// Diagnostics of one calibrated node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NodeReport {
    pub maturity: f64,
    pub strike: f64,
    pub value: f64,
    /// Standard error of `value` from the Monte-Carlo inputs.
    pub std_error: f64,
    #[serde(serialize_with = "flag_label")]
    pub flags: NodeFlags,
    /// `Ê[U_T | S_T = K]` from the committed paths (leverage only).
    pub conditional_variance: Option<f64>,
    pub conditional_std_error: Option<f64>,
    /// `σ_LV² - L² Ê[U | S = K]` (leverage only).
    pub identity_residual: Option<f64>,
    /// In-sample repricing error of the committed paths in implied-vol bps.
    pub reprice_error_bps: Option<f64>,
}

fn flag_label<S: serde::Serializer>(f: &NodeFlags, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&f.label())
}

/// Summary of one maturity slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SliceReport {
    pub maturity: f64,
    pub sweeps: usize,
    /// `max |Δ log value|` of the last sweep.
    pub max_change: f64,
    pub converged: bool,
    pub sparse_nodes: usize,
    /// KS statistic between the calibrated spot marginal and the local-vol
    /// model's (leverage only).
    pub ks_statistic: Option<f64>,
    pub ks_critical_value: Option<f64>,
    /// Spot lookups outside the surface grid during the committed run.
    pub extrapolated_lookups: u64,
}

/// Output of a calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub surface: LeverageSurface,
    pub nodes: Vec<Vec<NodeReport>>,
    pub slices: Vec<SliceReport>,
}

#[derive(Serialize)]
struct ReportFile<'a> {
    kind: &'static str,
    nodes: usize,
    flagged_nodes: usize,
    max_abs_reprice_error_bps: Option<f64>,
    slices: &'a [SliceReport],
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

impl CalibrationReport {
    pub fn node(&self, i: usize, j: usize) -> &NodeReport {
        &self.nodes[i][j]
    }

    pub fn max_abs_reprice_error_bps(&self) -> Option<f64> {
        self.nodes
            .iter()
            .flatten()
            .filter_map(|n| n.reprice_error_bps)
            .map(f64::abs)
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }

    /// Writes `<stem>.csv` (the surface), `<stem>_nodes.csv` and
    /// `<stem>_report.toml` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        self.surface.write_csv(dir.join(format!("{stem}.csv")))?;
        let mut out = String::from(
            "maturity,strike,value,std_error,flag,conditional_variance,conditional_std_error,identity_residual,reprice_error_bps\n",
        );
        for n in self.nodes.iter().flatten() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                n.maturity,
                n.strike,
                n.value,
                n.std_error,
                n.flags.label(),
                fmt_opt(n.conditional_variance),
                fmt_opt(n.conditional_std_error),
                fmt_opt(n.identity_residual),
                fmt_opt(n.reprice_error_bps)
            ));
        }
        write_file(&dir.join(format!("{stem}_nodes.csv")), &out)?;
        let summary = ReportFile {
            kind: match self.surface.kind() {
                SurfaceKind::LocalVol => "local_vol",
                SurfaceKind::Leverage => "leverage",
            },
            nodes: self.nodes.iter().map(Vec::len).sum(),
            flagged_nodes: self.nodes.iter().flatten().filter(|n| !n.flags.is_empty()).count(),
            max_abs_reprice_error_bps: self.max_abs_reprice_error_bps(),
            slices: &self.slices,
        };
        let text = toml::to_string(&summary).map_err(|e| Error::InvalidInput(e.to_string()))?;
        write_file(&dir.join(format!("{stem}_report.toml")), &text)
    }
}

/// Deterministic-rate local vol `σ_LV(K, T)` from the surface alone.
pub fn deterministic_local_vol(
    snapshot: &MarketSnapshot,
    strikes: &[f64],
    maturities: &[f64],
) -> Result<LeverageSurface> {
    let mut values = Vec::with_capacity(maturities.len());
    let mut flags = Vec::with_capacity(maturities.len());
    for &t in maturities {
        let mut row = Vec::with_capacity(strikes.len());
        let mut frow = Vec::with_capacity(strikes.len());
        for &k in strikes {
            let (p, w) = snapshot.bs_point(k, t)?;
            let out = lv_deterministic_tiv(&w, p.y)?;
            row.push(out.vol());
            frow.push(out.flags);
        }
        values.push(row);
        flags.push(frow);
    }
    let mut s = LeverageSurface::new(SurfaceKind::LocalVol, strikes.to_vec(), maturities.to_vec(), values)?;
    for (i, f) in flags.into_iter().enumerate() {
        let v = s.slice(i).to_vec();
        s.set_slice(i, v, f);
    }
    Ok(s)
}

/// In-sample repricing error at `(K, T)` from a sorted slice, in bps.
fn reprice_node(sorted: &SortedSlice, snapshot: &MarketSnapshot, k: f64, t: f64) -> Result<f64> {
    let (p, _) = snapshot.bs_point(k, t)?;
    let (price, _) = otm_price(sorted, &p, k);
    let (w, _) = implied_total_variance(price.value, p.disc_fwd, p.y)?;
    Ok(((w / t).sqrt() - snapshot.surface.implied_vol(p.y, t)?) * 1e4)
}

/// Out-of-the-money option price converted to a call price with the market
/// forward. Returns the call-equivalent price and whether a put was used.
fn otm_price(sorted: &SortedSlice, p: &BsPoint, k: f64) -> (EstimateWithError, bool) {
    let put = p.y < 0.0;
    let mut e = sorted.vanilla_price(k, !put);
    if put {
        e.value += p.disc_fwd * (1.0 - p.y.exp());
    }
    (e, put)
}

/// Calibrates `σ_LV(K, T)` for a model without a variance process.
///
/// With deterministic rates the expectation in the numerator is available
/// from the call surface itself and no paths are simulated.
pub fn calibrate_local_vol(
    snapshot: &MarketSnapshot,
    spec: &ModelSpec,
    cfg: &CalibrationConfig,
) -> Result<CalibrationReport> {
    cfg.validate(snapshot)?;
    if spec.variance.is_some() {
        return Err(Error::InvalidInput("local-vol calibration takes a model without variance".into()));
    }
    let initial = deterministic_local_vol(snapshot, &cfg.strikes, &cfg.maturities)?;
    if !spec.has_stochastic_rates() {
        return analytic_local_vol(snapshot, cfg, initial);
    }
    let mut model = validate_model(spec, &snapshot.domestic, &snapshot.foreign, Some(initial))?;
    let grid = SimulationGrid::new(&cfg.maturities, cfg.dt_max)?;
    let sim_cfg = cfg.simulation(cfg.seed);
    let mut prev = Simulator::new(&model, &grid, sim_cfg)?.initial_slice()?;
    let mut nodes = Vec::new();
    let mut slices = Vec::new();
    for (i, &t) in cfg.maturities.iter().enumerate() {
        let discount = snapshot.domestic.discount_factor(t)?;
        let points: Vec<_> = cfg.strikes.iter().map(|&k| snapshot.bs_point(k, t)).collect::<Result<_>>()?;
        let mut max_change = f64::INFINITY;
        let mut sweeps = 0;
        let mut last = Vec::new();
        while sweeps < cfg.inner_iterations {
            let sim = Simulator::new(&model, &grid, sim_cfg)?;
            let (end, _) = sim.advance(&prev, i + 1, false)?;
            let sorted = SortedSlice::new(&end[0], &[]);
            let mut values = Vec::with_capacity(cfg.strikes.len());
            let mut flags = Vec::with_capacity(cfg.strikes.len());
            last.clear();
            for (&k, (p, w)) in cfg.strikes.iter().zip(&points) {
                let out = lv_two_rates_tiv(p, w, discount, &sorted.drift_indicator(k, discount))?;
                values.push(out.vol());
                flags.push(out.flags);
                last.push(out);
            }
            max_change = max_log_change(model.surface().slice(i), &values);
            let mut surface = model.surface().clone();
            surface.set_slice(i, values, flags);
            model = model.with_surface(surface)?;
            sweeps += 1;
            if max_change <= cfg.tolerance {
                break;
            }
        }
        let converged = max_change <= cfg.tolerance;
        if !converged {
            let mut surface = model.surface().clone();
            let values = surface.slice(i).to_vec();
            let flags = surface.flags()[i].iter().map(|f| *f | NodeFlags::NOT_CONVERGED).collect();
            surface.set_slice(i, values, flags);
            model = model.with_surface(surface)?;
        }
        let sim = Simulator::new(&model, &grid, sim_cfg)?;
        let (end, extrapolated) = sim.advance(&prev, i + 1, false)?;
        let committed = end.into_iter().next().unwrap();
        let sorted = SortedSlice::new(&committed, &[]);
        let mut row = Vec::with_capacity(cfg.strikes.len());
        for (j, &k) in cfg.strikes.iter().enumerate() {
            let mut flags = model.surface().flags()[i][j];
            let reprice = match reprice_node(&sorted, snapshot, k, t) {
                Ok(v) => Some(v),
                Err(_) => {
                    flags |= NodeFlags::REPRICE_FAILED;
                    None
                }
            };
            row.push(NodeReport {
                maturity: t,
                strike: k,
                value: model.surface().slice(i)[j],
                std_error: last[j].vol_std_error(),
                flags,
                conditional_variance: None,
                conditional_std_error: None,
                identity_residual: None,
                reprice_error_bps: reprice,
            });
        }
        nodes.push(row);
        slices.push(SliceReport {
            maturity: t,
            sweeps,
            max_change,
            converged,
            sparse_nodes: 0,
            ks_statistic: None,
            ks_critical_value: None,
            extrapolated_lookups: extrapolated,
        });
        prev = committed;
    }
    Ok(CalibrationReport { surface: model.surface().clone(), nodes, slices })
}

fn analytic_local_vol(
    snapshot: &MarketSnapshot,
    cfg: &CalibrationConfig,
    mut surface: LeverageSurface,
) -> Result<CalibrationReport> {
    let mut nodes = Vec::new();
    let mut slices = Vec::new();
    for (i, &t) in cfg.maturities.iter().enumerate() {
        let discount = snapshot.domestic.discount_factor(t)?;
        let r_d = snapshot.domestic.instantaneous_forward(t)?;
        let r_f = snapshot.foreign.instantaneous_forward(t)?;
        let mut values = Vec::with_capacity(cfg.strikes.len());
        let mut flags = Vec::with_capacity(cfg.strikes.len());
        let mut row = Vec::with_capacity(cfg.strikes.len());
        for &k in &cfg.strikes {
            let (p, w) = snapshot.bs_point(k, t)?;
            let c = CallDerivatives::from_point(&p, &w, discount, k)?;
            let out = lv_two_rates_tiv(&p, &w, discount, &deterministic_drift_expectation(&c, r_d, r_f))?;
            values.push(out.vol());
            flags.push(out.flags);
            row.push(NodeReport {
                maturity: t,
                strike: k,
                value: out.vol(),
                std_error: 0.0,
                flags: out.flags,
                conditional_variance: None,
                conditional_std_error: None,
                identity_residual: None,
                reprice_error_bps: None,
            });
        }
        let max_change = max_log_change(surface.slice(i), &values);
        surface.set_slice(i, values, flags);
        nodes.push(row);
        slices.push(SliceReport {
            maturity: t,
            sweeps: 1,
            max_change,
            converged: true,
            sparse_nodes: 0,
            ks_statistic: None,
            ks_critical_value: None,
            extrapolated_lookups: 0,
        });
    }
    Ok(CalibrationReport { surface, nodes, slices })
}

fn max_log_change(old: &[f64], new: &[f64]) -> f64 {
    old.iter().zip(new).map(|(a, b)| (b.ln() - a.ln()).abs()).fold(0.0, f64::max)
}

/// Replaces unreliable entries by the nearest reliable one (the lower
/// neighbour on ties).
fn fill_from_nearest(values: &mut [f64], reliable: &[bool]) -> Result<()> {
    let good: Vec<usize> = (0..values.len()).filter(|&j| reliable[j]).collect();
    if good.is_empty() {
        return Err(Error::DegenerateEstimator("no strike has enough samples for a conditional estimate".into()));
    }
    for j in 0..values.len() {
        if !reliable[j] {
            let nearest = *good.iter().min_by_key(|&&g| (g as i64 - j as i64).unsigned_abs()).unwrap();
            values[j] = values[nearest];
        }
    }
    Ok(())
}

struct LeverageUpdate {
    values: Vec<f64>,
    flags: Vec<NodeFlags>,
}

fn leverage_update(
    sorted: &SortedSlice,
    strikes: &[f64],
    sigma_lv: &[f64],
    estimator: &Estimator,
) -> Result<LeverageUpdate> {
    let mut values = vec![0.0; strikes.len()];
    let mut flags = vec![NodeFlags::empty(); strikes.len()];
    let mut reliable = vec![false; strikes.len()];
    for (j, &k) in strikes.iter().enumerate() {
        let est = sorted.conditional(0, k, estimator);
        match est.and_then(|e| slv_leverage_from_lv(sigma_lv[j], e.value).map(|l| (l, e))) {
            Ok((l, _)) => {
                values[j] = l;
                reliable[j] = true;
            }
            Err(Error::SparseRegion { .. }) => flags[j] |= NodeFlags::SPARSE,
            Err(Error::DegenerateEstimator(_)) => flags[j] |= NodeFlags::SPARSE | NodeFlags::DEGENERATE,
            Err(e) => return Err(e),
        }
    }
    fill_from_nearest(&mut values, &reliable)?;
    Ok(LeverageUpdate { values, flags })
}

/// Calibrates the leverage `L(K, T)` of a stochastic-local-vol model so that
/// `L² E^T[U_T | S_T = K] = σ_LV²` on every node.
///
/// `sigma_lv` is the local-vol surface the model must mimic; it is read at
/// the calibration nodes.
pub fn calibrate_slv_leverage(
    snapshot: &MarketSnapshot,
    spec: &ModelSpec,
    cfg: &CalibrationConfig,
    sigma_lv: &LeverageSurface,
) -> Result<CalibrationReport> {
    cfg.validate(snapshot)?;
    let cir =
        spec.variance.ok_or_else(|| Error::InvalidInput("leverage calibration needs a variance process".into()))?;
    if sigma_lv.kind() != SurfaceKind::LocalVol {
        return Err(Error::InvalidInput("leverage calibration needs a local-vol surface".into()));
    }
    let lv: Vec<Vec<f64>> =
        cfg.maturities.iter().map(|&t| cfg.strikes.iter().map(|&k| sigma_lv.value(k, t)).collect()).collect();
    let first: Vec<f64> = lv[0].iter().map(|v| v / cir.u0.sqrt()).collect();
    let initial = LeverageSurface::new(
        SurfaceKind::Leverage,
        cfg.strikes.clone(),
        cfg.maturities.clone(),
        vec![first; cfg.maturities.len()],
    )?;
    let mut model = validate_model(spec, &snapshot.domestic, &snapshot.foreign, Some(initial))?;
    let mut lv_spec = spec.clone();
    lv_spec.variance = None;
    let lv_model = validate_model(&lv_spec, &snapshot.domestic, &snapshot.foreign, Some(sigma_lv.clone()))?;
    let grid = SimulationGrid::new(&cfg.maturities, cfg.dt_max)?;
    let sim_cfg = cfg.simulation(cfg.seed);
    let lv_sim = Simulator::new(&lv_model, &grid, cfg.simulation(cfg.seed.wrapping_add(2)))?;
    let mut prev = Simulator::new(&model, &grid, sim_cfg)?.initial_slice()?;
    let mut lv_prev = lv_sim.initial_slice()?;
    let mut nodes = Vec::new();
    let mut slices = Vec::new();
    for (i, &t) in cfg.maturities.iter().enumerate() {
        if i > 0 {
            let mut surface = model.surface().clone();
            let guess = surface.slice(i - 1).to_vec();
            surface.set_slice(i, guess, vec![NodeFlags::empty(); cfg.strikes.len()]);
            model = model.with_surface(surface)?;
        }
        let mut max_change = f64::INFINITY;
        let mut sweeps = 0;
        let mut flags = Vec::new();
        while sweeps < cfg.inner_iterations {
            let end = advance_one(&model, &grid, sim_cfg, &prev, i)?.0;
            let sorted = SortedSlice::new(&end, &[driving_variance(&end)]);
            let update = leverage_update(&sorted, &cfg.strikes, &lv[i], &cfg.estimator)?;
            // inherited values follow their donors; only estimated nodes count
            let (old, new): (Vec<f64>, Vec<f64>) = (0..cfg.strikes.len())
                .filter(|&j| !update.flags[j].contains(NodeFlags::SPARSE))
                .map(|j| (model.surface().slice(i)[j], update.values[j]))
                .unzip();
            max_change = max_log_change(&old, &new);
            flags = update.flags.clone();
            let mut surface = model.surface().clone();
            surface.set_slice(i, update.values, update.flags);
            model = model.with_surface(surface)?;
            sweeps += 1;
            if max_change <= cfg.tolerance {
                break;
            }
        }
        let converged = max_change <= cfg.tolerance;
        if !converged {
            let mut surface = model.surface().clone();
            let values = surface.slice(i).to_vec();
            let f = flags.iter().map(|f| *f | NodeFlags::NOT_CONVERGED).collect();
            surface.set_slice(i, values, f);
            model = model.with_surface(surface)?;
        }
        let (committed, extrapolated) = advance_one(&model, &grid, sim_cfg, &prev, i)?;
        let sorted = SortedSlice::new(&committed, &[driving_variance(&committed)]);
        let mut row = Vec::with_capacity(cfg.strikes.len());
        for (j, &k) in cfg.strikes.iter().enumerate() {
            let l = model.surface().slice(i)[j];
            let mut node_flags = model.surface().flags()[i][j];
            let cond = if node_flags.contains(NodeFlags::SPARSE) {
                None
            } else {
                sorted.conditional(0, k, &cfg.estimator).ok()
            };
            let reprice = match reprice_node(&sorted, snapshot, k, t) {
                Ok(v) => Some(v),
                Err(_) => {
                    node_flags |= NodeFlags::REPRICE_FAILED;
                    None
                }
            };
            row.push(NodeReport {
                maturity: t,
                strike: k,
                value: l,
                std_error: cond.map_or(0.0, |c| 0.5 * l * c.std_error / c.value),
                flags: node_flags,
                conditional_variance: cond.map(|c| c.value),
                conditional_std_error: cond.map(|c| c.std_error),
                identity_residual: cond.map(|c| lv[i][j].powi(2) - l * l * c.value),
                reprice_error_bps: reprice,
            });
        }
        let (lv_end, _) = lv_sim.advance(&lv_prev, i + 1, false)?;
        let lv_slice = lv_end.into_iter().next().unwrap();
        let ks = marginal_ks(&committed, &lv_slice, 0.01);
        nodes.push(row);
        slices.push(SliceReport {
            maturity: t,
            sweeps,
            max_change,
            converged,
            sparse_nodes: flags.iter().filter(|f| f.contains(NodeFlags::SPARSE)).count(),
            ks_statistic: Some(ks.statistic),
            ks_critical_value: Some(ks.critical_value),
            extrapolated_lookups: extrapolated,
        });
        prev = committed;
        lv_prev = lv_slice;
    }
    Ok(CalibrationReport { surface: model.surface().clone(), nodes, slices })
}

// Full truncation lets `U` dip below zero while the spot diffuses with `U⁺`;
// the leverage has to be fitted against the latter.
fn driving_variance(slice: &TimeSlice) -> Vec<f64> {
    slice.u.iter().map(|u| u.max(0.0)).collect()
}

fn advance_one(
    model: &Model,
    grid: &SimulationGrid,
    cfg: SimulationConfig,
    from: &TimeSlice,
    i: usize,
) -> Result<(TimeSlice, u64)> {
    let sim = Simulator::new(model, grid, cfg)?;
    let (end, extrapolated) = sim.advance(from, i + 1, false)?;
    Ok((end.into_iter().next().unwrap(), extrapolated))
}

/// KS test between the T-forward spot marginals of two slices.
pub fn marginal_ks(a: &TimeSlice, b: &TimeSlice, alpha: f64) -> KsTest {
    ks_two_sample(&a.s, &a.discount_weights(), &b.s, &b.discount_weights(), alpha)
}

/// Model versus market implied volatility at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RepricePoint {
    pub maturity: f64,
    pub strike: f64,
    pub log_moneyness: f64,
    pub target_vol: f64,
    pub model_vol: f64,
    pub error_bps: f64,
    /// Monte-Carlo standard error of `model_vol`, in bps.
    pub std_error_bps: f64,
    pub used_put: bool,
}

/// Prices vanillas at `(T, y)` points with a fresh simulation of `model`
/// and compares their implied volatilities with the market surface.
/// Out-of-the-money options are used on both sides of the forward.
pub fn reprice(
    model: &Model,
    snapshot: &MarketSnapshot,
    maturities: &[f64],
    log_moneyness: &[f64],
    cfg: SimulationConfig,
    dt_max: f64,
) -> Result<Vec<RepricePoint>> {
    let grid = SimulationGrid::new(maturities, dt_max)?;
    let sim = Simulator::new(model, &grid, cfg)?;
    let mut prev = sim.initial_slice()?;
    let mut out = Vec::new();
    for (i, &t) in maturities.iter().enumerate() {
        let (end, _) = sim.advance(&prev, i + 1, false)?;
        prev = end.into_iter().next().unwrap();
        let sorted = SortedSlice::new(&prev, &[]);
        let fwd = snapshot.forward_price(t)?;
        for &y in log_moneyness {
            let k = fwd * y.exp();
            let (p, _) = snapshot.bs_point(k, t)?;
            let (price, used_put) = otm_price(&sorted, &p, k);
            let (w, _) = implied_total_variance(price.value, p.disc_fwd, p.y)?;
            let model_vol = (w / t).sqrt();
            let target_vol = snapshot.surface.implied_vol(p.y, t)?;
            let vega = bs_partials(&BsPoint { w, ..p })?.dc_dw * 2.0 * model_vol * t;
            out.push(RepricePoint {
                maturity: t,
                strike: k,
                log_moneyness: p.y,
                target_vol,
                model_vol,
                error_bps: (model_vol - target_vol) * 1e4,
                std_error_bps: price.std_error / vega * 1e4,
                used_put,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curves::{DiscountCurve, TotalVarianceSurface};
    use crate::models::{CirParams, Correlations, ShortRateParams};

    fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
    }

    fn snapshot(surface: TotalVarianceSurface, rd: f64, rf: f64) -> MarketSnapshot {
        MarketSnapshot::new(1.0, DiscountCurve::flat(rd, 5.0).unwrap(), DiscountCurve::flat(rf, 5.0).unwrap(), surface)
            .unwrap()
    }

    fn smile() -> TotalVarianceSurface {
        TotalVarianceSurface::from_fn(grid(-1.5, 1.5, 31), grid(0.25, 2.0, 8), |y, t| {
            (0.04 - 0.01 * y + 0.03 * y * y) * t
        })
        .unwrap()
    }

    #[test]
    fn deterministic_rates_give_the_surface_formula() {
        let snap = snapshot(smile(), 0.02, 0.01);
        let cfg = CalibrationConfig::new(grid(0.7, 1.4, 8), vec![0.5, 1.0, 1.5], 1000, 1);
        let rep = calibrate_local_vol(&snap, &ModelSpec::black_scholes(1.0, 0.2), &cfg).unwrap();
        let det = deterministic_local_vol(&snap, &cfg.strikes, &cfg.maturities).unwrap();
        for i in 0..3 {
            for j in 0..8 {
                assert!((rep.surface.slice(i)[j] - det.slice(i)[j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn constant_variance_leverage_is_exact() {
        let snap = snapshot(smile(), 0.0, 0.0);
        let strikes = grid(0.8, 1.2, 5);
        let maturities = vec![0.25, 0.5];
        let lv = deterministic_local_vol(&snap, &strikes, &maturities).unwrap();
        let mut spec = ModelSpec::black_scholes(1.0, 0.2);
        spec.variance = Some(CirParams { kappa: 1.0, theta: 0.0625, xi: 0.0, u0: 0.0625 });
        let cfg = CalibrationConfig::new(strikes.clone(), maturities.clone(), 4000, 3);
        let rep = calibrate_slv_leverage(&snap, &spec, &cfg, &lv).unwrap();
        for i in 0..2 {
            for j in 0..5 {
                let want = lv.slice(i)[j] / 0.25;
                assert!((rep.surface.slice(i)[j] - want).abs() < 1e-12);
                assert!(rep.node(i, j).identity_residual.unwrap().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nearest_fill() {
        let mut v = vec![0.0, 2.0, 0.0, 0.0, 5.0, 0.0];
        fill_from_nearest(&mut v, &[false, true, false, false, true, false]).unwrap();
        assert_eq!(v, vec![2.0, 2.0, 2.0, 5.0, 5.0, 5.0]);
        assert!(fill_from_nearest(&mut v, &[false; 6]).is_err());
    }

    #[test]
    fn stochastic_rate_calibration_is_reproducible() {
        let snap = snapshot(TotalVarianceSurface::flat(0.2, grid(-1.0, 1.0, 11), vec![0.5, 1.0]).unwrap(), 0.02, 0.01);
        let spec = ModelSpec {
            domestic: ShortRateParams { kappa: 0.1, sigma: 0.01 },
            foreign: ShortRateParams { kappa: 0.1, sigma: 0.01 },
            correlations: Correlations { spot_domestic: 0.3, ..Default::default() },
            ..ModelSpec::black_scholes(1.0, 0.2)
        };
        let cfg = CalibrationConfig::new(grid(0.8, 1.2, 5), vec![0.25, 0.5], 2000, 9);
        let a = calibrate_local_vol(&snap, &spec, &cfg).unwrap();
        let b = calibrate_local_vol(&snap, &spec, &cfg).unwrap();
        assert_eq!(a, b);
        for v in a.surface.values().iter().flatten() {
            assert!((v - 0.2).abs() < 0.02);
        }
    }

    #[test]
    fn report_files() {
        let snap = snapshot(smile(), 0.0, 0.0);
        let cfg = CalibrationConfig::new(grid(0.8, 1.2, 3), vec![0.5], 100, 1);
        let rep = calibrate_local_vol(&snap, &ModelSpec::black_scholes(1.0, 0.2), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        rep.write(dir.path(), "local_vol").unwrap();
        let back = LeverageSurface::from_csv(dir.path().join("local_vol.csv"), SurfaceKind::LocalVol).unwrap();
        assert_eq!(back.values(), rep.surface.values());
        let text = std::fs::read_to_string(dir.path().join("local_vol_report.toml")).unwrap();
        assert!(text.contains("kind = \"local_vol\""));
    }
}
