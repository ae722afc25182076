//! Path simulation under the domestic risk-neutral measure and the
//! T-forward estimators built on it.
//!
//! Draws are keyed by `(seed, path, step)`: each path owns a ChaCha stream
//! and each global time step a fixed block of words in it, so adding paths or
//! restarting a simulation from a stored slice never reshuffles existing
//! paths.

use std::f64::consts::PI;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::black_scholes::{bs_call_tiv, bs_partials, BsPoint};
use crate::curves::{write_file, MarketSnapshot};
use crate::error::{Error, Result};
use crate::estimate::EstimateWithError;
use crate::models::{CoefficientFunction, Model, StateVector, DOMESTIC, FOREIGN, N_DRIVERS, SPOT, VARIANCE};

/// Default largest simulation step (years).
pub const DEFAULT_DT_MAX: f64 = 0.02;
/// Fewest effective samples accepted by the conditional estimators.
pub const MIN_EFFECTIVE_SAMPLES: f64 = 50.0;

// One u64 per driver, two 32-bit words each.
const WORDS_PER_STEP: u128 = 2 * N_DRIVERS as u128;
const BLOCK: usize = 512;
const TIME_TOL: f64 = 1e-12;

/// Observation times and the simulation steps between them.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationGrid {
    times: Vec<f64>,
    observations: Vec<usize>,
}

impl SimulationGrid {
    /// Subdivides each interval between consecutive observation times into
    /// equal steps no longer than `dt_max`. Time 0 is always an observation.
    pub fn new(observation_times: &[f64], dt_max: f64) -> Result<Self> {
        if !(dt_max > 0.0) {
            return Err(Error::InvalidInput(format!("step size must be positive, got {dt_max}")));
        }
        let mut obs: Vec<f64> = observation_times.to_vec();
        if obs.first() != Some(&0.0) {
            obs.insert(0, 0.0);
        }
        if obs.windows(2).any(|w| !(w[1] > w[0])) || obs.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidInput("observation times must be increasing and non-negative".into()));
        }
        let mut times = vec![0.0];
        let mut observations = vec![0];
        for w in obs.windows(2) {
            let n = ((w[1] - w[0]) / dt_max - 1e-9).ceil().max(1.0) as usize;
            for k in 1..n {
                times.push(w[0] + (w[1] - w[0]) * k as f64 / n as f64);
            }
            times.push(w[1]);
            observations.push(times.len() - 1);
        }
        Ok(Self { times, observations })
    }

    /// All simulation times, starting at 0.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn observation_times(&self) -> Vec<f64> {
        self.observations.iter().map(|&i| self.times[i]).collect()
    }

    pub fn n_observations(&self) -> usize {
        self.observations.len()
    }

    /// Index of observation time `t`.
    pub fn observation_index(&self, t: f64) -> Result<usize> {
        self.observations.iter().position(|&i| (self.times[i] - t).abs() <= TIME_TOL).ok_or(Error::NotOnGrid(t))
    }
}

/// Options for a simulation run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n_paths: usize,
    pub seed: u64,
    /// Pair path `2i + 1` with the negated draws of path `2i`.
    #[serde(default)]
    pub antithetic: bool,
}

/// Cross-section of all paths at one observation time.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSlice {
    pub t: f64,
    pub s: Vec<f64>,
    pub r_d: Vec<f64>,
    pub r_f: Vec<f64>,
    pub u: Vec<f64>,
    /// Running `∫_0^t r^d_u du`.
    pub mm: Vec<f64>,
    // Hull-White deviations from the fitted shift, needed to restart.
    x_d: Vec<f64>,
    x_f: Vec<f64>,
    step: usize,
}

impl TimeSlice {
    pub fn n_paths(&self) -> usize {
        self.s.len()
    }

    pub fn state(&self, i: usize) -> StateVector {
        StateVector { s: self.s[i], r_d: self.r_d[i], r_f: self.r_f[i], u: self.u[i] }
    }

    /// Stochastic discount factors `D_t = exp(-∫ r^d)`.
    pub fn discount_weights(&self) -> Vec<f64> {
        self.mm.iter().map(|m| (-m).exp()).collect()
    }

    fn with_capacity(t: f64, step: usize, n: usize) -> Self {
        Self {
            t,
            s: Vec::with_capacity(n),
            r_d: Vec::with_capacity(n),
            r_f: Vec::with_capacity(n),
            u: Vec::with_capacity(n),
            mm: Vec::with_capacity(n),
            x_d: Vec::with_capacity(n),
            x_f: Vec::with_capacity(n),
            step,
        }
    }
}

/// Simulated paths, kept at the observation times.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    pub seed: u64,
    pub n_paths: usize,
    slices: Vec<TimeSlice>,
    /// Spot lookups that fell outside the surface grid.
    pub extrapolated_lookups: u64,
}

impl PathBatch {
    pub fn times(&self) -> Vec<f64> {
        self.slices.iter().map(|s| s.t).collect()
    }

    pub fn slices(&self) -> &[TimeSlice] {
        &self.slices
    }

    /// The slice at `t`; no time interpolation.
    pub fn slice_at(&self, t: f64) -> Result<&TimeSlice> {
        self.slices.iter().find(|s| (s.t - t).abs() <= TIME_TOL).ok_or(Error::NotOnGrid(t))
    }

    /// Writes one little-endian `f64` file per factor (`s.bin`, `r_d.bin`,
    /// `r_f.bin`, `u.bin`, `mm.bin`), each laid out time-major with
    /// `n_paths` values per observation, plus `layout.toml`.
    pub fn dump(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.display().to_string(), source })?;
        type Column = fn(&TimeSlice) -> &Vec<f64>;
        let columns: [(&str, Column); 5] =
            [("s", |s| &s.s), ("r_d", |s| &s.r_d), ("r_f", |s| &s.r_f), ("u", |s| &s.u), ("mm", |s| &s.mm)];
        for (name, get) in columns {
            let mut bytes = Vec::with_capacity(8 * self.n_paths * self.slices.len());
            for slice in &self.slices {
                for v in get(slice) {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
            let path = dir.join(format!("{name}.bin"));
            std::fs::write(&path, bytes).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        }
        let times: Vec<String> = self.times().iter().map(|t| t.to_string()).collect();
        let layout = format!(
            "# little-endian f64, time-major: value(t, p) at index t * n_paths + p\n\
             seed = {}\nn_paths = {}\ntimes = [{}]\ncolumns = [\"s\", \"r_d\", \"r_f\", \"u\", \"mm\"]\n",
            self.seed,
            self.n_paths,
            times.join(", ")
        );
        write_file(&dir.join("layout.toml"), &layout)
    }
}

#[derive(Debug, Clone, Copy)]
struct Step {
    dt: f64,
    sqrt_dt: f64,
    dphi_d: f64,
    dphi_f: f64,
    slice: usize,
    beyond_surface: bool,
}

/// Advances path cross-sections along a grid under one model.
#[derive(Debug)]
pub struct Simulator<'a> {
    model: &'a Model,
    grid: &'a SimulationGrid,
    cfg: SimulationConfig,
    steps: Vec<Step>,
    phi_d: Vec<f64>,
    phi_f: Vec<f64>,
}

impl<'a> Simulator<'a> {
    pub fn new(model: &'a Model, grid: &'a SimulationGrid, cfg: SimulationConfig) -> Result<Self> {
        if cfg.n_paths == 0 {
            return Err(Error::InvalidInput("need at least one path".into()));
        }
        let times = grid.times();
        let last_t = *model.surface().t_grid().last().unwrap();
        let single_node = model.surface().k_grid().len() == 1 && model.surface().t_grid().len() == 1;
        let mut steps = Vec::with_capacity(times.len() - 1);
        for w in times.windows(2) {
            let t_mid = 0.5 * (w[0] + w[1]);
            steps.push(Step {
                dt: w[1] - w[0],
                sqrt_dt: (w[1] - w[0]).sqrt(),
                dphi_d: model.domestic.phi_integral(w[1])? - model.domestic.phi_integral(w[0])?,
                dphi_f: model.foreign.phi_integral(w[1])? - model.foreign.phi_integral(w[0])?,
                slice: model.surface().slice_index(t_mid),
                beyond_surface: !single_node && t_mid > last_t,
            });
        }
        let phi_d = times.iter().map(|&t| model.domestic.phi(t)).collect::<Result<_>>()?;
        let phi_f = times.iter().map(|&t| model.foreign.phi(t)).collect::<Result<_>>()?;
        Ok(Self { model, grid, cfg, steps, phi_d, phi_f })
    }

    pub fn grid(&self) -> &SimulationGrid {
        self.grid
    }

    /// All paths at time 0.
    pub fn initial_slice(&self) -> Result<TimeSlice> {
        let x = self.model.initial_state()?;
        let n = self.cfg.n_paths;
        Ok(TimeSlice {
            t: 0.0,
            s: vec![x.s; n],
            r_d: vec![x.r_d; n],
            r_f: vec![x.r_f; n],
            u: vec![x.u; n],
            mm: vec![0.0; n],
            x_d: vec![0.0; n],
            x_f: vec![0.0; n],
            step: 0,
        })
    }

    /// Simulates from `from` to observation `to_obs`. Returns the slices at
    /// every observation in between when `keep_all`, otherwise only the last,
    /// together with the count of extrapolated surface lookups.
    pub fn advance(&self, from: &TimeSlice, to_obs: usize, keep_all: bool) -> Result<(Vec<TimeSlice>, u64)> {
        let end_step = *self
            .grid
            .observations
            .get(to_obs)
            .ok_or(Error::InvalidInput(format!("observation {to_obs} is beyond the grid")))?;
        if from.n_paths() != self.cfg.n_paths || end_step < from.step {
            return Err(Error::InvalidInput("slice does not belong to this simulation".into()));
        }
        let kept: Vec<usize> = self
            .grid
            .observations
            .iter()
            .copied()
            .filter(|&i| i > from.step && i <= end_step && (keep_all || i == end_step))
            .collect();
        if kept.is_empty() {
            return Ok((vec![from.clone()], 0));
        }
        let n = self.cfg.n_paths;
        let n_blocks = n.div_ceil(BLOCK);
        let blocks: Vec<Result<(Vec<TimeSlice>, u64)>> = (0..n_blocks)
            .into_par_iter()
            .map(|b| self.run_block(from, b * BLOCK, ((b + 1) * BLOCK).min(n), &kept))
            .collect();
        let mut out: Vec<TimeSlice> =
            kept.iter().map(|&i| TimeSlice::with_capacity(self.grid.times[i], i, n)).collect();
        let mut extrapolated = 0;
        for block in blocks {
            let (slices, ext) = block?;
            extrapolated += ext;
            for (dst, src) in out.iter_mut().zip(slices) {
                dst.s.extend(src.s);
                dst.r_d.extend(src.r_d);
                dst.r_f.extend(src.r_f);
                dst.u.extend(src.u);
                dst.mm.extend(src.mm);
                dst.x_d.extend(src.x_d);
                dst.x_f.extend(src.x_f);
            }
        }
        Ok((out, extrapolated))
    }

    fn run_block(&self, from: &TimeSlice, lo: usize, hi: usize, kept: &[usize]) -> Result<(Vec<TimeSlice>, u64)> {
        let m = self.model;
        let spec = &m.spec;
        let c = m.cholesky();
        let surface = m.surface();
        let k_lo = surface.k_grid()[0];
        let k_hi = *surface.k_grid().last().unwrap();
        let check_k = surface.k_grid().len() > 1;
        let (kd, sd) = (spec.domestic.kappa, spec.domestic.sigma);
        let (kf, sf) = (spec.foreign.kappa, spec.foreign.sigma);
        let quanto = if spec.quanto { m.correlation()[SPOT][FOREIGN] * sf } else { 0.0 };
        let cir = spec.variance;
        let mut out: Vec<TimeSlice> =
            kept.iter().map(|&i| TimeSlice::with_capacity(self.grid.times[i], i, hi - lo)).collect();
        let mut extrapolated = 0u64;
        let end_step = *kept.last().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        for p in lo..hi {
            let (stream, sign) = if self.cfg.antithetic {
                ((p / 2) as u64, if p % 2 == 1 { -1.0 } else { 1.0 })
            } else {
                (p as u64, 1.0)
            };
            rng.set_stream(stream);
            rng.set_word_pos(from.step as u128 * WORDS_PER_STEP);
            let mut ln_s = from.s[p].ln();
            let (mut x_d, mut x_f, mut u, mut mm) = (from.x_d[p], from.x_f[p], from.u[p], from.mm[p]);
            let mut next_kept = 0;
            for j in from.step..end_step {
                let st = &self.steps[j];
                let z = normals(&mut rng, sign);
                let e = [
                    c[0][0] * z[0],
                    c[1][0] * z[0] + c[1][1] * z[1],
                    c[2][0] * z[0] + c[2][1] * z[1] + c[2][2] * z[2],
                    c[3][0] * z[0] + c[3][1] * z[1] + c[3][2] * z[2] + c[3][3] * z[3],
                ];
                let s = ln_s.exp();
                let l = surface.value_in_slice(st.slice, s);
                if st.beyond_surface || (check_k && (s < k_lo || s > k_hi)) {
                    extrapolated += 1;
                }
                let u_pos = u.max(0.0);
                let vol = if cir.is_some() { l * u_pos.sqrt() } else { l };
                let x_d1 = x_d - kd * x_d * st.dt + sd * st.sqrt_dt * e[DOMESTIC];
                let x_f1 = x_f - (kf * x_f + quanto * vol) * st.dt + sf * st.sqrt_dt * e[FOREIGN];
                if let Some(v) = cir {
                    u += v.kappa * (v.theta - u_pos) * st.dt + v.xi * u_pos.sqrt() * st.sqrt_dt * e[VARIANCE];
                }
                let i_d = 0.5 * (x_d + x_d1) * st.dt + st.dphi_d;
                let i_f = 0.5 * (x_f + x_f1) * st.dt + st.dphi_f;
                ln_s += i_d - i_f - 0.5 * vol * vol * st.dt + vol * st.sqrt_dt * e[SPOT];
                mm += i_d;
                x_d = x_d1;
                x_f = x_f1;
                if !(ln_s.is_finite() && u.is_finite() && mm.is_finite()) {
                    return Err(Error::Simulation { path: p, step: j });
                }
                if kept[next_kept] == j + 1 {
                    let o = &mut out[next_kept];
                    o.s.push(ln_s.exp());
                    o.r_d.push(x_d + self.phi_d[j + 1]);
                    o.r_f.push(x_f + self.phi_f[j + 1]);
                    o.u.push(u);
                    o.mm.push(mm);
                    o.x_d.push(x_d);
                    o.x_f.push(x_f);
                    next_kept += 1;
                }
            }
        }
        Ok((out, extrapolated))
    }
}

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Four standard normals by Box-Muller, always consuming four `u64`s.
fn normals(rng: &mut ChaCha8Rng, sign: f64) -> [f64; N_DRIVERS] {
    let mut z = [0.0; N_DRIVERS];
    for k in 0..N_DRIVERS / 2 {
        let (u1, u2) = (uniform(rng), uniform(rng));
        let r = sign * (-2.0 * u1.ln()).sqrt();
        let (sin, cos) = (2.0 * PI * u2).sin_cos();
        z[2 * k] = r * cos;
        z[2 * k + 1] = r * sin;
    }
    z
}

/// Simulates `n_paths` paths, keeping every observation time of `grid`.
pub fn simulate_paths(model: &Model, grid: &SimulationGrid, n_paths: usize, seed: u64) -> Result<PathBatch> {
    simulate_paths_with(model, grid, SimulationConfig { n_paths, seed, antithetic: false })
}

pub fn simulate_paths_with(model: &Model, grid: &SimulationGrid, cfg: SimulationConfig) -> Result<PathBatch> {
    let sim = Simulator::new(model, grid, cfg)?;
    let first = sim.initial_slice()?;
    let (mut rest, extrapolated) = sim.advance(&first, grid.n_observations() - 1, true)?;
    let mut slices = vec![first];
    if grid.n_observations() > 1 {
        slices.append(&mut rest);
    }
    Ok(PathBatch { seed: cfg.seed, n_paths: cfg.n_paths, slices, extrapolated_lookups: extrapolated })
}

fn mean_and_error(values: impl Iterator<Item = f64>, n: usize, scale: f64) -> EstimateWithError {
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for v in values {
        sum += v;
        sum_sq += v * v;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = if n > 1 { ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0) } else { 0.0 };
    EstimateWithError { value: mean / scale, std_error: (var / nf).sqrt() / scale, n_effective: nf }
}

/// `E^T[X] = E[D_T X] / P^d(0,T)` with `D_T = exp(-∫ r^d)`.
pub fn t_forward_expectation(
    slice: &TimeSlice,
    discount: f64,
    payoff: impl Fn(&StateVector) -> f64,
) -> EstimateWithError {
    let n = slice.n_paths();
    mean_and_error((0..n).map(|i| (-slice.mm[i]).exp() * payoff(&slice.state(i))), n, discount)
}

/// `E^T[(K r^d_T - S_T r^f_T) 1_{S_T > K}]`.
pub fn drift_indicator_expectation(slice: &TimeSlice, k: f64, discount: f64) -> EstimateWithError {
    t_forward_expectation(slice, discount, |x| if x.s > k { k * x.r_d - x.s * x.r_f } else { 0.0 })
}

/// `E^T[{μ_T - (S_T - K) r^d_T} 1_{S_T > K}]` with `μ` the spot drift of
/// `coefficients` at time `t`.
pub fn generalized_drift_expectation(
    slice: &TimeSlice,
    k: f64,
    discount: f64,
    coefficients: &dyn CoefficientFunction,
) -> EstimateWithError {
    let t = slice.t;
    t_forward_expectation(slice, discount, |x| {
        if x.s > k {
            coefficients.drift(x, t)[SPOT] - (x.s - k) * x.r_d
        } else {
            0.0
        }
    })
}

/// How conditional expectations given `S_T = K` are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Estimator {
    /// Nadaraya-Watson with the Epanechnikov kernel; Silverman's bandwidth
    /// when `bandwidth` is absent.
    Kernel { bandwidth: Option<f64> },
    /// Local-linear regression with the same kernel; removes the
    /// density-slope bias of Nadaraya-Watson in the wings.
    LocalLinear { bandwidth: Option<f64> },
    /// Mean over the equal-probability bin containing `K`.
    Bins { count: usize },
}

impl Default for Estimator {
    fn default() -> Self {
        Estimator::Kernel { bandwidth: None }
    }
}

fn weighted_std(x: &[f64], w: &[f64]) -> f64 {
    let sw: f64 = w.iter().sum();
    let mean = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let var = x.iter().zip(w).map(|(a, b)| b * (a - mean).powi(2)).sum::<f64>() / sw;
    var.sqrt()
}

/// Silverman's rule `1.06 σ̂ n^{-1/5}` on the weighted spot sample.
pub fn silverman_bandwidth(s: &[f64], w: &[f64]) -> f64 {
    1.06 * weighted_std(s, w) * (s.len() as f64).powf(-0.2)
}

fn epanechnikov(u: f64) -> f64 {
    if u.abs() < 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

/// `E^T[q(X_T) | S_T = K]`.
pub fn conditional_expectation(
    slice: &TimeSlice,
    quantity: impl Fn(&StateVector) -> f64,
    k: f64,
    estimator: &Estimator,
) -> Result<EstimateWithError> {
    let q: Vec<f64> = (0..slice.n_paths()).map(|i| quantity(&slice.state(i))).collect();
    SortedSlice::new(slice, &[q]).conditional(0, k, estimator)
}

/// One slice sorted by spot, with discount weights and per-path quantity
/// columns, for many-strike estimation.
#[derive(Debug, Clone)]
pub struct SortedSlice {
    s: Vec<f64>,
    w: Vec<f64>,
    r_d: Vec<f64>,
    r_f: Vec<f64>,
    columns: Vec<Vec<f64>>,
    // suffix sums for the drift expectation
    suffix: Vec<[f64; 6]>,
    bandwidth: f64,
    total_w: f64,
}

impl SortedSlice {
    pub fn new(slice: &TimeSlice, columns: &[Vec<f64>]) -> Self {
        let n = slice.n_paths();
        let w0 = slice.discount_weights();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| slice.s[a].total_cmp(&slice.s[b]).then(a.cmp(&b)));
        let pick = |v: &[f64]| order.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let s = pick(&slice.s);
        let w = pick(&w0);
        let r_d = pick(&slice.r_d);
        let r_f = pick(&slice.r_f);
        let columns: Vec<Vec<f64>> = columns.iter().map(|c| pick(c)).collect();
        let mut suffix = vec![[0.0; 6]; n + 1];
        for i in (0..n).rev() {
            let a = w[i] * r_d[i];
            let b = w[i] * s[i] * r_f[i];
            let prev = suffix[i + 1];
            suffix[i] = [prev[0] + a, prev[1] + b, prev[2] + a * a, prev[3] + a * b, prev[4] + b * b, 0.0];
        }
        let bandwidth = silverman_bandwidth(&s, &w);
        let total_w = w.iter().sum();
        Self { s, w, r_d, r_f, columns, suffix, bandwidth, total_w }
    }

    pub fn n_paths(&self) -> usize {
        self.s.len()
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Same estimate as [`drift_indicator_expectation`] from suffix sums.
    pub fn drift_indicator(&self, k: f64, discount: f64) -> EstimateWithError {
        let n = self.s.len() as f64;
        let first = self.s.partition_point(|&v| v <= k);
        let sfx = &self.suffix[first];
        let sum = k * sfx[0] - sfx[1];
        let sum_sq = k * k * sfx[2] - 2.0 * k * sfx[3] + sfx[4];
        let mean = sum / n;
        let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
        EstimateWithError { value: mean / discount, std_error: (var / n).sqrt() / discount, n_effective: n }
    }

    /// Conditional mean of column `col` given `S_T = K`.
    pub fn conditional(&self, col: usize, k: f64, estimator: &Estimator) -> Result<EstimateWithError> {
        match *estimator {
            Estimator::Kernel { bandwidth } => self.kernel(col, k, bandwidth.unwrap_or(self.bandwidth), false),
            Estimator::LocalLinear { bandwidth } => self.kernel(col, k, bandwidth.unwrap_or(self.bandwidth), true),
            Estimator::Bins { count } => self.binned(col, k, count),
        }
    }

    fn kernel(&self, col: usize, k: f64, h: f64, local_linear: bool) -> Result<EstimateWithError> {
        if !(h > 0.0) {
            return Err(Error::DegenerateEstimator(format!("bandwidth {h} at strike {k}")));
        }
        let q = &self.columns[col];
        let lo = self.s.partition_point(|&v| v <= k - h);
        let hi = self.s.partition_point(|&v| v < k + h);
        let a: Vec<f64> = (lo..hi).map(|i| self.w[i] * epanechnikov((self.s[i] - k) / h)).collect();
        // equivalent-kernel weights: a_i for Nadaraya-Watson,
        // a_i (S2 - d_i S1) for local-linear with d_i = S_i - K
        let l: Vec<f64> = if local_linear {
            let (mut s1, mut s2) = (0.0, 0.0);
            for (ai, i) in a.iter().zip(lo..hi) {
                let d = self.s[i] - k;
                s1 += ai * d;
                s2 += ai * d * d;
            }
            a.iter().zip(lo..hi).map(|(ai, i)| ai * (s2 - (self.s[i] - k) * s1)).collect()
        } else {
            a
        };
        let sl: f64 = l.iter().sum();
        let sl2: f64 = l.iter().map(|v| v * v).sum();
        let n_eff = if sl2 > 0.0 { sl * sl / sl2 } else { 0.0 };
        if !(n_eff >= MIN_EFFECTIVE_SAMPLES) || !(sl > 0.0) {
            return Err(Error::SparseRegion { strike: k, effective: n_eff });
        }
        let m = l.iter().zip(lo..hi).map(|(li, i)| li * q[i]).sum::<f64>() / sl;
        let v: f64 = l.iter().zip(lo..hi).map(|(li, i)| (li * (q[i] - m)).powi(2)).sum();
        Ok(EstimateWithError { value: m, std_error: v.sqrt() / sl, n_effective: n_eff })
    }

    fn binned(&self, col: usize, k: f64, count: usize) -> Result<EstimateWithError> {
        let n = self.s.len();
        if count == 0 || n == 0 || k < self.s[0] || k > self.s[n - 1] {
            return Err(Error::SparseRegion { strike: k, effective: 0.0 });
        }
        let q = &self.columns[col];
        // bin of path i: floor(cumulative weight before i / total * count)
        let mut cum = 0.0;
        let mut start = 0;
        let mut current = 0usize;
        let mut found = None;
        for i in 0..=n {
            let bin = if i == n { usize::MAX } else { ((cum / self.total_w * count as f64) as usize).min(count - 1) };
            if bin != current {
                if self.s[i - 1] >= k && found.is_none() {
                    found = Some((start, i));
                }
                start = i;
                current = bin;
            }
            if i < n {
                cum += self.w[i];
            }
        }
        let (lo, hi) = found.ok_or(Error::SparseRegion { strike: k, effective: 0.0 })?;
        let (mut sw, mut sw2, mut swq) = (0.0, 0.0, 0.0);
        for i in lo..hi {
            sw += self.w[i];
            sw2 += self.w[i] * self.w[i];
            swq += self.w[i] * q[i];
        }
        let n_eff = sw * sw / sw2;
        if n_eff < MIN_EFFECTIVE_SAMPLES {
            return Err(Error::SparseRegion { strike: k, effective: n_eff });
        }
        let m = swq / sw;
        let v: f64 = (lo..hi).map(|i| (self.w[i] * (q[i] - m)).powi(2)).sum();
        Ok(EstimateWithError { value: m, std_error: v.sqrt() / sw, n_effective: n_eff })
    }

    /// Discounted payoff mean of `(S - K)⁺` (`call`) or `(K - S)⁺`, divided
    /// by nothing: this is the price itself.
    pub fn vanilla_price(&self, k: f64, call: bool) -> EstimateWithError {
        let n = self.s.len();
        mean_and_error(
            (0..n).map(|i| self.w[i] * if call { (self.s[i] - k).max(0.0) } else { (k - self.s[i]).max(0.0) }),
            n,
            1.0,
        )
    }

    pub fn rates(&self) -> (&[f64], &[f64]) {
        (&self.r_d, &self.r_f)
    }
}

/// Result of an implied-volatility inversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpliedVol {
    pub vol: f64,
    /// The price sat on the intrinsic value and the volatility was set to 0.
    pub at_intrinsic: bool,
}

/// Total implied variance reproducing a call price at log-moneyness `y`.
pub fn implied_total_variance(price: f64, disc_fwd: f64, y: f64) -> Result<(f64, bool)> {
    let intrinsic = (disc_fwd * (1.0 - y.exp())).max(0.0);
    let tol = 1e-14 * disc_fwd;
    if !(price.is_finite()) || price < intrinsic - tol || price >= disc_fwd {
        return Err(Error::Inversion(format!("price {price} outside ({intrinsic}, {disc_fwd}) at y = {y}")));
    }
    if price <= intrinsic + tol {
        return Ok((0.0, true));
    }
    let call = |sw: f64| bs_call_tiv(&BsPoint { w: sw * sw, y, disc_fwd, ..BsPoint::unit(y, 1.0) });
    // bracket in s = sqrt(w), on which the price is increasing
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while call(hi)? < price {
        lo = hi;
        hi *= 2.0;
        if hi > 100.0 {
            return Err(Error::Inversion(format!("no volatility reaches price {price}")));
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let p = BsPoint { w: x * x, y, disc_fwd, ..BsPoint::unit(y, 1.0) };
        let f = bs_call_tiv(&p)? - price;
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        if f.abs() <= 1e-15 * disc_fwd || hi - lo <= 1e-16 * hi {
            break;
        }
        let vega = 2.0 * x * bs_partials(&p)?.dc_dw;
        let newton = x - f / vega;
        x = if vega > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
    }
    Ok((x * x, false))
}

/// Black-Scholes implied volatility of a call price at `(K, T)`.
pub fn mc_implied_vol(price: f64, snapshot: &MarketSnapshot, k: f64, t: f64) -> Result<ImpliedVol> {
    let (p, _) = snapshot.bs_point(k, t)?;
    let (w, at_intrinsic) = implied_total_variance(price, p.disc_fwd, p.y)?;
    Ok(ImpliedVol { vol: (w / t).sqrt(), at_intrinsic })
}

/// Two-sample Kolmogorov-Smirnov result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsTest {
    pub statistic: f64,
    pub critical_value: f64,
    pub n1_effective: f64,
    pub n2_effective: f64,
}

impl KsTest {
    pub fn rejects(&self) -> bool {
        self.statistic > self.critical_value
    }
}

/// `c(α) = sqrt(-½ ln(α/2))`, the asymptotic two-sample coefficient.
pub fn ks_coefficient(alpha: f64) -> f64 {
    (-0.5 * (alpha / 2.0).ln()).sqrt()
}

/// Weighted two-sample KS test at level `alpha`; with weights the sample
/// sizes are the effective sizes `(Σw)²/Σw²`.
pub fn ks_two_sample(a: &[f64], wa: &[f64], b: &[f64], wb: &[f64], alpha: f64) -> KsTest {
    fn ecdf(x: &[f64], w: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let total: f64 = w.iter().sum();
        let sq: f64 = w.iter().map(|v| v * v).sum();
        (idx.iter().map(|&i| x[i]).collect(), idx.iter().map(|&i| w[i] / total).collect(), total * total / sq)
    }
    let (xa, pa, na) = ecdf(a, wa);
    let (xb, pb, nb) = ecdf(b, wb);
    let (mut i, mut j) = (0, 0);
    let (mut fa, mut fb, mut d) = (0.0f64, 0.0f64, 0.0f64);
    while i < xa.len() || j < xb.len() {
        let next = match (xa.get(i), xb.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => break,
        };
        while i < xa.len() && xa[i] == next {
            fa += pa[i];
            i += 1;
        }
        while j < xb.len() && xb[j] == next {
            fb += pb[j];
            j += 1;
        }
        d = d.max((fa - fb).abs());
    }
    KsTest {
        statistic: d,
        critical_value: ks_coefficient(alpha) * ((na + nb) / (na * nb)).sqrt(),
        n1_effective: na,
        n2_effective: nb,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curves::{DiscountCurve, TotalVarianceSurface};
    use crate::models::{validate_model, CirParams, ModelSpec};

    fn flat(r: f64) -> DiscountCurve {
        DiscountCurve::flat(r, 10.0).unwrap()
    }

    fn bs_model(vol: f64, rd: f64, rf: f64) -> Model {
        validate_model(&ModelSpec::black_scholes(1.0, vol), &flat(rd), &flat(rf), None).unwrap()
    }

    #[test]
    fn grid_subdivides() {
        let g = SimulationGrid::new(&[0.5, 1.0], 0.2).unwrap();
        assert_eq!(g.times().len(), 7);
        assert_eq!(g.observation_times(), vec![0.0, 0.5, 1.0]);
        assert_eq!(g.observation_index(1.0).unwrap(), 2);
        assert!(matches!(g.observation_index(0.7), Err(Error::NotOnGrid(_))));
    }

    #[test]
    fn zero_vol_paths_follow_the_forward() {
        let m = bs_model(0.0, 0.03, 0.01);
        let g = SimulationGrid::new(&[1.0, 2.0], 0.02).unwrap();
        let b = simulate_paths(&m, &g, 8, 1).unwrap();
        let sl = b.slice_at(2.0).unwrap();
        for &s in &sl.s {
            assert!((s - (0.02f64 * 2.0).exp()).abs() < 1e-12);
        }
        let one = t_forward_expectation(sl, (-0.06f64).exp(), |_| 1.0);
        assert!((one.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let m = bs_model(0.2, 0.0, 0.0);
        let g = SimulationGrid::new(&[1.0], 0.05).unwrap();
        assert_eq!(simulate_paths(&m, &g, 1000, 7).unwrap(), simulate_paths(&m, &g, 1000, 7).unwrap());
        assert_ne!(simulate_paths(&m, &g, 1000, 7).unwrap(), simulate_paths(&m, &g, 1000, 8).unwrap());
    }

    #[test]
    fn more_paths_keep_existing_paths() {
        let m = bs_model(0.2, 0.0, 0.0);
        let g = SimulationGrid::new(&[1.0], 0.05).unwrap();
        let a = simulate_paths(&m, &g, 600, 3).unwrap();
        let b = simulate_paths(&m, &g, 1500, 3).unwrap();
        assert_eq!(a.slice_at(1.0).unwrap().s[..], b.slice_at(1.0).unwrap().s[..600]);
    }

    #[test]
    fn restart_matches_a_continuous_run() {
        let m = bs_model(0.2, 0.02, 0.0);
        let g = SimulationGrid::new(&[0.5, 1.0], 0.05).unwrap();
        let cfg = SimulationConfig { n_paths: 700, seed: 5, antithetic: false };
        let full = simulate_paths_with(&m, &g, cfg).unwrap();
        let sim = Simulator::new(&m, &g, cfg).unwrap();
        let (mid, _) = sim.advance(&sim.initial_slice().unwrap(), 1, false).unwrap();
        let (end, _) = sim.advance(&mid[0], 2, false).unwrap();
        let want = full.slice_at(1.0).unwrap();
        for (a, b) in end[0].s.iter().zip(&want.s) {
            assert!((a / b - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn antithetic_pairs_mirror() {
        let m = bs_model(0.2, 0.0, 0.0);
        let g = SimulationGrid::new(&[0.02], 0.02).unwrap();
        let b = simulate_paths_with(&m, &g, SimulationConfig { n_paths: 4, seed: 1, antithetic: true }).unwrap();
        let s = &b.slice_at(0.02).unwrap().s;
        let drift = -0.5 * 0.04 * 0.02;
        assert!(((s[0].ln() - drift) + (s[1].ln() - drift)).abs() < 1e-14);
    }

    #[test]
    fn lognormal_mean_and_bs_price() {
        let m = bs_model(0.2, 0.0, 0.0);
        let g = SimulationGrid::new(&[1.0], 0.02).unwrap();
        let n = 100_000;
        let b = simulate_paths(&m, &g, n, 11).unwrap();
        let sl = b.slice_at(1.0).unwrap();
        let logm = t_forward_expectation(sl, 1.0, |x| x.s.ln());
        assert!((logm.value + 0.02).abs() <= 3.0 * 0.2 / (n as f64).sqrt());
        let fwd = t_forward_expectation(sl, 1.0, |x| x.s);
        assert!(fwd.agrees_with(1.0, 3.0));
        let call = t_forward_expectation(sl, 1.0, |x| (x.s - 1.0).max(0.0));
        assert!(call.agrees_with(0.079_655_674_554_057_96, 3.0));
    }

    #[test]
    fn drift_expectation_limits() {
        let m = bs_model(0.2, 0.03, 0.01);
        let g = SimulationGrid::new(&[1.0], 0.05).unwrap();
        let b = simulate_paths(&m, &g, 20_000, 2).unwrap();
        let sl = b.slice_at(1.0).unwrap();
        let p = (-0.03f64).exp();
        let f = (0.02f64).exp();
        let low = drift_indicator_expectation(sl, 1e-9, p);
        assert!(EstimateWithError { value: low.value + 0.01 * f, ..low }.agrees_with(0.0, 3.0));
        assert_eq!(drift_indicator_expectation(sl, 1e9, p).value, 0.0);
        let gen = generalized_drift_expectation(sl, 1.05, p, &m);
        let base = drift_indicator_expectation(sl, 1.05, p);
        assert!((gen.value - base.value).abs() < 1e-12);
        let sorted = SortedSlice::new(sl, &[]);
        for k in [0.8, 1.0, 1.3] {
            let a = drift_indicator_expectation(sl, k, p);
            let b = sorted.drift_indicator(k, p);
            assert!((a.value - b.value).abs() < 1e-12);
            assert!((a.std_error - b.std_error).abs() < 1e-9);
        }
    }

    #[test]
    fn conditional_constant_variance_is_exact() {
        let mut spec = ModelSpec::black_scholes(1.0, 0.2);
        spec.variance = Some(CirParams { kappa: 1.0, theta: 0.04, xi: 0.0, u0: 0.04 });
        let m = validate_model(&spec, &flat(0.0), &flat(0.0), None).unwrap();
        let g = SimulationGrid::new(&[1.0], 0.05).unwrap();
        let b = simulate_paths(&m, &g, 5000, 1).unwrap();
        let sl = b.slice_at(1.0).unwrap();
        for k in [0.9, 1.0, 1.1] {
            for est in [Estimator::default(), Estimator::LocalLinear { bandwidth: None }, Estimator::Bins { count: 20 }]
            {
                let e = conditional_expectation(sl, |x| x.u, k, &est).unwrap();
                assert!((e.value - 0.04).abs() < 1e-15);
            }
        }
        assert!(matches!(
            conditional_expectation(sl, |x| x.u, 5.0, &Estimator::default()),
            Err(Error::SparseRegion { .. })
        ));
    }

    #[test]
    fn implied_vol_round_trip() {
        let price = bs_call_tiv(&BsPoint::unit(0.0, 0.04)).unwrap();
        let (w, flag) = implied_total_variance(price, 1.0, 0.0).unwrap();
        assert!(!flag);
        assert!((w.sqrt() - 0.2).abs() < 1e-8);
        let (w, _) = implied_total_variance(0.079_655_7, 1.0, 0.0).unwrap();
        assert!((w.sqrt() - 0.2).abs() < 1e-6);
        assert_eq!(implied_total_variance(0.0, 1.0, 0.1).unwrap(), (0.0, true));
        assert!(matches!(implied_total_variance(1.2, 1.0, 0.0), Err(Error::Inversion(_))));
        for &(y, w) in &[(0.3, 0.02), (-0.3, 0.02), (0.1, 0.5), (-1.0, 0.3)] {
            let p = bs_call_tiv(&BsPoint::unit(y, w)).unwrap();
            let (got, _) = implied_total_variance(p, 1.0, y).unwrap();
            let back = bs_call_tiv(&BsPoint::unit(y, got)).unwrap();
            assert!((back - p).abs() < 1e-10, "y={y} w={w}");
        }
    }

    #[test]
    fn market_implied_vol() {
        let snap = MarketSnapshot::new(
            1.0,
            flat(0.02),
            flat(0.01),
            TotalVarianceSurface::flat(0.2, vec![-1.0, 0.0, 1.0], vec![1.0, 2.0]).unwrap(),
        )
        .unwrap();
        let (p, _) = snap.bs_point(1.1, 1.0).unwrap();
        let price = bs_call_tiv(&p).unwrap();
        let iv = mc_implied_vol(price, &snap, 1.1, 1.0).unwrap();
        assert!((iv.vol - 0.2).abs() < 1e-9);
    }

    #[test]
    fn ks_coefficient_one_percent() {
        assert!((ks_coefficient(0.01) - 1.627_623_630_718_729).abs() < 1e-12);
        let a: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let w = vec![1.0; 100];
        let t = ks_two_sample(&a, &w, &a, &w, 0.01);
        assert_eq!(t.statistic, 0.0);
        let b: Vec<f64> = (0..100).map(|i| i as f64 + 1000.0).collect();
        let t = ks_two_sample(&a, &w, &b, &w, 0.01);
        assert!((t.statistic - 1.0).abs() < 1e-12);
        assert!(t.rejects());
    }

    #[test]
    fn path_dump_layout() {
        let m = bs_model(0.2, 0.0, 0.0);
        let g = SimulationGrid::new(&[0.5, 1.0], 0.1).unwrap();
        let b = simulate_paths(&m, &g, 10, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        b.dump(dir.path()).unwrap();
        let bytes = std::fs::read(dir.path().join("s.bin")).unwrap();
        assert_eq!(bytes.len(), 8 * 10 * 3);
        let v = f64::from_le_bytes(bytes[8 * 25..8 * 26].try_into().unwrap());
        assert_eq!(v, b.slice_at(1.0).unwrap().s[5]);
    }
}
