//! Model specifications: Hull-White short rates, CIR variance, correlated
//! drivers and the spot diffusion driven by a local-vol or leverage surface.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::curves::DiscountCurve;
use crate::dupire::{LeverageSurface, SurfaceKind};
use crate::error::{Error, Result};

/// Number of Brownian drivers: spot, domestic rate, foreign rate, variance.
pub const N_DRIVERS: usize = 4;
pub const SPOT: usize = 0;
pub const DOMESTIC: usize = 1;
pub const FOREIGN: usize = 2;
pub const VARIANCE: usize = 3;

/// Tolerance on negative eigenvalues of the correlation matrix.
pub const CLIP_TOLERANCE: f64 = 1e-8;

/// Hull-White parameters `dr = κ(θ(t) - r) dt + σ dW`; `θ(t)` is fitted to a
/// discount curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShortRateParams {
    pub kappa: f64,
    pub sigma: f64,
}

impl ShortRateParams {
    pub fn deterministic() -> Self {
        Self { kappa: 0.0, sigma: 0.0 }
    }
}

/// CIR variance `dU = κ(θ - U) dt + ξ sqrt(U) dW`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CirParams {
    pub kappa: f64,
    pub theta: f64,
    pub xi: f64,
    pub u0: f64,
}

impl CirParams {
    /// `E[U_t]`.
    pub fn mean(&self, t: f64) -> f64 {
        self.theta + (self.u0 - self.theta) * (-self.kappa * t).exp()
    }

    pub fn feller(&self) -> bool {
        2.0 * self.kappa * self.theta >= self.xi * self.xi
    }
}

/// Pairwise correlations between the drivers; unspecified pairs are zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Correlations {
    pub spot_domestic: f64,
    pub spot_foreign: f64,
    pub domestic_foreign: f64,
    pub spot_variance: f64,
    pub domestic_variance: f64,
    pub foreign_variance: f64,
}

impl Correlations {
    pub fn matrix(&self) -> [[f64; N_DRIVERS]; N_DRIVERS] {
        let c = self;
        [
            [1.0, c.spot_domestic, c.spot_foreign, c.spot_variance],
            [c.spot_domestic, 1.0, c.domestic_foreign, c.domestic_variance],
            [c.spot_foreign, c.domestic_foreign, 1.0, c.foreign_variance],
            [c.spot_variance, c.domestic_variance, c.foreign_variance, 1.0],
        ]
    }
}

/// Parameters of the hybrid model, as read from a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub spot: f64,
    pub domestic: ShortRateParams,
    pub foreign: ShortRateParams,
    /// Adds the quanto drift `-ρ^{Sf} σ_f σ_S` to the foreign rate so that it
    /// is simulated under the domestic measure.
    #[serde(default = "default_true")]
    pub quanto: bool,
    #[serde(default)]
    pub variance: Option<CirParams>,
    /// Constant local volatility used when no surface is attached.
    #[serde(default)]
    pub flat_vol: Option<f64>,
    #[serde(default)]
    pub correlations: Correlations,
}

fn default_true() -> bool {
    true
}

impl ModelSpec {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        toml_parse(text, origin)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    /// Deterministic-rate local-vol model with constant volatility.
    pub fn black_scholes(spot: f64, vol: f64) -> Self {
        Self {
            spot,
            domestic: ShortRateParams::deterministic(),
            foreign: ShortRateParams::deterministic(),
            quanto: true,
            variance: None,
            flat_vol: Some(vol),
            correlations: Correlations::default(),
        }
    }

    pub fn has_stochastic_rates(&self) -> bool {
        self.domestic.sigma != 0.0 || self.foreign.sigma != 0.0
    }
}

fn toml_parse(text: &str, origin: &str) -> Result<ModelSpec> {
    toml::from_str(text).map_err(|e| Error::Parse { path: origin.to_string(), msg: e.to_string() })
}

/// Hull-White fitted to a discount curve through `r = x + φ(t)` with
/// `dx = -κ x dt + σ dW`, `x_0 = 0`.
#[derive(Debug, Clone)]
pub struct HullWhite {
    pub params: ShortRateParams,
    curve: DiscountCurve,
}

impl HullWhite {
    pub fn new(params: ShortRateParams, curve: DiscountCurve) -> Result<Self> {
        if !(params.sigma >= 0.0) || !(params.kappa >= 0.0) || !params.sigma.is_finite() || !params.kappa.is_finite() {
            return Err(Error::Validation(format!(
                "short-rate parameters must be non-negative, got κ={}, σ={}",
                params.kappa, params.sigma
            )));
        }
        Ok(Self { params, curve })
    }

    pub fn curve(&self) -> &DiscountCurve {
        &self.curve
    }

    /// `(1 - e^{-κt}) / κ`.
    fn b(&self, t: f64) -> f64 {
        let k = self.params.kappa;
        if k * t < 1e-12 {
            t
        } else {
            -(-k * t).exp_m1() / k
        }
    }

    /// `∫_0^t b(s)² ds`.
    fn b2_integral(&self, t: f64) -> f64 {
        let k = self.params.kappa;
        if k * t < 1e-3 {
            let t3 = t * t * t;
            t3 / 3.0 - k * t3 * t / 4.0 + 7.0 * k * k * t3 * t * t / 60.0
        } else {
            let b2 = -(-2.0 * k * t).exp_m1() / (2.0 * k);
            (t - 2.0 * self.b(t) + b2) / (k * k)
        }
    }

    /// Deterministic shift `φ(t) = f(0,t) + ½σ² b(t)²`.
    pub fn phi(&self, t: f64) -> Result<f64> {
        let b = self.b(t);
        Ok(self.curve.instantaneous_forward(t)? + 0.5 * self.params.sigma.powi(2) * b * b)
    }

    /// `∫_0^t φ(s) ds`, exact.
    pub fn phi_integral(&self, t: f64) -> Result<f64> {
        Ok(-self.curve.log_discount(t)? + 0.5 * self.params.sigma.powi(2) * self.b2_integral(t))
    }

    /// Drift of `r` at `(r, t)`: `κ(φ - r) + φ'`, i.e. `κ(θ(t) - r)`.
    /// Forwards are piecewise constant, so `φ'` is the convexity term only.
    pub fn drift(&self, r: f64, t: f64) -> Result<f64> {
        let dphi = self.params.sigma.powi(2) * self.b(t) * (-self.params.kappa * t).exp();
        Ok(self.params.kappa * (self.phi(t)? - r) + dphi)
    }

    /// Mean-reversion level `θ(t) = φ(t) + φ'(t)/κ`; `None` when `κ = 0`.
    pub fn theta(&self, t: f64) -> Result<Option<f64>> {
        if self.params.kappa == 0.0 {
            return Ok(None);
        }
        Ok(Some(self.phi(t)? + self.drift(self.phi(t)?, t)? / self.params.kappa))
    }
}

/// Spot, rates and variance at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateVector {
    pub s: f64,
    pub r_d: f64,
    pub r_f: f64,
    pub u: f64,
}

/// Drift and diffusion of a factor model, in the correlated-driver form:
/// factor `i` loads only on driver `i` with correlations `ρ`.
pub trait CoefficientFunction: Sync {
    /// Drifts of `(S, r^d, r^f, U)`.
    fn drift(&self, state: &StateVector, t: f64) -> [f64; N_DRIVERS];
    /// Diffusion loadings of `(S, r^d, r^f, U)` on their own drivers.
    fn diffusion(&self, state: &StateVector, t: f64) -> [f64; N_DRIVERS];
}

/// Drift and diffusion at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub drift: [f64; N_DRIVERS],
    pub diffusion: [f64; N_DRIVERS],
    /// The spot lookup fell outside the surface grid.
    pub extrapolated: bool,
}

/// Diagnostics recorded at validation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ModelDiagnostics {
    /// `2κθ ≥ ξ²`, when a variance process is present.
    pub feller: Option<bool>,
    /// Negative eigenvalues were clipped out of the correlation matrix.
    pub correlation_clipped: bool,
}

/// A validated model ready for simulation.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub domestic: HullWhite,
    pub foreign: HullWhite,
    correlation: [[f64; N_DRIVERS]; N_DRIVERS],
    cholesky: [[f64; N_DRIVERS]; N_DRIVERS],
    surface: Arc<LeverageSurface>,
    pub diagnostics: ModelDiagnostics,
}

/// Checks a spec against the curves, fits the short rates and factors the
/// correlation matrix. `surface` is a local-vol surface when the spec has no
/// variance process and a leverage surface otherwise; when absent, the flat
/// vol (local vol) or unit leverage (stochastic vol) is used.
pub fn validate_model(
    spec: &ModelSpec,
    domestic: &DiscountCurve,
    foreign: &DiscountCurve,
    surface: Option<LeverageSurface>,
) -> Result<Model> {
    if !(spec.spot > 0.0) || !spec.spot.is_finite() {
        return Err(Error::Validation(format!("spot must be positive, got {}", spec.spot)));
    }
    let mut diagnostics = ModelDiagnostics::default();
    if let Some(v) = &spec.variance {
        if !(v.xi >= 0.0 && v.kappa >= 0.0 && v.theta >= 0.0) {
            return Err(Error::Validation("CIR parameters must be non-negative".into()));
        }
        if !(v.u0 > 0.0) {
            return Err(Error::Validation(format!("initial variance must be positive, got {}", v.u0)));
        }
        diagnostics.feller = Some(v.feller());
    }
    let expected = if spec.variance.is_some() { SurfaceKind::Leverage } else { SurfaceKind::LocalVol };
    let surface = match surface {
        Some(s) if s.kind() != expected => {
            return Err(Error::Validation(format!("model needs a {expected:?} surface, got {:?}", s.kind())))
        }
        Some(s) => s,
        None => match (spec.variance, spec.flat_vol) {
            (Some(_), _) => LeverageSurface::constant(SurfaceKind::Leverage, 1.0)?,
            (None, Some(v)) if v >= 0.0 => LeverageSurface::constant(SurfaceKind::LocalVol, v)?,
            (None, _) => {
                return Err(Error::Validation("a local-vol model needs a surface or a non-negative flat_vol".into()))
            }
        },
    };
    let (correlation, cholesky, clipped) = factor_correlation(spec.correlations.matrix())?;
    diagnostics.correlation_clipped = clipped;
    Ok(Model {
        spec: spec.clone(),
        domestic: HullWhite::new(spec.domestic, domestic.clone())?,
        foreign: HullWhite::new(spec.foreign, foreign.clone())?,
        correlation,
        cholesky,
        surface: Arc::new(surface),
        diagnostics,
    })
}

impl Model {
    pub fn correlation(&self) -> &[[f64; N_DRIVERS]; N_DRIVERS] {
        &self.correlation
    }

    /// Lower-triangular factor of the correlation matrix.
    pub fn cholesky(&self) -> &[[f64; N_DRIVERS]; N_DRIVERS] {
        &self.cholesky
    }

    pub fn surface(&self) -> &LeverageSurface {
        &self.surface
    }

    /// The same model with another surface of the same kind.
    pub fn with_surface(&self, surface: LeverageSurface) -> Result<Self> {
        if surface.kind() != self.surface.kind() {
            return Err(Error::Validation("surface kind does not match the model".into()));
        }
        let mut m = self.clone();
        m.surface = Arc::new(surface);
        Ok(m)
    }

    pub fn initial_state(&self) -> Result<StateVector> {
        Ok(StateVector {
            s: self.spec.spot,
            r_d: self.domestic.phi(0.0)?,
            r_f: self.foreign.phi(0.0)?,
            u: self.spec.variance.map_or(0.0, |v| v.u0),
        })
    }

    /// Spot log-volatility `σ_S = L(s,t) sqrt(u⁺)` (or `σ_LV(s,t)`), and
    /// whether the lookup was extrapolated.
    pub fn spot_vol(&self, s: f64, u: f64, t: f64) -> (f64, bool) {
        let i = self.surface.slice_index(t);
        let l = self.surface.value_in_slice(i, s);
        let extrapolated = !self.surface.covers(s, t) && self.surface.k_grid().len() > 1;
        match self.spec.variance {
            Some(_) => (l * u.max(0.0).sqrt(), extrapolated),
            None => (l, extrapolated),
        }
    }

    pub fn eval_coefficients(&self, x: &StateVector, t: f64) -> Result<Coefficients> {
        let (vol, extrapolated) = self.spot_vol(x.s, x.u, t);
        let quanto =
            if self.spec.quanto { -self.correlation[SPOT][FOREIGN] * self.spec.foreign.sigma * vol } else { 0.0 };
        let (u_drift, u_diff) = match self.spec.variance {
            Some(v) => (v.kappa * (v.theta - x.u.max(0.0)), v.xi * x.u.max(0.0).sqrt()),
            None => (0.0, 0.0),
        };
        Ok(Coefficients {
            drift: [
                (x.r_d - x.r_f) * x.s,
                self.domestic.drift(x.r_d, t)?,
                self.foreign.drift(x.r_f, t)? + quanto,
                u_drift,
            ],
            diffusion: [vol * x.s, self.spec.domestic.sigma, self.spec.foreign.sigma, u_diff],
            extrapolated,
        })
    }

    /// `σ̄² = Σ σ^S_l ρ_lm σ^S_m`; the spot has a single driver here, so this
    /// is `(σ_S s)²`.
    pub fn sigma_bar_sq(&self, x: &StateVector, t: f64) -> f64 {
        let (vol, _) = self.spot_vol(x.s, x.u, t);
        let l = [vol * x.s];
        sigma_bar_sq(&l, &[vec![1.0]])
    }
}

impl CoefficientFunction for Model {
    fn drift(&self, state: &StateVector, t: f64) -> [f64; N_DRIVERS] {
        self.eval_coefficients(state, t).map(|c| c.drift).unwrap_or([f64::NAN; N_DRIVERS])
    }

    fn diffusion(&self, state: &StateVector, t: f64) -> [f64; N_DRIVERS] {
        self.eval_coefficients(state, t).map(|c| c.diffusion).unwrap_or([f64::NAN; N_DRIVERS])
    }
}

/// `Σ_{l,m} σ_l ρ_lm σ_m` for spot loadings on correlated drivers.
pub fn sigma_bar_sq(loadings: &[f64], rho: &[Vec<f64>]) -> f64 {
    let mut acc = 0.0;
    for (l, sl) in loadings.iter().enumerate() {
        for (m, sm) in loadings.iter().enumerate() {
            acc += sl * rho[l][m] * sm;
        }
    }
    acc.max(0.0)
}

/// Loadings `σ̂_k = Σ_l σ_l C_lk` on independent drivers, `ρ = C Cᵀ`.
pub fn independent_loadings(loadings: &[f64], chol: &[Vec<f64>]) -> Vec<f64> {
    let n = loadings.len();
    (0..n).map(|k| (0..n).map(|l| loadings[l] * chol[l][k]).sum()).collect()
}

/// Cholesky factor of a small correlation matrix; zero pivots within
/// tolerance give a zero column.
pub fn cholesky(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    if a.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidInput("correlation matrix must be square".into()));
    }
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if d < -CLIP_TOLERANCE {
                    return Err(Error::Validation("correlation matrix is not positive semi-definite".into()));
                }
                l[i][i] = d.max(0.0).sqrt();
            } else if l[j][j] > 1e-12 {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

/// Applies the Cholesky factor: `e = C z`.
pub fn correlate_increments(chol: &[Vec<f64>], z: &[f64]) -> Result<Vec<f64>> {
    if chol.len() != z.len() {
        return Err(Error::InvalidInput(format!("{} normals for {} drivers", z.len(), chol.len())));
    }
    Ok(chol.iter().map(|row| row.iter().zip(z).map(|(c, x)| c * x).sum()).collect())
}

/// Symmetric eigen-decomposition by cyclic Jacobi rotations. Returns the
/// eigenvalues and the eigenvectors as columns.
fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut a: Vec<Vec<f64>> = a.to_vec();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

type Matrix4 = [[f64; N_DRIVERS]; N_DRIVERS];

fn factor_correlation(m: Matrix4) -> Result<(Matrix4, Matrix4, bool)> {
    for i in 0..N_DRIVERS {
        for j in 0..N_DRIVERS {
            let r = m[i][j];
            if !r.is_finite() || r.abs() > 1.0 {
                return Err(Error::Validation(format!("correlation {r} outside [-1, 1]")));
            }
        }
    }
    let rows: Vec<Vec<f64>> = m.iter().map(|r| r.to_vec()).collect();
    let (eig, vecs) = jacobi_eigen(&rows);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -CLIP_TOLERANCE {
        return Err(Error::Validation(format!(
            "correlation matrix has eigenvalue {min:.3e} below -{CLIP_TOLERANCE:e}"
        )));
    }
    let (matrix, clipped) = if min < 0.0 {
        // rebuild from clipped eigenvalues and restore the unit diagonal
        let mut c = vec![vec![0.0; N_DRIVERS]; N_DRIVERS];
        for i in 0..N_DRIVERS {
            for j in 0..N_DRIVERS {
                c[i][j] = (0..N_DRIVERS).map(|k| vecs[i][k] * eig[k].max(0.0) * vecs[j][k]).sum();
            }
        }
        let d: Vec<f64> = (0..N_DRIVERS).map(|i| c[i][i].sqrt()).collect();
        for i in 0..N_DRIVERS {
            for j in 0..N_DRIVERS {
                c[i][j] = if i == j { 1.0 } else { c[i][j] / (d[i] * d[j]) };
            }
        }
        (c, true)
    } else {
        (rows, false)
    };
    let l = cholesky(&matrix)?;
    let mut out_m = [[0.0; N_DRIVERS]; N_DRIVERS];
    let mut out_l = [[0.0; N_DRIVERS]; N_DRIVERS];
    for i in 0..N_DRIVERS {
        for j in 0..N_DRIVERS {
            out_m[i][j] = matrix[i][j];
            out_l[i][j] = l[i][j];
        }
    }
    Ok((out_m, out_l, clipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(r: f64) -> DiscountCurve {
        DiscountCurve::flat(r, 10.0).unwrap()
    }

    fn hw_spec() -> ModelSpec {
        ModelSpec {
            spot: 1.0,
            domestic: ShortRateParams { kappa: 0.1, sigma: 0.01 },
            foreign: ShortRateParams { kappa: 0.1, sigma: 0.01 },
            quanto: true,
            variance: None,
            flat_vol: Some(0.2),
            correlations: Correlations {
                spot_domestic: 0.3,
                spot_foreign: -0.2,
                domestic_foreign: 0.2,
                ..Default::default()
            },
        }
    }

    #[test]
    fn identity_correlation_gives_identity_factor() {
        let m = validate_model(&ModelSpec::black_scholes(1.0, 0.2), &flat(0.0), &flat(0.0), None).unwrap();
        for i in 0..N_DRIVERS {
            for j in 0..N_DRIVERS {
                assert_eq!(m.cholesky()[i][j], if i == j { 1.0 } else { 0.0 });
            }
        }
        assert!(!m.diagnostics.correlation_clipped);
    }

    #[test]
    fn correlation_above_one_is_rejected() {
        let mut spec = hw_spec();
        spec.correlations.spot_domestic = 1.2;
        assert!(matches!(validate_model(&spec, &flat(0.0), &flat(0.0), None), Err(Error::Validation(_))));
    }

    #[test]
    fn two_by_two_cholesky() {
        let l = cholesky(&[vec![1.0, -0.5], vec![-0.5, 1.0]]).unwrap();
        assert_eq!(l[1][0], -0.5);
        assert!((l[1][1] - 0.75f64.sqrt()).abs() < 1e-15);
        let e = correlate_increments(&cholesky(&[vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap(), &[1.0, 1.0]).unwrap();
        assert_eq!(e[0], 1.0);
        assert!((e[1] - (0.5 + 0.75f64.sqrt())).abs() < 1e-15);
        assert!(correlate_increments(&l, &[1.0]).is_err());
    }

    #[test]
    fn infeasible_triple_is_rejected() {
        let mut spec = hw_spec();
        spec.correlations =
            Correlations { spot_domestic: 0.9, spot_foreign: 0.9, domestic_foreign: -0.9, ..Default::default() };
        assert!(matches!(validate_model(&spec, &flat(0.0), &flat(0.0), None), Err(Error::Validation(_))));
    }

    #[test]
    fn singular_matrix_is_accepted() {
        let mut spec = hw_spec();
        spec.correlations = Correlations { spot_domestic: 1.0, ..Default::default() };
        let m = validate_model(&spec, &flat(0.0), &flat(0.0), None).unwrap();
        assert_eq!(m.cholesky()[1][0], 1.0);
        assert_eq!(m.cholesky()[1][1], 0.0);
    }

    #[test]
    fn jacobi_reconstructs() {
        let a = vec![vec![1.0, 0.3, -0.2], vec![0.3, 1.0, 0.2], vec![-0.2, 0.2, 1.0]];
        let (e, v) = jacobi_eigen(&a);
        for i in 0..3 {
            for j in 0..3 {
                let r: f64 = (0..3).map(|k| v[i][k] * e[k] * v[j][k]).sum();
                assert!((r - a[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spot_drift_is_rate_differential() {
        let m = validate_model(&ModelSpec::black_scholes(1.0, 0.2), &flat(0.03), &flat(0.01), None).unwrap();
        let x = StateVector { s: 1.0, r_d: 0.03, r_f: 0.01, u: 0.0 };
        let c = m.eval_coefficients(&x, 0.5).unwrap();
        assert!((c.drift[SPOT] - 0.02).abs() < 1e-16);
        assert!((c.diffusion[SPOT] - 0.2).abs() < 1e-16);
        assert_eq!(c.diffusion[DOMESTIC], 0.0);
        // deterministic rates sit on the forward curve with zero drift
        assert!(c.drift[DOMESTIC].abs() < 1e-15);
    }

    #[test]
    fn cir_boundary() {
        let mut spec = ModelSpec::black_scholes(1.0, 0.2);
        spec.variance = Some(CirParams { kappa: 1.0, theta: 0.04, xi: 0.3, u0: 0.04 });
        let m = validate_model(&spec, &flat(0.0), &flat(0.0), None).unwrap();
        let x = StateVector { s: 1.0, r_d: 0.0, r_f: 0.0, u: 0.0 };
        let c = m.eval_coefficients(&x, 0.1).unwrap();
        assert_eq!(c.diffusion[VARIANCE], 0.0);
        assert!((c.drift[VARIANCE] - 0.04).abs() < 1e-16);
        assert_eq!(c.diffusion[SPOT], 0.0);
        assert_eq!(m.diagnostics.feller, Some(false));
    }

    #[test]
    fn sigma_bar_cases() {
        let mut spec = ModelSpec::black_scholes(1.0, 0.2);
        spec.variance = Some(CirParams { kappa: 1.0, theta: 0.04, xi: 0.0, u0: 0.04 });
        let m = validate_model(&spec, &flat(0.0), &flat(0.0), None).unwrap();
        let x = StateVector { s: 2.0, r_d: 0.0, r_f: 0.0, u: 0.04 };
        assert!((m.sigma_bar_sq(&x, 0.5) - 0.16).abs() < 1e-15);
        assert_eq!(sigma_bar_sq(&[1.5], &[vec![1.0]]), 2.25);
        let rho = vec![vec![1.0, -1.0], vec![-1.0, 1.0]];
        assert_eq!(sigma_bar_sq(&[1.0, 1.0], &rho), 0.0);
    }

    #[test]
    fn hull_white_integral_matches_quadrature() {
        for kappa in [0.0, 1e-5, 0.1, 2.0] {
            let hw = HullWhite::new(ShortRateParams { kappa, sigma: 0.02 }, flat(0.03)).unwrap();
            let t = 3.0;
            let n = 20000;
            let h = t / n as f64;
            let mut q = 0.0;
            for i in 0..n {
                q += hw.phi((i as f64 + 0.5) * h).unwrap() * h;
            }
            assert!((hw.phi_integral(t).unwrap() - q).abs() < 1e-9, "κ={kappa}");
        }
    }

    #[test]
    fn hull_white_theta_is_consistent_with_drift() {
        let hw = HullWhite::new(ShortRateParams { kappa: 0.1, sigma: 0.01 }, flat(0.03)).unwrap();
        let t = 1.5;
        let theta = hw.theta(t).unwrap().unwrap();
        let r = 0.05;
        assert!((hw.drift(r, t).unwrap() - 0.1 * (theta - r)).abs() < 1e-15);
        let zero = HullWhite::new(ShortRateParams::deterministic(), flat(0.03)).unwrap();
        assert_eq!(zero.theta(1.0).unwrap(), None);
    }
}
