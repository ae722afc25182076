//! Discount curves, forwards and the total implied variance surface.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::black_scholes::BsPoint;
use crate::error::{check_range, Error, Result};
use crate::interp::{Pchip, SplineBasis};

/// Zero-coupon bond prices `P(0, T)` on a tenor grid, log-linear in between
/// (piecewise-constant instantaneous forwards).
#[derive(Debug, Clone, PartialEq)]
pub struct DiscountCurve {
    tenors: Vec<f64>,
    log_discounts: Vec<f64>,
}

impl DiscountCurve {
    /// Builds a curve from `(tenor, discount)` nodes. A missing `T = 0` node
    /// is added with `P(0, 0) = 1`.
    pub fn new(tenors: Vec<f64>, discounts: Vec<f64>) -> Result<Self> {
        if tenors.len() != discounts.len() || tenors.is_empty() {
            return Err(Error::InvalidInput("curve needs matching, non-empty tenor and discount columns".into()));
        }
        let (mut tenors, mut discounts) = (tenors, discounts);
        if tenors[0] > 0.0 {
            tenors.insert(0, 0.0);
            discounts.insert(0, 1.0);
        }
        if tenors[0] != 0.0 {
            return Err(Error::InvalidInput("curve tenors must start at 0".into()));
        }
        if discounts[0] != 1.0 {
            return Err(Error::InvalidInput(format!("P(0,0) must equal 1, got {}", discounts[0])));
        }
        if tenors.len() < 2 {
            return Err(Error::InvalidInput("curve needs a tenor beyond 0".into()));
        }
        if tenors.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("curve tenors must be strictly increasing".into()));
        }
        if discounts.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::InvalidInput("discount factors must be positive".into()));
        }
        let log_discounts = discounts.iter().map(|p| p.ln()).collect();
        Ok(Self { tenors, log_discounts })
    }

    /// Flat continuously-compounded curve out to `horizon`.
    pub fn flat(rate: f64, horizon: f64) -> Result<Self> {
        Self::new(vec![0.0, horizon], vec![1.0, (-rate * horizon).exp()])
    }

    pub fn tenors(&self) -> &[f64] {
        &self.tenors
    }

    pub fn discounts(&self) -> Vec<f64> {
        self.log_discounts.iter().map(|l| l.exp()).collect()
    }

    pub fn max_tenor(&self) -> f64 {
        *self.tenors.last().unwrap()
    }

    fn locate(&self, t: f64) -> Result<usize> {
        check_range("curve time", t, 0.0, self.max_tenor())?;
        let i = self.tenors.partition_point(|&v| v <= t);
        Ok(i.saturating_sub(1).min(self.tenors.len() - 2))
    }

    /// `log P(0, t)`, i.e. minus the integrated instantaneous forward.
    pub fn log_discount(&self, t: f64) -> Result<f64> {
        let i = self.locate(t)?;
        let (t0, t1) = (self.tenors[i], self.tenors[i + 1]);
        let (l0, l1) = (self.log_discounts[i], self.log_discounts[i + 1]);
        Ok(l0 + (t - t0) / (t1 - t0) * (l1 - l0))
    }

    pub fn discount_factor(&self, t: f64) -> Result<f64> {
        if t == 0.0 {
            return Ok(1.0);
        }
        Ok(self.log_discount(t)?.exp())
    }

    /// `f(0, t)`; at a node the right segment is used, at the last tenor the
    /// last segment.
    pub fn instantaneous_forward(&self, t: f64) -> Result<f64> {
        let i = self.locate(t)?;
        let (t0, t1) = (self.tenors[i], self.tenors[i + 1]);
        Ok(-(self.log_discounts[i + 1] - self.log_discounts[i]) / (t1 - t0))
    }

    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            tenor: f64,
            discount: f64,
        }
        let rows: Vec<Row> = read_csv(path.as_ref())?;
        let (t, p) = rows.into_iter().map(|r| (r.tenor, r.discount)).unzip();
        Self::new(t, p)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("tenor,discount\n");
        for (t, l) in self.tenors.iter().zip(&self.log_discounts) {
            out.push_str(&format!("{},{}\n", t, l.exp()));
        }
        write_file(path.as_ref(), &out)
    }
}

/// `log(K / F)`.
pub fn log_moneyness(strike: f64, forward: f64) -> Result<f64> {
    if !(strike > 0.0) || !(forward > 0.0) {
        return Err(Error::Domain(format!(
            "log-moneyness needs positive strike and forward, got K={strike}, F={forward}"
        )));
    }
    Ok((strike / forward).ln())
}

/// Total variance and its partials at one `(y, T)` point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TotalVariancePartials {
    pub w: f64,
    pub dw_dy: f64,
    pub d2w_dy2: f64,
    pub dw_dt: f64,
}

/// One implied-volatility quote.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct VolQuote {
    pub maturity: f64,
    pub strike: f64,
    pub implied_vol: f64,
}

/// Total implied variance `w(y, T) = Σ²T` on a rectangular log-moneyness by
/// maturity grid.
///
/// Along each log-moneyness node `w` is interpolated in `T` with a monotone
/// cubic through an implicit `w(y, 0) = 0` node and extended linearly past
/// the last maturity. Across log-moneyness a natural cubic spline is used,
/// flat outside the grid. All partials are derivatives of this interpolant.
#[derive(Debug, Clone)]
pub struct TotalVarianceSurface {
    y_grid: Vec<f64>,
    t_grid: Vec<f64>,
    // w_values[i][j] = w(y_j, T_i)
    w_values: Vec<Vec<f64>>,
    columns: Vec<Pchip>,
    y_basis: SplineBasis,
}

impl TotalVarianceSurface {
    /// `w_values[i][j]` holds `w(y_grid[j], t_grid[i])`.
    pub fn new(y_grid: Vec<f64>, t_grid: Vec<f64>, w_values: Vec<Vec<f64>>) -> Result<Self> {
        if y_grid.len() < 2 || t_grid.is_empty() {
            return Err(Error::InvalidInput("surface needs at least two log-moneyness nodes and one maturity".into()));
        }
        if y_grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("log-moneyness grid must be increasing".into()));
        }
        if !(t_grid[0] > 0.0) || t_grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("maturity grid must be positive and increasing".into()));
        }
        if w_values.len() != t_grid.len() || w_values.iter().any(|r| r.len() != y_grid.len()) {
            return Err(Error::InvalidInput("surface values do not match the grid".into()));
        }
        for (i, row) in w_values.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                if !(w > 0.0) || !w.is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "total variance must be positive, got {w} at y={}, T={}",
                        y_grid[j], t_grid[i]
                    )));
                }
                if i > 0 && w < w_values[i - 1][j] {
                    return Err(Error::CalendarArbitrage(format!(
                        "w decreases from {} to {w} between T={} and T={} at y={}",
                        w_values[i - 1][j],
                        t_grid[i - 1],
                        t_grid[i],
                        y_grid[j]
                    )));
                }
            }
        }
        let mut knots_t = Vec::with_capacity(t_grid.len() + 1);
        knots_t.push(0.0);
        knots_t.extend_from_slice(&t_grid);
        let columns = (0..y_grid.len())
            .map(|j| {
                let mut vals = Vec::with_capacity(t_grid.len() + 1);
                vals.push(0.0);
                vals.extend(w_values.iter().map(|row| row[j]));
                Pchip::new(knots_t.clone(), vals)
            })
            .collect();
        let surface = Self { y_basis: SplineBasis::new(y_grid.clone()), y_grid, t_grid, w_values, columns };
        surface.check_interpolated_calendar()?;
        Ok(surface)
    }

    /// Samples `f(y, T)` onto the grid.
    pub fn from_fn(y_grid: Vec<f64>, t_grid: Vec<f64>, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let w = t_grid.iter().map(|&t| y_grid.iter().map(|&y| f(y, t)).collect()).collect();
        Self::new(y_grid, t_grid, w)
    }

    /// Flat implied volatility `vol`.
    pub fn flat(vol: f64, y_grid: Vec<f64>, t_grid: Vec<f64>) -> Result<Self> {
        Self::from_fn(y_grid, t_grid, |_, t| vol * vol * t)
    }

    /// Builds the surface from implied-volatility quotes. Each maturity's
    /// smile is splined in log-moneyness and resampled on `y_nodes` uniform
    /// nodes spanning all quoted log-moneyness values.
    pub fn from_quotes(quotes: &[VolQuote], forward: impl Fn(f64) -> Result<f64>, y_nodes: usize) -> Result<Self> {
        let mut by_maturity: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
        for q in quotes {
            if !(q.maturity > 0.0) || !(q.strike > 0.0) || !(q.implied_vol > 0.0) {
                return Err(Error::InvalidInput(format!("invalid quote {q:?}")));
            }
            let f = forward(q.maturity)?;
            let y = log_moneyness(q.strike, f)?;
            by_maturity.entry(q.maturity.to_bits()).or_default().push((y, q.implied_vol * q.implied_vol * q.maturity));
        }
        if by_maturity.is_empty() {
            return Err(Error::InvalidInput("no quotes".into()));
        }
        let mut t_grid = Vec::new();
        let mut smiles = Vec::new();
        let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (bits, mut pts) in by_maturity {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            pts.dedup_by(|a, b| a.0 == b.0);
            if pts.len() < 2 {
                return Err(Error::InvalidInput(format!(
                    "maturity {} needs at least two strikes",
                    f64::from_bits(bits)
                )));
            }
            y_lo = y_lo.min(pts[0].0);
            y_hi = y_hi.max(pts[pts.len() - 1].0);
            t_grid.push(f64::from_bits(bits));
            smiles.push(pts);
        }
        let y_nodes = y_nodes.max(2);
        let y_grid: Vec<f64> = (0..y_nodes).map(|k| y_lo + (y_hi - y_lo) * k as f64 / (y_nodes - 1) as f64).collect();
        let mut w_values = Vec::with_capacity(t_grid.len());
        let mut m = Vec::new();
        for pts in &smiles {
            let (ys, ws): (Vec<f64>, Vec<f64>) = pts.iter().copied().unzip();
            let basis = SplineBasis::new(ys.clone());
            basis.second_derivatives(&ws, &mut m);
            let row = y_grid
                .iter()
                .map(|&y| {
                    let yc = y.clamp(ys[0], ys[ys.len() - 1]);
                    basis.eval(&ws, &m, yc).0
                })
                .collect();
            w_values.push(row);
        }
        Self::new(y_grid, t_grid, w_values)
    }

    pub fn from_csv(path: impl AsRef<Path>, forward: impl Fn(f64) -> Result<f64>, y_nodes: usize) -> Result<Self> {
        let quotes: Vec<VolQuote> = read_csv(path.as_ref())?;
        Self::from_quotes(&quotes, forward, y_nodes)
    }

    /// Reads the node grid written by [`Self::write_csv`].
    pub fn from_grid_csv(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            maturity: f64,
            log_moneyness: f64,
            total_variance: f64,
        }
        let rows: Vec<Row> = read_csv(path.as_ref())?;
        let mut t_grid: Vec<f64> = rows.iter().map(|r| r.maturity).collect();
        let mut y_grid: Vec<f64> = rows.iter().map(|r| r.log_moneyness).collect();
        t_grid.sort_by(f64::total_cmp);
        t_grid.dedup();
        y_grid.sort_by(f64::total_cmp);
        y_grid.dedup();
        if rows.len() != t_grid.len() * y_grid.len() {
            return Err(Error::Parse {
                path: path.as_ref().display().to_string(),
                msg: "rows do not form a rectangular maturity by log-moneyness grid".into(),
            });
        }
        let mut w = vec![vec![f64::NAN; y_grid.len()]; t_grid.len()];
        for r in &rows {
            let i = t_grid.partition_point(|&v| v < r.maturity);
            let j = y_grid.partition_point(|&v| v < r.log_moneyness);
            w[i][j] = r.total_variance;
        }
        Self::new(y_grid, t_grid, w)
    }

    pub fn y_grid(&self) -> &[f64] {
        &self.y_grid
    }

    pub fn t_grid(&self) -> &[f64] {
        &self.t_grid
    }

    pub fn w_values(&self) -> &[Vec<f64>] {
        &self.w_values
    }

    pub fn max_maturity(&self) -> f64 {
        *self.t_grid.last().unwrap()
    }

    /// `(w, ∂w/∂y, ∂²w/∂y², ∂w/∂T)` at `(y, t)`.
    pub fn eval(&self, y: f64, t: f64) -> Result<TotalVariancePartials> {
        if !(t > 0.0) {
            return Err(Error::Domain(format!("total variance needs T > 0, got {t}")));
        }
        if !y.is_finite() {
            return Err(Error::Domain(format!("log-moneyness must be finite, got {y}")));
        }
        let n = self.y_grid.len();
        let (values, slopes) = self.columns_at(t);
        let y_lo = self.y_grid[0];
        let y_hi = self.y_grid[n - 1];
        let outside = y < y_lo || y > y_hi;
        let yc = y.clamp(y_lo, y_hi);
        let mut m = Vec::new();
        self.y_basis.second_derivatives(&values, &mut m);
        let (w, dw_dy, d2w_dy2) = self.y_basis.eval(&values, &m, yc);
        self.y_basis.second_derivatives(&slopes, &mut m);
        let dw_dt = self.y_basis.eval(&slopes, &m, yc).0;
        if !(w > 0.0) {
            return Err(Error::Domain(format!("interpolated total variance {w} is not positive at y={y}, T={t}")));
        }
        Ok(if outside {
            TotalVariancePartials { w, dw_dy: 0.0, d2w_dy2: 0.0, dw_dt }
        } else {
            TotalVariancePartials { w, dw_dy, d2w_dy2, dw_dt }
        })
    }

    /// Implied volatility `sqrt(w / T)`.
    pub fn implied_vol(&self, y: f64, t: f64) -> Result<f64> {
        Ok((self.eval(y, t)?.w / t).sqrt())
    }

    // The y-spline of monotone columns can undershoot between nodes; reject
    // node data whose interpolant loses calendar monotonicity.
    /// Column values and maturity slopes at `t`, one per y-node.
    fn columns_at(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let t_max = self.max_maturity();
        let last = &self.w_values[self.t_grid.len() - 1];
        self.columns
            .iter()
            .zip(last)
            .map(|(col, &w_last)| {
                if t <= t_max {
                    col.eval(t)
                } else {
                    let s = col.last_secant();
                    (w_last + (t - t_max) * s, s)
                }
            })
            .unzip()
    }

    fn check_interpolated_calendar(&self) -> Result<()> {
        const SUB: usize = 8;
        let mut times = Vec::new();
        let mut prev = 0.0;
        for &t in &self.t_grid {
            for k in 1..=SUB {
                times.push(prev + (t - prev) * k as f64 / SUB as f64);
            }
            prev = t;
        }
        let mut m = Vec::new();
        for &t in &times {
            let (_, slopes) = self.columns_at(t);
            self.y_basis.second_derivatives(&slopes, &mut m);
            for win in self.y_basis.knots().windows(2) {
                for k in 0..=SUB {
                    let y = win[0] + (win[1] - win[0]) * k as f64 / SUB as f64;
                    let dw_dt = self.y_basis.eval(&slopes, &m, y).0;
                    if dw_dt < -1e-12 {
                        return Err(Error::CalendarArbitrage(format!(
                            "interpolated dw/dT = {dw_dt} < 0 at y={y}, T={t}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Writes the node grid as `maturity,log_moneyness,total_variance`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("maturity,log_moneyness,total_variance\n");
        for (t, row) in self.t_grid.iter().zip(&self.w_values) {
            for (y, w) in self.y_grid.iter().zip(row) {
                out.push_str(&format!("{t},{y},{w}\n"));
            }
        }
        write_file(path.as_ref(), &out)
    }
}

/// Spot, both discount curves and the implied variance surface.
#[derive(Debug, Clone)]
pub struct MarketSnapshot {
    pub spot: f64,
    pub domestic: DiscountCurve,
    pub foreign: DiscountCurve,
    pub surface: TotalVarianceSurface,
}

impl MarketSnapshot {
    pub fn new(
        spot: f64,
        domestic: DiscountCurve,
        foreign: DiscountCurve,
        surface: TotalVarianceSurface,
    ) -> Result<Self> {
        if !(spot > 0.0) || !spot.is_finite() {
            return Err(Error::InvalidInput(format!("spot must be positive, got {spot}")));
        }
        let horizon = domestic.max_tenor().min(foreign.max_tenor());
        if surface.max_maturity() > horizon {
            return Err(Error::InvalidInput(format!(
                "surface maturities extend to {} but curves stop at {horizon}",
                surface.max_maturity()
            )));
        }
        Ok(Self { spot, domestic, foreign, surface })
    }

    /// `F_T = S_0 P^f(0,T) / P^d(0,T)`.
    pub fn forward_price(&self, t: f64) -> Result<f64> {
        forward_price(self.spot, &self.domestic, &self.foreign, t)
    }

    pub fn horizon(&self) -> f64 {
        self.domestic.max_tenor().min(self.foreign.max_tenor())
    }

    /// Black-Scholes point and surface partials for strike `k` at maturity `t`.
    pub fn bs_point(&self, k: f64, t: f64) -> Result<(BsPoint, TotalVariancePartials)> {
        let fwd = self.forward_price(t)?;
        let y = log_moneyness(k, fwd)?;
        let partials = self.surface.eval(y, t)?;
        let point = BsPoint {
            t,
            y,
            w: partials.w,
            disc_fwd: self.domestic.discount_factor(t)? * fwd,
            f_dom: self.domestic.instantaneous_forward(t)?,
            f_for: self.foreign.instantaneous_forward(t)?,
        };
        Ok((point, partials))
    }
}

pub fn forward_price(spot: f64, domestic: &DiscountCurve, foreign: &DiscountCurve, t: f64) -> Result<f64> {
    if t == 0.0 {
        return Ok(spot);
    }
    Ok(spot * (foreign.log_discount(t)? - domestic.log_discount(t)?).exp())
}

pub(crate) fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let shown = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse { path: shown.clone(), msg: e.to_string() })?;
    rdr.deserialize().map(|r| r.map_err(|e| Error::Parse { path: shown.clone(), msg: e.to_string() })).collect()
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| Error::Io { path: path.display().to_string(), source })
}
