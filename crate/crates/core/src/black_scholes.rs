//! Black-Scholes call price in the (T, y, w) parametrisation and its partials.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Arguments of the Black-Scholes call in log-moneyness / total variance form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsPoint {
    /// Maturity in years.
    pub t: f64,
    /// Log-moneyness `log(K / F_T)`.
    pub y: f64,
    /// Total implied variance.
    pub w: f64,
    /// `P^d(0,T) F_T`.
    pub disc_fwd: f64,
    /// Domestic instantaneous forward `f^d(0,T)`.
    pub f_dom: f64,
    /// Foreign instantaneous forward `f^f(0,T)`.
    pub f_for: f64,
}

impl BsPoint {
    /// Zero-rate point with unit discounted forward.
    pub fn unit(y: f64, w: f64) -> Self {
        Self { t: 1.0, y, w, disc_fwd: 1.0, f_dom: 0.0, f_for: 0.0 }
    }

    fn validate(&self) -> Result<()> {
        if !(self.w > 0.0) {
            return Err(Error::Domain(format!("total variance must be positive, got {}", self.w)));
        }
        if !(self.t > 0.0) || !(self.disc_fwd > 0.0) {
            return Err(Error::Domain(format!(
                "need T > 0 and P^d F_T > 0, got T={}, P^d F_T={}",
                self.t, self.disc_fwd
            )));
        }
        Ok(())
    }

    fn d1_d2(&self) -> (f64, f64) {
        let sw = self.w.sqrt();
        let d1 = -self.y / sw + 0.5 * sw;
        (d1, d1 - sw)
    }

    /// Strike `K = F_T e^y`, recovered from the discounted forward.
    pub fn strike(&self, discount: f64) -> f64 {
        self.disc_fwd / discount * self.y.exp()
    }
}

/// `C = P^d F_T (N(d1) - e^y N(d2))`.
pub fn bs_call_tiv(p: &BsPoint) -> Result<f64> {
    p.validate()?;
    let (d1, d2) = p.d1_d2();
    let price = p.disc_fwd * (norm_cdf(d1) - p.y.exp() * norm_cdf(d2));
    Ok(price.max(0.0))
}

/// First and second partials of the call in `(y, w)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsPartials {
    pub dc_dw: f64,
    pub d2c_dw2: f64,
    pub d2c_dwdy: f64,
    pub dc_dy: f64,
    pub d2c_dy2: f64,
}

pub fn bs_partials(p: &BsPoint) -> Result<BsPartials> {
    p.validate()?;
    let (_, d2) = p.d1_d2();
    let (y, w) = (p.y, p.w);
    let ey = y.exp();
    let dc_dw = 0.5 * p.disc_fwd * ey * norm_pdf(d2) / w.sqrt();
    let dc_dy = -p.disc_fwd * ey * norm_cdf(d2);
    Ok(BsPartials {
        dc_dw,
        d2c_dw2: 0.5 * dc_dw * (-0.25 - 1.0 / w + y * y / (w * w)),
        d2c_dwdy: dc_dw * (-y / w + 0.5),
        dc_dy,
        d2c_dy2: dc_dy + 2.0 * dc_dw,
    })
}

/// The bracket `1 - (y/w) w_y + w_yy/2 + (w_y²/4)(-1/4 - 1/w + y²/w²)`.
pub fn dupire_bracket(y: f64, w: f64, dw_dy: f64, d2w_dy2: f64) -> f64 {
    1.0 - y / w * dw_dy + 0.5 * d2w_dy2 + 0.25 * dw_dy * dw_dy * (-0.25 - 1.0 / w + y * y / (w * w))
}

/// `½ K² ∂²C/∂K²` written through the total-variance partials. May be
/// negative on a surface with butterfly arbitrage.
pub fn dupire_denominator(p: &BsPoint, dw_dy: f64, d2w_dy2: f64) -> Result<f64> {
    let g = bs_partials(p)?;
    Ok(g.dc_dw * dupire_bracket(p.y, p.w, dw_dy, d2w_dy2))
}

/// Total maturity derivative of the call, including the moves of the
/// discounted forward and of the log-moneyness with the curves.
pub fn bs_theta_tiv(p: &BsPoint, dw_dy: f64, dw_dt: f64) -> Result<f64> {
    let c = bs_call_tiv(p)?;
    let g = bs_partials(p)?;
    Ok(-p.f_for * c + g.dc_dw * dw_dt + (g.dc_dy + g.dc_dw * dw_dy) * (p.f_for - p.f_dom))
}

/// Strike derivatives `(∂C/∂K, ∂²C/∂K²)` by the chain rule through
/// `y(K)` and `w(y)`, without the closed-form simplification of
/// [`dupire_denominator`].
pub fn strike_derivatives(p: &BsPoint, strike: f64, dw_dy: f64, d2w_dy2: f64) -> Result<(f64, f64)> {
    let g = bs_partials(p)?;
    let first = g.dc_dy + g.dc_dw * dw_dy;
    let k2_second = g.d2c_dy2 + (2.0 * g.d2c_dwdy + g.d2c_dw2 * dw_dy - g.dc_dw) * dw_dy + g.dc_dw * d2w_dy2 - g.dc_dy;
    Ok((first / strike, k2_second / (strike * strike)))
}
