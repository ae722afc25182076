use thiserror::Error;

/// Errors raised by the calibration engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} = {value} is outside [{lo}, {hi}]")]
    OutOfRange { what: &'static str, value: f64, lo: f64, hi: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("calendar arbitrage: {0}")]
    CalendarArbitrage(String),
    #[error("butterfly arbitrage: {0}")]
    ButterflyArbitrage(String),
    #[error("degenerate estimator: {0}")]
    DegenerateEstimator(String),
    #[error("model validation failed: {0}")]
    Validation(String),
    #[error("non-finite state on path {path} at step {step}")]
    Simulation { path: usize, step: usize },
    #[error("time {0} is not on the simulation grid")]
    NotOnGrid(f64),
    #[error("sparse region: only {effective:.1} effective samples near strike {strike}")]
    SparseRegion { strike: f64, effective: f64 },
    #[error("implied volatility inversion failed: {0}")]
    Inversion(String),
    #[error("density solver unstable: minimum density {min} at time {time}")]
    SolverInstability { min: f64, time: f64 },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_range(what: &'static str, value: f64, lo: f64, hi: f64) -> Result<()> {
    if value >= lo && value <= hi {
        Ok(())
    } else {
        Err(Error::OutOfRange { what, value, lo, hi })
    }
}
