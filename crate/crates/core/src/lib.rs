//! Local and stochastic-local volatility calibration under stochastic
//! interest rates.
//!
//! The crate goes from a total-implied-variance surface and two discount
//! curves to a local-vol or leverage surface. It has closed-form Dupire
//! variants for deterministic rates, a Monte-Carlo engine for the
//! Hull-White / CIR hybrid, a slice-by-slice calibrator, and a 1D density
//! solver used as an independent check.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod black_scholes;
pub mod calibration;
pub mod curves;
pub mod dupire;
pub mod error;
pub mod estimate;
pub mod fokker_planck;
mod interp;
pub mod mc;
pub mod models;

pub use calibration::{
    calibrate_local_vol, calibrate_slv_leverage, deterministic_local_vol, reprice, CalibrationConfig, CalibrationReport,
};
pub use curves::{DiscountCurve, MarketSnapshot, TotalVarianceSurface};
pub use dupire::{LeverageSurface, NodeFlags, SurfaceKind};
pub use error::{Error, Result};
pub use estimate::EstimateWithError;
pub use fokker_planck::{density_call_prices, solve_forward_kolmogorov, DensityGrid, FpSettings};
pub use mc::{simulate_paths, Estimator, PathBatch, SimulationConfig, SimulationGrid};
pub use models::{validate_model, Model, ModelSpec};
