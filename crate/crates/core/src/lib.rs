//! Statistical post-processing of ensemble temperature forecasts.
//!
//! The crate calibrates a 9-member ensemble with EMOS (a normal predictive
//! distribution fitted by minimum CRPS) and BMA (a normal mixture fitted by
//! EM), groups stations for semi-local estimation, and verifies the results
//! with CRPS, coverage, rank/PIT histograms, Diebold–Mariano tests and
//! subsampled Kolmogorov–Smirnov tests.
//!
//! Numerical code is generic over [`float::Real`] (`f32` or `f64`). The
//! aliases below fix the scalar to `f64`, which the experiment driver uses.
//!
//! ```
//! use enspost_core::{ForecastCase, NormalPredictive, EmosParams};
//! use enspost_core::distributions::Predictive;
//! use chrono::NaiveDate;
//!
//! let p = EmosParams { a0: 0.0, a: [1.0 / 9.0; 9], b0: 1.0, b1: 0.0 };
//! let day = NaiveDate::from_ymd_opt(2017, 11, 1).unwrap();
//! let case = ForecastCase::new(day, 12, 1, [285.0; 9], Some(285.0)).unwrap();
//! let d: NormalPredictive = p.predict(&case).unwrap();
//! assert!((d.crps(285.0) - 0.233695).abs() < 1e-6);
//! ```

pub mod bma;
pub mod cluster;
pub mod compare;
pub mod config;
pub mod data;
pub mod distributions;
pub mod emos;
pub mod error;
pub mod experiment;
pub mod float;
pub mod optim;
pub mod output;
pub mod special;
pub mod synthetic;
pub mod verify;

pub use error::{Error, Result};

pub type NormalPredictive = distributions::Normal<f64>;
pub type MixturePredictive = distributions::NormalMixture<f64>;
pub type EmosParams = emos::EmosCoefficients<f64>;
pub type BmaParams = bma::BmaCoefficients<f64>;
pub type ForecastCase = data::ForecastCase<f64>;
pub type Dataset = data::Dataset<f64>;
pub type TrainingWindow = data::TrainingWindow<f64>;
