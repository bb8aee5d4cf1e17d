//! Semi-parametric conditional density correction (SPCDE) of gridded
//! climate-model output.
//!
//! The joint distribution of daily maximum temperature (TMAX) and
//! precipitation (PRCP) over a grid is factored into univariate conditionals
//! along a max-min spatial ordering with nearest-earlier neighbor sets and a
//! first-order Markov dependence in time. Each conditional is estimated with
//! a spline-mixture density whose weights come from a small neural network
//! ([`spqr`]). Model output is mapped to uniform scores through the fitted
//! conditional CDFs with the source indicator set to "model", then pushed
//! back through the conditional quantile functions with the indicator set to
//! "observed" ([`calibration`]).
//!
//! Supporting modules provide the quantile-mapping baseline ([`qm`]), the
//! evaluation metrics ([`metrics`]), CSV ingestion ([`dataio`]) and a
//! synthetic data generator ([`synth`]).

pub mod calibration;
pub mod config;
pub mod dataio;
pub mod error;
pub mod field;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod qm;
pub mod spline;
pub mod spqr;
pub mod synth;
pub mod vecchia;

pub use error::{Error, Result};
