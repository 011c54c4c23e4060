//! Calibration and pricing engine for unspanned stochastic local volatility
//! models built on finite Markov chains.

pub mod ar_uslv;
pub mod config;
pub mod error;
pub mod grids;
pub mod itc_uslv;
pub mod lgp_curve;
pub mod lv_calibration;
pub mod markov_generator;
pub mod optim;
pub mod pricing;
pub mod sparse;
pub mod transient_probability;

pub use error::{Category, Error, GeneratorReport, Result, Violation};
pub use grids::{Grid1D, Grid2D, ThetaGrid, YGrid};
pub use lgp_curve::{CurveQuote, LgpParams};
pub use lv_calibration::{LvModel, LvSpace, QuoteSet, SpeedFactorTermStructure};
pub use markov_generator::GeneratorSplit;
pub use sparse::{SparseGenerator, Structure};
pub use transient_probability::{TransientDistribution, UniformizedChain};
