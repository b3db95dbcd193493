//! Hierarchical gamma-negative binomial (hGNB) factor model for
//! over-dispersed count matrices, with a full Gibbs sampler built on
//! Chinese-Restaurant-Table and Polya-Gamma data augmentation, a synthetic
//! data generator, and a clustering evaluation suite.

pub mod data;
pub mod dist;
pub mod error;
pub mod eval;
pub mod gibbs;
pub mod io;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod sim;

pub use error::{Error, ErrorClass, Result};
pub use rng::RngStream;
pub use scalar::Real;

/// Concrete `f64` aliases (the default precision everywhere).
pub type DesignMatrices64 = data::DesignMatrices<f64>;
pub type Hyperparams64 = data::Hyperparams<f64>;
pub type ParamState64 = model::ParamState<f64>;
pub type ModelState64 = model::ModelState<f64>;
pub type ChainOutput64 = model::ChainOutput<f64>;

/// Concrete `f32` aliases.
pub type DesignMatrices32 = data::DesignMatrices<f32>;
pub type Hyperparams32 = data::Hyperparams<f32>;
pub type ParamState32 = model::ParamState<f32>;
pub type ModelState32 = model::ModelState<f32>;
pub type ChainOutput32 = model::ChainOutput<f32>;
