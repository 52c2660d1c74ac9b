//! Bayesian peaks-over-threshold modelling of extremes with
//! covariate-dependent generalized Pareto parameters.
//!
//! The crate covers the full pipeline: CSV ingestion and covariate
//! engineering ([`features`]), GPD mathematics ([`gpd`]), the two
//! regression links between covariates and local GPD parameters
//! ([`link`]) — a direct log/identity/logit form (Model I) and a threshold-stable
//! reparameterization (Model II) — a random-walk Metropolis–Hastings
//! sampler with indicator-based variable selection ([`sampler`]), and
//! post-fit inference: goodness of fit, return levels, model comparison
//! and scenario simulation ([`inference`]).
//!
//! Core distribution and link math is generic over the scalar type via
//! [`Real`]; the `f64` instantiations are what the pipeline uses.

pub mod config;
pub mod features;
pub mod gpd;
pub mod inference;
pub mod link;
pub mod outputs;
pub mod sampler;
pub mod synth;

use core::fmt::Debug;

/// Scalar type the core math is generic over: `f32` or `f64`.
pub trait Real: num_traits::Float + num_traits::FromPrimitive + Debug + 'static {}
impl<T: num_traits::Float + num_traits::FromPrimitive + Debug + 'static> Real for T {}

/// Double-precision GPD parameters, the pipeline's working type.
pub type Gpd = gpd::GpdParams<f64>;
/// Single-precision GPD parameters.
pub type Gpd32 = gpd::GpdParams<f32>;
/// Double-precision local (covariate-conditional) GPD with exceedance rate.
pub type LocalGpd = link::LocalGpd<f64>;

pub use features::{DesignMatrix, DesignRow, FeatureSpec, ObservationRecord, Pollutant};
pub use link::{ModelIIParams, ModelIParams, ModelKind, ModelParams};
pub use sampler::{ChainConfig, PosteriorSampleSet};
