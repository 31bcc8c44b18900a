//! Particle filters for conditionally Gaussian state-space models
//! `u_{k+1} = ψ(u_k) + ξ_k`, `y_{k+1} = H u_{k+1} + η_{k+1}`, together with
//! the exact linear-Gaussian recursion, 3DVAR, error functionals and a
//! twin-experiment harness.
// `!(x > 0.0)` rejects NaN along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod filters;
pub mod gain;
pub mod gaussian;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod resampling;
pub mod rng;

pub use error::{Error, Result};
pub use filters::{
    run_filter, Ensemble, FilterRun, InitialDistribution, StepDraws, Variant, WeightedEnsemble,
};
pub use gain::{compute_structures, GaussianBelief, GaussianStructures};
pub use gaussian::{GaussianDist, SpdMatrix};
pub use metrics::{RateFit, TestFunctionDictionary};
pub use model::{BuiltinMap, ModelSpec, TruthRun};
pub use resampling::{ResampleIndexMap, WeightVector};
pub use rng::{Purpose, RngStream};

pub use nalgebra::{DMatrix, DVector};

/// Library version written into every report summary.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
