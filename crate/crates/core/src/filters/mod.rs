//! Particle filters as deterministic functions of (state, data, draws).
//!
//! Per step the draws are laid out as all state-noise Gaussians in particle
//! order, followed by all resampling uniforms in particle order. Two runs
//! that share a seed therefore share every draw.

mod run;
mod sir;
mod steps;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::resampling::WeightVector;
use crate::rng::{Purpose, RngStream};

pub use run::{
    run_filter, run_gopf_forms_shared, FilterRun, InitialDistribution, SirProposal, Variant,
};
pub use sir::{sir_step, GaussianProposal, Proposal, ProposalMean};
#[cfg(feature = "dense-pairs")]
pub use steps::DensePairNoise;
pub use steps::{
    bpf_step, gopf_shared_draws, gopf_step_form1, gopf_step_form2, opf_step, LazyPairNoise,
    PairNoise,
};

/// Equal-weight (after resampling) particle set at step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub particles: Vec<DVector<f64>>,
    pub weights: WeightVector,
    pub step: usize,
}

impl Ensemble {
    pub fn equal_weight(particles: Vec<DVector<f64>>, step: usize) -> Result<Self> {
        if particles.is_empty() {
            return Err(Error::InvalidArgument(
                "ensemble needs at least one particle".into(),
            ));
        }
        let d = particles[0].len();
        if let Some(bad) = particles.iter().find(|p| p.len() != d) {
            return Err(Error::dim("ensemble particle", d, bad.len()));
        }
        let n = particles.len();
        Ok(Self {
            particles,
            weights: WeightVector::uniform(n),
            step,
        })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.particles[0].len()
    }

    pub fn mean(&self) -> DVector<f64> {
        weighted_mean(&self.particles, &self.weights.norm)
    }

    fn is_equal_weighted(&self) -> bool {
        let target = 1.0 / self.len() as f64;
        self.weights
            .norm
            .iter()
            .all(|w| (w - target).abs() <= 1e-12)
    }

    pub(crate) fn require_equal_weight(&self) -> Result<()> {
        if self.is_equal_weighted() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "ensemble at step {} must be equal-weighted",
                self.step
            )))
        }
    }
}

/// Weighted particle set before resampling.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedEnsemble {
    pub particles: Vec<DVector<f64>>,
    pub weights: WeightVector,
}

impl WeightedEnsemble {
    pub fn mean(&self) -> DVector<f64> {
        weighted_mean(&self.particles, &self.weights.norm)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }
}

pub(crate) fn weighted_mean(particles: &[DVector<f64>], w: &[f64]) -> DVector<f64> {
    let mut acc = DVector::zeros(particles[0].len());
    for (p, &wi) in particles.iter().zip(w) {
        acc.axpy(wi, p, 1.0);
    }
    acc
}

/// Random inputs of one filter step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDraws {
    /// Standard normal vectors, one per particle, colored by the step.
    pub gaussians: Vec<DVector<f64>>,
    /// Resampling uniforms, one per particle.
    pub uniforms: Vec<f64>,
}

impl StepDraws {
    /// Draws `n` Gaussian vectors of dimension `dim`, then `n` uniforms.
    pub fn from_stream(rng: &mut RngStream, n: usize, dim: usize) -> Self {
        let gaussians = (0..n).map(|_| rng.standard_normal_vector(dim)).collect();
        let uniforms = rng.uniforms(n);
        Self {
            gaussians,
            uniforms,
        }
    }

    /// The draws of step `k` under `seed`.
    pub fn generate(seed: u64, k: usize, n: usize, dim: usize) -> Self {
        let mut rng = RngStream::for_purpose(seed, Purpose::FilterStep, &[k as u64]);
        Self::from_stream(&mut rng, n, dim)
    }

    pub fn len(&self) -> usize {
        self.uniforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.uniforms.is_empty()
    }

    pub(crate) fn check(&self, n: usize, dim: usize) -> Result<()> {
        if self.gaussians.len() != n {
            return Err(Error::dim("step gaussians", n, self.gaussians.len()));
        }
        if self.uniforms.len() != n {
            return Err(Error::dim("step uniforms", n, self.uniforms.len()));
        }
        if let Some(z) = self.gaussians.iter().find(|z| z.len() != dim) {
            return Err(Error::dim("step gaussian dimension", dim, z.len()));
        }
        Ok(())
    }
}
