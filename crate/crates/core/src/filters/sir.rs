use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::{Ensemble, StepDraws, WeightedEnsemble};
use crate::error::{Error, Result};
use crate::gain::GaussianStructures;
use crate::gaussian::SpdMatrix;
use crate::model::ModelSpec;
use crate::resampling::{apply_indices, normalize_log, resample_indices};
use crate::rng::RngStream;

/// Proposal kernel `π(u_{k+1} | u_k, y_{k+1})` of a sequential importance
/// resampler.
pub trait Proposal {
    fn dim(&self) -> usize;

    /// Draw driven by a caller-supplied standard normal vector `z`.
    fn sample(&self, u: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> DVector<f64>;

    /// Normalized log-density of `u_next`.
    fn log_density(&self, u_next: &DVector<f64>, u: &DVector<f64>, y: &DVector<f64>)
        -> Result<f64>;

    fn sample_from(&self, u: &DVector<f64>, y: &DVector<f64>, rng: &mut RngStream) -> DVector<f64> {
        let z = rng.standard_normal_vector(self.dim());
        self.sample(u, y, &z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalMean {
    /// `ψ(u)`
    Transition,
    /// `(I − KH)ψ(u) + K y`
    Optimal,
}

/// Gaussian proposal with one of the two built-in means and a fixed
/// covariance.
#[derive(Debug, Clone)]
pub struct GaussianProposal {
    model: ModelSpec,
    mean: ProposalMean,
    i_minus_kh: DMatrix<f64>,
    k: DMatrix<f64>,
    cov: SpdMatrix,
}

impl GaussianProposal {
    /// The transition density `N(ψ(u), Σ)`.
    pub fn transition(model: &ModelSpec, g: &GaussianStructures) -> Self {
        Self::build(model, g, ProposalMean::Transition, g.sigma.clone())
    }

    /// The optimal proposal `N((I − KH)ψ(u) + K y, C)`.
    pub fn optimal(model: &ModelSpec, g: &GaussianStructures) -> Self {
        Self::build(model, g, ProposalMean::Optimal, g.c.clone())
    }

    /// Optimal mean with covariance `factor · C`.
    pub fn optimal_scaled(model: &ModelSpec, g: &GaussianStructures, factor: f64) -> Result<Self> {
        Ok(Self::build(
            model,
            g,
            ProposalMean::Optimal,
            g.c.scaled(factor)?,
        ))
    }

    fn build(
        model: &ModelSpec,
        g: &GaussianStructures,
        mean: ProposalMean,
        cov: SpdMatrix,
    ) -> Self {
        Self {
            model: model.clone(),
            mean,
            i_minus_kh: g.i_minus_kh.clone(),
            k: g.k.clone(),
            cov,
        }
    }

    pub fn mean_kind(&self) -> ProposalMean {
        self.mean
    }

    pub fn cov(&self) -> &SpdMatrix {
        &self.cov
    }

    fn mean_at(&self, u: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let psi = self.model.psi(u);
        match self.mean {
            ProposalMean::Transition => psi,
            ProposalMean::Optimal => &self.i_minus_kh * psi + &self.k * y,
        }
    }
}

impl Proposal for GaussianProposal {
    fn dim(&self) -> usize {
        self.cov.dim()
    }

    fn sample(&self, u: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        self.mean_at(u, y) + self.cov.color(z)
    }

    fn log_density(
        &self,
        u_next: &DVector<f64>,
        u: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<f64> {
        gaussian_log_density(&self.cov, &(u_next - self.mean_at(u, y)))
    }
}

fn gaussian_log_density(cov: &SpdMatrix, centered: &DVector<f64>) -> Result<f64> {
    let d = cov.dim() as f64;
    Ok(-0.5 * cov.weighted_norm_sq(centered)? - 0.5 * (d * (2.0 * PI).ln() + cov.log_det()))
}

/// Generic propose-weight-resample step with
/// `log w = log N(y; Hû, Γ) + log N(û; ψ(u), Σ) − log π(û | u, y)`.
pub fn sir_step(
    model: &ModelSpec,
    g: &GaussianStructures,
    proposal: &impl Proposal,
    ens: &Ensemble,
    y_next: &DVector<f64>,
    draws: &StepDraws,
) -> Result<(Ensemble, WeightedEnsemble)> {
    ens.require_equal_weight()?;
    if proposal.dim() != model.state_dim() {
        return Err(Error::dim(
            "proposal dimension",
            model.state_dim(),
            proposal.dim(),
        ));
    }
    model.check_obs(y_next, "y_next")?;
    draws.check(ens.len(), ens.dim())?;
    let k = ens.step + 1;
    let mut proposed = Vec::with_capacity(ens.len());
    let mut log_w = Vec::with_capacity(ens.len());
    for (particle, (u, z)) in ens.particles.iter().zip(&draws.gaussians).enumerate() {
        let u_hat = proposal.sample(u, y_next, z);
        let lw = gaussian_log_density(&g.gamma, &(y_next - model.h() * &u_hat))?
            + gaussian_log_density(&g.sigma, &(&u_hat - model.psi(u)))?
            - proposal.log_density(&u_hat, u, y_next)?;
        if !lw.is_finite() {
            return Err(Error::NonFiniteLogWeight {
                particle,
                step: Some(k),
            });
        }
        proposed.push(u_hat);
        log_w.push(lw);
    }
    let w = normalize_log(&log_w).map_err(|e| e.at_step(k))?;
    let map = resample_indices(&w, &draws.uniforms).map_err(|e| e.at_step(k))?;
    let particles = apply_indices(&proposed, &map)?;
    Ok((
        Ensemble::equal_weight(particles, k)?,
        WeightedEnsemble {
            particles: proposed,
            weights: w,
        },
    ))
}
