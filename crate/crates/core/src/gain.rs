//! Gaussian structures of the optimal proposal (`C`, `S`, `K`), cycled
//! 3DVAR, and the exact Kalman recursion used as ground truth for linear
//! maps.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::SpdMatrix;
use crate::model::ModelSpec;

/// Derived matrices for a model:
///
/// ```text
/// S   = H Σ Hᵀ + Γ
/// K   = Σ Hᵀ S⁻¹
/// C⁻¹ = Σ⁻¹ + Hᵀ Γ⁻¹ H
/// ```
#[derive(Debug, Clone)]
pub struct GaussianStructures {
    pub sigma: SpdMatrix,
    pub gamma: SpdMatrix,
    pub c: SpdMatrix,
    pub s: SpdMatrix,
    pub k: DMatrix<f64>,
    pub i_minus_kh: DMatrix<f64>,
}

pub fn compute_structures(model: &ModelSpec) -> Result<GaussianStructures> {
    let sigma = model.sigma_cov()?;
    let gamma = model.gamma_cov()?;
    let h = model.h();
    let d = model.state_dim();

    let h_sigma = h * sigma.matrix();
    let s = SpdMatrix::new(&h_sigma * h.transpose() + gamma.matrix())?;
    // Kᵀ = S⁻¹ H Σ, using symmetry of Σ and S.
    let k = s.solve(&h_sigma)?.transpose();

    let c_inv = SpdMatrix::new(sigma.inverse() + h.transpose() * gamma.solve(h)?)?;
    let c = c_inv.inverse_spd()?;

    let i_minus_kh = DMatrix::identity(d, d) - &k * h;
    Ok(GaussianStructures {
        sigma,
        gamma,
        c,
        s,
        k,
        i_minus_kh,
    })
}

impl GaussianStructures {
    /// `(I − KH)ψ(u) + K y`.
    pub fn propagate_mean(
        &self,
        model: &ModelSpec,
        u: &DVector<f64>,
        y: &DVector<f64>,
    ) -> DVector<f64> {
        &self.i_minus_kh * model.psi(u) + &self.k * y
    }

    /// Log of `Z_Γ Z_Σ / (Z_S Z_C)`; zero by the matrix determinant lemma, so the
    /// two kernel forms agree exactly up to rounding.
    pub fn log_normalizer_offset(&self) -> f64 {
        0.5 * (self.gamma.log_det() + self.sigma.log_det() - self.s.log_det() - self.c.log_det())
    }
}

fn check_step_dims(model: &ModelSpec, u: &DVector<f64>, y: &DVector<f64>) -> Result<()> {
    model.check_state(u, "state")?;
    model.check_obs(y, "observation")
}

/// One cycled-3DVAR update `m ↦ (I − KH)ψ(m) + K y`.
pub fn threedvar_step(
    g: &GaussianStructures,
    model: &ModelSpec,
    m: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_step_dims(model, m, y)?;
    Ok(g.propagate_mean(model, m, y))
}

/// Mean of `P(u_{k+1} | u_k, y_{k+1})`, in Kalman-gain form.
pub fn optimal_proposal_mean(
    g: &GaussianStructures,
    model: &ModelSpec,
    u: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_step_dims(model, u, y)?;
    Ok(g.propagate_mean(model, u, y))
}

/// Same mean in information form, `C(Σ⁻¹ψ(u) + HᵀΓ⁻¹y)`.
pub fn optimal_proposal_mean_information_form(
    g: &GaussianStructures,
    model: &ModelSpec,
    u: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_step_dims(model, u, y)?;
    let psi = DMatrix::from_column_slice(u.len(), 1, model.psi(u).as_slice());
    let ym = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
    let info = g.sigma.solve(&psi)? + model.h().transpose() * g.gamma.solve(&ym)?;
    Ok((g.c.matrix() * info).column(0).into_owned())
}

/// Gaussian posterior `N(mean, cov)`.
#[derive(Debug, Clone)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: SpdMatrix,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: SpdMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::dim("GaussianBelief", cov.dim(), mean.len()));
        }
        Ok(Self { mean, cov })
    }
}

/// Exact filtering step for `ψ(u) = A u`: predict, then Joseph-form update.
pub fn kalman_oracle_step(
    model: &ModelSpec,
    belief: &GaussianBelief,
    y: &DVector<f64>,
) -> Result<GaussianBelief> {
    let a = model.map().linear_matrix().ok_or(Error::NonLinearOracle)?;
    check_step_dims(model, &belief.mean, y)?;
    let h = model.h();
    let sigma = model.sigma_cov()?;
    let gamma = model.gamma_cov()?;

    let mean_pred = a * &belief.mean;
    let cov_pred = a * belief.cov.matrix() * a.transpose() + sigma.matrix();
    let cov_pred = (&cov_pred + cov_pred.transpose()) * 0.5;

    let innov_cov = SpdMatrix::new(h * &cov_pred * h.transpose() + gamma.matrix())?;
    // gainᵀ = S⁻¹ H P⁻
    let gain = innov_cov.solve(&(h * &cov_pred))?.transpose();
    let mean = &mean_pred + &gain * (y - h * &mean_pred);
    let d = model.state_dim();
    let ikh = DMatrix::identity(d, d) - &gain * h;
    let cov = &ikh * &cov_pred * ikh.transpose() + &gain * gamma.matrix() * gain.transpose();
    GaussianBelief::new(mean, SpdMatrix::new((&cov + cov.transpose()) * 0.5)?)
}

/// The transition kernel's two unnormalized log forms:
///
/// ```text
/// form1 = −½|y − H u'|²_Γ − ½|u' − ψ(u)|²_Σ
/// form2 = −½|y − Hψ(u)|²_S − ½|u' − m|²_C,  m = (I − KH)ψ(u) + K y
/// ```
pub fn transition_logdensity_two_forms(
    g: &GaussianStructures,
    model: &ModelSpec,
    u_k: &DVector<f64>,
    u_next: &DVector<f64>,
    y_next: &DVector<f64>,
) -> Result<(f64, f64)> {
    check_step_dims(model, u_k, y_next)?;
    model.check_state(u_next, "u_next")?;
    let psi = model.psi(u_k);
    let h = model.h();
    let form1 = -0.5 * g.gamma.weighted_norm_sq(&(y_next - h * u_next))?
        - 0.5 * g.sigma.weighted_norm_sq(&(u_next - &psi))?;
    let m = &g.i_minus_kh * &psi + &g.k * y_next;
    let form2 = -0.5 * g.s.weighted_norm_sq(&(y_next - h * &psi))?
        - 0.5 * g.c.weighted_norm_sq(&(u_next - m))?;
    Ok((form1, form2))
}
