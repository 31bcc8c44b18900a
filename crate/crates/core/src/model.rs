//! Conditionally Gaussian dynamics-observation models and twin-experiment
//! truth generation.
//!
//! The state map ψ is one of a closed set of built-in maps so that its sup
//! bound and Lipschitz constant are data the harness can check.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::SpdMatrix;
use crate::rng::{Purpose, RngStream};

/// Spectral norm (largest singular value).
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .singular_values()
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub enum BuiltinMap {
    /// `ψ(u) = A u`. Unbounded, so outside the bounded-ψ assumption; used
    /// only where an exact Kalman oracle is needed.
    Linear { a: DMatrix<f64>, op_norm: f64 },
    /// `ψ(u) = amplitude · sin(B u)` elementwise.
    BoundedSine {
        amplitude: f64,
        mixing: DMatrix<f64>,
    },
    /// `ψ(u) = clamp(A u, -clip, clip)` componentwise.
    ClippedLinear { a: DMatrix<f64>, clip: f64 },
}

impl BuiltinMap {
    pub fn linear(a: DMatrix<f64>) -> Result<Self> {
        check_square(&a, "linear map")?;
        let op_norm = operator_norm(&a);
        Ok(BuiltinMap::Linear { a, op_norm })
    }

    /// Linear map with a declared operator norm, checked against the SVD.
    pub fn linear_declared(a: DMatrix<f64>, declared_norm: f64) -> Result<Self> {
        let map = Self::linear(a)?;
        if let BuiltinMap::Linear { op_norm, .. } = &map {
            if (op_norm - declared_norm).abs() > 1e-8 * op_norm.max(1.0) {
                return Err(Error::InvalidArgument(format!(
                    "declared operator norm {declared_norm} differs from computed {op_norm}"
                )));
            }
        }
        Ok(map)
    }

    pub fn bounded_sine(amplitude: f64, mixing: DMatrix<f64>) -> Result<Self> {
        check_square(&mixing, "bounded_sine mixing")?;
        if !amplitude.is_finite() {
            return Err(Error::InvalidArgument(
                "sine amplitude must be finite".into(),
            ));
        }
        Ok(BuiltinMap::BoundedSine { amplitude, mixing })
    }

    pub fn clipped_linear(a: DMatrix<f64>, clip: f64) -> Result<Self> {
        check_square(&a, "clipped_linear map")?;
        if !(clip > 0.0 && clip.is_finite()) {
            return Err(Error::InvalidArgument(
                "clip must be positive and finite".into(),
            ));
        }
        Ok(BuiltinMap::ClippedLinear { a, clip })
    }

    pub fn dim(&self) -> usize {
        match self {
            BuiltinMap::Linear { a, .. } | BuiltinMap::ClippedLinear { a, .. } => a.nrows(),
            BuiltinMap::BoundedSine { mixing, .. } => mixing.nrows(),
        }
    }

    pub fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        match self {
            BuiltinMap::Linear { a, .. } => a * u,
            BuiltinMap::BoundedSine { amplitude, mixing } => {
                (mixing * u).map(|v| amplitude * v.sin())
            }
            BuiltinMap::ClippedLinear { a, clip } => (a * u).map(|v| v.clamp(-clip, *clip)),
        }
    }

    /// Declared `sup_u |ψ(u)|`, `None` for the unbounded linear map.
    pub fn psi_bound(&self) -> Option<f64> {
        let root_d = (self.dim() as f64).sqrt();
        match self {
            BuiltinMap::Linear { .. } => None,
            BuiltinMap::BoundedSine { amplitude, .. } => Some(amplitude.abs() * root_d),
            BuiltinMap::ClippedLinear { clip, .. } => Some(clip * root_d),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, BuiltinMap::Linear { .. })
    }

    pub fn linear_matrix(&self) -> Option<&DMatrix<f64>> {
        match self {
            BuiltinMap::Linear { a, .. } => Some(a),
            _ => None,
        }
    }

    /// Global Lipschitz constant of ψ in the Euclidean norm.
    pub fn lipschitz(&self) -> f64 {
        match self {
            BuiltinMap::Linear { op_norm, .. } => *op_norm,
            BuiltinMap::BoundedSine { amplitude, mixing } => {
                amplitude.abs() * operator_norm(mixing)
            }
            BuiltinMap::ClippedLinear { a, .. } => operator_norm(a),
        }
    }

    /// Upper bound on the Lipschitz constant of `u ↦ M ψ(u)`.
    ///
    /// Exact for the linear map. For the other maps the elementwise
    /// nonlinearity sits between `M` and the inner matrix, so the bound is
    /// `‖M‖ · Lip(ψ)`.
    pub fn contraction_certificate(&self, m: &DMatrix<f64>) -> f64 {
        match self {
            BuiltinMap::Linear { a, .. } => operator_norm(&(m * a)),
            _ => operator_norm(m) * self.lipschitz(),
        }
    }
}

fn check_square(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::dim(what, m.nrows(), m.ncols()));
    }
    Ok(())
}

/// `u_{k+1} = ψ(u_k) + ξ_k`, `y_{k+1} = H u_{k+1} + η_{k+1}` with
/// `ξ ~ N(0, σ²Σ₀)` and `η ~ N(0, γ²Γ₀)`.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    map: BuiltinMap,
    h: DMatrix<f64>,
    sigma0: SpdMatrix,
    gamma0: SpdMatrix,
    sigma: f64,
    gamma: f64,
}

impl ModelSpec {
    /// `sigma == 0` is accepted so that noise-free truths can be generated;
    /// any filter built on such a model fails at [`ModelSpec::sigma_cov`].
    pub fn new(
        map: BuiltinMap,
        h: DMatrix<f64>,
        sigma0: SpdMatrix,
        gamma0: SpdMatrix,
        sigma: f64,
        gamma: f64,
    ) -> Result<Self> {
        let d = map.dim();
        if h.ncols() != d {
            return Err(Error::dim("H columns", d, h.ncols()));
        }
        if h.nrows() == 0 {
            return Err(Error::InvalidArgument(
                "H must have at least one row".into(),
            ));
        }
        if sigma0.dim() != d {
            return Err(Error::dim("Sigma0", d, sigma0.dim()));
        }
        if gamma0.dim() != h.nrows() {
            return Err(Error::dim("Gamma0", h.nrows(), gamma0.dim()));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma must be >= 0, got {sigma}"
            )));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gamma must be > 0, got {gamma}"
            )));
        }
        Ok(Self {
            map,
            h,
            sigma0,
            gamma0,
            sigma,
            gamma,
        })
    }

    /// Parameterized by `r = σ/γ` and `γ`.
    pub fn with_ratio(
        map: BuiltinMap,
        h: DMatrix<f64>,
        sigma0: SpdMatrix,
        gamma0: SpdMatrix,
        r: f64,
        gamma: f64,
    ) -> Result<Self> {
        Self::new(map, h, sigma0, gamma0, r * gamma, gamma)
    }

    /// Same model at a new `γ` with `r` held fixed.
    pub fn rescaled_gamma(&self, gamma: f64) -> Result<Self> {
        Self::with_ratio(
            self.map.clone(),
            self.h.clone(),
            self.sigma0.clone(),
            self.gamma0.clone(),
            self.r(),
            gamma,
        )
    }

    /// Same model with a new `r` at fixed `γ`.
    pub fn with_r(&self, r: f64) -> Result<Self> {
        Self::with_ratio(
            self.map.clone(),
            self.h.clone(),
            self.sigma0.clone(),
            self.gamma0.clone(),
            r,
            self.gamma,
        )
    }

    pub fn with_h(&self, h: DMatrix<f64>) -> Result<Self> {
        Self::new(
            self.map.clone(),
            h,
            self.sigma0.clone(),
            self.gamma0.clone(),
            self.sigma,
            self.gamma,
        )
    }

    pub fn state_dim(&self) -> usize {
        self.map.dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn map(&self) -> &BuiltinMap {
        &self.map
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn sigma0(&self) -> &SpdMatrix {
        &self.sigma0
    }

    pub fn gamma0(&self) -> &SpdMatrix {
        &self.gamma0
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn r(&self) -> f64 {
        self.sigma / self.gamma
    }

    pub fn psi(&self, u: &DVector<f64>) -> DVector<f64> {
        self.map.apply(u)
    }

    /// `Σ = σ²Σ₀`.
    pub fn sigma_cov(&self) -> Result<SpdMatrix> {
        if self.sigma == 0.0 {
            return Err(Error::InvalidArgument(
                "sigma = 0 gives a singular state-noise covariance; filters need sigma > 0".into(),
            ));
        }
        self.sigma0.scaled(self.sigma * self.sigma)
    }

    /// `Γ = γ²Γ₀`.
    pub fn gamma_cov(&self) -> Result<SpdMatrix> {
        self.gamma0.scaled(self.gamma * self.gamma)
    }

    pub(crate) fn check_state(&self, u: &DVector<f64>, context: &'static str) -> Result<()> {
        if u.len() != self.state_dim() {
            return Err(Error::dim(context, self.state_dim(), u.len()));
        }
        Ok(())
    }

    pub(crate) fn check_obs(&self, y: &DVector<f64>, context: &'static str) -> Result<()> {
        if y.len() != self.obs_dim() {
            return Err(Error::dim(context, self.obs_dim(), y.len()));
        }
        Ok(())
    }
}

/// Fixed true signal and its data.
#[derive(Debug, Clone)]
pub struct TruthRun {
    /// `u†_0 .. u†_K`.
    pub u_dagger: Vec<DVector<f64>>,
    /// `y†_1 .. y†_K`; `y_dagger[k]` is the observation of `u_dagger[k + 1]`.
    pub y_dagger: Vec<DVector<f64>>,
    pub sigma_star: SpdMatrix,
    pub gamma_star: SpdMatrix,
    pub seed: Option<u64>,
}

impl TruthRun {
    pub fn steps(&self) -> usize {
        self.y_dagger.len()
    }

    /// Generates a truth from a seed-derived stream and records the seed.
    pub fn generate(
        model: &ModelSpec,
        steps: usize,
        u0: &DVector<f64>,
        sigma_star: &SpdMatrix,
        gamma_star: &SpdMatrix,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = RngStream::for_purpose(seed, Purpose::Truth, &[]);
        let mut run = simulate_truth(model, steps, u0, sigma_star, gamma_star, &mut rng)?;
        run.seed = Some(seed);
        Ok(run)
    }
}

/// `u†_{k+1} = ψ(u†_k) + rγ ξ†_k`, `y†_{k+1} = H u†_{k+1} + γ η†_{k+1}`
/// with `ξ† ~ N(0, Σ*)`, `η† ~ N(0, Γ*)`. Each step draws ξ then η.
pub fn simulate_truth(
    model: &ModelSpec,
    steps: usize,
    u0: &DVector<f64>,
    sigma_star: &SpdMatrix,
    gamma_star: &SpdMatrix,
    rng: &mut RngStream,
) -> Result<TruthRun> {
    if steps == 0 {
        return Err(Error::InvalidArgument(
            "truth needs at least one step".into(),
        ));
    }
    model.check_state(u0, "simulate_truth u0")?;
    if sigma_star.dim() != model.state_dim() {
        return Err(Error::dim(
            "Sigma_star",
            model.state_dim(),
            sigma_star.dim(),
        ));
    }
    if gamma_star.dim() != model.obs_dim() {
        return Err(Error::dim("Gamma_star", model.obs_dim(), gamma_star.dim()));
    }
    let signal_scale = model.r() * model.gamma();
    let mut u_dagger = Vec::with_capacity(steps + 1);
    let mut y_dagger = Vec::with_capacity(steps);
    u_dagger.push(u0.clone());
    for k in 0..steps {
        let xi = sigma_star.color(&rng.standard_normal_vector(model.state_dim()));
        let eta = gamma_star.color(&rng.standard_normal_vector(model.obs_dim()));
        let next = model.psi(&u_dagger[k]) + xi * signal_scale;
        let y = model.h() * &next + eta * model.gamma();
        u_dagger.push(next);
        y_dagger.push(y);
    }
    Ok(TruthRun {
        u_dagger,
        y_dagger,
        sigma_star: sigma_star.clone(),
        gamma_star: gamma_star.clone(),
        seed: None,
    })
}

/// `H u + η`, `η ~ N(0, γ²Γ₀)`.
pub fn observe(model: &ModelSpec, u: &DVector<f64>, rng: &mut RngStream) -> Result<DVector<f64>> {
    model.check_state(u, "observe")?;
    let eta = model
        .gamma0()
        .color(&rng.standard_normal_vector(model.obs_dim()));
    Ok(model.h() * u + eta * model.gamma())
}
