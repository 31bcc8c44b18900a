//! Suite configuration, read from TOML. Every section is optional and its
//! defaults are the full-size experiment parameters; matrices are row-major
//! lists of rows.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::filters::{InitialDistribution, Variant};
use crate::gaussian::{matrix_from_rows, GaussianDist, SpdMatrix};
use crate::model::{BuiltinMap, ModelSpec};
use crate::rng::RngStream;

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub master_seed: u64,
    pub identities: IdentitiesConfig,
    pub consistency: ConsistencyConfig,
    pub accuracy: AccuracyConfig,
    pub ergodicity: ErgodicityConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            master_seed: 20_240_601,
            identities: IdentitiesConfig::default(),
            consistency: ConsistencyConfig::default(),
            accuracy: AccuracyConfig::default(),
            ergodicity: ErgodicityConfig::default(),
        }
    }
}

impl SuiteConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SuiteConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Checks every section: sweep lists nonempty, models buildable,
    /// variants known.
    pub fn validate(&self) -> Result<()> {
        self.identities.validate()?;
        self.consistency.validate()?;
        self.accuracy.validate()?;
        self.ergodicity.validate()
    }

    /// SHA-256 of the canonical JSON form of the resolved configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

fn nonempty<T>(list: &[T], what: &str) -> Result<()> {
    if list.is_empty() {
        Err(Error::Config(format!("{what} must be nonempty")))
    } else {
        Ok(())
    }
}

/// A slope needs at least two distinct abscissae.
fn sweep<T: PartialEq>(list: &[T], what: &str) -> Result<()> {
    let distinct = list
        .iter()
        .enumerate()
        .filter(|(i, x)| !list[..*i].contains(x))
        .count();
    if distinct < 2 {
        Err(Error::Config(format!(
            "{what} needs at least two distinct values"
        )))
    } else {
        Ok(())
    }
}

fn ordered(lo: f64, hi: f64, what: &str) -> Result<()> {
    if lo <= hi {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{what}: lower bound {lo} exceeds upper bound {hi}"
        )))
    }
}

fn spd(rows: &Rows, what: &str) -> Result<SpdMatrix> {
    SpdMatrix::from_rows(rows).map_err(|e| Error::Config(format!("{what}: {e}")))
}

fn matrix(rows: &Rows, what: &str) -> Result<DMatrix<f64>> {
    matrix_from_rows(rows).map_err(|e| Error::Config(format!("{what}: {e}")))
}

fn identity_rows(d: usize) -> Rows {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

pub fn parse_variants(names: &[String]) -> Result<Vec<Variant>> {
    nonempty(names, "variants")?;
    names
        .iter()
        .map(|n| Variant::parse(n).ok_or_else(|| Error::Config(format!("unknown variant `{n}`"))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MapConfig {
    Linear { a: Rows },
    BoundedSine { amplitude: f64, mixing: Rows },
    ClippedLinear { a: Rows, clip: f64 },
}

impl MapConfig {
    pub fn build(&self) -> Result<BuiltinMap> {
        let built = match self {
            MapConfig::Linear { a } => BuiltinMap::linear(matrix(a, "map.a")?),
            MapConfig::BoundedSine { amplitude, mixing } => {
                BuiltinMap::bounded_sine(*amplitude, matrix(mixing, "map.mixing")?)
            }
            MapConfig::ClippedLinear { a, clip } => {
                BuiltinMap::clipped_linear(matrix(a, "map.a")?, *clip)
            }
        };
        built.map_err(|e| Error::Config(format!("map: {e}")))
    }
}

/// Model block. Give `gamma` with either `r` or `sigma`; if both are given
/// they must satisfy `sigma = r * gamma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub map: MapConfig,
    pub h: Rows,
    pub sigma0: Rows,
    pub gamma0: Rows,
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

impl ModelConfig {
    /// `ψ(u) = 0.9 u`, `H = Σ₀ = Γ₀ = 1`, `σ = γ = 1`.
    pub fn scalar_linear() -> Self {
        Self {
            map: MapConfig::Linear { a: vec![vec![0.9]] },
            h: vec![vec![1.0]],
            sigma0: vec![vec![1.0]],
            gamma0: vec![vec![1.0]],
            gamma: 1.0,
            r: Some(1.0),
            sigma: None,
        }
    }

    /// `ψ(u) = a sin(B u)` with `H = Σ₀ = Γ₀ = I` in dimension `d`.
    pub fn bounded_sine(d: usize, amplitude: f64, mixing: Rows, r: f64, gamma: f64) -> Self {
        Self {
            map: MapConfig::BoundedSine { amplitude, mixing },
            h: identity_rows(d),
            sigma0: identity_rows(d),
            gamma0: identity_rows(d),
            gamma,
            r: Some(r),
            sigma: None,
        }
    }

    pub fn ratio(&self) -> Result<f64> {
        match (self.r, self.sigma) {
            (Some(r), None) => Ok(r),
            (None, Some(s)) => Ok(s / self.gamma),
            (Some(r), Some(s)) => {
                if (s - r * self.gamma).abs() <= 1e-12 * s.abs().max(1.0) {
                    Ok(r)
                } else {
                    Err(Error::Config(format!(
                        "sigma = {s} is inconsistent with r * gamma = {}",
                        r * self.gamma
                    )))
                }
            }
            (None, None) => Err(Error::Config("model needs `r` or `sigma`".into())),
        }
    }

    pub fn build(&self) -> Result<ModelSpec> {
        let r = self.ratio()?;
        ModelSpec::with_ratio(
            self.map.build()?,
            matrix(&self.h, "h")?,
            spd(&self.sigma0, "sigma0")?,
            spd(&self.gamma0, "gamma0")?,
            r,
            self.gamma,
        )
        .map_err(|e| Error::Config(format!("model: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitConfig {
    Gaussian { mean: Vec<f64>, cov: Rows },
    Dirac { point: Vec<f64> },
}

impl InitConfig {
    pub fn standard(d: usize) -> Self {
        InitConfig::Gaussian {
            mean: vec![0.0; d],
            cov: identity_rows(d),
        }
    }

    pub fn build(&self) -> Result<InitialDistribution> {
        Ok(match self {
            InitConfig::Gaussian { mean, cov } => InitialDistribution::Gaussian(
                GaussianDist::new(DVector::from_column_slice(mean), spd(cov, "init.cov")?)
                    .map_err(|e| Error::Config(format!("init: {e}")))?,
            ),
            InitConfig::Dirac { point } => {
                InitialDistribution::Dirac(DVector::from_column_slice(point))
            }
        })
    }
}

/// Truth block. `sigma_star`/`gamma_star` default to `Σ₀`/`Γ₀`; `seeds` are
/// indices combined with the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthConfig {
    pub u0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_star: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_star: Option<Rows>,
    pub steps: usize,
    pub seeds: Vec<u64>,
}

impl TruthConfig {
    pub fn new(d: usize, steps: usize, seeds: Vec<u64>) -> Self {
        Self {
            u0: vec![0.0; d],
            sigma_star: None,
            gamma_star: None,
            steps,
            seeds,
        }
    }

    pub fn covariances(&self, model: &ModelSpec) -> Result<(SpdMatrix, SpdMatrix)> {
        let s = match &self.sigma_star {
            Some(rows) => spd(rows, "truth.sigma_star")?,
            None => model.sigma0().clone(),
        };
        let g = match &self.gamma_star {
            Some(rows) => spd(rows, "truth.gamma_star")?,
            None => model.gamma0().clone(),
        };
        Ok((s, g))
    }

    fn validate(&self, model: &ModelSpec, what: &str) -> Result<()> {
        nonempty(&self.seeds, &format!("{what}.truth.seeds"))?;
        if self.steps == 0 {
            return Err(Error::Config(format!(
                "{what}.truth.steps must be positive"
            )));
        }
        if self.u0.len() != model.state_dim() {
            return Err(Error::Config(format!(
                "{what}.truth.u0 has length {}, model dimension is {}",
                self.u0.len(),
                model.state_dim()
            )));
        }
        let (s, g) = self.covariances(model)?;
        if s.dim() != model.state_dim() || g.dim() != model.obs_dim() {
            return Err(Error::Config(format!(
                "{what}.truth covariance dimensions do not match the model"
            )));
        }
        Ok(())
    }
}

fn check_init(init: &InitConfig, model: &ModelSpec, what: &str) -> Result<()> {
    let d = init.build()?.dim();
    if d != model.state_dim() {
        return Err(Error::Config(format!(
            "{what}.init has dimension {d}, model dimension is {}",
            model.state_dim()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentitiesConfig {
    /// Both state and observation dimensions range over this list.
    pub dims: Vec<usize>,
    pub models_per_pair: usize,
    pub gain_tolerance: f64,
    pub kernel_models: usize,
    pub kernel_triples: usize,
    pub kernel_tolerance: f64,
    pub scaling_gammas: Vec<f64>,
    pub scaling_ratio: f64,
    pub gain_scaling_tolerance: f64,
    pub cov_scaling_tolerance: f64,
    pub gopf_seeds: usize,
    pub gopf_steps: usize,
    pub gopf_particles: usize,
    pub sir_steps: usize,
    pub sir_particles: usize,
    pub sir_tolerance: f64,
    pub sampling_particles: Vec<usize>,
    pub sampling_replicates: usize,
    pub sampling_slack: f64,
}

impl Default for IdentitiesConfig {
    fn default() -> Self {
        Self {
            dims: vec![1, 2, 5, 10],
            models_per_pair: 200,
            gain_tolerance: 1e-9,
            kernel_models: 20,
            kernel_triples: 100,
            kernel_tolerance: 1e-8,
            scaling_gammas: vec![1.0, 0.01],
            scaling_ratio: 0.5,
            gain_scaling_tolerance: 1e-10,
            cov_scaling_tolerance: 1e-9,
            gopf_seeds: 20,
            gopf_steps: 100,
            gopf_particles: 64,
            sir_steps: 50,
            sir_particles: 64,
            sir_tolerance: 1e-9,
            sampling_particles: vec![100, 10_000],
            sampling_replicates: 1000,
            sampling_slack: 1.1,
        }
    }
}

impl IdentitiesConfig {
    fn validate(&self) -> Result<()> {
        nonempty(&self.dims, "identities.dims")?;
        if self.dims.contains(&0) {
            return Err(Error::Config("identities.dims must be positive".into()));
        }
        nonempty(&self.scaling_gammas, "identities.scaling_gammas")?;
        nonempty(&self.sampling_particles, "identities.sampling_particles")?;
        if self.sampling_replicates < crate::metrics::MIN_REPLICATES {
            return Err(Error::Config(format!(
                "identities.sampling_replicates must be at least {}",
                crate::metrics::MIN_REPLICATES
            )));
        }
        if self.gopf_particles == 0
            || self.sir_particles == 0
            || self.sampling_particles.contains(&0)
        {
            return Err(Error::Config("particle counts must be positive".into()));
        }
        if self.scaling_gammas.iter().any(|g| !(*g > 0.0)) || !(self.scaling_ratio > 0.0) {
            return Err(Error::Config(
                "identities scaling gammas and ratio must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// Exact Kalman recursion; linear maps only.
    Kalman,
    /// Bootstrap filter at `reference_factor` times the largest sweep size.
    BpfSelf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencyConfig {
    pub model: ModelConfig,
    pub truth: TruthConfig,
    pub init: InitConfig,
    pub variants: Vec<String>,
    pub particles: Vec<usize>,
    pub replicates: usize,
    pub reference: ReferenceMode,
    pub reference_factor: usize,
    /// Sample size for the reference measure's dictionary expectations when
    /// they cannot be computed by quadrature.
    pub reference_samples: usize,
    pub slope_min: f64,
    pub slope_max: f64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::scalar_linear(),
            truth: TruthConfig::new(1, 10, vec![0]),
            init: InitConfig::standard(1),
            variants: vec!["bpf".into(), "opf".into(), "gopf".into()],
            particles: vec![100, 1000, 10_000],
            replicates: 50,
            reference: ReferenceMode::Kalman,
            reference_factor: 100,
            reference_samples: 100_000,
            slope_min: -0.65,
            slope_max: -0.35,
        }
    }
}

impl ConsistencyConfig {
    fn validate(&self) -> Result<()> {
        let model = self.model.build()?;
        self.truth.validate(&model, "consistency")?;
        check_init(&self.init, &model, "consistency")?;
        parse_variants(&self.variants)?;
        sweep(&self.particles, "consistency.particles")?;
        if self.particles.contains(&0) {
            return Err(Error::Config(
                "consistency.particles must be positive".into(),
            ));
        }
        if self.replicates < crate::metrics::MIN_REPLICATES {
            return Err(Error::Config(format!(
                "consistency.replicates must be at least {}",
                crate::metrics::MIN_REPLICATES
            )));
        }
        if self.reference == ReferenceMode::Kalman && !model.map().is_linear() {
            return Err(Error::Config(
                "the Kalman reference requires a linear map; for bounded maps set \
                 reference = \"bpf_self\" to use a high-N bootstrap reference"
                    .into(),
            ));
        }
        if self.reference == ReferenceMode::Kalman
            && !matches!(self.init, InitConfig::Gaussian { .. })
        {
            return Err(Error::Config(
                "the Kalman reference requires a Gaussian init".into(),
            ));
        }
        ordered(self.slope_min, self.slope_max, "consistency slope bounds")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AccuracyConfig {
    /// `r` is held fixed while `gamma` sweeps over `gammas`.
    pub model: ModelConfig,
    pub truth: TruthConfig,
    pub init: InitConfig,
    pub variants: Vec<String>,
    pub particles: usize,
    pub gammas: Vec<f64>,
    pub filter_seeds: Vec<u64>,
    /// Errors are time-averaged over steps after this fraction of the run.
    pub burn_in_fraction: f64,
    pub slope_min: f64,
    pub slope_max: f64,
}

impl Default for AccuracyConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::bounded_sine(
                2,
                1.0,
                vec![vec![0.6, 0.8], vec![-0.8, 0.6]],
                0.5,
                0.1,
            ),
            truth: TruthConfig::new(2, 200, (0..20).collect()),
            init: InitConfig::standard(2),
            variants: vec!["opf".into(), "gopf".into(), "threedvar".into()],
            particles: 32,
            gammas: vec![0.1, 0.03, 0.01],
            filter_seeds: (0..5).collect(),
            burn_in_fraction: 0.5,
            slope_min: 0.8,
            slope_max: 1.2,
        }
    }
}

impl AccuracyConfig {
    fn validate(&self) -> Result<()> {
        let model = self.model.build()?;
        self.model.ratio()?;
        self.truth.validate(&model, "accuracy")?;
        check_init(&self.init, &model, "accuracy")?;
        parse_variants(&self.variants)?;
        sweep(&self.gammas, "accuracy.gammas")?;
        nonempty(&self.filter_seeds, "accuracy.filter_seeds")?;
        if self.gammas.iter().any(|g| !(*g > 0.0)) {
            return Err(Error::Config("accuracy.gammas must be positive".into()));
        }
        if self.particles == 0 {
            return Err(Error::Config("accuracy.particles must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(Error::Config(
                "accuracy.burn_in_fraction must lie in [0, 1)".into(),
            ));
        }
        ordered(self.slope_min, self.slope_max, "accuracy slope bounds")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErgodicityConfig {
    pub model: ModelConfig,
    /// One replicate pair per truth seed.
    pub truth: TruthConfig,
    pub z0: Vec<f64>,
    pub z0_prime: Vec<f64>,
    pub variants: Vec<String>,
    pub particles: usize,
    pub rate_max: f64,
    pub r_squared_min: f64,
    /// First step of the window in which `estimate_d` must decrease.
    pub monotone_from: usize,
    pub monotone_fraction: f64,
}

impl Default for ErgodicityConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::bounded_sine(2, 0.6, identity_rows(2), 0.02, 1.0),
            truth: TruthConfig::new(2, 50, (0..50).collect()),
            z0: vec![0.0, 0.0],
            z0_prime: vec![3.0, 4.0],
            variants: vec!["threedvar".into(), "opf".into(), "gopf".into()],
            particles: 16,
            rate_max: 1.0,
            r_squared_min: 0.9,
            monotone_from: 5,
            monotone_fraction: 0.9,
        }
    }
}

impl ErgodicityConfig {
    fn validate(&self) -> Result<()> {
        let model = self.model.build()?;
        self.truth.validate(&model, "ergodicity")?;
        parse_variants(&self.variants)?;
        let d = model.state_dim();
        if self.z0.len() != d || self.z0_prime.len() != d {
            return Err(Error::Config(format!(
                "ergodicity.z0 and z0_prime must have length {d}"
            )));
        }
        if self.particles == 0 {
            return Err(Error::Config(
                "ergodicity.particles must be positive".into(),
            ));
        }
        if self.truth.seeds.len() < crate::metrics::MIN_REPLICATES {
            return Err(Error::Config(format!(
                "ergodicity needs at least {} replicate pairs (truth.seeds)",
                crate::metrics::MIN_REPLICATES
            )));
        }
        if self.monotone_from + 2 > self.truth.steps {
            return Err(Error::Config(
                "ergodicity.monotone_from leaves no window".into(),
            ));
        }
        Ok(())
    }
}

/// Stream seed for a config-level seed index, keyed by the master seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    RngStream::derive(master, path).next_u64()
}
