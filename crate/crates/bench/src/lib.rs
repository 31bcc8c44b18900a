//! Shared fixtures for the benchmarks.

use assimilate::{
    compute_structures, BuiltinMap, DMatrix, DVector, Ensemble, GaussianStructures, ModelSpec,
    RngStream, SpdMatrix, StepDraws,
};

/// One filter step's inputs: `ψ(u) = sin(u)`, `H = Σ₀ = Γ₀ = I`,
/// `r = 0.5`, `γ = 0.1`.
pub struct StepFixture {
    pub model: ModelSpec,
    pub g: GaussianStructures,
    pub ensemble: Ensemble,
    pub y: DVector<f64>,
    pub draws: StepDraws,
    pub seed: u64,
}

impl StepFixture {
    pub fn new(dim: usize, particles: usize) -> Self {
        let eye = DMatrix::identity(dim, dim);
        let map = BuiltinMap::bounded_sine(1.0, eye.clone()).expect("valid map");
        let spd = SpdMatrix::new(eye.clone()).expect("identity is SPD");
        let model =
            ModelSpec::with_ratio(map, eye, spd.clone(), spd, 0.5, 0.1).expect("valid model");
        let g = compute_structures(&model).expect("structures");
        let seed = 0xbe9c;
        let mut rng = RngStream::derive(seed, &[dim as u64, particles as u64]);
        let cloud = (0..particles)
            .map(|_| rng.standard_normal_vector(dim))
            .collect();
        let ensemble = Ensemble::equal_weight(cloud, 0).expect("nonempty");
        let y = DVector::from_element(dim, 0.3);
        let draws = StepDraws::generate(seed, 1, particles, dim);
        Self {
            model,
            g,
            ensemble,
            y,
            draws,
            seed,
        }
    }
}
