use nalgebra::DVector;

use super::{Ensemble, StepDraws, WeightedEnsemble};
use crate::error::{Error, Result};
use crate::gain::GaussianStructures;
use crate::model::ModelSpec;
use crate::resampling::{
    apply_indices, normalize_log, resample_indices, ResampleIndexMap, WeightVector,
};
use crate::rng::{Purpose, RngStream};

fn check_inputs(model: &ModelSpec, ens: &Ensemble, y_next: &DVector<f64>) -> Result<()> {
    ens.require_equal_weight()?;
    if ens.dim() != model.state_dim() {
        return Err(Error::dim(
            "ensemble dimension",
            model.state_dim(),
            ens.dim(),
        ));
    }
    model.check_obs(y_next, "y_next")
}

/// `(I − KH)ψ + K y + L_C z`, with `K y` precomputed. Shared by every
/// optimal-proposal update so equal inputs give bit-equal outputs.
#[inline]
fn optimal_particle(
    g: &GaussianStructures,
    psi_u: &DVector<f64>,
    ky: &DVector<f64>,
    z: &DVector<f64>,
) -> DVector<f64> {
    &g.i_minus_kh * psi_u + ky + g.c.color(z)
}

/// `log w* = −½|y − Hψ(u)|²_S` for each particle.
fn predictive_log_weights(
    model: &ModelSpec,
    g: &GaussianStructures,
    psi: &[DVector<f64>],
    y_next: &DVector<f64>,
) -> Result<Vec<f64>> {
    psi.iter()
        .map(|p| Ok(-0.5 * g.s.weighted_norm_sq(&(y_next - model.h() * p))?))
        .collect()
}

fn resample_step(
    k: usize,
    log_w: &[f64],
    uniforms: &[f64],
) -> Result<(WeightVector, ResampleIndexMap)> {
    let w = normalize_log(log_w).map_err(|e| e.at_step(k))?;
    let map = resample_indices(&w, uniforms).map_err(|e| e.at_step(k))?;
    Ok((w, map))
}

/// Bootstrap filter: propagate through the dynamics, weight by the
/// likelihood of the propagated particles, resample.
pub fn bpf_step(
    model: &ModelSpec,
    g: &GaussianStructures,
    ens: &Ensemble,
    y_next: &DVector<f64>,
    draws: &StepDraws,
) -> Result<(Ensemble, WeightedEnsemble)> {
    check_inputs(model, ens, y_next)?;
    draws.check(ens.len(), ens.dim())?;
    let k = ens.step + 1;
    let proposed: Vec<DVector<f64>> = ens
        .particles
        .iter()
        .zip(&draws.gaussians)
        .map(|(u, z)| model.psi(u) + g.sigma.color(z))
        .collect();
    let log_w = proposed
        .iter()
        .map(|u| Ok(-0.5 * g.gamma.weighted_norm_sq(&(y_next - model.h() * u))?))
        .collect::<Result<Vec<f64>>>()?;
    let (w, map) = resample_step(k, &log_w, &draws.uniforms)?;
    let particles = apply_indices(&proposed, &map)?;
    Ok((
        Ensemble::equal_weight(particles, k)?,
        WeightedEnsemble {
            particles: proposed,
            weights: w,
        },
    ))
}

/// Optimal proposal filter, propagate-weight-resample. The weights use the
/// pre-proposal particles only.
pub fn opf_step(
    model: &ModelSpec,
    g: &GaussianStructures,
    ens: &Ensemble,
    y_next: &DVector<f64>,
    draws: &StepDraws,
) -> Result<(Ensemble, WeightedEnsemble)> {
    check_inputs(model, ens, y_next)?;
    draws.check(ens.len(), ens.dim())?;
    let k = ens.step + 1;
    let psi: Vec<DVector<f64>> = ens.particles.iter().map(|u| model.psi(u)).collect();
    let ky = &g.k * y_next;
    let proposed: Vec<DVector<f64>> = psi
        .iter()
        .zip(&draws.gaussians)
        .map(|(p, z)| optimal_particle(g, p, &ky, z))
        .collect();
    let log_w = predictive_log_weights(model, g, &psi, y_next)?;
    let (w, map) = resample_step(k, &log_w, &draws.uniforms)?;
    let particles = apply_indices(&proposed, &map)?;
    Ok((
        Ensemble::equal_weight(particles, k)?,
        WeightedEnsemble {
            particles: proposed,
            weights: w,
        },
    ))
}

/// Ancestor map of the Gaussianized filter's resampling at this step.
fn gopf_ancestors(
    model: &ModelSpec,
    g: &GaussianStructures,
    ens: &Ensemble,
    y_next: &DVector<f64>,
    uniforms: &[f64],
) -> Result<(Vec<DVector<f64>>, ResampleIndexMap)> {
    let psi: Vec<DVector<f64>> = ens.particles.iter().map(|u| model.psi(u)).collect();
    let log_w = predictive_log_weights(model, g, &psi, y_next)?;
    let (_, map) = resample_step(ens.step + 1, &log_w, uniforms)?;
    Ok((psi, map))
}

/// Gaussianized optimal filter, weight-resample-propagate.
pub fn gopf_step_form1(
    model: &ModelSpec,
    g: &GaussianStructures,
    ens: &Ensemble,
    y_next: &DVector<f64>,
    draws: &StepDraws,
) -> Result<Ensemble> {
    check_inputs(model, ens, y_next)?;
    draws.check(ens.len(), ens.dim())?;
    let (psi, map) = gopf_ancestors(model, g, ens, y_next, &draws.uniforms)?;
    // ψ commutes with resampling, so ψ(ṽ) is a relabeling of ψ(v)
    let psi_survivors = apply_indices(&psi, &map)?;
    let ky = &g.k * y_next;
    let particles = psi_survivors
        .iter()
        .zip(&draws.gaussians)
        .map(|(p, z)| optimal_particle(g, p, &ky, z))
        .collect();
    Ensemble::equal_weight(particles, ens.step + 1)
}

/// Source of the pair-indexed noise `z^{(m,n)}` of the Gaussianized filter's
/// second form.
pub trait PairNoise {
    fn z(&self, m: usize, n: usize) -> DVector<f64>;
}

/// Generates `z^{(m,n)}` on demand from a stream keyed by `(seed, k, m, n)`,
/// so only the selected pairs are ever materialized.
#[derive(Debug, Clone)]
pub struct LazyPairNoise {
    seed: u64,
    step: usize,
    dim: usize,
}

impl LazyPairNoise {
    pub fn new(seed: u64, step: usize, dim: usize) -> Self {
        Self { seed, step, dim }
    }
}

impl PairNoise for LazyPairNoise {
    fn z(&self, m: usize, n: usize) -> DVector<f64> {
        RngStream::for_purpose(
            self.seed,
            Purpose::GopfPair,
            &[self.step as u64, m as u64, n as u64],
        )
        .standard_normal_vector(self.dim)
    }
}

/// Fully materialized `N × N` pair noise, for debugging small ensembles.
#[cfg(feature = "dense-pairs")]
#[derive(Debug, Clone)]
pub struct DensePairNoise {
    rows: Vec<Vec<DVector<f64>>>,
}

#[cfg(feature = "dense-pairs")]
impl DensePairNoise {
    pub fn materialize(source: &impl PairNoise, n: usize) -> Self {
        Self {
            rows: (0..n)
                .map(|m| (0..n).map(|j| source.z(m, j)).collect())
                .collect(),
        }
    }
}

#[cfg(feature = "dense-pairs")]
impl PairNoise for DensePairNoise {
    fn z(&self, m: usize, n: usize) -> DVector<f64> {
        self.rows[m][n].clone()
    }
}

/// Second form: every ancestor `m` proposes a candidate for every slot `n`,
/// `v̂^{(m,n)} = (I − KH)ψ(v^{(m)}) + K y + ζ^{(m,n)}`, and slot `n` keeps the
/// candidate of its resampled ancestor `m*(n)`. Only the kept candidates are
/// computed.
pub fn gopf_step_form2(
    model: &ModelSpec,
    g: &GaussianStructures,
    ens: &Ensemble,
    y_next: &DVector<f64>,
    uniforms: &[f64],
    pairs: &impl PairNoise,
) -> Result<Ensemble> {
    check_inputs(model, ens, y_next)?;
    if uniforms.len() != ens.len() {
        return Err(Error::dim("step uniforms", ens.len(), uniforms.len()));
    }
    let (psi, map) = gopf_ancestors(model, g, ens, y_next, uniforms)?;
    let ky = &g.k * y_next;
    let particles = map
        .indices
        .iter()
        .enumerate()
        .map(|(n, &m)| optimal_particle(g, &psi[m], &ky, &pairs.z(m, n)))
        .collect();
    Ensemble::equal_weight(particles, ens.step + 1)
}

/// Draws for the first form arranged so that its `ζ^{(n)}` equals the second
/// form's `ζ^{(m*(n), n)}` under the same uniforms.
pub fn gopf_shared_draws(
    model: &ModelSpec,
    g: &GaussianStructures,
    ens: &Ensemble,
    y_next: &DVector<f64>,
    uniforms: &[f64],
    pairs: &impl PairNoise,
) -> Result<StepDraws> {
    check_inputs(model, ens, y_next)?;
    let (_, map) = gopf_ancestors(model, g, ens, y_next, uniforms)?;
    Ok(StepDraws {
        gaussians: map
            .indices
            .iter()
            .enumerate()
            .map(|(n, &m)| pairs.z(m, n))
            .collect(),
        uniforms: uniforms.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gain::compute_structures;
    use crate::gaussian::SpdMatrix;
    use crate::model::BuiltinMap;
    use nalgebra::DMatrix;

    fn model(d: usize, gamma: f64) -> ModelSpec {
        ModelSpec::with_ratio(
            BuiltinMap::bounded_sine(1.2, DMatrix::identity(d, d)).unwrap(),
            DMatrix::identity(d, d),
            SpdMatrix::identity(d),
            SpdMatrix::identity(d),
            0.5,
            gamma,
        )
        .unwrap()
    }

    fn ensemble(rng: &mut RngStream, n: usize, d: usize) -> Ensemble {
        Ensemble::equal_weight((0..n).map(|_| rng.standard_normal_vector(d)).collect(), 0).unwrap()
    }

    #[test]
    fn single_particle_bpf() {
        let m = model(2, 0.3);
        let g = compute_structures(&m).unwrap();
        let mut rng = RngStream::from_seed(1);
        let ens = ensemble(&mut rng, 1, 2);
        let draws = StepDraws::from_stream(&mut rng, 1, 2);
        let y = DVector::from_vec(vec![100.0, -100.0]);
        let (out, weighted) = bpf_step(&m, &g, &ens, &y, &draws).unwrap();
        assert_eq!(weighted.weights.norm, vec![1.0]);
        let expect = m.psi(&ens.particles[0]) + g.sigma.color(&draws.gaussians[0]);
        assert_eq!(out.particles[0], expect);
        assert_eq!(out.step, 1);
    }

    #[test]
    fn bpf_likelihood_peak() {
        let m = model(1, 1e-4);
        let g = compute_structures(&m).unwrap();
        let mut rng = RngStream::from_seed(2);
        let ens = ensemble(&mut rng, 8, 1);
        let draws = StepDraws::from_stream(&mut rng, 8, 1);
        let target = m.psi(&ens.particles[5]) + g.sigma.color(&draws.gaussians[5]);
        let (_, w) = bpf_step(&m, &g, &ens, &target, &draws).unwrap();
        assert!((w.weights.norm[5] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn opf_without_observation_is_forecast() {
        let m = model(2, 0.5);
        let m = ModelSpec::new(
            m.map().clone(),
            DMatrix::zeros(1, 2),
            m.sigma0().clone(),
            SpdMatrix::identity(1),
            m.sigma(),
            m.gamma(),
        )
        .unwrap();
        let g = compute_structures(&m).unwrap();
        let mut rng = RngStream::from_seed(3);
        let ens = ensemble(&mut rng, 5, 2);
        let draws = StepDraws::from_stream(&mut rng, 5, 2);
        let (_, w) = opf_step(&m, &g, &ens, &DVector::from_vec(vec![3.0]), &draws).unwrap();
        assert!(w.weights.norm.iter().all(|x| (x - 0.2).abs() < 1e-15));
        for ((u, z), p) in ens.particles.iter().zip(&draws.gaussians).zip(&w.particles) {
            let forecast = m.psi(u) + g.sigma.color(z);
            assert!((forecast - p).amax() < 1e-12);
        }
    }

    #[test]
    fn opf_small_noise_collapses_onto_data() {
        let m = model(1, 1e-6);
        let g = compute_structures(&m).unwrap();
        let mut rng = RngStream::from_seed(4);
        let ens = ensemble(&mut rng, 50, 1);
        let draws = StepDraws::from_stream(&mut rng, 50, 1);
        let y = DVector::from_vec(vec![0.3]);
        let (out, _) = opf_step(&m, &g, &ens, &y, &draws).unwrap();
        // K = r²/(1 + r²) here, so the collapse is onto (I − KH)ψ(u) + K y;
        // with γ → 0 the spread of the proposals vanishes.
        let (lo, hi) = out
            .particles
            .iter()
            .fold((f64::MAX, f64::MIN), |(lo, hi), p| {
                (lo.min(p[0]), hi.max(p[0]))
            });
        let psi_spread = ens
            .particles
            .iter()
            .map(|u| m.psi(u)[0])
            .fold(f64::MIN, f64::max)
            - ens
                .particles
                .iter()
                .map(|u| m.psi(u)[0])
                .fold(f64::MAX, f64::min);
        assert!(hi - lo <= g.i_minus_kh[(0, 0)] * psi_spread + 1e-4);
    }

    #[test]
    fn opf_collapses_when_fully_trusting_data() {
        // large r makes K → I, so every proposal sits on the data
        let base = model(1, 1e-6);
        let m = base.with_r(1e4).unwrap();
        let g = compute_structures(&m).unwrap();
        let mut rng = RngStream::from_seed(14);
        let ens = ensemble(&mut rng, 50, 1);
        let draws = StepDraws::from_stream(&mut rng, 50, 1);
        let y = DVector::from_vec(vec![0.3]);
        let (out, _) = opf_step(&m, &g, &ens, &y, &draws).unwrap();
        assert!(out.particles.iter().all(|p| (p[0] - 0.3).abs() < 1e-4));
    }

    #[test]
    fn opf_weights_use_pre_proposal_particles() {
        let m = model(2, 0.4);
        let g = compute_structures(&m).unwrap();
        let mut rng = RngStream::from_seed(5);
        let ens = ensemble(&mut rng, 6, 2);
        let y = rng.standard_normal_vector(2);
        let d1 = StepDraws::from_stream(&mut rng, 6, 2);
        let mut d2 = StepDraws::from_stream(&mut rng, 6, 2);
        d2.uniforms = d1.uniforms.clone();
        let (_, w1) = opf_step(&m, &g, &ens, &y, &d1).unwrap();
        let (_, w2) = opf_step(&m, &g, &ens, &y, &d2).unwrap();
        assert_eq!(w1.weights, w2.weights);
        for (u, lw) in ens.particles.iter().zip(&w1.weights.log_unnorm) {
            let expect = -0.5 * g.s.weighted_norm_sq(&(&y - m.h() * m.psi(u))).unwrap();
            assert_eq!(*lw, expect);
        }
    }

    #[test]
    fn gopf_single_particle_matches_opf() {
        let m = model(2, 0.4);
        let g = compute_structures(&m).unwrap();
        let mut rng = RngStream::from_seed(6);
        let ens = ensemble(&mut rng, 1, 2);
        let y = rng.standard_normal_vector(2);
        let draws = StepDraws::from_stream(&mut rng, 1, 2);
        let (opf, _) = opf_step(&m, &g, &ens, &y, &draws).unwrap();
        let gopf = gopf_step_form1(&m, &g, &ens, &y, &draws).unwrap();
        assert_eq!(opf, gopf);
    }

    #[test]
    fn gopf_forms_bit_identical_with_shared_draws() {
        let m = model(3, 0.7);
        let g = compute_structures(&m).unwrap();
        let mut rng = RngStream::from_seed(7);
        let ens = ensemble(&mut rng, 16, 3);
        let y = rng.standard_normal_vector(3);
        let uniforms = rng.uniforms(16);
        let pairs = LazyPairNoise::new(99, 0, 3);
        let form2 = gopf_step_form2(&m, &g, &ens, &y, &uniforms, &pairs).unwrap();
        let draws = gopf_shared_draws(&m, &g, &ens, &y, &uniforms, &pairs).unwrap();
        let form1 = gopf_step_form1(&m, &g, &ens, &y, &draws).unwrap();
        for (a, b) in form1.particles.iter().zip(&form2.particles) {
            assert!(a
                .iter()
                .zip(b.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[cfg(feature = "dense-pairs")]
    #[test]
    fn dense_pairs_agree_with_lazy() {
        let m = model(2, 0.7);
        let g = compute_structures(&m).unwrap();
        let mut rng = RngStream::from_seed(8);
        let ens = ensemble(&mut rng, 8, 2);
        let y = rng.standard_normal_vector(2);
        let uniforms = rng.uniforms(8);
        let lazy = LazyPairNoise::new(5, 0, 2);
        let dense = DensePairNoise::materialize(&lazy, 8);
        assert_eq!(
            gopf_step_form2(&m, &g, &ens, &y, &uniforms, &lazy).unwrap(),
            gopf_step_form2(&m, &g, &ens, &y, &uniforms, &dense).unwrap()
        );
    }

    #[test]
    fn weighted_input_rejected() {
        let m = model(1, 0.4);
        let g = compute_structures(&m).unwrap();
        let mut rng = RngStream::from_seed(9);
        let mut ens = ensemble(&mut rng, 2, 1);
        ens.weights = crate::resampling::normalize(&[1.0, 3.0]).unwrap();
        let draws = StepDraws::from_stream(&mut rng, 2, 1);
        assert!(bpf_step(&m, &g, &ens, &DVector::zeros(1), &draws).is_err());
    }
}
