use nalgebra::DVector;

use super::sir::{sir_step, GaussianProposal};
use super::steps::{
    bpf_step, gopf_shared_draws, gopf_step_form1, gopf_step_form2, opf_step, LazyPairNoise,
};
use super::{Ensemble, StepDraws, WeightedEnsemble};
use crate::error::{Error, Result};
use crate::gain::{kalman_oracle_step, threedvar_step, GaussianBelief, GaussianStructures};
use crate::gaussian::GaussianDist;
use crate::model::{ModelSpec, TruthRun};
use crate::rng::{Purpose, RngStream};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SirProposal {
    Transition,
    Optimal,
    /// Optimal mean with the covariance inflated by the given factor.
    OptimalScaled(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    Bpf,
    Opf,
    /// Gaussianized optimal filter, weight-resample-propagate form.
    Gopf1,
    /// Gaussianized optimal filter, pair-indexed noise form.
    Gopf2,
    Sir(SirProposal),
    /// Cycled 3DVAR; a single deterministic particle.
    ThreeDVar,
    /// Exact Kalman recursion; linear maps with a Gaussian prior only.
    KalmanOracle,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Bpf => "bpf",
            Variant::Opf => "opf",
            Variant::Gopf1 => "gopf",
            Variant::Gopf2 => "gopf2",
            Variant::Sir(SirProposal::Transition) => "sir_transition",
            Variant::Sir(SirProposal::Optimal) => "sir_optimal",
            Variant::Sir(SirProposal::OptimalScaled(_)) => "sir_optimal_scaled",
            Variant::ThreeDVar => "threedvar",
            Variant::KalmanOracle => "kalman",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "bpf" => Variant::Bpf,
            "opf" => Variant::Opf,
            "gopf" | "gopf1" => Variant::Gopf1,
            "gopf2" => Variant::Gopf2,
            "sir_transition" => Variant::Sir(SirProposal::Transition),
            "sir_optimal" => Variant::Sir(SirProposal::Optimal),
            "threedvar" | "3dvar" => Variant::ThreeDVar,
            "kalman" => Variant::KalmanOracle,
            _ => return None,
        })
    }
}

/// Law `μ₀` of the initial particles.
#[derive(Debug, Clone)]
pub enum InitialDistribution {
    Gaussian(GaussianDist),
    Dirac(DVector<f64>),
}

impl InitialDistribution {
    pub fn dim(&self) -> usize {
        match self {
            InitialDistribution::Gaussian(g) => g.dim(),
            InitialDistribution::Dirac(x) => x.len(),
        }
    }

    pub fn mean(&self) -> DVector<f64> {
        match self {
            InitialDistribution::Gaussian(g) => g.mean().clone(),
            InitialDistribution::Dirac(x) => x.clone(),
        }
    }

    /// `n` i.i.d. draws from the stream `(seed, FilterInit)`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<DVector<f64>> {
        match self {
            InitialDistribution::Gaussian(g) => {
                let mut rng = RngStream::for_purpose(seed, Purpose::FilterInit, &[]);
                (0..n).map(|_| g.sample(&mut rng)).collect()
            }
            InitialDistribution::Dirac(x) => vec![x.clone(); n],
        }
    }
}

/// Trajectory of a filter over a truth's data.
#[derive(Debug, Clone)]
pub struct FilterRun {
    pub variant: Variant,
    /// Equal-weight ensembles at steps `0..=K`; empty for the Kalman oracle.
    pub ensembles: Vec<Ensemble>,
    /// Pre-resampling weighted ensembles at steps `0..=K` where the variant
    /// has one; entry 0 is always `None`.
    pub weighted: Vec<Option<WeightedEnsemble>>,
    /// Kalman beliefs at steps `0..=K`; empty for other variants.
    pub beliefs: Vec<GaussianBelief>,
}

impl FilterRun {
    pub fn steps(&self) -> usize {
        self.ensembles
            .len()
            .max(self.beliefs.len())
            .saturating_sub(1)
    }

    /// State estimate at step `k`: the weighted mean when the variant has a
    /// weighted ensemble, else the ensemble mean, or the Kalman mean.
    pub fn estimate(&self, k: usize) -> DVector<f64> {
        if let Some(b) = self.beliefs.get(k) {
            return b.mean.clone();
        }
        match self.weighted.get(k) {
            Some(Some(w)) => w.mean(),
            _ => self.ensembles[k].mean(),
        }
    }

    pub fn estimates(&self) -> Vec<DVector<f64>> {
        (0..=self.steps()).map(|k| self.estimate(k)).collect()
    }
}

/// Runs `variant` over every observation of `truth`. All randomness comes
/// from `seed`: initial particles from `(FilterInit)`, step draws from
/// `(FilterStep, k)`, so runs sharing a seed share draws.
pub fn run_filter(
    variant: Variant,
    model: &ModelSpec,
    g: &GaussianStructures,
    truth: &TruthRun,
    n: usize,
    seed: u64,
    init: &InitialDistribution,
) -> Result<FilterRun> {
    if init.dim() != model.state_dim() {
        return Err(Error::dim(
            "initial distribution",
            model.state_dim(),
            init.dim(),
        ));
    }
    if n == 0 {
        return Err(Error::InvalidArgument(
            "particle count must be positive".into(),
        ));
    }
    let steps = truth.steps();
    let d = model.state_dim();
    let mut run = FilterRun {
        variant,
        ensembles: Vec::with_capacity(steps + 1),
        weighted: Vec::with_capacity(steps + 1),
        beliefs: Vec::new(),
    };

    if variant == Variant::KalmanOracle {
        let InitialDistribution::Gaussian(prior) = init else {
            return Err(Error::InvalidArgument(
                "Kalman oracle needs a Gaussian prior".into(),
            ));
        };
        let mut belief = GaussianBelief::new(prior.mean().clone(), prior.cov().clone())?;
        run.beliefs.push(belief.clone());
        for (k, y) in truth.y_dagger.iter().enumerate() {
            belief = kalman_oracle_step(model, &belief, y).map_err(|e| e.at_step(k + 1))?;
            run.beliefs.push(belief.clone());
        }
        return Ok(run);
    }

    if variant == Variant::ThreeDVar {
        let mut m = init.mean();
        run.ensembles
            .push(Ensemble::equal_weight(vec![m.clone()], 0)?);
        run.weighted.push(None);
        for (k, y) in truth.y_dagger.iter().enumerate() {
            m = threedvar_step(g, model, &m, y)?;
            run.ensembles
                .push(Ensemble::equal_weight(vec![m.clone()], k + 1)?);
            run.weighted.push(None);
        }
        return Ok(run);
    }

    let proposal = match variant {
        Variant::Sir(SirProposal::Transition) => Some(GaussianProposal::transition(model, g)),
        Variant::Sir(SirProposal::Optimal) => Some(GaussianProposal::optimal(model, g)),
        Variant::Sir(SirProposal::OptimalScaled(f)) => {
            Some(GaussianProposal::optimal_scaled(model, g, f)?)
        }
        _ => None,
    };

    let mut ens = Ensemble::equal_weight(init.sample(n, seed), 0)?;
    run.ensembles.push(ens.clone());
    run.weighted.push(None);
    for (k, y) in truth.y_dagger.iter().enumerate() {
        let draws = StepDraws::generate(seed, k, n, d);
        let (next, weighted) = match variant {
            Variant::Bpf => {
                let (e, w) = bpf_step(model, g, &ens, y, &draws)?;
                (e, Some(w))
            }
            Variant::Opf => {
                let (e, w) = opf_step(model, g, &ens, y, &draws)?;
                (e, Some(w))
            }
            Variant::Sir(_) => {
                let prop = proposal.as_ref().expect("proposal built for SIR variants");
                let (e, w) = sir_step(model, g, prop, &ens, y, &draws)?;
                (e, Some(w))
            }
            Variant::Gopf1 => (gopf_step_form1(model, g, &ens, y, &draws)?, None),
            Variant::Gopf2 => {
                let pairs = LazyPairNoise::new(seed, k, d);
                (
                    gopf_step_form2(model, g, &ens, y, &draws.uniforms, &pairs)?,
                    None,
                )
            }
            Variant::ThreeDVar | Variant::KalmanOracle => unreachable!(),
        };
        run.ensembles.push(next.clone());
        run.weighted.push(weighted);
        ens = next;
    }
    Ok(run)
}

/// Runs both Gaussianized forms side by side on draws arranged so that the
/// first form's `ζ^{(n)}` is the second form's `ζ^{(m*(n), n)}`. Each form
/// evolves its own ensemble; they agree bit-for-bit when the forms coincide.
pub fn run_gopf_forms_shared(
    model: &ModelSpec,
    g: &GaussianStructures,
    truth: &TruthRun,
    n: usize,
    seed: u64,
    init: &InitialDistribution,
) -> Result<(FilterRun, FilterRun)> {
    if init.dim() != model.state_dim() {
        return Err(Error::dim(
            "initial distribution",
            model.state_dim(),
            init.dim(),
        ));
    }
    let d = model.state_dim();
    let start = Ensemble::equal_weight(init.sample(n, seed), 0)?;
    let mut form1 = FilterRun {
        variant: Variant::Gopf1,
        ensembles: vec![start.clone()],
        weighted: vec![None],
        beliefs: Vec::new(),
    };
    let mut form2 = FilterRun {
        variant: Variant::Gopf2,
        ensembles: vec![start],
        weighted: vec![None],
        beliefs: Vec::new(),
    };
    for (k, y) in truth.y_dagger.iter().enumerate() {
        let uniforms = StepDraws::generate(seed, k, n, d).uniforms;
        let pairs = LazyPairNoise::new(seed, k, d);
        let e1 = form1.ensembles.last().expect("nonempty");
        let draws = gopf_shared_draws(model, g, e1, y, &uniforms, &pairs)?;
        let next1 = gopf_step_form1(model, g, e1, y, &draws)?;
        let e2 = form2.ensembles.last().expect("nonempty");
        let next2 = gopf_step_form2(model, g, e2, y, &uniforms, &pairs)?;
        form1.ensembles.push(next1);
        form1.weighted.push(None);
        form2.ensembles.push(next2);
        form2.weighted.push(None);
    }
    Ok((form1, form2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gain::compute_structures;
    use crate::gaussian::SpdMatrix;
    use crate::model::BuiltinMap;
    use nalgebra::DMatrix;

    fn sine_model(d: usize) -> ModelSpec {
        ModelSpec::with_ratio(
            BuiltinMap::bounded_sine(1.2, DMatrix::identity(d, d)).unwrap(),
            DMatrix::identity(d, d),
            SpdMatrix::identity(d),
            SpdMatrix::identity(d),
            0.5,
            0.2,
        )
        .unwrap()
    }

    fn truth(m: &ModelSpec, steps: usize) -> TruthRun {
        let d = m.state_dim();
        TruthRun::generate(
            m,
            steps,
            &DVector::zeros(d),
            &SpdMatrix::identity(d),
            &SpdMatrix::identity(m.obs_dim()),
            11,
        )
        .unwrap()
    }

    fn gaussian_prior(d: usize) -> InitialDistribution {
        InitialDistribution::Gaussian(GaussianDist::centered(SpdMatrix::identity(d)))
    }

    #[test]
    fn zero_steps_returns_initial_ensemble() {
        let m = sine_model(2);
        let g = compute_structures(&m).unwrap();
        let mut t = truth(&m, 3);
        t.y_dagger.clear();
        let init = gaussian_prior(2);
        let run = run_filter(Variant::Opf, &m, &g, &t, 7, 5, &init).unwrap();
        assert_eq!(run.ensembles.len(), 1);
        assert_eq!(run.ensembles[0].particles, init.sample(7, 5));
    }

    #[test]
    fn same_seed_same_trajectory() {
        let m = sine_model(2);
        let g = compute_structures(&m).unwrap();
        let t = truth(&m, 10);
        for v in [
            Variant::Bpf,
            Variant::Opf,
            Variant::Gopf1,
            Variant::Gopf2,
            Variant::Sir(SirProposal::Optimal),
        ] {
            let a = run_filter(v, &m, &g, &t, 12, 3, &gaussian_prior(2)).unwrap();
            let b = run_filter(v, &m, &g, &t, 12, 3, &gaussian_prior(2)).unwrap();
            assert_eq!(a.ensembles, b.ensembles);
            assert_eq!(a.weighted, b.weighted);
        }
    }

    #[test]
    fn threedvar_is_noise_free_single_particle_opf() {
        let m = sine_model(2);
        let g = compute_structures(&m).unwrap();
        let t = truth(&m, 15);
        let init = InitialDistribution::Dirac(DVector::from_vec(vec![0.5, -1.0]));
        let tv = run_filter(Variant::ThreeDVar, &m, &g, &t, 1, 0, &init).unwrap();
        let mut ens = Ensemble::equal_weight(vec![init.mean()], 0).unwrap();
        for (k, y) in t.y_dagger.iter().enumerate() {
            let draws = StepDraws {
                gaussians: vec![DVector::zeros(2)],
                uniforms: vec![0.5],
            };
            ens = opf_step(&m, &g, &ens, y, &draws).unwrap().0;
            assert_eq!(ens.mean(), tv.estimate(k + 1));
        }
    }

    #[test]
    fn gopf_forms_agree_over_run() {
        let m = sine_model(3);
        let g = compute_structures(&m).unwrap();
        let t = truth(&m, 20);
        let (a, b) = run_gopf_forms_shared(&m, &g, &t, 10, 8, &gaussian_prior(3)).unwrap();
        assert_eq!(a.ensembles, b.ensembles);
    }

    #[test]
    fn kalman_variant_rejects_nonlinear() {
        let m = sine_model(1);
        let g = compute_structures(&m).unwrap();
        let t = truth(&m, 2);
        assert!(matches!(
            run_filter(Variant::KalmanOracle, &m, &g, &t, 1, 0, &gaussian_prior(1)),
            Err(Error::NonLinearOracle)
        ));
    }

    #[test]
    fn shared_seed_shares_draws_across_dirac_starts() {
        let m = sine_model(1);
        let g = compute_structures(&m).unwrap();
        let t = truth(&m, 30);
        let a = run_filter(
            Variant::Opf,
            &m,
            &g,
            &t,
            4,
            2,
            &InitialDistribution::Dirac(DVector::from_vec(vec![-2.0])),
        )
        .unwrap();
        let b = run_filter(
            Variant::Opf,
            &m,
            &g,
            &t,
            4,
            2,
            &InitialDistribution::Dirac(DVector::from_vec(vec![2.0])),
        )
        .unwrap();
        let gap = |k: usize| {
            a.ensembles[k]
                .particles
                .iter()
                .zip(&b.ensembles[k].particles)
                .map(|(x, y)| (x - y).amax())
                .fold(0.0, f64::max)
        };
        assert!(gap(30) < 1e-3 * gap(0));
    }
}
