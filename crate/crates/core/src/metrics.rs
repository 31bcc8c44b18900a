//! Error functionals, a dictionary-based lower bound on the randomized
//! measure metric, coupling discrepancy, and least-squares rate fits.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::filters::{Ensemble, WeightedEnsemble};
use crate::rng::{Purpose, RngStream};

/// Fewest replicate pairs `estimate_d` accepts.
pub const MIN_REPLICATES: usize = 30;

/// Number of tanh ridge functions in the default dictionary.
pub const DEFAULT_RIDGES: usize = 64;

/// A weighted set of atoms `Σ w_i δ_{x_i}`.
pub trait EmpiricalMeasure {
    fn atoms(&self) -> &[DVector<f64>];
    fn atom_weights(&self) -> &[f64];

    fn mean(&self) -> DVector<f64> {
        crate::filters::weighted_mean(self.atoms(), self.atom_weights())
    }
}

impl<T: EmpiricalMeasure> EmpiricalMeasure for &T {
    fn atoms(&self) -> &[DVector<f64>] {
        (*self).atoms()
    }
    fn atom_weights(&self) -> &[f64] {
        (*self).atom_weights()
    }
}

impl EmpiricalMeasure for Ensemble {
    fn atoms(&self) -> &[DVector<f64>] {
        &self.particles
    }
    fn atom_weights(&self) -> &[f64] {
        &self.weights.norm
    }
}

impl EmpiricalMeasure for WeightedEnsemble {
    fn atoms(&self) -> &[DVector<f64>] {
        &self.particles
    }
    fn atom_weights(&self) -> &[f64] {
        &self.weights.norm
    }
}

/// Bounded test functions `tanh(⟨a_i, x⟩ + b_i)` followed by the coordinate
/// clamps `clamp(x_j, −1, 1)`. Every member maps into `[−1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunctionDictionary {
    dim: usize,
    directions: Vec<DVector<f64>>,
    offsets: Vec<f64>,
}

impl TestFunctionDictionary {
    /// Default size, `a_i ~ N(0, I)`, `b_i ~ N(0, 1)`, seeded.
    pub fn new(dim: usize, seed: u64) -> Self {
        Self::with_ridges(dim, DEFAULT_RIDGES, seed)
    }

    pub fn with_ridges(dim: usize, ridges: usize, seed: u64) -> Self {
        let mut rng = RngStream::for_purpose(seed, Purpose::Dictionary, &[dim as u64]);
        let mut directions = Vec::with_capacity(ridges);
        let mut offsets = Vec::with_capacity(ridges);
        for _ in 0..ridges {
            directions.push(rng.standard_normal_vector(dim));
            offsets.push(rng.standard_normal());
        }
        Self {
            dim,
            directions,
            offsets,
        }
    }

    /// Explicit ridges `(a_i, b_i)`.
    pub fn from_ridges(dim: usize, ridges: Vec<(DVector<f64>, f64)>) -> Result<Self> {
        if let Some((a, _)) = ridges.iter().find(|(a, _)| a.len() != dim) {
            return Err(Error::dim("ridge direction", dim, a.len()));
        }
        let (directions, offsets) = ridges.into_iter().unzip();
        Ok(Self {
            dim,
            directions,
            offsets,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.directions.len() + self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ridge(&self, i: usize) -> (&DVector<f64>, f64) {
        (&self.directions[i], self.offsets[i])
    }

    pub fn eval(&self, i: usize, x: &DVector<f64>) -> f64 {
        let r = self.directions.len();
        if i < r {
            (self.directions[i].dot(x) + self.offsets[i]).tanh()
        } else {
            x[i - r].clamp(-1.0, 1.0)
        }
    }

    /// `f_i(x)` for every member, in order.
    pub fn eval_all(&self, x: &DVector<f64>) -> Vec<f64> {
        (0..self.len()).map(|i| self.eval(i, x)).collect()
    }

    /// `μ(f_i)` for every member.
    pub fn expectations(&self, mu: &impl EmpiricalMeasure) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.len()];
        for (x, &w) in mu.atoms().iter().zip(mu.atom_weights()) {
            if x.len() != self.dim {
                return Err(Error::dim("dictionary argument", self.dim, x.len()));
            }
            for (i, a) in acc.iter_mut().enumerate() {
                *a += w * self.eval(i, x);
            }
        }
        Ok(acc)
    }

    /// `ν(f_i)` for `ν = N(mean, sd²)` on the line, by midpoint quadrature
    /// over `mean ± 12 sd`.
    pub fn scalar_gaussian_expectations(&self, mean: f64, sd: f64) -> Result<Vec<f64>> {
        if self.dim != 1 {
            return Err(Error::dim("scalar Gaussian expectations", 1, self.dim));
        }
        if !(sd > 0.0) {
            return Err(Error::InvalidArgument(
                "standard deviation must be positive".into(),
            ));
        }
        let cells = 40_000;
        let half = 12.0;
        let h = 2.0 * half / cells as f64;
        let norm = h / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = vec![0.0; self.len()];
        for c in 0..cells {
            let t = -half + (c as f64 + 0.5) * h;
            let x = DVector::from_element(1, mean + sd * t);
            let w = norm * (-0.5 * t * t).exp();
            for (i, a) in acc.iter_mut().enumerate() {
                *a += w * self.eval(i, &x);
            }
        }
        Ok(acc)
    }
}

/// `max_n ‖u⁽ⁿ⁾ − u†‖²`.
pub fn max_particle_error(ens: &Ensemble, u_dagger: &DVector<f64>) -> Result<f64> {
    if ens.dim() != u_dagger.len() {
        return Err(Error::dim("max_particle_error", ens.dim(), u_dagger.len()));
    }
    Ok(ens
        .particles
        .iter()
        .map(|p| (p - u_dagger).norm_squared())
        .fold(0.0, f64::max))
}

/// `‖mean − u†‖²` for the (weighted) mean of `mu`.
pub fn mean_error(mu: &impl EmpiricalMeasure, u_dagger: &DVector<f64>) -> Result<f64> {
    let mean = mu.mean();
    if mean.len() != u_dagger.len() {
        return Err(Error::dim("mean_error", mean.len(), u_dagger.len()));
    }
    Ok((mean - u_dagger).norm_squared())
}

/// Dictionary estimate of `d(μ, ν) = sup_f sqrt(E|μ(f) − ν(f)|²)` from
/// paired replicates. The supremum is over the dictionary only, so this is
/// a lower bound on `d`.
pub fn estimate_d<A, B>(runs_a: &[A], runs_b: &[B], dict: &TestFunctionDictionary) -> Result<f64>
where
    A: EmpiricalMeasure,
    B: EmpiricalMeasure,
{
    if runs_a.len() != runs_b.len() {
        return Err(Error::dim(
            "estimate_d replicate pairs",
            runs_a.len(),
            runs_b.len(),
        ));
    }
    let a = runs_a
        .iter()
        .map(|m| dict.expectations(m))
        .collect::<Result<Vec<_>>>()?;
    let b = runs_b
        .iter()
        .map(|m| dict.expectations(m))
        .collect::<Result<Vec<_>>>()?;
    estimate_d_from_expectations(&a, Reference::Runs(&b))
}

/// Against a fixed measure whose dictionary expectations are known.
pub fn estimate_d_fixed<A: EmpiricalMeasure>(
    runs: &[A],
    reference: &[f64],
    dict: &TestFunctionDictionary,
) -> Result<f64> {
    let a = runs
        .iter()
        .map(|m| dict.expectations(m))
        .collect::<Result<Vec<_>>>()?;
    estimate_d_from_expectations(&a, Reference::Fixed(reference))
}

/// The second argument of [`estimate_d_from_expectations`].
#[derive(Debug, Clone, Copy)]
pub enum Reference<'a> {
    /// Per-replicate expectations, paired with the first argument by index.
    Runs(&'a [Vec<f64>]),
    /// Expectations of a fixed measure.
    Fixed(&'a [f64]),
}

/// Core of the estimator on precomputed `μ_r(f_i)` values, returning
/// `max_i sqrt(mean_r |μ_r(f_i) − ν_r(f_i)|²)`.
pub fn estimate_d_from_expectations(a: &[Vec<f64>], reference: Reference<'_>) -> Result<f64> {
    if a.len() < MIN_REPLICATES {
        return Err(Error::InvalidArgument(format!(
            "estimate_d needs at least {MIN_REPLICATES} replicates, got {}",
            a.len()
        )));
    }
    let m = a[0].len();
    let mut msq = vec![0.0; m];
    for (r, fa) in a.iter().enumerate() {
        let fb: &[f64] = match reference {
            Reference::Runs(b) => {
                if b.len() != a.len() {
                    return Err(Error::dim("estimate_d replicate pairs", a.len(), b.len()));
                }
                &b[r]
            }
            Reference::Fixed(v) => v,
        };
        if fa.len() != m || fb.len() != m {
            return Err(Error::dim(
                "estimate_d dictionary size",
                m,
                fa.len().min(fb.len()),
            ));
        }
        for i in 0..m {
            let diff = fa[i] - fb[i];
            msq[i] += diff * diff;
        }
    }
    let reps = a.len() as f64;
    Ok(msq.iter().map(|s| (s / reps).sqrt()).fold(0.0, f64::max))
}

/// `max_n ‖u_A⁽ⁿ⁾ − u_B⁽ⁿ⁾‖`, matching particles by index.
pub fn coupling_discrepancy(a: &Ensemble, b: &Ensemble) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(
            "coupling_discrepancy particle count",
            a.len(),
            b.len(),
        ));
    }
    if a.dim() != b.dim() {
        return Err(Error::dim(
            "coupling_discrepancy dimension",
            a.dim(),
            b.dim(),
        ));
    }
    Ok(a.particles
        .iter()
        .zip(&b.particles)
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max))
}

/// Ordinary least-squares line through the stored samples.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    /// Fitted `(x, y)` pairs, already log-transformed in log-log mode.
    pub samples: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn fit_rate(samples: &[(f64, f64)], log_log: bool) -> Result<RateFit> {
    if samples.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "rate fit needs at least 3 samples, got {}",
            samples.len()
        )));
    }
    let pts: Vec<(f64, f64)> = if log_log {
        if let Some((x, y)) = samples.iter().find(|(x, y)| !(*x > 0.0 && *y > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "log-log fit needs positive values, got ({x}, {y})"
            )));
        }
        samples.iter().map(|(x, y)| (x.ln(), y.ln())).collect()
    } else {
        samples.to_vec()
    };
    if let Some((x, y)) = pts.iter().find(|(x, y)| !(x.is_finite() && y.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "non-finite sample ({x}, {y})"
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument(
            "rate fit needs at least two distinct x values".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    Ok(RateFit {
        samples: pts,
        slope,
        intercept,
        r_squared,
    })
}
