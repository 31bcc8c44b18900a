//! Weight normalization and multinomial resampling by interval inversion.
//!
//! Particle `m` owns the half-open interval `[α_m, α_{m+1})` with
//! `α_0 = 0` and `α_{m+1} = α_m + w_m`; a uniform `r` selects the unique
//! owner of the interval containing it. Zero-weight particles own empty
//! intervals and are never selected.

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Normalized importance weights together with the unnormalized values
/// they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    /// Log of the unnormalized weights, before max-subtraction.
    pub log_unnorm: Vec<f64>,
    /// Unnormalized weights rescaled so the largest is 1.
    pub unnorm: Vec<f64>,
    pub norm: Vec<f64>,
}

impl WeightVector {
    pub fn uniform(n: usize) -> Self {
        assert!(n > 0);
        Self {
            log_unnorm: vec![0.0; n],
            unnorm: vec![1.0; n],
            norm: vec![1.0 / n as f64; n],
        }
    }

    pub fn len(&self) -> usize {
        self.norm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norm.is_empty()
    }

    /// `1 / Σ w²`.
    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.norm.iter().map(|w| w * w).sum::<f64>()
    }
}

/// Normalizes nonnegative weights given on the linear scale.
pub fn normalize(unnorm: &[f64]) -> Result<WeightVector> {
    if unnorm.is_empty() || unnorm.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::DegenerateWeights { step: None });
    }
    let log: Vec<f64> = unnorm.iter().map(|w| w.ln()).collect();
    normalize_log(&log)
}

/// Normalizes weights given as logs, subtracting the maximum before
/// exponentiating. `-∞` entries are zero weights.
pub fn normalize_log(log_unnorm: &[f64]) -> Result<WeightVector> {
    if log_unnorm.is_empty() || log_unnorm.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(Error::DegenerateWeights { step: None });
    }
    let max = log_unnorm.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights { step: None });
    }
    let unnorm: Vec<f64> = log_unnorm.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    let norm = unnorm.iter().map(|w| w / total).collect();
    Ok(WeightVector {
        log_unnorm: log_unnorm.to_vec(),
        unnorm,
        norm,
    })
}

/// Ancestor indices and the uniforms that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampleIndexMap {
    pub indices: Vec<usize>,
    pub uniforms: Vec<f64>,
}

impl ResampleIndexMap {
    pub fn identity(n: usize) -> Self {
        Self {
            indices: (0..n).collect(),
            uniforms: Vec::new(),
        }
    }

    /// Map equivalent to applying `self` first, then `next`.
    pub fn then(&self, next: &ResampleIndexMap) -> ResampleIndexMap {
        ResampleIndexMap {
            indices: next.indices.iter().map(|&j| self.indices[j]).collect(),
            uniforms: Vec::new(),
        }
    }
}

/// Owner of each uniform's interval; one output index per uniform.
pub fn resample_indices(w: &WeightVector, uniforms: &[f64]) -> Result<ResampleIndexMap> {
    if let Some((index, &value)) = uniforms
        .iter()
        .enumerate()
        .find(|(_, u)| !(0.0..1.0).contains(*u))
    {
        return Err(Error::UniformOutOfRange { index, value });
    }
    let n = w.len();
    let mut alpha = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &wm in &w.norm {
        alpha.push(acc);
        acc += wm;
    }
    let last_positive = w
        .norm
        .iter()
        .rposition(|&x| x > 0.0)
        .ok_or(Error::DegenerateWeights { step: None })?;

    let indices = uniforms
        .iter()
        .map(|&u| {
            let m = alpha.partition_point(|&a| a <= u) - 1;
            // only reachable when rounding leaves Σw slightly below u
            if m > last_positive || w.norm[m] == 0.0 {
                last_positive
            } else {
                m
            }
        })
        .collect();
    Ok(ResampleIndexMap {
        indices,
        uniforms: uniforms.to_vec(),
    })
}

/// `output[n] = values[map.indices[n]]`.
pub fn apply_indices<T: Clone>(values: &[T], map: &ResampleIndexMap) -> Result<Vec<T>> {
    map.indices
        .iter()
        .map(|&i| {
            values.get(i).cloned().ok_or(Error::IndexOutOfRange {
                index: i,
                len: values.len(),
            })
        })
        .collect()
}

/// `S^N` applied to a weighted particle set with explicit uniforms.
pub fn sampling_operator_with_uniforms<T: Clone>(
    values: &[T],
    weights: &WeightVector,
    uniforms: &[f64],
) -> Result<Vec<T>> {
    if values.len() != weights.len() {
        return Err(Error::dim("sampling_operator", weights.len(), values.len()));
    }
    apply_indices(values, &resample_indices(weights, uniforms)?)
}

/// `S^N`: `n_out` i.i.d. draws from `Σ w_m δ_{values_m}`, returned as an
/// equal-weight set. Consumes exactly `n_out` uniforms.
pub fn sampling_operator<T: Clone>(
    values: &[T],
    weights: &WeightVector,
    n_out: usize,
    rng: &mut RngStream,
) -> Result<Vec<T>> {
    let uniforms = rng.uniforms(n_out);
    sampling_operator_with_uniforms(values, weights, &uniforms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(&[2.0, 2.0]).unwrap().norm, vec![0.5, 0.5]);
        assert_eq!(
            normalize(&[1.0, 0.0, 0.0]).unwrap().norm,
            vec![1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn log_space_underflow_path() {
        // softmax of (0, -1, -2), computed in high precision
        let oracle = [
            0.665_240_955_774_821_6,
            0.244_728_471_054_797_6,
            0.090_030_573_170_380_46,
        ];
        let w = normalize_log(&[-700.0, -701.0, -702.0]).unwrap();
        for (a, b) in w.norm.iter().zip(oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        let lin = normalize(&[(-700f64).exp(), (-701f64).exp(), (-702f64).exp()]).unwrap();
        for (a, b) in lin.norm.iter().zip(oracle) {
            assert!((a - b).abs() < 1e-3);
        }
        // naive exponentiation of these underflows to zero
        let w = normalize_log(&[-2000.0, -2001.0]).unwrap();
        assert!((w.norm[0] - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            normalize(&[0.0, 0.0]),
            Err(Error::DegenerateWeights { .. })
        ));
        assert!(normalize(&[1.0, f64::NAN]).is_err());
        assert!(normalize(&[1.0, f64::INFINITY]).is_err());
        assert!(normalize(&[1.0, -1.0]).is_err());
        assert!(normalize(&[]).is_err());
        assert!(normalize_log(&[f64::NEG_INFINITY; 3]).is_err());
        let e = normalize(&[0.0]).unwrap_err().at_step(4);
        assert_eq!(
            e.to_string(),
            "degenerate weights at step 4: all zero or non-finite"
        );
    }

    #[test]
    fn interval_inversion_examples() {
        let point = normalize(&[1.0, 0.0, 0.0]).unwrap();
        let m = resample_indices(&point, &[0.0, 0.3, 0.999_999]).unwrap();
        assert_eq!(m.indices, vec![0, 0, 0]);

        let half = normalize(&[0.5, 0.5]).unwrap();
        assert_eq!(
            resample_indices(&half, &[0.25, 0.75]).unwrap().indices,
            vec![0, 1]
        );
        // boundary goes to the right-hand owner
        assert_eq!(resample_indices(&half, &[0.5]).unwrap().indices, vec![1]);

        let w = normalize(&[0.2, 0.3, 0.5]).unwrap();
        assert_eq!(resample_indices(&w, &[0.49]).unwrap().indices, vec![1]);
        assert_eq!(
            resample_indices(&w, &[0.19, 0.2, 0.5, 0.0])
                .unwrap()
                .indices,
            vec![0, 1, 2, 0]
        );
    }

    #[test]
    fn zero_weight_never_selected() {
        let w = normalize(&[0.5, 0.0, 0.5, 0.0]).unwrap();
        let m = resample_indices(&w, &[0.5, 0.4999, 0.999_999_999_999]).unwrap();
        assert_eq!(m.indices, vec![2, 0, 2]);
    }

    #[test]
    fn uniform_range_checked() {
        let w = WeightVector::uniform(2);
        assert!(matches!(
            resample_indices(&w, &[0.1, 1.0]),
            Err(Error::UniformOutOfRange { index: 1, .. })
        ));
        assert!(resample_indices(&w, &[-0.1]).is_err());
    }

    #[test]
    fn apply_examples() {
        let v = vec!['a', 'b', 'c'];
        assert_eq!(
            apply_indices(&v, &ResampleIndexMap::identity(3)).unwrap(),
            v
        );
        let zeros = ResampleIndexMap {
            indices: vec![0; 3],
            uniforms: vec![],
        };
        assert_eq!(apply_indices(&v, &zeros).unwrap(), vec!['a'; 3]);
        let bad = ResampleIndexMap {
            indices: vec![3],
            uniforms: vec![],
        };
        assert!(matches!(
            apply_indices(&v, &bad),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn sampling_point_mass() {
        let mut rng = RngStream::from_seed(1);
        let w = normalize(&[0.0, 3.0]).unwrap();
        let out = sampling_operator(&[10, 20], &w, 50, &mut rng).unwrap();
        assert!(out.iter().all(|&x| x == 20));
    }

    #[test]
    fn sampling_binomial_frequency() {
        let mut rng = RngStream::from_seed(2);
        let n = 100_000;
        let w = normalize(&[0.5, 0.5]).unwrap();
        let out = sampling_operator(&[0u8, 1], &w, n, &mut rng).unwrap();
        let freq = out.iter().filter(|&&x| x == 1).count() as f64 / n as f64;
        assert!((freq - 0.5).abs() < 4.0 * (0.25 / n as f64).sqrt());
    }

    #[test]
    fn sampling_is_unbiased() {
        let values = [-1.0, 0.5, 2.0, 3.5];
        let w = normalize(&[0.1, 0.4, 0.3, 0.2]).unwrap();
        let target: f64 = values.iter().zip(&w.norm).map(|(v, p)| v * p).sum();
        let var: f64 = values
            .iter()
            .zip(&w.norm)
            .map(|(v, p)| p * (v - target).powi(2))
            .sum();
        let (n, reps) = (16, 1000);
        let mut rng = RngStream::from_seed(3);
        let mean_of_means = (0..reps)
            .map(|_| {
                sampling_operator(&values, &w, n, &mut rng)
                    .unwrap()
                    .iter()
                    .sum::<f64>()
                    / n as f64
            })
            .sum::<f64>()
            / reps as f64;
        let sd = (var / (n * reps) as f64).sqrt();
        assert!((mean_of_means - target).abs() < 4.0 * sd);
    }

    proptest! {
        #[test]
        fn indices_match_intervals(
            raw in proptest::collection::vec(0.0f64..10.0, 1..20),
            us in proptest::collection::vec(0.0f64..1.0, 1..50),
        ) {
            prop_assume!(raw.iter().any(|&x| x > 0.0));
            let w = normalize(&raw).unwrap();
            let total: f64 = w.norm.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let map = resample_indices(&w, &us).unwrap();
            let mut alpha = vec![0.0];
            for x in &w.norm { alpha.push(alpha.last().unwrap() + x); }
            for (&u, &m) in us.iter().zip(&map.indices) {
                prop_assert!(w.norm[m] > 0.0);
                if u < alpha[w.len()] {
                    prop_assert!(alpha[m] <= u && u < alpha[m + 1]);
                }
            }
            // pure function of (weights, uniforms)
            prop_assert_eq!(map, resample_indices(&w, &us).unwrap());
        }

        #[test]
        fn composition(seed in any::<u64>(), n in 1usize..12) {
            let mut rng = RngStream::from_seed(seed);
            let v: Vec<usize> = (0..n).map(|i| i * 10).collect();
            let w1 = normalize(&rng.uniforms(n)).unwrap();
            let w2 = normalize(&rng.uniforms(n)).unwrap();
            let m1 = resample_indices(&w1, &rng.uniforms(n)).unwrap();
            let m2 = resample_indices(&w2, &rng.uniforms(n)).unwrap();
            let twice = apply_indices(&apply_indices(&v, &m1).unwrap(), &m2).unwrap();
            prop_assert_eq!(twice, apply_indices(&v, &m1.then(&m2)).unwrap());
        }
    }
}
