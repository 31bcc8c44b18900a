//! Dense SPD matrices with cached Cholesky factors, weighted norms and
//! Gaussian sampling / log-densities.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng::RngStream;

const ASYMMETRY_TOL: f64 = 1e-12;
const PIVOT_TOL: f64 = 1e-14;

/// Symmetric positive-definite matrix with its lower Cholesky factor.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    entries: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_det: f64,
}

impl SpdMatrix {
    /// Symmetrizes `(M + Mᵀ)/2`, then factorizes. Rejects matrices that are
    /// visibly asymmetric, indefinite, or have a pivot below `1e-14 * trace`.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::dim("SpdMatrix (square)", m.nrows(), m.ncols()));
        }
        if m.nrows() == 0 {
            return Err(Error::InvalidArgument(
                "SpdMatrix must have dim >= 1".into(),
            ));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "SpdMatrix entries must be finite".into(),
            ));
        }
        let scale = m.amax();
        let asym = (&m - m.transpose()).amax();
        if scale > 0.0 && asym / scale > ASYMMETRY_TOL {
            return Err(Error::NotSymmetric {
                asymmetry: asym / scale,
            });
        }
        let sym = (&m + m.transpose()) * 0.5;
        Self::factorize(sym)
    }

    fn factorize(sym: DMatrix<f64>) -> Result<Self> {
        let trace = sym.trace();
        let chol = sym
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite)?
            .unpack();
        let mut log_det = 0.0;
        for i in 0..chol.nrows() {
            let pivot = chol[(i, i)] * chol[(i, i)];
            if !(pivot >= PIVOT_TOL * trace) {
                return Err(Error::NearSingular { pivot, trace });
            }
            log_det += 2.0 * chol[(i, i)].ln();
        }
        Ok(Self {
            entries: sym,
            chol,
            log_det,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    /// `c·I`; panics unless `c > 0`.
    pub fn scaled_identity(dim: usize, c: f64) -> Self {
        assert!(c > 0.0 && dim > 0);
        let entries = DMatrix::identity(dim, dim) * c;
        let chol = DMatrix::identity(dim, dim) * c.sqrt();
        Self {
            entries,
            chol,
            log_det: dim as f64 * c.ln(),
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    /// Row-major nested lists, as they appear in config files.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(matrix_from_rows(rows)?)
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Lower-triangular `L` with `L Lᵀ = A`.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `c·A` for `c > 0`, reusing the factor.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "SPD scale factor must be positive and finite, got {c}"
            )));
        }
        Ok(Self {
            entries: &self.entries * c,
            chol: &self.chol * c.sqrt(),
            log_det: self.log_det + self.dim() as f64 * c.ln(),
        })
    }

    /// `xᵀA⁻¹x` by one triangular solve against the cached factor.
    pub fn weighted_norm_sq(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::dim("weighted_norm_sq", self.dim(), x.len()));
        }
        Ok(self.whiten(x).norm_squared())
    }

    /// `L⁻¹x`; caller guarantees the dimension.
    pub(crate) fn whiten(&self, x: &DVector<f64>) -> DVector<f64> {
        self.chol
            .solve_lower_triangular(x)
            .expect("Cholesky factor has nonzero diagonal")
    }

    /// `A⁻¹B` through the factor.
    pub fn solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.dim() {
            return Err(Error::dim("SpdMatrix::solve", self.dim(), b.nrows()));
        }
        let y = self
            .chol
            .solve_lower_triangular(b)
            .expect("Cholesky factor has nonzero diagonal");
        Ok(self
            .chol
            .tr_solve_lower_triangular(&y)
            .expect("Cholesky factor has nonzero diagonal"))
    }

    /// `A⁻¹` as `L⁻ᵀL⁻¹`; exactly symmetric by construction.
    pub fn inverse(&self) -> DMatrix<f64> {
        let linv = self
            .chol
            .solve_lower_triangular(&DMatrix::identity(self.dim(), self.dim()))
            .expect("Cholesky factor has nonzero diagonal");
        linv.transpose() * linv
    }

    /// `A⁻¹` as an SPD matrix.
    pub fn inverse_spd(&self) -> Result<Self> {
        Self::factorize(self.inverse())
    }

    /// `L z`.
    pub fn color(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.chol * z
    }
}

/// Free-function form of [`SpdMatrix::weighted_norm_sq`], `|x|²_A = xᵀA⁻¹x`.
pub fn weighted_norm_sq(a: &SpdMatrix, x: &DVector<f64>) -> Result<f64> {
    a.weighted_norm_sq(x)
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    if nrows == 0 {
        return Err(Error::InvalidArgument(
            "matrix must have at least one row".into(),
        ));
    }
    let ncols = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != ncols) {
        return Err(Error::dim("matrix row length", ncols, bad.len()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Row-major nested list form of a matrix.
pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

#[derive(Debug, Clone)]
pub struct GaussianDist {
    mean: DVector<f64>,
    cov: SpdMatrix,
}

impl GaussianDist {
    pub fn new(mean: DVector<f64>, cov: SpdMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::dim("GaussianDist mean", cov.dim(), mean.len()));
        }
        Ok(Self { mean, cov })
    }

    pub fn centered(cov: SpdMatrix) -> Self {
        Self {
            mean: DVector::zeros(cov.dim()),
            cov,
        }
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &SpdMatrix {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `mean + L z` with `z` drawn from `rng`; consumes exactly `dim` normals.
    pub fn sample(&self, rng: &mut RngStream) -> DVector<f64> {
        let z = rng.standard_normal_vector(self.dim());
        self.sample_with(&z)
    }

    /// `mean + L z` for a caller-supplied standard normal vector.
    pub fn sample_with(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.mean + self.cov.color(z)
    }

    /// `-½|x - mean|²_cov`, without the normalizing constant.
    pub fn log_unnorm_density(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::dim("log_unnorm_density", self.dim(), x.len()));
        }
        Ok(-0.5 * self.cov.weighted_norm_sq(&(x - &self.mean))?)
    }

    /// Normalized log-density.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.log_unnorm_density(x)? - self.log_normalizer())
    }

    /// `½(d·ln 2π + ln det cov)`.
    pub fn log_normalizer(&self) -> f64 {
        0.5 * (self.dim() as f64 * (2.0 * PI).ln() + self.cov.log_det())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn random_spd(rng: &mut RngStream, d: usize) -> SpdMatrix {
        let a = DMatrix::from_fn(d, d, |_, _| rng.standard_normal());
        SpdMatrix::new(&a * a.transpose() + DMatrix::identity(d, d) * 0.5).unwrap()
    }

    #[test]
    fn identity_weighting() {
        let a = SpdMatrix::identity(2);
        let x = DVector::from_vec(vec![3.0, 4.0]);
        assert_eq!(weighted_norm_sq(&a, &x).unwrap(), 25.0);
    }

    #[test]
    fn scalar_weighting() {
        let a = SpdMatrix::from_diagonal(&[4.0]).unwrap();
        let x = DVector::from_vec(vec![2.0]);
        assert!((a.weighted_norm_sq(&x).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn matches_explicit_inverse() {
        let mut rng = RngStream::from_seed(11);
        for _ in 0..50 {
            let a = random_spd(&mut rng, 3);
            let x = rng.standard_normal_vector(3);
            let inv = a.matrix().clone().try_inverse().unwrap();
            let oracle = (x.transpose() * inv * &x)[(0, 0)];
            let got = a.weighted_norm_sq(&x).unwrap();
            assert!((got - oracle).abs() <= 1e-10 * oracle.abs().max(1.0));
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = SpdMatrix::identity(2);
        let x = DVector::from_vec(vec![1.0]);
        assert!(matches!(
            a.weighted_norm_sq(&x),
            Err(Error::DimensionMismatch { .. })
        ));
        let g = GaussianDist::centered(a);
        assert!(g.log_unnorm_density(&x).is_err());
    }

    #[test]
    fn rejects_bad_matrices() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            SpdMatrix::new(asym),
            Err(Error::NotSymmetric { .. })
        ));
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            SpdMatrix::new(indef),
            Err(Error::NotPositiveDefinite)
        ));
        let near = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-15]);
        assert!(matches!(
            SpdMatrix::new(near),
            Err(Error::NearSingular { .. })
        ));
        // tiny float drift is symmetrized away
        let drift = DMatrix::from_row_slice(2, 2, &[2.0, 1.0 + 1e-15, 1.0, 2.0]);
        let s = SpdMatrix::new(drift).unwrap();
        assert_eq!(s.matrix()[(0, 1)], s.matrix()[(1, 0)]);
    }

    #[test]
    fn cholesky_reconstructs() {
        let mut rng = RngStream::from_seed(5);
        let a = random_spd(&mut rng, 6);
        let rec = a.chol() * a.chol().transpose();
        assert!((rec - a.matrix()).amax() <= 1e-10 * a.matrix().amax());
    }

    #[test]
    fn sample_mean_clt() {
        let g = GaussianDist::centered(SpdMatrix::identity(3));
        let mut rng = RngStream::from_seed(99);
        let n = 100_000;
        let mut acc = DVector::zeros(3);
        for _ in 0..n {
            acc += g.sample(&mut rng);
        }
        acc /= n as f64;
        let bound = 4.0 / (n as f64).sqrt();
        assert!(acc.iter().all(|m| m.abs() < bound), "{acc}");
    }

    #[test]
    fn degenerate_spread_returns_mean() {
        let mean = DVector::from_vec(vec![1.0, -2.0]);
        let g = GaussianDist::new(mean.clone(), SpdMatrix::scaled_identity(2, 1e-20)).unwrap();
        let mut rng = RngStream::from_seed(1);
        assert!((g.sample(&mut rng) - mean).amax() < 1e-9);
    }

    #[test]
    fn sampling_is_deterministic() {
        let mut rng = RngStream::from_seed(4);
        let g = GaussianDist::centered(random_spd(&mut rng, 4));
        let mut r1 = RngStream::from_seed(42);
        let mut r2 = r1.clone();
        let a = g.sample(&mut r1);
        let b = g.sample(&mut r2);
        assert!(a
            .iter()
            .zip(b.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn log_density_values() {
        let mean = DVector::from_vec(vec![0.3, 0.1]);
        let mut rng = RngStream::from_seed(8);
        let g = GaussianDist::new(mean.clone(), random_spd(&mut rng, 2)).unwrap();
        assert_eq!(g.log_unnorm_density(&mean).unwrap(), 0.0);

        let g1 = GaussianDist::centered(SpdMatrix::identity(1));
        let x = DVector::from_vec(vec![2.0]);
        assert_eq!(g1.log_unnorm_density(&x).unwrap(), -2.0);
        let expect = -2.0 - 0.5 * (2.0 * PI).ln();
        assert!((g1.log_density(&x).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn log_density_matches_triangular_oracle() {
        let mut rng = RngStream::from_seed(21);
        for d in [1, 3, 7] {
            let cov = random_spd(&mut rng, d);
            let mean = rng.standard_normal_vector(d);
            let x = rng.standard_normal_vector(d);
            let g = GaussianDist::new(mean.clone(), cov.clone()).unwrap();
            // independent factorization through nalgebra's own Cholesky
            let l = cov.matrix().clone().cholesky().unwrap();
            let w = l.l().solve_lower_triangular(&(&x - &mean)).unwrap();
            let oracle = -0.5 * w.norm_squared();
            let got = g.log_unnorm_density(&x).unwrap();
            assert!((got - oracle).abs() <= 1e-10 * oracle.abs().max(1.0));
        }
    }

    #[test]
    fn inverse_is_exact_enough() {
        let mut rng = RngStream::from_seed(2);
        let a = random_spd(&mut rng, 5);
        let prod = a.matrix() * a.inverse();
        assert!((prod - DMatrix::identity(5, 5)).amax() < 1e-10);
    }

    proptest! {
        #[test]
        fn norm_nonnegative_and_zero_only_at_origin(seed in any::<u64>(), d in 1usize..6) {
            let mut rng = RngStream::from_seed(seed);
            let a = random_spd(&mut rng, d);
            let x = rng.standard_normal_vector(d);
            let v = a.weighted_norm_sq(&x).unwrap();
            prop_assert!(v > 0.0);
            prop_assert_eq!(a.weighted_norm_sq(&DVector::zeros(d)).unwrap(), 0.0);
        }

        #[test]
        fn norm_scales_inversely(seed in any::<u64>(), d in 1usize..6, c in 1e-3f64..1e3) {
            let mut rng = RngStream::from_seed(seed);
            let a = random_spd(&mut rng, d);
            let x = rng.standard_normal_vector(d);
            let base = a.weighted_norm_sq(&x).unwrap();
            let scaled = a.scaled(c).unwrap().weighted_norm_sq(&x).unwrap();
            prop_assert!((scaled - base / c).abs() <= 1e-10 * (base / c).abs().max(1e-300));
        }
    }
}
