//! Brute-force Bayes recursion on a uniform grid, for scalar linear models.
#![allow(dead_code)]

use std::f64::consts::PI;

/// `u' = a u + N(0, sigma_sq)`, `y = h u + N(0, gamma_sq)`.
#[derive(Debug, Clone, Copy)]
pub struct ScalarLinear {
    pub a: f64,
    pub h: f64,
    pub sigma_sq: f64,
    pub gamma_sq: f64,
}

fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean) * (x - mean) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}

/// Cell midpoints and masses of a density on `[lo, hi]`.
pub struct Grid {
    pub x: Vec<f64>,
    pub mass: Vec<f64>,
}

impl Grid {
    pub fn gaussian(mean: f64, var: f64, lo: f64, hi: f64, points: usize) -> Self {
        let dx = (hi - lo) / points as f64;
        let x: Vec<f64> = (0..points).map(|i| lo + (i as f64 + 0.5) * dx).collect();
        let mass = x.iter().map(|&xi| normal_pdf(xi, mean, var)).collect();
        let mut g = Self { x, mass };
        g.normalize();
        g
    }

    fn normalize(&mut self) {
        let total: f64 = self.mass.iter().sum();
        self.mass.iter_mut().for_each(|m| *m /= total);
    }

    pub fn mean(&self) -> f64 {
        self.x.iter().zip(&self.mass).map(|(x, m)| x * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.x
            .iter()
            .zip(&self.mass)
            .map(|(x, m)| (x - mu) * (x - mu) * m)
            .sum()
    }

    /// Chapman-Kolmogorov prediction followed by the Bayes update.
    pub fn assimilate(&mut self, model: &ScalarLinear, y: f64) {
        let pred: Vec<f64> = self
            .x
            .iter()
            .map(|&xi| {
                self.x
                    .iter()
                    .zip(&self.mass)
                    .map(|(&xj, &pj)| pj * normal_pdf(xi, model.a * xj, model.sigma_sq))
                    .sum::<f64>()
            })
            .collect();
        self.mass = pred
            .iter()
            .zip(&self.x)
            .map(|(q, &xi)| q * normal_pdf(y, model.h * xi, model.gamma_sq))
            .collect();
        self.normalize();
    }
}

/// Posterior means `k = 0..=ys.len()` from the grid recursion.
pub fn grid_posterior_means(
    model: &ScalarLinear,
    prior_mean: f64,
    prior_var: f64,
    ys: &[f64],
    (lo, hi): (f64, f64),
    points: usize,
) -> Vec<f64> {
    let mut grid = Grid::gaussian(prior_mean, prior_var, lo, hi, points);
    let mut means = vec![grid.mean()];
    for &y in ys {
        grid.assimilate(model, y);
        means.push(grid.mean());
    }
    means
}
