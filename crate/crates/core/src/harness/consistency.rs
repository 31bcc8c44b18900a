//! Convergence in the particle count: filter means and dictionary distances
//! against the exact filter (or a large bootstrap reference), swept over N.

use nalgebra::DVector;
use rayon::prelude::*;

use super::config::{derive_seed, parse_variants, ConsistencyConfig, ReferenceMode};
use super::report::{Check, ExperimentReport, Fit, Row};
use crate::error::{Error, Result};
use crate::filters::{run_filter, FilterRun, InitialDistribution, Variant};
use crate::gain::{compute_structures, GaussianStructures};
use crate::gaussian::GaussianDist;
use crate::metrics::{estimate_d_from_expectations, fit_rate, Reference, TestFunctionDictionary};
use crate::model::{operator_norm, ModelSpec, TruthRun};
use crate::rng::{Purpose, RngStream};

const EXPERIMENT: &str = "consistency";
const TAG: u64 = 2;
/// Cells of the quadrature used to validate the exact recursion.
pub const GRID_POINTS: usize = 4096;
const GRID_TOLERANCE: f64 = 1e-4;

/// Posterior means of a scalar linear model by brute-force quadrature of the
/// prediction and Bayes update on `points` midpoint cells.
pub fn grid_filter_means(
    model: &ModelSpec,
    prior: &GaussianDist,
    ys: &[f64],
    points: usize,
) -> Result<Vec<f64>> {
    let a = match model.map().linear_matrix() {
        Some(a) if a.nrows() == 1 && model.obs_dim() == 1 => a[(0, 0)],
        _ => return Err(Error::NonLinearOracle),
    };
    let h = model.h()[(0, 0)];
    let q = model.sigma_cov()?.matrix()[(0, 0)];
    let r = model.gamma_cov()?.matrix()[(0, 0)];
    let (m0, p0) = (prior.mean()[0], prior.cov().matrix()[(0, 0)]);

    // wide enough for the prior, the data and the accumulated signal noise
    let reach = ys
        .iter()
        .map(|y| (y / h.abs().max(1e-3)).abs())
        .fold(m0.abs(), f64::max);
    let spread = p0.sqrt().max((q * ys.len() as f64).sqrt()).max(r.sqrt());
    let (lo, hi) = (-reach - 12.0 * spread, reach + 12.0 * spread);
    let dx = (hi - lo) / points as f64;
    let x: Vec<f64> = (0..points).map(|i| lo + (i as f64 + 0.5) * dx).collect();
    let kernel = |d: f64, var: f64| (-0.5 * d * d / var).exp();
    let normalize = |p: &mut Vec<f64>| {
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= z);
    };
    let mean = |p: &[f64]| x.iter().zip(p).map(|(x, p)| x * p).sum::<f64>();

    let mut p: Vec<f64> = x.iter().map(|&xi| kernel(xi - m0, p0)).collect();
    normalize(&mut p);
    let mut means = vec![mean(&p)];
    for &y in ys {
        let pred: Vec<f64> = x
            .par_iter()
            .map(|&xi| {
                x.iter()
                    .zip(&p)
                    .map(|(&xj, &pj)| pj * kernel(xi - a * xj, q))
                    .sum()
            })
            .collect();
        p = pred
            .iter()
            .zip(&x)
            .map(|(v, &xi)| v * kernel(y - h * xi, r))
            .collect();
        normalize(&mut p);
        means.push(mean(&p));
    }
    Ok(means)
}

/// Per-step mean and dictionary expectations of the reference filter.
struct ReferenceTrack {
    means: Vec<DVector<f64>>,
    expectations: Vec<Vec<f64>>,
}

fn gaussian_expectations(
    dist: &GaussianDist,
    dict: &TestFunctionDictionary,
    samples: usize,
    seed: u64,
    k: usize,
) -> Result<Vec<f64>> {
    if dist.dim() == 1 {
        let sd = dist.cov().matrix()[(0, 0)].sqrt();
        return dict.scalar_gaussian_expectations(dist.mean()[0], sd);
    }
    let mut rng = RngStream::for_purpose(seed, Purpose::Reference, &[k as u64]);
    let w = 1.0 / samples as f64;
    let mut acc = vec![0.0; dict.len()];
    for _ in 0..samples {
        let x = dist.sample(&mut rng);
        for (i, a) in acc.iter_mut().enumerate() {
            *a += w * dict.eval(i, &x);
        }
    }
    Ok(acc)
}

fn reference_track(
    cfg: &ConsistencyConfig,
    model: &ModelSpec,
    g: &GaussianStructures,
    truth: &TruthRun,
    init: &InitialDistribution,
    dict: &TestFunctionDictionary,
    seed: u64,
) -> Result<ReferenceTrack> {
    match cfg.reference {
        ReferenceMode::Kalman => {
            let run = run_filter(Variant::KalmanOracle, model, g, truth, 1, seed, init)?;
            let expectations = run
                .beliefs
                .par_iter()
                .enumerate()
                .map(|(k, b)| {
                    let dist = GaussianDist::new(b.mean.clone(), b.cov.clone())?;
                    gaussian_expectations(&dist, dict, cfg.reference_samples, seed, k)
                })
                .collect::<Result<_>>()?;
            Ok(ReferenceTrack {
                means: run.beliefs.iter().map(|b| b.mean.clone()).collect(),
                expectations,
            })
        }
        ReferenceMode::BpfSelf => {
            let n_ref = cfg.reference_factor * cfg.particles.iter().max().copied().unwrap_or(1);
            let run = run_filter(Variant::Bpf, model, g, truth, n_ref, seed, init)?;
            let expectations = (0..=run.steps())
                .map(|k| match &run.weighted[k] {
                    Some(w) => dict.expectations(w),
                    None => dict.expectations(&run.ensembles[k]),
                })
                .collect::<Result<_>>()?;
            Ok(ReferenceTrack {
                means: run.estimates(),
                expectations,
            })
        }
    }
}

/// What one replicate contributes.
struct ReplicateOutcome {
    seed: u64,
    sq_errors: Vec<f64>,
    expectations: Vec<Vec<f64>>,
    kappa: Option<KappaAudit>,
}

/// Bound check for the unnormalized optimal-proposal weights
/// `w = exp(−½|y − Hψ(u)|²_S)` against `[κ, κ⁻¹]` with
/// `log κ⁻¹ = max_j |y_j|² + sup_v |Hψ(v)|²_S`.
#[derive(Debug, Clone, Copy)]
pub struct KappaAudit {
    pub log_kappa_inv: f64,
    pub min_log_weight: f64,
    pub max_log_weight: f64,
    pub weights: usize,
    pub violations: usize,
}

/// `sup_v |Hψ(v)|²_S` from the map's declared bound, or over the supplied
/// particles when the map is unbounded.
fn sup_predicted_obs_sq(model: &ModelSpec, g: &GaussianStructures, run: &FilterRun) -> Result<f64> {
    if let Some(b) = model.map().psi_bound() {
        // |Hψ|²_S ≤ λ_max(HᵀS⁻¹H) |ψ|²
        let ht_sinv_h = model.h().transpose() * g.s.solve(model.h())?;
        return Ok(operator_norm(&ht_sinv_h) * b * b);
    }
    let mut sup = 0.0_f64;
    for ens in &run.ensembles[..run.ensembles.len().saturating_sub(1)] {
        for u in &ens.particles {
            sup = sup.max(g.s.weighted_norm_sq(&(model.h() * model.psi(u)))?);
        }
    }
    Ok(sup)
}

pub fn kappa_audit(
    model: &ModelSpec,
    g: &GaussianStructures,
    truth: &TruthRun,
    run: &FilterRun,
) -> Result<KappaAudit> {
    let max_y = truth
        .y_dagger
        .iter()
        .map(|y| y.norm_squared())
        .fold(0.0, f64::max);
    let log_kappa_inv = max_y + sup_predicted_obs_sq(model, g, run)?;
    let mut audit = KappaAudit {
        log_kappa_inv,
        min_log_weight: f64::INFINITY,
        max_log_weight: f64::NEG_INFINITY,
        weights: 0,
        violations: 0,
    };
    for w in run.weighted.iter().flatten() {
        for &lw in &w.weights.log_unnorm {
            audit.weights += 1;
            audit.min_log_weight = audit.min_log_weight.min(lw);
            audit.max_log_weight = audit.max_log_weight.max(lw);
            if !(lw >= -log_kappa_inv && lw <= log_kappa_inv) {
                audit.violations += 1;
            }
        }
    }
    Ok(audit)
}

#[allow(clippy::too_many_arguments)]
fn replicate(
    variant: Variant,
    model: &ModelSpec,
    g: &GaussianStructures,
    truth: &TruthRun,
    init: &InitialDistribution,
    reference: &ReferenceTrack,
    dict: &TestFunctionDictionary,
    n: usize,
    seed: u64,
) -> Result<ReplicateOutcome> {
    let run = run_filter(variant, model, g, truth, n, seed, init)?;
    let sq_errors = (0..=run.steps())
        .map(|k| (run.estimate(k) - &reference.means[k]).norm_squared())
        .collect();
    let expectations = run
        .ensembles
        .iter()
        .map(|e| dict.expectations(e))
        .collect::<Result<_>>()?;
    let kappa = if variant == Variant::Opf {
        Some(kappa_audit(model, g, truth, &run)?)
    } else {
        None
    };
    Ok(ReplicateOutcome {
        seed,
        sq_errors,
        expectations,
        kappa,
    })
}

pub fn run_consistency(cfg: &ConsistencyConfig, master: u64) -> Result<ExperimentReport> {
    let model = cfg.model.build()?;
    if cfg.reference == ReferenceMode::Kalman && !model.map().is_linear() {
        return Err(Error::Config(
            "the Kalman reference requires a linear map; use reference = \"bpf_self\" for bounded maps".into(),
        ));
    }
    let g = compute_structures(&model)?;
    let variants = parse_variants(&cfg.variants)?;
    let init = cfg.init.build()?;
    let (sigma_star, gamma_star) = cfg.truth.covariances(&model)?;
    let u0 = DVector::from_column_slice(&cfg.truth.u0);
    let dict_seed = derive_seed(master, &[TAG, 9]);
    let dict = TestFunctionDictionary::new(model.state_dim(), dict_seed);

    let mut report = ExperimentReport::new(EXPERIMENT);
    report.seeds.push(dict_seed);
    let mut total_violations = 0usize;
    let mut audited = 0usize;
    let grid_prior = match &init {
        InitialDistribution::Gaussian(prior)
            if cfg.reference == ReferenceMode::Kalman
                && model.state_dim() == 1
                && model.obs_dim() == 1 =>
        {
            Some(prior)
        }
        _ => None,
    };
    let mut grid_worst: Option<f64> = None;

    for (t_idx, &t) in cfg.truth.seeds.iter().enumerate() {
        let truth_seed = derive_seed(master, &[TAG, 0, t]);
        let truth = TruthRun::generate(
            &model,
            cfg.truth.steps,
            &u0,
            &sigma_star,
            &gamma_star,
            truth_seed,
        )?;
        let ref_seed = derive_seed(master, &[TAG, 2, t]);
        let reference = reference_track(cfg, &model, &g, &truth, &init, &dict, ref_seed)?;
        report.seeds.extend([truth_seed, ref_seed]);
        if let Some(prior) = grid_prior {
            let ys: Vec<f64> = truth.y_dagger.iter().map(|y| y[0]).collect();
            let grid = grid_filter_means(&model, prior, &ys, GRID_POINTS)?;
            let diff = grid
                .iter()
                .zip(&reference.means)
                .map(|(g, m)| (g - m[0]).abs())
                .fold(0.0, f64::max);
            report.rows.push(
                Row::new(EXPERIMENT, "kalman", "grid_max_mean_difference", diff).seed(truth_seed),
            );
            grid_worst = Some(grid_worst.map_or(diff, |w: f64| w.max(diff)));
        }

        for &variant in &variants {
            let mut terminal = Vec::with_capacity(cfg.particles.len());
            for &n in &cfg.particles {
                let outcomes: Vec<ReplicateOutcome> = (0..cfg.replicates as u64)
                    .into_par_iter()
                    .map(|r| {
                        let seed = derive_seed(master, &[TAG, 1, t, n as u64, r]);
                        replicate(
                            variant, &model, &g, &truth, &init, &reference, &dict, n, seed,
                        )
                    })
                    .collect::<Result<_>>()?;
                let name = variant.name();
                let reps = outcomes.len() as f64;
                let steps = cfg.truth.steps;
                for k in 0..=steps {
                    let rmse = (outcomes.iter().map(|o| o.sq_errors[k]).sum::<f64>() / reps).sqrt();
                    let exps: Vec<Vec<f64>> =
                        outcomes.iter().map(|o| o.expectations[k].clone()).collect();
                    let d = estimate_d_from_expectations(
                        &exps,
                        Reference::Fixed(&reference.expectations[k]),
                    )?;
                    let row = |metric: &str, v: f64| {
                        let mut row = Row::new(EXPERIMENT, name, metric, v).n(n).k(k);
                        if cfg.truth.seeds.len() > 1 {
                            row = row.seed(truth_seed);
                        }
                        row
                    };
                    report.rows.push(row("mean_error_rmse", rmse));
                    report.rows.push(row("estimate_d", d));
                    if k == steps {
                        terminal.push((n as f64, rmse));
                    }
                }
                for o in &outcomes {
                    report.seeds.push(o.seed);
                    report.rows.push(
                        Row::new(EXPERIMENT, name, "terminal_sq_error", o.sq_errors[steps])
                            .n(n)
                            .seed(o.seed),
                    );
                    if let Some(a) = o.kappa {
                        for (metric, v) in [
                            ("kappa_log_inv", a.log_kappa_inv),
                            ("min_log_weight", a.min_log_weight),
                            ("max_log_weight", a.max_log_weight),
                            ("kappa_violations", a.violations as f64),
                        ] {
                            report
                                .rows
                                .push(Row::new(EXPERIMENT, name, metric, v).n(n).seed(o.seed));
                        }
                        total_violations += a.violations;
                        audited += a.weights;
                    }
                }
            }
            if terminal.len() >= 3 {
                let fit = fit_rate(&terminal, true)?;
                let label = if t_idx == 0 {
                    format!("{}_terminal_error_vs_n", variant.name())
                } else {
                    format!("{}_terminal_error_vs_n_truth{t}", variant.name())
                };
                report.checks.push(Check::within(
                    &label,
                    fit.slope,
                    Some(cfg.slope_min),
                    Some(cfg.slope_max),
                ));
                report.fits.push(Fit::new(&label, &fit));
            } else {
                report.warnings.push(format!(
                    "{}: fewer than 3 particle counts, no slope fitted",
                    variant.name()
                ));
            }
        }
    }
    if let Some(worst) = grid_worst {
        report.checks.push(Check::below(
            "kalman_oracle_matches_grid",
            worst,
            GRID_TOLERANCE,
        ));
    }
    if audited > 0 {
        report.rows.push(Row::new(
            EXPERIMENT,
            "opf",
            "kappa_audited_weights",
            audited as f64,
        ));
        report.checks.push(Check::flag(
            "kappa_bound_all_weights",
            total_violations == 0,
        ));
    }
    report.sort();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{InitConfig, MapConfig, ModelConfig};

    fn small() -> ConsistencyConfig {
        ConsistencyConfig {
            particles: vec![20, 80, 320],
            replicates: 30,
            truth: crate::harness::config::TruthConfig::new(1, 4, vec![0]),
            ..ConsistencyConfig::default()
        }
    }

    #[test]
    fn grid_tracks_kalman_on_unstable_map() {
        use crate::gain::{kalman_oracle_step, GaussianBelief};
        use crate::gaussian::SpdMatrix;
        use crate::model::BuiltinMap;
        use nalgebra::DMatrix;

        let m = ModelSpec::new(
            BuiltinMap::linear(DMatrix::from_element(1, 1, 1.1)).unwrap(),
            DMatrix::from_element(1, 1, 0.5),
            SpdMatrix::identity(1),
            SpdMatrix::identity(1),
            0.7,
            0.4,
        )
        .unwrap();
        let prior = GaussianDist::new(
            DVector::from_element(1, 0.3),
            SpdMatrix::new(DMatrix::from_element(1, 1, 2.0)).unwrap(),
        )
        .unwrap();
        let ys = [0.4, -0.2, 1.3, 0.9, 2.0, 1.1];
        let grid = grid_filter_means(&m, &prior, &ys, 2048).unwrap();
        let mut b = GaussianBelief::new(prior.mean().clone(), prior.cov().clone()).unwrap();
        assert!((grid[0] - b.mean[0]).abs() < 1e-10);
        for (k, &y) in ys.iter().enumerate() {
            b = kalman_oracle_step(&m, &b, &DVector::from_element(1, y)).unwrap();
            assert!(
                (grid[k + 1] - b.mean[0]).abs() < 1e-8,
                "step {k}: {} vs {}",
                grid[k + 1],
                b.mean[0]
            );
        }
    }

    #[test]
    fn small_sweep_runs_and_audits_kappa() {
        let report = run_consistency(&small(), 5).unwrap();
        assert!(report.check("kappa_bound_all_weights").unwrap().pass);
        assert!(report.check("kalman_oracle_matches_grid").unwrap().pass);
        for v in ["bpf", "opf", "gopf"] {
            let fit = report.fit(&format!("{v}_terminal_error_vs_n")).unwrap();
            assert!(fit.slope < 0.0, "{v}: {}", fit.slope);
        }
    }

    #[test]
    fn nonlinear_map_requires_self_reference() {
        let mut cfg = small();
        cfg.model = ModelConfig {
            map: MapConfig::BoundedSine {
                amplitude: 1.0,
                mixing: vec![vec![1.0]],
            },
            ..ModelConfig::scalar_linear()
        };
        assert!(matches!(run_consistency(&cfg, 1), Err(Error::Config(_))));
        cfg.reference = ReferenceMode::BpfSelf;
        cfg.reference_factor = 10;
        cfg.init = InitConfig::standard(1);
        let report = run_consistency(&cfg, 1).unwrap();
        assert!(report.fit("opf_terminal_error_vs_n").is_some());
    }

    #[test]
    fn kappa_detects_violations() {
        let model = ModelConfig::scalar_linear().build().unwrap();
        let g = compute_structures(&model).unwrap();
        let truth = TruthRun::generate(
            &model,
            3,
            &DVector::zeros(1),
            model.sigma0(),
            model.gamma0(),
            1,
        )
        .unwrap();
        let init = InitialDistribution::Gaussian(GaussianDist::centered(
            crate::gaussian::SpdMatrix::identity(1),
        ));
        let mut run = run_filter(Variant::Opf, &model, &g, &truth, 10, 2, &init).unwrap();
        assert_eq!(kappa_audit(&model, &g, &truth, &run).unwrap().violations, 0);
        if let Some(w) = run.weighted[1].as_mut() {
            w.weights.log_unnorm[0] = -1e6;
        }
        assert_eq!(kappa_audit(&model, &g, &truth, &run).unwrap().violations, 1);
    }
}
