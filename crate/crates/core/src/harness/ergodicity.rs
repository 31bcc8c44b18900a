//! Forgetting of the initial condition: paired filters started from two
//! Dirac masses, driven by the same data and the same draws.

use nalgebra::DVector;
use rayon::prelude::*;

use super::config::{derive_seed, parse_variants, ErgodicityConfig};
use super::report::{Check, ExperimentReport, Fit, Row};
use crate::error::Result;
use crate::filters::{run_filter, Ensemble, InitialDistribution, Variant};
use crate::gain::compute_structures;
use crate::metrics::{coupling_discrepancy, estimate_d, fit_rate, TestFunctionDictionary};
use crate::model::TruthRun;

const EXPERIMENT: &str = "ergodicity";
const TAG: u64 = 4;
/// Discrepancies below this many ulps of the state magnitude are roundoff
/// and carry no rate information.
pub const RESOLUTION_ULPS: f64 = 1e3;

/// Fraction of consecutive pairs in `values[from..]` that do not increase.
pub fn monotone_fraction(values: &[f64], from: usize) -> f64 {
    let window: Vec<&[f64]> = values[from.min(values.len())..].windows(2).collect();
    if window.is_empty() {
        return 1.0;
    }
    window.iter().filter(|w| w[1] <= w[0]).count() as f64 / window.len() as f64
}

struct PairOutcome {
    seed: u64,
    discrepancy: Vec<f64>,
    a: Vec<Ensemble>,
    b: Vec<Ensemble>,
}

impl PairOutcome {
    /// Whether the discrepancy at step `k` is above roundoff.
    fn resolved(&self, k: usize) -> bool {
        let scale = self.a[k]
            .particles
            .iter()
            .chain(&self.b[k].particles)
            .map(|p| p.amax())
            .fold(1.0, f64::max);
        self.discrepancy[k] > RESOLUTION_ULPS * f64::EPSILON * scale
    }
}

pub fn run_ergodicity(cfg: &ErgodicityConfig, master: u64) -> Result<ExperimentReport> {
    let model = cfg.model.build()?;
    let g = compute_structures(&model)?;
    let variants = parse_variants(&cfg.variants)?;
    let (sigma_star, gamma_star) = cfg.truth.covariances(&model)?;
    let u0 = DVector::from_column_slice(&cfg.truth.u0);
    let za = InitialDistribution::Dirac(DVector::from_column_slice(&cfg.z0));
    let zb = InitialDistribution::Dirac(DVector::from_column_slice(&cfg.z0_prime));
    let steps = cfg.truth.steps;
    let alpha = model.map().contraction_certificate(&g.i_minus_kh);
    let dict_seed = derive_seed(master, &[TAG, 9]);
    let dict = TestFunctionDictionary::new(model.state_dim(), dict_seed);

    let mut report = ExperimentReport::new(EXPERIMENT);
    report.seeds.push(dict_seed);
    report.rows.push(Row::new(
        EXPERIMENT,
        "model",
        "contraction_certificate",
        alpha,
    ));
    let separation = (za.mean() - zb.mean()).norm();
    report.rows.push(Row::new(
        EXPERIMENT,
        "model",
        "initial_separation",
        separation,
    ));
    if separation == 0.0 {
        report
            .warnings
            .push("identical initializations: the discrepancy is identically zero".into());
    }

    let truths: Vec<(u64, TruthRun)> = cfg
        .truth
        .seeds
        .par_iter()
        .map(|&t| {
            let s = derive_seed(master, &[TAG, 0, t]);
            Ok((
                s,
                TruthRun::generate(&model, steps, &u0, &sigma_star, &gamma_star, s)?,
            ))
        })
        .collect::<Result<_>>()?;
    report.seeds.extend(truths.iter().map(|t| t.0));

    for &variant in &variants {
        let name = variant.name();
        let n = if variant == Variant::ThreeDVar {
            1
        } else {
            cfg.particles
        };
        let pairs: Vec<PairOutcome> = cfg
            .truth
            .seeds
            .par_iter()
            .zip(&truths)
            .map(|(&t, (_, truth))| {
                let seed = derive_seed(master, &[TAG, 1, t]);
                let a = run_filter(variant, &model, &g, truth, n, seed, &za)?;
                let b = run_filter(variant, &model, &g, truth, n, seed, &zb)?;
                let discrepancy = a
                    .ensembles
                    .iter()
                    .zip(&b.ensembles)
                    .map(|(x, y)| coupling_discrepancy(x, y))
                    .collect::<Result<_>>()?;
                Ok(PairOutcome {
                    seed,
                    discrepancy,
                    a: a.ensembles,
                    b: b.ensembles,
                })
            })
            .collect::<Result<_>>()?;

        for p in &pairs {
            report.seeds.push(p.seed);
            report.rows.push(
                Row::new(
                    EXPERIMENT,
                    name,
                    "terminal_discrepancy",
                    p.discrepancy[steps],
                )
                .n(n)
                .seed(p.seed),
            );
        }

        // resolvable window: every pair still above roundoff
        let end = (0..=steps)
            .find(|&k| pairs.iter().any(|p| !p.resolved(k)))
            .unwrap_or(steps + 1);
        report
            .rows
            .push(Row::new(EXPERIMENT, name, "resolvable_steps", end as f64).n(n));
        if end <= steps && separation > 0.0 {
            report.warnings.push(format!(
                "{name}: a pair reached roundoff at step {end}; rates use steps 0..{end}"
            ));
        }

        // geometric mean over pairs of the per-pair discrepancy
        let reps = pairs.len() as f64;
        let log_mean: Vec<f64> = (0..=steps)
            .map(|k| pairs.iter().map(|p| p.discrepancy[k].ln()).sum::<f64>() / reps)
            .collect();
        let d_est: Vec<f64> = (0..=steps)
            .into_par_iter()
            .map(|k| {
                let a: Vec<&Ensemble> = pairs.iter().map(|p| &p.a[k]).collect();
                let b: Vec<&Ensemble> = pairs.iter().map(|p| &p.b[k]).collect();
                estimate_d(&a, &b, &dict)
            })
            .collect::<Result<_>>()?;
        for k in 0..=steps {
            report.rows.push(
                Row::new(EXPERIMENT, name, "log_mean_discrepancy", log_mean[k])
                    .n(n)
                    .k(k),
            );
            report
                .rows
                .push(Row::new(EXPERIMENT, name, "estimate_d", d_est[k]).n(n).k(k));
        }

        let samples: Vec<(f64, f64)> = log_mean[..end]
            .iter()
            .enumerate()
            .map(|(k, &v)| (k as f64, v))
            .collect();
        if samples.len() >= 3 {
            let fit = fit_rate(&samples, false)?;
            let rate = fit.slope.exp();
            let label = format!("{name}_discrepancy_decay");
            report
                .rows
                .push(Row::new(EXPERIMENT, name, "fitted_rate", rate).n(n));
            report
                .rows
                .push(Row::new(EXPERIMENT, name, "fitted_r_squared", fit.r_squared).n(n));
            report
                .checks
                .push(Check::below(&format!("{name}_rate"), rate, cfg.rate_max));
            report.checks.push(Check::within(
                &format!("{name}_r_squared"),
                fit.r_squared,
                Some(cfg.r_squared_min),
                None,
            ));
            report.fits.push(Fit::new(&label, &fit));
        } else {
            report.warnings.push(format!(
                "{name}: discrepancy vanished, no decay rate fitted"
            ));
        }

        let mono = monotone_fraction(&d_est[..end], cfg.monotone_from);
        report
            .rows
            .push(Row::new(EXPERIMENT, name, "estimate_d_monotone_fraction", mono).n(n));
        report.checks.push(Check::within(
            &format!("{name}_estimate_d_monotone"),
            mono,
            Some(cfg.monotone_fraction),
            None,
        ));

        if variant == Variant::ThreeDVar {
            // per-step contraction factor of each pair, worst case over pairs
            let worst = pairs
                .iter()
                .flat_map(|p| p.discrepancy[..end].windows(2).map(|w| w[1] / w[0]))
                .fold(0.0, f64::max);
            report
                .rows
                .push(Row::new(EXPERIMENT, name, "max_step_factor", worst).n(n));
            report.checks.push(Check::within(
                "threedvar_step_factor",
                worst,
                None,
                Some(alpha + 0.05),
            ));
        }
    }
    report.sort();
    Ok(report)
}
