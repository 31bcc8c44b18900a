//! Small-noise accuracy: long-run particle error against the truth as the
//! observation noise shrinks at a fixed signal-to-noise ratio.

use nalgebra::DVector;
use rayon::prelude::*;

use super::config::{derive_seed, parse_variants, AccuracyConfig};
use super::report::{Check, ExperimentReport, Fit, Row};
use crate::error::{Error, Result};
use crate::filters::run_filter;
use crate::gain::compute_structures;
use crate::metrics::{fit_rate, max_particle_error};
use crate::model::TruthRun;

const EXPERIMENT: &str = "accuracy";
const TAG: u64 = 3;

pub fn run_accuracy(cfg: &AccuracyConfig, master: u64) -> Result<ExperimentReport> {
    let base = cfg.model.build()?;
    let variants = parse_variants(&cfg.variants)?;
    let init = cfg.init.build()?;
    let (sigma_star, gamma_star) = cfg.truth.covariances(&base)?;
    let u0 = DVector::from_column_slice(&cfg.truth.u0);
    let steps = cfg.truth.steps;
    let burn = ((steps as f64) * cfg.burn_in_fraction).floor() as usize;

    let mut report = ExperimentReport::new(EXPERIMENT);
    let truth_seeds: Vec<u64> = cfg
        .truth
        .seeds
        .iter()
        .map(|&t| derive_seed(master, &[TAG, 0, t]))
        .collect();
    report.seeds.extend(&truth_seeds);

    let mut per_variant: Vec<Vec<(f64, f64)>> = vec![Vec::new(); variants.len()];
    for &gamma in &cfg.gammas {
        let model = base.rescaled_gamma(gamma)?;
        let g = compute_structures(&model)?;
        let alpha = model.map().contraction_certificate(&g.i_minus_kh);
        if alpha >= 1.0 {
            return Err(Error::Config(format!(
                "accuracy model is not certified contractive: alpha = {alpha} at gamma = {gamma}"
            )));
        }
        report
            .rows
            .push(Row::new(EXPERIMENT, "model", "contraction_certificate", alpha).gamma(gamma));

        let jobs: Vec<(usize, usize)> = (0..truth_seeds.len())
            .flat_map(|t| (0..cfg.filter_seeds.len()).map(move |f| (t, f)))
            .collect();
        let truths: Vec<TruthRun> = truth_seeds
            .par_iter()
            .map(|&s| TruthRun::generate(&model, steps, &u0, &sigma_star, &gamma_star, s))
            .collect::<Result<_>>()?;

        for (v_idx, &variant) in variants.iter().enumerate() {
            // (truth index, filter seed, time-averaged max particle error)
            let errors: Vec<(usize, u64, f64)> = jobs
                .par_iter()
                .map(|&(t, f)| {
                    let seed =
                        derive_seed(master, &[TAG, 1, cfg.truth.seeds[t], cfg.filter_seeds[f]]);
                    let run =
                        run_filter(variant, &model, &g, &truths[t], cfg.particles, seed, &init)?;
                    let window = &run.ensembles[burn + 1..];
                    let total = window
                        .iter()
                        .zip(&truths[t].u_dagger[burn + 1..])
                        .map(|(e, u)| max_particle_error(e, u))
                        .sum::<Result<f64>>()?;
                    Ok((t, seed, total / window.len() as f64))
                })
                .collect::<Result<_>>()?;

            let name = variant.name();
            for &(_, seed, e) in &errors {
                report.seeds.push(seed);
                report.rows.push(
                    Row::new(EXPERIMENT, name, "time_avg_max_sq_error", e)
                        .n(cfg.particles)
                        .gamma(gamma)
                        .seed(seed),
                );
            }
            // conditional on each fixed data set, averaged over filter seeds
            for (t, &ts) in truth_seeds.iter().enumerate() {
                let mine: Vec<f64> = errors.iter().filter(|x| x.0 == t).map(|x| x.2).collect();
                let mean = mine.iter().sum::<f64>() / mine.len() as f64;
                report.rows.push(
                    Row::new(EXPERIMENT, name, "fixed_data_mean_error", mean)
                        .n(cfg.particles)
                        .gamma(gamma)
                        .seed(ts),
                );
            }
            let mean = errors.iter().map(|x| x.2).sum::<f64>() / errors.len() as f64;
            report.rows.push(
                Row::new(EXPERIMENT, name, "mean_time_avg_max_sq_error", mean)
                    .n(cfg.particles)
                    .gamma(gamma),
            );
            per_variant[v_idx].push((gamma * gamma, mean));
        }
    }

    for (variant, samples) in variants.iter().zip(&per_variant) {
        let label = format!("{}_error_vs_gamma_sq", variant.name());
        if samples.len() < 3 {
            report
                .warnings
                .push(format!("{label}: fewer than 3 gammas, no slope fitted"));
            continue;
        }
        let fit = fit_rate(samples, true)?;
        report.checks.push(Check::within(
            &label,
            fit.slope,
            Some(cfg.slope_min),
            Some(cfg.slope_max),
        ));
        report.fits.push(Fit::new(&label, &fit));
    }
    report.sort();
    Ok(report)
}
