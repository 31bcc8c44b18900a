//! Experiment records and their CSV / JSON serialization.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use super::config::SuiteConfig;
use crate::error::{Error, Result};
use crate::metrics::RateFit;

pub const CSV_HEADER: [&str; 8] = [
    "experiment",
    "variant",
    "N",
    "gamma",
    "k",
    "seed",
    "metric",
    "value",
];

/// One record. Absent keys are written as empty CSV fields.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub experiment: String,
    pub variant: String,
    pub n: Option<usize>,
    pub gamma: Option<f64>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub metric: String,
    pub value: f64,
}

impl Row {
    pub fn new(experiment: &str, variant: &str, metric: &str, value: f64) -> Self {
        Self {
            experiment: experiment.into(),
            variant: variant.into(),
            n: None,
            gamma: None,
            k: None,
            seed: None,
            metric: metric.into(),
            value,
        }
    }

    pub fn n(mut self, n: usize) -> Self {
        self.n = Some(n);
        self
    }

    pub fn gamma(mut self, gamma: f64) -> Self {
        self.gamma = Some(gamma);
        self
    }

    pub fn k(mut self, k: usize) -> Self {
        self.k = Some(k);
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    fn key_cmp(&self, other: &Self) -> Ordering {
        fn opt<T: PartialOrd>(a: &Option<T>, b: &Option<T>) -> Ordering {
            match (a, b) {
                (None, None) => Ordering::Equal,
                (None, Some(_)) => Ordering::Less,
                (Some(_), None) => Ordering::Greater,
                (Some(x), Some(y)) => x.partial_cmp(y).unwrap_or(Ordering::Equal),
            }
        }
        self.experiment
            .cmp(&other.experiment)
            .then_with(|| self.variant.cmp(&other.variant))
            .then_with(|| opt(&self.n, &other.n))
            .then_with(|| opt(&self.gamma, &other.gamma))
            .then_with(|| opt(&self.k, &other.k))
            .then_with(|| opt(&self.seed, &other.seed))
            .then_with(|| self.metric.cmp(&other.metric))
            .then_with(|| self.value.total_cmp(&other.value))
    }

    fn fields(&self) -> [String; 8] {
        fn opt<T: ToString>(v: &Option<T>) -> String {
            v.as_ref().map(T::to_string).unwrap_or_default()
        }
        [
            self.experiment.clone(),
            self.variant.clone(),
            opt(&self.n),
            opt(&self.gamma),
            opt(&self.k),
            opt(&self.seed),
            self.metric.clone(),
            format_value(self.value),
        ]
    }
}

/// Shortest representation that reads back to the same `f64`.
fn format_value(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v:e}")
    }
}

/// A pass/fail assertion with the value that decided it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lower: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upper: Option<f64>,
    pub pass: bool,
}

impl Check {
    /// Passes when `lower <= value <= upper` for the bounds that are set.
    pub fn within(name: &str, value: f64, lower: Option<f64>, upper: Option<f64>) -> Self {
        let pass = value.is_finite()
            && lower.is_none_or(|l| value >= l)
            && upper.is_none_or(|u| value <= u);
        Self {
            name: name.into(),
            value,
            lower,
            upper,
            pass,
        }
    }

    /// Passes when `value < bound`.
    pub fn below(name: &str, value: f64, bound: f64) -> Self {
        let mut c = Self::within(name, value, None, Some(bound));
        c.pass = value < bound;
        c
    }

    pub fn flag(name: &str, ok: bool) -> Self {
        Self {
            name: name.into(),
            value: if ok { 1.0 } else { 0.0 },
            lower: Some(1.0),
            upper: None,
            pass: ok,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fit {
    pub name: String,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub samples: Vec<(f64, f64)>,
}

impl Fit {
    pub fn new(name: &str, fit: &RateFit) -> Self {
        Self {
            name: name.into(),
            slope: fit.slope,
            intercept: fit.intercept,
            r_squared: fit.r_squared,
            samples: fit.samples.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub rows: Vec<Row>,
    pub fits: Vec<Fit>,
    pub checks: Vec<Check>,
    pub seeds: Vec<u64>,
    pub warnings: Vec<String>,
}

impl ExperimentReport {
    pub fn new(experiment: &str) -> Self {
        Self {
            experiment: experiment.into(),
            ..Default::default()
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn fit(&self, name: &str) -> Option<&Fit> {
        self.fits.iter().find(|f| f.name == name)
    }

    pub fn sort(&mut self) {
        self.rows.sort_by(Row::key_cmp);
        self.seeds.sort_unstable();
        self.seeds.dedup();
    }
}

/// Paths written by [`emit`].
#[derive(Debug, Clone)]
pub struct EmittedFiles {
    pub csv: PathBuf,
    pub summary: PathBuf,
}

/// Writes `report.csv` (fixed header, rows in key order) and `summary.json`
/// into `out_dir`.
pub fn emit(
    reports: &[ExperimentReport],
    config: &SuiteConfig,
    out_dir: &Path,
) -> Result<EmittedFiles> {
    fs::create_dir_all(out_dir).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", out_dir.display()),
        ))
    })?;
    let csv_path = out_dir.join("report.csv");
    write_csv(reports, &csv_path)?;
    let summary_path = out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary(reports, config))?;
    fs::write(&summary_path, text + "\n")?;
    Ok(EmittedFiles {
        csv: csv_path,
        summary: summary_path,
    })
}

pub fn write_csv(reports: &[ExperimentReport], path: &Path) -> Result<()> {
    let mut rows: Vec<&Row> = reports.iter().flat_map(|r| r.rows.iter()).collect();
    rows.sort_by(|a, b| a.key_cmp(b));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for row in rows {
        w.write_record(row.fields())?;
    }
    w.flush()?;
    Ok(())
}

pub fn summary(reports: &[ExperimentReport], config: &SuiteConfig) -> Value {
    let experiments: serde_json::Map<String, Value> = reports
        .iter()
        .map(|r| {
            (
                r.experiment.clone(),
                json!({
                    "pass": r.passed(),
                    "fits": r.fits,
                    "checks": r.checks,
                    "seeds": r.seeds,
                    "warnings": r.warnings,
                    "rows": r.rows.len(),
                }),
            )
        })
        .collect();
    json!({
        "library_version": crate::VERSION,
        "config_hash": config.hash(),
        "master_seed": config.master_seed,
        "pass": reports.iter().all(ExperimentReport::passed),
        "experiments": experiments,
        "config": config,
    })
}
