//! Twin-experiment orchestration: configuration, the four experiments, and
//! report output.

pub mod accuracy;
pub mod config;
pub mod consistency;
pub mod ergodicity;
pub mod identities;
pub mod report;

pub use accuracy::run_accuracy;
pub use config::SuiteConfig;
pub use consistency::run_consistency;
pub use ergodicity::run_ergodicity;
pub use identities::run_identities;
pub use report::{emit, Check, EmittedFiles, ExperimentReport, Row};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Identities,
    Consistency,
    Accuracy,
    Ergodicity,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [
        Experiment::Identities,
        Experiment::Consistency,
        Experiment::Accuracy,
        Experiment::Ergodicity,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Identities => "identities",
            Experiment::Consistency => "consistency",
            Experiment::Accuracy => "accuracy",
            Experiment::Ergodicity => "ergodicity",
        }
    }

    pub fn run(&self, cfg: &SuiteConfig) -> Result<ExperimentReport> {
        let seed = cfg.master_seed;
        match self {
            Experiment::Identities => run_identities(&cfg.identities, seed),
            Experiment::Consistency => run_consistency(&cfg.consistency, seed),
            Experiment::Accuracy => run_accuracy(&cfg.accuracy, seed),
            Experiment::Ergodicity => run_ergodicity(&cfg.ergodicity, seed),
        }
    }
}

/// Runs the given experiments in order.
pub fn run_suite(cfg: &SuiteConfig, experiments: &[Experiment]) -> Result<Vec<ExperimentReport>> {
    experiments.iter().map(|e| e.run(cfg)).collect()
}
