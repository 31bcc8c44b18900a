use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use assimilate::harness::{emit, run_suite, Experiment, ExperimentReport, SuiteConfig};
use assimilate::Error;
use clap::{Parser, Subcommand};

/// Twin experiments for bootstrap, optimal and Gaussianized optimal
/// particle filters.
#[derive(Debug, Parser)]
#[command(name = "assimilate", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,

    /// TOML suite configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for report.csv and summary.json.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Exit nonzero when any asserted criterion fails.
    #[arg(long, global = true)]
    strict: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Verb {
    /// Gain algebra, kernel forms, scaling, form equivalence, SIR reductions, sampling bound.
    Identities,
    /// Error against the exact filter as the particle count grows.
    Consistency,
    /// Long-run error against the truth as the observation noise shrinks.
    Accuracy,
    /// Decay of the discrepancy between filters started from different points.
    Ergodicity,
    /// Every experiment above.
    All,
}

impl Verb {
    fn experiments(self) -> Vec<Experiment> {
        match self {
            Verb::Identities => vec![Experiment::Identities],
            Verb::Consistency => vec![Experiment::Consistency],
            Verb::Accuracy => vec![Experiment::Accuracy],
            Verb::Ergodicity => vec![Experiment::Ergodicity],
            Verb::All => Experiment::ALL.to_vec(),
        }
    }
}

const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn load_config(cli: &Cli) -> Result<SuiteConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => SuiteConfig::from_path(path)?,
        None => SuiteConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    Ok(cfg)
}

fn print_summary(reports: &[ExperimentReport]) {
    for r in reports {
        for w in &r.warnings {
            eprintln!("warning [{}]: {w}", r.experiment);
        }
        for c in &r.checks {
            let status = if c.pass { "PASS" } else { "FAIL" };
            let bounds = match (c.lower, c.upper) {
                (Some(l), Some(u)) => format!(" in [{l}, {u}]"),
                (Some(l), None) => format!(" >= {l}"),
                (None, Some(u)) => format!(" <= {u}"),
                (None, None) => String::new(),
            };
            println!(
                "{status} {}/{}: {:.6e}{bounds}",
                r.experiment, c.name, c.value
            );
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    let cfg = load_config(cli)?;
    let reports = run_suite(&cfg, &cli.verb.experiments())?;
    let files = emit(&reports, &cfg, &cli.out)
        .with_context(|| format!("writing to {}", cli.out.display()))?;
    print_summary(&reports);
    println!(
        "wrote {} and {}",
        files.csv.display(),
        files.summary.display()
    );
    Ok(reports.iter().all(ExperimentReport::passed))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: cannot configure {threads} threads: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) if cli.strict => ExitCode::from(EXIT_FAIL),
        Ok(false) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Config(_)) => ExitCode::from(EXIT_CONFIG),
                _ => ExitCode::from(EXIT_FAIL),
            }
        }
    }
}
