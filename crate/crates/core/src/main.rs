use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use digitfuse::codes::CodeKind;
use digitfuse::harness::{self, ExperimentConfig};
use digitfuse::Result;

/// Train and evaluate ensembles of digit classifiers.
#[derive(Parser)]
#[command(name = "digitfuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured train/evaluate cycle and write a report.
    Run {
        config: PathBuf,
        /// Override the configured output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Grid-search the hyperparameters of one tree on validation data.
    Grid {
        config: PathBuf,
        #[arg(long)]
        tree: String,
    },
    /// Render misclassified test digits of a finished run.
    Report {
        run_dir: PathBuf,
        /// Which run's decision log to use.
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
    /// Print a code matrix as CSV.
    InspectCode {
        kind: Kind,
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Ova,
    Ovo,
    Ecoc,
}

const WORKERS_ENV: &str = "DIGITFUSE_WORKERS";

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, output } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(o) = output {
                cfg.output_dir = o;
            }
            let report = harness::run_experiment(&cfg)?;
            for e in &report.entries {
                println!("{:<16} {:.3} +- {:.3} % over {} runs", e.name, e.mean, e.std_dev, e.errors.len());
            }
            println!("report: {}", cfg.output_dir.join(harness::REPORT_FILE).display());
        }
        Command::Grid { config, tree } => {
            let cfg = ExperimentConfig::load(&config)?;
            let result = harness::grid_search(&cfg, &tree)?;
            for (i, row) in result.rows.iter().enumerate() {
                let marker = if i == result.best { "*" } else { " " };
                let point: Vec<String> = row.point.iter().map(|(k, v)| format!("{k}={v}")).collect();
                println!("{marker} {:<40} {:.4}", point.join(" "), row.accuracy);
            }
            if result.tie {
                println!("(tie on the best accuracy; first lattice point kept)");
            }
            for (axis, s) in &result.saturation {
                if let Some(s) = s {
                    println!("{axis}: {}", if *s { "saturated" } else { "not saturated" });
                }
            }
        }
        Command::Report { run_dir, run } => {
            let (sheet, csv) = harness::report_run(&run_dir, run)?;
            println!("{}\n{}", sheet.display(), csv.display());
        }
        Command::InspectCode { kind, classes } => {
            let kind = match kind {
                Kind::Ova => CodeKind::Ova,
                Kind::Ovo => CodeKind::Ovo,
                Kind::Ecoc => CodeKind::Ecoc,
            };
            print!("{}", kind.matrix(classes)?.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        // ignore failure: the pool may already exist
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
