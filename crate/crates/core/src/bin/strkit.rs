// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use strkit::config::ExperimentConfig;
use strkit::harness::{self, Experiment};
use strkit::{Error, Result};

#[derive(Parser)]
#[command(
    name = "strkit",
    version,
    about = "Prompt ordering and emphasis experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; defaults to one per core.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate every (order, method, target) cell.
    Eval(Common),
    /// Score heads and select the steering set.
    Profile(Common),
    /// Split by closed-book knowledge and evaluate both sides.
    Partition(Common),
    /// Re-render a cells.csv as a table.
    Report {
        /// Config whose output_dir holds cells.csv.
        #[arg(long, required_unless_present = "csv")]
        config: Option<PathBuf>,
        /// Explicit cells.csv path.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Also write cells.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the configured model's weights to a file.
    InitWeights {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Eval(c) => {
            let exp = Experiment::from_path(&c.config)?;
            let cells =
                harness::with_threads(c.threads, || harness::cmd_eval(&exp, c.out.as_deref()))??;
            let rows: Vec<_> = cells
                .iter()
                .map(|x| harness::CellRow::from_cell(&exp.config.model_name, x))
                .collect();
            print!("{}", harness::render_cells_table(&rows));
        }
        Command::Profile(c) => {
            let exp = Experiment::from_path(&c.config)?;
            let report =
                harness::with_threads(c.threads, || harness::cmd_profile(&exp, c.out.as_deref()))??;
            for r in &report.runs {
                let heads: Vec<String> = r
                    .selection
                    .head_set
                    .iter()
                    .map(ToString::to_string)
                    .collect();
                println!(
                    "{} {}: k={} acc={:.4} heads=[{}]",
                    r.order,
                    r.target.short(),
                    r.selection.best_k,
                    r.selection.best_accuracy,
                    heads.join(" ")
                );
            }
        }
        Command::Partition(c) => {
            let exp = Experiment::from_path(&c.config)?;
            let out = harness::with_threads(c.threads, || {
                harness::cmd_partition(&exp, c.out.as_deref())
            })??;
            print!("{}", harness::render_knowledge_table(&out.rows));
        }
        Command::Report { config, csv, out } => {
            let path = match (csv, config) {
                (Some(p), _) => p,
                (None, Some(c)) => ExperimentConfig::load(c)?
                    .output_dir
                    .join(harness::CELLS_CSV),
                (None, None) => {
                    return Err(Error::ConfigValue("report needs --csv or --config".into()))
                }
            };
            print!("{}", harness::cmd_report(&path, out.as_deref())?);
        }
        Command::InitWeights { config, output } => {
            let exp = Experiment::from_path(&config)?;
            exp.model.save_weights(&output)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}
