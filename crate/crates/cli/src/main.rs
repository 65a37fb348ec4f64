use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cxr_cli::config::ExperimentConfig;
use cxr_cli::error::{CliError, CliResult};
use cxr_cli::pipeline::{self, Run};
use cxr_cli::report::render_report;
use cxr_core::datasets::synthetic::{write_fixture, FixtureSpec};

#[derive(Parser)]
#[command(name = "cxrkit", version, about = "Chest X-ray abnormality detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load datasets, write the manifest and the per-seed splits.
    Ingest { config: PathBuf },
    /// Extract backbone features for every split image.
    Extract { config: PathBuf },
    /// Train one head per seed and backbone.
    Train { config: PathBuf },
    /// Metrics, ROC and operating points for a predictions CSV.
    Evaluate {
        predictions: PathBuf,
        #[arg(long, default_value = "evaluation")]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Average the pooled models and score every subset.
    Ensemble { config: PathBuf },
    /// Occlusion heat maps, overlays and histograms.
    Localize { config: PathBuf },
    /// Atlas segmentation and the CTR/SVM baseline.
    Rulebased { config: PathBuf },
    /// Tuberculosis run: full pipeline with a tuned ensemble threshold.
    Tb { config: PathBuf },
    /// Render figures from a result directory.
    Report { dir: PathBuf },
    /// Every enabled stage in order.
    All { config: PathBuf },
    /// Write a synthetic phantom dataset.
    Fixture {
        out: PathBuf,
        #[arg(long, default_value_t = 224)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        normals: usize,
        /// `tag:count`, repeatable.
        #[arg(long = "positives", default_value = "cardiomegaly:40")]
        positives: Vec<String>,
    },
    /// Print the default configuration.
    DefaultConfig,
}

fn open(config: &Path) -> CliResult<Run> {
    let config = ExperimentConfig::load(config).map_err(CliError::stage("config"))?;
    Run::open(config)
}

fn staged(config: &Path, stage: impl FnOnce(&Run) -> CliResult<()>) -> CliResult<()> {
    let run = open(config)?;
    stage(&run)?;
    pipeline::write_run_manifest(&run)?;
    Ok(())
}

fn parse_positives(items: &[String]) -> CliResult<Vec<(String, usize)>> {
    items
        .iter()
        .map(|s| {
            let bad = || CliError::stage("fixture")(cxr_core::Error::validation(format!("expected tag:count, got `{s}`")));
            let (tag, n) = s.split_once(':').ok_or_else(bad)?;
            Ok((tag.to_string(), n.parse().map_err(|_| bad())?))
        })
        .collect()
}

fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Ingest { config } => staged(&config, |r| pipeline::ingest(r).map(drop)),
        Command::Extract { config } => staged(&config, pipeline::extract),
        Command::Train { config } => staged(&config, |r| {
            for row in pipeline::train(r)? {
                println!("{}\taccuracy {}\tauc {:.4} ± {:.4}", row.model, row.accuracy, row.auc.mean, row.auc.sd);
            }
            Ok(())
        }),
        Command::Evaluate { predictions, out, threshold } => {
            for (model, r) in pipeline::evaluate_predictions(&predictions, &out, threshold)? {
                println!(
                    "{model}\taccuracy {:.4}\tauc {:.4}\tsensitivity {:.4}\tspecificity {:.4}",
                    r.accuracy, r.auc, r.sensitivity, r.specificity
                );
            }
            Ok(())
        }
        Command::Ensemble { config } => staged(&config, |r| {
            let rep = pipeline::ensemble(r)?;
            println!("ensemble\taccuracy {:.4}\tauc {:.4}", rep.accuracy, rep.auc);
            Ok(())
        }),
        Command::Localize { config } => staged(&config, |r| pipeline::localize(r).map(drop)),
        Command::Rulebased { config } => staged(&config, |r| {
            let rep = pipeline::rulebased(r)?;
            println!("rulebased\taccuracy {:.4}\tauc {:.4}", rep.accuracy, rep.auc);
            Ok(())
        }),
        Command::Tb { config } => {
            let config = ExperimentConfig::load(&config).map_err(CliError::stage("config"))?;
            pipeline::run_all(&Run::open(pipeline::tb_config(config))?)
        }
        Command::All { config } => pipeline::run_all(&open(&config)?),
        Command::Report { dir } => {
            let out = render_report(&dir)?;
            for f in out.figures.iter().chain(&out.overlays) {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::Fixture { out, side, seed, normals, positives } => {
            let spec = FixtureSpec { side, seed, normals, positives: parse_positives(&positives)? };
            write_fixture(&out, &spec).map_err(CliError::stage("fixture"))
        }
        Command::DefaultConfig => {
            let text = ExperimentConfig::default().resolved().to_toml().map_err(CliError::stage("config"))?;
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
