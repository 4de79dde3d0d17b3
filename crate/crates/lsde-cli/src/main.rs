//! Command-line front end for latent SDE identification: generate
//! synthetic datasets, train the variational model, evaluate recovery
//! up to isometry, search over latent dimensions, and inspect
//! reducibility — all reproducible from JSON configs and explicit seeds.

mod config;
mod pipeline;

use clap::{Parser, Subcommand};
use config::ExperimentConfig;
use lsde::eval::AlignMode;
use pipeline::{CliResult, DimsearchMode};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "lsde",
    version,
    about = "Identify latent stochastic differential equations from high-dimensional time series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum ModeArg {
    Orthogonal,
    Affine,
}

impl From<ModeArg> for AlignMode {
    fn from(m: ModeArg) -> AlignMode {
        match m {
            ModeArg::Orthogonal => AlignMode::Orthogonal,
            ModeArg::Affine => AlignMode::Affine,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired dataset from an experiment config.
    Generate {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory (config echo + dataset/).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured model on an existing dataset directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory written by `generate`.
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory (model checkpoint + loss_log.csv).
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model checkpoint against a dataset with latent truth.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint base path (expects <base>.json and <base>.bin).
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "orthogonal")]
        mode: ModeArg,
        /// Where to write metrics.json (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also print a results-table row to stdout.
        #[arg(long)]
        csv: bool,
    },
    /// Full pipeline: generate, train, evaluate; repeats vary only the
    /// model/training seeds and are aggregated as mean ± std.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        /// Print a results-table row to stdout after the run.
        #[arg(long)]
        csv: bool,
    },
    /// Search over candidate latent dimensions.
    Dimsearch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: DimsearchMode,
        /// Comma-separated candidate sizes, e.g. 1,2,3,4,5.
        #[arg(long, value_delimiter = ',', required = true)]
        candidates: Vec<usize>,
    },
    /// Reducibility report for a catalog SDE (CSV to stdout).
    LampertiCheck {
        /// Catalog SDE name.
        #[arg(long)]
        sde: String,
        /// Base point as comma-separated coordinates (default: the
        /// catalog starting state).
        #[arg(long, value_delimiter = ',')]
        base: Option<Vec<f64>>,
    },
    /// Cramér–Rao reference level d/(Δt·N).
    Crlb {
        #[arg(long)]
        latent_dim: usize,
        #[arg(long)]
        dt: f64,
        #[arg(long)]
        n_pairs: usize,
    },
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate { config, out } => {
            let cfg = load_config(&config)?;
            let ds = pipeline::generate(&cfg, &out)?;
            println!(
                "generated {} pairs ({} ambient dims) in {}",
                ds.len(),
                ds.ambient_dim(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            dataset,
            out,
        } => {
            let cfg = load_config(&config)?;
            let ds = pipeline::load_dataset_dir(&dataset)?;
            pipeline::train(&cfg, &ds, &out)?;
            println!("trained model written to {}", out.display());
            Ok(())
        }
        Command::Evaluate {
            dataset,
            model,
            mode,
            out,
            csv,
        } => {
            let ds = pipeline::load_dataset_dir(&dataset)?;
            let model = pipeline::load_model_base(&model)?;
            let report = pipeline::evaluate(&model, &ds, mode.into())?;
            let text = pipeline::stage(
                "evaluate",
                serde_json::to_string_pretty(&report).map_err(lsde::Error::from),
            )?;
            match out {
                Some(path) => pipeline::stage(
                    "evaluate",
                    std::fs::write(&path, text).map_err(lsde::Error::from),
                )?,
                None => println!("{text}"),
            }
            if csv {
                println!("{}", pipeline::TABLE_HEADER);
                println!(
                    "{}",
                    pipeline::single_metrics_row(
                        &format!(
                            "{}-n{}",
                            pipeline::map_kind_label(ds.meta.map.kind),
                            ds.ambient_dim()
                        ),
                        &ds.meta.spec_name,
                        &report
                    )
                );
            }
            Ok(())
        }
        Command::Run {
            config,
            out,
            repeat,
            csv,
        } => {
            let cfg = load_config(&config)?;
            let summary = pipeline::run(&cfg, &out, repeat)?;
            eprintln!(
                "run complete: {} repeat(s), mean L_latent {:.6}, mean L_mu {:.6}",
                summary.repeats.len(),
                summary.mean.l_latent,
                summary.mean.l_mu
            );
            if csv {
                println!("{}", pipeline::TABLE_HEADER);
                println!("{}", pipeline::table_row(&cfg, &summary));
            }
            Ok(())
        }
        Command::Dimsearch {
            config,
            out,
            mode,
            candidates,
        } => {
            let cfg = load_config(&config)?;
            let report = pipeline::dimsearch(&cfg, &out, mode, &candidates)?;
            for row in &report.rows {
                match mode {
                    DimsearchMode::DiagHeuristic => {
                        let diags = row
                            .diagonals
                            .as_ref()
                            .map(|d| {
                                d.iter()
                                    .map(|v| format!("{v:.4}"))
                                    .collect::<Vec<_>>()
                                    .join(" ")
                            })
                            .unwrap_or_default();
                        println!(
                            "candidate {}: diagonals [{}] → suggested {}",
                            row.candidate,
                            diags,
                            row.suggested.unwrap_or(0)
                        );
                    }
                    DimsearchMode::LinearLikelihood => {
                        println!(
                            "candidate {}: log-likelihood {}",
                            row.candidate,
                            row.loglik.unwrap_or(f64::NEG_INFINITY)
                        );
                    }
                }
            }
            println!("selected latent dimension: {}", report.selected);
            Ok(())
        }
        Command::LampertiCheck { sde, base } => {
            let text = pipeline::lamperti_check(&sde, base)?;
            print!("{text}");
            Ok(())
        }
        Command::Crlb {
            latent_dim,
            dt,
            n_pairs,
        } => {
            let value = pipeline::stage("crlb", lsde::eval::crlb(latent_dim, dt, n_pairs))?;
            println!("{value}");
            Ok(())
        }
    }
}

fn load_config(path: &PathBuf) -> CliResult<ExperimentConfig> {
    pipeline::stage("config", ExperimentConfig::load(path))
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error {err}");
            std::process::exit(err.exit_code());
        }
    }
}
