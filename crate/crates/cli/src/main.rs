use std::path::PathBuf;
use std::process::ExitCode;

use aan_core::pipeline::{self, MethodKind, RunConfig};
use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

/// Speaker-embedding de-identification with an autoencoder-adversarial network.
#[derive(Debug, Parser)]
#[command(name = "aan", version)]
struct Cli {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory holding the run's files.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus and write train/valid/test CSVs.
    GenData,
    /// Train the AAN on the run's splits.
    Train {
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Anonymize one embedding file.
    Anonymize {
        /// identity, baseline, aan1 or aan2.
        #[arg(long)]
        method: MethodKind,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Embedding CSV of pseudo-speaker candidates.
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Score o-o, o-a and a-a trials for every configured system.
    Evaluate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        pool: Option<PathBuf>,
    },
    /// Train and evaluate one model per λ.
    SweepLambda {
        /// Comma-separated list; the config's list when omitted.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
    },
    /// Compare analytic and finite-difference gradients of a small model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
        #[arg(long, default_value_t = aan_core::aan::DEFAULT_LAMBDA)]
        lambda: f64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Print the run's evaluation report.
    Report,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_json_file(path)
            .with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::GenData => {
            let m = pipeline::gen_data(&cfg)?;
            for f in &m.outputs {
                println!("{}  {}", f.sha256, f.path.display());
            }
        }
        Command::Train { lambda, epochs } => {
            if let Some(l) = lambda {
                cfg.train.lambda = l;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let (_, history) = pipeline::train_stage(&cfg)?;
            let best = history.best();
            println!(
                "best epoch {}: valid l_au {:.6}, head accuracy gender {:.4} accent {:.4} speaker {:.4}",
                history.best_epoch,
                best.valid.l_au,
                best.valid_accuracy.gender,
                best.valid_accuracy.accent,
                best.valid_accuracy.speaker
            );
        }
        Command::Anonymize {
            method,
            input,
            output,
            model,
            pool,
            top_k,
        } => {
            cfg.anonymize.model = model.or(cfg.anonymize.model);
            cfg.anonymize.pool = pool.or(cfg.anonymize.pool);
            if let Some(k) = top_k {
                cfg.anonymize.top_k = k;
            }
            let m = pipeline::anonymize_stage(&cfg, method, &input, &output)?;
            for f in &m.outputs {
                println!("{}  {}", f.sha256, f.path.display());
            }
        }
        Command::Evaluate { model, pool } => {
            cfg.anonymize.model = model.or(cfg.anonymize.model);
            cfg.anonymize.pool = pool.or(cfg.anonymize.pool);
            let (_, report) = pipeline::evaluate_stage(&cfg)?;
            print!("{}", report.to_text());
        }
        Command::SweepLambda { lambdas } => {
            let lambdas = lambdas.unwrap_or_else(|| cfg.sweep_lambdas.clone());
            let (_, points) = pipeline::sweep_lambda(&cfg, &lambdas)?;
            print!("{}", pipeline::sweep_csv(&points));
        }
        Command::Gradcheck {
            threshold,
            lambda,
            eps,
        } => {
            let r = pipeline::gradcheck_stage(cfg.seed, lambda, eps)?;
            println!("encoder      {:.3e}", r.encoder);
            println!("decoder      {:.3e}", r.decoder);
            println!("gender_head  {:.3e}", r.gender_head);
            println!("accent_head  {:.3e}", r.accent_head);
            println!("speaker_head {:.3e}", r.speaker_head);
            println!("max          {:.3e}", r.max());
            if !(r.max() < threshold) {
                eprintln!(
                    "max relative error {:.3e} is not below {threshold:e}",
                    r.max()
                );
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Report => {
            print!("{}", pipeline::report_stage(&cfg)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
