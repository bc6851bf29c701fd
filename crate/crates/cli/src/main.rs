//! Command-line driver: each subcommand runs one pipeline stage against the
//! artifacts in the output directory; `demo` runs them all.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use nerfloc::harness::{Pipeline, PipelineConfig};

#[derive(Debug, Parser)]
#[command(name = "nerfloc", version, about = "Localize query images against a trained radiance field")]
struct Cli {
    /// Pipeline configuration (JSON). Defaults to the reference config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split the training poses among sub-fields.
    Partition,
    /// Train one radiance field per partition cluster.
    Train,
    /// Train query projectors and select feature dimensions.
    Select,
    /// Group poses into places and train the place predictor.
    Coarse,
    /// Localize every query view.
    Localize,
    /// Write the evaluation report from the localization results.
    Evaluate,
    /// Run every stage on the configuration end to end.
    Demo,
    /// Print the effective configuration as JSON.
    Config,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path).with_context(|| format!("reading config {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    if let Command::Config = cli.command {
        config.validate()?;
        println!("{}", config.to_json());
        return Ok(());
    }
    let pipeline = Pipeline::new(config)?;
    match cli.command {
        Command::Partition => {
            let p = pipeline.run_partition()?;
            let stats = pipeline.partition_stats(&p)?;
            println!(
                "K = {} ({:?}), mean num_nerf {:.2}, wrote {}",
                stats.k,
                stats.strategy,
                stats.mean_num_nerf,
                pipeline.artifact(nerfloc::harness::PARTITION_FILE).display()
            );
        }
        Command::Train => {
            let fields = pipeline.run_train()?;
            println!("trained {} field(s)", fields.iter().flatten().count());
        }
        Command::Select => {
            for s in pipeline.run_select()? {
                println!(
                    "field {}: {} pairs, selected {:?}",
                    s.nerf_id,
                    s.pair_count,
                    s.mask.indices()
                );
            }
        }
        Command::Coarse => {
            let (groups, _) = pipeline.run_coarse()?;
            println!("{} pose groups", groups.len());
        }
        Command::Localize => {
            let records = pipeline.run_localize()?;
            let failed = records.iter().filter(|r| r.fallback).count();
            println!("localized {} queries ({failed} fell back to the coarse pose)", records.len());
        }
        Command::Evaluate => print!("{}", pipeline.run_evaluate()?.to_table()),
        Command::Demo => print!("{}", pipeline.run_all()?.to_table()),
        Command::Config => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Library errors already embed their sources in their message.
            let mut parts: Vec<String> = Vec::new();
            for cause in e.chain() {
                let msg = cause.to_string();
                if !parts.iter().any(|p| p.contains(&msg)) {
                    parts.push(msg);
                }
            }
            eprintln!("error: {}", parts.join(": "));
            ExitCode::FAILURE
        }
    }
}
