use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;

use deeprank::cli::{self, ResolvedConfig};
use deeprank::error::Result;

/// Triplet ranking embeddings on synthetic image data.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Flat TOML config file, or a previous run.json to replay.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.learning_rate=0.02`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train and eval splits.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a ranking model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        budget: Option<u64>,
        /// Softmax-pretrain path 0 first.
        #[arg(long)]
        pretrain: bool,
    },
    /// Score a checkpoint on the eval split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        /// Also write per-triplet outcomes as CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Sampler diagnostics, optionally with the out-of-class ratio sweep.
    SamplerStats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        uniform: bool,
        #[arg(long)]
        sweep: bool,
    },
    /// Write first-layer kernels of every path as PNG grids.
    ExportFilters {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print every config key with its effective value and source.
    ShowConfig,
}

fn flag(key: &str, v: impl Into<Value>) -> (String, Value) {
    (key.to_string(), v.into())
}

fn run(args: Args) -> Result<()> {
    let file = match &args.config {
        Some(p) => cli::read_config_file(p)?,
        None => BTreeMap::new(),
    };
    let mut flags = args
        .set
        .iter()
        .map(|s| cli::parse_assignment(s))
        .collect::<Result<Vec<_>>>()?;
    match &args.command {
        Command::GenData { seed, .. } => flags.extend(seed.map(|s| flag("gen.seed", s))),
        Command::Train { seed, workers, budget, pretrain, .. } => {
            flags.extend(seed.map(|s| flag("train.seed", s)));
            flags.extend(workers.map(|w| flag("train.workers", w)));
            flags.extend(budget.map(|b| flag("train.budget", b)));
            if *pretrain {
                flags.push(flag("run.pretrain", true));
            }
        }
        Command::Eval { k, .. } => flags.extend(k.map(|k| flag("eval.k", k))),
        Command::SamplerStats { uniform: true, .. } => flags.push(flag("train.sampling", "uniform")),
        _ => {}
    }
    let resolved: ResolvedConfig = cli::resolve(&file, &flags)?;

    match args.command {
        Command::GenData { out, .. } => {
            let s = cli::gen_data(&resolved, &out)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Train { data, out, .. } => {
            let s = cli::train(&resolved, &data, &out)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Eval { data, checkpoint, out, csv, .. } => {
            let r = cli::eval(&resolved, &data, &checkpoint, &out, csv)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::SamplerStats { data, out, sweep, .. } => {
            let s = cli::sampler_stats(&resolved, &data, &out, sweep)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::ExportFilters { checkpoint, out } => {
            for (path, g) in cli::export_filters(&resolved, &checkpoint, &out)? {
                println!("{}: {} kernels, {}x{}", path.display(), g.kernels, g.width, g.height);
            }
        }
        Command::ShowConfig => {
            println!("# config hash {}", resolved.hash());
            print!("{}", resolved.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
