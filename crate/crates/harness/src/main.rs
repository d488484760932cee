use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use dcd_harness::commands;
use dcd_harness::config::RunConfig;

#[derive(Parser)]
#[command(name = "dcd", version, about = "Dynamic convolution decomposition toolkit")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// With `count`: compare against the embedded budget table.
    #[arg(long, global = true)]
    golden: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured model, or every arm × seed of its sweep.
    Train,
    /// Finite-difference certification of layer or model gradients.
    Gradcheck {
        /// `all`, a layer variant, or tasknet_{static,dcd,vanilla}.
        #[arg(default_value = "all")]
        selector: String,
    },
    /// Decomposition and rank-1 identity suites.
    Equivalence {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
        dims: Vec<usize>,
    },
    /// Parameter and MAdds tables.
    Count {
        selector: Option<String>,
        #[arg(long, default_value_t = 224)]
        resolution: usize,
    },
    /// Variance of the dynamic coefficients of a trained checkpoint.
    AnalyzePhi { checkpoint: PathBuf },
    /// Batch-1 latency against the model's static twin.
    Bench {
        #[arg(default_value = "config")]
        selector: String,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 224)]
        resolution: usize,
    },
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => Some(RunConfig::load(p)?),
        None => None,
    };
    if let (Some(c), Some(s)) = (cfg.as_mut(), cli.seed) {
        c.seed = s;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.as_ref().map(|c| c.out.clone()))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let seed = cli.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(1);
    match cli.command {
        Command::Train => {
            let mut c = cfg.context("train needs --config")?;
            c.out = out.clone();
            commands::train(&c, &out)
        }
        Command::Gradcheck { selector } => commands::gradcheck(&selector, &out),
        Command::Equivalence { trials, dims } => commands::equivalence(trials, &dims, seed, &out),
        Command::Count { selector, resolution } => {
            let mut ok = true;
            if let Some(sel) = &selector {
                let g = commands::resolve_model(sel, cfg.as_ref())?;
                commands::count_model(&g, sel, resolution, &out)?;
            }
            if cli.golden {
                ok = commands::golden(&out)?.0;
            } else if selector.is_none() {
                anyhow::bail!("count needs a model selector or --golden");
            }
            Ok(ok)
        }
        Command::AnalyzePhi { checkpoint } => {
            let c = cfg.context("analyze-phi needs --config describing the checkpoint's model and task")?;
            commands::analyze_phi(&c, &checkpoint, &out)?;
            Ok(true)
        }
        Command::Bench {
            selector,
            repeats,
            warmup,
            resolution,
        } => {
            let g = commands::resolve_model(&selector, cfg.as_ref())?;
            let rep = commands::bench(&g, resolution, repeats, warmup, seed, &out)?;
            Ok(rep.overhead_ratio.is_finite())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
