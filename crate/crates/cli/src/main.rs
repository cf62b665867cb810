use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use vf_cli::{cmd_bench, cmd_gen_scene, cmd_reconstruct, cmd_train_tiny, cmd_verify, load_config, RunOptions};
use vf_core::grad::Precision;

#[derive(Parser)]
#[command(name = "vf", version, about = "Sparse voxel window attention reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true, value_enum, default_value = "f64")]
    precision: PrecisionArg,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic three-primitive scene.
    GenScene {
        #[arg(long)]
        out: PathBuf,
    },
    /// Overfit the pipeline on one scene.
    TrainTiny {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct a mesh from a checkpoint and score it.
    Reconstruct {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every self-check; exits non-zero if any fails.
    Verify {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Count sparse against dense attention pairs and time window attention.
    Bench {
        #[arg(long, num_args = 3, default_values_t = [100, 100, 100])]
        dims: Vec<u32>,
        #[arg(long, default_value_t = 0.1)]
        occupancy: f64,
        #[arg(long, default_value_t = 10)]
        window: u32,
        #[arg(long, default_value_t = 1)]
        trials: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let precision = match cli.precision {
        PrecisionArg::F32 => Precision::F32,
        PrecisionArg::F64 => Precision::F64,
    };
    RunOptions { deterministic: cli.deterministic, precision }.apply();
    match cli.command {
        Command::GenScene { out } => {
            let scene = cmd_gen_scene(&out, cli.seed)?;
            println!("wrote {} views to {}", scene.views.len(), out.display());
        }
        Command::TrainTiny { scene, config, steps, out } => {
            let mut config = load_config(config.as_deref())?;
            config.seed = cli.seed;
            let steps = steps.unwrap_or(config.train.steps);
            let r = cmd_train_tiny(&scene, &config, steps, &out)?;
            println!(
                "{} steps in {:.1}s, final loss {:.5}, window trend {}",
                r.steps,
                r.seconds,
                r.losses.last().copied().unwrap_or(f64::NAN),
                if r.monotone { "monotone" } else { "not monotone" }
            );
        }
        Command::Reconstruct { scene, config, checkpoint, out } => {
            let mut config = load_config(config.as_deref())?;
            config.seed = cli.seed;
            let r = cmd_reconstruct(&scene, &config, &checkpoint, &out)?;
            print!("{}", r.metrics.to_text());
        }
        Command::Verify { out } => {
            let checks = cmd_verify(cli.seed)?;
            for c in &checks {
                println!("{}", c.line());
            }
            if let Some(out) = out {
                fs::write(&out, serde_json::to_string_pretty(&checks)?).with_context(|| format!("writing {}", out.display()))?;
            }
            let failed = checks.iter().filter(|c| !c.pass).count();
            if failed > 0 {
                bail!("{failed} checks failed");
            }
        }
        Command::Bench { dims, occupancy, window, trials, out } => {
            let dims = [dims[0], dims[1], dims[2]];
            let r = cmd_bench(dims, occupancy, window, trials, cli.seed, true)?;
            let json = serde_json::to_string_pretty(&r)?;
            println!("{json}");
            if let Some(out) = out {
                fs::write(&out, json).with_context(|| format!("writing {}", out.display()))?;
            }
        }
    }
    Ok(())
}
