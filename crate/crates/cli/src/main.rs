use std::path::PathBuf;
use std::process::ExitCode;

use bevtrack_cli::commands::{cmd_ablate, cmd_bench, cmd_eval, cmd_generate, cmd_render, cmd_track, cmd_train, Ctx};
use bevtrack_cli::config::RunConfig;
use clap::{Parser, Subcommand};

// glibc returns every large tensor buffer to the kernel on free, which
// costs more than the arithmetic in training
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "bevtrack",
    version,
    about = "Joint BEV detection, tracking and forecasting from LiDAR sweeps"
)]
struct Cli {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override a config key, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Suppress progress output.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a labelled dataset.
    Generate,
    /// Train a model.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Detection AP tables.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Tracking and forecasting metrics.
    Track {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate the ablation ladder.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Bird's-eye images of a sequence with tracks.
    Render {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        tracklets: Option<PathBuf>,
    },
    /// Voxelisation and forward-pass latency.
    Bench,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.sets, cli.seed)?;
    let mut ctx = Ctx::new(cfg, cli.out);
    ctx.quiet = cli.quiet;
    match cli.command {
        Command::Generate => {
            cmd_generate(&ctx)?;
        }
        Command::Train { data } => {
            cmd_train(&ctx, data.as_deref())?;
        }
        Command::Eval { data, checkpoint } => {
            print!("{}", cmd_eval(&ctx, data.as_deref(), checkpoint.as_deref())?.to_tsv())
        }
        Command::Track { data, checkpoint } => {
            print!("{}", cmd_track(&ctx, data.as_deref(), checkpoint.as_deref())?.to_tsv())
        }
        Command::Ablate { data, val } => print!("{}", cmd_ablate(&ctx, data.as_deref(), val.as_deref())?.to_tsv()),
        Command::Render { data, tracklets } => {
            let n = cmd_render(&ctx, data.as_deref(), tracklets.as_deref())?;
            if !ctx.quiet {
                eprintln!("rendered {n} frames into {}", ctx.out.display());
            }
        }
        Command::Bench => print!("{}", cmd_bench(&ctx)?.to_tsv()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
