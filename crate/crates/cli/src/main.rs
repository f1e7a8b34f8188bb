use anyhow::Result;
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use warpspace_cli::commands::{self, EvalOverrides, TraverseArgs};
use warpspace_cli::config::ExperimentConfig;

/// Learn and inspect non-linear latent paths on a synthetic generator.
#[derive(Parser, Debug)]
#[command(name = "warpspace", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train warpings and reconstructor; writes a checkpoint and training log
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured seed
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured output directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy, attribute-correlation and nonlinearity reports for a checkpoint
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation settings (defaults to the configuration stored in the checkpoint)
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Steps per direction along each walk
        #[arg(long)]
        steps: Option<usize>,
        /// Step length along each walk
        #[arg(long)]
        eps: Option<f64>,
        /// Output directory (defaults to the checkpoint's directory)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the image sequence along one warping as PGM files
    Traverse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        k: usize,
        /// Seed of the starting latent code
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare Random, Coord, linear and non-linear directions at equal budget
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn checkpoint_dir(checkpoint: &Path) -> PathBuf {
    checkpoint
        .parent()
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let cfg = load(&config, seed)?;
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            let path = commands::train(&cfg, &out, true)?;
            println!("{}", path.display());
        }
        Command::Eval {
            checkpoint,
            config,
            seed,
            steps,
            eps,
            out,
        } => {
            let cfg = config.map(|p| load(&p, None)).transpose()?;
            let out = out.unwrap_or_else(|| checkpoint_dir(&checkpoint));
            let report = commands::eval(
                &checkpoint,
                cfg.as_ref(),
                EvalOverrides { seed, steps, eps },
                &out,
            )?;
            println!("accuracy            {:.2}%", report.accuracy);
            println!("diagonal dominance  {:.4}", report.diagonal_dominance);
            println!("phi (sorted)        {:?}", report.phi.values());
        }
        Command::Traverse {
            checkpoint,
            k,
            seed,
            steps,
            eps,
            out,
        } => {
            let out = out.unwrap_or_else(|| checkpoint_dir(&checkpoint));
            let files = commands::traverse(
                &checkpoint,
                TraverseArgs {
                    k,
                    seed,
                    steps,
                    eps,
                },
                &out,
            )?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
        Command::Baseline { config, seed, out } => {
            let cfg = load(&config, seed)?;
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            let rows = commands::baseline(&cfg, &out, true)?;
            println!(
                "{:<10} {:>9} {:>9} {:>9}",
                "method", "acc (%)", "margin", "max phi"
            );
            for r in rows {
                println!(
                    "{:<10} {:>9.2} {:>9.4} {:>9.4}",
                    r.method, r.accuracy, r.diagonal_dominance, r.max_phi
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("WARPSPACE_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => warpspace::parallel::init_thread_pool(n),
            _ => {
                eprintln!("error: WARPSPACE_THREADS must be a positive integer, got {threads:?}");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
