use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use exconsist_cli::{cmd_eval, cmd_make_synth, cmd_study, cmd_train, parse_resolution, Which};

#[derive(Parser)]
#[command(name = "exconsist", version, about = "Semi-supervised segmentation with extreme consistency")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum NetworkArg {
    Teacher,
    Student,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-image Dice of a checkpoint on a labeled directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output JSON file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "teacher")]
        network: NetworkArg,
        /// HEIGHTxWIDTH; defaults to the run's frozen configuration.
        #[arg(long, value_parser = parse_resolution)]
        resolution: Option<(usize, usize)>,
    },
    /// Multi-trial study or ablation grid.
    Study {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides study.n_trials.
        #[arg(long)]
        trials: Option<usize>,
        /// Overrides study.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a synthetic dataset directory.
    MakeSynth {
        #[arg(long)]
        n: usize,
        /// HEIGHTxWIDTH or a single side.
        #[arg(long, value_parser = parse_resolution, default_value = "64")]
        resolution: (usize, usize),
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Colour-shifted domain variant.
        #[arg(long)]
        shifted: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train { config, out, seed } => cmd_train(&config, &out, seed),
        Command::Eval {
            checkpoint,
            data,
            out,
            network,
            resolution,
        } => {
            let which = match network {
                NetworkArg::Teacher => Which::Teacher,
                NetworkArg::Student => Which::Student,
            };
            cmd_eval(&checkpoint, &data, &out, which, resolution).map(|r| {
                println!("mean Dice {:.4} over {} images", r.mean_dice, r.per_image.len());
            })
        }
        Command::Study {
            config,
            out,
            trials,
            seed,
        } => cmd_study(&config, &out, trials, seed).map(|reports| {
            for r in reports {
                println!("{:<24} {:.4} ({:.4}) n={}", r.config_id, r.dice_mean, r.dice_std, r.n_trials);
            }
        }),
        Command::MakeSynth {
            n,
            resolution,
            out,
            seed,
            shifted,
        } => cmd_make_synth(n, resolution, &out, seed, shifted),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
