//! `binsep`: data generation, training, evaluation and rendering for location-guided
//! binaural separation.
//!
//! Settings come from an optional `key = value` file (`--config`), then `--set key=value`
//! pairs, then the dedicated flags of each command. Exit codes: 0 success, 2 config error,
//! 3 data error, 4 numeric failure. `BINSEP_THREADS` caps the worker pool.

mod commands;
mod config;
mod error;
mod render;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Parser, Debug)]
#[command(name = "binsep", version, about = "Location-guided binaural source separation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Flat `key = value` settings file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Model and scene size: paper, desk or tiny.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a dataset of two-object scenes.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: usize,
        /// Replace the dataset files of an existing directory.
        #[arg(long)]
        force: bool,
        /// Fraction of scenes whose objects share a category.
        #[arg(long)]
        same_category: Option<f64>,
    },
    /// Train the single-channel model on mono mixtures.
    PretrainMono {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the binaural model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_ipd: bool,
        #[arg(long)]
        no_position: bool,
        /// Initialise from a mono checkpoint.
        #[arg(long, value_name = "CKPT")]
        from_mono: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score separations with SDR/SIR and write a metrics CSV.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present_any = ["oracle", "baseline"], conflicts_with_all = ["oracle", "baseline"])]
        checkpoint: Option<PathBuf>,
        /// Ideal binary masks from the ground-truth stems.
        #[arg(long, conflicts_with = "baseline")]
        oracle: bool,
        /// The unprocessed mixture as every estimate.
        #[arg(long)]
        baseline: bool,
        /// Score mono mixtures (implied by a mono checkpoint).
        #[arg(long)]
        mono: bool,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        filter_len: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Write one WAV per queried object of a scene.
    Separate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scene: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Write spectrogram PNGs of a scene's mixture, ground truth and estimates.
    RenderSpec {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scene: usize,
        #[arg(long)]
        out: PathBuf,
        /// Estimates from this model; ideal masks otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every combination of IPD, position and mono pretraining.
    Ablation {
        #[arg(long)]
        data: PathBuf,
        /// CSV with one row per combination.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
}

fn run_config(g: &Global) -> Result<RunConfig> {
    let mut rc = RunConfig::default();
    if let Some(p) = &g.config {
        rc.load_file(p)?;
    }
    for pair in &g.set {
        rc.set_pair(pair)?;
    }
    if let Some(p) = &g.preset {
        rc.set("preset", p)?;
    }
    if let Some(s) = g.seed {
        rc.seed = s;
    }
    Ok(rc)
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("BINSEP_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::config(format!("BINSEP_THREADS = `{v}` is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::config(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let mut rc = run_config(&cli.global)?;
    match cli.command {
        Command::GenData { out, scenes, force, same_category } => {
            if let Some(f) = same_category {
                rc.same_category = f;
            }
            commands::gen_data(&rc, &out, scenes, force)
        }
        Command::PretrainMono { data, out, epochs } => {
            if let Some(e) = epochs {
                rc.epochs = e;
            }
            commands::pretrain_mono(&rc, &data, &out)
        }
        Command::Train { data, out, no_ipd, no_position, from_mono, epochs } => {
            if no_ipd {
                rc.use_ipd = Some(false);
            }
            if no_position {
                rc.use_position = Some(false);
            }
            if from_mono.is_some() {
                rc.from_mono = from_mono;
            }
            if let Some(e) = epochs {
                rc.epochs = e;
            }
            commands::train(&rc, &data, &out)
        }
        Command::Eval { data, checkpoint, oracle, baseline, mono, split, out, filter_len, threshold } => {
            if let Some(f) = filter_len {
                rc.filter_len = f;
            }
            if threshold.is_some() {
                rc.threshold = threshold;
            }
            let source = match (checkpoint, oracle, baseline) {
                (Some(c), _, _) => commands::Source::Checkpoint(c),
                (None, true, _) => commands::Source::Oracle,
                (None, false, true) => commands::Source::Baseline,
                (None, false, false) => return Err(CliError::config("eval needs --checkpoint, --oracle or --baseline")),
            };
            commands::eval(&rc, &data, source, mono, split, &out)
        }
        Command::Separate { checkpoint, data, scene, out, threshold } => {
            if threshold.is_some() {
                rc.threshold = threshold;
            }
            commands::separate(&rc, &checkpoint, &data, scene, &out)
        }
        Command::RenderSpec { data, scene, out, checkpoint } => {
            commands::render_spec(&rc, &data, scene, &out, checkpoint.as_deref())
        }
        Command::Ablation { data, out, epochs, split } => {
            if let Some(e) = epochs {
                rc.epochs = e;
            }
            commands::ablation(&rc, &data, split, &out)
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("binsep: {e}");
        std::process::exit(e.exit_code());
    }
}
