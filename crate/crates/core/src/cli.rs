//! `train`, `eval`, `predict` and `synth` subcommands.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{index_dataset, list_images, make_synthetic, DataConfig, SyntheticConfig};
use crate::error::Error;
use crate::metrics::evaluate_folder;
use crate::model::Sam3UNet;
use crate::trainer::{load_checkpoint, predict, train, Checkpoint, TrainOptions};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const SNAPSHOT_FILE: &str = "config.cfg";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(e: impl std::fmt::Display) -> Self {
        CliError { code: EXIT_USAGE, message: e.to_string() }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError { code: EXIT_RUNTIME, message: e.to_string() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

/// Configuration problems are usage errors; everything else is a runtime
/// failure.
fn classify(e: Error) -> CliError {
    match e {
        Error::Config { .. } => CliError::usage(e),
        other => CliError::runtime(other),
    }
}

type CmdResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "sam3unet", version, about = "Adapter-tuned ViT segmentation: train, evaluate, predict")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config file; trailing `--section.key value` pairs override it.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
    /// Predict every image of a dataset and score the predictions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root holding the configured image and mask subdirectories.
        #[arg(long)]
        data: PathBuf,
        /// Output directory (default: `eval` next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset name used in the report (default: the root's name).
        #[arg(long)]
        name: Option<String>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
        overrides: Vec<String>,
    },
    /// Write one grayscale mask per input image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// An image file or a directory of images.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic image/mask dataset.
    Synth {
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 84)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Train { config, resume, quiet, mut overrides } => {
            // `--quiet` after the first override lands in the trailing list.
            let before = overrides.len();
            overrides.retain(|a| a != "--quiet");
            let quiet = quiet || overrides.len() != before;
            cmd_train(&config, &overrides, resume.as_deref(), !quiet)
        }
        Command::Eval { checkpoint, data, out, name, overrides } => {
            cmd_eval(&checkpoint, &data, out.as_deref(), name.as_deref(), &overrides)
        }
        Command::Predict { checkpoint, input, out } => cmd_predict(&checkpoint, &input, &out),
        Command::Synth { n, size, seed, out } => cmd_synth(n, size, seed, &out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn load_run_config(path: &Path, overrides: &[String]) -> CmdResult<RunConfig> {
    let mut cfg = RunConfig::load(path).map_err(CliError::usage)?;
    cfg.apply_overrides(overrides).map_err(CliError::usage)?;
    cfg.validate().map_err(CliError::usage)?;
    Ok(cfg)
}

pub fn cmd_train(config: &Path, overrides: &[String], resume: Option<&Path>, verbose: bool) -> CmdResult {
    let mut cfg = load_run_config(config, overrides)?;
    let run_dir = cfg.resolved_run_dir();
    cfg.train.checkpoint_dir = run_dir.clone();
    std::fs::create_dir_all(&run_dir).map_err(|e| CliError::runtime(Error::io(&run_dir, e)))?;
    let snapshot = cfg.to_text();
    let snapshot_path = run_dir.join(SNAPSHOT_FILE);
    std::fs::write(&snapshot_path, &snapshot).map_err(|e| CliError::runtime(Error::io(&snapshot_path, e)))?;

    let index = index_dataset(&cfg.data).map_err(classify)?;
    if index.is_empty() {
        return Err(CliError::runtime(format!("no image/mask pairs under {}", cfg.data.root.display())));
    }
    if !index.orphans.is_empty() {
        eprintln!("warning: {} files without a partner were skipped", index.orphans.len());
    }
    let resume = match resume {
        Some(path) => Some(load_checkpoint(path).map_err(CliError::runtime)?),
        None => None,
    };
    let mut model = Sam3UNet::new(&cfg.encoder, cfg.train.seed).map_err(classify)?;
    let opts = TrainOptions {
        resume,
        eval_pairs: Some(&index.pairs),
        metrics: cfg.metrics.clone(),
        config_text: snapshot,
        verbose,
    };
    let outcome = train(&mut model, &index.pairs, &cfg.data, &cfg.train, &cfg.loss, opts).map_err(classify)?;
    for (epoch, s) in &outcome.evaluations {
        println!("epoch {epoch}: iou {:.4} f {:.4} mae {:.4}", s.iou, s.f_measure, s.mae);
    }
    if let Some(last) = outcome.history.last() {
        println!("trained {} steps; final loss {:.5}", outcome.history.len(), last.loss);
    }
    println!("run directory: {}", run_dir.display());
    Ok(())
}

/// Model and run configuration stored in a checkpoint.
pub fn model_from_checkpoint(path: &Path) -> CmdResult<(Sam3UNet, RunConfig)> {
    if !path.is_file() {
        return Err(CliError::usage(format!("checkpoint {} does not exist", path.display())));
    }
    let ck: Checkpoint = load_checkpoint(path).map_err(CliError::runtime)?;
    if ck.config_text.trim().is_empty() {
        return Err(CliError::usage(format!("checkpoint {} carries no run configuration", path.display())));
    }
    let cfg = RunConfig::parse(&ck.config_text).map_err(CliError::runtime)?;
    let mut encoder = cfg.encoder.clone();
    encoder.pretrained_path = None;
    let mut model = Sam3UNet::new(&encoder, cfg.train.seed).map_err(CliError::runtime)?;
    ck.restore_into(&mut model).map_err(CliError::runtime)?;
    Ok((model, cfg))
}

fn output_name(stem: &str) -> String {
    format!("{stem}.png")
}

pub fn cmd_eval(checkpoint: &Path, data_root: &Path, out: Option<&Path>, name: Option<&str>, overrides: &[String]) -> CmdResult {
    let (model, mut cfg) = model_from_checkpoint(checkpoint)?;
    cfg.apply_overrides(overrides).map_err(CliError::usage)?;
    let data = DataConfig { root: data_root.to_path_buf(), ..cfg.data.clone() };
    let index = index_dataset(&data).map_err(classify)?;
    if index.is_empty() {
        return Err(CliError::usage(format!("no image/mask pairs under {}", data_root.display())));
    }
    let out_dir = match out {
        Some(o) => o.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join("eval"),
    };
    let pred_dir = out_dir.join("predictions");
    for pair in &index.pairs {
        predict(&model, &data, &pair.image, &pred_dir.join(output_name(&pair.id))).map_err(CliError::runtime)?;
    }
    let dataset = name
        .map(str::to_string)
        .or_else(|| data_root.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "dataset".into());
    let report = evaluate_folder(&dataset, &pred_dir, &data.mask_dir(), &cfg.metrics).map_err(CliError::runtime)?;
    report.write(&out_dir.join("metrics.txt"), &out_dir.join("metrics.json")).map_err(CliError::runtime)?;
    print!("{}", report.to_text());
    Ok(())
}

pub fn cmd_predict(checkpoint: &Path, input: &Path, out: &Path) -> CmdResult {
    let (model, cfg) = model_from_checkpoint(checkpoint)?;
    let inputs: Vec<(String, PathBuf)> = if input.is_dir() {
        let files = list_images(input).map_err(CliError::runtime)?;
        files.into_iter().map(|(stem, f)| (stem, input.join(f))).collect()
    } else if input.is_file() {
        let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        vec![(stem, input.to_path_buf())]
    } else {
        return Err(CliError::usage(format!("input {} does not exist", input.display())));
    };
    if inputs.is_empty() {
        return Err(CliError::usage(format!("no images in {}", input.display())));
    }
    for (stem, path) in &inputs {
        predict(&model, &cfg.data, path, &out.join(output_name(stem))).map_err(CliError::runtime)?;
    }
    println!("wrote {} masks to {}", inputs.len(), out.display());
    Ok(())
}

pub fn cmd_synth(n: usize, size: usize, seed: u64, out: &Path) -> CmdResult {
    let summary = make_synthetic(out, &SyntheticConfig::new(n, size, seed)).map_err(classify)?;
    let check = DataConfig { root: out.to_path_buf(), strict: true, ..DataConfig::default() };
    let index = index_dataset(&check).map_err(CliError::runtime)?;
    let (lo, hi) = summary.areas.iter().fold((1.0f64, 0.0f64), |(lo, hi), &a| (lo.min(a), hi.max(a)));
    println!(
        "{} pairs of {size}x{size} in {} (foreground {:.1}%..{:.1}%)",
        index.len(),
        out.display(),
        100.0 * lo,
        100.0 * hi
    );
    Ok(())
}
