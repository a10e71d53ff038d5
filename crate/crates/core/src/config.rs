//! Flat `section.key = value` run configuration.
//!
//! ```text
//! # comment
//! encoder.embed_dim = 64
//! train.lr = 0.005
//! loss.head_weights = 1, 1, 1
//! ```
//!
//! Every key has a fixed type; unknown keys and ill-typed values are
//! configuration errors naming the key. [`RunConfig::to_text`] emits every
//! key, so a snapshot fully determines a run. `data.layout` (`plain`,
//! `mirror`, `duts-tr`, `duts-te`) is input-only shorthand for the two
//! subdirectory keys.

use std::path::{Path, PathBuf};

use crate::data::{DataConfig, Layout};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::{FMode, MetricsConfig};
use crate::trainer::TrainConfig;

/// Environment variable naming the directory relative run directories live in.
pub const RUN_ROOT_ENV: &str = "SAM3UNET_RUN_ROOT";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub metrics: MetricsConfig,
    /// Output directory for checkpoints, loss history and the snapshot.
    pub run_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder: EncoderConfig::sam3(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            metrics: MetricsConfig::default(),
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

pub const KEYS: &[&str] = &[
    "encoder.patch_size",
    "encoder.embed_dim",
    "encoder.depth",
    "encoder.num_heads",
    "encoder.mlp_dim",
    "encoder.img_size",
    "encoder.adapter_bottleneck",
    "encoder.pretrained_path",
    "data.root",
    "data.image_subdir",
    "data.mask_subdir",
    "data.input_size",
    "data.normalize_mean",
    "data.normalize_std",
    "data.flip_prob",
    "data.strict",
    "train.lr",
    "train.weight_decay",
    "train.epochs",
    "train.batch_size",
    "train.lr_floor",
    "train.seed",
    "train.eval_every",
    "train.checkpoint_every",
    "train.clip_grad_norm",
    "loss.pool_kernel",
    "loss.weight_gain",
    "loss.epsilon",
    "loss.head_weights",
    "loss.strict_binary",
    "metrics.f_mode",
    "metrics.iou_threshold",
    "metrics.s_alpha",
    "metrics.strict",
    "run.dir",
];

fn bad(key: &str, reason: impl std::fmt::Display) -> Error {
    Error::config(key, reason.to_string())
}

fn int(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| bad(key, format!("expected a non-negative integer, got `{v}`")))
}

fn real(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| bad(key, format!("expected a finite number, got `{v}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, format!("expected true or false, got `{v}`"))),
    }
}

fn reals(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|s| real(key, s.trim())).collect()
}

fn triple(key: &str, v: &str) -> Result<[f64; 3]> {
    let r = reals(key, v)?;
    r.try_into().map_err(|r: Vec<f64>| bad(key, format!("expected 3 values, got {}", r.len())))
}

fn size(key: &str, v: &str) -> Result<(usize, usize)> {
    match v.split_once('x') {
        Some((h, w)) => Ok((int(key, h.trim())?, int(key, w.trim())?)),
        None => int(key, v).map(|n| (n, n)),
    }
}

fn optional_path(v: &str) -> Option<PathBuf> {
    (v != "none" && !v.is_empty()).then(|| PathBuf::from(v))
}

fn join(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(", ")
}

fn path_text(p: &Path) -> String {
    p.display().to_string()
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (e, d, t, l, m) = (&mut self.encoder, &mut self.data, &mut self.train, &mut self.loss, &mut self.metrics);
        match key {
            "encoder.patch_size" => e.patch_size = int(key, v)?,
            "encoder.embed_dim" => e.embed_dim = int(key, v)?,
            "encoder.depth" => e.depth = int(key, v)?,
            "encoder.num_heads" => e.num_heads = int(key, v)?,
            "encoder.mlp_dim" => e.mlp_dim = int(key, v)?,
            "encoder.img_size" => e.img_size = size(key, v)?,
            "encoder.adapter_bottleneck" => e.adapter_bottleneck = int(key, v)?,
            "encoder.pretrained_path" => e.pretrained_path = optional_path(v),
            "data.root" => d.root = PathBuf::from(v),
            "data.image_subdir" => d.image_subdir = v.to_string(),
            "data.mask_subdir" => d.mask_subdir = v.to_string(),
            "data.layout" => {
                let (images, masks) = v.parse::<Layout>()?.subdirs();
                d.image_subdir = images.into();
                d.mask_subdir = masks.into();
            }
            "data.input_size" => d.input_size = size(key, v)?,
            "data.normalize_mean" => d.normalize_mean = triple(key, v)?,
            "data.normalize_std" => d.normalize_std = triple(key, v)?,
            "data.flip_prob" => d.flip_prob = real(key, v)?,
            "data.strict" => d.strict = boolean(key, v)?,
            "train.lr" => t.lr = real(key, v)?,
            "train.weight_decay" => t.weight_decay = real(key, v)?,
            "train.epochs" => t.epochs = int(key, v)?,
            "train.batch_size" => t.batch_size = int(key, v)?,
            "train.lr_floor" => t.lr_floor = real(key, v)?,
            "train.seed" => t.seed = int(key, v)? as u64,
            "train.eval_every" => t.eval_every = int(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = int(key, v)?,
            "train.clip_grad_norm" => t.clip_grad_norm = if v == "none" { None } else { Some(real(key, v)?) },
            "loss.pool_kernel" => l.pool_kernel = int(key, v)?,
            "loss.weight_gain" => l.weight_gain = real(key, v)?,
            "loss.epsilon" => l.epsilon = real(key, v)?,
            "loss.head_weights" => l.head_weights = reals(key, v)?,
            "loss.strict_binary" => l.strict_binary = boolean(key, v)?,
            "metrics.f_mode" => m.f_mode = v.parse::<FMode>().map_err(|_| bad(key, format!("expected adaptive or max, got `{v}`")))?,
            "metrics.iou_threshold" => m.iou_threshold = real(key, v)?,
            "metrics.s_alpha" => m.s_alpha = real(key, v)?,
            "metrics.strict" => m.strict = boolean(key, v)?,
            "run.dir" => self.run_dir = PathBuf::from(v),
            _ => return Err(bad(key, "unknown key")),
        }
        Ok(())
    }

    /// Textual value of one key.
    pub fn get(&self, key: &str) -> Option<String> {
        let (e, d, t, l, m) = (&self.encoder, &self.data, &self.train, &self.loss, &self.metrics);
        Some(match key {
            "encoder.patch_size" => e.patch_size.to_string(),
            "encoder.embed_dim" => e.embed_dim.to_string(),
            "encoder.depth" => e.depth.to_string(),
            "encoder.num_heads" => e.num_heads.to_string(),
            "encoder.mlp_dim" => e.mlp_dim.to_string(),
            "encoder.img_size" => format!("{}x{}", e.img_size.0, e.img_size.1),
            "encoder.adapter_bottleneck" => e.adapter_bottleneck.to_string(),
            "encoder.pretrained_path" => e.pretrained_path.as_deref().map_or("none".into(), path_text),
            "data.root" => path_text(&d.root),
            "data.image_subdir" => d.image_subdir.clone(),
            "data.mask_subdir" => d.mask_subdir.clone(),
            "data.input_size" => format!("{}x{}", d.input_size.0, d.input_size.1),
            "data.normalize_mean" => join(&d.normalize_mean),
            "data.normalize_std" => join(&d.normalize_std),
            "data.flip_prob" => d.flip_prob.to_string(),
            "data.strict" => d.strict.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.lr_floor" => t.lr_floor.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.eval_every" => t.eval_every.to_string(),
            "train.checkpoint_every" => t.checkpoint_every.to_string(),
            "train.clip_grad_norm" => t.clip_grad_norm.map_or("none".into(), |c| c.to_string()),
            "loss.pool_kernel" => l.pool_kernel.to_string(),
            "loss.weight_gain" => l.weight_gain.to_string(),
            "loss.epsilon" => l.epsilon.to_string(),
            "loss.head_weights" => join(&l.head_weights),
            "loss.strict_binary" => l.strict_binary.to_string(),
            "metrics.f_mode" => match m.f_mode {
                FMode::Adaptive => "adaptive".into(),
                FMode::Max => "max".into(),
            },
            "metrics.iou_threshold" => m.iou_threshold.to_string(),
            "metrics.s_alpha" => m.s_alpha.to_string(),
            "metrics.strict" => m.strict.to_string(),
            "run.dir" => path_text(&self.run_dir),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                context: format!("config line {}", n + 1),
                reason: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `--section.key value` / `--section.key=value` pairs.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, args: &[S]) -> Result<()> {
        let mut it = args.iter().map(AsRef::as_ref);
        while let Some(arg) = it.next() {
            let flag = arg.strip_prefix("--").ok_or_else(|| bad(arg, "overrides take the form --section.key value"))?;
            let (key, value) = match flag.split_once('=') {
                Some((k, v)) => (k, v.to_string()),
                None => (flag, it.next().ok_or_else(|| bad(flag, "missing value"))?.to_string()),
            };
            self.set(key, &value)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if self.loss.head_weights.len() != 3 {
            return Err(bad("loss.head_weights", format!("the decoder has 3 heads, got {} weights", self.loss.head_weights.len())));
        }
        if !(0.0..=1.0).contains(&self.metrics.iou_threshold) {
            return Err(bad("metrics.iou_threshold", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.metrics.s_alpha) {
            return Err(bad("metrics.s_alpha", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Every key with its resolved value.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).expect("listed keys resolve"))).collect()
    }

    /// `run.dir`, placed under the run root when relative and the root is set.
    pub fn resolved_run_dir(&self) -> PathBuf {
        match std::env::var_os(RUN_ROOT_ENV) {
            Some(root) if self.run_dir.is_relative() => PathBuf::from(root).join(&self.run_dir),
            _ => self.run_dir.clone(),
        }
    }
}
