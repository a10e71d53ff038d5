//! Optimization loop, checkpoints and single-image inference.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{GrayImage, ImageBuffer, Luma};
use ndarray::{Array2, Array4, Axis};
use sam3unet_tensor::{Array, Graph};
use serde::{Deserialize, Serialize};

use crate::data::{load_rgb, normalize_image, preprocess, resize_bilinear, DataConfig, EpochLoader, SamplePair};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig};
use crate::metrics::{score_image, DatasetScores, MetricsConfig};
use crate::model::Sam3UNet;
use crate::nn::{Ctx, NormMode};
use crate::tensor_file::TensorFile;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;
const LOADER_QUEUE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_floor: f64,
    pub seed: u64,
    /// Evaluate every this many epochs; 0 disables.
    pub eval_every: usize,
    pub checkpoint_dir: PathBuf,
    /// Write an epoch checkpoint every this many epochs; 0 keeps only the
    /// final one. `last.safetensors` is refreshed with each write.
    pub checkpoint_every: usize,
    /// Global gradient-norm limit.
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 12,
            lr_floor: 0.0,
            seed: 0,
            eval_every: 0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            checkpoint_every: 1,
            clip_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(self.lr_floor >= 0.0) || self.lr_floor > self.lr {
            return Err(Error::config("train.lr_floor", format!("{} is outside [0, lr]", self.lr_floor)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.clip_grad_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("train.clip_grad_norm", "must be positive"));
        }
        Ok(())
    }
}

/// Cosine decay from `cfg.lr` at step 0 to `cfg.lr_floor` at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let progress = if total_steps == 0 { 0.0 } else { step.min(total_steps) as f64 / total_steps as f64 };
    cfg.lr_floor + 0.5 * (cfg.lr - cfg.lr_floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW with decoupled weight decay, keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: BTreeMap<String, Array>,
    pub v: BTreeMap<String, Array>,
    pub step: u64,
}

impl AdamW {
    /// Moments for every trainable parameter of `model`. Fails if any of
    /// them is a backbone parameter.
    pub fn new(model: &Sam3UNet) -> Result<Self> {
        let base: std::collections::BTreeSet<String> = model.base_parameter_names().into_iter().collect();
        let mut m = BTreeMap::new();
        for (name, p) in model.trainable_parameters() {
            if base.contains(name) {
                return Err(Error::Validation(format!("backbone parameter `{name}` is marked trainable")));
            }
            m.insert(name.to_string(), Array::zeros(p.value.raw_dim()));
        }
        Ok(AdamW { v: m.clone(), m, step: 0 })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.m.keys().map(String::as_str)
    }

    pub fn update(&mut self, model: &mut Sam3UNet, grads: &BTreeMap<String, Array>, lr: f64, weight_decay: f64) {
        self.step += 1;
        let (b1, b2) = ADAM_BETAS;
        let t = self.step as i32;
        let bias1 = 1.0 - b1.powi(t);
        let bias2_sqrt = (1.0 - b2.powi(t)).sqrt();
        let step_size = lr / bias1;
        for (name, g) in grads {
            let (Some(m), Some(v)) = (self.m.get_mut(name), self.v.get_mut(name)) else { continue };
            let param = model.param_mut(name).expect("optimizer names exist in the model");
            let p = param.value_mut();
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *p *= 1.0 - lr * weight_decay;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let denom = v.sqrt() / bias2_sqrt + ADAM_EPS;
                *p -= step_size * *m / denom;
            });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn history_csv(history: &[StepRecord]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for r in history {
        let _ = writeln!(out, "{},{:e},{:e}", r.step, r.lr, r.loss);
    }
    out
}

pub fn parse_history_csv(text: &str) -> Result<Vec<StepRecord>> {
    let err = |line: usize, reason: String| Error::Parse { context: format!("loss history line {line}"), reason };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "step,lr,loss")) => {}
        _ => return Err(err(1, "expected header `step,lr,loss`".into())),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 3 {
                return Err(err(i + 1, format!("expected 3 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(i + 1, e.to_string()));
            Ok(StepRecord {
                step: f[0].parse().map_err(|e: std::num::ParseIntError| err(i + 1, e.to_string()))?,
                lr: num(f[1])?,
                loss: num(f[2])?,
            })
        })
        .collect()
}

fn global_norm(grads: &BTreeMap<String, Array>) -> f64 {
    grads.values().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// One optimization step on a batch. Returns the loss before the update.
pub fn train_step(
    model: &mut Sam3UNet,
    optimizer: &mut AdamW,
    images: &Array4<f64>,
    masks: &Array4<f64>,
    loss_cfg: &LossConfig,
    lr: f64,
    train_cfg: &TrainConfig,
) -> Result<f64> {
    let (loss, mut grads, updates) = {
        let graph = Graph::new();
        let ctx = Ctx::new(&graph, NormMode::Batch);
        let out = model.forward(&ctx, ctx.input(images.clone().into_dyn()))?;
        let loss = total_loss(&out.decoder.logits, masks, loss_cfg)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite { step: optimizer.step as usize, lr, loss: value });
        }
        let grads = graph.backward(loss);
        (value, ctx.param_grads(&grads), ctx.take_stat_updates())
    };
    if let Some(limit) = train_cfg.clip_grad_norm {
        let norm = global_norm(&grads);
        if norm > limit {
            let scale = limit / (norm + 1e-6);
            grads.values_mut().for_each(|g| g.mapv_inplace(|v| v * scale));
        }
    }
    optimizer.update(model, &grads, lr, train_cfg.weight_decay);
    model.apply_stat_updates(&updates);
    Ok(loss)
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: BTreeMap<String, Array>,
    pub optimizer: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub config_text: String,
    pub history: Vec<StepRecord>,
}

const META_VERSION: &str = "format_version";

impl Checkpoint {
    pub fn capture(model: &Sam3UNet, optimizer: &AdamW, epoch: usize, seed: u64, config_text: &str, history: &[StepRecord]) -> Self {
        Checkpoint {
            params: model.named_parameters().into_iter().map(|(n, p)| (n.to_string(), (*p.value).clone())).collect(),
            optimizer: optimizer.clone(),
            epoch,
            seed,
            config_text: config_text.to_string(),
            history: history.to_vec(),
        }
    }

    pub fn to_file(&self) -> TensorFile {
        let mut file = TensorFile::new();
        for (n, t) in &self.params {
            file.tensors.insert(format!("param/{n}"), t.clone());
        }
        for (n, t) in &self.optimizer.m {
            file.tensors.insert(format!("adam.m/{n}"), t.clone());
        }
        for (n, t) in &self.optimizer.v {
            file.tensors.insert(format!("adam.v/{n}"), t.clone());
        }
        let meta = &mut file.metadata;
        meta.insert(META_VERSION.into(), CHECKPOINT_VERSION.to_string());
        meta.insert("epoch".into(), self.epoch.to_string());
        meta.insert("adam_step".into(), self.optimizer.step.to_string());
        meta.insert("seed".into(), self.seed.to_string());
        meta.insert("config".into(), self.config_text.clone());
        meta.insert("history".into(), history_csv(&self.history));
        file
    }

    pub fn from_file(file: TensorFile) -> Result<Self> {
        let meta = &file.metadata;
        let field = |k: &str| {
            meta.get(k).ok_or_else(|| Error::Parse { context: "checkpoint".into(), reason: format!("missing metadata `{k}`") })
        };
        let version = field(META_VERSION)?;
        if version != &CHECKPOINT_VERSION.to_string() {
            return Err(Error::Version { found: version.clone(), expected: CHECKPOINT_VERSION });
        }
        let int = |k: &str| -> Result<u64> {
            field(k)?.parse().map_err(|e: std::num::ParseIntError| Error::Parse {
                context: format!("checkpoint metadata `{k}`"),
                reason: e.to_string(),
            })
        };
        let (epoch, step, seed) = (int("epoch")? as usize, int("adam_step")?, int("seed")?);
        let config_text = field("config")?.clone();
        let history = parse_history_csv(field("history")?)?;
        let mut params = BTreeMap::new();
        let mut optimizer = AdamW { m: BTreeMap::new(), v: BTreeMap::new(), step };
        for (key, t) in file.tensors {
            if let Some(n) = key.strip_prefix("param/") {
                params.insert(n.to_string(), t);
            } else if let Some(n) = key.strip_prefix("adam.m/") {
                optimizer.m.insert(n.to_string(), t);
            } else if let Some(n) = key.strip_prefix("adam.v/") {
                optimizer.v.insert(n.to_string(), t);
            } else {
                return Err(Error::Parse { context: "checkpoint".into(), reason: format!("unexpected tensor `{key}`") });
            }
        }
        Ok(Checkpoint { params, optimizer, epoch, seed, config_text, history })
    }

    /// Copies every stored tensor into `model`; names and shapes must match
    /// exactly.
    pub fn restore_into(&self, model: &mut Sam3UNet) -> Result<()> {
        let expected: Vec<String> = model.named_parameters().into_iter().map(|(n, _)| n.to_string()).collect();
        if let Some(missing) = expected.iter().find(|n| !self.params.contains_key(*n)) {
            return Err(Error::Load { name: missing.clone(), reason: "absent from checkpoint".into() });
        }
        for (name, value) in &self.params {
            let param = model
                .param_mut(name)
                .ok_or_else(|| Error::Load { name: name.clone(), reason: "not a model parameter".into() })?;
            if param.value.shape() != value.shape() {
                return Err(Error::Load {
                    name: name.clone(),
                    reason: format!("shape {:?} does not match model {:?}", value.shape(), param.value.shape()),
                });
            }
            param.value = Arc::new(value.clone());
        }
        Ok(())
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    checkpoint.to_file().write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_file(TensorFile::read(path)?)
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.safetensors"))
}

pub fn last_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("last.safetensors")
}

/// Mean scores of `model` over `pairs` at the training resolution.
pub fn evaluate_pairs(model: &Sam3UNet, pairs: &[SamplePair], data: &DataConfig, metrics: &MetricsConfig) -> Result<DatasetScores> {
    let mut scores = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let s = preprocess(pair, data, false, 0, i)?;
        let probs = model.predict(&s.image.insert_axis(Axis(0)))?;
        let p = probs.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned();
        scores.push(score_image(p.view(), s.mask.view(), metrics)?);
    }
    DatasetScores::from_images(&scores).ok_or_else(|| Error::Validation("nothing to evaluate".into()))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<StepRecord>,
    pub epochs_run: usize,
    pub evaluations: Vec<(usize, DatasetScores)>,
    pub last_checkpoint: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a> {
    pub resume: Option<Checkpoint>,
    /// Pairs scored every `eval_every` epochs on a snapshot of the model.
    pub eval_pairs: Option<&'a [SamplePair]>,
    pub metrics: MetricsConfig,
    /// Written into every checkpoint.
    pub config_text: String,
    /// Print one line per epoch.
    pub verbose: bool,
}

/// Runs the remaining epochs, checkpointing after each and rewriting
/// `<checkpoint_dir>/loss.csv`.
pub fn train(
    model: &mut Sam3UNet,
    pairs: &[SamplePair],
    data: &DataConfig,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let steps_per_epoch = crate::data::steps_per_epoch(pairs.len(), cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let (mut optimizer, start_epoch, mut history) = match &opts.resume {
        Some(ck) => {
            ck.restore_into(model)?;
            let fresh = AdamW::new(model)?;
            if !fresh.m.keys().eq(ck.optimizer.m.keys()) || !fresh.m.keys().eq(ck.optimizer.v.keys()) {
                return Err(Error::Load { name: "adam".into(), reason: "optimizer state does not match trainable set".into() });
            }
            (ck.optimizer.clone(), ck.epoch, ck.history.clone())
        }
        None => (AdamW::new(model)?, 0, Vec::new()),
    };
    let mut step = start_epoch * steps_per_epoch;
    let mut data = data.clone();
    data.seed = cfg.seed;
    let mut evaluations = Vec::new();
    let last = last_checkpoint_path(&cfg.checkpoint_dir);
    for epoch in start_epoch..cfg.epochs {
        let loader = EpochLoader::spawn(pairs.to_vec(), data.clone(), cfg.batch_size, epoch, LOADER_QUEUE);
        for batch in loader {
            let batch = batch?;
            let lr = lr_at(step, total_steps, cfg);
            let loss = train_step(model, &mut optimizer, &batch.images, &batch.masks, loss_cfg, lr, cfg)
                .map_err(|e| match e {
                    Error::NonFinite { loss, .. } => Error::NonFinite { step, lr, loss },
                    other => other,
                })?;
            history.push(StepRecord { step, lr, loss });
            step += 1;
        }
        let done = epoch + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 {
            if let Some(eval) = opts.eval_pairs {
                let snapshot = model.clone();
                evaluations.push((done, evaluate_pairs(&snapshot, eval, &data, &opts.metrics)?));
            }
        }
        let periodic = cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0;
        if periodic || done == cfg.epochs {
            let ck = Checkpoint::capture(model, &optimizer, done, cfg.seed, &opts.config_text, &history);
            let path = checkpoint_path(&cfg.checkpoint_dir, done);
            save_checkpoint(&ck, &path)?;
            save_checkpoint(&ck, &last)?;
            let csv = cfg.checkpoint_dir.join("loss.csv");
            std::fs::write(&csv, history_csv(&history)).map_err(|e| Error::io(&csv, e))?;
        }
        if opts.verbose {
            let recent = &history[history.len() - steps_per_epoch.min(history.len())..];
            let mean = recent.iter().map(|r| r.loss).sum::<f64>() / recent.len() as f64;
            eprintln!("epoch {done}/{} loss {mean:.5} lr {:.3e}", cfg.epochs, lr_at(step, total_steps, cfg));
        }
    }
    Ok(TrainOutcome { history, epochs_run: cfg.epochs.saturating_sub(start_epoch), evaluations, last_checkpoint: last })
}

/// Probability map of one image at its original resolution.
pub fn predict_image(model: &Sam3UNet, data: &DataConfig, image_path: &Path) -> Result<Array2<f64>> {
    let raw = load_rgb(image_path)?;
    let size = (raw.dim().1, raw.dim().2);
    let image = normalize_image(&raw, data).insert_axis(Axis(0));
    let probs = model.predict(&image)?;
    let p = probs.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned();
    Ok(resize_bilinear(&p, size).mapv(|v| v.clamp(0.0, 1.0)))
}

/// 8-bit grayscale encoding, `round(255 · p)`.
pub fn to_gray_image(p: &Array2<f64>) -> GrayImage {
    let (h, w) = p.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([(255.0 * p[[y as usize, x as usize]]).round() as u8]))
}

/// Writes the mask predicted for `image_path` to `out_path`.
pub fn predict(model: &Sam3UNet, data: &DataConfig, image_path: &Path, out_path: &Path) -> Result<Array2<f64>> {
    let p = predict_image(model, data, image_path)?;
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    to_gray_image(&p).save(out_path).map_err(|e| Error::image(out_path, e))?;
    Ok(p)
}
