//! Image/mask datasets: indexing, preprocessing, augmentation, batching and a
//! synthetic generator.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sam3unet_tensor::{bilinear_plane, nearest_indices};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];
const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Subdirectory names of known dataset layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// `images/` + `masks/`, as written by [`make_synthetic`].
    Plain,
    /// `image/` + `mask/` (MSD and PMD splits).
    Mirror,
    /// `DUTS-TR-Image/` + `DUTS-TR-Mask/`.
    DutsTr,
    /// `DUTS-TE-Image/` + `DUTS-TE-Mask/`.
    DutsTe,
}

impl Layout {
    pub fn subdirs(self) -> (&'static str, &'static str) {
        match self {
            Layout::Plain => ("images", "masks"),
            Layout::Mirror => ("image", "mask"),
            Layout::DutsTr => ("DUTS-TR-Image", "DUTS-TR-Mask"),
            Layout::DutsTe => ("DUTS-TE-Image", "DUTS-TE-Mask"),
        }
    }
}

impl std::str::FromStr for Layout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Layout::Plain),
            "mirror" => Ok(Layout::Mirror),
            "duts-tr" => Ok(Layout::DutsTr),
            "duts-te" => Ok(Layout::DutsTe),
            other => Err(Error::config("data.layout", format!("unknown layout `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub root: PathBuf,
    pub image_subdir: String,
    pub mask_subdir: String,
    pub input_size: (usize, usize),
    pub normalize_mean: [f64; 3],
    pub normalize_std: [f64; 3],
    pub flip_prob: f64,
    pub seed: u64,
    /// Fail on images without masks and vice versa.
    pub strict: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let (image_subdir, mask_subdir) = Layout::Plain.subdirs();
        DataConfig {
            root: PathBuf::from("data"),
            image_subdir: image_subdir.into(),
            mask_subdir: mask_subdir.into(),
            input_size: (336, 336),
            normalize_mean: IMAGENET_MEAN,
            normalize_std: IMAGENET_STD,
            flip_prob: 0.5,
            seed: 0,
            strict: false,
        }
    }
}

impl DataConfig {
    pub fn with_layout(mut self, layout: Layout) -> Self {
        let (i, m) = layout.subdirs();
        self.image_subdir = i.into();
        self.mask_subdir = m.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 14 != 0 || w % 14 != 0 {
            return Err(Error::config("data.input_size", format!("{h}x{w} is not a positive multiple of 14")));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("data.flip_prob", format!("{} is outside [0, 1]", self.flip_prob)));
        }
        if self.normalize_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("data.normalize_std", "every channel must be positive"));
        }
        Ok(())
    }

    pub fn image_dir(&self) -> PathBuf {
        self.root.join(&self.image_subdir)
    }

    pub fn mask_dir(&self) -> PathBuf {
        self.root.join(&self.mask_subdir)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplePair {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetIndex {
    /// Sorted by id.
    pub pairs: Vec<SamplePair>,
    /// Files without a partner.
    pub orphans: Vec<PathBuf>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files of `dir` keyed by stem. Two files sharing a stem are an error.
pub fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || !is_image(&path) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        let name = PathBuf::from(path.file_name().expect("file has a name"));
        if let Some(prev) = out.insert(stem.to_string(), name.clone()) {
            return Err(Error::Validation(format!(
                "{} and {} share the stem `{stem}`",
                dir.join(prev).display(),
                dir.join(name).display()
            )));
        }
    }
    Ok(out)
}

/// Pairs images with masks by stem.
pub fn index_dataset(cfg: &DataConfig) -> Result<DatasetIndex> {
    let (image_dir, mask_dir) = (cfg.image_dir(), cfg.mask_dir());
    let images = list_images(&image_dir)?;
    let masks = list_images(&mask_dir)?;
    let mut index = DatasetIndex::default();
    for (stem, file) in &images {
        match masks.get(stem) {
            Some(mask) => index.pairs.push(SamplePair {
                id: stem.clone(),
                image: image_dir.join(file),
                mask: mask_dir.join(mask),
            }),
            None => index.orphans.push(image_dir.join(file)),
        }
    }
    index.orphans.extend(masks.iter().filter(|(k, _)| !images.contains_key(*k)).map(|(_, f)| mask_dir.join(f)));
    if cfg.strict && !index.orphans.is_empty() {
        return Err(Error::Unmatched(index.orphans.iter().map(|p| p.display().to_string()).collect()));
    }
    Ok(index)
}

/// RGB image as `(3, H, W)` in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

/// Grayscale image in `[0, 1]`.
pub fn load_gray(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0))
}

/// Binary mask; pixels at or above 128 are foreground.
pub fn load_mask(path: &Path) -> Result<Array2<f64>> {
    Ok(load_gray(path)?.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

pub fn resize_bilinear(plane: &Array2<f64>, size: (usize, usize)) -> Array2<f64> {
    let (h, w) = plane.dim();
    if (h, w) == size {
        return plane.clone();
    }
    let flat: Vec<f64> = plane.iter().copied().collect();
    Array2::from_shape_vec(size, bilinear_plane(&flat, h, w, size.0, size.1)).expect("resized plane")
}

pub fn resize_nearest(plane: &Array2<f64>, size: (usize, usize)) -> Array2<f64> {
    let (h, w) = plane.dim();
    let rows = nearest_indices(h, size.0);
    let cols = nearest_indices(w, size.1);
    Array2::from_shape_fn(size, |(i, j)| plane[[rows[i], cols[j]]])
}

/// Deterministic stream for one sample of one epoch.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(index as u64).to_le_bytes());
    key[24..].copy_from_slice(b"sample\0\0");
    ChaCha8Rng::from_seed(key)
}

/// Flip decisions for one training sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Flips {
    pub horizontal: bool,
    pub vertical: bool,
}

impl Flips {
    pub fn draw(prob: f64, rng: &mut impl Rng) -> Self {
        let horizontal = rng.random::<f64>() < prob;
        let vertical = rng.random::<f64>() < prob;
        Flips { horizontal, vertical }
    }
}

fn reverse_lanes(mut p: ndarray::ArrayViewMut2<'_, f64>, axis: Axis) {
    for mut lane in p.lanes_mut(axis) {
        let n = lane.len();
        for i in 0..n / 2 {
            lane.swap(i, n - 1 - i);
        }
    }
}

/// Flips in place; the data moves, not just the strides.
fn flip_plane(mut p: ndarray::ArrayViewMut2<'_, f64>, flips: Flips) {
    if flips.horizontal {
        reverse_lanes(p.view_mut(), Axis(1));
    }
    if flips.vertical {
        reverse_lanes(p.view_mut(), Axis(0));
    }
}

/// Network-ready sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `(3, H, W)`, normalized.
    pub image: Array3<f64>,
    /// `(H, W)` in `{0, 1}`.
    pub mask: Array2<f64>,
    pub original_size: (usize, usize),
}

/// Resizes and normalizes a raw `(3, h, w)` image in `[0, 1]`.
pub fn normalize_image(raw: &Array3<f64>, cfg: &DataConfig) -> Array3<f64> {
    let mut out = Array3::zeros((3, cfg.input_size.0, cfg.input_size.1));
    for c in 0..3 {
        let resized = resize_bilinear(&raw.index_axis(Axis(0), c).to_owned(), cfg.input_size);
        let (m, s) = (cfg.normalize_mean[c], cfg.normalize_std[c]);
        out.index_axis_mut(Axis(0), c).assign(&resized.mapv(|v| (v - m) / s));
    }
    out
}

/// Loads one pair. In training mode both planes receive the same flips,
/// drawn from `sample_rng(cfg.seed, epoch, index)`.
pub fn preprocess(pair: &SamplePair, cfg: &DataConfig, training: bool, epoch: usize, index: usize) -> Result<Sample> {
    let raw = load_rgb(&pair.image)?;
    let mask = load_mask(&pair.mask)?;
    let size = (raw.dim().1, raw.dim().2);
    if mask.dim() != size {
        return Err(Error::Validation(format!(
            "image {} is {}x{} but its mask is {}x{}",
            pair.image.display(),
            size.0,
            size.1,
            mask.dim().0,
            mask.dim().1
        )));
    }
    let mut image = normalize_image(&raw, cfg);
    let mut mask = resize_nearest(&mask, cfg.input_size);
    if training {
        let flips = Flips::draw(cfg.flip_prob, &mut sample_rng(cfg.seed, epoch, index));
        for c in 0..3 {
            flip_plane(image.index_axis_mut(Axis(0), c), flips);
        }
        flip_plane(mask.view_mut(), flips);
    }
    Ok(Sample { id: pair.id.clone(), image, mask, original_size: size })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub indices: Vec<usize>,
    /// `(B, 3, H, W)`.
    pub images: Array4<f64>,
    /// `(B, 1, H, W)`.
    pub masks: Array4<f64>,
}

impl Batch {
    pub fn collate(indices: Vec<usize>, samples: Vec<Sample>) -> Self {
        let (h, w) = samples[0].mask.dim();
        let b = samples.len();
        let mut images = Array4::zeros((b, 3, h, w));
        let mut masks = Array4::zeros((b, 1, h, w));
        for (k, s) in samples.iter().enumerate() {
            images.slice_mut(s![k, .., .., ..]).assign(&s.image);
            masks.slice_mut(s![k, 0, .., ..]).assign(&s.mask);
        }
        Batch { ids: samples.into_iter().map(|s| s.id).collect(), indices, images, masks }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Sample order for `epoch`, a seeded permutation.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[24..].copy_from_slice(b"shuffle\0");
    order.shuffle(&mut ChaCha8Rng::from_seed(key));
    order
}

/// Index groups of one epoch; the last group may be short.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    epoch_order(n, seed, epoch).chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1))
}

/// Background thread that preprocesses one epoch into a bounded queue.
pub struct EpochLoader {
    rx: Receiver<Result<Batch>>,
    handle: Option<JoinHandle<()>>,
}

impl EpochLoader {
    pub fn spawn(pairs: Vec<SamplePair>, cfg: DataConfig, batch_size: usize, epoch: usize, capacity: usize) -> Self {
        let (tx, rx) = sync_channel(capacity.max(1));
        let handle = std::thread::spawn(move || {
            for indices in epoch_batches(pairs.len(), batch_size, cfg.seed, epoch) {
                let samples: Result<Vec<Sample>> =
                    indices.par_iter().map(|&i| preprocess(&pairs[i], &cfg, true, epoch, i)).collect();
                let item = samples.map(|s| Batch::collate(indices, s));
                let failed = item.is_err();
                if tx.send(item).is_err() || failed {
                    break;
                }
            }
        });
        EpochLoader { rx, handle: Some(handle) }
    }
}

impl Iterator for EpochLoader {
    type Item = Result<Batch>;
    fn next(&mut self) -> Option<Self::Item> {
        self.rx.recv().ok()
    }
}

impl Drop for EpochLoader {
    fn drop(&mut self) {
        // Unblock the producer before joining it.
        let (_, dead) = sync_channel(1);
        drop(std::mem::replace(&mut self.rx, dead));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    /// Foreground area bounds as fractions of the image.
    pub min_area: f64,
    pub max_area: f64,
}

impl SyntheticConfig {
    pub fn new(count: usize, size: usize, seed: u64) -> Self {
        SyntheticConfig { count, size, seed, min_area: 0.1, max_area: 0.6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSummary {
    pub root: PathBuf,
    pub ids: Vec<String>,
    pub areas: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Ellipse { cy, cx, ry, rx } => ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0,
        }
    }

    fn draw(rng: &mut ChaCha8Rng, size: f64) -> Self {
        if rng.random_bool(0.5) {
            let h = rng.random_range(0.3..0.8) * size;
            let w = rng.random_range(0.3..0.8) * size;
            let y0 = rng.random_range(0.0..size - h);
            let x0 = rng.random_range(0.0..size - w);
            Shape::Rect { y0, x0, y1: y0 + h, x1: x0 + w }
        } else {
            let ry = rng.random_range(0.18..0.42) * size;
            let rx = rng.random_range(0.18..0.42) * size;
            let cy = rng.random_range(ry..size - ry);
            let cx = rng.random_range(rx..size - rx);
            Shape::Ellipse { cy, cx, ry, rx }
        }
    }
}

fn synthetic_mask(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig) -> Array2<f64> {
    let n = cfg.size;
    let total = (n * n) as f64;
    loop {
        let shape = Shape::draw(rng, n as f64);
        let mask = Array2::from_shape_fn((n, n), |(y, x)| shape.contains(y as f64 + 0.5, x as f64 + 0.5) as u8 as f64);
        let area = mask.sum() / total;
        if area >= cfg.min_area && area <= cfg.max_area {
            return mask;
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]
}

/// Writes `count` image/mask pairs under `<root>/images` and `<root>/masks`.
/// Foreground and background get distinct colors with mild noise.
pub fn make_synthetic(root: &Path, cfg: &SyntheticConfig) -> Result<SyntheticSummary> {
    if cfg.count == 0 {
        return Err(Error::config("count", "must be at least 1"));
    }
    if cfg.size < 8 {
        return Err(Error::config("size", "must be at least 8"));
    }
    if !(0.0 < cfg.min_area && cfg.min_area < cfg.max_area && cfg.max_area < 1.0) {
        return Err(Error::config("area", "bounds must satisfy 0 < min < max < 1"));
    }
    let (image_subdir, mask_subdir) = Layout::Plain.subdirs();
    let (image_dir, mask_dir) = (root.join(image_subdir), root.join(mask_subdir));
    for d in [&image_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut summary = SyntheticSummary { root: root.to_path_buf(), ids: Vec::new(), areas: Vec::new() };
    let width = (cfg.count - 1).to_string().len().max(4);
    for i in 0..cfg.count {
        let mask = synthetic_mask(&mut rng, cfg);
        let bg = random_color(&mut rng);
        let mut fg = random_color(&mut rng);
        while (0..3).map(|c| (fg[c] - bg[c]).abs()).sum::<f64>() < 0.8 {
            fg = random_color(&mut rng);
        }
        let n = cfg.size as u32;
        let mut img: RgbImage = ImageBuffer::new(n, n);
        for (x, y, px) in img.enumerate_pixels_mut() {
            let base = if mask[[y as usize, x as usize]] > 0.5 { fg } else { bg };
            let mut c = |k: usize| ((base[k] + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0) * 255.0).round() as u8;
            *px = Rgb([c(0), c(1), c(2)]);
        }
        let m: GrayImage =
            ImageBuffer::from_fn(n, n, |x, y| Luma([if mask[[y as usize, x as usize]] > 0.5 { 255 } else { 0 }]));
        let id = format!("{i:0width$}");
        let (ip, mp) = (image_dir.join(format!("{id}.png")), mask_dir.join(format!("{id}.png")));
        img.save(&ip).map_err(|e| Error::image(&ip, e))?;
        m.save(&mp).map_err(|e| Error::image(&mp, e))?;
        summary.areas.push(mask.sum() / (cfg.size * cfg.size) as f64);
        summary.ids.push(id);
    }
    Ok(summary)
}
