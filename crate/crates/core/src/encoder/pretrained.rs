//! Importing backbone weights from a named-tensor file.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use sam3unet_tensor::Array;

use super::{resize_pos_embed, AdaptedEncoder, PREFIX};
use crate::error::{Error, Result};
use crate::params::Role;
use crate::tensor_file::TensorFile;

const KEYMAP_HEADER: &str = "sam3unet-keymap";
const KEYMAP_VERSION: u32 = 1;

/// Ordered `source => internal` rename rules. A rule may contain one `{i}`
/// placeholder matching a block index. Keys that match no rule are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyMap {
    rules: Vec<(String, String)>,
}

fn split_placeholder(pattern: &str) -> (&str, Option<&str>) {
    match pattern.split_once("{i}") {
        Some((pre, post)) => (pre, Some(post)),
        None => (pattern, None),
    }
}

impl KeyMap {
    /// Mapping from the SAM3 release checkpoint's vision trunk.
    pub fn sam3() -> Self {
        Self::parse(include_str!("../../assets/sam3_vit.keymap")).expect("bundled key map parses")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let parse_err = |line: usize, reason: String| Error::Parse { context: format!("key map line {line}"), reason };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (n, header) = lines.next().ok_or_else(|| parse_err(1, "empty key map".into()))?;
        let version = header
            .strip_prefix(KEYMAP_HEADER)
            .map(str::trim)
            .ok_or_else(|| parse_err(n, format!("expected `{KEYMAP_HEADER} <version>` header")))?;
        if version != KEYMAP_VERSION.to_string() {
            return Err(Error::Version { found: version.to_string(), expected: KEYMAP_VERSION });
        }
        let mut rules = Vec::new();
        for (n, line) in lines {
            let (src, dst) = line.split_once("=>").ok_or_else(|| parse_err(n, format!("expected `src => dst`, got `{line}`")))?;
            let (src, dst) = (src.trim().to_string(), dst.trim().to_string());
            if src.matches("{i}").count() > 1 || src.contains("{i}") != dst.contains("{i}") {
                return Err(parse_err(n, "`{i}` must appear once on both sides or not at all".into()));
            }
            rules.push((src, dst));
        }
        Ok(KeyMap { rules })
    }

    pub fn map(&self, key: &str) -> Option<String> {
        self.rules.iter().find_map(|(src, dst)| match split_placeholder(src) {
            (exact, None) => (key == exact).then(|| dst.clone()),
            (pre, Some(post)) => {
                let middle = key.strip_prefix(pre)?.strip_suffix(post)?;
                (!middle.is_empty() && middle.bytes().all(|b| b.is_ascii_digit())).then(|| dst.replace("{i}", middle))
            }
        })
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Fail unless every base parameter is found and no key is left over.
    pub strict: bool,
    /// Rename rules applied to file keys; `None` expects internal names.
    pub key_map: Option<KeyMap>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Loaded after bicubic resampling to the configured grid.
    pub resized: Vec<String>,
    /// Base parameters absent from the file.
    pub missing: Vec<String>,
    /// File keys inside the encoder namespace that match no base parameter.
    pub unexpected: Vec<String>,
    /// Keys outside the backbone (adapters, other components, foreign keys).
    pub ignored: usize,
}

impl LoadReport {
    pub fn unmatched(&self) -> Vec<String> {
        self.missing.iter().chain(&self.unexpected).cloned().collect()
    }
}

fn square_side(tokens: usize) -> Option<usize> {
    let s = (tokens as f64).sqrt().round() as usize;
    (s * s == tokens).then_some(s)
}

impl AdaptedEncoder {
    pub fn load_pretrained(&mut self, path: &Path, opts: &LoadOptions) -> Result<LoadReport> {
        let file = TensorFile::read(path)?;
        self.load_tensors(&file, opts)
    }

    /// Overwrites base parameters from `file`. Adapters are never touched.
    pub fn load_tensors(&mut self, file: &TensorFile, opts: &LoadOptions) -> Result<LoadReport> {
        let base: BTreeSet<String> = self.base_parameters().into_iter().map(|(n, _)| n.to_string()).collect();
        let mut report = LoadReport::default();
        let mut staged: Vec<(String, Array)> = Vec::new();
        let adapter_ns = format!("{PREFIX}.adapters.");
        let encoder_ns = format!("{PREFIX}.");
        for (key, value) in &file.tensors {
            let internal = match &opts.key_map {
                Some(map) => map.map(key),
                None => Some(key.clone()),
            };
            let Some(internal) = internal else {
                report.ignored += 1;
                continue;
            };
            if !internal.starts_with(&encoder_ns) || internal.starts_with(&adapter_ns) {
                report.ignored += 1;
                continue;
            }
            if !base.contains(&internal) {
                report.unexpected.push(key.clone());
                continue;
            }
            let target = self.params.value(&internal).shape().to_vec();
            let value = if value.shape() == target.as_slice() {
                value.clone()
            } else if internal == format!("{PREFIX}.pos_embed") {
                let adapted = self.adapt_pos_embed(key, value, &target)?;
                report.resized.push(internal.clone());
                adapted
            } else {
                let flat = value.len() == target.iter().product::<usize>() && value.ndim() != target.len();
                if !flat {
                    return Err(Error::Load {
                        name: key.clone(),
                        reason: format!("shape {:?} does not match expected {:?}", value.shape(), target),
                    });
                }
                value.clone().into_shape_with_order(IxDyn(&target)).expect("same element count")
            };
            staged.push((internal, value));
        }
        let found: BTreeSet<&String> = staged.iter().map(|(n, _)| n).collect();
        report.missing = base.iter().filter(|n| !found.contains(n)).cloned().collect();
        if opts.strict && (!report.missing.is_empty() || !report.unexpected.is_empty()) {
            let mut parts = Vec::new();
            if !report.missing.is_empty() {
                parts.push(format!("missing {}", report.missing.join(", ")));
            }
            if !report.unexpected.is_empty() {
                parts.push(format!("unexpected {}", report.unexpected.join(", ")));
            }
            let name = report.unexpected.first().or(report.missing.first()).cloned().unwrap_or_default();
            return Err(Error::Load { name, reason: format!("strict load failed: {}", parts.join("; ")) });
        }
        for (name, value) in staged {
            let param = self.params.get_mut(&name).expect("staged names are base parameters");
            debug_assert_eq!(param.role, Role::Frozen);
            param.value = Arc::new(value);
            report.loaded.push(name);
        }
        Ok(report)
    }

    /// Accepts `(1, N, D)`, `(N, D)` or `(1, 1 + N, D)` (leading class token)
    /// grids and resamples the square grid to the configured one.
    fn adapt_pos_embed(&self, key: &str, value: &Array, target: &[usize]) -> Result<Array> {
        let d = target[2];
        let fail = |reason: String| Error::Load { name: key.to_string(), reason };
        if *value.shape().last().unwrap_or(&0) != d {
            return Err(fail(format!("positional embedding width {:?} does not match {d}", value.shape())));
        }
        let tokens = value.len() / d;
        let flat = value.clone().into_shape_with_order(IxDyn(&[1, tokens, d])).expect("same element count");
        let (flat, tokens) = match (square_side(tokens), square_side(tokens.saturating_sub(1))) {
            (Some(_), _) => (flat, tokens),
            (None, Some(_)) => {
                let grid = flat.slice(ndarray::s![.., 1.., ..]).to_owned().into_dyn();
                (grid, tokens - 1)
            }
            _ => return Err(fail(format!("{tokens} positional tokens do not form a square grid"))),
        };
        let side = square_side(tokens).expect("checked above");
        let out: ArrayD<f64> = resize_pos_embed(&flat, (side, side), self.config().grid());
        Ok(out)
    }
}
