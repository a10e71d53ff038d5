//! Scalar-loop reference implementations and random instance generators
//! shared by the integration tests and the acceptance suite.

#![allow(dead_code)]

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Binary mask made of one or two random rectangles; may be empty.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
    let mut m = Array2::zeros((h, w));
    for _ in 0..rng.random_range(0..=2) {
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (y1, x1) = (rng.random_range(y0..h) + 1, rng.random_range(x0..w) + 1);
        m.slice_mut(ndarray::s![y0..y1, x0..x1]).fill(1.0);
    }
    m
}

pub fn random_mask_batch(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> Array4<f64> {
    let mut out = Array4::zeros((b, 1, h, w));
    for k in 0..b {
        out.slice_mut(ndarray::s![k, 0, .., ..]).assign(&random_mask(rng, h, w));
    }
    out
}

pub fn random_logits(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize, scale: f64) -> Array4<f64> {
    Array4::from_shape_fn((b, 1, h, w), |_| rng.random_range(-scale..scale))
}

// ---------------------------------------------------------------- losses

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `-(y ln σ(x) + (1 - y) ln(1 - σ(x)))`, direct form; fine for moderate |x|.
pub fn bce(x: f64, y: f64) -> f64 {
    let p = sigmoid(x);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// `1 + gain · |mean_k(g) − g|`, zero padding, divisor `k²`.
pub fn weight_map(gt: &Array2<f64>, k: usize, gain: f64) -> Array2<f64> {
    let (h, w) = gt.dim();
    let r = (k / 2) as isize;
    let mut out = Array2::zeros((h, w));
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut s = 0.0;
            for di in -r..=r {
                for dj in -r..=r {
                    let (y, x) = (i + di, j + dj);
                    if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
                        s += gt[[y as usize, x as usize]];
                    }
                }
            }
            let mean = s / (k * k) as f64;
            let g = gt[[i as usize, j as usize]];
            out[[i as usize, j as usize]] = 1.0 + gain * (mean - g).abs();
        }
    }
    out
}

pub fn weighted_bce_image(logits: &Array2<f64>, gt: &Array2<f64>, omega: &Array2<f64>) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for ((&x, &y), &o) in logits.iter().zip(gt).zip(omega) {
        num += o * bce(x, y);
        den += o;
    }
    num / den
}

pub fn weighted_iou_image(logits: &Array2<f64>, gt: &Array2<f64>, omega: &Array2<f64>, eps: f64) -> f64 {
    let (mut inter, mut union) = (0.0, 0.0);
    for ((&x, &g), &o) in logits.iter().zip(gt).zip(omega) {
        let p = sigmoid(x);
        inter += o * p * g;
        union += o * (p + g - p * g);
    }
    1.0 - (inter + eps) / (union + eps)
}

pub fn plane(a: &Array4<f64>, b: usize) -> Array2<f64> {
    a.slice(ndarray::s![b, 0, .., ..]).to_owned()
}

/// Batch means of `(wbce, wiou)` with default-style parameters.
pub fn structure_terms(logits: &Array4<f64>, gt: &Array4<f64>, k: usize, gain: f64, eps: f64) -> (f64, f64) {
    let b = logits.shape()[0];
    let (mut bce_sum, mut iou_sum) = (0.0, 0.0);
    for i in 0..b {
        let (l, g) = (plane(logits, i), plane(gt, i));
        let o = weight_map(&g, k, gain);
        bce_sum += weighted_bce_image(&l, &g, &o);
        iou_sum += weighted_iou_image(&l, &g, &o, eps);
    }
    (bce_sum / b as f64, iou_sum / b as f64)
}

// --------------------------------------------------------------- metrics

pub fn mae(p: &Array2<f64>, g: &Array2<f64>) -> f64 {
    let mut s = 0.0;
    for (a, b) in p.iter().zip(g) {
        s += (a - b).abs();
    }
    s / p.len() as f64
}

pub fn iou(p: &Array2<f64>, g: &Array2<f64>, t: f64) -> f64 {
    let (mut i, mut u) = (0.0, 0.0);
    for (&a, &b) in p.iter().zip(g) {
        let pa = a >= t;
        let gb = b > 0.5;
        if pa && gb {
            i += 1.0;
        }
        if pa || gb {
            u += 1.0;
        }
    }
    if u == 0.0 { 1.0 } else { i / u }
}

pub fn f_at(p: &Array2<f64>, g: &Array2<f64>, t: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.iter().zip(g) {
        match (a >= t, b > 0.5) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let rec = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    if prec + rec == 0.0 { 0.0 } else { 1.3 * prec * rec / (0.3 * prec + rec) }
}

pub fn f_adaptive(p: &Array2<f64>, g: &Array2<f64>) -> f64 {
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    f_at(p, g, (2.0 * mean).min(1.0))
}

pub fn f_max(p: &Array2<f64>, g: &Array2<f64>) -> f64 {
    (1..=256).map(|i| f_at(p, g, i as f64 / 256.0)).fold(0.0, f64::max)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() < 2 { 0.0 } else { (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt() };
    (m, s)
}

fn ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len();
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let x = p.iter().sum::<f64>() / nf;
    let y = g.iter().sum::<f64>() / nf;
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    if n > 1 {
        for k in 0..n {
            sx += (p[k] - x).powi(2) / (nf - 1.0);
            sy += (g[k] - y).powi(2) / (nf - 1.0);
            sxy += (p[k] - x) * (g[k] - y) / (nf - 1.0);
        }
    }
    let a = 4.0 * x * y * sxy;
    let b = (x * x + y * y) * (sx + sy);
    if a != 0.0 {
        a / b
    } else if b == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Python-style `round` (ties to even).
fn round_even(v: f64) -> f64 {
    let r = v.round();
    if (v - v.trunc()).abs() == 0.5 && r % 2.0 != 0.0 { r - v.signum() } else { r }
}

pub fn s_measure(p: &Array2<f64>, g: &Array2<f64>) -> f64 {
    let (h, w) = g.dim();
    let n = (h * w) as f64;
    let gm = g.iter().sum::<f64>() / n;
    let pm = p.iter().sum::<f64>() / n;
    if gm == 0.0 {
        return 1.0 - pm;
    }
    if gm == 1.0 {
        return pm;
    }
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (&a, &b) in p.iter().zip(g) {
        if b > 0.5 { fg.push(a) } else { bg.push(1.0 - a) }
    }
    let so = |v: &[f64]| {
        let (m, s) = mean_std(v);
        2.0 * m / (m * m + 1.0 + s)
    };
    let object = gm * so(&fg) + (1.0 - gm) * so(&bg);

    let (mut cy, mut cx, mut c) = (0.0, 0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            if g[[i, j]] > 0.5 {
                cy += i as f64;
                cx += j as f64;
                c += 1.0;
            }
        }
    }
    let y = (round_even(cy / c) as usize + 1).min(h);
    let x = (round_even(cx / c) as usize + 1).min(w);
    let mut region = 0.0;
    for (r0, r1, c0, c1) in [(0, y, 0, x), (0, y, x, w), (y, h, 0, x), (y, h, x, w)] {
        let (mut pv, mut gv) = (Vec::new(), Vec::new());
        for i in r0..r1 {
            for j in c0..c1 {
                pv.push(p[[i, j]]);
                gv.push(g[[i, j]]);
            }
        }
        region += ((r1 - r0) * (c1 - c0)) as f64 / n * ssim(&pv, &gv);
    }
    (0.5 * object + 0.5 * region).max(0.0)
}

pub fn e_at(p: &Array2<f64>, g: &Array2<f64>, t: f64) -> f64 {
    let n = p.len() as f64;
    let fm: Vec<f64> = p.iter().map(|&v| if v >= t { 1.0 } else { 0.0 }).collect();
    let gt: Vec<f64> = g.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
    let gsum: f64 = gt.iter().sum();
    let enhanced: Vec<f64> = if gsum == 0.0 {
        fm.iter().map(|f| 1.0 - f).collect()
    } else if gsum == n {
        fm.clone()
    } else {
        let mf = fm.iter().sum::<f64>() / n;
        let mg = gsum / n;
        fm.iter()
            .zip(&gt)
            .map(|(f, q)| {
                let (a, b) = (f - mf, q - mg);
                let align = 2.0 * a * b / (a * a + b * b);
                (align + 1.0) * (align + 1.0) / 4.0
            })
            .collect()
    };
    enhanced.iter().sum::<f64>() / n
}

pub fn e_mean(p: &Array2<f64>, g: &Array2<f64>) -> f64 {
    (1..=256).map(|i| e_at(p, g, i as f64 / 256.0)).sum::<f64>() / 256.0
}

/// Random prediction/ground-truth pair of size at most 8×8. Some predictions
/// are quantized to 8-bit levels so threshold ties occur.
pub fn random_metric_instance(rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
    let g = match rng.random_range(0..10) {
        0 => Array2::zeros((h, w)),
        1 => Array2::ones((h, w)),
        _ => random_mask(rng, h, w),
    };
    let quantize = rng.random_bool(0.5);
    let p = Array2::from_shape_fn((h, w), |_| {
        let v: f64 = rng.random();
        if quantize { (v * 255.0).round() / 255.0 } else { v }
    });
    (p, g)
}

// ----------------------------------------------------- finite differences

/// `||a − b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 { diff } else { diff / scale }
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

// ------------------------------------------------------ decoder reference

use sam3unet::params::ParamStore;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn conv1x1_bn_gelu(store: &ParamStore, prefix: &str, x: &Array4<f64>) -> Array4<f64> {
    let w = store.value(&format!("{prefix}.conv.weight"));
    let bias = store.value(&format!("{prefix}.conv.bias"));
    let (b, c, h, wd) = x.dim();
    let out = w.shape()[0];
    let mut y = Array4::zeros((b, out, h, wd));
    for n in 0..b {
        for o in 0..out {
            for i in 0..h {
                for j in 0..wd {
                    let mut s = bias[[o]];
                    for k in 0..c {
                        s += w[[o, k, 0, 0]] * x[[n, k, i, j]];
                    }
                    y[[n, o, i, j]] = s;
                }
            }
        }
    }
    bn_gelu(store, prefix, y)
}

fn dw3x3_bn_gelu(store: &ParamStore, prefix: &str, x: &Array4<f64>) -> Array4<f64> {
    let w = store.value(&format!("{prefix}.conv.weight"));
    let bias = store.value(&format!("{prefix}.conv.bias"));
    let (b, c, h, wd) = x.dim();
    let mut y = Array4::zeros((b, c, h, wd));
    for n in 0..b {
        for k in 0..c {
            for i in 0..h {
                for j in 0..wd {
                    let mut s = bias[[k]];
                    for di in 0..3 {
                        for dj in 0..3 {
                            let (yy, xx) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                            if yy >= 0 && yy < h as isize && xx >= 0 && xx < wd as isize {
                                s += w[[k, 0, di, dj]] * x[[n, k, yy as usize, xx as usize]];
                            }
                        }
                    }
                    y[[n, k, i, j]] = s;
                }
            }
        }
    }
    bn_gelu(store, prefix, y)
}

fn bn_gelu(store: &ParamStore, prefix: &str, mut y: Array4<f64>) -> Array4<f64> {
    let get = |s: &str| store.value(&format!("{prefix}.bn.{s}")).clone();
    let (g, bt, m, v) = (get("weight"), get("bias"), get("running_mean"), get("running_var"));
    for ((_, k, _, _), e) in y.indexed_iter_mut() {
        *e = gelu(g[[k]] * (*e - m[[k]]) / (v[[k]] + 1e-5).sqrt() + bt[[k]]);
    }
    y
}

/// Lightweight block with running batch-norm statistics, written as loops.
pub fn block_reference(store: &ParamStore, prefix: &str, x: &Array4<f64>) -> Array4<f64> {
    let p = conv1x1_bn_gelu(store, &format!("{prefix}.reduce"), x);
    let half = p.shape()[1] / 2;
    let p1 = p.slice(ndarray::s![.., ..half, .., ..]).to_owned();
    let p2 = p.slice(ndarray::s![.., half.., .., ..]).to_owned();
    let p3 = dw3x3_bn_gelu(store, &format!("{prefix}.dw1"), &p2);
    let p4 = dw3x3_bn_gelu(store, &format!("{prefix}.dw2"), &p3);
    let cat = ndarray::concatenate(ndarray::Axis(1), &[p1.view(), p2.view(), p3.view(), p4.view()]).unwrap();
    conv1x1_bn_gelu(store, &format!("{prefix}.expand"), &cat)
}

/// Replaces every batch-norm tensor with random values so running-mode
/// normalization is non-trivial.
pub fn randomize_bn(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for (name, param) in store.iter_mut() {
        let range = if name.ends_with("running_var") {
            0.5..1.5
        } else if name.ends_with(".bn.weight") {
            0.5..1.5
        } else if name.contains(".bn.") {
            -0.3..0.3
        } else {
            continue;
        };
        for v in param.value_mut().iter_mut() {
            *v = rng.random_range(range.clone());
        }
    }
}

// --------------------------------------------------------- gradient checks

use sam3unet::decoder::Decoder;
use sam3unet::losses::{total_loss, LossConfig};
use sam3unet::nn::{Ctx, NormMode};
use sam3unet::pyramid::FeaturePyramid;
use sam3unet_tensor::Graph;

const FD_STEP: f64 = 1e-5;

/// Relative error between analytic and central-difference gradients of
/// `total_loss` with respect to three heads of random logits.
pub fn loss_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let gt = random_mask_batch(&mut r, 2, 6, 6);
    let heads: Vec<Array4<f64>> = (0..3).map(|_| random_logits(&mut r, 2, 6, 6, 3.0)).collect();
    let cfg = LossConfig { pool_kernel: 3, ..LossConfig::default() };

    let g = Graph::new();
    let leaves: Vec<_> = heads.iter().map(|h| g.leaf(h.clone().into_dyn(), true)).collect();
    let grads = g.backward(total_loss(&leaves, &gt, &cfg).unwrap());
    let analytic: Vec<f64> = leaves.iter().flat_map(|&l| grads.get(l).unwrap().iter().copied().collect::<Vec<_>>()).collect();

    let flat: Vec<f64> = heads.iter().flat_map(|h| h.iter().copied()).collect();
    let n = heads[0].len();
    let numeric = numeric_grad(&flat, FD_STEP, |x| {
        let g = Graph::no_grad();
        let vars: Vec<_> = (0..3)
            .map(|k| g.constant(Array4::from_shape_vec((2, 1, 6, 6), x[k * n..(k + 1) * n].to_vec()).unwrap().into_dyn()))
            .collect();
        total_loss(&vars, &gt, &cfg).unwrap().item()
    });
    relative_error(&analytic, &numeric)
}

fn decoder_loss(decoder: &Decoder, levels: &[Array4<f64>; 4], gt: &Array4<f64>, grad: bool) -> (f64, Vec<(String, Vec<f64>)>) {
    let g = if grad { Graph::new() } else { Graph::no_grad() };
    let ctx = Ctx::new(&g, NormMode::Running);
    let pyramid = FeaturePyramid {
        levels: std::array::from_fn(|k| ctx.input(levels[k].clone().into_dyn())),
        input_size: (gt.shape()[2], gt.shape()[3]),
    };
    let out = decoder.forward(&ctx, &pyramid).unwrap();
    let loss = total_loss(&out.logits, gt, &LossConfig::default()).unwrap();
    let value = loss.item();
    if !grad {
        return (value, Vec::new());
    }
    let grads = g.backward(loss);
    let named = ctx.param_grads(&grads).into_iter().map(|(k, v)| (k, v.iter().copied().collect())).collect();
    (value, named)
}

/// Worst per-tensor relative gradient error over every trainable parameter
/// of an 8-channel decoder with fixed batch-norm statistics, and the number
/// of scalars checked.
pub fn decoder_gradient_error(seed: u64) -> (f64, usize) {
    let mut r = rng(seed);
    let mut decoder = Decoder::with_channels(8, seed).unwrap();
    randomize_bn(decoder.params_mut(), &mut r);
    let sizes = [(4, 4), (2, 2), (1, 1), (1, 1)];
    let levels: [Array4<f64>; 4] = std::array::from_fn(|k| Array4::from_shape_fn((2, 8, sizes[k].0, sizes[k].1), |_| r.random_range(-1.0..1.0)));
    let gt = random_mask_batch(&mut r, 2, 8, 8);

    let (_, analytic) = decoder_loss(&decoder, &levels, &gt, true);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (name, a) in analytic {
        let mut numeric = Vec::with_capacity(a.len());
        for i in 0..a.len() {
            let orig = decoder.params().value(&name).as_slice().unwrap()[i];
            let mut at = |v: f64| {
                decoder.params_mut().get_mut(&name).unwrap().value_mut().as_slice_mut().unwrap()[i] = v;
                decoder_loss(&decoder, &levels, &gt, false).0
            };
            let d = (at(orig + FD_STEP) - at(orig - FD_STEP)) / (2.0 * FD_STEP);
            at(orig);
            numeric.push(d);
        }
        checked += a.len();
        worst = worst.max(relative_error(&a, &numeric));
    }
    (worst, checked)
}
