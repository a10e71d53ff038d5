//! Separable resampling with half-pixel centers (`align_corners = false`).
//!
//! The plane kernels are plain functions so image I/O code can share them
//! with the differentiable op.

use ndarray::{Array4, Ix4};

use crate::graph::Var;

/// One output coordinate as a blend of two neighbouring source samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearTap {
    pub lo: usize,
    pub hi: usize,
    /// Weight of `hi`; `lo` gets `1 - frac`.
    pub frac: f64,
}

pub fn linear_taps(in_len: usize, out_len: usize) -> Vec<LinearTap> {
    assert!(in_len > 0 && out_len > 0, "resample lengths must be positive");
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            LinearTap { lo, hi, frac: if hi == lo { 0.0 } else { src - lo as f64 } }
        })
        .collect()
}

/// Bilinear resize of a row-major `h × w` plane.
pub fn bilinear_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w);
    let (ty, tx) = (linear_taps(h, oh), linear_taps(w, ow));
    let mut out = Vec::with_capacity(oh * ow);
    for ry in &ty {
        let (r0, r1) = (&src[ry.lo * w..(ry.lo + 1) * w], &src[ry.hi * w..(ry.hi + 1) * w]);
        for rx in &tx {
            let top = r0[rx.lo] * (1.0 - rx.frac) + r0[rx.hi] * rx.frac;
            let bottom = r1[rx.lo] * (1.0 - rx.frac) + r1[rx.hi] * rx.frac;
            out.push(top * (1.0 - ry.frac) + bottom * ry.frac);
        }
    }
    out
}

/// Nearest-neighbour resize with the same half-pixel source mapping
/// (`floor((i + 0.5) · in / out)`). Preserves the value set exactly.
pub fn nearest_indices(in_len: usize, out_len: usize) -> Vec<usize> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len).map(|i| (((i as f64 + 0.5) * scale).floor() as usize).min(in_len - 1)).collect()
}

fn cubic_weights(t: f64) -> [f64; 4] {
    const A: f64 = -0.75;
    let near = |x: f64| ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0;
    let far = |x: f64| ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A;
    [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)]
}

/// Bicubic resize (Keys kernel, a = -0.75, border-clamped taps) of a
/// row-major plane. Used for positional-embedding grids.
pub fn bicubic_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w);
    let taps = |in_len: usize, out_len: usize| -> Vec<([usize; 4], [f64; 4])> {
        let scale = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|i| {
                let s = (i as f64 + 0.5) * scale - 0.5;
                let base = s.floor();
                let idx = [-1.0, 0.0, 1.0, 2.0].map(|o: f64| (base + o).clamp(0.0, (in_len - 1) as f64) as usize);
                (idx, cubic_weights(s - base))
            })
            .collect()
    };
    let (ty, tx) = (taps(h, oh), taps(w, ow));
    let mut out = Vec::with_capacity(oh * ow);
    for (iy, wy) in &ty {
        for (ix, wx) in &tx {
            let mut acc = 0.0;
            for a in 0..4 {
                for b in 0..4 {
                    acc += wy[a] * wx[b] * src[iy[a] * w + ix[b]];
                }
            }
            out.push(acc);
        }
    }
    out
}

impl<'g> Var<'g> {
    /// Bilinear resize of `(B, C, H, W)` to `(B, C, oh, ow)`.
    pub fn resize_bilinear(self, oh: usize, ow: usize) -> Var<'g> {
        let x = self.value().view().into_dimensionality::<Ix4>().expect("resize input rank").as_standard_layout().into_owned();
        let (batch, c, h, w) = x.dim();
        if (h, w) == (oh, ow) {
            return self;
        }
        let (ty, tx) = (linear_taps(h, oh), linear_taps(w, ow));
        let mut out = Array4::<f64>::zeros((batch, c, oh, ow));
        for b in 0..batch {
            for ch in 0..c {
                let src = x.slice(ndarray::s![b, ch, .., ..]);
                let src = src.as_slice().expect("standard layout");
                let res = bilinear_plane(src, h, w, oh, ow);
                out.slice_mut(ndarray::s![b, ch, .., ..])
                    .as_slice_mut()
                    .unwrap()
                    .copy_from_slice(&res);
            }
        }
        self.graph.push(
            out.into_dyn(),
            &[self],
            Box::new(move |g, _| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<f64>::zeros((batch, c, h, w));
                for b in 0..batch {
                    for ch in 0..c {
                        for (oy, ry) in ty.iter().enumerate() {
                            for (ox, rx) in tx.iter().enumerate() {
                                let go = g4[[b, ch, oy, ox]];
                                let wy = [(ry.lo, 1.0 - ry.frac), (ry.hi, ry.frac)];
                                let wx = [(rx.lo, 1.0 - rx.frac), (rx.hi, rx.frac)];
                                for (sy, fy) in wy {
                                    for (sx, fx) in wx {
                                        dx[[b, ch, sy, sx]] += go * fy * fx;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }
}
