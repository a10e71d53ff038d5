//! The three convolution shapes the segmentation model needs: pointwise
//! (1×1), depthwise 3×3 with unit padding, and non-overlapping patchify.
//! Weights use the `(out, in/groups, kh, kw)` layout.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, Axis, Ix1, Ix4, IxDyn};

use crate::graph::{Array, Var};

fn to4(x: &Array) -> Array4<f64> {
    x.view().into_dimensionality::<Ix4>().expect("expected a rank-4 tensor").as_standard_layout().into_owned()
}

fn weight_matrix(w: &Array, rows: usize, cols: usize) -> Array2<f64> {
    w.as_standard_layout().into_owned().into_shape_with_order((rows, cols)).expect("weight matrix")
}

fn plane(x: &Array4<f64>, b: usize) -> ArrayView2<'_, f64> {
    let (_, c, h, w) = x.dim();
    x.index_axis(Axis(0), b).into_shape_with_order((c, h * w)).expect("contiguous plane")
}

impl<'g> Var<'g> {
    /// 1×1 convolution on `(B, Ci, H, W)`; weight `(Co, Ci, 1, 1)`, bias `(Co)`.
    pub fn conv1x1(self, weight: Var<'g>, bias: Option<Var<'g>>) -> Var<'g> {
        let x = to4(&self.value());
        let (batch, ci, h, w) = x.dim();
        let wv = weight.value();
        assert_eq!(wv.shape()[1], ci, "conv1x1 expects {} input channels, got {ci}", wv.shape()[1]);
        let co = wv.shape()[0];
        let wm = weight_matrix(&wv, co, ci);
        let bv = bias.map(|b| b.value().view().into_dimensionality::<Ix1>().expect("bias rank").to_owned());
        let mut out = Array4::<f64>::zeros((batch, co, h, w));
        for b in 0..batch {
            let mut dst = out.index_axis_mut(Axis(0), b).into_shape_with_order((co, h * w)).unwrap();
            general_mat_mul(1.0, &wm, &plane(&x, b), 0.0, &mut dst);
            if let Some(bv) = &bv {
                for (mut row, &bias) in dst.rows_mut().into_iter().zip(bv) {
                    row += bias;
                }
            }
        }
        let w_shape = wv.shape().to_vec();
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph.push(
            out.into_dyn(),
            &parents,
            Box::new(move |g, needs| {
                let g4 = to4(g);
                let gx = needs[0].then(|| {
                    let mut gx = Array4::<f64>::zeros((batch, ci, h, w));
                    for b in 0..batch {
                        let mut dst = gx.index_axis_mut(Axis(0), b).into_shape_with_order((ci, h * w)).unwrap();
                        general_mat_mul(1.0, &wm.t(), &plane(&g4, b), 0.0, &mut dst);
                    }
                    gx.into_dyn()
                });
                let gw = needs[1].then(|| {
                    let mut gw = Array2::<f64>::zeros((co, ci));
                    for b in 0..batch {
                        general_mat_mul(1.0, &plane(&g4, b), &plane(&x, b).t(), 1.0, &mut gw);
                    }
                    gw.into_dyn().into_shape_with_order(IxDyn(&w_shape)).unwrap()
                });
                let mut grads = vec![gx, gw];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| g4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)).into_dyn()));
                }
                grads
            }),
        )
    }

    /// Depthwise 3×3 convolution, stride 1, zero padding 1; weight `(C, 1, 3, 3)`.
    pub fn depthwise3x3(self, weight: Var<'g>, bias: Option<Var<'g>>) -> Var<'g> {
        let x = to4(&self.value());
        let (batch, c, h, w) = x.dim();
        let wv = to4(&weight.value());
        assert_eq!(wv.dim(), (c, 1, 3, 3), "depthwise weight shape");
        let bv = bias.map(|b| b.value().view().into_dimensionality::<Ix1>().expect("bias rank").to_owned());
        let mut out = Array4::<f64>::zeros((batch, c, h, w));
        // Tap (ky, kx) reads input pixel (y + ky - 1, x + kx - 1).
        let taps = |y: usize, ky: usize, len: usize| (y + ky).checked_sub(1).filter(|&v| v < len);
        for b in 0..batch {
            for ch in 0..c {
                let src = x.slice(ndarray::s![b, ch, .., ..]);
                let k = wv.slice(ndarray::s![ch, 0, .., ..]);
                let base = bv.as_ref().map_or(0.0, |bv| bv[ch]);
                let mut dst = out.slice_mut(ndarray::s![b, ch, .., ..]);
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = base;
                        for ky in 0..3 {
                            let Some(sy) = taps(y, ky, h) else { continue };
                            for kx in 0..3 {
                                let Some(sx) = taps(xx, kx, w) else { continue };
                                acc += k[[ky, kx]] * src[[sy, sx]];
                            }
                        }
                        dst[[y, xx]] = acc;
                    }
                }
            }
        }
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph.push(
            out.into_dyn(),
            &parents,
            Box::new(move |g, needs| {
                let g4 = to4(g);
                let mut gx = needs[0].then(|| Array4::<f64>::zeros((batch, c, h, w)));
                let mut gw = needs[1].then(|| Array4::<f64>::zeros((c, 1, 3, 3)));
                for b in 0..batch {
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                let go = g4[[b, ch, y, xx]];
                                if go == 0.0 {
                                    continue;
                                }
                                for ky in 0..3 {
                                    let Some(sy) = taps(y, ky, h) else { continue };
                                    for kx in 0..3 {
                                        let Some(sx) = taps(xx, kx, w) else { continue };
                                        if let Some(gx) = gx.as_mut() {
                                            gx[[b, ch, sy, sx]] += go * wv[[ch, 0, ky, kx]];
                                        }
                                        if let Some(gw) = gw.as_mut() {
                                            gw[[ch, 0, ky, kx]] += go * x[[b, ch, sy, sx]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                let mut grads = vec![gx.map(|a| a.into_dyn()), gw.map(|a| a.into_dyn())];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| g4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)).into_dyn()));
                }
                grads
            }),
        )
    }

    /// Non-overlapping `patch × patch` convolution that emits a token
    /// sequence `(B, (H/p)·(W/p), D)` in row-major patch order.
    /// Weight `(D, C, p, p)`, bias `(D)`.
    pub fn patchify(self, weight: Var<'g>, bias: Option<Var<'g>>, patch: usize) -> Var<'g> {
        let x = to4(&self.value());
        let (batch, c, h, w) = x.dim();
        assert!(h % patch == 0 && w % patch == 0, "image {h}x{w} not divisible by patch {patch}");
        let (gh, gw) = (h / patch, w / patch);
        let cols = c * patch * patch;
        let mut im2col = Array2::<f64>::zeros((batch * gh * gw, cols));
        for b in 0..batch {
            for py in 0..gh {
                for px in 0..gw {
                    let mut row = im2col.row_mut((b * gh + py) * gw + px);
                    let mut i = 0;
                    for ch in 0..c {
                        for ky in 0..patch {
                            for kx in 0..patch {
                                row[i] = x[[b, ch, py * patch + ky, px * patch + kx]];
                                i += 1;
                            }
                        }
                    }
                }
            }
        }
        let cols_var = self.graph.push(im2col.into_dyn(), &[self], {
            Box::new(move |g, _| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let mut gx = Array4::<f64>::zeros((batch, c, h, w));
                for b in 0..batch {
                    for py in 0..gh {
                        for px in 0..gw {
                            let row = g2.row((b * gh + py) * gw + px);
                            let mut i = 0;
                            for ch in 0..c {
                                for ky in 0..patch {
                                    for kx in 0..patch {
                                        gx[[b, ch, py * patch + ky, px * patch + kx]] = row[i];
                                        i += 1;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(gx.into_dyn())]
            })
        });
        let d = weight.dim(0);
        let w2 = weight.reshape(&[d, cols]);
        cols_var.linear(w2, bias).reshape(&[batch, gh * gw, d])
    }
}
