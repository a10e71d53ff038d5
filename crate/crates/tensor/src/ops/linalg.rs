//! Matrix products and row-wise normalizations.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView2, Axis, Ix2, IxDyn, Zip};

use crate::graph::{Array, Var};

fn as_batched(x: &Array) -> Array3<f64> {
    let nd = x.ndim();
    let (m, k) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    let batch = x.len() / (m * k).max(1);
    x.as_standard_layout().into_owned().into_shape_with_order((batch, m, k)).expect("batched view")
}

fn as_rows(x: &Array) -> Array2<f64> {
    let cols = *x.shape().last().expect("rank >= 1");
    let rows = x.len() / cols.max(1);
    x.as_standard_layout().into_owned().into_shape_with_order((rows, cols)).expect("row view")
}

fn gemm(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let mut c = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(1.0, &a, &b, 0.0, &mut c);
    c
}

fn batched_product(a: &Array3<f64>, b: &Array3<f64>, trans_a: bool, trans_b: bool) -> Array3<f64> {
    let batch = a.shape()[0].max(b.shape()[0]);
    fn pick(x: &Array3<f64>, i: usize, t: bool) -> ArrayView2<'_, f64> {
        let v = x.index_axis(Axis(0), if x.shape()[0] == 1 { 0 } else { i });
        if t {
            v.reversed_axes()
        } else {
            v
        }
    }
    let first = gemm(pick(a, 0, trans_a), pick(b, 0, trans_b));
    let mut out = Array3::zeros((batch, first.nrows(), first.ncols()));
    out.index_axis_mut(Axis(0), 0).assign(&first);
    for i in 1..batch {
        let mut dst = out.index_axis_mut(Axis(0), i);
        general_mat_mul(1.0, &pick(a, i, trans_a), &pick(b, i, trans_b), 0.0, &mut dst);
    }
    out
}

impl<'g> Var<'g> {
    /// Batched matrix product over the last two axes. `other` either has the
    /// same leading axes as `self` or is a plain matrix shared by the batch.
    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        let (na, nb) = (a.ndim(), b.ndim());
        assert!(na >= 2 && nb >= 2, "matmul needs rank >= 2");
        assert_eq!(a.shape()[na - 1], b.shape()[nb - 2], "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
        let shared_b = nb == 2 && na > 2;
        if !shared_b {
            assert_eq!(a.shape()[..na - 2], b.shape()[..nb - 2], "matmul batch dims");
        }
        let (a3, b3) = (as_batched(&a), as_batched(&b));
        let out3 = batched_product(&a3, &b3, false, false);
        let mut out_shape = a.shape()[..na - 2].to_vec();
        out_shape.extend_from_slice(&[a.shape()[na - 2], b.shape()[nb - 1]]);
        let out = out3.into_dyn().into_shape_with_order(IxDyn(&out_shape)).expect("matmul out");
        let (a_shape, b_shape) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph.push(
            out,
            &[self, other],
            Box::new(move |g, needs| {
                let g3 = as_batched(g);
                let ga = needs[0].then(|| {
                    batched_product(&g3, &b3, false, true)
                        .into_dyn()
                        .into_shape_with_order(IxDyn(&a_shape))
                        .unwrap()
                });
                let gb = needs[1].then(|| {
                    let full = batched_product(&a3, &g3, true, false);
                    let reduced = if shared_b { full.sum_axis(Axis(0)).insert_axis(Axis(0)) } else { full };
                    reduced.into_dyn().into_shape_with_order(IxDyn(&b_shape)).unwrap()
                });
                vec![ga, gb]
            }),
        )
    }

    /// `x · Wᵀ + b` over the last axis with `W` stored as `(out, in)`.
    pub fn linear(self, weight: Var<'g>, bias: Option<Var<'g>>) -> Var<'g> {
        let x = self.value();
        let w = weight.value();
        let w2 = w.view().into_dimensionality::<Ix2>().expect("linear weight must be 2-D").to_owned();
        let in_dim = *x.shape().last().unwrap();
        assert_eq!(w2.ncols(), in_dim, "linear in_features {} vs input {:?}", w2.ncols(), x.shape());
        let rows = as_rows(&x);
        let mut y = gemm(rows.view(), w2.t());
        if let Some(b) = bias {
            let bv = b.value();
            assert_eq!(bv.shape(), &[w2.nrows()], "linear bias shape");
            let bv = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            y += &bv;
        }
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().unwrap() = w2.nrows();
        let out = y.into_dyn().into_shape_with_order(IxDyn(&out_shape)).unwrap();
        let x_shape = x.shape().to_vec();
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph.push(
            out,
            &parents,
            Box::new(move |g, needs| {
                let g2 = as_rows(g);
                let gx = needs[0].then(|| gemm(g2.view(), w2.view()).into_dyn().into_shape_with_order(IxDyn(&x_shape)).unwrap());
                let gw = needs[1].then(|| gemm(g2.t(), rows.view()).into_dyn());
                let mut grads = vec![gx, gw];
                if needs.len() == 3 {
                    grads.push(needs[2].then(|| g2.sum_axis(Axis(0)).into_dyn()));
                }
                grads
            }),
        )
    }

    pub fn softmax_last(self) -> Var<'g> {
        let x = self.value();
        let mut y = as_rows(&x);
        for mut row in y.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let total = row.sum();
            row.mapv_inplace(|v| v / total);
        }
        let shape = x.shape().to_vec();
        let out = y.clone().into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap();
        self.graph.push(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut dx = as_rows(g);
                Zip::from(dx.rows_mut()).and(y.rows()).for_each(|mut d, yr| {
                    let dot = d.dot(&yr);
                    Zip::from(&mut d).and(&yr).for_each(|dv, &yv| *dv = yv * (*dv - dot));
                });
                vec![Some(dx.into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap())]
            }),
        )
    }

    /// Standardizes each row over the last axis (no affine part).
    pub fn layer_norm_last(self, eps: f64) -> Var<'g> {
        let x = self.value();
        let rows = as_rows(&x);
        let n = rows.ncols() as f64;
        let mut xhat = rows.clone();
        let mut inv_std = Vec::with_capacity(rows.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let shape = x.shape().to_vec();
        let out = xhat.clone().into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap();
        self.graph.push(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut dx = as_rows(g);
                for (i, mut d) in dx.rows_mut().into_iter().enumerate() {
                    let xh = xhat.slice(s![i, ..]);
                    let mean_g = d.sum() / n;
                    let mean_gx = d.dot(&xh) / n;
                    Zip::from(&mut d).and(&xh).for_each(|dv, &xv| *dv = inv_std[i] * (*dv - mean_g - xv * mean_gx));
                }
                vec![Some(dx.into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap())]
            }),
        )
    }
}
