use ndarray::{Array1, Array4, Ix4};

use crate::graph::Var;

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    /// Biased (population) variance used for normalization.
    pub var: Array1<f64>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

impl BatchStats {
    /// Unbiased variance, the quantity folded into running statistics.
    pub fn unbiased_var(&self) -> Array1<f64> {
        let n = self.count as f64;
        if self.count > 1 {
            &self.var * (n / (n - 1.0))
        } else {
            self.var.clone()
        }
    }
}

impl<'g> Var<'g> {
    /// Normalizes `(B, C, H, W)` per channel with the batch's own mean and
    /// biased variance (no affine part).
    pub fn batch_norm_train(self, eps: f64) -> (Var<'g>, BatchStats) {
        let x = self.value().view().into_dimensionality::<Ix4>().expect("batch norm input rank").to_owned();
        let (batch, c, h, w) = x.dim();
        let count = batch * h * w;
        let n = count as f64;
        let mut mean = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        for ch in 0..c {
            let v = x.slice(ndarray::s![.., ch, .., ..]);
            let m = v.sum() / n;
            mean[ch] = m;
            var[ch] = v.fold(0.0, |acc, &e| acc + (e - m) * (e - m)) / n;
        }
        let inv_std = var.mapv(|v: f64| 1.0 / (v + eps).sqrt());
        let mut xhat = x;
        for ch in 0..c {
            let (m, s) = (mean[ch], inv_std[ch]);
            xhat.slice_mut(ndarray::s![.., ch, .., ..]).mapv_inplace(|e| (e - m) * s);
        }
        let stats = BatchStats { mean, var, count };
        let saved = xhat.clone();
        let out = self.graph.push(
            xhat.into_dyn(),
            &[self],
            Box::new(move |g, _| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<f64>::zeros((batch, c, h, w));
                for ch in 0..c {
                    let gc = g4.slice(ndarray::s![.., ch, .., ..]);
                    let xc = saved.slice(ndarray::s![.., ch, .., ..]);
                    let sum_g = gc.sum();
                    let sum_gx = ndarray::Zip::from(&gc).and(&xc).fold(0.0, |acc, &a, &b| acc + a * b);
                    let s = inv_std[ch];
                    ndarray::Zip::from(dx.slice_mut(ndarray::s![.., ch, .., ..])).and(&gc).and(&xc).for_each(
                        |d, &gv, &xv| {
                            *d = s * (gv - sum_g / n - xv * sum_gx / n);
                        },
                    );
                }
                vec![Some(dx.into_dyn())]
            }),
        );
        (out, stats)
    }
}
