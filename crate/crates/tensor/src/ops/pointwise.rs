//! Elementwise arithmetic with numpy-style broadcasting, activations and
//! full reductions.

use ndarray::{Axis, IxDyn, Zip};

use crate::graph::{Array, Var};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Sums `grad` down to `shape`, undoing a broadcast.
pub fn sum_to_shape(grad: &Array, shape: &[usize]) -> Array {
    let mut out = grad.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (axis, &len) in shape.iter().enumerate() {
        if len == 1 && out.shape()[axis] != 1 {
            out = out.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    out
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `max(x, 0) - x * y + log(1 + exp(-|x|))`, finite for any finite logit.
pub fn bce_with_logits_scalar(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

impl<'g> Var<'g> {
    fn binary(
        self,
        other: Var<'g>,
        forward: impl Fn(&Array, &Array) -> Array,
        grads: impl Fn(&Array, &Array, &Array) -> (Array, Array) + 'static,
    ) -> Var<'g> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        let out = forward(&a, &b);
        self.graph.push(
            out,
            &[self, other],
            Box::new(move |g, needs| {
                let (ga, gb) = grads(g, &a, &b);
                vec![
                    needs[0].then(|| sum_to_shape(&ga, a.shape())),
                    needs[1].then(|| sum_to_shape(&gb, b.shape())),
                ]
            }),
        )
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a + b, |g, _, _| (g.clone(), g.clone()))
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a - b, |g, _, _| (g.clone(), -g))
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, |a, b| a * b, |g, a, b| (g * b, g * a))
    }

    pub fn div(self, other: Var<'g>) -> Var<'g> {
        self.binary(
            other,
            |a, b| a / b,
            |g, a, b| {
                let ga = g / b;
                let gb = -(g * a) / (b * b);
                (ga, gb)
            },
        )
    }

    fn unary(self, forward: impl Fn(f64) -> f64, derivative: impl Fn(f64, f64) -> f64 + 'static) -> Var<'g> {
        let x = self.value();
        let out = x.mapv(&forward);
        let y = std::sync::Arc::new(out.clone());
        self.graph.push(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut dx = g.clone();
                Zip::from(&mut dx).and(&*x).and(&*y).for_each(|d, &xv, &yv| *d *= derivative(xv, yv));
                vec![Some(dx)]
            }),
        )
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(self, c: f64) -> Var<'g> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn neg(self) -> Var<'g> {
        self.mul_scalar(-1.0)
    }

    /// `1 - x`
    pub fn one_minus(self) -> Var<'g> {
        self.unary(|x| 1.0 - x, |_, _| -1.0)
    }

    /// Exact (erf) GELU.
    pub fn gelu(self) -> Var<'g> {
        self.unary(gelu_scalar, |x, _| gelu_grad_scalar(x))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    /// Elementwise binary cross-entropy of logits against a fixed target of
    /// the same shape. The target never receives a gradient.
    pub fn bce_with_logits(self, target: &Array) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.shape(), target.shape(), "bce_with_logits shape mismatch");
        let mut out = Array::zeros(x.raw_dim());
        Zip::from(&mut out).and(&*x).and(target).for_each(|o, &xv, &yv| *o = bce_with_logits_scalar(xv, yv));
        let target = target.clone();
        self.graph.push(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut dx = g.clone();
                Zip::from(&mut dx)
                    .and(&*x)
                    .and(&target)
                    .for_each(|d, &xv, &yv| *d *= sigmoid_scalar(xv) - yv);
                vec![Some(dx)]
            }),
        )
    }

    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let out = Array::from_elem(IxDyn(&[]), x.sum());
        let shape = x.raw_dim();
        self.graph.push(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(Array::from_elem(shape.clone(), g[IxDyn(&[])]))]),
        )
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sums over `axes`, keeping them as length-1 dimensions.
    pub fn sum_keepdims(self, axes: &[usize]) -> Var<'g> {
        let x = self.value();
        let mut out = (*x).clone();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        for &axis in &sorted {
            out = out.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
        let shape = x.raw_dim();
        self.graph.push(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.broadcast(shape.clone()).expect("sum_keepdims grad").to_owned())]),
        )
    }
}
