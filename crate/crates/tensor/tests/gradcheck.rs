//! Central finite differences against the tape for every differentiable op.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sam3unet_tensor::{Array, Graph, Var};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks d f / d inputs against central differences. `f` must build a
/// scalar from the given leaves.
fn check(inputs: Vec<Array>, f: impl for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>) {
    let eval = |vals: &[Array]| {
        let g = Graph::no_grad();
        let vars: Vec<_> = vals.iter().map(|v| g.constant(v.clone())).collect();
        f(&g, &vars).item()
    };
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|v| g.leaf(v.clone(), true)).collect();
    let loss = f(&g, &vars);
    let grads = g.backward(loss);
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Array::zeros(inputs[k].raw_dim()));
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            let mut minus = inputs.clone();
            plus[k].as_slice_mut().unwrap()[i] += STEP;
            minus[k].as_slice_mut().unwrap()[i] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let a = analytic.as_slice().unwrap()[i];
            let denom = a.abs().max(numeric.abs()).max(1.0);
            assert!(
                (a - numeric).abs() / denom < TOL,
                "input {k} element {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

/// Projects onto a fixed random direction so every output element matters.
fn project<'g>(g: &'g Graph, y: Var<'g>, seed: u64) -> Var<'g> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, &y.shape());
    y.mul(g.constant(w)).sum()
}

#[test]
fn broadcast_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[2, 3, 4]);
    let b = random(&mut rng, &[3, 1]);
    let c = random(&mut rng, &[2, 3, 4]).mapv(|v| v + 3.0);
    check(vec![a, b, c], |g, v| {
        let y = v[0].add(v[1]).mul(v[0]).sub(v[1]).div(v[2]);
        project(g, y, 2)
    });
}

#[test]
fn activations_and_scalars() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[5, 4]).mapv(|v| v * 3.0);
    check(vec![a], |g, v| {
        let y = v[0].gelu().add(v[0].sigmoid().mul_scalar(2.0)).add_scalar(0.5).one_minus().neg();
        project(g, y, 4)
    });
}

#[test]
fn bce_with_logits_against_fixed_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[2, 1, 3, 3]).mapv(|v| v * 4.0);
    let t = random(&mut rng, &[2, 1, 3, 3]).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    check(vec![x], move |g, v| project(g, v[0].bce_with_logits(&t), 6));
}

#[test]
fn reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[2, 3, 4, 2]);
    check(vec![x], |g, v| {
        let s = v[0].sum_keepdims(&[1, 3]);
        project(g, s, 8).add(v[0].mean().mul_scalar(3.0))
    });
}

#[test]
fn reshape_permute_narrow_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random(&mut rng, &[2, 6, 3]);
    let b = random(&mut rng, &[2, 2, 3]);
    check(vec![a, b], |g, v| {
        let parts = v[0].chunk(2, 1);
        let cat = Var::concat(&[parts[1], v[1], parts[0].narrow(1, 1, 2)], 1);
        let y = cat.permute(&[2, 0, 1]).reshape(&[3, 2 * 7]).transpose_last();
        project(g, y, 10)
    });
}

#[test]
fn matmul_batched_and_shared() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&mut rng, &[2, 2, 3, 4]);
    let b = random(&mut rng, &[2, 2, 4, 5]);
    let w = random(&mut rng, &[5, 2]);
    check(vec![a, b, w], |g, v| project(g, v[0].matmul(v[1]).matmul(v[2]), 12));
}

#[test]
fn linear_with_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random(&mut rng, &[2, 3, 4]);
    let w = random(&mut rng, &[5, 4]);
    let b = random(&mut rng, &[5]);
    check(vec![x, w, b], |g, v| project(g, v[0].linear(v[1], Some(v[2])), 14));
}

#[test]
fn softmax_and_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random(&mut rng, &[3, 6]).mapv(|v| v * 2.0);
    check(vec![x.clone()], |g, v| project(g, v[0].softmax_last(), 16));
    check(vec![x], |g, v| project(g, v[0].layer_norm_last(1e-6), 17));
}

#[test]
fn pointwise_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = random(&mut rng, &[2, 3, 4, 5]);
    let w = random(&mut rng, &[4, 3, 1, 1]);
    let b = random(&mut rng, &[4]);
    check(vec![x, w, b], |g, v| project(g, v[0].conv1x1(v[1], Some(v[2])), 20));
}

#[test]
fn depthwise_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random(&mut rng, &[2, 3, 4, 5]);
    let w = random(&mut rng, &[3, 1, 3, 3]);
    let b = random(&mut rng, &[3]);
    check(vec![x, w, b], |g, v| project(g, v[0].depthwise3x3(v[1], Some(v[2])), 22));
}

#[test]
fn patchify_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = random(&mut rng, &[2, 2, 4, 6]);
    let w = random(&mut rng, &[3, 2, 2, 2]);
    let b = random(&mut rng, &[3]);
    check(vec![x, w, b], |g, v| project(g, v[0].patchify(v[1], Some(v[2]), 2), 24));
}

#[test]
fn batch_norm_training_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let x = random(&mut rng, &[2, 3, 3, 2]);
    check(vec![x], |g, v| project(g, v[0].batch_norm_train(1e-5).0, 26));
}

#[test]
fn bilinear_resize_up_and_down() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let x = random(&mut rng, &[1, 2, 5, 4]);
    check(vec![x.clone()], |g, v| project(g, v[0].resize_bilinear(11, 7), 28));
    check(vec![x], |g, v| project(g, v[0].resize_bilinear(2, 3), 29));
}
