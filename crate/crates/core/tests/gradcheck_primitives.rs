//! Finite-difference checks for every differentiable primitive at f64.

use emnet_core::tensor::{grad_check, Graph, Tensor, Var};
use emnet_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;
const EPS: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random tensor with magnitudes in [0.1, 1.0]; keeps relu/maxpool inputs
/// away from kinks and ties.
fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| {
            let mag: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn assert_passes(
    name: &str,
    f: &emnet_core::tensor::ScalarFn<f64>,
    inputs: &[Tensor<f64>],
) {
    let report = grad_check(f, inputs, EPS).unwrap();
    assert!(
        report.passes(TOL),
        "{name}: max rel err {} at input {} elem {} (analytic {:.3e}, numeric {:.3e})",
        report.max_rel_err,
        report.worst.0,
        report.worst.1,
        report.worst_pair.0,
        report.worst_pair.1,
    );
}

#[test]
fn conv3d_pointwise() {
    let mut r = rng(1);
    let input = rand_tensor(&[2, 3, 2, 3, 3], &mut r);
    let weight = rand_tensor(&[4, 3, 1, 1, 1], &mut r);
    let bias = rand_tensor(&[4], &mut r);
    let f = |g: &mut Graph<f64>, v: &[Var]| {
        let y = g.conv3d(v[0], v[1], Some(v[2]), [1, 1, 1], [0, 0, 0])?;
        Ok(g.sum(y))
    };
    assert_passes("conv 1x1x1", &f, &[input, weight, bias]);
}

#[test]
fn conv3d_dense_padded() {
    let mut r = rng(2);
    let input = rand_tensor(&[2, 2, 4, 4, 4], &mut r);
    let weight = rand_tensor(&[3, 2, 3, 3, 3], &mut r);
    let bias = rand_tensor(&[3], &mut r);
    let f = |g: &mut Graph<f64>, v: &[Var]| {
        let y = g.conv3d(v[0], v[1], Some(v[2]), [1, 1, 1], [1, 1, 1])?;
        let s = g.sigmoid(y);
        Ok(g.sum(s))
    };
    assert_passes("conv 3x3x3 same", &f, &[input, weight, bias]);
}

#[test]
fn conv3d_oriented_kernels() {
    let mut r = rng(3);
    for (k, p) in [
        ([1, 3, 3], [0, 1, 1]),
        ([3, 1, 3], [1, 0, 1]),
        ([3, 3, 1], [1, 1, 0]),
    ] {
        let input = rand_tensor(&[1, 2, 4, 4, 4], &mut r);
        let weight = rand_tensor(&[2, 2, k[0], k[1], k[2]], &mut r);
        let f = move |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.conv3d(v[0], v[1], None, [1, 1, 1], p)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        };
        assert_passes(&format!("conv {k:?}"), &f, &[input, weight]);
    }
}

#[test]
fn conv3d_strided() {
    let mut r = rng(4);
    let input = rand_tensor(&[1, 2, 4, 6, 6], &mut r);
    let weight = rand_tensor(&[2, 2, 2, 2, 2], &mut r);
    let bias = rand_tensor(&[2], &mut r);
    let f = |g: &mut Graph<f64>, v: &[Var]| {
        let y = g.conv3d(v[0], v[1], Some(v[2]), [2, 2, 2], [1, 1, 1])?;
        Ok(g.sum(y))
    };
    assert_passes("conv stride 2", &f, &[input, weight, bias]);
}

#[test]
fn maxpool_with_distinct_values() {
    // a shuffled ramp guarantees distinct block entries, avoiding argmax
    // flips under the probe step
    let mut r = rng(5);
    let mut data: Vec<f64> = (0..2 * 2 * 4 * 4 * 4).map(|i| i as f64 * 0.01).collect();
    for i in (1..data.len()).rev() {
        data.swap(i, r.random_range(0..=i));
    }
    let input = Tensor::from_vec(&[2, 2, 4, 4, 4], data).unwrap();
    let f = |g: &mut Graph<f64>, v: &[Var]| {
        let y = g.maxpool2(v[0])?;
        let sq = g.mul(y, y)?;
        Ok(g.sum(sq))
    };
    assert_passes("maxpool 2x2x2", &f, &[input]);
}

#[test]
fn trilinear_resize_up_and_down() {
    let mut r = rng(6);
    for target in [[4, 6, 6], [1, 2, 2], [3, 5, 4]] {
        let input = rand_tensor(&[2, 2, 2, 3, 3], &mut r);
        let f = move |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.resize3(v[0], target)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        };
        assert_passes(&format!("resize to {target:?}"), &f, &[input]);
    }
}

#[test]
fn group_norm_input_and_affine() {
    let mut r = rng(7);
    for groups in [1, 2, 4] {
        let input = rand_tensor(&[2, 4, 2, 3, 3], &mut r);
        let gamma = rand_tensor(&[4], &mut r);
        let beta = rand_tensor(&[4], &mut r);
        // random output weighting keeps per-element gradients O(1); a plain
        // sum cancels them to FD-noise level through the mean subtraction
        let probe = rand_tensor(input.shape(), &mut r);
        let f = move |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.group_norm(v[0], v[1], v[2], groups, 1e-5)?;
            let c = g.constant(probe.clone());
            let weighted = g.mul(y, c)?;
            Ok(g.sum(weighted))
        };
        assert_passes(&format!("group_norm g={groups}"), &f, &[input, gamma, beta]);
    }
}

#[test]
fn elementwise_composite_expression() {
    // exercises add, sub, mul, div, scale, add_scalar, relu, sigmoid,
    // split, concat, mean and sum in one graph
    let mut r = rng(8);
    let a = rand_tensor(&[2, 4, 2, 2, 2], &mut r);
    let b = rand_tensor(&[2, 4, 2, 2, 2], &mut r);
    let f = |g: &mut Graph<f64>, v: &[Var]| {
        let sum = g.add(v[0], v[1])?;
        let act = g.relu(sum);
        let parts = g.split_channels(act, &[1, 1, 1, 1])?;
        let merged = g.concat_channels(&parts)?;
        let scaled = g.scale(merged, 0.75);
        let shifted = g.add_scalar(scaled, 2.0); // keeps the divisor positive
        let prod = g.mul(v[0], v[1])?;
        let sig = g.sigmoid(prod);
        let ratio = g.div(sig, shifted)?;
        let diff = g.sub(ratio, sig)?;
        let m = g.mean(diff);
        let s = g.sum(sig);
        let total = g.scale(s, 0.1);
        g.add(m, total)
    };
    assert_passes("composite", &f, &[a, b]);
}

#[test]
fn whole_graph_values_stay_finite() {
    let mut r = rng(9);
    let input = rand_tensor(&[1, 4, 4, 4, 4], &mut r);
    let weight = rand_tensor(&[4, 4, 3, 3, 3], &mut r);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(input, true);
    let w = g.leaf(weight, true);
    let y = g.conv3d(x, w, None, [1, 1, 1], [1, 1, 1]).unwrap();
    let p = g.maxpool2(y).unwrap();
    let u = g.resize3(p, [4, 4, 4]).unwrap();
    let s = g.sigmoid(u);
    let loss = g.mean(s);
    g.backward(loss).unwrap();
    g.check_finite().unwrap();
}

#[test]
fn f32_analytic_close_to_f64_oracle() {
    // the f32 pipeline is validated against a finite-difference oracle run
    // on an f64 twin of the same computation
    let mut r = rng(10);
    let input64 = rand_tensor(&[1, 2, 2, 4, 4], &mut r);
    let weight64 = rand_tensor(&[2, 2, 1, 3, 3], &mut r);

    let f64fn = |g: &mut Graph<f64>, v: &[Var]| {
        let y = g.conv3d(v[0], v[1], None, [1, 1, 1], [0, 1, 1])?;
        let s = g.sigmoid(y);
        Ok(g.sum(s))
    };
    let f32fn = |g: &mut Graph<f32>, v: &[Var]| {
        let y = g.conv3d(v[0], v[1], None, [1, 1, 1], [0, 1, 1])?;
        let s = g.sigmoid(y);
        Ok(g.sum(s))
    };

    let numeric64 =
        emnet_core::tensor::numeric_gradients(&f64fn, &[input64.clone(), weight64.clone()], EPS)
            .unwrap();
    let analytic32 = emnet_core::tensor::analytic_gradients(
        &f32fn,
        &[input64.cast::<f32>(), weight64.cast::<f32>()],
    )
    .unwrap();
    let numeric_as32: Vec<Tensor<f32>> = numeric64.iter().map(|t| t.cast()).collect();
    let report = emnet_core::tensor::max_relative_error(&analytic32, &numeric_as32);
    assert!(report.max_rel_err < 1e-3, "err = {}", report.max_rel_err);
}
