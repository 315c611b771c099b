//! Finite-difference and truncation checks shared by the integration tests
//! and the acceptance runner.

#![allow(dead_code)]

use lws_core::model::{
    backward, backward_selected, forward, forward_with_tape, softmax_cross_entropy, xavier_init,
    Network, ParamStore, SparseGrad,
};
use lws_core::tensor::{
    conv2d, conv2d_backward, maxpool2, maxpool2_backward, relu, relu_backward, Tensor,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

/// `||a - b|| / max(||a|| + ||b||, 1e-12)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-12)
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + H;
            let up = f(&x);
            x[i] = orig - H;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Checks input, kernel and bias gradients of a random tiny convolution
/// under the loss `sum(r * conv(x))`.
pub fn conv_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, c, h, w, co) = (
        r.random_range(1..=2),
        r.random_range(1..=3),
        r.random_range(1..=5),
        r.random_range(1..=5),
        r.random_range(1..=3),
    );
    let x = uniform(&mut r, n * c * h * w);
    let k = uniform(&mut r, co * c * 9);
    let b = uniform(&mut r, co);
    let up = uniform(&mut r, n * co * h * w);
    let t = |shape: &[usize], v: &[f64]| Tensor::new(shape.to_vec(), v.to_vec()).unwrap();
    let (xs, ks, bs) = ([n, c, h, w], [co, c, 3, 3], [co]);
    let loss = |x: &[f64], k: &[f64], b: &[f64]| {
        dot(
            conv2d(&t(&xs, x), &t(&ks, k), &t(&bs, b)).unwrap().data(),
            &up,
        )
    };
    let grads = conv2d_backward(&t(&xs, &x), &t(&ks, &k), &t(&[n, co, h, w], &up)).unwrap();
    let gx = numeric_grad(&x, |v| loss(v, &k, &b));
    let gk = numeric_grad(&k, |v| loss(&x, v, &b));
    let gb = numeric_grad(&b, |v| loss(&x, &k, v));
    rel_err(grads.input.data(), &gx)
        .max(rel_err(grads.kernels.data(), &gk))
        .max(rel_err(grads.bias.data(), &gb))
}

/// Max-pool gradient check on inputs whose values are at least 1e-2 apart,
/// so the perturbation never changes a window's winner.
pub fn pool_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (c, h, w) = (
        r.random_range(1..=3),
        2 * r.random_range(1..=3),
        2 * r.random_range(1..=3),
    );
    let len = c * h * w;
    let mut x: Vec<f64> = (0..len).map(|i| i as f64 * 1e-2).collect();
    x.shuffle(&mut r);
    let up = uniform(&mut r, len / 4);
    let t = |v: &[f64]| Tensor::new(vec![c, h, w], v.to_vec()).unwrap();
    let (_, idx) = maxpool2(&t(&x)).unwrap();
    let analytic = maxpool2_backward(
        &Tensor::new(vec![c, h / 2, w / 2], up.clone()).unwrap(),
        &idx,
    )
    .unwrap();
    let numeric = numeric_grad(&x, |v| dot(maxpool2(&t(v)).unwrap().0.data(), &up));
    rel_err(analytic.data(), &numeric)
}

/// ReLU gradient check with inputs kept at least 0.01 from the kink.
pub fn relu_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let len = r.random_range(1..=32);
    let x: Vec<f64> = (0..len)
        .map(|_| {
            let m = r.random_range(0.01..1.0);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    let up = uniform(&mut r, len);
    let t = |v: &[f64]| Tensor::new(vec![len], v.to_vec()).unwrap();
    let analytic = relu_backward(&t(&x), &t(&up)).unwrap();
    let numeric = numeric_grad(&x, |v| dot(relu(&t(v)).data(), &up));
    rel_err(analytic.data(), &numeric)
}

pub fn softmax_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, k) = (r.random_range(1..=4), r.random_range(2..=6));
    let logits: Vec<f64> = uniform(&mut r, n * k).iter().map(|v| 3.0 * v).collect();
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    let t = |v: &[f64]| Tensor::new(vec![n, k], v.to_vec()).unwrap();
    let (_, g) = softmax_cross_entropy(&t(&logits), &labels).unwrap();
    let numeric = numeric_grad(&logits, |v| {
        softmax_cross_entropy(&t(v), &labels).unwrap().0
    });
    rel_err(g.data(), &numeric)
}

/// A random tiny network: a ReLU-Net or a Conv-Net, `d <= 4`, `w <= 8`.
pub fn random_net(r: &mut ChaCha8Rng) -> Network {
    let d = r.random_range(1..=4);
    if r.random_bool(0.5) {
        let w = r.random_range(1..=8);
        Network::relu_net(d, w, r.random_range(1..=6), r.random_range(2..=4)).unwrap()
    } else {
        let w = r.random_range(1..=4);
        let side = 2 * r.random_range(1..=3);
        let c = r.random_range(1..=2);
        Network::conv_net_for(d, w, &[c, side, side], r.random_range(2..=4)).unwrap()
    }
}

fn random_input(r: &mut ChaCha8Rng, net: &Network, batch: usize) -> (Tensor<f64>, Vec<usize>) {
    let mut shape = vec![batch];
    shape.extend_from_slice(net.input_shape());
    let len: usize = shape.iter().product();
    let x = Tensor::new(shape, uniform(r, len)).unwrap();
    let y = (0..batch)
        .map(|_| r.random_range(0..net.classes()))
        .collect();
    (x, y)
}

fn net_params(r: &mut ChaCha8Rng, net: &Network) -> ParamStore<f64> {
    let mut p: ParamStore<f64> = xavier_init(net, r);
    // Non-zero biases exercise the bias gradients.
    let noise = uniform(r, p.len());
    for (t, n) in p.theta_mut().iter_mut().zip(noise) {
        *t += 0.1 * n;
    }
    p
}

/// Full-network gradient of the mean cross-entropy for one random
/// (input, label) pair against central differences over every parameter.
pub fn network_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let net = random_net(&mut r);
    let params = net_params(&mut r, &net);
    let (x, y) = random_input(&mut r, &net, 1);
    let (logits, tape) = forward_with_tape(&net, &params, &x).unwrap();
    let (_, g) = softmax_cross_entropy(&logits, &y).unwrap();
    let analytic = backward(&net, &params, tape, &g, 1).unwrap().to_dense();
    let numeric = numeric_grad(params.theta(), |theta| {
        let p = ParamStore::new(&net, theta.to_vec()).unwrap();
        let logits = forward(&net, &p, &x).unwrap();
        softmax_cross_entropy(&logits, &y).unwrap().0
    });
    rel_err(&analytic, &numeric)
}

fn full_and_truncated<T: lws_core::tensor::Scalar>(
    net: &Network,
    params: &ParamStore<T>,
    x: &Tensor<T>,
    y: &[usize],
    stop: usize,
) -> (SparseGrad<T>, SparseGrad<T>) {
    let run = |s: usize| {
        let (logits, tape) = forward_with_tape(net, params, x).unwrap();
        let (_, g) = softmax_cross_entropy(&logits, y).unwrap();
        backward(net, params, tape, &g, s).unwrap()
    };
    (run(1), run(stop))
}

/// Number of (stop layer, layer) pairs compared, or the first mismatch.
pub fn truncation_instance(seed: u64, depth: Option<usize>) -> Result<usize, String> {
    let mut r = rng(seed);
    let net = match depth {
        Some(d) if r.random_bool(0.5) => {
            Network::relu_net(d, r.random_range(1..=8), r.random_range(1..=6), 3).unwrap()
        }
        Some(d) => Network::conv_net_for(d, r.random_range(1..=4), &[1, 6, 6], 3).unwrap(),
        None => random_net(&mut r),
    };
    let params: ParamStore<f32> = net_params(&mut r, &net).cast();
    let batch = r.random_range(1..=4);
    let (x, y) = random_input(&mut r, &net, batch);
    let x = x.cast::<f32>();
    let l = net.num_parametric();
    let mut compared = 0;
    for stop in 1..=l {
        let (full, part) = full_and_truncated(&net, &params, &x, &y, stop);
        let expected: Vec<usize> = (stop..=l).collect();
        if part.layer_indices() != expected {
            return Err(format!("stop {stop}: layers {:?}", part.layer_indices()));
        }
        for layer in stop..=l {
            let a: Vec<u32> = full
                .layer(layer)
                .unwrap()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            let b: Vec<u32> = part
                .layer(layer)
                .unwrap()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            if a != b {
                return Err(format!(
                    "seed {seed}, stop {stop}, layer {layer}: gradients differ"
                ));
            }
            compared += 1;
        }
        // Arbitrary subsets must agree with the full pass as well.
        let subset: Vec<usize> = (stop..=l)
            .filter(|_| r.random_bool(0.5))
            .chain([stop])
            .collect();
        let (logits, tape) = forward_with_tape(&net, &params, &x).unwrap();
        let (_, g) = softmax_cross_entropy(&logits, &y).unwrap();
        let sel = backward_selected(&net, &params, tape, &g, &subset).unwrap();
        for lg in &sel.layers {
            if full.layer(lg.layer).unwrap() != lg.values.as_slice() {
                return Err(format!(
                    "seed {seed}, subset {subset:?}: layer {} differs",
                    lg.layer
                ));
            }
        }
    }
    Ok(compared)
}
