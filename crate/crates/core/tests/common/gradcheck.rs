//! Central finite-difference checks of the library's analytic gradients
//! against the f64 reference layers. Each check builds one random instance
//! and returns the worst relative error over every checked coordinate.
//!
//! Layer checks use the scalar objective `Σ r ⊙ layer(x)` with a random
//! projection `r`, whose gradient with respect to the layer output is `r`.

use glaucoma_cnn::layers::{
    conv2d_backward, dense_backward, dropout_backward, dropout_forward, global_max_pool, maxpool2x2_forward,
    pool_backward, relu_backward, softmax, LayerParams,
};
use glaucoma_cnn::optim::{weighted_cross_entropy, ClassWeights};
use glaucoma_cnn::{ImageTensor, Label, ModelState, SeededRng};
use rand::Rng;

use super::*;

fn project(r: &T64, y: &T64) -> f64 {
    r.data.iter().zip(&y.data).map(|(a, b)| a * b).sum()
}

/// Rounds through f32 so the library and the oracle see identical inputs.
fn f32_exact(t: T64) -> T64 {
    T64::from32(&t.to32())
}

fn worst(analytic: &[f32], base: &mut [f64], idx: &[usize], f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut w = 0.0f64;
    for &i in idx {
        let n = central_difference(base, i, FD_EPS, &f);
        w = w.max(rel_err(analytic[i] as f64, n, FD_FLOOR));
    }
    w
}

pub fn conv_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (h, w) = (r.random_range(3..8), r.random_range(3..8));
    let (cin, cout) = (r.random_range(1..4), r.random_range(1..4));
    let k = [1, 3, 5][r.random_range(0..3)];
    let x = f32_exact(uniform(&mut r, &[h, w, cin], -1.0, 1.0));
    let kern = f32_exact(uniform(&mut r, &[k, k, cin, cout], -0.5, 0.5));
    let bias = f32_exact(uniform(&mut r, &[cout], -0.5, 0.5));
    let proj = f32_exact(uniform(&mut r, &[h, w, cout], -1.0, 1.0));

    let p = LayerParams::new(kern.to32(), bias.to32()).unwrap();
    let g = conv2d_backward(&x.to32(), &p, &proj.to32()).unwrap();
    let all = |n: usize| (0..n).collect::<Vec<_>>();

    let (xd, kd, bd) = (x.data.clone(), kern.data.clone(), bias.data.clone());
    let mut e = 0.0f64;
    let mut kb = kd.clone();
    e = e.max(worst(g.d_kernel.data(), &mut kb, &all(kd.len()), |kv| {
        project(&proj, &conv(&x, &T64::new(&kern.shape, kv.to_vec()), &bd))
    }));
    let mut bb = bd.clone();
    e = e.max(worst(g.d_bias.data(), &mut bb, &all(bd.len()), |bv| project(&proj, &conv(&x, &kern, bv))));
    let mut xb = xd.clone();
    e = e.max(worst(g.d_input.unwrap().data(), &mut xb, &all(xd.len()), |xv| {
        project(&proj, &conv(&T64::new(&x.shape, xv.to_vec()), &kern, &bd))
    }));
    e
}

pub fn dense_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n_in, n_out) = (r.random_range(1..20), r.random_range(1..6));
    let x = f32_exact(uniform(&mut r, &[n_in], -1.0, 1.0));
    let kern = f32_exact(uniform(&mut r, &[n_in, n_out], -0.5, 0.5));
    let bias = f32_exact(uniform(&mut r, &[n_out], -0.5, 0.5));
    let proj = f32_exact(uniform(&mut r, &[n_out], -1.0, 1.0));
    let p = LayerParams::new(kern.to32(), bias.to32()).unwrap();
    let g = dense_backward(&x.to32(), &p, &proj.to32()).unwrap();
    let all = |n: usize| (0..n).collect::<Vec<_>>();

    let mut e = 0.0f64;
    let mut kb = kern.data.clone();
    e = e.max(worst(g.d_kernel.data(), &mut kb, &all(kern.data.len()), |kv| {
        project(&proj, &dense(&x, &T64::new(&kern.shape, kv.to_vec()), &bias.data))
    }));
    let mut bb = bias.data.clone();
    e = e.max(worst(g.d_bias.data(), &mut bb, &all(n_out), |bv| project(&proj, &dense(&x, &kern, bv))));
    let mut xb = x.data.clone();
    e = e.max(worst(g.d_input.unwrap().data(), &mut xb, &all(n_in), |xv| {
        project(&proj, &dense(&T64::new(&x.shape, xv.to_vec()), &kern, &bias.data))
    }));
    e
}

pub fn relu_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.random_range(1..6), r.random_range(1..6), r.random_range(1..4)];
    // keep every input at least 2ε from the kink
    let x = f32_exact(away_from_zero(&mut r, &shape, 4.0 * FD_EPS));
    let proj = f32_exact(uniform(&mut r, &shape, -1.0, 1.0));
    let g = relu_backward(&x.to32(), &proj.to32()).unwrap();
    let mut xb = x.data.clone();
    let idx: Vec<usize> = (0..xb.len()).collect();
    worst(g.data(), &mut xb, &idx, |xv| project(&proj, &relu(&T64::new(&shape, xv.to_vec()))))
}

pub fn maxpool_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.random_range(2..8), r.random_range(2..8), r.random_range(1..4)];
    // distinct values spaced beyond 2ε keep every argmax fixed under the perturbation
    let x = f32_exact(distinct(&mut r, &shape, 4.0 * FD_EPS));
    let (y, rec) = maxpool2x2_forward(&x.to32()).unwrap();
    let proj = f32_exact(uniform(&mut r, y.shape(), -1.0, 1.0));
    let g = pool_backward(&rec, &proj.to32()).unwrap();
    let mut xb = x.data.clone();
    let idx: Vec<usize> = (0..xb.len()).collect();
    worst(g.data(), &mut xb, &idx, |xv| project(&proj, &maxpool(&T64::new(&shape, xv.to_vec()))))
}

pub fn gmp_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.random_range(1..6), r.random_range(1..6), r.random_range(1..5)];
    let x = f32_exact(distinct(&mut r, &shape, 4.0 * FD_EPS));
    let (_, rec) = global_max_pool(&x.to32()).unwrap();
    let proj = f32_exact(uniform(&mut r, &[shape[2]], -1.0, 1.0));
    let g = pool_backward(&rec, &proj.to32()).unwrap();
    let mut xb = x.data.clone();
    let idx: Vec<usize> = (0..xb.len()).collect();
    worst(g.data(), &mut xb, &idx, |xv| project(&proj, &global_max(&T64::new(&shape, xv.to_vec()))))
}

pub fn dropout_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.random_range(1..40)];
    let rate: f32 = [0.0, 0.25, 0.4, 0.5][r.random_range(0..4)];
    let x = f32_exact(uniform(&mut r, &shape, -1.0, 1.0));
    let (y, mask) = dropout_forward(&x.to32(), rate, &mut SeededRng::new(seed), true).unwrap();
    let m: Vec<f64> = match &mask {
        Some(m) => m.iter().map(|&v| v as f64).collect(),
        None => vec![1.0; shape[0]],
    };
    let keep = 1.0 / (1.0 - rate as f64);
    assert!(m.iter().all(|&v| v == 0.0 || (v - keep).abs() < 1e-6), "mask values must be 0 or 1/(1−rate)");
    for ((&yv, &xv), &mv) in y.data().iter().zip(&x.data).zip(&m) {
        assert!((yv as f64 - xv * mv).abs() < 1e-6);
    }
    let proj = f32_exact(uniform(&mut r, &shape, -1.0, 1.0));
    let g = dropout_backward(mask.as_deref(), &proj.to32());
    let mut xb = x.data.clone();
    let idx: Vec<usize> = (0..xb.len()).collect();
    worst(g.data(), &mut xb, &idx, |xv| xv.iter().zip(&m).zip(&proj.data).map(|((a, b), c)| a * b * c).sum())
}

/// Gradient of the weighted loss with respect to the logits. Also returns
/// the absolute loss error against the oracle.
pub fn loss_instance(seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let z = f32_exact(uniform(&mut r, &[2], -4.0, 4.0));
    let label = if r.random::<bool>() { Label::Glaucoma } else { Label::Normal };
    let (wg, wn) = (r.random_range(0.25..3.0f32), r.random_range(0.25..3.0f32));
    let weights = ClassWeights::new(wg, wn).unwrap();
    let w = weights.for_label(label) as f64;
    let p = softmax(&z.to32()).unwrap();
    let (loss, grad) = weighted_cross_entropy(&p, label, &weights).unwrap();
    let oracle = weighted_ce_from_logits(&z.data, label.index(), w);
    let mut zb = z.data.clone();
    let e = worst(grad.data(), &mut zb, &[0, 1], |zv| weighted_ce_from_logits(zv, label.index(), w));
    (e, (loss as f64 - oracle).abs())
}

/// Step for whole-model checks. Deep random networks have many units within
/// 1e-3 of a ReLU or max-pool switch, so the f64 oracle is probed closer in.
pub const MODEL_EPS: f64 = 1e-6;

pub struct ModelCheck {
    pub worst: f64,
    pub checked: usize,
    /// Coordinates skipped because the step crossed a ReLU or max-pool
    /// switch, detected by disagreement between steps ε and ε/2.
    pub at_kinks: usize,
}

/// Whole-model check: parameter gradients from [`ModelState::backward`]
/// against central differences of the f64 model, `per_layer` coordinates
/// per parameter tensor.
pub fn model_instance(state: &ModelState, x: &ImageTensor, label: Label, per_layer: usize, seed: u64) -> ModelCheck {
    let mut r = rng(seed);
    let weights = ClassWeights::new(1.3, 0.8).unwrap();
    let w = weights.for_label(label) as f64;
    let pass = state.forward(x, false, &mut SeededRng::new(0)).unwrap();
    let (_, d_logits) = weighted_cross_entropy(pass.probs(), label, &weights).unwrap();
    let grads = state.backward(&pass, &d_logits).unwrap();
    let x64 = T64::from32(x);
    let base = params64(state);
    let loss = |ps: &[Option<(T64, Vec<f64>)>]| {
        weighted_ce_from_logits(&model_logits(&state.spec, ps, &x64), label.index(), w)
    };

    let mut out = ModelCheck { worst: 0.0, checked: 0, at_kinks: 0 };
    for (li, g) in grads.layers.iter().enumerate() {
        let Some(g) = g else { continue };
        for (is_bias, analytic) in [(false, g.d_kernel.data()), (true, g.d_bias.data())] {
            for i in sample_indices(&mut r, analytic.len(), per_layer) {
                let eval = |delta: f64| {
                    let mut ps = base.clone();
                    let (k, b) = ps[li].as_mut().unwrap();
                    let v: &mut [f64] = if is_bias { b } else { &mut k.data };
                    v[i] += delta;
                    loss(&ps)
                };
                let fd = |eps: f64| (eval(eps) - eval(-eps)) / (2.0 * eps);
                let (n1, n2) = (fd(MODEL_EPS), fd(MODEL_EPS / 2.0));
                if rel_err(n1, n2, FD_FLOOR) > FD_TOL / 4.0 {
                    out.at_kinks += 1;
                    continue;
                }
                out.worst = out.worst.max(rel_err(analytic[i] as f64, n1, FD_FLOOR));
                out.checked += 1;
            }
        }
    }
    out
}
