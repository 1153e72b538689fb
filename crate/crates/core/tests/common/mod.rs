//! Straightforward f64 reference implementations used as oracles by the
//! integration and acceptance tests. They share no code with the library.

#![allow(dead_code)]

pub mod gradcheck;
pub mod partition;

use glaucoma_cnn::model::{LayerKind, ModelSpec, ModelState};
use glaucoma_cnn::ImageTensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct T64 {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl T64 {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        T64 { shape: shape.to_vec(), data }
    }

    pub fn from32(t: &ImageTensor) -> Self {
        T64::new(t.shape(), t.data().iter().map(|&v| v as f64).collect())
    }

    pub fn to32(&self) -> ImageTensor {
        ImageTensor::new(&self.shape, self.data.iter().map(|&v| v as f32).collect()).unwrap()
    }

    fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        let (w, ch) = (self.shape[1], self.shape[2]);
        self.data[(y * w + x) * ch + c]
    }
}

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha20Rng, shape: &[usize], lo: f64, hi: f64) -> T64 {
    let n = shape.iter().product();
    T64::new(shape, (0..n).map(|_| r.random_range(lo..hi)).collect())
}

/// Values whose magnitudes stay at least `gap` away from zero.
pub fn away_from_zero(r: &mut ChaCha20Rng, shape: &[usize], gap: f64) -> T64 {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.random_range(gap..1.0);
            if r.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    T64::new(shape, data)
}

/// A random arrangement of `n` values spaced `step` apart, so no two are
/// within `step` of each other.
pub fn distinct(r: &mut ChaCha20Rng, shape: &[usize], step: f64) -> T64 {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * step).collect();
    for i in (1..n).rev() {
        v.swap(i, r.random_range(0..=i));
    }
    T64::new(shape, v)
}

/// Same-padded stride-1 convolution by direct summation.
pub fn conv(x: &T64, k: &T64, b: &[f64]) -> T64 {
    let (h, w, cin) = (x.shape[0], x.shape[1], x.shape[2]);
    let (kh, kw, cout) = (k.shape[0], k.shape[1], k.shape[3]);
    let mut out = vec![0.0; h * w * cout];
    for i in 0..h {
        for j in 0..w {
            for co in 0..cout {
                let mut s = b[co];
                for u in 0..kh {
                    for v in 0..kw {
                        let (yy, xx) =
                            (i as isize + u as isize - (kh / 2) as isize, j as isize + v as isize - (kw / 2) as isize);
                        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            s += x.at(yy as usize, xx as usize, ci) * k.data[((u * kw + v) * cin + ci) * cout + co];
                        }
                    }
                }
                out[(i * w + j) * cout + co] = s;
            }
        }
    }
    T64::new(&[h, w, cout], out)
}

pub fn relu(x: &T64) -> T64 {
    T64::new(&x.shape, x.data.iter().map(|&v| v.max(0.0)).collect())
}

/// 2×2 stride-2 max pooling with floor semantics.
pub fn maxpool(x: &T64) -> T64 {
    let (h, w, c) = (x.shape[0], x.shape[1], x.shape[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow * c);
    for i in 0..oh {
        for j in 0..ow {
            for ch in 0..c {
                let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|&(dy, dx)| x.at(2 * i + dy, 2 * j + dx, ch))
                    .fold(f64::NEG_INFINITY, f64::max);
                out.push(m);
            }
        }
    }
    T64::new(&[oh, ow, c], out)
}

pub fn global_max(x: &T64) -> T64 {
    let c = x.shape[2];
    let mut m = vec![f64::NEG_INFINITY; c];
    for (i, &v) in x.data.iter().enumerate() {
        m[i % c] = m[i % c].max(v);
    }
    T64::new(&[c], m)
}

pub fn dense(x: &T64, k: &T64, b: &[f64]) -> T64 {
    let (n_in, n_out) = (k.shape[0], k.shape[1]);
    let y = (0..n_out).map(|o| b[o] + (0..n_in).map(|i| x.data[i] * k.data[i * n_out + o]).sum::<f64>()).collect();
    T64::new(&[n_out], y)
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `−w·ln softmax(z)[label]`, computed as `w·(logsumexp(z) − z[label])`.
pub fn weighted_ce_from_logits(z: &[f64], label: usize, w: f64) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    w * (lse - z[label])
}

/// Evaluation-mode logits of `state` computed in f64 from its parameters.
pub fn model_logits(spec: &ModelSpec, params: &[Option<(T64, Vec<f64>)>], x: &T64) -> Vec<f64> {
    let mut a = x.clone();
    for (layer, p) in spec.layers.iter().zip(params) {
        a = match layer.kind {
            LayerKind::Conv { .. } => {
                let (k, b) = p.as_ref().unwrap();
                relu(&conv(&a, k, b))
            }
            LayerKind::MaxPool2 => maxpool(&a),
            LayerKind::GlobalMaxPool => global_max(&a),
            LayerKind::Dropout { .. } => a,
            LayerKind::DenseSoftmax { .. } => {
                let (k, b) = p.as_ref().unwrap();
                dense(&a, k, b)
            }
        };
    }
    a.data
}

pub fn params64(state: &ModelState) -> Vec<Option<(T64, Vec<f64>)>> {
    state
        .params
        .iter()
        .map(|p| p.as_ref().map(|p| (T64::from32(&p.kernel), p.bias.data().iter().map(|&v| v as f64).collect())))
        .collect()
}

/// Central difference of `f` at `x[i]` with step `eps`.
pub fn central_difference(x: &mut [f64], i: usize, eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + eps;
    let up = f(x);
    x[i] = orig - eps;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * eps)
}

/// Relative error between an analytic and a numeric derivative. Values
/// below `floor` in magnitude are compared on an absolute scale of `floor`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Finite-difference step and tolerance for gradient checks.
pub const FD_EPS: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-3;
/// Derivatives smaller than this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-4;

/// Up to `n` distinct random indices below `len`.
pub fn sample_indices(r: &mut ChaCha20Rng, len: usize, n: usize) -> Vec<usize> {
    if len <= n {
        return (0..len).collect();
    }
    let mut v: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        v.swap(i, r.random_range(0..=i));
    }
    v.truncate(n);
    v
}
