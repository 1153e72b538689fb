//! Forward and backward passes for the layer types used by the models:
//! same-padded stride-1 convolution, ReLU, 2×2 max pooling, global max
//! pooling, dense, softmax and inverted dropout.
//!
//! Every routine is a pure function of its arguments. The convolution loops
//! are split across rayon workers by output row, and each output value is
//! accumulated by exactly one worker in a fixed order, so results do not
//! depend on the thread count.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, SeededRng};

/// Kernel and bias of a convolution (`KH×KW×Cin×Cout`, `[Cout]`) or dense
/// layer (`In×Out`, `[Out]`).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub kernel: ImageTensor,
    pub bias: ImageTensor,
}

impl LayerParams {
    pub fn new(kernel: ImageTensor, bias: ImageTensor) -> Result<Self> {
        let out = *kernel.shape().last().unwrap();
        if bias.shape() != [out] {
            return Err(Error::dim(format!("bias shape {:?} does not match kernel output extent {out}", bias.shape())));
        }
        Ok(LayerParams { kernel, bias })
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }
}

#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub d_kernel: ImageTensor,
    pub d_bias: ImageTensor,
    /// `None` only when the caller asked to skip the input gradient.
    pub d_input: Option<ImageTensor>,
}

fn conv_dims(x: &ImageTensor, p: &LayerParams) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (h, w, cin) = x.hwc()?;
    let &[kh, kw, kcin, cout] = p.kernel.shape() else {
        return Err(Error::dim(format!("conv kernel must be KH×KW×Cin×Cout, got {:?}", p.kernel.shape())));
    };
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::dim(format!("same padding needs odd kernel extents, got {kh}×{kw}")));
    }
    if kcin != cin {
        return Err(Error::dim(format!("kernel expects {kcin} input channels, input {:?} has {cin}", x.shape())));
    }
    Ok((h, w, cin, kh, kw, cout))
}

#[inline]
fn axpy(acc: &mut [f32], a: f32, x: &[f32]) {
    for (o, &v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Dot product with eight interleaved partial sums, combined in a fixed order.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += xa[i] * xb[i];
        }
    }
    let mut s = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Zero-padded "same" convolution with stride 1:
/// `y[i,j,co] = b[co] + Σ_{u,v,ci} x[i+u−ph, j+v−pw, ci]·k[u,v,ci,co]`.
pub fn conv2d_forward(x: &ImageTensor, p: &LayerParams) -> Result<ImageTensor> {
    let (h, w, cin, kh, kw, cout) = conv_dims(x, p)?;
    let (ph, pw) = (kh / 2, kw / 2);
    let xs = x.data();
    let ks = p.kernel.data();
    let bias = p.bias.data();
    let mut out = vec![0.0f32; h * w * cout];
    out.par_chunks_mut(w * cout).enumerate().for_each(|(y, row)| {
        for px in row.chunks_exact_mut(cout) {
            px.copy_from_slice(bias);
        }
        for u in 0..kh {
            let Some(sy) = (y + u).checked_sub(ph).filter(|&s| s < h) else { continue };
            for (xo, px) in row.chunks_exact_mut(cout).enumerate() {
                for v in 0..kw {
                    let Some(sx) = (xo + v).checked_sub(pw).filter(|&s| s < w) else { continue };
                    let xin = &xs[(sy * w + sx) * cin..][..cin];
                    let kbase = (u * kw + v) * cin * cout;
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv != 0.0 {
                            axpy(px, xv, &ks[kbase + ci * cout..][..cout]);
                        }
                    }
                }
            }
        }
    });
    ImageTensor::new(&[h, w, cout], out)
}

/// Gradients of [`conv2d_forward`] with respect to kernel, bias and input.
pub fn conv2d_backward(x: &ImageTensor, p: &LayerParams, d_out: &ImageTensor) -> Result<LayerGrads> {
    conv2d_backward_opts(x, p, d_out, true)
}

pub(crate) fn conv2d_backward_opts(
    x: &ImageTensor,
    p: &LayerParams,
    d_out: &ImageTensor,
    want_input: bool,
) -> Result<LayerGrads> {
    let (h, w, cin, kh, kw, cout) = conv_dims(x, p)?;
    if d_out.shape() != [h, w, cout] {
        return Err(Error::dim(format!(
            "conv d_out shape {:?} differs from forward output {:?}",
            d_out.shape(),
            [h, w, cout]
        )));
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let xs = x.data();
    let ks = p.kernel.data();
    let ds = d_out.data();

    let mut d_bias = vec![0.0f32; cout];
    for px in ds.chunks_exact(cout) {
        axpy(&mut d_bias, 1.0, px);
    }

    // one task per kernel tap (u, v); each owns a Cin×Cout slab
    let mut d_kernel = vec![0.0f32; kh * kw * cin * cout];
    d_kernel.par_chunks_mut(cin * cout).enumerate().for_each(|(tap, slab)| {
        let (u, v) = (tap / kw, tap % kw);
        for y in 0..h {
            let Some(sy) = (y + u).checked_sub(ph).filter(|&s| s < h) else { continue };
            for xo in 0..w {
                let Some(sx) = (xo + v).checked_sub(pw).filter(|&s| s < w) else { continue };
                let xin = &xs[(sy * w + sx) * cin..][..cin];
                let dpx = &ds[(y * w + xo) * cout..][..cout];
                for (ci, &xv) in xin.iter().enumerate() {
                    if xv != 0.0 {
                        axpy(&mut slab[ci * cout..][..cout], xv, dpx);
                    }
                }
            }
        }
    });

    let d_input = want_input.then(|| {
        let mut d_in = vec![0.0f32; h * w * cin];
        d_in.par_chunks_mut(w * cin).enumerate().for_each(|(y, row)| {
            for (xi, px) in row.chunks_exact_mut(cin).enumerate() {
                for u in 0..kh {
                    // output row oy reads input row y through tap u when oy + u − ph = y
                    let Some(oy) = (y + ph).checked_sub(u).filter(|&o| o < h) else { continue };
                    for v in 0..kw {
                        let Some(ox) = (xi + pw).checked_sub(v).filter(|&o| o < w) else { continue };
                        let dpx = &ds[(oy * w + ox) * cout..][..cout];
                        let kbase = (u * kw + v) * cin * cout;
                        for (ci, g) in px.iter_mut().enumerate() {
                            *g += dot(dpx, &ks[kbase + ci * cout..][..cout]);
                        }
                    }
                }
            }
        });
        ImageTensor::new(&[h, w, cin], d_in)
    });

    Ok(LayerGrads {
        d_kernel: ImageTensor::new(p.kernel.shape(), d_kernel)?,
        d_bias: ImageTensor::new(&[cout], d_bias)?,
        d_input: d_input.transpose()?,
    })
}

pub fn relu(x: &ImageTensor) -> ImageTensor {
    x.map(|v| v.max(0.0))
}

/// Passes `d_out` where `x > 0`; the subgradient at exactly 0 is taken as 0.
pub fn relu_backward(x: &ImageTensor, d_out: &ImageTensor) -> Result<ImageTensor> {
    if x.shape() != d_out.shape() {
        return Err(Error::dim(format!("relu: {:?} vs {:?}", x.shape(), d_out.shape())));
    }
    let data = x.data().iter().zip(d_out.data()).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
    ImageTensor::new(x.shape(), data)
}

/// Flat input index of the winning element for each pooled output.
#[derive(Clone, Debug, PartialEq)]
pub struct ArgMax {
    pub input_shape: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Route each incoming gradient to its recorded argmax; used by both pooling kinds.
pub fn pool_backward(record: &ArgMax, d_out: &ImageTensor) -> Result<ImageTensor> {
    if d_out.len() != record.indices.len() {
        return Err(Error::dim(format!(
            "pool backward: {} gradients for {} pooled outputs",
            d_out.len(),
            record.indices.len()
        )));
    }
    let mut d_in = ImageTensor::zeros(&record.input_shape)?;
    let buf = d_in.data_mut();
    for (&idx, &g) in record.indices.iter().zip(d_out.data()) {
        buf[idx] += g;
    }
    Ok(d_in)
}

/// Non-overlapping 2×2 max pooling; a trailing odd row or column is dropped.
/// Ties resolve to the first element in row-major window order.
pub fn maxpool2x2_forward(x: &ImageTensor) -> Result<(ImageTensor, ArgMax)> {
    let (h, w, c) = x.hwc()?;
    if h < 2 || w < 2 {
        return Err(Error::dim(format!("2×2 max pooling needs H, W ≥ 2, got {:?}", x.shape())));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xs = x.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut indices = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for xo in 0..ow {
            for ch in 0..c {
                let idx = |dy: usize, dx: usize| ((2 * y + dy) * w + 2 * xo + dx) * c + ch;
                let mut best = idx(0, 0);
                for cand in [idx(0, 1), idx(1, 0), idx(1, 1)] {
                    if xs[cand] > xs[best] {
                        best = cand;
                    }
                }
                out.push(xs[best]);
                indices.push(best);
            }
        }
    }
    Ok((ImageTensor::new(&[oh, ow, c], out)?, ArgMax { input_shape: x.shape().to_vec(), indices }))
}

/// Per-channel spatial maximum of an `H×W×C` map, returned as `[C]`.
/// The recorded argmax is the first maximum in row-major order.
pub fn global_max_pool(x: &ImageTensor) -> Result<(ImageTensor, ArgMax)> {
    let (_, _, c) = x.hwc()?;
    let xs = x.data();
    let mut best: Vec<usize> = (0..c).collect();
    for (i, &v) in xs.iter().enumerate().skip(c) {
        let ch = i % c;
        if v > xs[best[ch]] {
            best[ch] = i;
        }
    }
    let out = best.iter().map(|&i| xs[i]).collect();
    Ok((ImageTensor::new(&[c], out)?, ArgMax { input_shape: x.shape().to_vec(), indices: best }))
}

/// `y = xᵀW + b` for `x: [In]`, `W: In×Out`.
pub fn dense_forward(x: &ImageTensor, p: &LayerParams) -> Result<ImageTensor> {
    let &[n_in, n_out] = p.kernel.shape() else {
        return Err(Error::dim(format!("dense kernel must be In×Out, got {:?}", p.kernel.shape())));
    };
    if x.shape() != [n_in] {
        return Err(Error::dim(format!("dense expects input [{n_in}], got {:?}", x.shape())));
    }
    let mut y = p.bias.data().to_vec();
    let ws = p.kernel.data();
    for (i, &xv) in x.data().iter().enumerate() {
        axpy(&mut y, xv, &ws[i * n_out..][..n_out]);
    }
    ImageTensor::new(&[n_out], y)
}

pub fn dense_backward(x: &ImageTensor, p: &LayerParams, d_out: &ImageTensor) -> Result<LayerGrads> {
    let &[n_in, n_out] = p.kernel.shape() else {
        return Err(Error::dim(format!("dense kernel must be In×Out, got {:?}", p.kernel.shape())));
    };
    if x.shape() != [n_in] || d_out.shape() != [n_out] {
        return Err(Error::dim(format!(
            "dense backward: input {:?}, d_out {:?}, kernel {:?}",
            x.shape(),
            d_out.shape(),
            p.kernel.shape()
        )));
    }
    let ds = d_out.data();
    let ws = p.kernel.data();
    let mut dk = Vec::with_capacity(n_in * n_out);
    for &xv in x.data() {
        dk.extend(ds.iter().map(|&g| xv * g));
    }
    let dx = (0..n_in).map(|i| dot(&ws[i * n_out..][..n_out], ds)).collect();
    Ok(LayerGrads {
        d_kernel: ImageTensor::new(&[n_in, n_out], dk)?,
        d_bias: d_out.clone(),
        d_input: Some(ImageTensor::new(&[n_in], dx)?),
    })
}

/// Max-shifted softmax over a rank-1 vector.
pub fn softmax(z: &ImageTensor) -> Result<ImageTensor> {
    if z.rank() != 1 || z.len() < 2 {
        return Err(Error::dim(format!("softmax expects a vector of length ≥ 2, got {:?}", z.shape())));
    }
    let m = z.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = z.data().iter().map(|&v| (v - m).exp()).collect();
    let s: f32 = e.iter().sum();
    ImageTensor::new(z.shape(), e.into_iter().map(|v| v / s).collect())
}

/// Inverted dropout. In training mode each unit is zeroed with probability
/// `rate` and survivors are scaled by `1/(1−rate)`; the returned mask holds
/// the per-unit multiplier. Evaluation mode is the identity and returns no mask.
pub fn dropout_forward(
    x: &ImageTensor,
    rate: f32,
    rng: &mut SeededRng,
    training: bool,
) -> Result<(ImageTensor, Option<Vec<f32>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    if !training || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f32> = (0..x.len()).map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep }).collect();
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok((ImageTensor::new(x.shape(), data)?, Some(mask)))
}

pub fn dropout_backward(mask: Option<&[f32]>, d_out: &ImageTensor) -> ImageTensor {
    match mask {
        None => d_out.clone(),
        Some(m) => {
            let data = d_out.data().iter().zip(m).map(|(&g, &k)| g * k).collect();
            ImageTensor::new(d_out.shape(), data).expect("mask length matches d_out")
        }
    }
}
