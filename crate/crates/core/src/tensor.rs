//! Dense row-major `f32` arrays and the repository-wide random number generator.
//!
//! Images and feature maps are stored `H×W×C`, convolution kernels
//! `KH×KW×Cin×Cout`, dense kernels `In×Out`. There is exactly one layout, so no
//! operation ever transposes implicitly.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct ImageTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl std::fmt::Debug for ImageTensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ImageTensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::dim(format!("rank must be 1..=4, got shape {shape:?}")));
    }
    if shape.contains(&0) {
        return Err(Error::dim(format!("zero extent in shape {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl ImageTensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let len = check_shape(shape)?;
        if data.len() != len {
            return Err(Error::dim(format!("shape {shape:?} needs {len} values, got {}", data.len())));
        }
        Ok(ImageTensor { shape: shape.to_vec(), data })
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(ImageTensor { shape: shape.to_vec(), data: vec![value; len] })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    /// Builds a rank-2 tensor from rows; every row must have the same length.
    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    /// Image of shape `h×w×c` with `f(y, x, c)` at every position.
    pub fn from_fn_hwc(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let len = check_shape(&[h, w, c])?;
        let mut data = Vec::with_capacity(len);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Ok(ImageTensor { shape: vec![h, w, c], data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// `(H, W, C)` of a rank-3 tensor.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::dim(format!("expected H×W×C tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn at3(&self, y: usize, x: usize, c: usize) -> f32 {
        let (_, w, ch) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(y * w + x) * ch + c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::dim(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        ImageTensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    /// Extracts one channel of an `H×W×C` image as `H×W×1`.
    pub fn channel(&self, c: usize) -> Result<Self> {
        let (h, w, ch) = self.hwc()?;
        if c >= ch {
            return Err(Error::dim(format!("channel {c} out of range for shape {:?}", self.shape)));
        }
        let data = self.data.iter().skip(c).step_by(ch).copied().collect();
        ImageTensor::new(&[h, w, 1], data)
    }

    /// Repeats a single-channel image `n` times along the channel axis.
    pub fn replicate_channels(&self, n: usize) -> Result<Self> {
        let (h, w, c) = self.hwc()?;
        if c != 1 {
            return Err(Error::dim(format!("channel replication expects 1 channel, got {c}")));
        }
        let data = self.data.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
        ImageTensor::new(&[h, w, n], data)
    }
}

/// Standard matrix product `[m×k]·[k×n]`, accumulating over `k` in
/// ascending order for every output cell.
pub fn matmul(a: &ImageTensor, b: &ImageTensor) -> Result<ImageTensor> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::dim(format!("matmul needs rank-2 operands, got {:?} and {:?}", a.shape(), b.shape())));
    };
    if k != k2 {
        return Err(Error::dim(format!("matmul inner extents differ: {:?} × {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    ImageTensor::new(&[m, n], out)
}

/// Source coordinate sampled by output index `i` under the corner-aligned
/// convention: `i·(in−1)/(out−1)`, so the first and last samples land exactly
/// on the first and last source pixels. A single output sample sits at the
/// source centre `(in−1)/2`.
pub fn corner_aligned_coord(i: usize, in_extent: usize, out_extent: usize) -> f32 {
    if out_extent == 1 {
        (in_extent as f32 - 1.0) * 0.5
    } else {
        (i as f64 * (in_extent as f64 - 1.0) / (out_extent as f64 - 1.0)) as f32
    }
}

/// Bilinear interpolation of an `H×W×C` image to `out_h×out_w×C` using
/// [`corner_aligned_coord`] on both axes.
pub fn bilinear_resize(x: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    let (h, w, c) = x.hwc()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim(format!("bilinear_resize target {out_h}×{out_w} has a zero extent")));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let taps = |out: usize, inn: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|i| {
                let s = corner_aligned_coord(i, inn, out);
                let lo = (s.floor() as usize).min(inn - 1);
                let hi = (lo + 1).min(inn - 1);
                (lo, hi, s - lo as f32)
            })
            .collect()
    };
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let src = x.data();
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                // lerp form keeps constant images exactly constant
                let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
                let bot = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
                data.push(top + (bot - top) * fy);
            }
        }
    }
    ImageTensor::new(&[out_h, out_w, c], data)
}

/// Half-width of the Glorot uniform distribution, `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f32 {
    (6.0 / (fan_in + fan_out) as f64).sqrt() as f32
}

/// Weights drawn uniformly from `[-b, b)` with `b = glorot_bound(fan_in, fan_out)`.
pub fn random_init(shape: &[usize], rng: &mut SeededRng, fan_in: usize, fan_out: usize) -> Result<ImageTensor> {
    if fan_in == 0 {
        return Err(Error::Parameter("fan_in must be at least 1".into()));
    }
    let len = check_shape(shape)?;
    let bound = glorot_bound(fan_in, fan_out);
    let data = (0..len).map(|_| (rng.random::<f32>() * 2.0 - 1.0) * bound).collect();
    ImageTensor::new(shape, data)
}

/// Seeded generator used everywhere in the crate: ChaCha with 8 rounds
/// (`rand_chacha::ChaCha8Rng`), whose output stream is fixed by the seed on
/// every platform.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for a sub-task identified by `tags`, derived only
    /// from this generator's seed (not its current position).
    pub fn derive(&self, tags: &[u64]) -> SeededRng {
        SeededRng::new(mix_seed(self.seed, tags))
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn mix_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// FNV-1a; stable across platforms and toolchains, unlike `DefaultHasher`.
pub(crate) fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
