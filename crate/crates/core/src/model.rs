//! Declarative model construction, forward/backward execution and weight
//! archives.
//!
//! A [`ModelSpec`] is an ordered list of layers. Convolutions are always
//! 3×3, same-padded, stride 1 and followed by ReLU. Every model ends in the
//! same head: global max pooling, optional dropout, and a two-unit dense
//! layer with softmax. Class index 0 is glaucoma and index 1 is normal.

use std::collections::HashSet;
use std::fmt;

use crate::error::{Error, LoadError, Result};
use crate::layers::{
    conv2d_backward_opts, conv2d_forward, dense_backward, dense_forward, dropout_backward, dropout_forward,
    global_max_pool, maxpool2x2_forward, pool_backward, relu, softmax, ArgMax, LayerParams,
};
use crate::tensor::{random_init, ImageTensor, SeededRng};

pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    Scratch,
    Vgg16,
    Vgg19,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Scratch => "scratch",
            Architecture::Vgg16 => "vgg16",
            Architecture::Vgg19 => "vgg19",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    /// 3×3 same-padded convolution followed by ReLU.
    Conv {
        filters: usize,
    },
    MaxPool2,
    GlobalMaxPool,
    Dropout {
        rate: f32,
    },
    DenseSoftmax {
        units: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Convolutional block the layer belongs to; `None` for the head.
    pub block: Option<usize>,
    pub trainable: bool,
}

impl LayerSpec {
    fn new(name: impl Into<String>, kind: LayerKind, block: Option<usize>) -> Self {
        LayerSpec { name: name.into(), kind, block, trainable: true }
    }

    pub fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. } | LayerKind::DenseSoftmax { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub arch: Architecture,
    /// `[H, W, C]`
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

const SCRATCH_FILTERS: [usize; 4] = [32, 64, 128, 256];

/// The from-scratch network: four single-conv blocks of 32, 64, 128 and 256
/// filters with 2×2 max pooling between them, then global max pooling and a
/// two-unit softmax layer.
pub fn build_scratch_cnn(input: [usize; 3]) -> Result<ModelSpec> {
    build_scratch_cnn_scaled(input, 1)
}

/// [`build_scratch_cnn`] with every filter count divided by `width_divisor`.
pub fn build_scratch_cnn_scaled(input: [usize; 3], width_divisor: usize) -> Result<ModelSpec> {
    let [h, w, c] = input;
    if c == 0 || h < 8 || w < 8 {
        return Err(Error::Config(format!(
            "scratch CNN needs spatial extents of at least 8 for its three pooling stages, got {h}×{w}×{c}"
        )));
    }
    let filters = scaled_filters(&SCRATCH_FILTERS, width_divisor)?;
    let mut layers = Vec::new();
    for (b, &f) in filters.iter().enumerate() {
        let block = b + 1;
        layers.push(LayerSpec::new(format!("conv{block}_1"), LayerKind::Conv { filters: f }, Some(block)));
        if block < 4 {
            layers.push(LayerSpec::new(format!("pool{block}"), LayerKind::MaxPool2, Some(block)));
        }
    }
    layers.push(LayerSpec::new("gmp", LayerKind::GlobalMaxPool, None));
    layers.push(LayerSpec::new("dense", LayerKind::DenseSoftmax { units: NUM_CLASSES }, None));
    Ok(ModelSpec { arch: Architecture::Scratch, input, layers })
}

const VGG_FILTERS: [usize; 5] = [64, 128, 256, 512, 512];
pub const VGG_TOP_DROPOUT: f32 = 0.4;

/// VGG16 or VGG19 convolutional base with the GMP → dropout(0.4) →
/// softmax(2) top model. Blocks `1..=freeze_through_block` are frozen.
pub fn build_vgg(variant: u32, input: [usize; 3], freeze_through_block: usize) -> Result<ModelSpec> {
    build_vgg_scaled(variant, input, freeze_through_block, 1)
}

pub fn build_vgg_scaled(
    variant: u32,
    input: [usize; 3],
    freeze_through_block: usize,
    width_divisor: usize,
) -> Result<ModelSpec> {
    let (arch, convs): (_, [usize; 5]) = match variant {
        16 => (Architecture::Vgg16, [2, 2, 3, 3, 3]),
        19 => (Architecture::Vgg19, [2, 2, 4, 4, 4]),
        other => return Err(Error::Config(format!("unknown VGG variant {other} (expected 16 or 19)"))),
    };
    let [h, w, c] = input;
    if c != 3 {
        return Err(Error::Config(format!("VGG input must have 3 channels, got {c}")));
    }
    if h < 32 || w < 32 {
        return Err(Error::Config(format!("VGG needs spatial extents of at least 32, got {h}×{w}")));
    }
    if freeze_through_block > 5 {
        return Err(Error::Config(format!("VGG has 5 blocks, cannot freeze through {freeze_through_block}")));
    }
    let filters = scaled_filters(&VGG_FILTERS, width_divisor)?;
    let mut layers = Vec::new();
    for (b, (&n, &f)) in convs.iter().zip(&filters).enumerate() {
        let block = b + 1;
        for i in 1..=n {
            layers.push(LayerSpec::new(format!("block{block}_conv{i}"), LayerKind::Conv { filters: f }, Some(block)));
        }
        layers.push(LayerSpec::new(format!("block{block}_pool"), LayerKind::MaxPool2, Some(block)));
    }
    for l in &mut layers {
        l.trainable = l.block.is_some_and(|b| b > freeze_through_block);
    }
    layers.push(LayerSpec::new("gmp", LayerKind::GlobalMaxPool, None));
    layers.push(LayerSpec::new("dropout", LayerKind::Dropout { rate: VGG_TOP_DROPOUT }, None));
    layers.push(LayerSpec::new("dense", LayerKind::DenseSoftmax { units: NUM_CLASSES }, None));
    Ok(ModelSpec { arch, input, layers })
}

fn scaled_filters<const N: usize>(base: &[usize; N], divisor: usize) -> Result<[usize; N]> {
    if divisor == 0 || base.iter().any(|&f| f % divisor != 0) {
        return Err(Error::Config(format!("width divisor {divisor} does not divide filter counts {base:?}")));
    }
    Ok(base.map(|f| f / divisor))
}

impl ModelSpec {
    /// Output shape of every layer, in order.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = match (&layer.kind, shape.as_slice()) {
                (LayerKind::Conv { filters }, &[h, w, _]) => vec![h, w, *filters],
                (LayerKind::MaxPool2, &[h, w, c]) if h >= 2 && w >= 2 => vec![h / 2, w / 2, c],
                (LayerKind::GlobalMaxPool, &[_, _, c]) => vec![c],
                (LayerKind::Dropout { .. }, s) => s.to_vec(),
                (LayerKind::DenseSoftmax { units }, &[_]) => vec![*units],
                (kind, s) => {
                    return Err(Error::Config(format!(
                        "layer `{}` ({kind:?}) cannot take input shape {s:?}",
                        layer.name
                    )))
                }
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    /// `(layer name, output shape)` rows starting with the input layer.
    pub fn shape_table(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut rows = vec![("input".to_string(), self.input.to_vec())];
        for (l, s) in self.layers.iter().zip(self.output_shapes()?) {
            rows.push((l.name.clone(), s));
        }
        Ok(rows)
    }

    /// Expected `(layer index, kernel shape, bias shape)` per parametered layer.
    pub fn param_shapes(&self) -> Result<Vec<ParamShape>> {
        let shapes = self.output_shapes()?;
        let mut res = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let in_shape: &[usize] = if i == 0 { &self.input } else { &shapes[i - 1] };
            match layer.kind {
                LayerKind::Conv { filters } => res.push((i, vec![3, 3, in_shape[2], filters], vec![filters])),
                LayerKind::DenseSoftmax { units } => res.push((i, vec![in_shape[0], units], vec![units])),
                _ => {}
            }
        }
        Ok(res)
    }

    pub fn param_count(&self) -> Result<usize> {
        self.count_params(|_| true)
    }

    pub fn trainable_param_count(&self) -> Result<usize> {
        self.count_params(|l| l.trainable)
    }

    fn count_params(&self, keep: impl Fn(&LayerSpec) -> bool) -> Result<usize> {
        Ok(self
            .param_shapes()?
            .iter()
            .filter(|(i, _, _)| keep(&self.layers[*i]))
            .map(|(_, k, b)| k.iter().product::<usize>() + b[0])
            .sum())
    }

    /// Index of the global-max-pool layer, whose input holds the final conv
    /// feature maps.
    pub fn gmp_index(&self) -> Option<usize> {
        self.layers.iter().position(|l| l.kind == LayerKind::GlobalMaxPool)
    }

    /// Whether the model ends with GMP → (dropout) → dense-softmax.
    pub fn has_cam_head(&self) -> bool {
        let Some(g) = self.gmp_index() else { return false };
        let tail: Vec<_> = self.layers[g + 1..].iter().map(|l| &l.kind).collect();
        matches!(
            tail.as_slice(),
            [LayerKind::DenseSoftmax { .. }] | [LayerKind::Dropout { .. }, LayerKind::DenseSoftmax { .. }]
        )
    }
}

/// Parameters plus the per-parametered-layer trainable mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub spec: ModelSpec,
    /// Aligned with `spec.layers`; `Some` exactly for parametered layers.
    pub params: Vec<Option<LayerParams>>,
    /// One flag per parametered layer, in layer order.
    pub trainable: Vec<bool>,
}

fn init_params(kshape: &[usize], bshape: &[usize], rng: &mut SeededRng) -> Result<LayerParams> {
    let (fan_in, fan_out) = match *kshape {
        [kh, kw, cin, cout] => (kh * kw * cin, kh * kw * cout),
        [n_in, n_out] => (n_in, n_out),
        _ => unreachable!("kernel shapes are rank 2 or 4"),
    };
    LayerParams::new(random_init(kshape, rng, fan_in, fan_out)?, ImageTensor::zeros(bshape)?)
}

impl ModelState {
    /// Glorot-uniform kernels and zero biases, drawn layer by layer from `rng`.
    pub fn init(spec: ModelSpec, rng: &mut SeededRng) -> Result<Self> {
        let mut params = vec![None; spec.layers.len()];
        for (i, k, b) in spec.param_shapes()? {
            params[i] = Some(init_params(&k, &b, rng)?);
        }
        Ok(Self::from_parts(spec, params))
    }

    fn from_parts(spec: ModelSpec, params: Vec<Option<LayerParams>>) -> Self {
        let trainable = spec.layers.iter().filter(|l| l.has_params()).map(|l| l.trainable).collect();
        ModelState { spec, params, trainable }
    }

    pub fn layer_trainable(&self, layer: usize) -> bool {
        self.spec.layers[layer].trainable
    }

    /// Every parameter set to zero; handy for symmetry checks.
    pub fn zeroed(spec: ModelSpec) -> Result<Self> {
        let mut params = vec![None; spec.layers.len()];
        for (i, k, b) in spec.param_shapes()? {
            params[i] = Some(LayerParams::new(ImageTensor::zeros(&k)?, ImageTensor::zeros(&b)?)?);
        }
        Ok(Self::from_parts(spec, params))
    }

    pub fn dense_params(&self) -> Option<&LayerParams> {
        let i = self.spec.layers.iter().rposition(|l| matches!(l.kind, LayerKind::DenseSoftmax { .. }))?;
        self.params[i].as_ref()
    }

    /// Runs the network. `rng` drives dropout and is only consulted when
    /// `training` is true.
    pub fn forward(&self, x: &ImageTensor, training: bool, rng: &mut SeededRng) -> Result<ForwardPass> {
        if x.shape() != self.spec.input {
            return Err(Error::dim(format!("model expects input {:?}, got {:?}", self.spec.input, x.shape())));
        }
        let n = self.spec.layers.len();
        let mut acts = Vec::with_capacity(n + 1);
        let mut aux = Vec::with_capacity(n);
        acts.push(x.clone());
        let mut logits = None;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let input = &acts[i];
            let (out, a) = match &layer.kind {
                LayerKind::Conv { .. } => {
                    let p = self.params[i].as_ref().expect("conv has params");
                    (relu(&conv2d_forward(input, p)?), Aux::None)
                }
                LayerKind::MaxPool2 => {
                    let (y, rec) = maxpool2x2_forward(input)?;
                    (y, Aux::Pool(rec))
                }
                LayerKind::GlobalMaxPool => {
                    let (y, rec) = global_max_pool(input)?;
                    (y, Aux::Pool(rec))
                }
                LayerKind::Dropout { rate } => {
                    let (y, mask) = dropout_forward(input, *rate, rng, training)?;
                    (y, Aux::Mask(mask))
                }
                LayerKind::DenseSoftmax { .. } => {
                    let p = self.params[i].as_ref().expect("dense has params");
                    let z = dense_forward(input, p)?;
                    let probs = softmax(&z)?;
                    logits = Some(z);
                    (probs, Aux::None)
                }
            };
            acts.push(out);
            aux.push(a);
        }
        let logits = logits.ok_or_else(|| Error::Config("model has no dense-softmax layer".into()))?;
        Ok(ForwardPass { acts, aux, logits })
    }

    /// Gradients of the loss with respect to every trainable parameter, given
    /// the loss gradient with respect to the pre-softmax logits. Backward
    /// propagation stops at the earliest trainable layer.
    pub fn backward(&self, pass: &ForwardPass, d_logits: &ImageTensor) -> Result<Gradients> {
        let n = self.spec.layers.len();
        let mut grads = Gradients { layers: vec![None; n] };
        let Some(first) = self.spec.layers.iter().position(|l| l.trainable && l.has_params()) else {
            return Ok(grads);
        };
        let mut d = d_logits.clone();
        for i in (first..n).rev() {
            let layer = &self.spec.layers[i];
            let input = &pass.acts[i];
            let want_input = i > first;
            d = match (&layer.kind, &pass.aux[i]) {
                (LayerKind::DenseSoftmax { .. }, _) => {
                    let p = self.params[i].as_ref().expect("dense has params");
                    let g = dense_backward(input, p, &d)?;
                    if layer.trainable {
                        grads.layers[i] = Some(ParamGrads { d_kernel: g.d_kernel, d_bias: g.d_bias });
                    }
                    g.d_input.expect("dense always returns d_input")
                }
                (LayerKind::Conv { .. }, _) => {
                    let p = self.params[i].as_ref().expect("conv has params");
                    let out = &pass.acts[i + 1];
                    let d_pre: Vec<f32> =
                        out.data().iter().zip(d.data()).map(|(&y, &g)| if y > 0.0 { g } else { 0.0 }).collect();
                    let d_pre = ImageTensor::new(out.shape(), d_pre)?;
                    let g = conv2d_backward_opts(input, p, &d_pre, want_input)?;
                    if layer.trainable {
                        grads.layers[i] = Some(ParamGrads { d_kernel: g.d_kernel, d_bias: g.d_bias });
                    }
                    match g.d_input {
                        Some(di) => di,
                        None => break,
                    }
                }
                (LayerKind::MaxPool2 | LayerKind::GlobalMaxPool, Aux::Pool(rec)) => pool_backward(rec, &d)?,
                (LayerKind::Dropout { .. }, Aux::Mask(mask)) => dropout_backward(mask.as_deref(), &d),
                (kind, _) => unreachable!("cache mismatch for {kind:?}"),
            };
        }
        Ok(grads)
    }
}

#[derive(Clone, Debug)]
enum Aux {
    None,
    Pool(ArgMax),
    Mask(Option<Vec<f32>>),
}

/// Activations retained by [`ModelState::forward`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    acts: Vec<ImageTensor>,
    aux: Vec<Aux>,
    logits: ImageTensor,
}

impl ForwardPass {
    pub fn probs(&self) -> &ImageTensor {
        self.acts.last().expect("at least one layer")
    }

    pub fn logits(&self) -> &ImageTensor {
        &self.logits
    }

    /// Probability of class 0 (glaucoma).
    pub fn glaucoma_score(&self) -> f32 {
        self.probs().data()[0]
    }

    /// Output of layer `i`.
    pub fn activation(&self, i: usize) -> &ImageTensor {
        &self.acts[i + 1]
    }

    /// The feature maps entering global max pooling.
    pub fn final_features(&self, spec: &ModelSpec) -> Option<&ImageTensor> {
        spec.gmp_index().map(|g| &self.acts[g])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub d_kernel: ImageTensor,
    pub d_bias: ImageTensor,
}

/// Per-layer parameter gradients; `Some` only for trainable parametered layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<ParamGrads>>,
}

impl Gradients {
    /// `self += other`, elementwise.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            match (a, b) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.d_kernel.data_mut().iter_mut().zip(b.d_kernel.data()) {
                        *x += y;
                    }
                    for (x, y) in a.d_bias.data_mut().iter_mut().zip(b.d_bias.data()) {
                        *x += y;
                    }
                }
                (a @ None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, k: f32) {
        for g in self.layers.iter_mut().flatten() {
            g.d_kernel.data_mut().iter_mut().chain(g.d_bias.data_mut()).for_each(|v| *v *= k);
        }
    }
}

/// `(layer index, kernel shape, bias shape)`.
pub type ParamShape = (usize, Vec<usize>, Vec<usize>);

/// Named tensors, in insertion order, as stored in a `CWT1` file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightArchive {
    tensors: Vec<(String, ImageTensor)>,
}

const MAGIC: &[u8; 4] = b"CWT1";
const DTYPE_F32: u8 = 0;

impl WeightArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: ImageTensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(LoadError::NameCollision(name).into());
        }
        self.tensors.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ImageTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn remove(&mut self, name: &str) -> Option<ImageTensor> {
        let i = self.tensors.iter().position(|(n, _)| n == name)?;
        Some(self.tensors.remove(i).1)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Little-endian serialization: magic `CWT1`, `u32` tensor count, then per
    /// tensor a `u16` name length, UTF-8 name, `u8` rank, `rank × u32`
    /// extents, `u8` dtype (0 = f32) and the row-major values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            out.push(DTYPE_F32);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(LoadError::BadMagic.into());
        }
        let count = u32::from_le_bytes(r.array("tensor count")?);
        let mut archive = WeightArchive::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.array("name length")?) as usize;
            let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| LoadError::BadName)?.to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(r.array("extents")?) as usize);
            }
            let dtype = r.take(1, "dtype")?[0];
            if dtype != DTYPE_F32 {
                return Err(LoadError::UnsupportedDtype(dtype).into());
            }
            if shape.contains(&0) || shape.is_empty() || shape.len() > 4 {
                return Err(LoadError::ZeroExtent(name).into());
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or(LoadError::Truncated("values"))?, "values")?;
            let data: Vec<f32> =
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk"))).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(LoadError::NonFinite(name).into());
            }
            archive.insert(name, ImageTensor::new(&shape, data)?)?;
        }
        Ok(archive)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], LoadError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(LoadError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], LoadError> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

fn kernel_name(layer: &str) -> String {
    format!("{layer}/kernel")
}

fn bias_name(layer: &str) -> String {
    format!("{layer}/bias")
}

/// Every parameter tensor as `<layer>/kernel` and `<layer>/bias`.
pub fn save_weights(state: &ModelState) -> WeightArchive {
    let mut a = WeightArchive::new();
    for (layer, p) in state.spec.layers.iter().zip(&state.params) {
        if let Some(p) = p {
            a.insert(kernel_name(&layer.name), p.kernel.clone()).expect("layer names are unique");
            a.insert(bias_name(&layer.name), p.bias.clone()).expect("layer names are unique");
        }
    }
    a
}

/// Builds a state for `spec` from `archive`.
///
/// With `strict`, every parameter tensor must be present and no extra names
/// are allowed. Otherwise missing head tensors (layers outside any conv block)
/// are freshly initialized from `rng` and unknown names are ignored, which is
/// how an ImageNet VGG archive with its classifier removed is imported.
pub fn load_weights(
    spec: &ModelSpec,
    archive: &WeightArchive,
    strict: bool,
    rng: &mut SeededRng,
) -> Result<ModelState> {
    let mut params = vec![None; spec.layers.len()];
    let mut used = HashSet::new();
    for (i, kshape, bshape) in spec.param_shapes()? {
        let layer = &spec.layers[i];
        let (kn, bn) = (kernel_name(&layer.name), bias_name(&layer.name));
        let fetch = |name: &str, expected: &[usize]| -> Result<Option<ImageTensor>> {
            match archive.get(name) {
                Some(t) if t.shape() == expected => Ok(Some(t.clone())),
                Some(t) => Err(LoadError::ShapeMismatch {
                    name: name.to_string(),
                    expected: expected.to_vec(),
                    found: t.shape().to_vec(),
                }
                .into()),
                None => Ok(None),
            }
        };
        let (k, b) = (fetch(&kn, &kshape)?, fetch(&bn, &bshape)?);
        params[i] = Some(match (k, b) {
            (Some(k), Some(b)) => {
                used.insert(kn);
                used.insert(bn);
                LayerParams::new(k, b)?
            }
            (k, _) if strict || layer.block.is_some() => {
                return Err(LoadError::Missing(if k.is_none() { kn } else { bn }).into());
            }
            _ => init_params(&kshape, &bshape, rng)?,
        });
    }
    if strict {
        if let Some(extra) = archive.names().find(|n| !used.contains(*n)) {
            return Err(Error::Config(format!("archive contains tensor `{extra}` unknown to the model")));
        }
    }
    Ok(ModelState::from_parts(spec.clone(), params))
}
