//! Class-weighted cross-entropy, Adadelta, and the epoch/batch training loop.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::{augment_image, AugmentConfig, Dataset, Label};
use crate::error::{Error, Result};
use crate::model::{Gradients, ModelState};
use crate::tensor::{ImageTensor, SeededRng};

/// Per-class loss multipliers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassWeights {
    pub glaucoma: f32,
    pub normal: f32,
}

impl ClassWeights {
    pub const NEUTRAL: ClassWeights = ClassWeights { glaucoma: 1.0, normal: 1.0 };

    pub fn new(glaucoma: f32, normal: f32) -> Result<Self> {
        if !(glaucoma > 0.0 && normal > 0.0) {
            return Err(Error::Parameter(format!("class weights must be positive, got [{glaucoma}, {normal}]")));
        }
        Ok(ClassWeights { glaucoma, normal })
    }

    pub fn for_label(&self, label: Label) -> f32 {
        match label {
            Label::Glaucoma => self.glaucoma,
            Label::Normal => self.normal,
        }
    }
}

/// Balanced inverse-frequency weights `w_c = N / (2·n_c)`.
pub fn compute_class_weights(n_glaucoma: usize, n_normal: usize) -> Result<ClassWeights> {
    if n_glaucoma == 0 || n_normal == 0 {
        return Err(Error::Parameter(format!(
            "class weights need samples of both classes, got {n_glaucoma} glaucoma / {n_normal} normal"
        )));
    }
    let total = (n_glaucoma + n_normal) as f64;
    ClassWeights::new((total / (2.0 * n_glaucoma as f64)) as f32, (total / (2.0 * n_normal as f64)) as f32)
}

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f32 = 1e-12;

/// Weighted cross-entropy `−w_y·ln p_y` and its gradient with respect to the
/// pre-softmax logits, `w_y·(p − onehot(y))`.
pub fn weighted_cross_entropy(p: &ImageTensor, label: Label, weights: &ClassWeights) -> Result<(f32, ImageTensor)> {
    if p.shape() != [2] {
        return Err(Error::dim(format!("expected a 2-class probability vector, got {:?}", p.shape())));
    }
    let sum: f32 = p.data().iter().sum();
    if (sum - 1.0).abs() > 1e-5 {
        return Err(Error::Parameter(format!("probabilities sum to {sum}, not 1")));
    }
    let y = label.index();
    let w = weights.for_label(label);
    let loss = -w * p.data()[y].max(PROB_FLOOR).ln();
    let grad = p.data().iter().enumerate().map(|(i, &pi)| w * (pi - if i == y { 1.0 } else { 0.0 })).collect();
    Ok((loss, ImageTensor::new(&[2], grad)?))
}

/// Decay and stabilizer used unless overridden.
pub const ADADELTA_RHO: f32 = 0.95;
pub const ADADELTA_EPS: f32 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdadeltaConfig {
    pub lr: f32,
    pub rho: f32,
    pub eps: f32,
}

impl AdadeltaConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdadeltaConfig { lr, rho: ADADELTA_RHO, eps: ADADELTA_EPS }
    }
}

/// One Adadelta update over a flat parameter slice:
///
/// ```text
/// E[g²]  ← ρ·E[g²] + (1−ρ)·g²
/// Δraw   = √(E[Δx²] + ε) / √(E[g²] + ε) · g
/// θ      ← θ − lr·Δraw
/// E[Δx²] ← ρ·E[Δx²] + (1−ρ)·Δraw²
/// ```
pub fn adadelta_update(
    cfg: &AdadeltaConfig,
    params: &mut [f32],
    grads: &[f32],
    acc_grad: &mut [f32],
    acc_delta: &mut [f32],
) {
    let AdadeltaConfig { lr, rho, eps } = *cfg;
    for (((p, &g), eg), ed) in params.iter_mut().zip(grads).zip(acc_grad.iter_mut()).zip(acc_delta.iter_mut()) {
        *eg = rho * *eg + (1.0 - rho) * g * g;
        let raw = (*ed + eps).sqrt() / (*eg + eps).sqrt() * g;
        *p -= lr * raw;
        *ed = rho * *ed + (1.0 - rho) * raw * raw;
    }
}

#[derive(Clone, Debug)]
struct Accumulators {
    grad: Vec<f32>,
    delta: Vec<f32>,
}

impl Accumulators {
    fn zeros(n: usize) -> Self {
        Accumulators { grad: vec![0.0; n], delta: vec![0.0; n] }
    }
}

/// Zero-initialized accumulators for every trainable tensor of a model.
#[derive(Clone, Debug)]
pub struct AdadeltaState {
    pub config: AdadeltaConfig,
    /// Per layer: (kernel, bias) accumulators, present for trainable layers.
    acc: Vec<Option<(Accumulators, Accumulators)>>,
}

impl AdadeltaState {
    pub fn new(model: &ModelState, config: AdadeltaConfig) -> Self {
        let acc = model
            .params
            .iter()
            .zip(&model.spec.layers)
            .map(|(p, l)| match p {
                Some(p) if l.trainable => {
                    Some((Accumulators::zeros(p.kernel.len()), Accumulators::zeros(p.bias.len())))
                }
                _ => None,
            })
            .collect();
        AdadeltaState { config, acc }
    }

    /// Mean of the squared-gradient accumulators, `(E[g²], E[Δx²])`, of layer `i`'s kernel.
    pub fn kernel_accumulators(&self, i: usize) -> Option<(&[f32], &[f32])> {
        self.acc[i].as_ref().map(|(k, _)| (k.grad.as_slice(), k.delta.as_slice()))
    }

    /// Applies one update to every trainable layer. Frozen layers are never touched.
    pub fn step(&mut self, model: &mut ModelState, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != model.params.len() {
            return Err(Error::dim("gradient list does not match the model's layers"));
        }
        for (i, acc) in self.acc.iter_mut().enumerate() {
            let (Some((ka, ba)), Some(g)) = (acc.as_mut(), grads.layers[i].as_ref()) else { continue };
            let p = model.params[i].as_mut().expect("trainable layer has params");
            if p.kernel.shape() != g.d_kernel.shape() || p.bias.shape() != g.d_bias.shape() {
                return Err(Error::dim(format!(
                    "layer {i}: gradient shapes {:?}/{:?} vs params {:?}/{:?}",
                    g.d_kernel.shape(),
                    g.d_bias.shape(),
                    p.kernel.shape(),
                    p.bias.shape()
                )));
            }
            adadelta_update(&self.config, p.kernel.data_mut(), g.d_kernel.data(), &mut ka.grad, &mut ka.delta);
            adadelta_update(&self.config, p.bias.data_mut(), g.d_bias.data(), &mut ba.grad, &mut ba.delta);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdadeltaConfig,
    /// `None` derives balanced weights from the training set.
    pub class_weights: Option<ClassWeights>,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "epochs and batch size must be at least 1, got {} and {}",
                self.epochs, self.batch_size
            )));
        }
        if !(self.optimizer.lr >= 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and ≥ 0, got {}", self.optimizer.lr)));
        }
        if self.augment.factor.is_nan() || self.augment.factor < 0.0 {
            return Err(Error::Config(format!("augmentation factor must be ≥ 0, got {}", self.augment.factor)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean weighted loss over the epoch's samples.
    pub loss: f64,
    /// Fraction of training samples whose training-mode prediction was right.
    pub accuracy: f64,
}

/// Training data already resampled to the model's spatial extents, one
/// grayscale channel per image.
pub struct PreparedSet {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<Label>,
    pub ids: Vec<String>,
}

impl PreparedSet {
    pub fn from_dataset(d: &Dataset, input: [usize; 3]) -> Result<Self> {
        let images = d
            .samples
            .par_iter()
            .map(|s| crate::data::resize_gray(&s.image, input[0], input[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedSet {
            images,
            labels: d.samples.iter().map(|s| s.label).collect(),
            ids: d.samples.iter().map(|s| s.sample_id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Trains `state` in place. See [`fit_with`].
pub fn fit(state: &mut ModelState, train: &Dataset, config: &TrainConfig) -> Result<Vec<EpochRecord>> {
    fit_with(state, train, config, |_, _| {})
}

/// Trains `state` for `config.epochs` epochs and calls `on_epoch` after each.
///
/// Each epoch shuffles the sample order with a generator derived from
/// `(seed, epoch)`. Samples of a batch are processed concurrently, but their
/// gradients are summed in batch order before the mean is taken, so the result
/// is bit-identical for any thread count. Augmentation and dropout draw from a
/// per-sample stream derived from `(seed, epoch, sample position)`.
pub fn fit_with(
    state: &mut ModelState,
    train: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &ModelState),
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    if train.samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let (ng, nn) = train.class_counts();
    if ng == 0 || nn == 0 {
        return Err(Error::Config(format!("training set must contain both classes (got {ng} glaucoma, {nn} normal)")));
    }
    let weights = match config.class_weights {
        Some(w) => w,
        None => compute_class_weights(ng, nn)?,
    };
    let set = PreparedSet::from_dataset(train, state.spec.input)?;
    let channels = state.spec.input[2];
    let mut opt = AdadeltaState::new(state, config.optimizer);
    let base = SeededRng::new(config.seed);
    let workers = rayon::current_num_threads().max(1);
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut base.derive(&[0x5348_5546, epoch as u64]));
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;

        for batch in order.chunks(config.batch_size) {
            let mut total: Option<Gradients> = None;
            for wave in batch.chunks(workers) {
                let snapshot = &*state;
                let results = wave
                    .par_iter()
                    .map(|&idx| {
                        let mut rng = base.derive(&[0x5341_4D50, epoch as u64, idx as u64]);
                        let gray = augment_image(&set.images[idx], &config.augment, &mut rng)?;
                        let x = if channels == 1 { gray } else { gray.replicate_channels(channels)? };
                        let pass = snapshot.forward(&x, true, &mut rng)?;
                        let label = set.labels[idx];
                        let (loss, d_logits) = weighted_cross_entropy(pass.probs(), label, &weights)?;
                        let hit = pass.probs().data()[label.index()] >= 0.5;
                        Ok((snapshot.backward(&pass, &d_logits)?, loss, hit))
                    })
                    .collect::<Result<Vec<_>>>()?;
                for (g, loss, hit) in results {
                    loss_sum += loss as f64;
                    correct += hit as usize;
                    match total.as_mut() {
                        Some(t) => t.accumulate(&g),
                        None => total = Some(g),
                    }
                }
            }
            let mut grads = total.expect("batch is nonempty");
            grads.scale(1.0 / batch.len() as f32);
            opt.step(state, &grads)?;
        }

        let rec = EpochRecord { epoch, loss: loss_sum / set.len() as f64, accuracy: correct as f64 / set.len() as f64 };
        on_epoch(&rec, state);
        trace.push(rec);
    }
    Ok(trace)
}
