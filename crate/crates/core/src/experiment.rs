//! End-to-end workflow shared by the command-line tool and the acceptance
//! suite: resolved run configuration, model construction, training,
//! prediction, evaluation and internal cross-validation.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{make_icv_folds, split_train_test, to_model_input, AugmentConfig, Dataset, Label, SplitPlan};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_folds, full_report, Aggregate, MetricReport, RocCurve};
use crate::model::{
    build_scratch_cnn_scaled, build_vgg_scaled, load_weights, ModelSpec, ModelState, WeightArchive, VGG_TOP_DROPOUT,
};
use crate::optim::{fit_with, AdadeltaConfig, ClassWeights, EpochRecord, TrainConfig};
use crate::synth::{FULL_HEIGHT, FULL_WIDTH};
use crate::tensor::{stable_hash, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Scratch,
    Vgg16,
    Vgg19,
}

impl Mode {
    pub fn is_vgg(self) -> bool {
        !matches!(self, Mode::Scratch)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Scratch => "scratch",
            Mode::Vgg16 => "vgg16",
            Mode::Vgg19 => "vgg19",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(Mode::Scratch),
            "vgg16" => Ok(Mode::Vgg16),
            "vgg19" => Ok(Mode::Vgg19),
            other => Err(Error::Config(format!("unknown mode `{other}` (expected scratch, vgg16 or vgg19)"))),
        }
    }
}

/// Spatial extents of `--reduced` runs.
pub const REDUCED_EXTENTS: [usize; 2] = [124, 192];
/// Filter-count divisor of `--reduced` runs.
pub const REDUCED_WIDTH_DIVISOR: usize = 4;

/// Every knob of a run, fully resolved. Serializes to a flat `key=value`
/// file that parses back to an equal value.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub reduced: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// `None` balances the classes from the training split.
    pub class_weights: Option<ClassWeights>,
    pub augment: f32,
    pub test_fraction: f64,
    pub folds: usize,
    /// VGG blocks `1..=freeze_through` keep their weights.
    pub freeze_through: usize,
    pub seed: u64,
    pub manifest: Option<PathBuf>,
    pub weights_in: Option<PathBuf>,
    pub weights_out: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Per-mode training defaults.
    pub fn defaults(mode: Mode) -> Self {
        let (epochs, lr) = match mode {
            Mode::Scratch => (150, 0.05),
            Mode::Vgg16 | Mode::Vgg19 => (125, 0.001),
        };
        RunConfig {
            mode,
            reduced: false,
            epochs,
            batch_size: 16,
            lr,
            class_weights: None,
            augment: 0.0,
            test_fraction: 0.2,
            folds: 5,
            freeze_through: 3,
            seed: 0,
            manifest: None,
            weights_in: None,
            weights_out: None,
            report_dir: None,
        }
    }

    /// Model input `[H, W, C]`.
    pub fn input_shape(&self) -> [usize; 3] {
        let [h, w] = match (self.mode, self.reduced) {
            (_, true) => REDUCED_EXTENTS,
            (Mode::Scratch, false) => [FULL_HEIGHT, FULL_WIDTH],
            (_, false) => [FULL_HEIGHT / 2, FULL_WIDTH / 2],
        };
        [h, w, if self.mode.is_vgg() { 3 } else { 1 }]
    }

    pub fn width_divisor(&self) -> usize {
        if self.reduced {
            REDUCED_WIDTH_DIVISOR
        } else {
            1
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let input = self.input_shape();
        match self.mode {
            Mode::Scratch => build_scratch_cnn_scaled(input, self.width_divisor()),
            Mode::Vgg16 => build_vgg_scaled(16, input, self.freeze_through, self.width_divisor()),
            Mode::Vgg19 => build_vgg_scaled(19, input, self.freeze_through, self.width_divisor()),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: AdadeltaConfig::with_lr(self.lr),
            class_weights: self.class_weights,
            augment: AugmentConfig::with_factor(self.augment),
            seed: self.stream("fit"),
        }
    }

    /// Independent seed for one consumer of randomness.
    pub fn stream(&self, tag: &str) -> u64 {
        SeededRng::new(self.seed).derive(&[stable_hash(tag)]).seed()
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test fraction must be in (0, 1), got {}", self.test_fraction)));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {}", self.folds)));
        }
        if self.freeze_through > 5 {
            return Err(Error::Config(format!("VGG has 5 blocks, cannot freeze through {}", self.freeze_through)));
        }
        Ok(())
    }

    /// `key=value` lines, one per field, in a fixed order. Unset paths are
    /// omitted.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| out.push_str(&format!("{k}={v}\n"));
        put("mode", self.mode.to_string());
        put("reduced", self.reduced.to_string());
        let [h, w, c] = self.input_shape();
        put("input", format!("{h}x{w}x{c}"));
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr", self.lr.to_string());
        put(
            "class_weights",
            match self.class_weights {
                None => "balanced".into(),
                Some(cw) => format!("{},{}", cw.glaucoma, cw.normal),
            },
        );
        put("augment", self.augment.to_string());
        put("test_fraction", self.test_fraction.to_string());
        put("folds", self.folds.to_string());
        if self.mode.is_vgg() {
            put("dropout", VGG_TOP_DROPOUT.to_string());
            put("freeze_through", self.freeze_through.to_string());
        }
        put("seed", self.seed.to_string());
        for (k, p) in [
            ("manifest", &self.manifest),
            ("weights_in", &self.weights_in),
            ("weights_out", &self.weights_out),
            ("report_dir", &self.report_dir),
        ] {
            if let Some(p) = p {
                put(k, p.display().to_string());
            }
        }
        out
    }

    /// Parses a `key=value` file. Blank lines and `#` comments are skipped.
    /// The `mode` key selects the defaults the remaining keys override.
    pub fn from_kv(text: &str) -> Result<Self> {
        let pairs = parse_kv(text)?;
        let mode = match pairs.iter().find(|(k, _)| k == "mode") {
            Some((_, v)) => v.parse()?,
            None => Mode::Scratch,
        };
        let mut cfg = RunConfig::defaults(mode);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Overrides one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        match key {
            "mode" => {
                let m: Mode = value.parse()?;
                if m != self.mode {
                    return Err(Error::Config(format!("mode `{m}` conflicts with `{}`", self.mode)));
                }
            }
            "reduced" => self.reduced = num(key, value)?,
            "input" => {
                // derived from mode and `reduced`; accepted when consistent
                let [h, w, c] = self.input_shape();
                if value != format!("{h}x{w}x{c}") {
                    return Err(Error::Config(format!(
                        "input `{value}` does not match mode {} (expected {h}x{w}x{c})",
                        self.mode
                    )));
                }
            }
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "class_weights" => {
                self.class_weights = match value {
                    "balanced" => None,
                    v => {
                        let (g, n) = v.split_once(',').ok_or_else(|| {
                            Error::Config(format!("class_weights `{v}`: expected `balanced` or `g,n`"))
                        })?;
                        Some(ClassWeights::new(num(key, g.trim())?, num(key, n.trim())?)?)
                    }
                }
            }
            "augment" => self.augment = num(key, value)?,
            "test_fraction" => self.test_fraction = num(key, value)?,
            "folds" => self.folds = num(key, value)?,
            "dropout" => {
                if num::<f32>(key, value)? != VGG_TOP_DROPOUT {
                    return Err(Error::Config(format!("dropout is fixed at {VGG_TOP_DROPOUT}")));
                }
            }
            "freeze_through" => self.freeze_through = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "manifest" => self.manifest = Some(value.into()),
            "weights_in" => self.weights_in = Some(value.into()),
            "weights_out" => self.weights_out = Some(value.into()),
            "report_dir" => self.report_dir = Some(value.into()),
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }
}

fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Fresh model for `cfg`, optionally starting from `pretrained`. Tensors the
/// archive lacks for the classification head are initialized randomly.
pub fn init_model(cfg: &RunConfig, pretrained: Option<&WeightArchive>) -> Result<ModelState> {
    let spec = cfg.model_spec()?;
    let mut rng = SeededRng::new(cfg.stream("init"));
    match pretrained {
        Some(a) => load_weights(&spec, a, false, &mut rng),
        None => ModelState::init(spec, &mut rng),
    }
}

/// Trains `state` on `train` and returns the per-epoch trace.
pub fn train(
    cfg: &RunConfig,
    state: &mut ModelState,
    train: &Dataset,
    on_epoch: impl FnMut(&EpochRecord, &ModelState),
) -> Result<Vec<EpochRecord>> {
    fit_with(state, train, &cfg.train_config(), on_epoch)
}

/// Glaucoma probability for every sample, in dataset order.
pub fn predict_scores(state: &ModelState, d: &Dataset) -> Result<Vec<f64>> {
    d.samples
        .par_iter()
        .map(|s| {
            let x = to_model_input(&s.image, state.spec.input)?;
            let pass = state.forward(&x, false, &mut SeededRng::new(0))?;
            Ok(pass.glaucoma_score() as f64)
        })
        .collect()
}

pub struct Evaluation {
    pub report: MetricReport,
    /// `None` when the set holds a single class.
    pub roc: Option<RocCurve>,
    pub scores: Vec<f64>,
    pub labels: Vec<Label>,
}

pub fn evaluate(state: &ModelState, d: &Dataset) -> Result<Evaluation> {
    let scores = predict_scores(state, d)?;
    let labels: Vec<Label> = d.samples.iter().map(|s| s.label).collect();
    let (report, roc) = full_report(&labels, &scores)?;
    Ok(Evaluation { report, roc, scores, labels })
}

/// Held-out split plus ICV folds over the training part.
pub fn plan_splits(cfg: &RunConfig, d: &Dataset) -> Result<SplitPlan> {
    let mut plan = split_train_test(d, cfg.test_fraction, &mut SeededRng::new(cfg.stream("split")))?;
    plan.folds = make_icv_folds(&d.subset(&plan.train), cfg.folds, &mut SeededRng::new(cfg.stream("folds")))?;
    Ok(plan)
}

pub struct CrossValidation {
    pub folds: Vec<Evaluation>,
    pub aggregate: Aggregate,
}

/// Trains one model per fold from the same initialization and evaluates it
/// on the fold's validation part.
pub fn cross_validate(
    cfg: &RunConfig,
    d: &Dataset,
    plan: &SplitPlan,
    pretrained: Option<&WeightArchive>,
    mut on_fold: impl FnMut(usize, &Evaluation),
) -> Result<CrossValidation> {
    let mut folds = Vec::with_capacity(plan.folds.len());
    for (i, f) in plan.folds.iter().enumerate() {
        let mut state = init_model(cfg, pretrained)?;
        train(cfg, &mut state, &d.subset(&f.train), |_, _| {})?;
        let ev = evaluate(&state, &d.subset(&f.validation))?;
        on_fold(i, &ev);
        folds.push(ev);
    }
    let reports: Vec<MetricReport> = folds.iter().map(|e| e.report).collect();
    Ok(CrossValidation { aggregate: aggregate_folds(&reports)?, folds })
}

/// `epoch,loss` table.
pub fn trace_csv(trace: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,loss\n");
    for r in trace {
        s.push_str(&format!("{},{}\n", r.epoch, r.loss));
    }
    s
}
