//! Samples, manifest ingestion, preprocessing, augmentation and
//! patient-grouped partitioning.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, IngestError, Result};
use crate::tensor::{bilinear_resize, ImageTensor, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Glaucoma,
    Normal,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Glaucoma, Label::Normal];

    /// Position in the model's output vector.
    pub fn index(self) -> usize {
        match self {
            Label::Glaucoma => 0,
            Label::Normal => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Glaucoma => "glaucoma",
            Label::Normal => "normal",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "glaucoma" => Ok(Label::Glaucoma),
            "normal" => Ok(Label::Normal),
            other => Err(IngestError::UnknownLabel(other.to_string())),
        }
    }
}

/// A grayscale B-scan (`H×W×1`, intensities in `[0, 1]`) with its label and
/// patient identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: ImageTensor,
    pub label: Label,
    pub patient_id: String,
    pub sample_id: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub manifest: Option<PathBuf>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.sample_id.as_str()) {
                return Err(Error::Config(format!("duplicate sample_id `{}`", s.sample_id)));
            }
        }
        Ok(Dataset { samples, manifest: None })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(glaucoma, normal)` sample counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let g = self.samples.iter().filter(|s| s.label == Label::Glaucoma).count();
        (g, self.samples.len() - g)
    }

    pub fn get(&self, sample_id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }

    /// Samples whose id is in `ids`, in dataset order.
    pub fn subset(&self, ids: &[String]) -> Dataset {
        let keep: HashSet<&str> = ids.iter().map(String::as_str).collect();
        Dataset {
            samples: self.samples.iter().filter(|s| keep.contains(s.sample_id.as_str())).cloned().collect(),
            manifest: self.manifest.clone(),
        }
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.sample_id.clone()).collect()
    }
}

pub const MANIFEST_HEADER: [&str; 4] = ["sample_id", "path", "label", "patient_id"];

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub sample_id: String,
    pub path: PathBuf,
    pub label: Label,
    pub patient_id: String,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(MANIFEST_HEADER).map_err(io)?;
    for r in rows {
        let p = r.path.to_string_lossy();
        w.write_record([r.sample_id.as_str(), &p, r.label.as_str(), r.patient_id.as_str()]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads and validates a manifest without decoding images. Image paths are
/// resolved relative to the manifest's directory. Row numbers in errors are
/// file line numbers (the header is line 1).
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| Error::Ingest { row: 1, kind: IngestError::Malformed(e.to_string()) })?;
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Ingest {
            row: 1,
            kind: IngestError::Malformed(format!("header must be `{}`", MANIFEST_HEADER.join(","))),
        });
    }
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let err = |kind| Error::Ingest { row, kind };
        let rec = rec.map_err(|e| err(IngestError::Malformed(e.to_string())))?;
        if rec.len() != 4 {
            return Err(err(IngestError::Malformed(format!("expected 4 fields, got {}", rec.len()))));
        }
        for (field, name) in rec.iter().zip(MANIFEST_HEADER) {
            if field.is_empty() {
                return Err(err(IngestError::EmptyField(name)));
            }
        }
        let label: Label = rec[2].parse().map_err(err)?;
        if !seen.insert(rec[0].to_string()) {
            return Err(err(IngestError::DuplicateId(rec[0].to_string())));
        }
        rows.push(ManifestRow {
            sample_id: rec[0].to_string(),
            path: base.join(&rec[1]),
            label,
            patient_id: rec[3].to_string(),
        });
    }
    Ok(rows)
}

/// Decodes an 8-bit grayscale image (PGM or PNG) into `H×W×1` with values
/// `v/255`. Colour images are converted to luma first.
pub fn read_gray_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    ImageTensor::new(&[h as usize, w as usize, 1], luma.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
}

/// Quantizes `H×W×1` values in `[0, 1]` to 8 bits and writes a PNG.
pub fn write_gray_png(path: &Path, img: &ImageTensor) -> Result<()> {
    let (h, w, c) = img.hwc()?;
    if c != 1 {
        return Err(Error::dim(format!("grayscale export needs 1 channel, got {c}")));
    }
    let buf: Vec<u8> = img.data().iter().map(|&v| quantize_u8(v)).collect();
    image::GrayImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer sized from shape")
        .save(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Loads every manifest row in order.
pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let rows = read_manifest(manifest)?;
    let mut samples = Vec::with_capacity(rows.len());
    for (i, r) in rows.into_iter().enumerate() {
        let row = i + 2;
        if !r.path.is_file() {
            return Err(Error::Ingest { row, kind: IngestError::MissingFile(r.path) });
        }
        let image =
            read_gray_image(&r.path).map_err(|e| Error::Ingest { row, kind: IngestError::Decode(e.to_string()) })?;
        samples.push(Sample { image, label: r.label, patient_id: r.patient_id, sample_id: r.sample_id });
    }
    Ok(Dataset { samples, manifest: Some(manifest.to_path_buf()) })
}

/// Bilinear resize of a grayscale image; a no-op when already `h×w`.
pub fn resize_gray(img: &ImageTensor, h: usize, w: usize) -> Result<ImageTensor> {
    bilinear_resize(img, h, w)
}

/// Converts a grayscale image into a model input of shape `input`: resize to
/// the model's spatial extents, then replicate to the model's channel count.
pub fn to_model_input(img: &ImageTensor, input: [usize; 3]) -> Result<ImageTensor> {
    let g = resize_gray(img, input[0], input[1])?;
    match input[2] {
        1 => Ok(g),
        c => g.replicate_channels(c),
    }
}

/// Fine-tuning input: half-size bilinear downsampling (`⌈H/2⌉×⌈W/2⌉`)
/// followed by replication into three identical channels.
pub fn preprocess_for_finetune(s: &Sample) -> Result<ImageTensor> {
    let (h, w, _) = s.image.hwc()?;
    to_model_input(&s.image, [h.div_ceil(2), w.div_ceil(2), 3])
}

/// Random geometric and elastic perturbation magnitudes, all scaled by `factor`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub factor: f32,
    pub shift: bool,
    pub rotation: bool,
    pub zoom: bool,
    pub elastic: bool,
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self::with_factor(0.0)
    }

    pub fn with_factor(factor: f32) -> Self {
        AugmentConfig { factor, shift: true, rotation: true, zoom: true, elastic: true }
    }

    pub fn is_identity(&self) -> bool {
        self.factor == 0.0 || !(self.shift || self.rotation || self.zoom || self.elastic)
    }
}

/// Maximum rotation at factor 1, in degrees.
pub const MAX_ROTATION_DEG: f32 = 15.0;
/// Elastic displacement amplitude at factor 1, in pixels.
pub const ELASTIC_AMPLITUDE_PX: f32 = 10.0;
/// Standard deviation of the Gaussian that smooths the elastic field.
pub const ELASTIC_SIGMA_PX: f32 = 8.0;

pub fn augment(s: &Sample, cfg: &AugmentConfig, rng: &mut SeededRng) -> Result<Sample> {
    Ok(Sample { image: augment_image(&s.image, cfg, rng)?, ..s.clone() })
}

/// Applies one random transform drawn from `rng`:
///
/// * shift up to `factor·extent` on each axis,
/// * rotation up to `±factor·15°` about the image centre,
/// * zoom by a scale in `[1−factor, 1+factor]`,
/// * an elastic field: i.i.d. uniform noise per pixel and axis, smoothed with
///   a Gaussian of σ = 8 px, rescaled to a peak of `factor·10` px.
///
/// Output pixels are sampled bilinearly from the inverse-mapped source
/// position; positions outside the image read 0. With `factor == 0` the input
/// is returned unchanged.
pub fn augment_image(img: &ImageTensor, cfg: &AugmentConfig, rng: &mut SeededRng) -> Result<ImageTensor> {
    if cfg.factor < 0.0 {
        return Err(Error::Parameter(format!("augmentation factor must be ≥ 0, got {}", cfg.factor)));
    }
    if cfg.is_identity() {
        return Ok(img.clone());
    }
    let (h, w, c) = img.hwc()?;
    let f = cfg.factor;
    let mut sym = |on: bool, bound: f32| if on { (rng.random::<f32>() * 2.0 - 1.0) * bound } else { 0.0 };
    let dy = sym(cfg.shift, f * h as f32);
    let dx = sym(cfg.shift, f * w as f32);
    let theta = sym(cfg.rotation, f * MAX_ROTATION_DEG).to_radians();
    let zoom = 1.0 + sym(cfg.zoom, f).min(0.95);
    let field = if cfg.elastic { Some(elastic_field(h, w, f * ELASTIC_AMPLITUDE_PX, rng)) } else { None };

    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let (sin, cos) = theta.sin_cos();
    let src = img.data();
    let mut out = vec![0.0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let (mut py, mut px) = (y as f32, x as f32);
            if let Some((fy, fx)) = &field {
                py += fy[y * w + x];
                px += fx[y * w + x];
            }
            // inverse of: translate(shift) ∘ rotate(θ) ∘ scale(zoom) about the centre
            let (ry, rx) = (py - cy - dy, px - cx - dx);
            let sy = (cos * ry - sin * rx) / zoom + cy;
            let sx = (sin * ry + cos * rx) / zoom + cx;
            for ch in 0..c {
                out[(y * w + x) * c + ch] = sample_zero_fill(src, h, w, c, ch, sy, sx);
            }
        }
    }
    ImageTensor::new(&[h, w, c], out)
}

fn sample_zero_fill(src: &[f32], h: usize, w: usize, c: usize, ch: usize, y: f32, x: f32) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f32, xx: f32| -> f32 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f32 || xx >= w as f32 {
            0.0
        } else {
            src[(yy as usize * w + xx as usize) * c + ch]
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx;
    let bot = at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx;
    top * (1.0 - fy) + bot * fy
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f32 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur of an `h×w` plane with zero padding.
fn blur(plane: &[f32], h: usize, w: usize, kernel: &[f32]) -> Vec<f32> {
    let r = (kernel.len() / 2) as i64;
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut dst = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &k) in kernel.iter().enumerate() {
                    let off = t as i64 - r;
                    let (yy, xx) = if horizontal { (y as i64, x as i64 + off) } else { (y as i64 + off, x as i64) };
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        acc += k * src[yy as usize * w + xx as usize];
                    }
                }
                dst[y * w + x] = acc;
            }
        }
        dst
    };
    pass(&pass(plane, true), false)
}

fn elastic_field(h: usize, w: usize, amplitude: f32, rng: &mut SeededRng) -> (Vec<f32>, Vec<f32>) {
    let kernel = gaussian_kernel(ELASTIC_SIGMA_PX);
    let mut component = || {
        let noise: Vec<f32> = (0..h * w).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
        let smooth = blur(&noise, h, w, &kernel);
        let peak = smooth.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let k = if peak > 0.0 { amplitude / peak } else { 0.0 };
        smooth.into_iter().map(|v| v * k).collect::<Vec<f32>>()
    };
    let fy = component();
    let fx = component();
    (fy, fx)
}

/// Held-out test ids and the training ids they leave, plus ICV folds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitPlan {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub folds: Vec<Fold>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fold {
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

#[derive(Clone, Debug)]
struct Patient {
    id: String,
    samples: Vec<usize>,
    /// (glaucoma, normal)
    counts: [usize; 2],
}

impl Patient {
    fn size(&self) -> usize {
        self.samples.len()
    }

    /// Majority label; ties go to glaucoma.
    fn class(&self) -> Label {
        if self.counts[0] >= self.counts[1] {
            Label::Glaucoma
        } else {
            Label::Normal
        }
    }
}

fn group_patients(samples: &[Sample]) -> Vec<Patient> {
    let mut order = Vec::new();
    let mut by_id: HashMap<&str, usize> = HashMap::new();
    for (i, s) in samples.iter().enumerate() {
        let slot = *by_id.entry(&s.patient_id).or_insert_with(|| {
            order.push(Patient { id: s.patient_id.clone(), samples: Vec::new(), counts: [0, 0] });
            order.len() - 1
        });
        order[slot].samples.push(i);
        order[slot].counts[s.label.index()] += 1;
    }
    order
}

/// Shuffle with `rng`, then stable-sort largest patients first so that small
/// patients are left to fine-tune the packing.
fn packing_order(mut patients: Vec<Patient>, rng: &mut SeededRng) -> Vec<Patient> {
    patients.shuffle(rng);
    patients.sort_by_key(|p| std::cmp::Reverse(p.size()));
    patients
}

/// Patient-grouped, class-stratified train/test split.
///
/// Per-class test targets are `round(n_c·test_fraction)` samples. Patients are
/// visited in packing order and moved to the test side whenever doing so
/// reduces the total absolute distance to the targets.
pub fn split_train_test(d: &Dataset, test_fraction: f64, rng: &mut SeededRng) -> Result<SplitPlan> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Parameter(format!("test fraction must lie in (0, 1), got {test_fraction}")));
    }
    let patients = group_patients(&d.samples);
    for label in Label::ALL {
        let owners = patients.iter().filter(|p| p.counts[label.index()] > 0).count();
        if owners < 2 {
            return Err(Error::Partition(format!(
                "class `{label}` is held by {owners} patient(s); at least 2 are needed to keep both sides patient-disjoint"
            )));
        }
    }
    let (ng, nn) = d.class_counts();
    let target = [ng, nn].map(|n| ((n as f64 * test_fraction).round() as i64).clamp(1, n as i64 - 1));
    let mut got = [0i64; 2];
    let mut test_patients = HashSet::new();
    for p in packing_order(patients, rng) {
        let before: i64 = (0..2).map(|c| (target[c] - got[c]).abs()).sum();
        let after: i64 = (0..2).map(|c| (target[c] - got[c] - p.counts[c] as i64).abs()).sum();
        if after < before {
            got[0] += p.counts[0] as i64;
            got[1] += p.counts[1] as i64;
            test_patients.insert(p.id);
        }
    }
    let (test, train): (Vec<&Sample>, Vec<&Sample>) =
        d.samples.iter().partition(|s| test_patients.contains(&s.patient_id));
    for (side, part) in [("test", &test), ("train", &train)] {
        for label in Label::ALL {
            if !part.iter().any(|s| s.label == label) {
                return Err(Error::Partition(format!(
                    "patient grouping leaves no `{label}` samples on the {side} side"
                )));
            }
        }
    }
    Ok(SplitPlan {
        train: train.iter().map(|s| s.sample_id.clone()).collect(),
        test: test.iter().map(|s| s.sample_id.clone()).collect(),
        folds: Vec::new(),
    })
}

/// Patient-grouped, class-stratified k-fold partition of `train`.
///
/// Patients are bucketed by majority class. Within each class, in packing
/// order, a patient joins the fold with the fewest samples of that class,
/// then the fewest samples overall, then the lowest index.
pub fn make_icv_folds(train: &Dataset, k: usize, rng: &mut SeededRng) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Parameter(format!("need at least 2 folds, got {k}")));
    }
    let patients = group_patients(&train.samples);
    let mut fold_members: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut class_count = vec![[0usize; 2]; k];
    let mut total = vec![0usize; k];
    for label in Label::ALL {
        let group: Vec<Patient> = patients.iter().filter(|p| p.class() == label).cloned().collect();
        if group.len() < k {
            return Err(Error::Partition(format!(
                "{k} folds need at least {k} `{label}` patients, found {}",
                group.len()
            )));
        }
        for p in packing_order(group, rng) {
            let f = (0..k).min_by_key(|&f| (class_count[f][label.index()], total[f], f)).expect("k ≥ 2");
            class_count[f][0] += p.counts[0];
            class_count[f][1] += p.counts[1];
            total[f] += p.size();
            fold_members[f].extend(&p.samples);
        }
    }
    let folds = fold_members
        .into_iter()
        .map(|mut members| {
            members.sort_unstable();
            let in_val: HashSet<usize> = members.iter().copied().collect();
            Fold {
                validation: members.iter().map(|&i| train.samples[i].sample_id.clone()).collect(),
                train: (0..train.len())
                    .filter(|i| !in_val.contains(i))
                    .map(|i| train.samples[i].sample_id.clone())
                    .collect(),
            }
        })
        .collect();
    Ok(folds)
}

impl SplitPlan {
    /// Checks every partition law against `d`: train/test disjoint and
    /// covering, folds partitioning the training ids, and no patient on both
    /// sides of any cut. Returns a description of the first violation.
    pub fn check(&self, d: &Dataset) -> std::result::Result<(), String> {
        let patient: HashMap<&str, &str> =
            d.samples.iter().map(|s| (s.sample_id.as_str(), s.patient_id.as_str())).collect();
        let disjoint_patients = |a: &[String], b: &[String], what: &str| -> std::result::Result<(), String> {
            let pa: HashSet<&str> = a.iter().map(|id| patient[id.as_str()]).collect();
            match b.iter().map(|id| patient[id.as_str()]).find(|p| pa.contains(p)) {
                Some(p) => Err(format!("patient `{p}` spans {what}")),
                None => Ok(()),
            }
        };
        let train: HashSet<&str> = self.train.iter().map(String::as_str).collect();
        let test: HashSet<&str> = self.test.iter().map(String::as_str).collect();
        if train.len() != self.train.len() || test.len() != self.test.len() {
            return Err("duplicate id within a side".into());
        }
        if !train.is_disjoint(&test) {
            return Err("train and test share a sample".into());
        }
        if train.len() + test.len() != d.len()
            || d.samples.iter().any(|s| !train.contains(s.sample_id.as_str()) && !test.contains(s.sample_id.as_str()))
        {
            return Err("train ∪ test does not cover the dataset".into());
        }
        disjoint_patients(&self.train, &self.test, "train and test")?;
        let mut seen: HashSet<&str> = HashSet::new();
        for (i, f) in self.folds.iter().enumerate() {
            for id in &f.validation {
                if !seen.insert(id) {
                    return Err(format!("sample `{id}` appears in two validation folds"));
                }
                if !train.contains(id.as_str()) {
                    return Err(format!("validation id `{id}` not in the training split"));
                }
            }
            let fold_ids: HashSet<&str> = f.train.iter().chain(&f.validation).map(String::as_str).collect();
            if fold_ids != train || f.train.len() + f.validation.len() != train.len() {
                return Err(format!("fold {i} does not partition the training split"));
            }
            disjoint_patients(&f.train, &f.validation, &format!("fold {i} train and validation"))?;
        }
        if !self.folds.is_empty() && seen.len() != train.len() {
            return Err("validation folds do not cover the training split".into());
        }
        Ok(())
    }
}
