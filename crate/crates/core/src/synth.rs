//! Synthetic circumpapillary B-scan phantoms.
//!
//! Each image is a stack of smooth horizontal bands over a dark vitreous.
//! The topmost and brightest band stands in for the retinal nerve fibre layer
//! (RNFL); its thickness is the only class signal: thin for glaucoma, thick
//! for normal. Rows are rendered with exact per-pixel area coverage, then
//! Gaussian noise is added, values are clipped to `[0, 1]` and quantized to
//! 8 bits so that in-memory samples equal their PNG files.

use std::f32::consts::TAU;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{quantize_u8, write_gray_png, write_manifest, Dataset, Label, ManifestRow, Sample};
use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, SeededRng};

pub const FULL_HEIGHT: usize = 496;
pub const FULL_WIDTH: usize = 768;

const VITREOUS: f32 = 0.04;
const RNFL: f32 = 0.95;
const CHOROID: f32 = 0.12;
/// Layers below the RNFL: (thickness as a fraction of image height, intensity).
const SUB_LAYERS: [(f32, f32); 7] =
    [(0.030, 0.45), (0.025, 0.26), (0.020, 0.50), (0.045, 0.20), (0.010, 0.62), (0.015, 0.78), (0.080, 0.33)];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// RNFL thickness range in pixels, `(min, max)`.
    pub glaucoma_thickness: (f32, f32),
    pub normal_thickness: (f32, f32),
    /// Relative amplitude of the along-scan thickness undulation. The local
    /// thickness is clamped to the class range.
    pub thickness_undulation: f32,
    /// How many of the sub-RNFL layers to draw (at most 7).
    pub layer_count: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: FULL_HEIGHT,
            width: FULL_WIDTH,
            glaucoma_thickness: (4.0, 10.0),
            normal_thickness: (14.0, 24.0),
            thickness_undulation: 0.15,
            layer_count: SUB_LAYERS.len(),
            noise: 0.08,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Default geometry rescaled to `height×width`; thickness ranges scale
    /// with the height.
    pub fn at_resolution(height: usize, width: usize) -> Self {
        let d = SynthConfig::default();
        let k = height as f32 / FULL_HEIGHT as f32;
        let scale = |(a, b): (f32, f32)| (a * k, b * k);
        SynthConfig {
            height,
            width,
            glaucoma_thickness: scale(d.glaucoma_thickness),
            normal_thickness: scale(d.normal_thickness),
            ..d
        }
    }

    /// Phantoms for `--reduced` runs: 124×192 with the default thickness
    /// ranges kept in pixels. Scaling them by the height would shrink the
    /// bands below one cell of the reduced network's final feature grid.
    pub fn reduced() -> Self {
        SynthConfig { height: 124, width: 192, ..SynthConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let (g0, g1) = self.glaucoma_thickness;
        let (n0, n1) = self.normal_thickness;
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!("synthetic extents {}×{} too small", self.height, self.width)));
        }
        if !(g0 > 0.0 && g0 <= g1 && n0 <= n1) {
            return Err(Error::Config("thickness ranges must be positive and ordered (min ≤ max)".into()));
        }
        if g1 >= n0 {
            return Err(Error::Config(format!(
                "glaucoma thickness range {:?} must lie strictly below the normal range {:?}",
                self.glaucoma_thickness, self.normal_thickness
            )));
        }
        if self.layer_count > SUB_LAYERS.len() {
            return Err(Error::Config(format!("at most {} sub-RNFL layers", SUB_LAYERS.len())));
        }
        if !(self.noise >= 0.0 && self.thickness_undulation >= 0.0) {
            return Err(Error::Config("noise and undulation must be ≥ 0".into()));
        }
        Ok(())
    }

    fn thickness_range(&self, label: Label) -> (f32, f32) {
        match label {
            Label::Glaucoma => self.glaucoma_thickness,
            Label::Normal => self.normal_thickness,
        }
    }
}

/// A generated sample with its ground-truth RNFL mask (`H×W×1`, 0 or 1).
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub sample: Sample,
    pub band_mask: ImageTensor,
}

/// Overlap of the row `[y, y+1)` with the interval `[a, b)`.
fn coverage(y: f32, a: f32, b: f32) -> f32 {
    ((y + 1.0).min(b) - y.max(a)).max(0.0)
}

/// Renders one phantom. All randomness comes from `rng`.
pub fn generate_sample(cfg: &SynthConfig, label: Label, rng: &mut SeededRng) -> Result<SynthSample> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let hf = h as f32;
    let (lo, hi) = cfg.thickness_range(label);
    let base_thickness = lo + (hi - lo) * rng.random::<f32>();
    let phase: [f32; 3] = std::array::from_fn(|_| rng.random::<f32>() * TAU);
    let top_level = 0.22 + 0.06 * rng.random::<f32>();

    let mut img = vec![0.0f32; h * w];
    let mut mask = vec![0.0f32; h * w];
    for x in 0..w {
        let u = x as f32 / w as f32;
        let top = hf * (top_level + 0.035 * (TAU * u + phase[0]).sin() + 0.015 * (2.0 * TAU * u + phase[1]).sin());
        let thick =
            (base_thickness * (1.0 + cfg.thickness_undulation * (2.0 * TAU * u + phase[2]).sin())).clamp(lo, hi);
        // band boundaries from top to bottom with their intensities
        let mut bounds = vec![(top, top + thick, RNFL)];
        let mut y = top + thick;
        for &(frac, v) in &SUB_LAYERS[..cfg.layer_count] {
            bounds.push((y, y + frac * hf, v));
            y += frac * hf;
        }
        for row in 0..h {
            let yf = row as f32;
            let mut covered = 0.0;
            let mut v = 0.0;
            for &(a, b, val) in &bounds {
                let c = coverage(yf, a, b);
                covered += c;
                v += c * val;
            }
            let above = coverage(yf, f32::NEG_INFINITY, top);
            let below = (1.0 - covered - above).max(0.0);
            // choroid fades with depth below the last layer
            let depth = ((yf - y) / (0.2 * hf)).clamp(0.0, 1.0);
            v += above * VITREOUS + below * CHOROID * (1.0 - 0.7 * depth);
            img[row * w + x] = v;
            if coverage(yf, top, top + thick) >= 0.5 {
                mask[row * w + x] = 1.0;
            }
        }
    }
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0f32, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut img {
            *v += normal.sample(rng);
        }
    }
    for v in &mut img {
        *v = quantize_u8(*v) as f32 / 255.0;
    }
    Ok(SynthSample {
        sample: Sample {
            image: ImageTensor::new(&[h, w, 1], img)?,
            label,
            patient_id: String::new(),
            sample_id: String::new(),
        },
        band_mask: ImageTensor::new(&[h, w, 1], mask)?,
    })
}

/// Per-column count of mask pixels, averaged over columns.
pub fn mean_band_height(mask: &ImageTensor) -> f32 {
    let (_, w, _) = mask.hwc().expect("mask is H×W×1");
    mask.data().iter().sum::<f32>() / w as f32
}

/// Per-column mask heights.
pub fn column_band_heights(mask: &ImageTensor) -> Vec<usize> {
    let (h, w, _) = mask.hwc().expect("mask is H×W×1");
    (0..w).map(|x| (0..h).filter(|&y| mask.at3(y, x, 0) > 0.5).count()).collect()
}

/// Estimates the RNFL thickness from the image alone: average over columns of
/// the number of pixels at or above `level`.
pub fn bright_height(img: &ImageTensor, level: f32) -> f32 {
    let (_, w, _) = img.hwc().expect("image is H×W×1");
    img.data().iter().filter(|&&v| v >= level).count() as f32 / w as f32
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub dataset: Dataset,
    /// Band masks, aligned with `dataset.samples`.
    pub masks: Vec<ImageTensor>,
}

impl SynthDataset {
    pub fn mask(&self, sample_id: &str) -> Option<&ImageTensor> {
        self.dataset.samples.iter().position(|s| s.sample_id == sample_id).map(|i| &self.masks[i])
    }
}

/// Generates `n_glaucoma` then `n_normal` samples. Sample `i` of a class uses
/// a generator derived from `(seed, class, i)`, and is assigned round-robin to
/// one of `n_patients_per_class` synthetic patients.
pub fn generate_corpus(
    cfg: &SynthConfig,
    n_glaucoma: usize,
    n_normal: usize,
    n_patients_per_class: usize,
) -> Result<SynthDataset> {
    if n_glaucoma == 0 || n_normal == 0 || n_patients_per_class == 0 {
        return Err(Error::Parameter("sample and patient counts must be at least 1".into()));
    }
    cfg.validate()?;
    let base = SeededRng::new(cfg.seed);
    let mut samples = Vec::with_capacity(n_glaucoma + n_normal);
    let mut masks = Vec::with_capacity(n_glaucoma + n_normal);
    for (label, n, prefix) in [(Label::Glaucoma, n_glaucoma, 'g'), (Label::Normal, n_normal, 'n')] {
        for i in 0..n {
            let mut rng = base.derive(&[label.index() as u64, i as u64]);
            let mut s = generate_sample(cfg, label, &mut rng)?;
            s.sample.sample_id = format!("{prefix}{i:04}");
            s.sample.patient_id = format!("{prefix}p{:03}", i % n_patients_per_class);
            samples.push(s.sample);
            masks.push(s.band_mask);
        }
    }
    Ok(SynthDataset { dataset: Dataset::new(samples)?, masks })
}

/// [`generate_corpus`], then writes `images/<id>.png`, `masks/<id>.png` and
/// `manifest.csv` under `dir`.
pub fn generate_dataset(
    cfg: &SynthConfig,
    n_glaucoma: usize,
    n_normal: usize,
    n_patients_per_class: usize,
    dir: &Path,
) -> Result<SynthDataset> {
    let mut corpus = generate_corpus(cfg, n_glaucoma, n_normal, n_patients_per_class)?;
    for sub in ["images", "masks"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut rows = Vec::with_capacity(corpus.dataset.len());
    for (s, m) in corpus.dataset.samples.iter().zip(&corpus.masks) {
        let rel = Path::new("images").join(format!("{}.png", s.sample_id));
        write_gray_png(&dir.join(&rel), &s.image)?;
        write_gray_png(&dir.join("masks").join(format!("{}.png", s.sample_id)), m)?;
        rows.push(ManifestRow {
            sample_id: s.sample_id.clone(),
            path: rel,
            label: s.label,
            patient_id: s.patient_id.clone(),
        });
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    corpus.dataset.manifest = Some(manifest);
    Ok(corpus)
}

/// Location of the mask written by [`generate_dataset`] for a sample.
pub fn mask_path(dataset_dir: &Path, sample_id: &str) -> std::path::PathBuf {
    dataset_dir.join("masks").join(format!("{sample_id}.png"))
}
