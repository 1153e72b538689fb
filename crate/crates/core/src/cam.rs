//! Class activation maps for models with a global-max-pool → dense head.
//!
//! The raw map for class `c` is `Σ_k w[k, c]·f_k(i, j)` over the final conv
//! feature maps `f_k` and the dense kernel column `w[·, c]`. It is upsampled
//! bilinearly to the input resolution and min–max normalized per map.
//! Negative raw values are kept (no rectification).

use std::path::{Path, PathBuf};

use crate::data::{quantize_u8, write_gray_png, Label};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::tensor::{bilinear_resize, ImageTensor, SeededRng};

#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    /// `H×W×1` at input resolution, values in `[0, 1]`.
    pub map: ImageTensor,
    pub class: Label,
    pub sample_id: String,
    /// The raw map was constant, so the normalized map is all zeros.
    pub constant: bool,
}

/// Unnormalized map at feature resolution: `Σ_k weights[k]·features[·,·,k]`.
pub fn raw_cam(features: &ImageTensor, weights: &[f32]) -> Result<ImageTensor> {
    let (h, w, k) = features.hwc()?;
    if weights.len() != k {
        return Err(Error::dim(format!("{} class weights for {k} feature maps", weights.len())));
    }
    let data = features.data().chunks_exact(k).map(|px| px.iter().zip(weights).map(|(f, w)| f * w).sum()).collect();
    ImageTensor::new(&[h, w, 1], data)
}

/// Rescales to `[0, 1]`; a constant map becomes all zeros and reports `true`.
pub fn min_max_normalize(m: &ImageTensor) -> (ImageTensor, bool) {
    let (lo, hi) = m.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi <= lo {
        return (m.map(|_| 0.0), true);
    }
    let span = hi - lo;
    (m.map(|v| ((v - lo) / span).clamp(0.0, 1.0)), false)
}

/// Column `class` of the dense kernel.
pub fn class_weights(state: &ModelState, class: Label) -> Result<Vec<f32>> {
    let p = state.dense_params().ok_or_else(|| Error::UnsupportedArchitecture("model has no dense layer".into()))?;
    let &[n_in, n_out] = p.kernel.shape() else { unreachable!("dense kernel is rank 2") };
    if class.index() >= n_out {
        return Err(Error::dim(format!("class index {} out of range", class.index())));
    }
    Ok((0..n_in).map(|k| p.kernel.data()[k * n_out + class.index()]).collect())
}

pub fn compute_cam(state: &ModelState, x: &ImageTensor, target: Label) -> Result<CamMap> {
    if !state.spec.has_cam_head() {
        return Err(Error::UnsupportedArchitecture(
            "class activation maps need a global-max-pool → (dropout) → dense head".into(),
        ));
    }
    // evaluation mode never draws from the generator
    let pass = state.forward(x, false, &mut SeededRng::new(0))?;
    let features = pass.final_features(&state.spec).expect("checked by has_cam_head");
    let raw = raw_cam(features, &class_weights(state, target)?)?;
    let [h, w, _] = state.spec.input;
    let up = bilinear_resize(&raw, h, w)?;
    let (map, constant) = min_max_normalize(&up);
    Ok(CamMap { map, class: target, sample_id: String::new(), constant })
}

/// Mean map value inside `mask > 0.5` divided by the mean outside it.
pub fn inside_outside_ratio(map: &ImageTensor, mask: &ImageTensor) -> Result<f64> {
    if map.shape() != mask.shape() {
        return Err(Error::dim(format!("map {:?} vs mask {:?}", map.shape(), mask.shape())));
    }
    let (mut si, mut ni, mut so, mut no) = (0.0f64, 0usize, 0.0f64, 0usize);
    for (&v, &m) in map.data().iter().zip(mask.data()) {
        if m > 0.5 {
            si += v as f64;
            ni += 1;
        } else {
            so += v as f64;
            no += 1;
        }
    }
    if ni == 0 || no == 0 {
        return Err(Error::Parameter("mask must have pixels both inside and outside".into()));
    }
    let (inside, outside) = (si / ni as f64, so / no as f64);
    Ok(if outside > 0.0 {
        inside / outside
    } else if inside > 0.0 {
        f64::INFINITY
    } else {
        1.0
    })
}

/// "Hot" colour ramp: black → red → yellow → white. Every channel is
/// nondecreasing in `t`.
pub fn hot_ramp(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    [(3.0 * t).min(1.0), (3.0 * t - 1.0).clamp(0.0, 1.0), (3.0 * t - 2.0).clamp(0.0, 1.0)]
}

/// Maximum opacity of the colour layer in overlays.
pub const OVERLAY_OPACITY: f32 = 0.5;

/// RGB overlay: `base·(1−α) + hot_ramp(m)·α` with `α = 0.5·m`, so a zero
/// map reproduces the grayscale base exactly.
pub fn overlay(cam: &ImageTensor, base: &ImageTensor) -> Result<Vec<u8>> {
    if cam.shape() != base.shape() || cam.hwc()?.2 != 1 {
        return Err(Error::dim(format!(
            "overlay needs equal H×W×1 maps, got {:?} and {:?}",
            cam.shape(),
            base.shape()
        )));
    }
    let mut rgb = Vec::with_capacity(cam.len() * 3);
    for (&m, &b) in cam.data().iter().zip(base.data()) {
        let a = OVERLAY_OPACITY * m.clamp(0.0, 1.0);
        for c in hot_ramp(m) {
            rgb.push(quantize_u8(b * (1.0 - a) + c * a));
        }
    }
    Ok(rgb)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapFiles {
    pub raw: PathBuf,
    pub overlay: PathBuf,
}

/// Writes `<sample>_<class>_cam.png` (8-bit grayscale map) and
/// `<sample>_<class>_overlay.png` (24-bit RGB) into `dir`. `base` is the
/// grayscale image at the map's resolution.
pub fn export_heatmap(cam: &CamMap, base: &ImageTensor, dir: &Path) -> Result<HeatmapFiles> {
    let (h, w, _) = cam.map.hwc()?;
    let stem = if cam.sample_id.is_empty() { "sample".to_string() } else { cam.sample_id.clone() };
    let raw = dir.join(format!("{stem}_{}_cam.png", cam.class));
    let ov = dir.join(format!("{stem}_{}_overlay.png", cam.class));
    let rgb = overlay(&cam.map, base)?;
    write_gray_png(&raw, &cam.map)?;
    image::RgbImage::from_raw(w as u32, h as u32, rgb)
        .expect("buffer sized from shape")
        .save(&ov)
        .map_err(|source| Error::Image { path: ov.clone(), source })?;
    Ok(HeatmapFiles { raw, overlay: ov })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::read_gray_image;
    use crate::layers::LayerParams;
    use crate::model::build_scratch_cnn_scaled;
    use crate::tensor::random_init;

    #[test]
    fn single_peak_lands_at_upsampled_location() {
        let mut f = ImageTensor::zeros(&[4, 6, 1]).unwrap();
        f.data_mut()[2 * 6 + 3] = 5.0;
        let raw = raw_cam(&f, &[1.0]).unwrap();
        let up = bilinear_resize(&raw, 31, 51).unwrap();
        let (m, constant) = min_max_normalize(&up);
        assert!(!constant);
        let argmax = m.data().iter().enumerate().fold(0, |b, (i, &v)| if v > m.data()[b] { i } else { b });
        // corner-aligned: feature row 2 of 4 ↦ 2·30/3 = 20, col 3 of 6 ↦ 3·50/5 = 30
        assert_eq!((argmax / 51, argmax % 51), (20, 30));
        assert_eq!(m.data()[argmax], 1.0);
    }

    #[test]
    fn constant_map_flagged() {
        let f = ImageTensor::full(&[3, 3, 4], 2.0).unwrap();
        let raw = raw_cam(&f, &[0.5; 4]).unwrap();
        let (m, constant) = min_max_normalize(&raw);
        assert!(constant);
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn raw_map_is_linear_in_weights() {
        let mut rng = SeededRng::new(6);
        let f = random_init(&[5, 7, 8], &mut rng, 1, 1).unwrap();
        // dyadic weights keep every product and sum exact
        let a: Vec<f32> = (0..8).map(|i| (i as f32 - 3.0) * 0.25).collect();
        let b: Vec<f32> = (0..8).map(|i| (i % 3) as f32 * 0.5).collect();
        let sum: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let f = f.map(|v| (v * 64.0).round() / 64.0);
        let ra = raw_cam(&f, &a).unwrap();
        let rb = raw_cam(&f, &b).unwrap();
        let rs = raw_cam(&f, &sum).unwrap();
        for ((x, y), s) in ra.data().iter().zip(rb.data()).zip(rs.data()) {
            assert_eq!(x + y, *s);
        }
    }

    #[test]
    fn cam_extents_and_head_requirement() {
        let spec = build_scratch_cnn_scaled([40, 56, 1], 8).unwrap();
        let st = ModelState::init(spec.clone(), &mut SeededRng::new(2)).unwrap();
        let x = random_init(&[40, 56, 1], &mut SeededRng::new(3), 1, 1).unwrap().map(f32::abs);
        let cam = compute_cam(&st, &x, Label::Glaucoma).unwrap();
        assert_eq!(cam.map.shape(), &[40, 56, 1]);

        let mut headless = st.clone();
        let g = headless.spec.gmp_index().unwrap();
        headless.spec.layers.remove(g);
        headless.params.remove(g);
        assert!(matches!(compute_cam(&headless, &x, Label::Normal), Err(Error::UnsupportedArchitecture(_))));
    }

    #[test]
    fn argmax_invariant_to_positive_weight_scaling() {
        let spec = build_scratch_cnn_scaled([32, 32, 1], 8).unwrap();
        let st = ModelState::init(spec, &mut SeededRng::new(9)).unwrap();
        let x = random_init(&[32, 32, 1], &mut SeededRng::new(1), 1, 1).unwrap().map(f32::abs);
        let a = compute_cam(&st, &x, Label::Normal).unwrap();
        let mut scaled = st.clone();
        let d = scaled.params.len() - 1;
        let p: &mut LayerParams = scaled.params[d].as_mut().unwrap();
        for (i, v) in p.kernel.data_mut().iter_mut().enumerate() {
            if i % 2 == 1 {
                *v *= 3.5;
            }
        }
        let b = compute_cam(&scaled, &x, Label::Normal).unwrap();
        let argmax =
            |m: &ImageTensor| m.data().iter().enumerate().fold(0, |b, (i, &v)| if v > m.data()[b] { i } else { b });
        assert_eq!(argmax(&a.map), argmax(&b.map));
    }

    #[test]
    fn zero_map_overlay_is_grayscale_base() {
        let base = ImageTensor::from_fn_hwc(4, 5, 1, |y, x, _| (y * 5 + x) as f32 / 19.0).unwrap();
        let zero = ImageTensor::zeros(&[4, 5, 1]).unwrap();
        let rgb = overlay(&zero, &base).unwrap();
        for (px, &b) in rgb.chunks(3).zip(base.data()) {
            let g = quantize_u8(b);
            assert_eq!(px, [g, g, g]);
        }
    }

    #[test]
    fn ramp_is_monotone() {
        let mut prev = hot_ramp(0.0);
        for i in 1..=100 {
            let c = hot_ramp(i as f32 / 100.0);
            assert!((0..3).all(|k| c[k] >= prev[k]));
            prev = c;
        }
        assert_eq!(hot_ramp(1.0), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn exported_map_rereads_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let map = ImageTensor::from_fn_hwc(6, 9, 1, |y, x, _| ((y * 9 + x) as f32 / 53.0).min(1.0)).unwrap();
        let cam = CamMap { map: map.clone(), class: Label::Glaucoma, sample_id: "s1".into(), constant: false };
        let files = export_heatmap(&cam, &ImageTensor::full(&[6, 9, 1], 0.5).unwrap(), dir.path()).unwrap();
        let back = read_gray_image(&files.raw).unwrap();
        assert!(back.max_abs_diff(&map) <= 1.0 / 255.0);
        let ov = image::open(&files.overlay).unwrap();
        assert_eq!((ov.width(), ov.height()), (9, 6));
        assert_eq!(ov.color(), image::ColorType::Rgb8);
    }
}
