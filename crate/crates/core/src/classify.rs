//! Species classification: a fixed appearance descriptor per fish crop and a
//! multinomial logistic model producing posteriors over species.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{mask_bbox, mask_orthogonal_extent, mask_principal_length, GeomError, Mask};
use crate::raster::{nearest_source, rgb_to_hsv, Raster};
use crate::seed::rng;
use crate::types::{Detection, ObjectClass};

pub const HUE_BINS: usize = 16;
pub const DESCRIPTOR_DIM: usize = HUE_BINS + 5;
/// Side of the square the crop is resampled to before color statistics.
pub const CROP_SIDE: u32 = 152;
pub const MODEL_FORMAT: &str = "fishnet-softmax";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("mask is empty")]
    EmptyMask,
    #[error("crop is {crop:?} but mask is {mask:?}")]
    CropMismatch { crop: (u32, u32), mask: (u32, u32) },
    #[error("descriptor has {got} dims, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no training examples")]
    NoData,
    #[error("{descriptors} descriptors but {labels} labels")]
    LengthMismatch { descriptors: usize, labels: usize },
    #[error("label {label} outside {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid training params: {0}")]
    Params(String),
    #[error("detection is not a fish")]
    NotFish,
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("{path}: {message}")]
    Model { path: String, message: String },
}

/// Which pixels feed the color statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    /// Only pixels under the mask; the rest of the box is blacked out.
    #[default]
    MaskZeroed,
    /// Every pixel of the bounding box.
    #[serde(rename = "bbox")]
    BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppearanceDescriptor {
    pub hue_hist: [f64; HUE_BINS],
    pub saturation_mean: f64,
    pub value_mean: f64,
    /// Longer over shorter bbox side.
    pub aspect_ratio: f64,
    pub fill_ratio: f64,
    /// Principal length over orthogonal extent.
    pub elongation: f64,
}

impl AppearanceDescriptor {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.hue_hist.to_vec();
        v.extend([self.saturation_mean, self.value_mean, self.aspect_ratio, self.fill_ratio, self.elongation]);
        v
    }
}

#[derive(Default)]
struct ColorStats {
    hist: [f64; HUE_BINS],
    sat: f64,
    val: f64,
    n: usize,
}

impl ColorStats {
    fn add(&mut self, c: [u8; 3]) {
        let (h, s, v) = rgb_to_hsv(c);
        self.hist[((h / (360.0 / HUE_BINS as f64)) as usize).min(HUE_BINS - 1)] += 1.0;
        self.sat += s;
        self.val += v;
        self.n += 1;
    }
}

fn geometry(mask: &Mask) -> Result<(f64, f64, f64), ClassifyError> {
    let bbox = mask_bbox(mask).map_err(|_| ClassifyError::EmptyMask)?;
    let (w, h) = (f64::from(bbox.width()), f64::from(bbox.height()));
    let aspect = w.max(h) / w.min(h);
    let fill = mask.area() as f64 / (w * h);
    let elongation = mask_principal_length(mask)? / mask_orthogonal_extent(mask)?;
    Ok((aspect, fill, elongation))
}

fn finish(stats: ColorStats, (aspect_ratio, fill_ratio, elongation): (f64, f64, f64)) -> AppearanceDescriptor {
    let n = stats.n.max(1) as f64;
    AppearanceDescriptor {
        hue_hist: stats.hist.map(|c| c / n),
        saturation_mean: stats.sat / n,
        value_mean: stats.val / n,
        aspect_ratio,
        fill_ratio,
        elongation,
    }
}

/// Descriptor of a crop at its own resolution; color statistics cover the
/// pixels under `mask`.
pub fn appearance_descriptor(crop: &Raster, mask: &Mask) -> Result<AppearanceDescriptor, ClassifyError> {
    if (crop.width(), crop.height()) != (mask.width(), mask.height()) {
        return Err(ClassifyError::CropMismatch { crop: (crop.width(), crop.height()), mask: (mask.width(), mask.height()) });
    }
    if mask.is_empty() {
        return Err(ClassifyError::EmptyMask);
    }
    let mut stats = ColorStats::default();
    for (y, x0, x1) in mask.row_spans() {
        for x in x0..x1 {
            stats.add(crop.pixel(x, y));
        }
    }
    Ok(finish(stats, geometry(mask)?))
}

/// Descriptor of a fish detection: shape terms from the native-resolution
/// mask, color terms from the box crop resampled to `CROP_SIDE` square.
pub fn detection_descriptor(image: &Raster, det: &Detection, mode: CropMode) -> Result<AppearanceDescriptor, ClassifyError> {
    if det.class != ObjectClass::Fish {
        return Err(ClassifyError::NotFish);
    }
    let local = det.mask.crop(&det.bbox)?;
    if local.is_empty() {
        return Err(ClassifyError::EmptyMask);
    }
    let crop = image.crop(&det.bbox)?;
    let (w, h) = (crop.width(), crop.height());
    let mut stats = ColorStats::default();
    for y in 0..CROP_SIDE {
        let sy = nearest_source(y, CROP_SIDE, h);
        for x in 0..CROP_SIDE {
            let sx = nearest_source(x, CROP_SIDE, w);
            if mode == CropMode::BBox || local.contains(sx, sy) {
                stats.add(crop.pixel(sx, sy));
            }
        }
    }
    if stats.n == 0 {
        return Err(ClassifyError::EmptyMask);
    }
    Ok(finish(stats, geometry(&local)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesPosterior {
    pub probs: Vec<f64>,
}

impl SpeciesPosterior {
    pub fn argmax(&self) -> usize {
        (0..self.probs.len()).fold(0, |best, j| if self.probs[j] > self.probs[best] { j } else { best })
    }
}

/// Whether `truth` ranks among the `k` most probable classes, equal
/// probabilities ranking the lower class index first.
pub fn topk_hit(posterior: &SpeciesPosterior, truth: usize, k: usize) -> bool {
    let Some(&pt) = posterior.probs.get(truth) else { return false };
    let rank = posterior.probs.iter().enumerate().filter(|&(j, &p)| p > pt || (p == pt && j < truth)).count();
    rank < k
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub learning_rate: f64,
    pub l2: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self { learning_rate: 0.1, l2: 1e-3, epochs: 1500, seed: 0 }
    }
}

/// Logit weights: `weights[class][feature]` and one bias per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearParams {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self { weights: vec![vec![0.0; dim]; classes], bias: vec![0.0; classes] }
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights.iter().zip(&self.bias).map(|(w, b)| b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()).collect()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Mean cross-entropy plus `l2 / 2 · ‖W‖²`, and its gradient.
pub fn loss_and_gradient(p: &LinearParams, x: &[Vec<f64>], y: &[usize], l2: f64) -> (f64, LinearParams) {
    let n = x.len() as f64;
    let mut grad = LinearParams::zeros(p.bias.len(), p.weights.first().map_or(0, Vec::len));
    let mut loss = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        let mut probs = softmax(&p.logits(xi));
        loss -= probs[yi].max(f64::MIN_POSITIVE).ln();
        probs[yi] -= 1.0;
        for (c, d) in probs.iter().enumerate() {
            grad.bias[c] += d / n;
            for (g, xv) in grad.weights[c].iter_mut().zip(xi) {
                *g += d * xv / n;
            }
        }
    }
    loss /= n;
    for (gw, w) in grad.weights.iter_mut().zip(&p.weights) {
        for (g, v) in gw.iter_mut().zip(w) {
            loss += 0.5 * l2 * v * v;
            *g += l2 * v;
        }
    }
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxModel {
    pub format: String,
    pub version: u32,
    pub n_classes: usize,
    pub dim: usize,
    /// Per-feature standardization applied before the logits.
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub params: LinearParams,
    /// Set when training saw one class only; that class gets probability 1.
    pub single_class: Option<usize>,
    pub train: TrainParams,
    pub loss_history: Vec<f64>,
}

impl SoftmaxModel {
    pub fn final_loss(&self) -> f64 {
        self.loss_history.last().copied().unwrap_or(0.0)
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), ClassifyError> {
        let err = |message: String| ClassifyError::Model { path: path.display().to_string(), message };
        std::fs::write(path, serde_json::to_string(self).map_err(|e| err(e.to_string()))?).map_err(|e| err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ClassifyError> {
        let err = |message: String| ClassifyError::Model { path: path.display().to_string(), message };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let m: SoftmaxModel = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if m.format != MODEL_FORMAT || m.version != MODEL_VERSION {
            return Err(err(format!("unsupported model {} v{}", m.format, m.version)));
        }
        let shapes_ok = m.mean.len() == m.dim
            && m.scale.len() == m.dim
            && m.params.bias.len() == m.n_classes
            && m.params.weights.len() == m.n_classes
            && m.params.weights.iter().all(|w| w.len() == m.dim);
        if !shapes_ok {
            return Err(err("inconsistent weight shapes".into()));
        }
        Ok(m)
    }
}

/// Full-batch gradient descent on standardized descriptors.
pub fn fit_softmax(
    descriptors: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    params: &TrainParams,
) -> Result<SoftmaxModel, ClassifyError> {
    if descriptors.len() != labels.len() {
        return Err(ClassifyError::LengthMismatch { descriptors: descriptors.len(), labels: labels.len() });
    }
    if descriptors.is_empty() {
        return Err(ClassifyError::NoData);
    }
    if !(params.learning_rate > 0.0 && params.l2 >= 0.0) {
        return Err(ClassifyError::Params("learning_rate must be positive and l2 non-negative".into()));
    }
    let dim = descriptors[0].len();
    if let Some(d) = descriptors.iter().find(|d| d.len() != dim) {
        return Err(ClassifyError::DimensionMismatch { expected: dim, got: d.len() });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(ClassifyError::LabelOutOfRange { label, classes: n_classes });
    }
    let n = descriptors.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| descriptors.iter().map(|d| d[j]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..dim)
        .map(|j| {
            let var = descriptors.iter().map(|d| (d[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 1e-24 { var.sqrt() } else { 1.0 }
        })
        .collect();
    let mut model = SoftmaxModel {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        n_classes,
        dim,
        mean,
        scale,
        params: LinearParams::zeros(n_classes, dim),
        single_class: None,
        train: params.clone(),
        loss_history: Vec::new(),
    };
    if labels.iter().all(|&l| l == labels[0]) {
        model.single_class = Some(labels[0]);
        return Ok(model);
    }
    let x: Vec<Vec<f64>> = descriptors.iter().map(|d| model.standardize(d)).collect();
    let mut r = rng(params.seed);
    let init = Normal::new(0.0, 0.01).expect("valid sigma");
    for w in model.params.weights.iter_mut().flatten() {
        *w = init.sample(&mut r);
    }
    for _ in 0..params.epochs {
        let (loss, grad) = loss_and_gradient(&model.params, &x, labels, params.l2);
        model.loss_history.push(loss);
        for (w, g) in model.params.weights.iter_mut().flatten().zip(grad.weights.iter().flatten()) {
            *w -= params.learning_rate * g;
        }
        for (b, g) in model.params.bias.iter_mut().zip(&grad.bias) {
            *b -= params.learning_rate * g;
        }
    }
    model.loss_history.push(loss_and_gradient(&model.params, &x, labels, params.l2).0);
    Ok(model)
}

pub fn predict_posterior(model: &SoftmaxModel, descriptor: &[f64]) -> Result<SpeciesPosterior, ClassifyError> {
    if descriptor.len() != model.dim {
        return Err(ClassifyError::DimensionMismatch { expected: model.dim, got: descriptor.len() });
    }
    if let Some(c) = model.single_class {
        let mut probs = vec![0.0; model.n_classes];
        probs[c] = 1.0;
        return Ok(SpeciesPosterior { probs });
    }
    Ok(SpeciesPosterior { probs: softmax(&model.params.logits(&model.standardize(descriptor))) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blank_model(classes: usize, dim: usize) -> SoftmaxModel {
        SoftmaxModel {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            n_classes: classes,
            dim,
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
            params: LinearParams::zeros(classes, dim),
            single_class: None,
            train: TrainParams::default(),
            loss_history: Vec::new(),
        }
    }

    #[test]
    fn descriptor_examples() {
        let crop = Raster::filled(100, 50, [200, 40, 40]);
        let mask = Mask::from_rect(100, 50, 0, 0, 100, 50);
        let d = appearance_descriptor(&crop, &mask).unwrap();
        assert_eq!(d.hue_hist.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(d.hue_hist.iter().sum::<f64>(), 1.0);
        assert_eq!(d.aspect_ratio, 2.0);
        assert_eq!(d.fill_ratio, 1.0);
        assert_eq!(d.to_vec().len(), DESCRIPTOR_DIM);
        assert!(matches!(appearance_descriptor(&crop, &Mask::empty(100, 50)), Err(ClassifyError::EmptyMask)));
        assert!(matches!(appearance_descriptor(&crop, &Mask::empty(10, 50)), Err(ClassifyError::CropMismatch { .. })));
    }

    #[test]
    fn detection_descriptor_modes() {
        let mut img = Raster::filled(60, 40, [0, 0, 255]);
        let mask = Mask::from_rect(60, 40, 10, 10, 30, 20);
        img.paint_mask(&mask, |_, _| [255, 0, 0]);
        let mut bits = Mask::from_rect(60, 40, 10, 10, 30, 20).to_bitmap();
        for y in 10..20 {
            bits[y * 60 + 29] = false;
        }
        let det = Detection::new(ObjectClass::Fish, Mask::from_bitmap(60, 40, &bits), 1.0).unwrap();
        let d = detection_descriptor(&img, &det, CropMode::MaskZeroed).unwrap();
        assert_eq!(d.hue_hist[0], 1.0);
        // the bbox crop also sees the uncovered red column; widen the box to
        // include background and check blue appears
        let mut wide = bits.clone();
        wide[25 * 60 + 40] = true;
        let det = Detection::new(ObjectClass::Fish, Mask::from_bitmap(60, 40, &wide), 1.0).unwrap();
        let d = detection_descriptor(&img, &det, CropMode::BBox).unwrap();
        assert!(d.hue_hist[10] > 0.5);
        let d = detection_descriptor(&img, &det, CropMode::MaskZeroed).unwrap();
        assert!(d.hue_hist[0] > 0.9);
    }

    #[test]
    fn posterior_examples() {
        let m = blank_model(4, 3);
        let p = predict_posterior(&m, &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(p.probs, vec![0.25; 4]);
        assert!(matches!(predict_posterior(&m, &[1.0]), Err(ClassifyError::DimensionMismatch { expected: 3, got: 1 })));

        let p = softmax(&[0.0, 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        let shifted = softmax(&[7.5, 7.5 + 3f64.ln()]);
        assert!((shifted[0] - p[0]).abs() < 1e-15);
        let q = softmax(&[0.3, -1.2, 2.0]);
        let q2 = softmax(&[100.3, 98.8, 102.0]);
        for (a, b) in q.iter().zip(&q2) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn topk_examples() {
        let p = SpeciesPosterior { probs: vec![0.2, 0.5, 0.3] };
        assert!(topk_hit(&p, 2, 2));
        assert!(!topk_hit(&p, 0, 2));
        assert!(topk_hit(&p, 0, 3));
        let onehot = SpeciesPosterior { probs: vec![0.0, 1.0, 0.0] };
        assert!(topk_hit(&onehot, 1, 1));
        let tie = SpeciesPosterior { probs: vec![0.5, 0.5] };
        assert!(topk_hit(&tie, 0, 1));
        assert!(!topk_hit(&tie, 1, 1));
    }

    #[test]
    fn single_class_training() {
        let x = vec![vec![1.0, 2.0], vec![3.0, 1.0]];
        let m = fit_softmax(&x, &[2, 2], 4, &TrainParams::default()).unwrap();
        let p = predict_posterior(&m, &[-50.0, 9.0]).unwrap();
        assert_eq!(p.probs, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn separable_toy_is_learned() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![if i % 2 == 0 { -1.0 } else { 1.0 }, (i % 7) as f64]).collect();
        let y: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let m = fit_softmax(&x, &y, 2, &TrainParams::default()).unwrap();
        let correct = x.iter().zip(&y).filter(|(d, &t)| predict_posterior(&m, d).unwrap().argmax() == t).count();
        assert_eq!(correct, 40);
        assert!(m.loss_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = rng(21);
        for _ in 0..5 {
            let (n, d, c) = (6, 3, 3);
            let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
            let y: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
            let mut p = LinearParams::zeros(c, d);
            for w in p.weights.iter_mut().flatten().chain(p.bias.iter_mut()) {
                *w = r.random_range(-1.0..1.0);
            }
            let (_, g) = loss_and_gradient(&p, &x, &y, 0.1);
            let h = 1e-5;
            for k in 0..c {
                for j in 0..=d {
                    let mut plus = p.clone();
                    let mut minus = p.clone();
                    let analytic = if j < d {
                        plus.weights[k][j] += h;
                        minus.weights[k][j] -= h;
                        g.weights[k][j]
                    } else {
                        plus.bias[k] += h;
                        minus.bias[k] -= h;
                        g.bias[k]
                    };
                    let numeric = (loss_and_gradient(&plus, &x, &y, 0.1).0 - loss_and_gradient(&minus, &x, &y, 0.1).0) / (2.0 * h);
                    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                    assert!(rel <= 1e-4, "rel err {rel}");
                }
            }
        }
    }

    #[test]
    fn model_round_trip() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let y: Vec<usize> = (0..10).map(|i| usize::from(i >= 5)).collect();
        let m = fit_softmax(&x, &y, 2, &TrainParams { epochs: 20, ..TrainParams::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cls.json");
        m.save(&path).unwrap();
        assert_eq!(SoftmaxModel::load(&path).unwrap(), m);
        let again = fit_softmax(&x, &y, 2, &TrainParams { epochs: 20, ..TrainParams::default() }).unwrap();
        assert_eq!(again, m);
    }
}
