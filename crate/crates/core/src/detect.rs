//! Detection stage: a noise-calibrated oracle that degrades ground truth to a
//! target IoU, and a color-threshold marker detector for rendered images.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{mask_bbox, mask_from_polygon, mask_iou, BBox, Mask};
use crate::raster::{rgb_to_hsv, Raster};
use crate::seed::{rng, stable_hash};
use crate::synthgen::SceneTruth;
use crate::types::{Detection, ObjectClass};

/// Masks smaller than this cannot be steered to an arbitrary IoU.
pub const MIN_DEGRADABLE_AREA: u64 = 10;
pub const IOU_TOLERANCE: f64 = 0.02;
const MAX_DEGRADE_ROUNDS: usize = 400;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("invalid detector noise: {0}")]
    Noise(String),
    #[error("invalid color config: {0}")]
    Color(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorNoise {
    pub target_fish_iou: f64,
    pub target_marker_iou: f64,
    pub miss_prob: f64,
    pub spurious_prob: f64,
    pub confidence_noise: f64,
}

impl Default for DetectorNoise {
    fn default() -> Self {
        Self::none()
    }
}

impl DetectorNoise {
    /// Perfect detector: truth masks, confidence 1, nothing missed or added.
    pub fn none() -> Self {
        Self { target_fish_iou: 1.0, target_marker_iou: 1.0, miss_prob: 0.0, spurious_prob: 0.0, confidence_noise: 0.0 }
    }

    /// Mean IoU 0.92 on fish and 0.86 on the color markers.
    pub fn calibrated() -> Self {
        Self { target_fish_iou: 0.92, target_marker_iou: 0.86, miss_prob: 0.0, spurious_prob: 0.0, confidence_noise: 0.03 }
    }

    pub fn validate(&self) -> Result<(), DetectError> {
        for (name, v) in [("target_fish_iou", self.target_fish_iou), ("target_marker_iou", self.target_marker_iou)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(DetectError::Noise(format!("{name} = {v} outside (0, 1]")));
            }
        }
        for (name, v) in [("miss_prob", self.miss_prob), ("spurious_prob", self.spurious_prob)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DetectError::Noise(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.confidence_noise >= 0.0 && self.confidence_noise.is_finite()) {
            return Err(DetectError::Noise(format!("confidence_noise = {} invalid", self.confidence_noise)));
        }
        Ok(())
    }

    pub fn target_iou(&self, class: ObjectClass) -> f64 {
        if class.is_marker() {
            self.target_marker_iou
        } else {
            self.target_fish_iou
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Degraded {
    pub mask: Mask,
    pub iou: f64,
    /// Set when the target could not be reached and the input was returned
    /// (tiny masks) or the result lies outside the tolerance band.
    pub warning: bool,
}

/// Working copy of a mask inside a padded window.
struct Window {
    x0: u32,
    y0: u32,
    w: u32,
    h: u32,
    orig: Vec<bool>,
    cur: Vec<bool>,
    inter: u64,
    union: u64,
    area: u64,
}

impl Window {
    fn new(mask: &Mask, pad: u32) -> Self {
        let b = mask_bbox(mask).expect("non-empty");
        let x0 = b.x0.saturating_sub(pad);
        let y0 = b.y0.saturating_sub(pad);
        let x1 = (b.x1 + pad).min(mask.width());
        let y1 = (b.y1 + pad).min(mask.height());
        let (w, h) = (x1 - x0, y1 - y0);
        let mut orig = vec![false; (w * h) as usize];
        for (y, a, bx) in mask.row_spans() {
            let row = ((y - y0) * w) as usize;
            for x in a..bx {
                orig[row + (x - x0) as usize] = true;
            }
        }
        let area = mask.area();
        Self { x0, y0, w, h, cur: orig.clone(), orig, inter: area, union: area, area }
    }

    fn iou(&self) -> f64 {
        self.inter as f64 / self.union as f64
    }

    fn set(&mut self, i: usize, on: bool) {
        if self.cur[i] == on {
            return;
        }
        self.cur[i] = on;
        match (on, self.orig[i]) {
            (true, true) => self.inter += 1,
            (true, false) => self.union += 1,
            (false, true) => self.inter -= 1,
            (false, false) => self.union -= 1,
        }
        if on {
            self.area += 1;
        } else {
            self.area -= 1;
        }
    }

    /// Replace the current mask by the original shifted by `(dx, dy)`.
    fn shift(&mut self, dx: i64, dy: i64) {
        let (w, h) = (i64::from(self.w), i64::from(self.h));
        let src = self.orig.clone();
        for i in 0..self.cur.len() {
            self.set(i, false);
        }
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (x - dx, y - dy);
                if sx >= 0 && sy >= 0 && sx < w && sy < h && src[(sy * w + sx) as usize] {
                    self.set((y * w + x) as usize, true);
                }
            }
        }
    }

    fn neighbors(&self, i: usize) -> impl Iterator<Item = Option<usize>> {
        let (w, h) = (self.w as usize, self.h as usize);
        let (x, y) = (i % w, i / w);
        [
            (x > 0).then(|| i - 1),
            (x + 1 < w).then(|| i + 1),
            (y > 0).then(|| i - w),
            (y + 1 < h).then(|| i + w),
        ]
        .into_iter()
    }

    /// Background pixels touching the mask, and mask pixels touching background.
    fn boundaries(&self) -> (Vec<usize>, Vec<usize>) {
        let (mut outer, mut inner) = (Vec::new(), Vec::new());
        for i in 0..self.cur.len() {
            if self.cur[i] {
                if self.neighbors(i).any(|n| n.is_none_or(|n| !self.cur[n])) {
                    inner.push(i);
                }
            } else if self.neighbors(i).any(|n| n.is_some_and(|n| self.cur[n])) {
                outer.push(i);
            }
        }
        (outer, inner)
    }

    fn to_mask(&self, width: u32, height: u32) -> Mask {
        let mut spans = Vec::new();
        for y in 0..self.h {
            let row = &self.cur[(y * self.w) as usize..((y + 1) * self.w) as usize];
            let mut x = 0;
            while x < self.w {
                if row[x as usize] {
                    let start = x;
                    while x < self.w && row[x as usize] {
                        x += 1;
                    }
                    spans.push((y + self.y0, start + self.x0, x + self.x0));
                } else {
                    x += 1;
                }
            }
        }
        Mask::from_spans(width, height, spans)
    }
}

/// Perturb `mask` by an optional one-pixel shift followed by random boundary
/// growth and erosion until its IoU with the input drops to `target_iou`.
/// The result lands in `(target - 1/union, target]` whenever the mask is large
/// enough for single-pixel steps to resolve the tolerance.
pub fn degrade_mask_to_iou(mask: &Mask, target_iou: f64, seed: u64) -> Degraded {
    if target_iou >= 1.0 || mask.is_empty() {
        return Degraded { mask: mask.clone(), iou: 1.0, warning: mask.is_empty() };
    }
    if mask.area() < MIN_DEGRADABLE_AREA {
        return Degraded { mask: mask.clone(), iou: 1.0, warning: true };
    }
    let mut rng = rng(seed);
    let pad = ((mask.area() as f64).sqrt() * 0.5).ceil() as u32 + 3;
    let mut win = Window::new(mask, pad);

    if rng.random_bool(0.5) {
        let (dx, dy) = [(1, 0), (-1, 0), (0, 1), (0, -1)][rng.random_range(0..4)];
        win.shift(dx, dy);
        if win.iou() < target_iou || win.area == 0 {
            win.shift(0, 0);
        }
    }

    let grow_bias = rng.random_range(0.25..0.75);
    for _ in 0..MAX_DEGRADE_ROUNDS {
        if win.iou() <= target_iou {
            break;
        }
        let (mut outer, mut inner) = win.boundaries();
        outer.shuffle(&mut rng);
        inner.shuffle(&mut rng);
        // each flip moves IoU by roughly 1/union; take half the gap per round
        let needed = ((win.iou() - target_iou) * win.union as f64).ceil() as usize;
        let batch = needed / 2 + 1;
        let mut flipped = 0;
        while flipped < batch && (!outer.is_empty() || !inner.is_empty()) {
            let grow = inner.is_empty() || (!outer.is_empty() && rng.random_bool(grow_bias));
            if grow {
                let i = outer.pop().expect("non-empty");
                if !win.cur[i] {
                    win.set(i, true);
                    flipped += 1;
                }
            } else {
                let i = inner.pop().expect("non-empty");
                if win.cur[i] && win.area > 1 {
                    win.set(i, false);
                    flipped += 1;
                }
            }
            if win.iou() <= target_iou {
                break;
            }
        }
    }
    let out = win.to_mask(mask.width(), mask.height());
    let iou = mask_iou(mask, &out).expect("same frame, non-empty");
    Degraded { warning: (iou - target_iou).abs() > IOU_TOLERANCE, mask: out, iou }
}

/// Oracle detector: one detection per truth object, degraded to the class
/// target IoU, minus independent misses, plus background fish placed outside
/// the board.
pub fn oracle_detect(truth: &SceneTruth, noise: &DetectorNoise, seed: u64) -> Result<Vec<Detection>, DetectError> {
    noise.validate()?;
    let objects = truth
        .markers
        .iter()
        .map(|m| (m.class, &m.mask))
        .chain(truth.fish.iter().map(|f| (ObjectClass::Fish, &f.mask)));
    let conf_noise = (noise.confidence_noise > 0.0).then(|| Normal::new(0.0, noise.confidence_noise).expect("validated"));
    let mut out = Vec::new();
    for (idx, (class, mask)) in objects.enumerate() {
        let mut r = rng(stable_hash(seed, idx as u64));
        if noise.miss_prob > 0.0 && r.random_bool(noise.miss_prob) {
            continue;
        }
        let target = noise.target_iou(class);
        let degraded = degrade_mask_to_iou(mask, target, r.random());
        let jitter = conf_noise.map_or(0.0, |d| d.sample(&mut r));
        let confidence = (target + jitter).clamp(0.0, 1.0);
        out.push(Detection::new(class, degraded.mask, confidence).expect("degraded masks are non-empty"));
    }
    if noise.spurious_prob > 0.0 {
        let mut r = rng(stable_hash(seed, u64::MAX));
        if r.random_bool(noise.spurious_prob) {
            if let Some(d) = background_fish(truth, &mut r) {
                out.push(d);
            }
        }
    }
    Ok(out)
}

/// A fish-shaped blob that lies entirely off the board.
fn background_fish(truth: &SceneTruth, r: &mut impl Rng) -> Option<Detection> {
    let (w, h) = (truth.width(), truth.height());
    let board = truth.board_mask().ok()?;
    for _ in 0..50 {
        let len = r.random_range(30.0..120.0);
        let half = (len / 2.0, len * 0.14);
        let c = (r.random_range(0.0..f64::from(w)), r.random_range(0.0..f64::from(h)));
        let angle: f64 = r.random_range(0.0..std::f64::consts::PI);
        let (s, co) = angle.sin_cos();
        let poly: Vec<(f64, f64)> = (0..48)
            .map(|i| {
                let t = std::f64::consts::TAU * f64::from(i) / 48.0;
                let (x, y) = (half.0 * t.cos(), half.1 * t.sin());
                (c.0 + co * x - s * y, c.1 + s * x + co * y)
            })
            .collect();
        let Ok(mask) = mask_from_polygon(&poly, w, h) else { continue };
        if mask.area() < 30 || mask.intersection_area(&board) > 0 {
            continue;
        }
        let confidence = r.random_range(0.5..0.9);
        return Detection::new(ObjectClass::Fish, mask, confidence).ok();
    }
    None
}

/// HSV acceptance band. Hue bounds in degrees; `hue_min > hue_max` wraps
/// through 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsvBand {
    pub hue_min: f64,
    pub hue_max: f64,
    pub sat_min: f64,
    pub val_min: f64,
}

impl HsvBand {
    pub fn contains(&self, (h, s, v): (f64, f64, f64)) -> bool {
        let hue_ok = if self.hue_min <= self.hue_max {
            (self.hue_min..=self.hue_max).contains(&h)
        } else {
            h >= self.hue_min || h <= self.hue_max
        };
        hue_ok && s >= self.sat_min && v >= self.val_min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColorConfig {
    pub yellow: HsvBand,
    pub yellow_strict: HsvBand,
    pub blue: HsvBand,
    pub blue_strict: HsvBand,
    pub min_area: u64,
    pub max_area: u64,
    /// Components whose boxes are at most this many pixels apart are merged.
    pub merge_distance: u32,
}

impl Default for ColorConfig {
    fn default() -> Self {
        Self {
            yellow: HsvBand { hue_min: 38.0, hue_max: 70.0, sat_min: 0.55, val_min: 0.45 },
            yellow_strict: HsvBand { hue_min: 44.0, hue_max: 56.0, sat_min: 0.75, val_min: 0.7 },
            blue: HsvBand { hue_min: 205.0, hue_max: 245.0, sat_min: 0.55, val_min: 0.4 },
            blue_strict: HsvBand { hue_min: 215.0, hue_max: 235.0, sat_min: 0.75, val_min: 0.6 },
            min_area: 40,
            max_area: 20_000,
            merge_distance: 16,
        }
    }
}

impl ColorConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        if self.min_area > self.max_area {
            return Err(DetectError::Color(format!("area band [{}, {}] is empty", self.min_area, self.max_area)));
        }
        Ok(())
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        parent[hi] = lo;
    }
}

/// 4-connected components of a binary image, as masks in raster order of
/// their first pixel.
pub fn connected_components(bits: &[bool], width: u32, height: u32) -> Vec<Mask> {
    let (w, h) = (width as usize, height as usize);
    let mut parent: Vec<usize> = (0..w * h).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !bits[i] {
                continue;
            }
            if x > 0 && bits[i - 1] {
                union(&mut parent, i, i - 1);
            }
            if y > 0 && bits[i - w] {
                union(&mut parent, i, i - w);
            }
        }
    }
    let mut label_of_root = vec![usize::MAX; w * h];
    let mut spans: Vec<Vec<(u32, u32, u32)>> = Vec::new();
    for y in 0..h {
        let mut x = 0;
        while x < w {
            let i = y * w + x;
            if !bits[i] {
                x += 1;
                continue;
            }
            let root = find(&mut parent, i);
            let start = x;
            while x < w && bits[y * w + x] {
                x += 1;
            }
            let label = if label_of_root[root] == usize::MAX {
                label_of_root[root] = spans.len();
                spans.push(Vec::new());
                spans.len() - 1
            } else {
                label_of_root[root]
            };
            spans[label].push((y as u32, start as u32, x as u32));
        }
    }
    spans.into_iter().map(|s| Mask::from_spans(width, height, s)).collect()
}

fn box_gap(a: &BBox, b: &BBox) -> u32 {
    let dx = b.x0.saturating_sub(a.x1).max(a.x0.saturating_sub(b.x1));
    let dy = b.y0.saturating_sub(a.y1).max(a.y0.saturating_sub(b.y1));
    dx.max(dy)
}

fn merge_masks(masks: &[&Mask]) -> Mask {
    let (w, h) = (masks[0].width(), masks[0].height());
    let mut bits = vec![false; w as usize * h as usize];
    for m in masks {
        for &(s, l) in m.runs() {
            bits[s as usize..(s + l) as usize].fill(true);
        }
    }
    Mask::from_bitmap(w, h, &bits)
}

/// Threshold each marker color family in HSV, label 4-connected components,
/// merge components separated by at most `merge_distance` pixels and keep
/// those whose merged area lies in the configured band.
pub fn color_detect_markers(image: &Raster, cfg: &ColorConfig) -> Result<Vec<Detection>, DetectError> {
    cfg.validate()?;
    let (w, h) = (image.width(), image.height());
    let hsv: Vec<(f64, f64, f64)> = image.rgb().chunks_exact(3).map(|c| rgb_to_hsv([c[0], c[1], c[2]])).collect();
    let mut out = Vec::new();
    for (class, band, strict) in [
        (ObjectClass::YellowBox, cfg.yellow, cfg.yellow_strict),
        (ObjectClass::BlueBox, cfg.blue, cfg.blue_strict),
    ] {
        let bits: Vec<bool> = hsv.iter().map(|&p| band.contains(p)).collect();
        let comps = connected_components(&bits, w, h);
        let boxes: Vec<BBox> = comps.iter().map(|m| mask_bbox(m).expect("component non-empty")).collect();
        let mut parent: Vec<usize> = (0..comps.len()).collect();
        for i in 0..comps.len() {
            for j in i + 1..comps.len() {
                if box_gap(&boxes[i], &boxes[j]) <= cfg.merge_distance {
                    union(&mut parent, i, j);
                }
            }
        }
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); comps.len()];
        for i in 0..comps.len() {
            let r = find(&mut parent, i);
            groups[r].push(i);
        }
        for group in groups.into_iter().filter(|g| !g.is_empty()) {
            let members: Vec<&Mask> = group.iter().map(|&i| &comps[i]).collect();
            let mask = if members.len() == 1 { members[0].clone() } else { merge_masks(&members) };
            let area = mask.area();
            if area < cfg.min_area || area > cfg.max_area {
                continue;
            }
            let strict_hits: u64 = mask
                .runs()
                .iter()
                .map(|&(s, l)| (s..s + l).filter(|&i| strict.contains(hsv[i as usize])).count() as u64)
                .sum();
            let confidence = strict_hits as f64 / area as f64;
            out.push(Detection::new(class, mask, confidence).expect("non-empty, confidence in range"));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{render, sample_scene, GeneratorConfig, LightingConfig};

    fn blob(seed: u64) -> Mask {
        let mut r = rng(seed);
        let (w, h) = (160u32, 120u32);
        let c = (r.random_range(40.0..120.0), r.random_range(30.0..90.0));
        let (a, b) = (r.random_range(4.0..40.0), r.random_range(3.0..25.0));
        let angle: f64 = r.random_range(0.0..3.14);
        let poly: Vec<(f64, f64)> = (0..40)
            .map(|i| {
                let t = std::f64::consts::TAU * f64::from(i) / 40.0;
                let (x, y) = (a * t.cos(), b * t.sin());
                (c.0 + angle.cos() * x - angle.sin() * y, c.1 + angle.sin() * x + angle.cos() * y)
            })
            .collect();
        mask_from_polygon(&poly, w, h).unwrap()
    }

    #[test]
    fn degrade_identity_and_tiny() {
        let m = blob(1);
        let d = degrade_mask_to_iou(&m, 1.0, 3);
        assert_eq!(d.mask, m);
        assert!(!d.warning);
        let tiny = Mask::from_rect(10, 10, 2, 2, 4, 4);
        let d = degrade_mask_to_iou(&tiny, 0.5, 3);
        assert!(d.warning);
        assert_eq!(d.mask, tiny);
    }

    #[test]
    fn degrade_hits_target_and_is_deterministic() {
        for seed in 0..50 {
            let m = blob(seed);
            let d = degrade_mask_to_iou(&m, 0.8, seed);
            assert!((d.iou - 0.8).abs() <= IOU_TOLERANCE, "seed {seed}: {}", d.iou);
            assert_eq!(d.iou, mask_iou(&m, &d.mask).unwrap());
            assert_eq!(degrade_mask_to_iou(&m, 0.8, seed), d);
        }
    }

    #[test]
    fn degrade_mean_iou_over_random_masks() {
        let ious: Vec<f64> = (0..1000).map(|s| degrade_mask_to_iou(&blob(10_000 + s), 0.92, s).iou).collect();
        let mean = ious.iter().sum::<f64>() / ious.len() as f64;
        assert!((0.90..=0.94).contains(&mean), "mean IoU {mean}");
    }

    #[test]
    fn zero_noise_oracle_reproduces_truth() {
        let scene = sample_scene(&GeneratorConfig::default(), 11).unwrap();
        let dets = oracle_detect(&scene, &DetectorNoise::none(), 5).unwrap();
        assert_eq!(dets.len(), scene.markers.len() + scene.fish.len());
        for (d, m) in dets.iter().zip(&scene.markers) {
            assert_eq!(d.mask, m.mask);
            assert_eq!(d.class, m.class);
            assert_eq!(d.confidence, 1.0);
        }
        for (d, f) in dets[4..].iter().zip(&scene.fish) {
            assert_eq!(d.mask, f.mask);
            assert_eq!(d.class, ObjectClass::Fish);
        }
    }

    #[test]
    fn oracle_misses_and_spurious() {
        let scene = sample_scene(&GeneratorConfig::default(), 12).unwrap();
        let all_missed = DetectorNoise { miss_prob: 1.0, ..DetectorNoise::none() };
        assert!(oracle_detect(&scene, &all_missed, 1).unwrap().is_empty());

        let spurious = DetectorNoise { spurious_prob: 1.0, ..DetectorNoise::none() };
        let dets = oracle_detect(&scene, &spurious, 1).unwrap();
        assert_eq!(dets.len(), 4 + scene.fish.len() + 1);
        let extra = dets.last().unwrap();
        assert_eq!(extra.class, ObjectClass::Fish);
        assert_eq!(extra.mask.intersection_area(&scene.board_mask().unwrap()), 0);

        let bad = DetectorNoise { target_fish_iou: 0.0, ..DetectorNoise::none() };
        assert!(oracle_detect(&scene, &bad, 1).is_err());
    }

    #[test]
    fn oracle_confidence_and_iou_near_target() {
        let scene = sample_scene(&GeneratorConfig::default(), 13).unwrap();
        let noise = DetectorNoise::calibrated();
        let dets = oracle_detect(&scene, &noise, 77).unwrap();
        assert_eq!(dets, oracle_detect(&scene, &noise, 77).unwrap());
        let truths = scene.markers.iter().map(|m| &m.mask).chain(scene.fish.iter().map(|f| &f.mask));
        for (d, t) in dets.iter().zip(truths) {
            let iou = mask_iou(&d.mask, t).unwrap();
            assert!((iou - noise.target_iou(d.class)).abs() <= IOU_TOLERANCE, "{iou}");
            assert!((0.0..=1.0).contains(&d.confidence));
        }
    }

    #[test]
    fn color_detector_finds_four_markers() {
        let cfg = GeneratorConfig::default();
        let scene = sample_scene(&cfg, 21).unwrap();
        let img = render(&scene, &LightingConfig::noise_free(), &cfg.species).unwrap();
        let dets = color_detect_markers(&img, &ColorConfig::default()).unwrap();
        assert_eq!(dets.len(), 4);
        assert_eq!(dets.iter().filter(|d| d.class == ObjectClass::YellowBox).count(), 2);
        for d in &dets {
            let truth = scene.markers.iter().find(|m| m.mask == d.mask);
            assert!(truth.is_some_and(|t| t.class == d.class));
            assert_eq!(d.confidence, 1.0);
        }
        let noisy = render(&scene, &LightingConfig::default(), &cfg.species).unwrap();
        assert_eq!(color_detect_markers(&noisy, &ColorConfig::default()).unwrap().len(), 4);
    }

    #[test]
    fn color_detector_on_black_image() {
        let img = Raster::filled(64, 64, [0, 0, 0]);
        assert!(color_detect_markers(&img, &ColorConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn split_marker_merge_rule() {
        // a 40x12 yellow marker cut by a 6 px dark strip
        let mut img = Raster::filled(100, 40, [230, 230, 225]);
        for y in 10..22 {
            for x in 20..60 {
                img.set_pixel(x, y, [240, 200, 20]);
            }
        }
        for y in 0..40 {
            for x in 37..43 {
                img.set_pixel(x, y, [85, 80, 78]);
            }
        }
        let merged = color_detect_markers(&img, &ColorConfig { merge_distance: 6, ..ColorConfig::default() }).unwrap();
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].bbox, BBox::new(20, 10, 60, 22));
        assert_eq!(merged[0].mask.area(), 34 * 12);
        let split = color_detect_markers(&img, &ColorConfig { merge_distance: 5, ..ColorConfig::default() }).unwrap();
        assert_eq!(split.len(), 2);
    }

    #[test]
    fn components_are_four_connected() {
        // diagonal neighbours are separate components
        let bits = [true, false, false, true];
        let comps = connected_components(&bits, 2, 2);
        assert_eq!(comps.len(), 2);
        let bits = [true, true, false, true];
        assert_eq!(connected_components(&bits, 2, 2).len(), 1);
    }
}
