//! Synthetic measuring-board scenes with exact ground truth.
//!
//! A scene is laid out on the board plane in centimeters (origin at the
//! board's top-left corner, x along the 100 cm side, y along the 80 cm side)
//! and mapped to pixels through a homography. Fish are superellipse
//! silhouettes whose tip-to-tip extent on the board plane is exactly their
//! recorded length. Four 3x10 cm markers sit at fixed positions near the
//! board edges.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curate::canonical_order;
use crate::geom::{mask_bbox, mask_from_polygon, GeomError, Mask};
use crate::raster::{hsv_to_rgb, Raster, RasterError};
use crate::seed::{rng, stable_hash, stage_seed};
use crate::types::{FishRecord, ObjectClass, MAX_FISH_LENGTH_CM, MIN_FISH_LENGTH_CM};

pub const BOARD_WIDTH_CM: f64 = 100.0;
pub const BOARD_HEIGHT_CM: f64 = 80.0;
pub const MARKER_LONG_CM: f64 = 10.0;
pub const MARKER_SHORT_CM: f64 = 3.0;

/// Board-plane rectangles `[x0, y0, x1, y1]` of the four markers.
pub const MARKER_LAYOUT: [(ObjectClass, [f64; 4]); 4] = [
    (ObjectClass::YellowBox, [2.0, 1.5, 12.0, 4.5]),
    (ObjectClass::BlueBox, [88.0, 1.5, 98.0, 4.5]),
    (ObjectClass::BlueBox, [2.0, 75.5, 12.0, 78.5]),
    (ObjectClass::YellowBox, [88.0, 75.5, 98.0, 78.5]),
];

/// Fish stay clear of the marker rows.
const FISH_Y_MIN_CM: f64 = 6.0;
const FISH_Y_MAX_CM: f64 = 74.0;
const OUTLINE_POINTS: usize = 160;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("projection undefined: homogeneous w = {0:e}")]
    Projection(f64),
    #[error("homography is singular (det = {0:e})")]
    SingularHomography(f64),
    #[error("infeasible generator config: {0}")]
    Infeasible(String),
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Manifest { path: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.display().to_string(), source }
}

/// Board plane (cm) to pixel homography, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub homography: [f64; 9],
    pub width: u32,
    pub height: u32,
}

fn matmul(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = (0..3).map(|k| a[3 * r + k] * b[3 * k + c]).sum();
        }
    }
    out
}

impl CameraModel {
    pub fn new(homography: [f64; 9], width: u32, height: u32) -> Result<Self, SynthError> {
        let h = &homography;
        let det = h[0] * (h[4] * h[8] - h[5] * h[7]) - h[1] * (h[3] * h[8] - h[5] * h[6])
            + h[2] * (h[3] * h[7] - h[4] * h[6]);
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(SynthError::SingularHomography(det));
        }
        Ok(Self { homography, width, height })
    }

    /// Camera looking straight at the board: `pixel = offset + px_per_cm * p`.
    pub fn fronto_parallel(px_per_cm: f64, offset: (f64, f64), width: u32, height: u32) -> Self {
        Self::new([px_per_cm, 0.0, offset.0, 0.0, px_per_cm, offset.1, 0.0, 0.0, 1.0], width, height)
            .expect("positive scale is invertible")
    }

    pub fn project(&self, p: (f64, f64)) -> Result<(f64, f64), SynthError> {
        project_board(self, p)
    }

    pub fn board_corners_px(&self) -> Result<Vec<(f64, f64)>, SynthError> {
        [(0.0, 0.0), (BOARD_WIDTH_CM, 0.0), (BOARD_WIDTH_CM, BOARD_HEIGHT_CM), (0.0, BOARD_HEIGHT_CM)]
            .into_iter()
            .map(|p| self.project(p))
            .collect()
    }
}

/// Homogeneous projection of a board point to pixel coordinates.
pub fn project_board(camera: &CameraModel, p: (f64, f64)) -> Result<(f64, f64), SynthError> {
    let h = &camera.homography;
    let w = h[6] * p.0 + h[7] * p.1 + h[8];
    if w.abs() < 1e-9 {
        return Err(SynthError::Projection(w));
    }
    Ok(((h[0] * p.0 + h[1] * p.1 + h[2]) / w, (h[3] * p.0 + h[4] * p.1 + h[5]) / w))
}

/// Per-species appearance: hue/saturation/value of the body color and shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesStyle {
    pub hue_deg: f64,
    pub saturation: f64,
    pub value: f64,
    /// Body width over length.
    pub aspect: f64,
    /// Superellipse exponent; 2 is an ellipse.
    pub exponent: f64,
}

pub fn default_palette() -> Vec<SpeciesStyle> {
    let s = |hue_deg, saturation, value, aspect, exponent| SpeciesStyle { hue_deg, saturation, value, aspect, exponent };
    vec![
        s(0.0, 0.70, 0.80, 0.30, 2.0),
        s(22.0, 0.75, 0.85, 0.22, 2.2),
        s(100.0, 0.55, 0.65, 0.26, 2.0),
        s(140.0, 0.60, 0.70, 0.18, 2.3),
        s(175.0, 0.55, 0.75, 0.34, 2.0),
        s(300.0, 0.50, 0.70, 0.24, 2.1),
    ]
}

/// Truncated log-normal length distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthDistribution {
    pub min_cm: f64,
    pub max_cm: f64,
    pub median_cm: f64,
    pub log_sigma: f64,
}

impl LengthDistribution {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.log_sigma == 0.0 || self.min_cm == self.max_cm {
            return self.median_cm.clamp(self.min_cm, self.max_cm);
        }
        let normal = Normal::new(self.median_cm.ln(), self.log_sigma).expect("sigma validated");
        loop {
            let v = normal.sample(rng).exp();
            if (self.min_cm..=self.max_cm).contains(&v) {
                return v;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub image_width: u32,
    pub image_height: u32,
    /// Range of board scale in pixels per centimeter.
    pub px_per_cm: [f64; 2],
    /// Maximum in-plane camera roll, degrees.
    pub max_roll_deg: f64,
    /// Maximum magnitude of each projective coefficient, per cm.
    pub max_perspective: f64,
    /// Maximum board-center offset from the image center, pixels.
    pub max_shift_px: f64,
    /// Minimum distance from projected geometry to the image border, pixels.
    pub frame_margin_px: f64,
    /// Horizontal overhang allowed past each board edge for long fish, cm.
    pub overhang_cm: f64,
    pub fish_count: [usize; 2],
    pub length: LengthDistribution,
    pub species: Vec<SpeciesStyle>,
    /// Draw species without replacement within a scene.
    pub distinct_species: bool,
    /// Multiplicative jitter on the species aspect ratio.
    pub aspect_jitter: f64,
    /// Maximum mid-body bend as a fraction of length.
    pub max_bend: f64,
    /// Maximum fish rotation away from the board's long axis, degrees.
    pub max_fish_angle_deg: f64,
    /// Minimum gap between fish on the board plane, cm.
    pub fish_gap_cm: f64,
    /// Probability that a scene contains an occluder strip.
    pub occlusion_prob: f64,
    pub occluder_width_px: [f64; 2],
    /// Probability that the annotation list is not in top-to-bottom order.
    pub annotation_shuffle_prob: f64,
    pub max_retries: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_width: 1024,
            image_height: 448,
            px_per_cm: [3.2, 3.7],
            max_roll_deg: 3.0,
            max_perspective: 0.0003,
            max_shift_px: 15.0,
            frame_margin_px: 6.0,
            overhang_cm: 78.0,
            fish_count: [1, 6],
            length: LengthDistribution { min_cm: 10.0, max_cm: 250.0, median_cm: 50.0, log_sigma: 0.6 },
            species: default_palette(),
            distinct_species: false,
            aspect_jitter: 0.08,
            max_bend: 0.05,
            max_fish_angle_deg: 10.0,
            fish_gap_cm: 1.0,
            occlusion_prob: 0.0,
            occluder_width_px: [6.0, 14.0],
            annotation_shuffle_prob: 0.3,
            max_retries: 200,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image dimensions must be positive".into());
        }
        if !(self.px_per_cm[0] > 0.0 && self.px_per_cm[0] <= self.px_per_cm[1]) {
            return bad(format!("px_per_cm range {:?} invalid", self.px_per_cm));
        }
        if self.fish_count[0] > self.fish_count[1] {
            return bad(format!("fish_count range {:?} invalid", self.fish_count));
        }
        let l = &self.length;
        if !(MIN_FISH_LENGTH_CM <= l.min_cm && l.min_cm <= l.max_cm && l.max_cm <= MAX_FISH_LENGTH_CM) {
            return bad(format!("length range [{}, {}] must lie within [10, 250]", l.min_cm, l.max_cm));
        }
        if !(l.median_cm > 0.0 && l.log_sigma >= 0.0) {
            return bad("length median must be positive and log_sigma non-negative".into());
        }
        if l.log_sigma > 0.0 && l.min_cm < l.max_cm {
            // rejection sampling must accept with reasonable probability
            let z = |v: f64| (v.ln() - l.median_cm.ln()) / l.log_sigma;
            if z(l.min_cm) > 4.0 || z(l.max_cm) < -4.0 {
                return bad("length median lies far outside [min, max]".into());
            }
        }
        if self.species.is_empty() {
            return bad("species palette is empty".into());
        }
        if self.distinct_species && self.fish_count[1] > self.species.len() {
            return bad(format!(
                "distinct species requested for up to {} fish but palette has {}",
                self.fish_count[1],
                self.species.len()
            ));
        }
        for (name, p) in [("occlusion_prob", self.occlusion_prob), ("annotation_shuffle_prob", self.annotation_shuffle_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.max_retries == 0 {
            return bad("max_retries must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerTruth {
    pub class: ObjectClass,
    /// Board-plane rectangle `[x0, y0, x1, y1]` in cm.
    pub rect_cm: [f64; 4],
    pub mask: Mask,
    pub occlusion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FishTruth {
    pub species_id: usize,
    pub length_cm: f64,
    pub mask: Mask,
    pub occlusion: f64,
}

impl FishTruth {
    pub fn record(&self) -> FishRecord {
        FishRecord { species_id: self.species_id, length_cm: self.length_cm }
    }
}

/// Opaque strip painted over the scene (arm, net, shadow).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub polygon_px: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneTruth {
    pub camera: CameraModel,
    pub markers: Vec<MarkerTruth>,
    pub fish: Vec<FishTruth>,
    /// Annotation list as a human would have written it: entry `i` names
    /// fish `annotation_order[i]`.
    pub annotation_order: Vec<usize>,
    pub occluders: Vec<Occluder>,
    pub seed: u64,
}

impl SceneTruth {
    pub fn width(&self) -> u32 {
        self.camera.width
    }

    pub fn height(&self) -> u32 {
        self.camera.height
    }

    /// Species labels in annotation order.
    pub fn annotation_labels(&self) -> Vec<usize> {
        self.annotation_order.iter().map(|&i| self.fish[i].species_id).collect()
    }

    pub fn board_mask(&self) -> Result<Mask, SynthError> {
        Ok(mask_from_polygon(&self.camera.board_corners_px()?, self.width(), self.height())?)
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub scene_id: u64,
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    pub camera: [f64; 9],
    pub markers: Vec<MarkerTruth>,
    pub fish: Vec<FishTruth>,
    pub annotations: Vec<usize>,
    #[serde(default)]
    pub occluders: Vec<Occluder>,
    pub seed: u64,
}

impl SceneRecord {
    pub fn new(scene_id: u64, image_path: String, scene: &SceneTruth) -> Self {
        Self {
            scene_id,
            image_path,
            width: scene.width(),
            height: scene.height(),
            camera: scene.camera.homography,
            markers: scene.markers.clone(),
            fish: scene.fish.clone(),
            annotations: scene.annotation_order.clone(),
            occluders: scene.occluders.clone(),
            seed: scene.seed,
        }
    }

    pub fn to_scene(&self) -> Result<SceneTruth, SynthError> {
        let camera = CameraModel::new(self.camera, self.width, self.height)?;
        let n = self.fish.len();
        let mut seen = vec![false; n];
        for &a in &self.annotations {
            if a >= n || std::mem::replace(&mut seen[a], true) {
                return Err(SynthError::Config(format!("scene {}: annotations are not a permutation", self.scene_id)));
            }
        }
        if self.annotations.len() != n {
            return Err(SynthError::Config(format!("scene {}: annotation count differs from fish count", self.scene_id)));
        }
        let dims_ok = self
            .markers
            .iter()
            .map(|m| &m.mask)
            .chain(self.fish.iter().map(|f| &f.mask))
            .all(|m| m.width() == self.width && m.height() == self.height);
        if !dims_ok {
            return Err(SynthError::Config(format!("scene {}: mask dimensions differ from image", self.scene_id)));
        }
        Ok(SceneTruth {
            camera,
            markers: self.markers.clone(),
            fish: self.fish.clone(),
            annotation_order: self.annotations.clone(),
            occluders: self.occluders.clone(),
            seed: self.seed,
        })
    }
}

fn sample_camera(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Result<CameraModel, SynthError> {
    let (cx, cy) = (BOARD_WIDTH_CM / 2.0, BOARD_HEIGHT_CM / 2.0);
    let margin = cfg.frame_margin_px;
    for _ in 0..cfg.max_retries {
        let scale = rng.random_range(cfg.px_per_cm[0]..=cfg.px_per_cm[1]);
        let roll = rng.random_range(-cfg.max_roll_deg..=cfg.max_roll_deg).to_radians();
        let px = rng.random_range(-cfg.max_perspective..=cfg.max_perspective);
        let py = rng.random_range(-cfg.max_perspective..=cfg.max_perspective);
        let tx = f64::from(cfg.image_width) / 2.0 + rng.random_range(-cfg.max_shift_px..=cfg.max_shift_px);
        let ty = f64::from(cfg.image_height) / 2.0 + rng.random_range(-cfg.max_shift_px..=cfg.max_shift_px);
        let (s, c) = roll.sin_cos();
        let center = [1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0];
        let perspective = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, px, py, 1.0];
        let affine = [scale * c, -scale * s, tx, scale * s, scale * c, ty, 0.0, 0.0, 1.0];
        let h = matmul(&affine, &matmul(&perspective, &center));
        let camera = CameraModel::new(h, cfg.image_width, cfg.image_height)?;
        let inside = camera.board_corners_px()?.iter().all(|&(x, y)| {
            x >= margin && y >= margin && x <= f64::from(cfg.image_width) - margin && y <= f64::from(cfg.image_height) - margin
        });
        if inside {
            return Ok(camera);
        }
    }
    Err(SynthError::Infeasible(format!(
        "board does not fit a {}x{} image within {} retries",
        cfg.image_width, cfg.image_height, cfg.max_retries
    )))
}

/// Closed outline of a fish in its body frame: tips at `(+-length/2, 0)`.
fn fish_outline(length: f64, aspect: f64, exponent: f64, bend: f64) -> Vec<(f64, f64)> {
    let a = length / 2.0;
    let b = aspect * length / 2.0;
    (0..OUTLINE_POINTS)
        .map(|i| {
            let t = std::f64::consts::TAU * i as f64 / OUTLINE_POINTS as f64;
            let (st, ct) = t.sin_cos();
            let x = a * ct.signum() * ct.abs().powf(2.0 / exponent);
            let y = b * st.signum() * st.abs().powf(2.0 / exponent);
            let u = x / a;
            (x, y + bend * (1.0 - u * u))
        })
        .collect()
}

struct PlacedFish {
    outline_cm: Vec<(f64, f64)>,
    truth: FishTruth,
}

fn place_fish(
    cfg: &GeneratorConfig,
    camera: &CameraModel,
    species_id: usize,
    length: f64,
    rng: &mut ChaCha8Rng,
    placed: &[PlacedFish],
) -> Result<Option<PlacedFish>, SynthError> {
    let style = &cfg.species[species_id];
    let aspect = style.aspect * rng.random_range(1.0 - cfg.aspect_jitter..=1.0 + cfg.aspect_jitter);
    let bend = rng.random_range(-cfg.max_bend..=cfg.max_bend) * length;
    let flip = if rng.random_bool(0.5) { std::f64::consts::PI } else { 0.0 };
    let angle = rng.random_range(-cfg.max_fish_angle_deg..=cfg.max_fish_angle_deg).to_radians() + flip;
    let body = fish_outline(length, aspect, style.exponent, bend);
    let (s, c) = angle.sin_cos();
    let rotated: Vec<(f64, f64)> = body.iter().map(|&(x, y)| (c * x - s * y, s * x + c * y)).collect();
    let (xlo, xhi, ylo, yhi) = rotated.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
    );
    let (cx_lo, cx_hi) = (
        (-cfg.overhang_cm - xlo).max(0.0),
        (BOARD_WIDTH_CM + cfg.overhang_cm - xhi).min(BOARD_WIDTH_CM),
    );
    let (cy_lo, cy_hi) = (FISH_Y_MIN_CM - ylo, FISH_Y_MAX_CM - yhi);
    if cx_lo > cx_hi || cy_lo > cy_hi {
        return Ok(None);
    }
    let center = (rng.random_range(cx_lo..=cx_hi), rng.random_range(cy_lo..=cy_hi));
    let outline_cm: Vec<(f64, f64)> = rotated.iter().map(|&(x, y)| (x + center.0, y + center.1)).collect();

    let gap = cfg.fish_gap_cm;
    let bbox_cm = (xlo + center.0 - gap, xhi + center.0 + gap, ylo + center.1 - gap, yhi + center.1 + gap);
    for other in placed {
        if polygons_close(&outline_cm, bbox_cm, &other.outline_cm, gap) {
            return Ok(None);
        }
    }
    let margin = cfg.frame_margin_px;
    let mut poly_px = Vec::with_capacity(outline_cm.len());
    for &p in &outline_cm {
        let (x, y) = camera.project(p)?;
        if x < margin || y < margin || x > f64::from(camera.width) - margin || y > f64::from(camera.height) - margin {
            return Ok(None);
        }
        poly_px.push((x, y));
    }
    let mask = match mask_from_polygon(&poly_px, camera.width, camera.height) {
        Ok(m) => m,
        Err(GeomError::EmptyMask) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    if placed.iter().any(|o| o.truth.mask.intersection_area(&mask) > 0) {
        return Ok(None);
    }
    Ok(Some(PlacedFish { outline_cm, truth: FishTruth { species_id, length_cm: length, mask, occlusion: 0.0 } }))
}

/// True when two outlines overlap or have vertices closer than `gap`.
fn polygons_close(a: &[(f64, f64)], a_box: (f64, f64, f64, f64), b: &[(f64, f64)], gap: f64) -> bool {
    let b_box = b.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(x0, x1, y0, y1), &(x, y)| (x0.min(x), x1.max(x), y0.min(y), y1.max(y)),
    );
    if a_box.1 < b_box.0 || b_box.1 < a_box.0 || a_box.3 < b_box.2 || b_box.3 < a_box.2 {
        return false;
    }
    let inside = |p: (f64, f64), poly: &[(f64, f64)]| {
        let mut inside = false;
        let mut j = poly.len() - 1;
        for i in 0..poly.len() {
            let (xi, yi) = poly[i];
            let (xj, yj) = poly[j];
            if (yi > p.1) != (yj > p.1) && p.0 < (xj - xi) * (p.1 - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    };
    if a.iter().any(|&p| inside(p, b)) || b.iter().any(|&p| inside(p, a)) {
        return true;
    }
    let g2 = gap * gap;
    a.iter().any(|&p| b.iter().any(|&q| (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2) < g2))
}

fn sample_occluder(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Occluder {
    let (w, h) = (f64::from(cfg.image_width), f64::from(cfg.image_height));
    let thickness = rng.random_range(cfg.occluder_width_px[0]..=cfg.occluder_width_px[1].max(cfg.occluder_width_px[0]));
    // mostly vertical strips crossing the whole frame
    let x_top = rng.random_range(0.0..w);
    let x_bottom = x_top + rng.random_range(-0.25 * h..0.25 * h);
    let half = thickness / 2.0;
    Occluder {
        polygon_px: vec![[x_top - half, -1.0], [x_top + half, -1.0], [x_bottom + half, h + 1.0], [x_bottom - half, h + 1.0]],
    }
}

fn occluder_mask(o: &Occluder, width: u32, height: u32) -> Option<Mask> {
    let poly: Vec<(f64, f64)> = o.polygon_px.iter().map(|p| (p[0], p[1])).collect();
    mask_from_polygon(&poly, width, height).ok()
}

fn occlusion_fraction(mask: &Mask, occluders: &[Mask]) -> f64 {
    if occluders.is_empty() || mask.is_empty() {
        return 0.0;
    }
    let mut bits = vec![false; mask.width() as usize * mask.height() as usize];
    for o in occluders {
        for &(s, l) in o.runs() {
            bits[s as usize..(s + l) as usize].fill(true);
        }
    }
    let covered: u64 = mask
        .runs()
        .iter()
        .map(|&(s, l)| bits[s as usize..(s + l) as usize].iter().filter(|&&b| b).count() as u64)
        .sum();
    covered as f64 / mask.area() as f64
}

/// Sample one scene. Deterministic for `(config, seed)`.
pub fn sample_scene(cfg: &GeneratorConfig, seed: u64) -> Result<SceneTruth, SynthError> {
    cfg.validate()?;
    let mut rng = rng(seed);
    let camera = sample_camera(cfg, &mut rng)?;

    let mut markers = Vec::with_capacity(MARKER_LAYOUT.len());
    for (class, r) in MARKER_LAYOUT {
        let corners = [(r[0], r[1]), (r[2], r[1]), (r[2], r[3]), (r[0], r[3])];
        let poly: Vec<(f64, f64)> = corners.iter().map(|&p| camera.project(p)).collect::<Result<_, _>>()?;
        let mask = mask_from_polygon(&poly, camera.width, camera.height)?;
        markers.push(MarkerTruth { class, rect_cm: r, mask, occlusion: 0.0 });
    }

    let n_fish = rng.random_range(cfg.fish_count[0]..=cfg.fish_count[1]);
    let mut fish: Vec<PlacedFish> = Vec::new();
    let mut attempts = 0;
    'scene: loop {
        attempts += 1;
        if attempts > cfg.max_retries {
            return Err(SynthError::Infeasible(format!(
                "could not place {n_fish} fish on the board within {} retries",
                cfg.max_retries
            )));
        }
        fish.clear();
        let species: Vec<usize> = if cfg.distinct_species {
            let mut ids: Vec<usize> = (0..cfg.species.len()).collect();
            ids.shuffle(&mut rng);
            ids.truncate(n_fish);
            ids
        } else {
            (0..n_fish).map(|_| rng.random_range(0..cfg.species.len())).collect()
        };
        for &sp in &species {
            let length = cfg.length.sample(&mut rng);
            let mut placed = None;
            for _ in 0..cfg.max_retries {
                placed = place_fish(cfg, &camera, sp, length, &mut rng, &fish)?;
                if placed.is_some() {
                    break;
                }
            }
            match placed {
                Some(p) => fish.push(p),
                None => continue 'scene,
            }
        }
        break;
    }
    let mut fish: Vec<FishTruth> = fish.into_iter().map(|p| p.truth).collect();

    let occluders: Vec<Occluder> =
        if rng.random_bool(cfg.occlusion_prob) { vec![sample_occluder(cfg, &mut rng)] } else { Vec::new() };
    let occ_masks: Vec<Mask> = occluders.iter().filter_map(|o| occluder_mask(o, camera.width, camera.height)).collect();
    for m in &mut markers {
        m.occlusion = occlusion_fraction(&m.mask, &occ_masks);
    }
    for f in &mut fish {
        f.occlusion = occlusion_fraction(&f.mask, &occ_masks);
    }

    let boxes: Vec<_> = fish.iter().map(|f| mask_bbox(&f.mask)).collect::<Result<_, _>>()?;
    let mut annotation_order = if boxes.is_empty() { Vec::new() } else { canonical_order(&boxes).expect("non-empty") };
    if annotation_order.len() > 1 && rng.random_bool(cfg.annotation_shuffle_prob) {
        annotation_order.shuffle(&mut rng);
    }

    Ok(SceneTruth { camera, markers, fish, annotation_order, occluders, seed })
}

/// Colors and photometric noise used when painting a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LightingConfig {
    pub background_rgb: [u8; 3],
    pub board_rgb: [u8; 3],
    pub yellow_rgb: [u8; 3],
    pub blue_rgb: [u8; 3],
    pub occluder_rgb: [u8; 3],
    /// Per-pixel Gaussian noise, 8-bit units. Zero disables noise.
    pub pixel_noise: f64,
    /// Per-scene multiplicative brightness jitter: factor in `[1 - j, 1 + j]`.
    pub brightness_jitter: f64,
}

impl Default for LightingConfig {
    fn default() -> Self {
        Self {
            background_rgb: [52, 58, 66],
            board_rgb: [232, 232, 226],
            yellow_rgb: [240, 200, 20],
            blue_rgb: [20, 70, 210],
            occluder_rgb: [85, 80, 78],
            pixel_noise: 4.0,
            brightness_jitter: 0.1,
        }
    }
}

impl LightingConfig {
    pub fn noise_free() -> Self {
        Self { pixel_noise: 0.0, brightness_jitter: 0.0, ..Self::default() }
    }

    pub fn marker_rgb(&self, class: ObjectClass) -> [u8; 3] {
        match class {
            ObjectClass::YellowBox => self.yellow_rgb,
            ObjectClass::BlueBox => self.blue_rgb,
            ObjectClass::Fish => self.board_rgb,
        }
    }
}

/// Paint a scene. Noise draws from a stream derived from the scene seed.
pub fn render(scene: &SceneTruth, lighting: &LightingConfig, palette: &[SpeciesStyle]) -> Result<Raster, SynthError> {
    let (w, h) = (scene.width(), scene.height());
    let mut img = Raster::filled(w, h, lighting.background_rgb);
    img.paint_mask(&scene.board_mask()?, |_, _| lighting.board_rgb);
    for m in &scene.markers {
        let c = lighting.marker_rgb(m.class);
        img.paint_mask(&m.mask, |_, _| c);
    }
    for f in &scene.fish {
        let style = palette
            .get(f.species_id)
            .ok_or_else(|| SynthError::Config(format!("species {} missing from palette", f.species_id)))?;
        let c = hsv_to_rgb(style.hue_deg, style.saturation, style.value);
        img.paint_mask(&f.mask, |_, _| c);
    }
    for o in &scene.occluders {
        if let Some(m) = occluder_mask(o, w, h) {
            img.paint_mask(&m, |_, _| lighting.occluder_rgb);
        }
    }

    if lighting.pixel_noise > 0.0 || lighting.brightness_jitter > 0.0 {
        let mut rng = rng(stage_seed(scene.seed, "render", 0));
        let gain = if lighting.brightness_jitter > 0.0 {
            rng.random_range(1.0 - lighting.brightness_jitter..=1.0 + lighting.brightness_jitter)
        } else {
            1.0
        };
        let noise = (lighting.pixel_noise > 0.0).then(|| Normal::new(0.0, lighting.pixel_noise).expect("positive sigma"));
        for v in img.rgb_mut() {
            let n = noise.map_or(0.0, |d| d.sample(&mut rng));
            *v = (f64::from(*v) * gain + n).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(img)
}

/// Header line of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub master_seed: u64,
    pub n_scenes: u64,
    pub generator: GeneratorConfig,
    pub lighting: LightingConfig,
}

pub const MANIFEST_FORMAT: &str = "fishnet-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Per-scene seed; independent of generation order.
pub fn scene_seed(master_seed: u64, scene_index: u64) -> u64 {
    stable_hash(master_seed, scene_index)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub manifest_path: PathBuf,
    pub n_scenes: u64,
    pub n_fish: u64,
}

const GENERATE_CHUNK: u64 = 64;

/// Generate `n_scenes` scenes into `out_dir`: `manifest.jsonl` plus one P6
/// image per scene under `images/`. Runs on the current rayon pool; output is
/// identical for any thread count.
pub fn generate_dataset(
    cfg: &GeneratorConfig,
    lighting: &LightingConfig,
    n_scenes: u64,
    master_seed: u64,
    out_dir: &Path,
) -> Result<DatasetSummary, SynthError> {
    cfg.validate()?;
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let file = File::create(&manifest_path).map_err(io_err(&manifest_path))?;
    let mut out = BufWriter::new(file);
    let header = ManifestHeader {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        master_seed,
        n_scenes,
        generator: cfg.clone(),
        lighting: lighting.clone(),
    };
    let line = serde_json::to_string(&header).expect("header serializes");
    writeln!(out, "{line}").map_err(io_err(&manifest_path))?;

    let mut n_fish = 0u64;
    let mut start = 0u64;
    while start < n_scenes {
        let end = (start + GENERATE_CHUNK).min(n_scenes);
        let records: Vec<SceneRecord> = (start..end)
            .into_par_iter()
            .map(|i| {
                let scene = sample_scene(cfg, scene_seed(master_seed, i))?;
                let rel = format!("images/scene_{i:06}.ppm");
                render(&scene, lighting, &cfg.species)?.write_ppm(&out_dir.join(&rel))?;
                Ok(SceneRecord::new(i, rel, &scene))
            })
            .collect::<Result<_, SynthError>>()?;
        for r in &records {
            n_fish += r.fish.len() as u64;
            let line = serde_json::to_string(r).expect("record serializes");
            writeln!(out, "{line}").map_err(io_err(&manifest_path))?;
        }
        start = end;
    }
    out.flush().map_err(io_err(&manifest_path))?;
    Ok(DatasetSummary { manifest_path, n_scenes, n_fish })
}

/// Streaming reader over a manifest. Yields the raw text of each scene line
/// so callers can decide how to treat corrupt records.
pub struct ManifestReader {
    pub header: ManifestHeader,
    pub dir: PathBuf,
    lines: std::io::Lines<std::io::BufReader<File>>,
    path: PathBuf,
}

impl ManifestReader {
    pub fn open(dataset_dir: &Path) -> Result<Self, SynthError> {
        use std::io::BufRead;
        let path = dataset_dir.join(MANIFEST_FILE);
        let file = File::open(&path).map_err(io_err(&path))?;
        let mut lines = std::io::BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| SynthError::Manifest { path: path.display().to_string(), message: "empty manifest".into() })?
            .map_err(io_err(&path))?;
        let header: ManifestHeader = serde_json::from_str(&first)
            .map_err(|e| SynthError::Manifest { path: path.display().to_string(), message: format!("bad header: {e}") })?;
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(SynthError::Manifest {
                path: path.display().to_string(),
                message: format!("unsupported manifest {} v{}", header.format, header.version),
            });
        }
        Ok(Self { header, dir: dataset_dir.to_path_buf(), lines, path })
    }

    /// Next non-blank scene line.
    pub fn next_line(&mut self) -> Option<Result<String, SynthError>> {
        loop {
            match self.lines.next()? {
                Ok(l) if l.trim().is_empty() => continue,
                Ok(l) => return Some(Ok(l)),
                Err(e) => return Some(Err(io_err(&self.path)(e))),
            }
        }
    }
}
