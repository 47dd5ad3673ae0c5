//! Fiducial-marker scale estimation and the per-fish feature vector fed to
//! the length regressor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{mask_principal_length, GeomError};
use crate::raster::Raster;
use crate::types::{Detection, ObjectClass};

/// Known long side of a color marker.
pub const MARKER_LENGTH_CM: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScaleError {
    #[error("no fiducial marker detected")]
    NoFiducial,
    #[error("detection is not a fish")]
    NotFish,
    #[error(transparent)]
    Geom(#[from] GeomError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleEstimate {
    pub cm_per_pixel: f64,
    pub n_markers_used: usize,
    /// `(max - min) / median` of the per-marker estimates.
    pub dispersion: f64,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Scale from markers whose principal extent is `10 cm`.
pub fn estimate_scale(markers: &[Detection]) -> Result<ScaleEstimate, ScaleError> {
    estimate_scale_with_reference(markers, MARKER_LENGTH_CM)
}

/// Median over markers of `reference_cm / principal_length_px`. Non-marker
/// detections in the list are ignored.
pub fn estimate_scale_with_reference(markers: &[Detection], reference_cm: f64) -> Result<ScaleEstimate, ScaleError> {
    let mut per_marker = Vec::new();
    for d in markers.iter().filter(|d| d.class.is_marker()) {
        per_marker.push(reference_cm / mask_principal_length(&d.mask)?);
    }
    if per_marker.is_empty() {
        return Err(ScaleError::NoFiducial);
    }
    let per_marker = sorted(per_marker);
    let med = median(&per_marker);
    let dispersion = (per_marker[per_marker.len() - 1] - per_marker[0]) / med;
    Ok(ScaleEstimate { cm_per_pixel: med, n_markers_used: per_marker.len(), dispersion })
}

/// The eight regression features, in fixed column order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthFeatures {
    pub box_count: f64,
    pub median_box_len_px: f64,
    pub mean_box_len_px: f64,
    pub median_box_segment_len_px: f64,
    pub max_box_segment_len_px: f64,
    pub fish_confidence: f64,
    pub fish_bbox_len_px: f64,
    pub fish_mask_len_px: f64,
}

impl LengthFeatures {
    pub const COLUMNS: [&'static str; 8] = [
        "box_count",
        "median_box_len_px",
        "mean_box_len_px",
        "median_box_segment_len_px",
        "max_box_segment_len_px",
        "fish_confidence",
        "fish_bbox_len_px",
        "fish_mask_len_px",
    ];

    pub fn to_array(&self) -> [f64; 8] {
        [
            self.box_count,
            self.median_box_len_px,
            self.mean_box_len_px,
            self.median_box_segment_len_px,
            self.max_box_segment_len_px,
            self.fish_confidence,
            self.fish_bbox_len_px,
            self.fish_mask_len_px,
        ]
    }

    pub fn from_array(a: [f64; 8]) -> Self {
        Self {
            box_count: a[0],
            median_box_len_px: a[1],
            mean_box_len_px: a[2],
            median_box_segment_len_px: a[3],
            max_box_segment_len_px: a[4],
            fish_confidence: a[5],
            fish_bbox_len_px: a[6],
            fish_mask_len_px: a[7],
        }
    }
}

/// Image-level marker statistics shared by every fish row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarkerFeatures {
    pub count: usize,
    pub median_box_len: f64,
    pub mean_box_len: f64,
    pub median_segment_len: f64,
    pub max_segment_len: f64,
}

/// Box length is the longer bbox side; segment length is the mask's
/// principal length.
pub fn marker_features(detections: &[Detection]) -> Result<MarkerFeatures, ScaleError> {
    let markers: Vec<&Detection> = detections.iter().filter(|d| d.class.is_marker()).collect();
    if markers.is_empty() {
        return Err(ScaleError::NoFiducial);
    }
    let box_lens = sorted(markers.iter().map(|d| f64::from(d.bbox.major_side())).collect());
    let seg_lens = sorted(markers.iter().map(|d| mask_principal_length(&d.mask)).collect::<Result<_, _>>()?);
    Ok(MarkerFeatures {
        count: markers.len(),
        median_box_len: median(&box_lens),
        mean_box_len: box_lens.iter().sum::<f64>() / box_lens.len() as f64,
        median_segment_len: median(&seg_lens),
        max_segment_len: seg_lens[seg_lens.len() - 1],
    })
}

pub fn fish_features(markers: &MarkerFeatures, fish: &Detection) -> Result<LengthFeatures, ScaleError> {
    if fish.class != ObjectClass::Fish {
        return Err(ScaleError::NotFish);
    }
    Ok(LengthFeatures {
        box_count: markers.count as f64,
        median_box_len_px: markers.median_box_len,
        mean_box_len_px: markers.mean_box_len,
        median_box_segment_len_px: markers.median_segment_len,
        max_box_segment_len_px: markers.max_segment_len,
        fish_confidence: fish.confidence,
        fish_bbox_len_px: f64::from(fish.bbox.major_side()),
        fish_mask_len_px: mask_principal_length(&fish.mask)?,
    })
}

/// One feature row per fish detection, keyed by its index in `detections`.
pub fn length_features(detections: &[Detection]) -> Result<Vec<(usize, LengthFeatures)>, ScaleError> {
    let markers = marker_features(detections)?;
    detections
        .iter()
        .enumerate()
        .filter(|(_, d)| d.class == ObjectClass::Fish)
        .map(|(i, d)| Ok((i, fish_features(&markers, d)?)))
        .collect()
}

/// Sub-image under the detection's box; with `zero_outside` every pixel not
/// covered by the mask is black.
pub fn crop_fish(image: &Raster, d: &Detection, zero_outside: bool) -> Result<Raster, ScaleError> {
    if d.class != ObjectClass::Fish {
        return Err(ScaleError::NotFish);
    }
    let mut crop = image.crop(&d.bbox)?;
    if zero_outside {
        let local = d.mask.crop(&d.bbox)?;
        for y in 0..crop.height() {
            for x in 0..crop.width() {
                if !local.contains(x, y) {
                    crop.set_pixel(x, y, [0, 0, 0]);
                }
            }
        }
    }
    Ok(crop)
}
