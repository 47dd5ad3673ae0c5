//! Domain records passed between pipeline stages.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{mask_bbox, BBox, GeomError, Mask};

pub const MIN_FISH_LENGTH_CM: f64 = 10.0;
pub const MAX_FISH_LENGTH_CM: f64 = 250.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Fish,
    YellowBox,
    BlueBox,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [ObjectClass::Fish, ObjectClass::YellowBox, ObjectClass::BlueBox];

    pub fn is_marker(self) -> bool {
        matches!(self, ObjectClass::YellowBox | ObjectClass::BlueBox)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectClass::Fish => "fish",
            ObjectClass::YellowBox => "yellow_box",
            ObjectClass::BlueBox => "blue_box",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecordError {
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("confidence {0} outside [0, 1]")]
    Confidence(f64),
    #[error("fish length {0} cm outside [10, 250]")]
    Length(f64),
}

/// One detected object instance. The bbox is always the tight box of the mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDetection")]
pub struct Detection {
    pub class: ObjectClass,
    pub confidence: f64,
    pub bbox: BBox,
    pub mask: Mask,
}

#[derive(Deserialize)]
struct RawDetection {
    class: ObjectClass,
    confidence: f64,
    bbox: BBox,
    mask: Mask,
}

impl TryFrom<RawDetection> for Detection {
    type Error = RecordError;

    fn try_from(raw: RawDetection) -> Result<Self, Self::Error> {
        let det = Detection::new(raw.class, raw.mask, raw.confidence)?;
        if det.bbox != raw.bbox {
            return Err(RecordError::Geom(GeomError::InvalidRuns("bbox does not match mask".into())));
        }
        Ok(det)
    }
}

impl Detection {
    pub fn new(class: ObjectClass, mask: Mask, confidence: f64) -> Result<Self, RecordError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(RecordError::Confidence(confidence));
        }
        let bbox = mask_bbox(&mask)?;
        Ok(Self { class, confidence, bbox, mask })
    }
}

/// Annotated fish: species index and length in centimeters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FishRecord {
    pub species_id: usize,
    pub length_cm: f64,
}

impl FishRecord {
    pub fn new(species_id: usize, length_cm: f64) -> Result<Self, RecordError> {
        if !(MIN_FISH_LENGTH_CM..=MAX_FISH_LENGTH_CM).contains(&length_cm) {
            return Err(RecordError::Length(length_cm));
        }
        Ok(Self { species_id, length_cm })
    }
}
