//! Synthetic fish-measurement pipeline: scene generation, detection, scale
//! recovery, length regression, species classification, annotation curation
//! and evaluation.

pub mod classify;
pub mod curate;
pub mod detect;
pub mod evalkit;
pub mod forest;
pub mod geom;
pub mod pipeline;
pub mod plot;
pub mod raster;
pub mod scale;
pub mod seed;
pub mod synthgen;
pub mod types;

pub use geom::{mask_bbox, mask_from_polygon, mask_iou, mask_principal_length, BBox, GeomError, Mask};
pub use raster::Raster;
pub use types::{Detection, FishRecord, ObjectClass};
