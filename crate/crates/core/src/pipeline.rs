//! End-to-end processing of a generated dataset: detection, scale and length
//! features, length regression, species classification, label curation and
//! report aggregation.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classify::{detection_descriptor, fit_softmax, predict_posterior, topk_hit, ClassifyError, CropMode, SoftmaxModel, TrainParams};
use crate::curate::{assign_labels, canonical_order, AssignMethod, CurateError, DEFAULT_EPSILON};
use crate::detect::{color_detect_markers, oracle_detect, ColorConfig, DetectError, DetectorNoise};
use crate::evalkit::{count_confusion, iou_summary, ks_distance, match_instances, regression_metrics, CountConfusion, DecileBin, IouSummary, DEFAULT_IOU_THRESHOLD};
use crate::forest::{fit_forest, fold_assignment, ForestError, ForestParams, RandomForest, Row};
use crate::geom::{BBox, Mask};
use crate::plot::{count_heatmap_svg, histogram_overlay_svg, scatter_svg};
use crate::raster::{Raster, RasterError};
use crate::scale::{estimate_scale_with_reference, length_features, ScaleError};
use crate::seed::stage_seed;
use crate::synthgen::{ManifestReader, SceneRecord, SceneTruth, SynthError};
use crate::types::{Detection, ObjectClass};

pub const RESULTS_FILE: &str = "results.jsonl";
pub const RESULTS_FORMAT: &str = "fishnet-results";
pub const REPORT_FORMAT: &str = "fishnet-report";
pub const FORMAT_VERSION: u32 = 1;
const SCENE_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("data: {0}")]
    Data(String),
    #[error("{corrupt} of {total} manifest lines are corrupt (limit {limit:.0}%)")]
    TooManyCorrupt { corrupt: usize, total: usize, limit: f64 },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
}

impl PipelineError {
    /// Whether the failure comes from configuration rather than input data.
    pub fn is_config(&self) -> bool {
        matches!(self, PipelineError::Config(_) | PipelineError::Detect(_))
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    /// Truth masks degraded to the configured IoU targets.
    #[default]
    Oracle,
    /// Oracle fish, markers found by color thresholding of the image.
    OracleFishColorMarkers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset_dir: Option<PathBuf>,
    pub length_model: Option<PathBuf>,
    pub species_model: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
    pub detector: DetectorKind,
    pub noise: DetectorNoise,
    pub color: ColorConfig,
    /// Physical principal length of a marker mask; the 10 × 3 cm marker's
    /// farthest pixel pair runs along its diagonal.
    pub marker_reference_cm: f64,
    pub forest: ForestParams,
    pub classifier: TrainParams,
    pub crop_mode: CropMode,
    pub epsilon: f64,
    pub iou_threshold: f64,
    pub folds: usize,
    pub top_k: usize,
    pub max_corrupt_fraction: f64,
    pub seed: u64,
    /// Worker threads; 0 uses all cores. Never affects results.
    pub threads: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset_dir: None,
            length_model: None,
            species_model: None,
            report_dir: None,
            detector: DetectorKind::Oracle,
            noise: DetectorNoise::none(),
            color: ColorConfig::default(),
            marker_reference_cm: 10f64.hypot(3.0),
            forest: ForestParams::default(),
            classifier: TrainParams::default(),
            crop_mode: CropMode::MaskZeroed,
            epsilon: DEFAULT_EPSILON,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            folds: 5,
            top_k: 5,
            max_corrupt_fraction: 0.1,
            seed: 0,
            threads: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.noise.validate()?;
        self.color.validate()?;
        self.forest.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        let bad = |m: &str| Err(PipelineError::Config(m.into()));
        if !(self.marker_reference_cm > 0.0 && self.marker_reference_cm.is_finite()) {
            return bad("marker_reference_cm must be positive");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)");
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return bad("iou_threshold must lie in (0, 1]");
        }
        if self.folds < 2 {
            return bad("folds must be at least 2");
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.max_corrupt_fraction) {
            return bad("max_corrupt_fraction must lie in [0, 1]");
        }
        if !(self.classifier.learning_rate > 0.0 && self.classifier.l2 >= 0.0) {
            return bad("classifier learning_rate must be positive and l2 non-negative");
        }
        Ok(())
    }

    /// SHA-256 over the result-affecting settings (paths and thread count
    /// excluded).
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(&self.hashed_view()).expect("config serializes");
        hex::encode(Sha256::digest(canonical))
    }

    fn hashed_view(&self) -> PipelineConfig {
        PipelineConfig { dataset_dir: None, length_model: None, species_model: None, report_dir: None, threads: 0, ..self.clone() }
    }

    /// Run `f` on a rayon pool of the configured size.
    pub fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T, PipelineError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
        Ok(pool.install(f))
    }
}

/// Everything measured on one scene before any model is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FishObservation {
    pub bbox: BBox,
    pub confidence: f64,
    pub truth_index: Option<usize>,
    pub iou: Option<f64>,
    pub truth_length_cm: Option<f64>,
    pub truth_species: Option<usize>,
    pub features: Option<Row>,
    pub descriptor: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObservation {
    pub scene_id: u64,
    pub no_fiducial: bool,
    /// Median marker-based scale; `None` without a fiducial.
    pub cm_per_pixel: Option<f64>,
    pub n_true_fish: usize,
    pub marker_ious: Vec<(ObjectClass, f64)>,
    pub fish: Vec<FishObservation>,
    /// Annotated species in annotation order.
    pub labels: Vec<usize>,
    /// Ground-truth pairing `label -> detected fish`, when every truth fish
    /// was matched.
    pub truth_perm: Option<Vec<usize>>,
    /// Reading order of the detected fish.
    pub canonical: Vec<usize>,
}

impl SceneObservation {
    pub fn fish_ious(&self) -> impl Iterator<Item = f64> + '_ {
        self.fish.iter().filter_map(|f| f.iou)
    }
}

fn run_detector(truth: &SceneTruth, image: Option<&Raster>, cfg: &PipelineConfig, seed: u64) -> Result<Vec<Detection>, PipelineError> {
    let mut dets = oracle_detect(truth, &cfg.noise, seed)?;
    if cfg.detector == DetectorKind::OracleFishColorMarkers {
        let image = image.ok_or_else(|| PipelineError::Config("color marker detection needs the scene image".into()))?;
        dets.retain(|d| d.class == ObjectClass::Fish);
        dets.extend(color_detect_markers(image, &cfg.color)?);
    }
    Ok(dets)
}

/// Detect, match against truth and compute length features and (given an
/// image) appearance descriptors for every detected fish.
pub fn observe_scene(scene_id: u64, truth: &SceneTruth, image: Option<&Raster>, cfg: &PipelineConfig) -> Result<SceneObservation, PipelineError> {
    let dets = run_detector(truth, image, cfg, stage_seed(cfg.seed, "detect", scene_id))?;
    let fish_dets: Vec<&Detection> = dets.iter().filter(|d| d.class == ObjectClass::Fish).collect();

    let data_err = |e: String| PipelineError::Data(format!("scene {scene_id}: {e}"));
    let pred_masks: Vec<&Mask> = fish_dets.iter().map(|d| &d.mask).collect();
    let truth_masks: Vec<&Mask> = truth.fish.iter().map(|f| &f.mask).collect();
    let fish_match = match_instances(&pred_masks, &truth_masks, cfg.iou_threshold).map_err(|e| data_err(e.to_string()))?;
    let mut matched: Vec<Option<(usize, f64)>> = vec![None; fish_dets.len()];
    for p in &fish_match.pairs {
        matched[p.pred] = Some((p.truth, p.iou));
    }

    let mut marker_ious = Vec::new();
    for class in [ObjectClass::YellowBox, ObjectClass::BlueBox] {
        let pm: Vec<&Mask> = dets.iter().filter(|d| d.class == class).map(|d| &d.mask).collect();
        let tm: Vec<&Mask> = truth.markers.iter().filter(|m| m.class == class).map(|m| &m.mask).collect();
        let m = match_instances(&pm, &tm, cfg.iou_threshold).map_err(|e| data_err(e.to_string()))?;
        marker_ious.extend(m.pairs.iter().map(|p| (class, p.iou)));
    }

    let cm_per_pixel = match estimate_scale_with_reference(&dets, cfg.marker_reference_cm) {
        Ok(est) => Some(est.cm_per_pixel),
        Err(ScaleError::NoFiducial) => None,
        Err(e) => return Err(data_err(e.to_string())),
    };
    let features = match length_features(&dets) {
        Ok(rows) => Some(rows),
        Err(ScaleError::NoFiducial) => None,
        Err(e) => return Err(data_err(e.to_string())),
    };
    let feature_of = |det_idx: usize| features.as_ref().and_then(|rows| rows.iter().find(|(i, _)| *i == det_idx)).map(|(_, f)| f.to_array());
    let det_indices: Vec<usize> = dets.iter().enumerate().filter(|(_, d)| d.class == ObjectClass::Fish).map(|(i, _)| i).collect();

    let mut fish = Vec::with_capacity(fish_dets.len());
    for (k, d) in fish_dets.iter().enumerate() {
        let descriptor = match image {
            Some(img) => Some(detection_descriptor(img, d, cfg.crop_mode)?.to_vec()),
            None => None,
        };
        let truth_fish = matched[k].map(|(t, _)| &truth.fish[t]);
        fish.push(FishObservation {
            bbox: d.bbox,
            confidence: d.confidence,
            truth_index: matched[k].map(|(t, _)| t),
            iou: matched[k].map(|(_, iou)| iou),
            truth_length_cm: truth_fish.map(|f| f.length_cm),
            truth_species: truth_fish.map(|f| f.species_id),
            features: feature_of(det_indices[k]),
            descriptor,
        });
    }

    let mut det_of_truth = vec![None; truth.fish.len()];
    for (k, m) in matched.iter().enumerate() {
        if let Some((t, _)) = m {
            det_of_truth[*t] = Some(k);
        }
    }
    let truth_perm = (fish.len() == truth.fish.len())
        .then(|| truth.annotation_order.iter().map(|&t| det_of_truth[t]).collect::<Option<Vec<usize>>>())
        .flatten();
    let boxes: Vec<BBox> = fish.iter().map(|f| f.bbox).collect();
    let canonical = if boxes.is_empty() { Vec::new() } else { canonical_order(&boxes).expect("non-empty") };

    Ok(SceneObservation {
        scene_id,
        no_fiducial: cm_per_pixel.is_none(),
        cm_per_pixel,
        n_true_fish: truth.fish.len(),
        marker_ious,
        fish,
        labels: truth.annotation_labels(),
        truth_perm,
        canonical,
    })
}

/// Observations for a dataset directory, in manifest order.
#[derive(Debug, Clone)]
pub struct DatasetObservations {
    pub dataset_seed: u64,
    pub n_species: usize,
    pub scenes: Vec<SceneObservation>,
    pub n_lines: usize,
    pub corrupt: Vec<String>,
}

fn scene_id_hint(line: &str) -> String {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()
        .and_then(|v| v.get("scene_id").and_then(|s| s.as_u64()))
        .map_or_else(|| "unknown".to_string(), |id| id.to_string())
}

fn observe_line(line: &str, dir: &Path, cfg: &PipelineConfig, with_images: bool) -> Result<SceneObservation, String> {
    let record: SceneRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let truth = record.to_scene().map_err(|e| e.to_string())?;
    let image = if with_images || cfg.detector == DetectorKind::OracleFishColorMarkers {
        let img = Raster::read_ppm(&dir.join(&record.image_path)).map_err(|e: RasterError| e.to_string())?;
        if (img.width(), img.height()) != (record.width, record.height) {
            return Err("image size differs from record".into());
        }
        Some(img)
    } else {
        None
    };
    observe_scene(record.scene_id, &truth, image.as_ref(), cfg).map_err(|e| e.to_string())
}

/// Stream the manifest in fixed-size chunks, observing each chunk in
/// parallel. Corrupt lines are logged and skipped; too many abort.
pub fn observe_dataset(dir: &Path, cfg: &PipelineConfig, with_images: bool) -> Result<DatasetObservations, PipelineError> {
    let mut reader = ManifestReader::open(dir)?;
    let mut scenes = Vec::new();
    let mut corrupt = Vec::new();
    let mut n_lines = 0;
    loop {
        let mut chunk = Vec::with_capacity(SCENE_CHUNK);
        while chunk.len() < SCENE_CHUNK {
            match reader.next_line() {
                Some(line) => chunk.push(line?),
                None => break,
            }
        }
        if chunk.is_empty() {
            break;
        }
        n_lines += chunk.len();
        let results: Vec<Result<SceneObservation, String>> =
            chunk.par_iter().map(|line| observe_line(line, &reader.dir, cfg, with_images)).collect();
        for (line, r) in chunk.iter().zip(results) {
            match r {
                Ok(o) => scenes.push(o),
                Err(e) => {
                    let id = scene_id_hint(line);
                    warn!("skipping corrupt scene {id}: {e}");
                    corrupt.push(id);
                }
            }
        }
    }
    if n_lines > 0 && corrupt.len() as f64 > cfg.max_corrupt_fraction * n_lines as f64 {
        return Err(PipelineError::TooManyCorrupt { corrupt: corrupt.len(), total: n_lines, limit: cfg.max_corrupt_fraction * 100.0 });
    }
    scenes.sort_by_key(|s| s.scene_id);
    Ok(DatasetObservations {
        dataset_seed: reader.header.master_seed,
        n_species: reader.header.generator.species.len(),
        scenes,
        n_lines,
        corrupt,
    })
}

/// Length training rows: matched fish in scenes with a fiducial.
pub fn length_rows<'a>(scenes: impl IntoIterator<Item = &'a SceneObservation>) -> (Vec<Row>, Vec<f64>) {
    scenes
        .into_iter()
        .filter(|s| !s.no_fiducial)
        .flat_map(|s| &s.fish)
        .filter_map(|f| Some((f.features?, f.truth_length_cm?)))
        .unzip()
}

/// Species training rows: matched fish with a descriptor.
pub fn species_rows<'a>(scenes: impl IntoIterator<Item = &'a SceneObservation>) -> (Vec<Vec<f64>>, Vec<usize>) {
    scenes
        .into_iter()
        .flat_map(|s| &s.fish)
        .filter_map(|f| Some((f.descriptor.clone()?, f.truth_species?)))
        .unzip()
}

pub fn train_length_model(scenes: &[SceneObservation], cfg: &PipelineConfig, stream: u64) -> Result<RandomForest, PipelineError> {
    let (x, y) = length_rows(scenes);
    if x.is_empty() {
        return Err(PipelineError::Data("no matched fish with a fiducial to train on".into()));
    }
    let params = ForestParams { seed: stage_seed(cfg.seed, "forest", stream), ..cfg.forest.clone() };
    Ok(fit_forest(&x, &y, &params)?)
}

pub fn train_species_model(scenes: &[SceneObservation], n_species: usize, cfg: &PipelineConfig, stream: u64) -> Result<SoftmaxModel, PipelineError> {
    let (x, y) = species_rows(scenes);
    if x.is_empty() {
        return Err(PipelineError::Data("no matched fish with appearance descriptors to train on".into()));
    }
    let params = TrainParams { seed: stage_seed(cfg.seed, "classifier", stream), ..cfg.classifier.clone() };
    Ok(fit_softmax(&x, &y, n_species, &params)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneStatus {
    Ok,
    NoFiducial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FishResult {
    pub truth_index: Option<usize>,
    pub iou: Option<f64>,
    pub truth_length_cm: Option<f64>,
    pub truth_species: Option<usize>,
    pub predicted_length_cm: f64,
    pub posterior: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Curation {
    Assigned {
        /// `perm[label_index] = fish index`.
        perm: Vec<usize>,
        log_likelihood: f64,
        method: AssignMethod,
        recovered: Option<bool>,
    },
    /// Routed to manual review.
    CountMismatch { labels: usize, fish: usize },
    NoFish,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub scene_id: u64,
    pub status: SceneStatus,
    pub cm_per_pixel: Option<f64>,
    pub n_true_fish: usize,
    pub n_detected_fish: usize,
    pub marker_ious: Vec<(ObjectClass, f64)>,
    pub fish: Vec<FishResult>,
    pub curation: Option<Curation>,
}

/// Apply trained models to one observed scene.
pub fn predict_scene(obs: &SceneObservation, forest: &RandomForest, species: &SoftmaxModel, cfg: &PipelineConfig) -> Result<SceneResult, PipelineError> {
    if obs.no_fiducial {
        return Ok(SceneResult {
            scene_id: obs.scene_id,
            status: SceneStatus::NoFiducial,
            cm_per_pixel: None,
            n_true_fish: obs.n_true_fish,
            n_detected_fish: obs.fish.len(),
            marker_ious: Vec::new(),
            fish: Vec::new(),
            curation: None,
        });
    }
    let mut fish = Vec::with_capacity(obs.fish.len());
    for f in &obs.fish {
        let features = f.features.ok_or_else(|| PipelineError::Data(format!("scene {}: fish without features", obs.scene_id)))?;
        let descriptor = f.descriptor.as_ref().ok_or_else(|| PipelineError::Data(format!("scene {}: fish without descriptor", obs.scene_id)))?;
        fish.push(FishResult {
            truth_index: f.truth_index,
            iou: f.iou,
            truth_length_cm: f.truth_length_cm,
            truth_species: f.truth_species,
            predicted_length_cm: forest.predict(&features),
            posterior: predict_posterior(species, descriptor)?.probs,
        });
    }
    let curation = if obs.labels.is_empty() && fish.is_empty() {
        Curation::NoFish
    } else {
        let posteriors: Vec<Vec<f64>> = fish.iter().map(|f| f.posterior.clone()).collect();
        match assign_labels(&posteriors, &obs.labels, &obs.canonical, cfg.epsilon) {
            Ok(a) => Curation::Assigned {
                recovered: obs.truth_perm.as_ref().map(|t| *t == a.perm),
                perm: a.perm,
                log_likelihood: a.log_likelihood,
                method: a.method,
            },
            Err(CurateError::CountMismatch { labels, fish }) => Curation::CountMismatch { labels, fish },
            Err(e) => return Err(PipelineError::Data(format!("scene {}: {e}", obs.scene_id))),
        }
    };
    Ok(SceneResult {
        scene_id: obs.scene_id,
        status: SceneStatus::Ok,
        cm_per_pixel: obs.cm_per_pixel,
        n_true_fish: obs.n_true_fish,
        n_detected_fish: obs.fish.len(),
        marker_ious: obs.marker_ious.clone(),
        fish,
        curation: Some(curation),
    })
}

/// How the models used for prediction were obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ModelSource {
    /// Each scene predicted by models trained on the other folds of scenes.
    CrossFitted { folds: usize },
    Pretrained { length_model: String, species_model: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsHeader {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub dataset_seed: u64,
    pub n_species: usize,
    pub corrupt_scenes: Vec<String>,
    pub models: ModelSource,
    pub config: PipelineConfig,
}

/// Cross-fitted predictions: scenes split into `cfg.folds` groups; each group
/// predicted by models trained on the remaining groups.
pub fn cross_fit(obs: &DatasetObservations, cfg: &PipelineConfig) -> Result<Vec<SceneResult>, PipelineError> {
    let n = obs.scenes.len();
    if n < cfg.folds {
        return Err(PipelineError::Data(format!("{n} usable scenes, need at least {} for cross-fitting", cfg.folds)));
    }
    let folds = fold_assignment(n, cfg.folds, stage_seed(cfg.seed, "folds", 0));
    let mut results: Vec<Option<SceneResult>> = vec![None; n];
    for (f, held) in folds.iter().enumerate() {
        let mut is_held = vec![false; n];
        for &i in held {
            is_held[i] = true;
        }
        let train: Vec<SceneObservation> = (0..n).filter(|&i| !is_held[i]).map(|i| obs.scenes[i].clone()).collect();
        let forest = train_length_model(&train, cfg, f as u64)?;
        let species = train_species_model(&train, obs.n_species, cfg, f as u64)?;
        let preds: Vec<Result<SceneResult, PipelineError>> =
            held.par_iter().map(|&i| predict_scene(&obs.scenes[i], &forest, &species, cfg)).collect();
        for (&i, r) in held.iter().zip(preds) {
            results[i] = Some(r?);
        }
    }
    Ok(results.into_iter().map(|r| r.expect("every scene is in one fold")).collect())
}

pub fn predict_all(obs: &DatasetObservations, forest: &RandomForest, species: &SoftmaxModel, cfg: &PipelineConfig) -> Result<Vec<SceneResult>, PipelineError> {
    if species.n_classes < obs.n_species {
        return Err(PipelineError::Config(format!(
            "species model knows {} classes, dataset has {}",
            species.n_classes, obs.n_species
        )));
    }
    obs.scenes.par_iter().map(|o| predict_scene(o, forest, species, cfg)).collect()
}

pub fn write_results(path: &Path, header: &ResultsHeader, results: &[SceneResult]) -> Result<(), PipelineError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let line = serde_json::to_string(header).expect("header serializes");
    writeln!(out, "{line}").map_err(io_err(path))?;
    for r in results {
        let line = serde_json::to_string(r).expect("result serializes");
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn read_results(path: &Path) -> Result<(ResultsHeader, Vec<SceneResult>), PipelineError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let data = |m: String| PipelineError::Data(format!("{}: {m}", path.display()));
    let first = lines.next().ok_or_else(|| data("empty results file".into()))?.map_err(io_err(path))?;
    let header: ResultsHeader = serde_json::from_str(&first).map_err(|e| data(format!("bad header: {e}")))?;
    if header.format != RESULTS_FORMAT || header.version != FORMAT_VERSION {
        return Err(data(format!("unsupported results {} v{}", header.format, header.version)));
    }
    let mut results = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        results.push(serde_json::from_str(&line).map_err(|e| data(format!("line {}: {e}", i + 2)))?);
    }
    if results.is_empty() {
        return Err(data("no scene results".into()));
    }
    Ok((header, results))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthSummary {
    pub n_fish: usize,
    pub mae_cm: f64,
    pub r2: Option<f64>,
    pub mean_relative_error: f64,
    pub ks_distance: f64,
    pub deciles: Vec<DecileBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesSummary {
    pub n_fish: usize,
    pub top1_accuracy: f64,
    pub top_k: usize,
    pub topk_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationSummary {
    pub n_assigned: usize,
    pub n_count_mismatch: usize,
    pub n_with_truth: usize,
    pub n_recovered: usize,
    pub recovery_rate: Option<f64>,
    pub methods: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub dataset_seed: u64,
    pub models: ModelSource,
    pub forest: ForestParams,
    pub classifier: TrainParams,
    pub n_scenes: usize,
    pub n_evaluated: usize,
    pub n_discarded_no_fiducial: usize,
    pub discarded_scene_ids: Vec<u64>,
    pub corrupt_scenes: Vec<String>,
    pub count_confusion: CountConfusion,
    pub iou: Vec<IouSummary>,
    pub length: Option<LengthSummary>,
    pub species: Option<SpeciesSummary>,
    pub curation: CurationSummary,
}

/// Paired (predicted, true) lengths of matched fish in evaluated scenes.
pub fn length_pairs(results: &[SceneResult]) -> (Vec<f64>, Vec<f64>) {
    results
        .iter()
        .filter(|r| r.status == SceneStatus::Ok)
        .flat_map(|r| &r.fish)
        .filter_map(|f| Some((f.predicted_length_cm, f.truth_length_cm?)))
        .unzip()
}

/// Aggregate scene results into a report. Results are sorted by scene id
/// first, so the input order does not matter.
pub fn build_report(header: &ResultsHeader, results: &[SceneResult]) -> Result<Report, PipelineError> {
    let mut results = results.to_vec();
    results.sort_by_key(|r| r.scene_id);
    let (ok, discarded): (Vec<&SceneResult>, Vec<&SceneResult>) = results.iter().partition(|r| r.status == SceneStatus::Ok);
    if ok.is_empty() {
        return Err(PipelineError::Data("every scene was discarded; nothing to evaluate".into()));
    }
    let data = |e: crate::evalkit::EvalError| PipelineError::Data(e.to_string());

    let true_counts: Vec<usize> = ok.iter().map(|r| r.n_true_fish).collect();
    let det_counts: Vec<usize> = ok.iter().map(|r| r.n_detected_fish).collect();
    let confusion = count_confusion(&true_counts, &det_counts).map_err(data)?;

    let mut iou_pairs: Vec<(ObjectClass, f64)> = Vec::new();
    for r in &ok {
        iou_pairs.extend(r.fish.iter().filter_map(|f| f.iou.map(|v| (ObjectClass::Fish, v))));
        iou_pairs.extend(r.marker_ious.iter().copied());
    }
    let iou = if iou_pairs.is_empty() { Vec::new() } else { iou_summary(&iou_pairs).map_err(data)? };

    let ok_owned: Vec<SceneResult> = ok.iter().map(|r| (*r).clone()).collect();
    let (preds, truths) = length_pairs(&ok_owned);
    let length = if preds.is_empty() {
        None
    } else {
        let mae = preds.iter().zip(&truths).map(|(p, t)| (p - t).abs()).sum::<f64>() / preds.len() as f64;
        let reg = regression_metrics(&preds, &truths).ok();
        let mre = preds.iter().zip(&truths).map(|(p, t)| (p - t) / t).sum::<f64>() / preds.len() as f64;
        Some(LengthSummary {
            n_fish: preds.len(),
            mae_cm: mae,
            r2: reg.as_ref().map(|r| r.r2),
            mean_relative_error: mre,
            ks_distance: ks_distance(&preds, &truths).map_err(data)?,
            deciles: reg.map(|r| r.deciles).unwrap_or_default(),
        })
    };

    let k = header.config.top_k.min(header.n_species.max(1));
    let classified: Vec<(&Vec<f64>, usize)> =
        ok.iter().flat_map(|r| &r.fish).filter_map(|f| Some((&f.posterior, f.truth_species?))).collect();
    let species = (!classified.is_empty()).then(|| {
        let hits = |kk: usize| {
            classified
                .iter()
                .filter(|(p, t)| topk_hit(&crate::classify::SpeciesPosterior { probs: (*p).clone() }, *t, kk))
                .count() as f64
                / classified.len() as f64
        };
        SpeciesSummary { n_fish: classified.len(), top1_accuracy: hits(1), top_k: k, topk_accuracy: hits(k) }
    });

    let mut curation = CurationSummary {
        n_assigned: 0,
        n_count_mismatch: 0,
        n_with_truth: 0,
        n_recovered: 0,
        recovery_rate: None,
        methods: BTreeMap::new(),
    };
    for r in &ok {
        match &r.curation {
            Some(Curation::Assigned { method, recovered, .. }) => {
                curation.n_assigned += 1;
                let name = serde_json::to_value(method).expect("method serializes");
                *curation.methods.entry(name.as_str().unwrap_or("unknown").to_string()).or_default() += 1;
                if let Some(rec) = recovered {
                    curation.n_with_truth += 1;
                    curation.n_recovered += usize::from(*rec);
                }
            }
            Some(Curation::CountMismatch { .. }) => curation.n_count_mismatch += 1,
            _ => {}
        }
    }
    if curation.n_with_truth > 0 {
        curation.recovery_rate = Some(curation.n_recovered as f64 / curation.n_with_truth as f64);
    }

    Ok(Report {
        format: REPORT_FORMAT.into(),
        version: FORMAT_VERSION,
        config_hash: header.config_hash.clone(),
        seed: header.seed,
        dataset_seed: header.dataset_seed,
        models: header.models.clone(),
        forest: header.config.forest.clone(),
        classifier: header.config.classifier.clone(),
        n_scenes: results.len(),
        n_evaluated: ok.len(),
        n_discarded_no_fiducial: discarded.len(),
        discarded_scene_ids: discarded.iter().map(|r| r.scene_id).collect(),
        corrupt_scenes: header.corrupt_scenes.clone(),
        count_confusion: confusion,
        iou,
        length,
        species,
        curation,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Flat `metric,value` rendering of a report.
pub fn report_csv(r: &Report) -> String {
    let mut rows: Vec<(String, String)> = vec![
        ("config_hash".into(), r.config_hash.clone()),
        ("seed".into(), r.seed.to_string()),
        ("dataset_seed".into(), r.dataset_seed.to_string()),
        ("n_scenes".into(), r.n_scenes.to_string()),
        ("n_evaluated".into(), r.n_evaluated.to_string()),
        ("n_discarded_no_fiducial".into(), r.n_discarded_no_fiducial.to_string()),
        ("n_corrupt".into(), r.corrupt_scenes.len().to_string()),
        ("count_agreement_rate".into(), r.count_confusion.agreement_rate.to_string()),
        ("count_over_rate".into(), r.count_confusion.over_rate.to_string()),
        ("count_under_rate".into(), r.count_confusion.under_rate.to_string()),
    ];
    for s in &r.iou {
        let c = s.class.as_str();
        for (name, v) in [("n", s.n as f64), ("mean", s.mean), ("min", s.min), ("q1", s.q1), ("median", s.median), ("q3", s.q3), ("max", s.max)] {
            rows.push((format!("iou_{c}_{name}"), v.to_string()));
        }
    }
    if let Some(l) = &r.length {
        rows.push(("length_n_fish".into(), l.n_fish.to_string()));
        rows.push(("length_mae_cm".into(), l.mae_cm.to_string()));
        rows.push(("length_r2".into(), fmt_opt(l.r2)));
        rows.push(("length_mean_relative_error".into(), l.mean_relative_error.to_string()));
        rows.push(("length_ks_distance".into(), l.ks_distance.to_string()));
        for (i, d) in l.deciles.iter().enumerate() {
            rows.push((format!("length_decile{i}_mae_cm"), d.mae_cm.to_string()));
        }
    }
    if let Some(s) = &r.species {
        rows.push(("species_n_fish".into(), s.n_fish.to_string()));
        rows.push(("species_top1_accuracy".into(), s.top1_accuracy.to_string()));
        rows.push((format!("species_top{}_accuracy", s.top_k), s.topk_accuracy.to_string()));
    }
    rows.push(("curation_n_assigned".into(), r.curation.n_assigned.to_string()));
    rows.push(("curation_n_count_mismatch".into(), r.curation.n_count_mismatch.to_string()));
    rows.push(("curation_recovery_rate".into(), fmt_opt(r.curation.recovery_rate)));
    let mut out = String::from("metric,value\n");
    for (k, v) in rows {
        out.push_str(&k);
        out.push(',');
        out.push_str(&v);
        out.push('\n');
    }
    out
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

/// Write `report.json`, `report.csv` and the SVG charts into `dir`.
pub fn write_reports(dir: &Path, report: &Report, results: &[SceneResult]) -> Result<Vec<PathBuf>, PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let ok: Vec<SceneResult> = results.iter().filter(|r| r.status == SceneStatus::Ok).cloned().collect();
    let (preds, truths) = length_pairs(&ok);
    let files = [
        (REPORT_JSON, serde_json::to_string_pretty(report).expect("report serializes") + "\n"),
        (REPORT_CSV, report_csv(report)),
        ("length_scatter.svg", scatter_svg(&preds, &truths)),
        ("length_histogram.svg", histogram_overlay_svg(&preds, &truths, 24, ("predicted", "true"))),
        ("count_heatmap.svg", count_heatmap_svg(&report.count_confusion)),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}

pub struct RunOutput {
    pub results_path: PathBuf,
    pub report: Report,
    pub files: Vec<PathBuf>,
}

/// Full run over `dataset_dir`: observe, predict (trained in-run when
/// `train` is set, otherwise from the configured model files), write
/// `results.jsonl` and reports into `report_dir`.
pub fn run(cfg: &PipelineConfig, train: bool) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    let dataset = cfg.dataset_dir.as_deref().ok_or_else(|| PipelineError::Config("dataset_dir is required".into()))?;
    let report_dir = cfg.report_dir.as_deref().ok_or_else(|| PipelineError::Config("report_dir is required".into()))?;
    let pretrained = if train {
        None
    } else {
        let lm = cfg.length_model.as_deref().ok_or_else(|| PipelineError::Config("length_model is required without --train".into()))?;
        let sm = cfg.species_model.as_deref().ok_or_else(|| PipelineError::Config("species_model is required without --train".into()))?;
        Some((
            RandomForest::load(lm).map_err(|e| PipelineError::Config(e.to_string()))?,
            SoftmaxModel::load(sm).map_err(|e| PipelineError::Config(e.to_string()))?,
            ModelSource::Pretrained { length_model: lm.display().to_string(), species_model: sm.display().to_string() },
        ))
    };
    cfg.install(|| {
        let obs = observe_dataset(dataset, cfg, true)?;
        info!("observed {} scenes ({} corrupt)", obs.scenes.len(), obs.corrupt.len());
        let (results, models) = match &pretrained {
            None => (cross_fit(&obs, cfg)?, ModelSource::CrossFitted { folds: cfg.folds }),
            Some((forest, species, source)) => (predict_all(&obs, forest, species, cfg)?, source.clone()),
        };
        let header = ResultsHeader {
            format: RESULTS_FORMAT.into(),
            version: FORMAT_VERSION,
            config_hash: cfg.hash(),
            seed: cfg.seed,
            dataset_seed: obs.dataset_seed,
            n_species: obs.n_species,
            corrupt_scenes: obs.corrupt.clone(),
            models,
            config: cfg.hashed_view(),
        };
        fs::create_dir_all(report_dir).map_err(io_err(report_dir))?;
        let results_path = report_dir.join(RESULTS_FILE);
        write_results(&results_path, &header, &results)?;
        let report = build_report(&header, &results)?;
        let files = write_reports(report_dir, &report, &results)?;
        Ok(RunOutput { results_path, report, files })
    })?
}

/// Re-aggregate an existing results file into reports under `report_dir`.
pub fn evaluate(results_path: &Path, report_dir: &Path) -> Result<(Report, Vec<PathBuf>), PipelineError> {
    let (header, results) = read_results(results_path)?;
    let report = build_report(&header, &results)?;
    let files = write_reports(report_dir, &report, &results)?;
    Ok((report, files))
}
