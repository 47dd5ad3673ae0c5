//! CART regression trees and a bagged random forest over the eight length
//! features.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalkit::{regression_metrics, EvalError};
use crate::seed::{rng, stable_hash};

pub const N_FEATURES: usize = 8;
pub const MODEL_FORMAT: &str = "fishnet-forest";
pub const MODEL_VERSION: u32 = 1;

pub type Row = [f64; N_FEATURES];

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("training set is empty")]
    Empty,
    #[error("{rows} feature rows but {targets} targets")]
    LengthMismatch { rows: usize, targets: usize },
    #[error("invalid forest params: {0}")]
    Params(String),
    #[error("k = {k} folds needs at least k samples, got {n}")]
    TooFewSamples { k: usize, n: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {message}")]
    Model { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` grows until another stopping rule applies.
    pub max_depth: Option<usize>,
    /// Minimum samples in each child of a split.
    pub min_leaf: usize,
    pub features_per_split: usize,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self { n_trees: 200, max_depth: Some(16), min_leaf: 5, features_per_split: 3, bootstrap: true, seed: 0 }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<(), ForestError> {
        if self.n_trees == 0 {
            return Err(ForestError::Params("n_trees must be at least 1".into()));
        }
        if self.min_leaf == 0 {
            return Err(ForestError::Params("min_leaf must be at least 1".into()));
        }
        if !(1..=N_FEATURES).contains(&self.features_per_split) {
            return Err(ForestError::Params(format!("features_per_split must be in 1..={N_FEATURES}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go left.
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, x: &Row) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn root_split(&self) -> Option<(usize, f64)> {
        match self.nodes.first()? {
            Node::Split { feature, threshold, .. } => Some((*feature, *threshold)),
            Node::Leaf { .. } => None,
        }
    }
}

/// Relative tolerance under which two SSE values count as tied.
const SSE_TIE_TOL: f64 = 1e-10;

fn check_data(x: &[Row], y: &[f64]) -> Result<(), ForestError> {
    if x.len() != y.len() {
        return Err(ForestError::LengthMismatch { rows: x.len(), targets: y.len() });
    }
    if x.is_empty() {
        return Err(ForestError::Empty);
    }
    Ok(())
}

/// Sum of squared deviations from the mean, computed in two passes.
fn node_sse(y: &[f64], idx: &[usize]) -> (f64, f64) {
    let mean = idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
    let sse = idx.iter().map(|&i| (y[i] - mean).powi(2)).sum();
    (mean, sse)
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    sse: f64,
}

/// Best split of `idx` over `features` (ascending). Candidates are visited in
/// (feature, threshold) order and only a strictly better SSE replaces the
/// incumbent, so ties keep the lowest feature, then the lowest threshold.
fn best_split(x: &[Row], y: &[f64], idx: &[usize], features: &[usize], min_leaf: usize, parent_sse: f64) -> Option<SplitChoice> {
    let n = idx.len();
    if n < 2 * min_leaf {
        return None;
    }
    let tol = SSE_TIE_TOL * parent_sse.max(1.0);
    let mut best: Option<SplitChoice> = None;
    let mut order = idx.to_vec();
    let total_sum: f64 = idx.iter().map(|&i| y[i]).sum();
    let total_sq: f64 = idx.iter().map(|&i| y[i] * y[i]).sum();
    for &f in features {
        order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
        let (mut sum_l, mut sq_l) = (0.0, 0.0);
        for p in 1..n {
            let prev = order[p - 1];
            sum_l += y[prev];
            sq_l += y[prev] * y[prev];
            let (lo, hi) = (x[prev][f], x[order[p]][f]);
            if lo == hi || p < min_leaf || n - p < min_leaf {
                continue;
            }
            let (nl, nr) = (p as f64, (n - p) as f64);
            let sum_r = total_sum - sum_l;
            let sq_r = total_sq - sq_l;
            let sse = (sq_l - sum_l * sum_l / nl) + (sq_r - sum_r * sum_r / nr);
            if best.as_ref().is_none_or(|b| sse < b.sse - tol) {
                let mut threshold = lo + (hi - lo) / 2.0;
                if threshold >= hi {
                    threshold = lo;
                }
                best = Some(SplitChoice { feature: f, threshold, sse });
            }
        }
    }
    best.filter(|b| b.sse < parent_sse - tol)
}

/// Up to `k` features for a node, drawn in random order and skipping those
/// that are constant over the node's rows; returned ascending. With `k = 8`
/// no randomness is consumed.
fn candidate_features(x: &[Row], idx: &[usize], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..N_FEATURES).collect();
    if k < N_FEATURES {
        order.shuffle(rng);
    }
    let varies = |f: usize| idx.iter().any(|&i| x[i][f] != x[idx[0]][f]);
    let mut chosen: Vec<usize> = order.into_iter().filter(|&f| varies(f)).take(k).collect();
    chosen.sort_unstable();
    chosen
}

/// Grow one tree on the rows listed in `sample` (repeats allowed).
fn grow(x: &[Row], y: &[f64], sample: Vec<usize>, params: &ForestParams, rng: &mut impl Rng) -> RegressionTree {
    let max_depth = params.max_depth.unwrap_or(usize::MAX);
    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    let mut stack = vec![(0usize, sample, 0usize)];
    while let Some((slot, idx, depth)) = stack.pop() {
        let (mean, sse) = node_sse(y, &idx);
        let split = if depth >= max_depth || sse <= 0.0 {
            None
        } else {
            let features = candidate_features(x, &idx, params.features_per_split, rng);
            best_split(x, y, &idx, &features, params.min_leaf, sse)
        };
        match split {
            None => nodes[slot] = Node::Leaf { value: mean },
            Some(s) => {
                let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
                    idx.iter().partition(|&&i| x[i][s.feature] <= s.threshold);
                let left = nodes.len();
                nodes.push(Node::Leaf { value: 0.0 });
                nodes.push(Node::Leaf { value: 0.0 });
                nodes[slot] = Node::Split { feature: s.feature, threshold: s.threshold, left, right: left + 1 };
                stack.push((left + 1, right_idx, depth + 1));
                stack.push((left, left_idx, depth + 1));
            }
        }
    }
    RegressionTree { nodes }
}

/// Fit a single CART tree on all rows (no bootstrap).
pub fn fit_tree(x: &[Row], y: &[f64], params: &ForestParams, seed: u64) -> Result<RegressionTree, ForestError> {
    check_data(x, y)?;
    params.validate()?;
    Ok(grow(x, y, (0..x.len()).collect(), params, &mut rng(seed)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub format: String,
    pub version: u32,
    pub params: ForestParams,
    pub trees: Vec<RegressionTree>,
}

/// Train `n_trees` trees, tree `t` seeded by `stable_hash(seed, t)`. Uses the
/// current rayon pool; the result does not depend on its size.
pub fn fit_forest(x: &[Row], y: &[f64], params: &ForestParams) -> Result<RandomForest, ForestError> {
    check_data(x, y)?;
    params.validate()?;
    let n = x.len();
    let trees = (0..params.n_trees as u64)
        .into_par_iter()
        .map(|t| {
            let mut r = rng(stable_hash(params.seed, t));
            let sample: Vec<usize> =
                if params.bootstrap { (0..n).map(|_| r.random_range(0..n)).collect() } else { (0..n).collect() };
            grow(x, y, sample, params, &mut r)
        })
        .collect();
    Ok(RandomForest { format: MODEL_FORMAT.into(), version: MODEL_VERSION, params: params.clone(), trees })
}

impl RandomForest {
    /// Mean of the per-tree predictions, summed in tree order.
    pub fn predict(&self, x: &Row) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn predict_batch(&self, rows: &[Row]) -> Vec<f64> {
        rows.par_iter().map(|r| self.predict(r)).collect()
    }

    /// Number of splits on each feature across the forest.
    pub fn split_counts(&self) -> [usize; N_FEATURES] {
        let mut counts = [0; N_FEATURES];
        for node in self.trees.iter().flat_map(|t| &t.nodes) {
            if let Node::Split { feature, .. } = node {
                counts[*feature] += 1;
            }
        }
        counts
    }

    pub fn save(&self, path: &Path) -> Result<(), ForestError> {
        let err = |message: String| ForestError::Model { path: path.display().to_string(), message };
        let text = serde_json::to_string(self).map_err(|e| err(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ForestError> {
        let err = |message: String| ForestError::Model { path: path.display().to_string(), message };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let model: RandomForest = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if model.format != MODEL_FORMAT || model.version != MODEL_VERSION {
            return Err(err(format!("unsupported model {} v{}", model.format, model.version)));
        }
        if model.trees.is_empty() {
            return Err(err("model has no trees".into()));
        }
        for tree in &model.trees {
            let n = tree.nodes.len();
            let ok = n > 0
                && tree.nodes.iter().all(|node| match *node {
                    Node::Split { feature, left, right, threshold } => {
                        feature < N_FEATURES && left < n && right < n && threshold.is_finite()
                    }
                    Node::Leaf { value } => value.is_finite(),
                });
            if !ok {
                return Err(err("malformed tree".into()));
            }
        }
        Ok(model)
    }
}

/// Shuffled partition of `0..n` into `k` folds; the first `n % k` folds get
/// one extra sample.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut fold = perm[start..start + size].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += size;
    }
    folds
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub size: usize,
    pub mae_cm: f64,
    /// Undefined when the fold's targets are constant.
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub folds: Vec<FoldReport>,
    pub pooled_mae_cm: f64,
    pub pooled_r2: f64,
    /// Held-out prediction for every input row.
    pub predictions: Vec<f64>,
}

/// k-fold cross-validation. Fold `f` trains with seed `stable_hash(params.seed, f)`.
pub fn kfold_cv(x: &[Row], y: &[f64], k: usize, params: &ForestParams, seed: u64) -> Result<CvReport, ForestError> {
    check_data(x, y)?;
    params.validate()?;
    if k < 2 {
        return Err(ForestError::Params("k must be at least 2".into()));
    }
    if k > x.len() {
        return Err(ForestError::TooFewSamples { k, n: x.len() });
    }
    let folds = fold_assignment(x.len(), k, seed);
    let mut predictions = vec![f64::NAN; x.len()];
    let mut reports = Vec::with_capacity(k);
    for (f, held_out) in folds.iter().enumerate() {
        let mut is_held = vec![false; x.len()];
        for &i in held_out {
            is_held[i] = true;
        }
        let train: Vec<usize> = (0..x.len()).filter(|&i| !is_held[i]).collect();
        let tx: Vec<Row> = train.iter().map(|&i| x[i]).collect();
        let ty: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let fold_params = ForestParams { seed: stable_hash(params.seed, f as u64), ..params.clone() };
        let model = fit_forest(&tx, &ty, &fold_params)?;
        let rows: Vec<Row> = held_out.iter().map(|&i| x[i]).collect();
        let preds = model.predict_batch(&rows);
        let truths: Vec<f64> = held_out.iter().map(|&i| y[i]).collect();
        for (&i, &p) in held_out.iter().zip(&preds) {
            predictions[i] = p;
        }
        let mae = preds.iter().zip(&truths).map(|(p, t)| (p - t).abs()).sum::<f64>() / preds.len() as f64;
        let r2 = regression_metrics(&preds, &truths).ok().map(|r| r.r2);
        reports.push(FoldReport { size: held_out.len(), mae_cm: mae, r2 });
    }
    let pooled = regression_metrics(&predictions, y)?;
    Ok(CvReport { k, folds: reports, pooled_mae_cm: pooled.mae_cm, pooled_r2: pooled.r2, predictions })
}
