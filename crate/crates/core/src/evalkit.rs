//! Evaluation metrics: instance matching, count confusion, regression
//! errors, IoU summaries and distribution distance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{mask_iou, GeomError, Mask};
use crate::types::ObjectClass;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("paired inputs differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("input is empty")]
    Empty,
    #[error("truth values are constant; R² is undefined")]
    ConstantTruth,
    #[error(transparent)]
    Geom(#[from] GeomError),
}

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub pred: usize,
    pub truth: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Matching {
    pub pairs: Vec<MatchPair>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_truth: Vec<usize>,
}

/// Greedy one-to-one matching by descending IoU. Pairs below `threshold`
/// never match; equal IoUs go to the lower (pred, truth) index.
pub fn match_instances(pred: &[&Mask], truth: &[&Mask], threshold: f64) -> Result<Matching, EvalError> {
    let mut candidates = Vec::new();
    for (p, pm) in pred.iter().enumerate() {
        for (t, tm) in truth.iter().enumerate() {
            let iou = mask_iou(pm, tm)?;
            if iou >= threshold && iou > 0.0 {
                candidates.push(MatchPair { pred: p, truth: t, iou });
            }
        }
    }
    candidates.sort_by(|a, b| b.iou.total_cmp(&a.iou).then(a.pred.cmp(&b.pred)).then(a.truth.cmp(&b.truth)));
    let mut pred_used = vec![false; pred.len()];
    let mut truth_used = vec![false; truth.len()];
    let mut pairs = Vec::new();
    for c in candidates {
        if !pred_used[c.pred] && !truth_used[c.truth] {
            pred_used[c.pred] = true;
            truth_used[c.truth] = true;
            pairs.push(c);
        }
    }
    pairs.sort_by_key(|p| p.truth);
    Ok(Matching {
        pairs,
        unmatched_pred: (0..pred.len()).filter(|&i| !pred_used[i]).collect(),
        unmatched_truth: (0..truth.len()).filter(|&i| !truth_used[i]).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountConfusion {
    /// Largest count seen on either axis; the matrix is `(max+1)²`.
    pub max_count: usize,
    /// `matrix[true][detected]`.
    pub matrix: Vec<Vec<usize>>,
    pub n_scenes: usize,
    pub agreement_rate: f64,
    pub over_rate: f64,
    pub under_rate: f64,
}

pub fn count_confusion(true_counts: &[usize], detected: &[usize]) -> Result<CountConfusion, EvalError> {
    if true_counts.len() != detected.len() {
        return Err(EvalError::LengthMismatch(true_counts.len(), detected.len()));
    }
    if true_counts.is_empty() {
        return Err(EvalError::Empty);
    }
    let max_count = true_counts.iter().chain(detected).copied().max().unwrap_or(0);
    let mut matrix = vec![vec![0; max_count + 1]; max_count + 1];
    let (mut agree, mut over, mut under) = (0usize, 0usize, 0usize);
    for (&t, &d) in true_counts.iter().zip(detected) {
        matrix[t][d] += 1;
        match d.cmp(&t) {
            std::cmp::Ordering::Equal => agree += 1,
            std::cmp::Ordering::Greater => over += 1,
            std::cmp::Ordering::Less => under += 1,
        }
    }
    let n = true_counts.len() as f64;
    Ok(CountConfusion {
        max_count,
        matrix,
        n_scenes: true_counts.len(),
        agreement_rate: agree as f64 / n,
        over_rate: over as f64 / n,
        under_rate: under as f64 / n,
    })
}

impl CountConfusion {
    pub fn is_diagonal(&self) -> bool {
        self.matrix.iter().enumerate().all(|(t, row)| row.iter().enumerate().all(|(d, &c)| c == 0 || t == d))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileBin {
    pub truth_min_cm: f64,
    pub truth_max_cm: f64,
    pub n: usize,
    pub mae_cm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub n: usize,
    pub mae_cm: f64,
    pub r2: f64,
    pub mean_relative_error: f64,
    /// `(pred - truth) / truth`, in input order.
    pub relative_errors: Vec<f64>,
    pub deciles: Vec<DecileBin>,
}

pub fn regression_metrics(preds: &[f64], truths: &[f64]) -> Result<RegressionReport, EvalError> {
    if preds.len() != truths.len() {
        return Err(EvalError::LengthMismatch(preds.len(), truths.len()));
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = preds.len();
    let mae = preds.iter().zip(truths).map(|(p, t)| (p - t).abs()).sum::<f64>() / n as f64;
    let mean_t = truths.iter().sum::<f64>() / n as f64;
    let sst: f64 = truths.iter().map(|t| (t - mean_t).powi(2)).sum();
    if sst == 0.0 {
        return Err(EvalError::ConstantTruth);
    }
    let sse: f64 = preds.iter().zip(truths).map(|(p, t)| (p - t).powi(2)).sum();
    let relative_errors: Vec<f64> = preds.iter().zip(truths).map(|(p, t)| (p - t) / t).collect();
    let mean_relative_error = relative_errors.iter().sum::<f64>() / n as f64;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| truths[a].total_cmp(&truths[b]).then(a.cmp(&b)));
    let bins = n.min(10);
    let mut deciles = Vec::with_capacity(bins);
    let mut start = 0;
    for b in 0..bins {
        let size = n / bins + usize::from(b < n % bins);
        let idx = &order[start..start + size];
        start += size;
        deciles.push(DecileBin {
            truth_min_cm: truths[idx[0]],
            truth_max_cm: truths[idx[size - 1]],
            n: size,
            mae_cm: idx.iter().map(|&i| (preds[i] - truths[i]).abs()).sum::<f64>() / size as f64,
        });
    }
    Ok(RegressionReport { n, mae_cm: mae, r2: 1.0 - sse / sst, mean_relative_error, relative_errors, deciles })
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_distance(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    Ok(d)
}

/// Linear-interpolated quantile of sorted data (the common "type 7" rule).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouSummary {
    pub class: ObjectClass,
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Per-class summary of matched IoUs, in `ObjectClass::ALL` order.
pub fn iou_summary(pairs: &[(ObjectClass, f64)]) -> Result<Vec<IouSummary>, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut out = Vec::new();
    for class in ObjectClass::ALL {
        let mut v: Vec<f64> = pairs.iter().filter(|(c, _)| *c == class).map(|&(_, x)| x).collect();
        if v.is_empty() {
            continue;
        }
        v.sort_by(f64::total_cmp);
        out.push(IouSummary {
            class,
            n: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: v[v.len() - 1],
        });
    }
    Ok(out)
}

/// Average ranks, with ties sharing the mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(EvalError::Empty);
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    Ok(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matching_examples() {
        let a = Mask::from_rect(20, 20, 0, 0, 10, 10);
        let b = Mask::from_rect(20, 20, 10, 10, 20, 20);
        let m = match_instances(&[&a, &b], &[&a, &b], 0.5).unwrap();
        assert_eq!(m.pairs.len(), 2);
        assert!(m.pairs.iter().all(|p| p.iou == 1.0 && p.pred == p.truth));
        let m = match_instances(&[&a], &[&b], 0.5).unwrap();
        assert!(m.pairs.is_empty());
        assert_eq!((m.unmatched_pred, m.unmatched_truth), (vec![0], vec![0]));

        // truth 10x10; pred0 IoU 0.6 (60 of 100 px), pred1 IoU 0.9
        let truth = Mask::from_rect(20, 20, 0, 0, 10, 10);
        let p0 = Mask::from_rect(20, 20, 0, 0, 6, 10);
        let p1 = Mask::from_rect(20, 20, 0, 0, 9, 10);
        let m = match_instances(&[&p0, &p1], &[&truth], 0.5).unwrap();
        assert_eq!(m.pairs, vec![MatchPair { pred: 1, truth: 0, iou: 0.9 }]);
        assert_eq!(m.unmatched_pred, vec![0]);
    }

    #[test]
    fn confusion_examples() {
        let c = count_confusion(&[2, 2, 3], &[2, 3, 2]).unwrap();
        assert_eq!((c.agreement_rate, c.over_rate, c.under_rate), (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0));
        assert_eq!(c.matrix[2][3], 1);
        assert_eq!(c.matrix[3][2], 1);
        assert!(!c.is_diagonal());
        assert!(count_confusion(&[1, 4], &[1, 4]).unwrap().is_diagonal());
        assert_eq!(count_confusion(&[], &[]), Err(EvalError::Empty));
        assert_eq!(count_confusion(&[1], &[]), Err(EvalError::LengthMismatch(1, 0)));
    }

    #[test]
    fn regression_examples() {
        let r = regression_metrics(&[1.0, 2.0], &[2.0, 4.0]).unwrap();
        assert_eq!(r.mae_cm, 1.5);
        assert_eq!(r.r2, -1.5);
        assert_eq!(r.relative_errors, vec![-0.5, -0.5]);
        let t = [3.0, 5.0, 10.0];
        let r = regression_metrics(&t, &t).unwrap();
        assert_eq!((r.mae_cm, r.r2), (0.0, 1.0));
        assert_eq!(regression_metrics(&[6.0; 3], &t).unwrap().r2, 0.0);
        assert_eq!(regression_metrics(&[1.0, 2.0], &[3.0, 3.0]), Err(EvalError::ConstantTruth));
        assert_eq!(regression_metrics(&[], &[]), Err(EvalError::Empty));
    }

    #[test]
    fn decile_bins_cover_all_rows() {
        let truths: Vec<f64> = (1..=25).map(f64::from).collect();
        let preds: Vec<f64> = truths.iter().map(|t| t + 1.0).collect();
        let r = regression_metrics(&preds, &truths).unwrap();
        assert_eq!(r.deciles.len(), 10);
        assert_eq!(r.deciles.iter().map(|d| d.n).sum::<usize>(), 25);
        assert_eq!(r.deciles[0].truth_min_cm, 1.0);
        assert_eq!(r.deciles[0].truth_max_cm, 3.0);
        assert!(r.deciles.iter().all(|d| d.mae_cm == 1.0));
    }

    #[test]
    fn ks_examples() {
        assert_eq!(ks_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(ks_distance(&[1.0, 2.0], &[10.0, 20.0]).unwrap(), 1.0);
        assert!((ks_distance(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(ks_distance(&[], &[1.0]), Err(EvalError::Empty));
    }

    #[test]
    fn iou_summary_examples() {
        let s = iou_summary(&[(ObjectClass::Fish, 0.8), (ObjectClass::Fish, 0.9), (ObjectClass::Fish, 1.0)]).unwrap();
        assert_eq!(s.len(), 1);
        assert!((s[0].mean - 0.9).abs() < 1e-12);
        assert_eq!(s[0].median, 0.9);
        assert!((s[0].q1 - 0.85).abs() < 1e-12 && (s[0].q3 - 0.95).abs() < 1e-12);
        let s = iou_summary(&[(ObjectClass::BlueBox, 0.7)]).unwrap();
        let x = &s[0];
        assert!([x.mean, x.min, x.q1, x.median, x.q3, x.max].iter().all(|&v| v == 0.7));
        assert_eq!(iou_summary(&[]), Err(EvalError::Empty));
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 90.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
    }

    fn ecdf_ks(a: &[f64], b: &[f64]) -> f64 {
        let cdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
        a.iter().chain(b).map(|&x| (cdf(a, x) - cdf(b, x)).abs()).fold(0.0, f64::max)
    }

    proptest! {
        #[test]
        fn ks_matches_pointwise_ecdf(a in prop::collection::vec(0u8..20, 1..15), b in prop::collection::vec(0u8..20, 1..15)) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let d = ks_distance(&a, &b).unwrap();
            prop_assert!((d - ecdf_ks(&a, &b)).abs() < 1e-12);
            prop_assert_eq!(d, ks_distance(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn r2_at_most_one(p in prop::collection::vec(-50.0f64..50.0, 3..20), t0 in -50.0f64..50.0) {
            let mut t: Vec<f64> = p.iter().map(|x| x * 0.5 + 3.0).collect();
            t[0] = t0;
            if let Ok(r) = regression_metrics(&p, &t) {
                prop_assert!(r.r2 <= 1.0);
                let mean = t.iter().sum::<f64>() / t.len() as f64;
                let flat = regression_metrics(&vec![mean; t.len()], &t).unwrap();
                prop_assert!(flat.r2.abs() < 1e-12);
            }
        }

        #[test]
        fn confusion_rates_sum_to_one(pairs in prop::collection::vec((0usize..6, 0usize..6), 1..40)) {
            let (t, d): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let c = count_confusion(&t, &d).unwrap();
            prop_assert!((c.agreement_rate + c.over_rate + c.under_rate - 1.0).abs() < 1e-12);
            for (k, row) in c.matrix.iter().enumerate() {
                prop_assert_eq!(row.iter().sum::<usize>(), t.iter().filter(|&&x| x == k).count());
            }
        }
    }
}
