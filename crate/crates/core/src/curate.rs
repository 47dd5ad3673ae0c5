//! Match an ordered list of species annotations to detected fish by
//! maximizing the joint classifier likelihood over permutations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::BBox;

pub const DEFAULT_EPSILON: f64 = 1e-12;
/// Largest `n` solved by enumerating all permutations.
pub const EXHAUSTIVE_MAX: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurateError {
    #[error("no fish to order")]
    Empty,
    #[error("{labels} annotations but {fish} detected fish")]
    CountMismatch { labels: usize, fish: usize },
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("not a permutation of 0..{0}")]
    InvalidPermutation(usize),
    #[error("label {label} outside the {classes}-class posterior")]
    LabelOutOfRange { label: usize, classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignMethod {
    TrivialSmall,
    Exhaustive,
    OptimalAssignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `perm[label_index] = fish_index`.
    pub perm: Vec<usize>,
    pub log_likelihood: f64,
    pub method: AssignMethod,
}

/// Reading order of fish boxes: rows top to bottom, then left to right.
/// A new row starts when the next center is more than half the median box
/// height below the previous one.
pub fn canonical_order(boxes: &[BBox]) -> Result<Vec<usize>, CurateError> {
    if boxes.is_empty() {
        return Err(CurateError::Empty);
    }
    let centers: Vec<(f64, f64)> = boxes.iter().map(BBox::center).collect();
    let mut heights: Vec<u32> = boxes.iter().map(BBox::height).collect();
    heights.sort_unstable();
    let n = heights.len();
    let median_h = if n % 2 == 1 { f64::from(heights[n / 2]) } else { (f64::from(heights[n / 2 - 1]) + f64::from(heights[n / 2])) / 2.0 };
    let gap = 0.5 * median_h;

    let mut by_y: Vec<usize> = (0..n).collect();
    by_y.sort_by(|&a, &b| centers[a].1.total_cmp(&centers[b].1).then(a.cmp(&b)));
    let mut rows: Vec<Vec<usize>> = Vec::new();
    let mut prev_y = f64::NEG_INFINITY;
    for i in by_y {
        let y = centers[i].1;
        match rows.last_mut() {
            Some(row) if y - prev_y <= gap => row.push(i),
            _ => rows.push(vec![i]),
        }
        prev_y = y;
    }
    let mut order = Vec::with_capacity(n);
    for mut row in rows {
        row.sort_by(|&a, &b| centers[a].0.total_cmp(&centers[b].0).then(a.cmp(&b)));
        order.extend(row);
    }
    Ok(order)
}

fn check_perm(perm: &[usize]) -> Result<(), CurateError> {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
            return Err(CurateError::InvalidPermutation(perm.len()));
        }
    }
    Ok(())
}

fn check_inputs(posteriors: &[Vec<f64>], labels: &[usize]) -> Result<(), CurateError> {
    if posteriors.len() != labels.len() {
        return Err(CurateError::CountMismatch { labels: labels.len(), fish: posteriors.len() });
    }
    if labels.is_empty() {
        return Err(CurateError::Empty);
    }
    let classes = posteriors[0].len();
    if posteriors.iter().any(|p| p.len() != classes) {
        return Err(CurateError::SizeMismatch("posterior rows differ in length".into()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(CurateError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

fn term(p: f64, eps: f64) -> f64 {
    p.max(eps).ln()
}

/// `Σ_i ln max(posteriors[perm[i]][labels[i]], eps)`. Terms are added in
/// ascending order, so permutations that pair the same fish with equal labels
/// give bit-identical sums.
pub fn permutation_loglik(posteriors: &[Vec<f64>], labels: &[usize], perm: &[usize], eps: f64) -> Result<f64, CurateError> {
    if perm.len() != labels.len() {
        return Err(CurateError::SizeMismatch(format!("{} labels, permutation of {}", labels.len(), perm.len())));
    }
    check_inputs(posteriors, labels)?;
    check_perm(perm)?;
    Ok(loglik_unchecked(posteriors, labels, perm, eps))
}

fn loglik_unchecked(posteriors: &[Vec<f64>], labels: &[usize], perm: &[usize], eps: f64) -> f64 {
    let mut terms: Vec<f64> = labels.iter().zip(perm).map(|(&l, &f)| term(posteriors[f][l], eps)).collect();
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

/// Minimum number of transpositions turning `perm` into `prior`.
fn transposition_distance(perm: &[usize], prior: &[usize]) -> usize {
    let mut inv_prior = vec![0; prior.len()];
    for (i, &p) in prior.iter().enumerate() {
        inv_prior[p] = i;
    }
    let mut seen = vec![false; perm.len()];
    let mut cycles = 0;
    for start in 0..perm.len() {
        if seen[start] {
            continue;
        }
        cycles += 1;
        let mut i = start;
        while !seen[i] {
            seen[i] = true;
            i = inv_prior[perm[i]];
        }
    }
    perm.len() - cycles
}

fn tied(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// True when `(ll, perm)` should replace the incumbent.
fn better(ll: f64, perm: &[usize], best_ll: f64, best: &[usize], prior: &[usize]) -> bool {
    if tied(ll, best_ll) {
        let (d, bd) = (transposition_distance(perm, prior), transposition_distance(best, prior));
        d < bd || (d == bd && perm < best)
    } else {
        ll > best_ll
    }
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

fn check_prior(prior: &[usize], n: usize) -> Result<(), CurateError> {
    if prior.len() != n {
        return Err(CurateError::SizeMismatch(format!("prior order of {} for {n} fish", prior.len())));
    }
    check_perm(prior)
}

/// Best permutation by enumeration of all `n!` candidates.
pub fn assign_exhaustive(posteriors: &[Vec<f64>], labels: &[usize], prior: &[usize], eps: f64) -> Result<Assignment, CurateError> {
    check_inputs(posteriors, labels)?;
    check_prior(prior, labels.len())?;
    let mut perm: Vec<usize> = (0..labels.len()).collect();
    let mut best = perm.clone();
    let mut best_ll = loglik_unchecked(posteriors, labels, &perm, eps);
    while next_permutation(&mut perm) {
        let ll = loglik_unchecked(posteriors, labels, &perm, eps);
        if better(ll, &perm, best_ll, &best, prior) {
            best_ll = ll;
            best.copy_from_slice(&perm);
        }
    }
    Ok(Assignment { perm: best, log_likelihood: best_ll, method: AssignMethod::Exhaustive })
}

/// Minimum-cost assignment (rows to columns) of a square matrix, O(n³).
/// Returns `col[row]`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based potentials over rows (u) and columns (v); p[j] is the row
    // assigned to column j, with column 0 as the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col = vec![0; n];
    for j in 1..=n {
        col[p[j] - 1] = j - 1;
    }
    col
}

/// Linear-assignment solution on cost `-ln max(p, eps)`, then pairwise swaps
/// that keep the likelihood tied but move closer to the prior order.
pub fn assign_optimal(posteriors: &[Vec<f64>], labels: &[usize], prior: &[usize], eps: f64) -> Result<Assignment, CurateError> {
    check_inputs(posteriors, labels)?;
    check_prior(prior, labels.len())?;
    let cost: Vec<Vec<f64>> =
        labels.iter().map(|&l| posteriors.iter().map(|row| -term(row[l], eps)).collect()).collect();
    let mut perm = hungarian(&cost);
    let mut ll = loglik_unchecked(posteriors, labels, &perm, eps);
    let n = perm.len();
    let mut improved = true;
    while improved {
        improved = false;
        for a in 0..n {
            for b in a + 1..n {
                let mut cand = perm.clone();
                cand.swap(a, b);
                let cll = loglik_unchecked(posteriors, labels, &cand, eps);
                if better(cll, &cand, ll, &perm, prior) {
                    perm = cand;
                    ll = cll;
                    improved = true;
                }
            }
        }
    }
    Ok(Assignment { perm, log_likelihood: ll, method: AssignMethod::OptimalAssignment })
}

/// Maximum-likelihood pairing of `labels` (annotation order) with fish whose
/// posteriors are `posteriors[fish][species]`. `prior` is the fish reading
/// order, the pairing assumed when likelihoods tie.
pub fn assign_labels(posteriors: &[Vec<f64>], labels: &[usize], prior: &[usize], eps: f64) -> Result<Assignment, CurateError> {
    check_inputs(posteriors, labels)?;
    let n = labels.len();
    if n <= 2 {
        let a = assign_exhaustive(posteriors, labels, prior, eps)?;
        Ok(Assignment { method: AssignMethod::TrivialSmall, ..a })
    } else if n <= EXHAUSTIVE_MAX {
        assign_exhaustive(posteriors, labels, prior, eps)
    } else {
        assign_optimal(posteriors, labels, prior, eps)
    }
}
