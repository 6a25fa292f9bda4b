//! One pruning event: anchor and reference selection, anchor-reference
//! contrastive scoring, two-tail retention and ordered recomposition.
//!
//! All indices here are positions in the matrix handed to [`route_layer`];
//! the scheduler maps them back to original visual-token coordinates.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budgeting::BudgetSplit;
use crate::numeric::{compensated_sum, cosine_with_norms, norm, Matrix};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RoutingError {
    #[error("KTooLarge: requested {k} of {len} entries")]
    KTooLarge { k: usize, len: usize },
    #[error("EmptyAnchorSet: contrastive scoring needs at least one anchor")]
    EmptyAnchorSet,
    #[error("EmptyReferenceSet: contrastive scoring needs at least one reference")]
    EmptyReferenceSet,
    #[error("DimensionMismatch: expected length {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("InfeasibleSplit: {0}")]
    InfeasibleSplit(String),
}

/// Score order where `-0.0 == 0.0`. Inputs are finite.
#[inline]
fn cmp_scores(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

fn select_by(scores: &[f64], k: usize, descending: bool) -> Result<Vec<usize>, RoutingError> {
    if k > scores.len() {
        return Err(RoutingError::KTooLarge { k, len: scores.len() });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let order = |&a: &usize, &b: &usize| {
        let by_score = if descending {
            cmp_scores(scores[b], scores[a])
        } else {
            cmp_scores(scores[a], scores[b])
        };
        by_score.then(a.cmp(&b))
    };
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable();
    Ok(idx)
}

/// Indices of the `k` largest scores, ties to the smaller index, ascending.
pub fn select_top_k(scores: &[f64], k: usize) -> Result<Vec<usize>, RoutingError> {
    select_by(scores, k, true)
}

/// Indices of the `k` smallest scores, ties to the smaller index, ascending.
pub fn select_bottom_k(scores: &[f64], k: usize) -> Result<Vec<usize>, RoutingError> {
    select_by(scores, k, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple {
    /// Max cosine to the anchor set.
    pub sim_a: f64,
    /// Mean cosine to the reference set.
    pub sim_r: f64,
    /// `sim_a - sim_r`.
    pub score: f64,
}

/// Scores `candidate` against `anchors` (max cosine) and `references`
/// (mean cosine).
pub fn contrastive_score<A, R>(candidate: &[f64], anchors: &[A], references: &[R]) -> Result<ScoreTriple, RoutingError>
where
    A: AsRef<[f64]>,
    R: AsRef<[f64]>,
{
    if anchors.is_empty() {
        return Err(RoutingError::EmptyAnchorSet);
    }
    if references.is_empty() {
        return Err(RoutingError::EmptyReferenceSet);
    }
    let d = candidate.len();
    for v in anchors
        .iter()
        .map(AsRef::as_ref)
        .chain(references.iter().map(AsRef::as_ref))
    {
        if v.len() != d {
            return Err(RoutingError::DimensionMismatch {
                expected: d,
                actual: v.len(),
            });
        }
    }
    let anchors: Vec<(&[f64], f64)> = anchors.iter().map(|a| (a.as_ref(), norm(a.as_ref()))).collect();
    let refs: Vec<(&[f64], f64)> = references.iter().map(|r| (r.as_ref(), norm(r.as_ref()))).collect();
    Ok(score_with_norms(candidate, norm(candidate), &anchors, &refs))
}

fn score_with_norms(c: &[f64], nc: f64, anchors: &[(&[f64], f64)], refs: &[(&[f64], f64)]) -> ScoreTriple {
    let sim_a = anchors
        .iter()
        .map(|&(a, na)| cosine_with_norms(c, nc, a, na))
        .fold(f64::NEG_INFINITY, f64::max);
    let sim_r = compensated_sum(refs.iter().map(|&(r, nr)| cosine_with_norms(c, nc, r, nr))) / refs.len() as f64;
    ScoreTriple {
        sim_a,
        sim_r,
        score: sim_a - sim_r,
    }
}

/// Outcome of one pruning event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRoutingResult {
    pub anchors: Vec<usize>,
    pub top_n1: Vec<usize>,
    pub bottom_n2: Vec<usize>,
    /// Sorted union of the three retained groups.
    pub kept: Vec<usize>,
    pub references: Vec<usize>,
    /// Non-anchor indices in ascending order; `scores` is aligned with it.
    pub candidates: Vec<usize>,
    pub scores: Vec<f64>,
    pub split: BudgetSplit,
    /// Number of cosine evaluations performed, `|C| * (k_a + k_r)`.
    pub cosine_evals: usize,
}

impl LayerRoutingResult {
    /// Re-expresses every index through `map` (local position -> original index).
    pub fn remap(&self, map: &[usize]) -> Self {
        let m = |v: &[usize]| v.iter().map(|&i| map[i]).collect::<Vec<_>>();
        Self {
            anchors: m(&self.anchors),
            top_n1: m(&self.top_n1),
            bottom_n2: m(&self.bottom_n2),
            kept: m(&self.kept),
            references: m(&self.references),
            candidates: m(&self.candidates),
            scores: self.scores.clone(),
            split: self.split,
            cosine_evals: self.cosine_evals,
        }
    }
}

/// Runs anchor selection, contrastive scoring and two-tail retention over
/// `hidden_v` (one row per visual token).
///
/// References are the bottom-`k_r` tokens by `s_glo` over all tokens, so a
/// reference may also be an anchor or a candidate. The bottom-`n2` tail is
/// drawn from candidates not already in the top-`n1` tail.
pub fn route_layer(
    hidden_v: &Matrix,
    s_glo: &[f64],
    s_last: &[f64],
    split: &BudgetSplit,
) -> Result<LayerRoutingResult, RoutingError> {
    let n = hidden_v.rows();
    for len in [s_glo.len(), s_last.len()] {
        if len != n {
            return Err(RoutingError::DimensionMismatch {
                expected: n,
                actual: len,
            });
        }
    }
    if split.k_a == 0 || split.k_a > n {
        return Err(RoutingError::InfeasibleSplit(format!(
            "k_a = {} must lie in [1, {n}]",
            split.k_a
        )));
    }
    if split.n1 + split.n2 > n - split.k_a {
        return Err(RoutingError::InfeasibleSplit(format!(
            "n1 + n2 = {} exceeds the {} non-anchor candidates",
            split.n1 + split.n2,
            n - split.k_a
        )));
    }
    if split.k_r == 0 || split.k_r > n {
        return Err(RoutingError::InfeasibleSplit(format!(
            "k_r = {} must lie in [1, {n}]",
            split.k_r
        )));
    }

    let anchors = select_top_k(s_last, split.k_a)?;
    let references = select_bottom_k(s_glo, split.k_r)?;

    let mut is_anchor = vec![false; n];
    for &a in &anchors {
        is_anchor[a] = true;
    }
    let candidates: Vec<usize> = (0..n).filter(|&i| !is_anchor[i]).collect();

    let norms: Vec<f64> = hidden_v.iter_rows().map(norm).collect();
    let anchor_rows: Vec<(&[f64], f64)> = anchors.iter().map(|&i| (hidden_v.row(i), norms[i])).collect();
    let ref_rows: Vec<(&[f64], f64)> = references.iter().map(|&i| (hidden_v.row(i), norms[i])).collect();
    let scores: Vec<f64> = candidates
        .iter()
        .map(|&c| score_with_norms(hidden_v.row(c), norms[c], &anchor_rows, &ref_rows).score)
        .collect();

    let top_local = select_top_k(&scores, split.n1)?;
    let mut in_top = vec![false; candidates.len()];
    for &t in &top_local {
        in_top[t] = true;
    }
    let remaining: Vec<usize> = (0..candidates.len()).filter(|&i| !in_top[i]).collect();
    let remaining_scores: Vec<f64> = remaining.iter().map(|&i| scores[i]).collect();
    let bottom_local: Vec<usize> = select_bottom_k(&remaining_scores, split.n2)?
        .into_iter()
        .map(|i| remaining[i])
        .collect();

    let top_n1: Vec<usize> = top_local.iter().map(|&i| candidates[i]).collect();
    let bottom_n2: Vec<usize> = bottom_local.iter().map(|&i| candidates[i]).collect();
    let mut kept: Vec<usize> = anchors.iter().chain(&top_n1).chain(&bottom_n2).copied().collect();
    kept.sort_unstable();

    Ok(LayerRoutingResult {
        cosine_evals: candidates.len() * (anchors.len() + references.len()),
        anchors,
        top_n1,
        bottom_n2,
        kept,
        references,
        candidates,
        scores,
        split: *split,
    })
}
