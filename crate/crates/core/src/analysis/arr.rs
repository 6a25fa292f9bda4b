//! Attention Rise Ratio: how many tokens ranked outside the top-`k` at a
//! shallow reference layer enter the top-`k` at each later layer.

use serde::{Deserialize, Serialize};

use super::{bootstrap_ci, AnalysisError};
use crate::routing::select_top_k;

/// Per-layer ARR of one sample, starting at the reference layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrCurve {
    pub prune_layer: usize,
    pub budget: usize,
    pub n_visual: usize,
    /// Layer indices `prune_layer..n_layers`.
    pub layers: Vec<usize>,
    /// Fraction of the discarded set inside each layer's top-`k`.
    pub per_layer: Vec<f64>,
}

/// ARR of one sample from per-layer token scores.
///
/// The discarded set is the complement of the top-`k` at `prune_layer`
/// (ties broken toward the lower index, as in pruning), so the value at
/// `prune_layer` is exactly 0.
pub fn arr_curve(scores_by_layer: &[Vec<f64>], prune_layer: usize, k: usize) -> Result<ArrCurve, AnalysisError> {
    let Some(reference) = scores_by_layer.get(prune_layer) else {
        return Err(AnalysisError::LayerMissing(format!(
            "prune layer {prune_layer} not among {} scored layers",
            scores_by_layer.len()
        )));
    };
    let n_visual = reference.len();
    if k < 1 || k >= n_visual {
        return Err(AnalysisError::BudgetOutOfRange { k, n_visual });
    }
    if let Some((l, s)) = scores_by_layer.iter().enumerate().find(|(_, s)| s.len() != n_visual) {
        return Err(AnalysisError::ShapeMismatch(format!(
            "layer {l} scores {} tokens, prune layer scores {n_visual}",
            s.len()
        )));
    }

    let top = select_top_k(reference, k).expect("k < n_visual");
    let mut discarded = vec![true; n_visual];
    for i in top {
        discarded[i] = false;
    }
    let n_discarded = (n_visual - k) as f64;

    let layers: Vec<usize> = (prune_layer..scores_by_layer.len()).collect();
    let per_layer = layers
        .iter()
        .map(|&l| {
            let top_l = select_top_k(&scores_by_layer[l], k).expect("k < n_visual");
            top_l.iter().filter(|&&i| discarded[i]).count() as f64 / n_discarded
        })
        .collect();

    Ok(ArrCurve {
        prune_layer,
        budget: k,
        n_visual,
        layers,
        per_layer,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrRow {
    pub layer: usize,
    pub arr_mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// ARR averaged over samples with bootstrap intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrReport {
    pub budget: usize,
    pub prune_layer: usize,
    pub n_samples: usize,
    pub resamples: usize,
    pub seed: u64,
    pub rows: Vec<ArrRow>,
}

/// Unweighted per-layer mean of per-sample fractions, with a percentile
/// bootstrap interval per layer.
pub fn aggregate_arr(curves: &[ArrCurve], resamples: usize, seed: u64) -> Result<ArrReport, AnalysisError> {
    let Some(first) = curves.first() else {
        return Err(AnalysisError::EmptyInput("no ARR curves to aggregate".into()));
    };
    for c in curves {
        if c.layers != first.layers || c.budget != first.budget {
            return Err(AnalysisError::ShapeMismatch(format!(
                "curves disagree on layers/budget: {:?}/{} vs {:?}/{}",
                c.layers, c.budget, first.layers, first.budget
            )));
        }
    }
    let rows = first
        .layers
        .iter()
        .enumerate()
        .map(|(j, &layer)| {
            let values: Vec<f64> = curves.iter().map(|c| c.per_layer[j]).collect();
            let ci = bootstrap_ci(&values, resamples, seed)?;
            Ok(ArrRow {
                layer,
                arr_mean: ci.mean,
                ci_low: ci.ci_low,
                ci_high: ci.ci_high,
            })
        })
        .collect::<Result<Vec<_>, AnalysisError>>()?;
    Ok(ArrReport {
        budget: first.budget,
        prune_layer: first.prune_layer,
        n_samples: curves.len(),
        resamples,
        seed,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn four_token_hand_case() {
        let scores = vec![
            vec![9.0, 9.0, 9.0, 9.0],
            vec![0.0; 4],
            vec![4.0, 3.0, 2.0, 1.0],
            vec![1.0, 2.0, 4.0, 3.0],
        ];
        let c = arr_curve(&scores, 2, 2).unwrap();
        assert_eq!(c.layers, vec![2, 3]);
        assert_eq!(c.per_layer, vec![0.0, 1.0]);
    }

    #[test]
    fn unchanged_ranking_gives_zero() {
        let s = vec![0.3, 0.1, 0.7, 0.2, 0.9];
        let c = arr_curve(&vec![s; 6], 1, 2).unwrap();
        assert!(c.per_layer.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn errors() {
        let s = vec![vec![0.1, 0.2, 0.3]; 3];
        assert!(matches!(arr_curve(&s, 3, 1), Err(AnalysisError::LayerMissing(_))));
        assert!(matches!(
            arr_curve(&s, 1, 3),
            Err(AnalysisError::BudgetOutOfRange { .. })
        ));
        assert!(matches!(
            arr_curve(&s, 1, 0),
            Err(AnalysisError::BudgetOutOfRange { .. })
        ));
        let ragged = vec![vec![0.1, 0.2, 0.3], vec![0.1, 0.2]];
        assert!(matches!(arr_curve(&ragged, 0, 1), Err(AnalysisError::ShapeMismatch(_))));
        assert!(matches!(aggregate_arr(&[], 10, 0), Err(AnalysisError::EmptyInput(_))));
    }

    #[test]
    fn aggregate_averages_samples() {
        let a = ArrCurve {
            prune_layer: 1,
            budget: 2,
            n_visual: 4,
            layers: vec![1, 2],
            per_layer: vec![0.0, 0.5],
        };
        let b = ArrCurve {
            per_layer: vec![0.0, 1.0],
            n_visual: 6,
            ..a.clone()
        };
        let r = aggregate_arr(&[a, b], 200, 42).unwrap();
        assert_eq!(
            r.rows[0],
            ArrRow {
                layer: 1,
                arr_mean: 0.0,
                ci_low: 0.0,
                ci_high: 0.0
            }
        );
        assert_eq!(r.rows[1].arr_mean, 0.75);
        assert!(r.rows[1].ci_low <= 0.75 && r.rows[1].ci_high >= 0.75);
        assert_eq!(r.n_samples, 2);
    }

    proptest! {
        #[test]
        fn invariant_under_increasing_transforms(
            seed in any::<u64>(), n in 3usize..40, layers in 2usize..6, kf in 0.0f64..1.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<Vec<f64>> = (0..layers).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
            let k = 1 + ((n - 2) as f64 * kf) as usize;
            let base = arr_curve(&scores, 0, k).unwrap();
            let warped: Vec<Vec<f64>> = scores.iter().map(|s| s.iter().map(|x| (3.0 * x).exp() + 1.0).collect()).collect();
            let other = arr_curve(&warped, 0, k).unwrap();
            prop_assert_eq!(&base.per_layer, &other.per_layer);
            prop_assert_eq!(base.per_layer[0], 0.0);
            prop_assert!(base.per_layer.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
