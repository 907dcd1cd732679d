use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::hungarian::hungarian;
use crate::error::{Error, Result};

/// Clustering accuracy after optimal cluster-to-class matching.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccReport {
    pub acc_all: f64,
    /// Accuracy over points whose true class is old; 0 when there are none.
    pub acc_old: f64,
    /// Accuracy over points whose true class is new; 0 when there are none.
    pub acc_new: f64,
    pub n_all: usize,
    pub n_old: usize,
    pub n_new: usize,
    /// Predicted cluster to matched class.
    pub permutation: BTreeMap<usize, usize>,
}

/// One Hungarian matching over all points, then accuracies restricted to
/// old/new ground-truth subsets.
pub fn cluster_acc(y_true: &[usize], y_pred: &[usize], old_classes: &BTreeSet<usize>) -> Result<AccReport> {
    if y_true.len() != y_pred.len() {
        return Err(Error::shape("cluster_acc", &[y_true.len()], &[y_pred.len()]));
    }
    let n = y_true.len();
    if n == 0 {
        return Ok(AccReport {
            acc_all: 0.0,
            acc_old: 0.0,
            acc_new: 0.0,
            n_all: 0,
            n_old: 0,
            n_new: 0,
            permutation: BTreeMap::new(),
        });
    }
    let size = y_true.iter().chain(y_pred).max().copied().unwrap_or(0) + 1;
    let mut counts = vec![vec![0.0; size]; size];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        counts[p][t] += 1.0;
    }
    let cost: Vec<Vec<f64>> = counts.iter().map(|r| r.iter().map(|c| -c).collect()).collect();
    let assignment = hungarian(&cost)?;
    let used: BTreeSet<usize> = y_pred.iter().copied().collect();
    let permutation: BTreeMap<usize, usize> = used.iter().map(|&p| (p, assignment.row_to_col[p])).collect();

    let mut hits = [0usize; 3];
    let mut totals = [0usize; 3];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        let ok = permutation[&p] == t;
        let group = if old_classes.contains(&t) { 1 } else { 2 };
        for g in [0, group] {
            totals[g] += 1;
            hits[g] += ok as usize;
        }
    }
    let frac = |g: usize| if totals[g] == 0 { 0.0 } else { hits[g] as f64 / totals[g] as f64 };
    Ok(AccReport {
        acc_all: frac(0),
        acc_old: frac(1),
        acc_new: frac(2),
        n_all: totals[0],
        n_old: totals[1],
        n_new: totals[2],
        permutation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn old(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn identical_labels_score_one() {
        let y = vec![0, 1, 2, 2, 1];
        let r = cluster_acc(&y, &y, &old(&[0, 1])).unwrap();
        assert_eq!((r.acc_all, r.acc_old, r.acc_new), (1.0, 1.0, 1.0));
    }

    #[test]
    fn worked_example() {
        let r = cluster_acc(&[0, 0, 1, 1], &[1, 1, 1, 0], &old(&[0])).unwrap();
        assert_eq!(r.acc_all, 0.75);
        assert_eq!(r.permutation[&1], 0);
        assert_eq!(r.permutation[&0], 1);
        assert_eq!(r.acc_old, 1.0);
        assert_eq!(r.acc_new, 0.5);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(cluster_acc(&[0, 1], &[0], &old(&[0])).is_err());
    }

    #[test]
    fn single_matching_is_shared_by_subsets() {
        // per-subset matching would give old = new = 1.0 here
        let y_true = vec![0, 0, 1, 1];
        let y_pred = vec![0, 0, 0, 0];
        let r = cluster_acc(&y_true, &y_pred, &old(&[0])).unwrap();
        assert_eq!(r.acc_all, 0.5);
        assert_eq!(r.acc_old, 1.0);
        assert_eq!(r.acc_new, 0.0);
    }

    proptest! {
        #[test]
        fn invariant_under_relabeling(
            pairs in prop::collection::vec((0usize..5, 0usize..5), 1..40),
            perm_p in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
            perm_t in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let y_true: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let y_pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let base = cluster_acc(&y_true, &y_pred, &old(&[0, 1])).unwrap();
            let relabeled: Vec<usize> = y_pred.iter().map(|&p| perm_p[p]).collect();
            let r = cluster_acc(&y_true, &relabeled, &old(&[0, 1])).unwrap();
            prop_assert_eq!(r.acc_all, base.acc_all);
            let t2: Vec<usize> = y_true.iter().map(|&t| perm_t[t]).collect();
            let old2 = old(&[perm_t[0], perm_t[1]]);
            let r2 = cluster_acc(&t2, &y_pred, &old2).unwrap();
            prop_assert_eq!(r2.acc_all, base.acc_all);
            prop_assert!(r.acc_all >= 0.0 && r.acc_all <= 1.0);
            // a permuted prediction of the truth is always perfect
            let pt: Vec<usize> = y_true.iter().map(|&t| perm_p[t]).collect();
            prop_assert_eq!(cluster_acc(&y_true, &pt, &old(&[0])).unwrap().acc_all, 1.0);
        }
    }
}
