use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Injective prediction → ground-truth assignment.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchAssignment {
    /// `(prediction, ground_truth)` pairs, sorted by prediction.
    pub pairs: Vec<(usize, usize)>,
    /// Predictions left without a target ("no-object").
    pub unmatched: Vec<usize>,
}

impl MatchAssignment {
    pub fn target_of(&self, pred: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == pred).map(|p| p.1)
    }

    pub fn prediction_for(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == gt).map(|p| p.0)
    }

    pub fn total_cost(&self, cost: &Tensor) -> f64 {
        self.pairs.iter().map(|&(i, j)| cost.at(i, j)).sum()
    }
}

/// Shortest-augmenting-path assignment for `n ≤ m`; returns the column of
/// every row.
fn assign_rows(n: usize, m: usize, c: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row (1-based) assigned to column j; column 0 is the sentinel
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
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
    let mut row_to_col = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Minimum-total-cost injective assignment on an `n_pred × n_gt` cost
/// matrix. When there are more targets than predictions, only `n_pred`
/// targets are covered.
pub fn hungarian_match(cost: &Tensor) -> MatchAssignment {
    hungarian_match_with(cost.rows(), cost.cols(), |p, g| cost.at(p, g))
}

/// Same as [`hungarian_match`] for a cost given as a function, which also
/// admits an empty side.
pub fn hungarian_match_with(
    n_pred: usize,
    n_gt: usize,
    cost: impl Fn(usize, usize) -> f64,
) -> MatchAssignment {
    let mut pairs = Vec::new();
    if n_pred > 0 && n_gt > 0 {
        if n_gt <= n_pred {
            let cols = assign_rows(n_gt, n_pred, |g, p| cost(p, g));
            pairs = cols.into_iter().enumerate().map(|(g, p)| (p, g)).collect();
        } else {
            let cols = assign_rows(n_pred, n_gt, &cost);
            pairs = cols.into_iter().enumerate().collect();
        }
    }
    pairs.sort_unstable();
    let unmatched = (0..n_pred)
        .filter(|i| !pairs.iter().any(|p| p.0 == *i))
        .collect();
    MatchAssignment { pairs, unmatched }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complement_of_identity() {
        let c = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(hungarian_match(&c).pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn no_targets_leaves_everything_unmatched() {
        let m = hungarian_match_with(3, 0, |_, _| 0.0);
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched, vec![0, 1, 2]);
    }

    #[test]
    fn wide_matrix() {
        let c = Tensor::from_rows(&[vec![5.0, 1.0, 3.0]]).unwrap();
        assert_eq!(hungarian_match(&c).pairs, vec![(0, 1)]);
    }
}
