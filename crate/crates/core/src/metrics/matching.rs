use serde::{Deserialize, Serialize};

use super::overlap_prf;
use crate::mask::Mask;

/// Partial bijection between predictions and ground-truth instances.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(pred_index, gt_index)`, sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`),
/// shortest augmenting path with potentials, O(rows^2 * cols).
fn min_cost_assignment(cost: &[Vec<f64>], cols: usize) -> Vec<usize> {
    let n = cost.len();
    debug_assert!(n <= cols);
    let inf = f64::INFINITY;
    // 1-based; column 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
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
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=cols {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Maximum-weight matching on a `rows x cols` weight matrix; pairs with zero
/// (or negative) weight are dropped.
pub fn match_by_weight(weights: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let mut pairs: Vec<(usize, usize)> = if rows <= cols {
        let cost: Vec<Vec<f64>> = weights.iter().map(|r| r.iter().map(|w| -w).collect()).collect();
        min_cost_assignment(&cost, cols)
            .into_iter()
            .enumerate()
            .collect()
    } else {
        let cost: Vec<Vec<f64>> = (0..cols)
            .map(|j| (0..rows).map(|i| -weights[i][j]).collect())
            .collect();
        min_cost_assignment(&cost, rows)
            .into_iter()
            .enumerate()
            .map(|(j, i)| (i, j))
            .collect()
    };
    pairs.retain(|&(i, j)| weights[i][j] > 0.0);
    pairs.sort_unstable();
    pairs
}

/// Matches predictions to ground truth maximizing the total amodal Overlap-F.
pub fn hungarian_match(preds: &[Mask], gts: &[Mask]) -> MatchResult {
    let weights: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| gts.iter().map(|g| overlap_prf(p, g).f).collect())
        .collect();
    let pairs = match_by_weight(&weights);
    let unmatched_preds = (0..preds.len())
        .filter(|i| !pairs.iter().any(|&(p, _)| p == *i))
        .collect();
    let unmatched_gts = (0..gts.len())
        .filter(|j| !pairs.iter().any(|&(_, g)| g == *j))
        .collect();
    MatchResult {
        pairs,
        unmatched_preds,
        unmatched_gts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_example() {
        let w = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        assert_eq!(match_by_weight(&w), vec![(0, 0), (1, 1)]);
        let crossed = vec![vec![0.1, 0.9], vec![0.8, 0.2]];
        assert_eq!(match_by_weight(&crossed), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn rectangular_and_empty() {
        assert!(match_by_weight(&[]).is_empty());
        let w = vec![vec![0.2], vec![0.7], vec![0.0]];
        assert_eq!(match_by_weight(&w), vec![(1, 0)]);
        let wide = vec![vec![0.0, 0.0, 0.4]];
        assert_eq!(match_by_weight(&wide), vec![(0, 2)]);
    }

    #[test]
    fn zero_weight_pairs_are_unmatched() {
        let a = Mask::rect(10, 10, 0, 0, 3, 3);
        let b = Mask::rect(10, 10, 6, 6, 9, 9);
        let r = hungarian_match(&[a], &[b]);
        assert!(r.pairs.is_empty());
        assert_eq!(r.unmatched_preds, vec![0]);
        assert_eq!(r.unmatched_gts, vec![0]);
    }

    #[test]
    fn identical_lists_pair_identically() {
        let masks: Vec<Mask> = (0..4).map(|i| Mask::rect(20, 20, i * 5, 0, i * 5 + 4, 6)).collect();
        let r = hungarian_match(&masks, &masks);
        assert_eq!(r.pairs, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
    }
}
