//! Maximum-weight one-to-one assignment (Hungarian algorithm).
//!
//! Used to pair mask proposals with ground-truth instances by total IoU.
//! Weights at or below zero count as "no edge": such pairs are never part of
//! the returned assignment.

use ndarray::Array2;

/// Best one-to-one assignment maximizing total weight.
///
/// Returns, for every row, the assigned column or `None`.  Rows and columns
/// may differ in count; entries `<= 0` are treated as unassignable.
pub fn max_weight_assignment(weights: &Array2<f64>) -> Vec<Option<usize>> {
    let rows = weights.nrows();
    let cols = weights.ncols();
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    let n = rows.max(cols);
    // Pad to square and clamp non-positive weights to zero so their cells are
    // interchangeable with padding.
    let mut cost = vec![vec![0.0f64; n + 1]; n + 1];
    for r in 0..rows {
        for c in 0..cols {
            cost[r + 1][c + 1] = -weights[(r, c)].max(0.0);
        }
    }

    // Min-cost assignment with row/column potentials; O(n^3).
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j]: row matched to column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0][j] - u[i0] - v[j];
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

    let mut assignment = vec![None; rows];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i <= rows && j <= cols && weights[(i - 1, j - 1)] > 0.0 {
            assignment[i - 1] = Some(j - 1);
        }
    }
    assignment
}

/// Total weight of an assignment.
pub fn assignment_weight(weights: &Array2<f64>, assignment: &[Option<usize>]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| weights[(r, c)]))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive maximum over all partial injective row -> column maps.
    fn brute_force(weights: &Array2<f64>) -> f64 {
        fn recurse(weights: &Array2<f64>, row: usize, used: &mut Vec<bool>) -> f64 {
            if row == weights.nrows() {
                return 0.0;
            }
            // Leave this row unassigned...
            let mut best = recurse(weights, row + 1, used);
            // ...or try every free column with positive weight.
            for c in 0..weights.ncols() {
                if !used[c] && weights[(row, c)] > 0.0 {
                    used[c] = true;
                    let total = weights[(row, c)] + recurse(weights, row + 1, used);
                    used[c] = false;
                    best = best.max(total);
                }
            }
            best
        }
        recurse(weights, 0, &mut vec![false; weights.ncols()])
    }

    #[test]
    fn identity_matrix_assigns_the_diagonal() {
        let w = Array2::eye(3);
        let assignment = max_weight_assignment(&w);
        assert_eq!(assignment, vec![Some(0), Some(1), Some(2)]);
    }

    #[test]
    fn crossed_weights_force_the_swap() {
        let w = array![[0.1, 0.9], [0.8, 0.2]];
        let assignment = max_weight_assignment(&w);
        assert_eq!(assignment, vec![Some(1), Some(0)]);
    }

    #[test]
    fn non_positive_weights_are_never_assigned() {
        let w = array![[0.0, -1.0], [0.0, 0.5]];
        let assignment = max_weight_assignment(&w);
        assert_eq!(assignment[0], None);
        assert_eq!(assignment[1], Some(1));
    }

    #[test]
    fn more_rows_than_columns_leaves_the_weakest_row_out() {
        let w = array![[0.9], [0.5], [0.7]];
        let assignment = max_weight_assignment(&w);
        assert_eq!(assignment, vec![Some(0), None, None]);
    }

    #[test]
    fn empty_inputs_yield_empty_assignments() {
        let w = Array2::<f64>::zeros((0, 3));
        assert!(max_weight_assignment(&w).is_empty());
        let w = Array2::<f64>::zeros((3, 0));
        assert_eq!(max_weight_assignment(&w), vec![None, None, None]);
    }

    #[test]
    fn assignments_are_injective_and_match_brute_force_totals() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..500 {
            let rows = rng.random_range(1..=5);
            let cols = rng.random_range(1..=5);
            let w = Array2::from_shape_fn((rows, cols), |_| {
                if rng.random::<f64>() < 0.2 {
                    0.0
                } else {
                    rng.random::<f64>()
                }
            });
            let assignment = max_weight_assignment(&w);
            let mut seen = std::collections::HashSet::new();
            for c in assignment.iter().flatten() {
                assert!(seen.insert(*c), "case {case}: column {c} assigned twice");
            }
            let total = assignment_weight(&w, &assignment);
            let best = brute_force(&w);
            assert!(
                (total - best).abs() < 1e-9,
                "case {case}: hungarian {total} vs brute force {best} for {w:?}"
            );
        }
    }
}
