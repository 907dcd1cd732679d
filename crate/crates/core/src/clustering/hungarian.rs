use crate::error::{Error, Result};

/// Minimum-cost perfect matching.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `row_to_col[i]` is the column matched to row `i`. For rectangular input
    /// the matrix is zero-padded to square, so entries may point at padding.
    pub row_to_col: Vec<usize>,
    /// Total cost over the original (unpadded) entries.
    pub cost: f64,
}

/// Shortest-augmenting-path Hungarian method with potentials, `O(n^3)`.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != cols) {
        return Err(Error::invalid("cost matrix rows have unequal lengths"));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("cost matrix contains non-finite entries"));
    }
    let n = rows.max(cols);
    if n == 0 {
        return Ok(Assignment { row_to_col: Vec::new(), cost: 0.0 });
    }
    let at = |i: usize, j: usize| if i < rows && j < cols { cost[i][j] } else { 0.0 };

    // 1-based arrays; index 0 is the virtual root of each augmenting search
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if col_owner[j] > 0 {
            row_to_col[col_owner[j] - 1] = j - 1;
        }
    }
    row_to_col.truncate(rows);
    let total = row_to_col
        .iter()
        .enumerate()
        .map(|(i, &j)| at(i, j))
        .sum();
    Ok(Assignment { row_to_col, cost: total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..cost.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[row][j] + go(cost, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        go(cost, 0, &mut vec![false; cost.len()])
    }

    #[test]
    fn zero_diagonal_gives_identity() {
        let c = vec![vec![0.0, 2.0, 3.0], vec![4.0, 0.0, 1.0], vec![5.0, 6.0, 0.0]];
        let a = hungarian(&c).unwrap();
        assert_eq!(a.row_to_col, vec![0, 1, 2]);
        assert_eq!(a.cost, 0.0);
    }

    #[test]
    fn two_by_two() {
        let a = hungarian(&[vec![1.0, 2.0], vec![3.0, 1.0]]).unwrap();
        assert_eq!(a.row_to_col, vec![0, 1]);
        assert_eq!(a.cost, 2.0);
    }

    #[test]
    fn rectangular_is_padded() {
        let a = hungarian(&[vec![5.0, 1.0, 9.0], vec![1.0, 7.0, 9.0]]).unwrap();
        assert_eq!(a.row_to_col, vec![1, 0]);
        assert_eq!(a.cost, 2.0);
        let tall = hungarian(&[vec![3.0], vec![1.0], vec![2.0]]).unwrap();
        assert_eq!(tall.row_to_col.len(), 3);
        assert_eq!(tall.cost, 1.0);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(hungarian(&[vec![f64::NAN]]).is_err());
        assert!(hungarian(&[vec![1.0, 2.0], vec![1.0]]).is_err());
    }

    proptest! {
        #[test]
        fn matches_brute_force(c in prop::collection::vec(prop::collection::vec(0i32..50, 5), 5)) {
            let cost: Vec<Vec<f64>> = c.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
            let a = hungarian(&cost).unwrap();
            prop_assert_eq!(a.cost, brute_force(&cost));
            let mut seen = a.row_to_col.clone();
            seen.sort();
            prop_assert_eq!(seen, (0..5).collect::<Vec<_>>());
        }

        #[test]
        fn invariant_under_uniform_shift(c in prop::collection::vec(prop::collection::vec(0i32..20, 4), 4), shift in -10i32..10) {
            let cost: Vec<Vec<f64>> = c.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
            let shifted: Vec<Vec<f64>> = cost.iter().map(|r| r.iter().map(|v| v + shift as f64).collect()).collect();
            let a = hungarian(&cost).unwrap();
            let b = hungarian(&shifted).unwrap();
            prop_assert_eq!(b.cost, a.cost + 4.0 * shift as f64);
        }
    }
}
