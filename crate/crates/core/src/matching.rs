//! Optimal component matching (Hungarian algorithm) on Frobenius distances
//! between scale matrices.

use nalgebra::DMatrix;

use crate::numcore::SpdMatrix;

/// Rescale finite costs into [−1, 1] and treat non-finite costs as worse
/// than any finite one.
fn sanitize(cost: &DMatrix<f64>) -> DMatrix<f64> {
    let scale = cost.iter().filter(|v| v.is_finite()).fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if scale > 0.0 { scale } else { 1.0 };
    cost.map(|v| if v.is_finite() { v / scale } else { 2.0 })
}

/// Minimum-cost perfect assignment for a square cost matrix. Returns
/// `assign` with `assign[row] = column`. Infinite or NaN costs are allowed
/// and rank above every finite cost.
pub fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    if n == 0 {
        return Vec::new();
    }
    let cost = &sanitize(cost);
    // Potentials-based O(n³) formulation with 1-based sentinel column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
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
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if col_owner[j] > 0 {
            assign[col_owner[j] - 1] = j - 1;
        }
    }
    assign
}

pub fn frobenius_sq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).iter().map(|x| x * x).sum()
}

/// `perm[k]` is the index among `estimate` matched to `reference[k]`.
pub fn match_scales(estimate: &[SpdMatrix], reference: &[SpdMatrix]) -> Vec<usize> {
    let k = reference.len();
    let cost = DMatrix::from_fn(k, k, |r, e| frobenius_sq(reference[r].entries(), estimate[e].entries()).sqrt());
    hungarian(&cost)
}

/// Inverse of a permutation.
pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn non_finite_costs_terminate() {
        let c = DMatrix::from_row_slice(3, 3, &[f64::INFINITY, 1.0, f64::NAN, 0.0, f64::INFINITY, 5.0, f64::NAN, 2.0, 0.5]);
        assert_eq!(hungarian(&c), vec![1, 0, 2]);
        let all = DMatrix::from_element(2, 2, f64::NAN);
        let mut a = hungarian(&all);
        a.sort();
        assert_eq!(a, vec![0, 1]);
    }

    fn brute_force(cost: &DMatrix<f64>) -> f64 {
        fn rec(cost: &DMatrix<f64>, row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.nrows() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for c in 0..cost.ncols() {
                if !used[c] {
                    used[c] = true;
                    best = best.min(cost[(row, c)] + rec(cost, row + 1, used));
                    used[c] = false;
                }
            }
            best
        }
        rec(cost, 0, &mut vec![false; cost.ncols()])
    }

    #[test]
    fn small_example() {
        let c = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0]);
        let a = hungarian(&c);
        let total: f64 = a.iter().enumerate().map(|(r, &col)| c[(r, col)]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn swapped_scales_are_matched() {
        let a = SpdMatrix::from_row_slice(2, &[0.5, 0.2, 0.2, 0.7]).unwrap();
        let b = SpdMatrix::from_row_slice(2, &[2.0, 0.6, 0.6, 1.5]).unwrap();
        let c = SpdMatrix::from_row_slice(2, &[4.0, 0.2, 0.2, 3.0]).unwrap();
        let perm = match_scales(&[b.clone(), a.clone(), c.clone()], &[a, b, c]);
        assert_eq!(perm, vec![1, 0, 2]);
        assert_eq!(invert(&perm), vec![1, 0, 2]);
    }

    proptest! {
        #[test]
        fn optimal_against_enumeration(vals in proptest::collection::vec(0.0f64..10.0, 25), k in 1usize..=5) {
            let c = DMatrix::from_fn(k, k, |i, j| vals[i * 5 + j]);
            let a = hungarian(&c);
            let mut seen = a.clone();
            seen.sort();
            prop_assert_eq!(seen, (0..k).collect::<Vec<_>>());
            let total: f64 = a.iter().enumerate().map(|(r, &col)| c[(r, col)]).sum();
            prop_assert!((total - brute_force(&c)).abs() < 1e-9);
        }
    }
}
