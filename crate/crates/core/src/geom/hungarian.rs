//! Exact linear assignment by the Hungarian method (shortest augmenting paths with
//! dual potentials), O(n³).
//!
//! Ties between equal-cost columns resolve to the lowest column index, so the
//! returned assignment is deterministic for a given matrix.

use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// Optimal assignment `row -> column` for a square cost matrix, with its total cost.
pub fn solve(cost: ArrayView2<'_, f64>) -> Result<(Vec<usize>, f64)> {
    let (n, m) = cost.dim();
    if n != m {
        return Err(Error::shape("square cost matrix", format!("{n}x{m}")));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost matrix".into()));
    }
    Ok(solve_unchecked(cost))
}

pub(crate) fn solve_unchecked(cost: ArrayView2<'_, f64>) -> (Vec<usize>, f64) {
    let n = cost.nrows();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    // 1-based bookkeeping; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|x| *x = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
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

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    let total = assignment.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    (assignment, total)
}
