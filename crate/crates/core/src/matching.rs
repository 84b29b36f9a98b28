//! Exact minimum-cost one-to-one assignment (Hungarian method with row/column
//! potentials), for rectangular cost matrices.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `(prediction, ground truth)` pairs, sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl MatchResult {
    /// Ground-truth index matched to each prediction, if any.
    pub fn assignment(&self, n_pred: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_pred];
        for &(p, g) in &self.pairs {
            out[p] = Some(g);
        }
        out
    }
}

pub fn hungarian_match<T: Scalar>(cost: &Tensor<T>) -> Result<MatchResult> {
    match cost.shape() {
        [m, n] => {
            let c: Vec<f64> = cost.to_f64_vec();
            hungarian(&c, *m, *n)
        }
        s => Err(dim_err!("cost matrix must be 2-D, got {s:?}")),
    }
}

/// `cost` is row-major `rows × cols`.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Result<MatchResult> {
    if cost.len() != rows * cols {
        return Err(dim_err!("{} costs for a {rows}×{cols} matrix", cost.len()));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Input("cost matrix has non-finite entries".into()));
    }
    if rows == 0 || cols == 0 {
        return Ok(MatchResult {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    // the solver assigns every row, so it runs on the orientation with rows <= cols
    let transposed = rows > cols;
    let (n, m) = if transposed { (cols, rows) } else { (rows, cols) };
    let at = |i: usize, j: usize| {
        if transposed {
            cost[j * cols + i]
        } else {
            cost[i * cols + j]
        }
    };

    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
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

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| {
            let (i, j) = (p[j] - 1, j - 1);
            if transposed {
                (j, i)
            } else {
                (i, j)
            }
        })
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(i, j)| cost[i * cols + j]).sum();
    Ok(MatchResult { pairs, total_cost })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let r = hungarian(&[1.0, 2.0, 2.0, 1.0], 2, 2).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(r.total_cost, 2.0);
    }

    #[test]
    fn identity_on_diagonal_dominant() {
        let n = 5;
        let c: Vec<f64> = (0..n * n)
            .map(|k| if k / n == k % n { 0.0 } else { 10.0 })
            .collect();
        let r = hungarian(&c, n, n).unwrap();
        assert_eq!(r.pairs, (0..n).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn rectangular_both_ways() {
        // 3 predictions, 1 target: cheapest row wins
        let r = hungarian(&[5.0, 1.0, 3.0], 3, 1).unwrap();
        assert_eq!(r.pairs, vec![(1, 0)]);
        let r = hungarian(&[5.0, 1.0, 3.0], 1, 3).unwrap();
        assert_eq!(r.pairs, vec![(0, 1)]);
    }

    #[test]
    fn empty_and_invalid() {
        let r = hungarian(&[], 0, 4).unwrap();
        assert!(r.pairs.is_empty() && r.total_cost == 0.0);
        assert!(hungarian(&[f64::NAN], 1, 1).is_err());
    }
}
