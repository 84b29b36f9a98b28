//! Slow, obviously-correct reference implementations used by the tests and
//! the self-test command.

use crate::tensor::Tensor;

/// AUC in percent by comparing every positive with every negative.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    let np = labels.iter().filter(|&&l| l).count() as f64;
    let nn = labels.len() as f64 - np;
    100.0 * wins / (np * nn)
}

/// AP in percent by computing each positive's rank directly. Tied items rank
/// negatives first.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> f64 {
    let n = scores.len();
    let rank = |i: usize| {
        1 + (0..n)
            .filter(|&j| {
                j != i && (scores[j] > scores[i] || (scores[j] == scores[i] && (!labels[j] || (labels[i] && j < i))))
            })
            .count()
    };
    let mut ranks: Vec<usize> = (0..n).filter(|&i| labels[i]).map(rank).collect();
    ranks.sort_unstable();
    let sum: f64 = ranks.iter().enumerate().map(|(k, &r)| (k + 1) as f64 / r as f64).sum();
    100.0 * sum / ranks.len() as f64
}

/// Minimal assignment cost over every injective map from the smaller side.
pub fn brute_force_assignment(cost: &[f64], rows: usize, cols: usize) -> f64 {
    fn go(cost: &[f64], cols: usize, transposed: bool, r: usize, n: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if r == n {
            *best = best.min(acc);
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                let v = if transposed { cost[c * cols + r] } else { cost[r * cols + c] };
                go(cost, cols, transposed, r + 1, n, used, acc + v, best);
                used[c] = false;
            }
        }
    }
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let (n, m, transposed) = if rows <= cols { (rows, cols, false) } else { (cols, rows, true) };
    let mut best = f64::INFINITY;
    go(cost, cols, transposed, 0, n, &mut vec![false; m], 0.0, &mut best);
    best
}

/// Softmax attention with an optional allow-mask, `q [n,d]`, `k/v [m,d]`.
pub fn attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, allow: Option<&dyn Fn(usize, usize) -> bool>) -> Tensor<f64> {
    let (n, d, m) = (q.rows(), q.cols(), k.rows());
    let dv = v.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; n * dv];
    for i in 0..n {
        let mut logits = vec![f64::NEG_INFINITY; m];
        for (j, l) in logits.iter_mut().enumerate() {
            if allow.is_none_or(|f| f(i, j)) {
                *l = (0..d).map(|t| q.at(&[i, t]) * k.at(&[j, t])).sum::<f64>() * scale;
            }
        }
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
        let z: f64 = w.iter().sum();
        for j in 0..m {
            for t in 0..dv {
                out[i * dv + t] += w[j] / z * v.at(&[j, t]);
            }
        }
    }
    Tensor::new(&[n, dv], out).expect("attention shape")
}

/// Orthonormal one-level Haar transform of an `[h, w]` map done as two 1-D
/// passes (rows, then columns). Returns `[LL, LH, HL, HH]`, each `[h/2, w/2]`,
/// where the first letter is the horizontal filter and high-pass means
/// second minus first.
pub fn separable_haar(x: &[f64], h: usize, w: usize) -> [Vec<f64>; 4] {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let (h2, w2) = (h / 2, w / 2);
    // horizontal pass: lo/hi over column pairs
    let mut lo = vec![0.0; h * w2];
    let mut hi = vec![0.0; h * w2];
    for r in 0..h {
        for c in 0..w2 {
            let (a, b) = (x[r * w + 2 * c], x[r * w + 2 * c + 1]);
            lo[r * w2 + c] = s * (a + b);
            hi[r * w2 + c] = s * (b - a);
        }
    }
    let vertical = |src: &[f64], sign: f64| {
        let mut out = vec![0.0; h2 * w2];
        for r in 0..h2 {
            for c in 0..w2 {
                out[r * w2 + c] = s * (sign * src[2 * r * w2 + c] + src[(2 * r + 1) * w2 + c]);
            }
        }
        out
    };
    [vertical(&lo, 1.0), vertical(&lo, -1.0), vertical(&hi, 1.0), vertical(&hi, -1.0)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::wavelet::haar_forward;

    #[test]
    fn separable_haar_matches_block_formula() {
        let mut rng = Rng::new(1);
        let (h, w) = (6, 8);
        let x: Vec<f64> = (0..h * w).map(|_| rng.normal()).collect();
        let fast = haar_forward(&x, h, w).unwrap();
        let slow: Vec<f64> = separable_haar(&x, h, w).concat();
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn brute_force_small_cases() {
        assert_eq!(brute_force_assignment(&[4.0, 1.0, 2.0, 5.0], 2, 2), 3.0);
        assert_eq!(brute_force_assignment(&[3.0, 1.0, 2.0], 3, 1), 1.0);
        assert_eq!(brute_force_assignment(&[], 0, 3), 0.0);
    }
}
