//! Slice-level numeric kernels shared by the pure tensor API and the autodiff tape.

use crate::tensor::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let z = T::zero();
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        // four rows of b per pass over out_row
        let mut p = 0;
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (a_row[p], a_row[p + 1], a_row[p + 2], a_row[p + 3]);
            if a0 != z || a1 != z || a2 != z || a3 != z {
                let b0 = &b[p * n..(p + 1) * n];
                let b1 = &b[(p + 1) * n..(p + 2) * n];
                let b2 = &b[(p + 2) * n..(p + 3) * n];
                let b3 = &b[(p + 3) * n..(p + 4) * n];
                let rows = b0.iter().zip(b1).zip(b2).zip(b3);
                for (o, (((&x0, &x1), &x2), &x3)) in out_row.iter_mut().zip(rows) {
                    *o = *o + (a0 * x0 + a1 * x1) + (a2 * x2 + a3 * x3);
                }
            }
            p += 4;
        }
        for (p, &aip) in a_row.iter().enumerate().skip(p) {
            if aip == z {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
pub(crate) fn matmul_tn_acc<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let z = T::zero();
    // four rows of g per pass over each out row
    let mut i = 0;
    while i + 4 <= m {
        let g0 = &g[i * n..(i + 1) * n];
        let g1 = &g[(i + 1) * n..(i + 2) * n];
        let g2 = &g[(i + 2) * n..(i + 3) * n];
        let g3 = &g[(i + 3) * n..(i + 4) * n];
        for p in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            if a0 == z && a1 == z && a2 == z && a3 == z {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            let rows = g0.iter().zip(g1).zip(g2).zip(g3);
            for (o, (((&x0, &x1), &x2), &x3)) in out_row.iter_mut().zip(rows) {
                *o = *o + (a0 * x0 + a1 * x1) + (a2 * x2 + a3 * x3);
            }
        }
        i += 4;
    }
    for i in i..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == z {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o = *o + aip * gv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`, via an explicit transpose of `b` so the
/// inner loop is the vectorizable axpy of `matmul_acc`.
pub(crate) fn matmul_nt_acc<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let mut bt = vec![T::zero(); n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    matmul_acc(g, &bt, out, m, n, k);
}

/// In-place softmax of one row; entries with `allowed[j] == false` become exactly 0.
/// Returns false when no entry is allowed.
pub(crate) fn softmax_row<T: Scalar>(row: &mut [T], allowed: Option<&[bool]>) -> bool {
    let ok = |j: usize| allowed.is_none_or(|a| a[j]);
    let mut max = T::neg_infinity();
    for (j, &x) in row.iter().enumerate() {
        if ok(j) && x > max {
            max = x;
        }
    }
    if max == T::neg_infinity() {
        return false;
    }
    let mut sum = T::zero();
    for (j, x) in row.iter_mut().enumerate() {
        if ok(j) {
            *x = (*x - max).exp();
            sum = sum + *x;
        } else {
            *x = T::zero();
        }
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
    true
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-form GELU.
#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::c(GELU_C);
    let k = T::c(GELU_K);
    T::c(0.5) * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::c(GELU_C);
    let k = T::c(GELU_K);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::c(3.0) * k * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * du
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
