//! Orthonormal single-level 2-D Haar transform.
//!
//! For each 2×2 block `[a b; c d]`:
//! `LL = (a+b+c+d)/2`, `HL = (−a+b−c+d)/2`, `LH = (−a−b+c+d)/2`, `HH = (a−b−c+d)/2`.
//! The first letter names the filter along the horizontal axis.

use crate::error::{dim_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Four sub-band maps of one single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct SubBands<T> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
    pub source_height: usize,
    pub source_width: usize,
}

impl<T: Scalar> SubBands<T> {
    /// Bands in canonical order LL, LH, HL, HH.
    pub fn bands(&self) -> [&Tensor<T>; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }

    pub fn energy(&self) -> T {
        self.bands()
            .iter()
            .flat_map(|b| b.data().iter())
            .map(|&x| x * x)
            .sum()
    }

    /// Stacks the bands into one `[4, H/2, W/2]` tensor.
    pub fn stacked(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(4 * self.ll.len());
        for b in self.bands() {
            data.extend_from_slice(b.data());
        }
        Tensor::new(
            &[4, self.source_height / 2, self.source_width / 2],
            data,
        )
        .expect("bands share one shape")
    }

    fn from_stacked(data: &[T], h: usize, w: usize) -> Result<Self> {
        let q = (h / 2) * (w / 2);
        let band = |i: usize| Tensor::new(&[h / 2, w / 2], data[i * q..(i + 1) * q].to_vec());
        Ok(SubBands {
            ll: band(0)?,
            lh: band(1)?,
            hl: band(2)?,
            hh: band(3)?,
            source_height: h,
            source_width: w,
        })
    }
}

/// Forward transform of a row-major `h×w` map into stacked `[LL, LH, HL, HH]`.
pub(crate) fn haar_forward<T: Scalar>(x: &[T], h: usize, w: usize) -> Result<Vec<T>> {
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) || h == 0 || w == 0 {
        return Err(dim_err!("Haar DWT needs even, non-zero extents, got {h}×{w}"));
    }
    let (hh2, ww2) = (h / 2, w / 2);
    let q = hh2 * ww2;
    let half = T::c(0.5);
    let mut out = vec![T::zero(); 4 * q];
    for i in 0..hh2 {
        for j in 0..ww2 {
            let a = x[(2 * i) * w + 2 * j];
            let b = x[(2 * i) * w + 2 * j + 1];
            let c = x[(2 * i + 1) * w + 2 * j];
            let d = x[(2 * i + 1) * w + 2 * j + 1];
            let o = i * ww2 + j;
            out[o] = (a + b + c + d) * half;
            out[q + o] = (-a - b + c + d) * half;
            out[2 * q + o] = (-a + b - c + d) * half;
            out[3 * q + o] = (a - b - c + d) * half;
        }
    }
    Ok(out)
}

/// Inverse of [`haar_forward`]; `h×w` is the reconstructed extent.
pub(crate) fn haar_inverse<T: Scalar>(bands: &[T], h: usize, w: usize) -> Result<Vec<T>> {
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) || bands.len() != h * w {
        return Err(dim_err!(
            "inverse Haar DWT: {} coefficients for {h}×{w}",
            bands.len()
        ));
    }
    let (hh2, ww2) = (h / 2, w / 2);
    let q = hh2 * ww2;
    let half = T::c(0.5);
    let mut out = vec![T::zero(); h * w];
    for i in 0..hh2 {
        for j in 0..ww2 {
            let o = i * ww2 + j;
            let (ll, lh, hl, hh) = (bands[o], bands[q + o], bands[2 * q + o], bands[3 * q + o]);
            out[(2 * i) * w + 2 * j] = (ll - hl - lh + hh) * half;
            out[(2 * i) * w + 2 * j + 1] = (ll + hl - lh - hh) * half;
            out[(2 * i + 1) * w + 2 * j] = (ll - hl + lh - hh) * half;
            out[(2 * i + 1) * w + 2 * j + 1] = (ll + hl + lh + hh) * half;
        }
    }
    Ok(out)
}

pub fn haar_dwt2d<T: Scalar>(image: &Tensor<T>) -> Result<SubBands<T>> {
    if image.shape().len() != 2 {
        return Err(dim_err!("expected an [H, W] image, got {:?}", image.shape()));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let data = haar_forward(image.data(), h, w)?;
    SubBands::from_stacked(&data, h, w)
}

pub fn haar_idwt2d<T: Scalar>(bands: &SubBands<T>) -> Result<Tensor<T>> {
    let shape = bands.ll.shape();
    if bands.bands().iter().any(|b| b.shape() != shape) || shape.len() != 2 {
        return Err(dim_err!("sub-band shapes differ"));
    }
    let (h, w) = (shape[0] * 2, shape[1] * 2);
    let stacked = bands.stacked_unchecked();
    Tensor::new(&[h, w], haar_inverse(&stacked, h, w)?)
}

impl<T: Scalar> SubBands<T> {
    fn stacked_unchecked(&self) -> Vec<T> {
        self.bands().iter().flat_map(|b| b.data().iter().copied()).collect()
    }
}

pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// `0.299 R + 0.587 G + 0.114 B` of a `[3, H, W]` image.
pub fn rgb_to_luma<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(dim_err!("expected a [3, H, W] image, got {s:?}"));
    }
    let n = s[1] * s[2];
    let d = image.data();
    let [wr, wg, wb] = LUMA_WEIGHTS.map(T::c);
    let data = (0..n)
        .map(|i| wr * d[i] + wg * d[n + i] + wb * d[2 * n + i])
        .collect();
    Tensor::new(&[s[1], s[2]], data)
}
