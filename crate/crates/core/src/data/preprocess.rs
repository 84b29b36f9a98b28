//! Resizing and augmentation.

use crate::boxes::hflip_box;
use crate::error::{dim_err, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Bilinear resize of `[C, H, W]` with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &Tensor<f64>, out_h: usize, out_w: usize) -> Result<Tensor<f64>> {
    let [c, h, w] = match img.shape() {
        [c, h, w] => [*c, *h, *w],
        s => return Err(dim_err!("resize expects [C, H, W], got {s:?}")),
    };
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(dim_err!("resize with an empty extent"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let d = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Mirrors `[C, H, W]` left to right.
pub fn hflip_image(img: &Tensor<f64>) -> Tensor<f64> {
    let w = *img.shape().last().expect("non-empty shape");
    let mut out = img.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

pub fn brighten(img: &Tensor<f64>, factor: f64) -> Tensor<f64> {
    img.map(|v| (v * factor).clamp(0.0, 1.0))
}

/// Resizes to `size × size`; with an rng, flips (p = 0.5, boxes mirrored) and
/// scales brightness by a factor in [0.8, 1.2].
pub fn preprocess(
    img: &Tensor<f64>,
    boxes: &[[f64; 4]],
    size: usize,
    augment: Option<&mut Rng>,
) -> Result<(Tensor<f64>, Vec<[f64; 4]>)> {
    let mut out = resize_bilinear(img, size, size)?;
    let mut boxes = boxes.to_vec();
    if let Some(rng) = augment {
        if rng.bernoulli(0.5) {
            out = hflip_image(&out);
            boxes = boxes.into_iter().map(hflip_box).collect();
        }
        let f = rng.range(0.8, 1.2);
        out = brighten(&out, f);
    }
    Ok((out, boxes))
}
