//! Gradient-norm saliency: how strongly each pixel moves the binary-fake logit.

use crate::error::{dim_err, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::backbones::TokenSequence;
use crate::tensor::{Scalar, Tensor};

/// Per-pixel L2 norm over channels of the input gradient, `[H, W]`.
pub fn gradient_norm_map<T: Scalar>(model: &Model, store: &ParamStore<T>, image: &Tensor<T>, tokens: &TokenSequence) -> Result<Tensor<f64>> {
    let grad = model.input_gradient(store, image, tokens)?;
    channel_norm(&grad.cast::<f64>())
}

/// `[C, H, W]` → `[H, W]` L2 norm over channels.
pub fn channel_norm(x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let &[c, h, w] = x.shape() else {
        return Err(dim_err!("expected [C, H, W], got {:?}", x.shape()));
    };
    let hw = h * w;
    let d = x.data();
    let out = (0..hw)
        .map(|p| (0..c).map(|k| d[k * hw + p].powi(2)).sum::<f64>().sqrt())
        .collect();
    Tensor::new(&[h, w], out)
}

/// Min-max scaling to 0..=255; a constant map becomes all zeros.
pub fn to_u8(map: &Tensor<f64>) -> Vec<u8> {
    let d = map.data();
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0; d.len()];
    }
    d.iter().map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Mean of the map inside and outside a cxcywh box (pixel centres decide membership).
pub fn box_contrast(map: &Tensor<f64>, b: [f64; 4]) -> Result<(f64, f64)> {
    let &[h, w] = map.shape() else {
        return Err(dim_err!("expected [H, W], got {:?}", map.shape()));
    };
    let (x0, x1) = (b[0] - b[2] / 2.0, b[0] + b[2] / 2.0);
    let (y0, y1) = (b[1] - b[3] / 2.0, b[1] + b[3] / 2.0);
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..h {
        let cy = (y as f64 + 0.5) / h as f64;
        for x in 0..w {
            let cx = (x as f64 + 0.5) / w as f64;
            let v = map.data()[y * w + x];
            if cx > x0 && cx < x1 && cy > y0 && cy < y1 {
                si += v;
                ni += 1;
            } else {
                so += v;
                no += 1;
            }
        }
    }
    if ni == 0 || no == 0 {
        return Err(crate::Error::Input("box covers none or all of the map".into()));
    }
    Ok((si / ni as f64, so / no as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{tokenize, Vocab};
    use crate::config::ModelConfig;
    use crate::rng::Rng;

    #[test]
    fn zero_map_stays_zero() {
        assert_eq!(to_u8(&Tensor::zeros(&[3, 4])), vec![0; 12]);
        assert_eq!(to_u8(&Tensor::full(&[2, 2], 7.0)), vec![0; 4]);
        let m = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(to_u8(&m), vec![0, 128, 255]);
    }

    #[test]
    fn channel_norm_by_hand() {
        let x = Tensor::new(&[2, 1, 2], vec![3.0, 0.0, 4.0, -1.0]).unwrap();
        assert_eq!(channel_norm(&x).unwrap().data(), &[5.0, 1.0]);
    }

    #[test]
    fn box_contrast_on_an_indicator() {
        let mut m = Tensor::zeros(&[4, 4]);
        m.set(&[1, 1], 1.0);
        m.set(&[1, 2], 1.0);
        let (i, o) = box_contrast(&m, [0.5, 0.375, 0.5, 0.25]).unwrap();
        assert_eq!((i, o), (1.0, 0.0));
    }

    #[test]
    fn map_has_image_shape() {
        let cfg = ModelConfig {
            dim: 8,
            heads: 2,
            image_depth: 1,
            text_depth: 1,
            freq_depth: 1,
            decoder_depth: 1,
            image_size: 16,
            patch_size: 8,
            max_text_len: 4,
            vocab_size: 8,
            ..ModelConfig::default()
        };
        let (model, store) = Model::init::<f64>(&cfg, 1).unwrap();
        let mut rng = Rng::new(2);
        let img = Tensor::new(&[3, 16, 16], (0..768).map(|_| rng.uniform()).collect()).unwrap();
        let tokens = tokenize("a b", &Vocab::from_words(&["a", "b"]), 4).unwrap();
        let m = gradient_norm_map(&model, &store, &img, &tokens).unwrap();
        assert_eq!(m.shape(), &[16, 16]);
        assert!(m.data().iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}
