//! Manifest ingestion, PPM/PGM image I/O, preprocessing and the synthetic
//! fixture generator.

mod image;
mod manifest;
mod preprocess;
mod synthetic;

pub use image::{load_image, parse_pnm, write_pgm, write_ppm, Pixels};
pub use manifest::{load_manifest, parse_manifest, save_manifest, to_jsonl, ManifestRecord};
pub use preprocess::{brighten, hflip_image, preprocess, resize_bilinear};
pub use synthetic::{gen_synthetic, synthesize, Corpus, SyntheticConfig};

use std::path::Path;

use crate::backbones::{tokenize, Vocab};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::heads::GroundTruth;
use crate::model::Sample;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Turns a record and its decoded image into a model-ready sample.
pub fn build_sample<T: Scalar>(
    rec: &ManifestRecord,
    image: &Tensor<f64>,
    vocab: &Vocab,
    cfg: &ModelConfig,
    augment: Option<&mut Rng>,
) -> Result<Sample<T>> {
    rec.validate()?;
    let (img, boxes) = preprocess(image, &rec.face_boxes, cfg.image_size, augment)?;
    let tokens = tokenize(&rec.text, vocab, cfg.max_text_len)?;
    let mut token_fake = vec![false; cfg.max_text_len];
    for &i in &rec.fake_token_indices {
        if i >= cfg.max_text_len {
            return Err(Error::Input(format!(
                "{}: fake token index {i} beyond {} content positions",
                rec.id, cfg.max_text_len
            )));
        }
        token_fake[i] = true;
    }
    let truth = GroundTruth {
        pair_fake: rec.pair_fake == 1,
        fg_labels: rec.fg_labels,
        face_boxes: boxes,
        token_fake,
        token_valid: tokens.content_valid(),
    };
    truth.validate()?;
    Ok(Sample {
        id: rec.id.clone(),
        image: img.cast(),
        tokens,
        truth,
    })
}

/// Loads every image referenced by the manifest (paths relative to `root`).
pub fn load_images(records: &[ManifestRecord], root: &Path, exec: Exec) -> Result<Vec<Tensor<f64>>> {
    exec.map(records, |r| load_image(root.join(&r.image_path)))
        .into_iter()
        .collect()
}

/// Samples for a whole manifest; augmentation draws from a per-record stream
/// of `rng` so the result does not depend on processing order.
pub fn build_samples<T: Scalar>(
    records: &[ManifestRecord],
    images: &[Tensor<f64>],
    vocab: &Vocab,
    cfg: &ModelConfig,
    augment: Option<&Rng>,
    exec: Exec,
) -> Result<Vec<Sample<T>>> {
    if records.len() != images.len() {
        return Err(Error::Input("records and images differ in number".into()));
    }
    exec.map_range(records.len(), |i| {
        let mut rng = augment.map(|r| r.fork(i as u64));
        build_sample(&records[i], &images[i], vocab, cfg, rng.as_mut())
    })
    .into_iter()
    .collect()
}
