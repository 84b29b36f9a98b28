//! Synthetic corpus: smooth backgrounds with optional bright rectangles
//! ("faces") and captions with optional injected sentinel words.

use std::f64::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::image::{write_ppm, Pixels};
use super::manifest::{save_manifest, ManifestRecord};
use crate::backbones::{Vocab, RESERVED};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const SWAP_WORDS: [&str; 4] = ["swap0", "swap1", "swap2", "swap3"];
pub const ATTR_WORDS: [&str; 4] = ["attr0", "attr1", "attr2", "attr3"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub image_size: usize,
    /// Total vocabulary size including the reserved and sentinel entries.
    pub vocab_size: usize,
    pub fake_ratio: f64,
    pub seed: u64,
    /// Longest caption in words.
    pub max_words: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_samples: 64,
            image_size: 32,
            vocab_size: 64,
            fake_ratio: 0.5,
            seed: 0,
            max_words: 12,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fixed = RESERVED.len() + SWAP_WORDS.len() + ATTR_WORDS.len();
        if self.vocab_size < fixed + 4 {
            return Err(Error::Config(format!("synthetic vocab_size must be at least {}", fixed + 4)));
        }
        if self.image_size < 4 {
            return Err(Error::Config("synthetic image_size must be at least 4".into()));
        }
        if !(0.0..=1.0).contains(&self.fake_ratio) {
            return Err(Error::Config("fake_ratio must lie in [0, 1]".into()));
        }
        if self.max_words < 4 {
            return Err(Error::Config("max_words must be at least 4".into()));
        }
        Ok(())
    }

    fn plain_words(&self) -> Vec<String> {
        let n = self.vocab_size - RESERVED.len() - SWAP_WORDS.len() - ATTR_WORDS.len();
        (0..n).map(|i| format!("w{i:02}")).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub records: Vec<ManifestRecord>,
    pub images: Vec<Pixels>,
    pub vocab: Vocab,
}

#[derive(Clone, Copy, PartialEq)]
enum ImageFake {
    None,
    Swap,
    Attr,
}

#[derive(Clone, Copy, PartialEq)]
enum TextFake {
    None,
    Swap,
    Attr,
}

fn background(rng: &mut Rng, s: usize) -> Vec<f64> {
    let base = rng.range(0.15, 0.2);
    let (ax, ay, phase) = (rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(0.0, TAU));
    let tint = [rng.range(-0.01, 0.01), rng.range(-0.01, 0.01), rng.range(-0.01, 0.01)];
    let mut out = vec![0.0; 3 * s * s];
    for (c, t) in tint.iter().enumerate() {
        for y in 0..s {
            for x in 0..s {
                let wave = (TAU * (ax * x as f64 + ay * y as f64) / s as f64 + phase).sin();
                out[(c * s + y) * s + x] = base + t + 0.03 * wave;
            }
        }
    }
    out
}

/// Paints a rectangle and returns its cxcywh box.
fn paint(img: &mut [f64], s: usize, kind: ImageFake, rng: &mut Rng) -> [f64; 4] {
    let side = |rng: &mut Rng| ((rng.range(0.35, 0.6) * s as f64).round() as usize).clamp(2, s);
    let (w, h) = (side(rng), side(rng));
    let x0 = rng.below(s - w + 1);
    let y0 = rng.below(s - h + 1);
    for c in 0..3 {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                img[(c * s + y) * s + x] = match kind {
                    ImageFake::Swap => [0.95, 0.9, 0.85][c],
                    _ if (y - y0).is_multiple_of(2) => 1.0,
                    _ => 0.6,
                };
            }
        }
    }
    let n = s as f64;
    [
        (x0 as f64 + w as f64 / 2.0) / n,
        (y0 as f64 + h as f64 / 2.0) / n,
        w as f64 / n,
        h as f64 / n,
    ]
}

fn caption(rng: &mut Rng, cfg: &SyntheticConfig, words: &[String], kind: TextFake) -> (String, Vec<usize>) {
    let len = 4 + rng.below(cfg.max_words - 3);
    let mut ws: Vec<String> = (0..len).map(|_| words[rng.below(words.len())].clone()).collect();
    let mut fake = Vec::new();
    match kind {
        TextFake::None => {}
        TextFake::Swap => {
            let span = 1 + rng.below(2);
            let start = rng.below(len - span + 1);
            for (k, i) in (start..start + span).enumerate() {
                ws[i] = SWAP_WORDS[(rng.below(SWAP_WORDS.len()) + k) % SWAP_WORDS.len()].into();
                fake.push(i);
            }
        }
        TextFake::Attr => {
            let mut idx: Vec<usize> = (0..len).collect();
            rng.shuffle(&mut idx);
            let mut picked: Vec<usize> = idx[..1 + rng.below(2)].to_vec();
            picked.sort_unstable();
            for &i in &picked {
                ws[i] = ATTR_WORDS[rng.below(ATTR_WORDS.len())].into();
            }
            fake = picked;
        }
    }
    (ws.join(" "), fake)
}

/// Builds the corpus in memory; identical configs give identical corpora.
pub fn synthesize(cfg: &SyntheticConfig) -> Result<Corpus> {
    cfg.validate()?;
    let words = cfg.plain_words();
    let mut vocab_words: Vec<String> = words.clone();
    vocab_words.extend(SWAP_WORDS.iter().chain(&ATTR_WORDS).map(|w| w.to_string()));
    let vocab = Vocab::from_words(&vocab_words);
    let root = Rng::new(cfg.seed);
    let s = cfg.image_size;
    let mut records = Vec::with_capacity(cfg.n_samples);
    let mut images = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let mut rng = root.fork(i as u64);
        let fake = rng.bernoulli(cfg.fake_ratio);
        let (im, tx) = if fake {
            [
                (ImageFake::Swap, TextFake::None),
                (ImageFake::Attr, TextFake::None),
                (ImageFake::None, TextFake::Swap),
                (ImageFake::None, TextFake::Attr),
                (ImageFake::Swap, TextFake::Swap),
                (ImageFake::Attr, TextFake::Attr),
            ][rng.below(6)]
        } else {
            (ImageFake::None, TextFake::None)
        };
        let mut img = background(&mut rng, s);
        let face_boxes = if im == ImageFake::None {
            Vec::new()
        } else {
            vec![paint(&mut img, s, im, &mut rng)]
        };
        let (text, fake_token_indices) = caption(&mut rng, cfg, &words, tx);
        let id = format!("syn{i:05}");
        records.push(ManifestRecord {
            image_path: format!("images/{id}.ppm"),
            id,
            text,
            pair_fake: u8::from(fake),
            fg_labels: [
                im == ImageFake::Swap,
                im == ImageFake::Attr,
                tx == TextFake::Swap,
                tx == TextFake::Attr,
            ],
            face_boxes,
            fake_token_indices,
        });
        let t = crate::tensor::Tensor::new(&[3, s, s], img)?;
        images.push(Pixels::from_tensor(&t)?);
    }
    Ok(Corpus {
        records,
        images,
        vocab,
    })
}

/// Writes `manifest.jsonl`, `vocab.txt` and `images/*.ppm` under `dir`.
pub fn gen_synthetic(cfg: &SyntheticConfig, dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let corpus = synthesize(cfg)?;
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for (r, p) in corpus.records.iter().zip(&corpus.images) {
        write_ppm(dir.join(&r.image_path), p)?;
    }
    save_manifest(dir.join("manifest.jsonl"), &corpus.records)?;
    let vf = dir.join("vocab.txt");
    std::fs::write(&vf, corpus.vocab.to_file_string()).map_err(|e| Error::io(&vf, e))?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::load_manifest;

    #[test]
    fn pristine_only_when_ratio_zero() {
        let c = synthesize(&SyntheticConfig {
            fake_ratio: 0.0,
            ..SyntheticConfig::default()
        })
        .unwrap();
        assert!(c.records.iter().all(|r| r.pair_fake == 0 && r.face_boxes.is_empty()));
    }

    #[test]
    fn labels_are_consistent() {
        let c = synthesize(&SyntheticConfig {
            n_samples: 200,
            ..SyntheticConfig::default()
        })
        .unwrap();
        for r in &c.records {
            r.validate().unwrap();
            let image_fake = r.fg_labels[0] || r.fg_labels[1];
            let text_fake = r.fg_labels[2] || r.fg_labels[3];
            assert_eq!(image_fake, !r.face_boxes.is_empty());
            assert_eq!(text_fake, !r.fake_token_indices.is_empty());
            assert_eq!(r.pair_fake == 1, image_fake || text_fake);
            let words: Vec<&str> = r.text.split_whitespace().collect();
            for (i, w) in words.iter().enumerate() {
                let sentinel = SWAP_WORDS.contains(w) || ATTR_WORDS.contains(w);
                assert_eq!(sentinel, r.fake_token_indices.contains(&i));
            }
        }
    }

    #[test]
    fn fixed_seed_gives_identical_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            n_samples: 8,
            ..SyntheticConfig::default()
        };
        gen_synthetic(&cfg, a.path()).unwrap();
        gen_synthetic(&cfg, b.path()).unwrap();
        for f in ["manifest.jsonl", "vocab.txt", "images/syn00003.ppm"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
        assert_eq!(load_manifest(a.path().join("manifest.jsonl")).unwrap().len(), 8);
        assert_eq!(Vocab::load(a.path().join("vocab.txt")).unwrap().len(), 64);
    }

    #[test]
    fn mean_intensity_probe_separates_image_fakes() {
        let c = synthesize(&SyntheticConfig {
            n_samples: 400,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let mut pts: Vec<(f64, bool)> = c
            .records
            .iter()
            .zip(&c.images)
            .filter(|(r, _)| r.pair_fake == 0 || !r.face_boxes.is_empty())
            .map(|(r, p)| {
                let m = p.data.iter().map(|&v| v as f64).sum::<f64>() / p.data.len() as f64;
                (m, r.pair_fake == 1)
            })
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        // best single threshold on the 1-D feature
        let n = pts.len();
        let best = (0..=n)
            .map(|k| {
                let below_ok = pts[..k].iter().filter(|p| !p.1).count();
                let above_ok = pts[k..].iter().filter(|p| p.1).count();
                below_ok + above_ok
            })
            .max()
            .unwrap();
        let acc = best as f64 / n as f64;
        assert!(acc >= 0.95, "probe accuracy {acc}");
    }
}
