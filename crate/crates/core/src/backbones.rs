//! Image and text encoders, patch embedding and the whitespace tokenizer.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use crate::config::ModelConfig;
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Mask, Var};
use crate::nn::{EncoderLayer, Linear};
use crate::params::{Init, ParamBuilder, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const UNK: u32 = 2;
pub const RESERVED: [&str; 3] = ["[PAD]", "[CLS]", "[UNK]"];

/// Token list; the line index of a vocabulary file is the token id.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from content words; the reserved ids are prepended.
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.iter().map(|w| w.as_ref().to_lowercase()));
        Self::from_tokens(tokens).expect("reserved ids present")
    }

    /// `tokens[0..3]` are taken as the reserved PAD / CLS / UNK entries.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() {
            return Err(Error::Config(format!(
                "vocabulary has {} entries; ids 0-2 are reserved and at least one more is expected",
                tokens.len()
            )));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate().skip(RESERVED.len()) {
            index.entry(t.clone()).or_insert(i as u32);
        }
        Ok(Vocab { tokens, index })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }
}

/// `[CLS, w₀, …, w_{L−1}, PAD…]` with exactly `1 + max_len` positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// `true` marks a PAD position.
    pub pad: Vec<bool>,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len() - 1
    }

    /// Number of non-PAD content positions.
    pub fn content_len(&self) -> usize {
        self.pad[1..].iter().filter(|&&p| !p).count()
    }

    /// Validity of each content position (excludes CLS).
    pub fn content_valid(&self) -> Vec<bool> {
        self.pad[1..].iter().map(|&p| !p).collect()
    }
}

/// Lowercase, whitespace-split, map out-of-vocabulary words to UNK, truncate or
/// pad to `max_len` content positions and prepend CLS.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSequence> {
    if vocab.len() <= RESERVED.len() {
        return Err(Error::Config("empty vocabulary".into()));
    }
    let mut ids = vec![CLS];
    let mut pad = vec![false];
    for w in text.split_whitespace().take(max_len) {
        ids.push(vocab.id(&w.to_lowercase()));
        pad.push(false);
    }
    while ids.len() < max_len + 1 {
        ids.push(PAD);
        pad.push(true);
    }
    Ok(TokenSequence { ids, pad })
}

/// Flat gather indices that cut a `[C, H, W]` map into `P×P` patches, row-major
/// over the patch grid, each row laid out as `(c, dy, dx)`.
pub(crate) fn patch_indices(c: usize, h: usize, w: usize, p: usize) -> Result<Vec<u32>> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(dim_err!("{h}×{w} is not divisible into {p}×{p} patches"));
    }
    let mut idx = Vec::with_capacity(c * h * w);
    for py in 0..h / p {
        for px in 0..w / p {
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        idx.push((ch * h * w + (py * p + dy) * w + px * p + dx) as u32);
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Linear projection of flattened `P×P` patches to width `D`.
#[derive(Clone, Copy, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub patch: usize,
    pub channels: usize,
}

impl PatchEmbed {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, patch: usize, dim: usize) -> Self {
        PatchEmbed {
            proj: Linear::new(pb, name, channels * patch * patch, dim),
            patch,
            channels,
        }
    }

    /// `image` is `[C, H, W]` (or `[H, W]` when `C = 1`); returns `[N, D]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, image: Var) -> Result<Var> {
        let s = g.shape(image).to_vec();
        let (c, h, w) = match s.as_slice() {
            [h, w] => (1, *h, *w),
            [c, h, w] => (*c, *h, *w),
            _ => return Err(dim_err!("patch embedding expects [C, H, W], got {s:?}")),
        };
        if c != self.channels {
            return Err(dim_err!("expected {} channels, got {c}", self.channels));
        }
        let idx = patch_indices(c, h, w, self.patch)?;
        let n = (h / self.patch) * (w / self.patch);
        let patches = g.gather(image, Arc::new(idx), &[n, c * self.patch * self.patch])?;
        self.proj.forward(g, patches)
    }
}

pub fn patch_embed<T: Scalar>(store: &ParamStore<T>, params: &PatchEmbed, image: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new(store);
    let x = g.constant(image.clone());
    let out = params.forward(&mut g, x)?;
    Ok(g.value(out).clone())
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `[1, D]`
    pub cls: Var,
    /// `[N, D]` (image patches or text content positions)
    pub seq: Var,
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub patch: PatchEmbed,
    pub cls: Var,
    pub pos: Var,
    pub layers: Vec<EncoderLayer>,
    pub image_size: usize,
}

impl ImageEncoder {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.dim;
        pb.scope("image_encoder", |pb| {
            let patch = PatchEmbed::new(pb, "patch_embed", 3, cfg.patch_size, d);
            let cls = pb.param("cls", &[1, d], Init::DEFAULT);
            let pos = pb.param("pos", &[cfg.num_patches() + 1, d], Init::DEFAULT);
            let layers = (0..cfg.image_depth)
                .map(|i| EncoderLayer::new(pb, &format!("layer{i}"), d, cfg.heads))
                .collect::<Result<_>>()?;
            Ok(ImageEncoder {
                patch,
                cls,
                pos,
                layers,
                image_size: cfg.image_size,
            })
        })
    }

    /// `image` is `[3, S, S]` with `S = image_size`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, image: Var) -> Result<EncoderOutput> {
        let s = g.shape(image);
        if s != [3, self.image_size, self.image_size] {
            return Err(dim_err!(
                "image encoder expects [3, {0}, {0}], got {s:?}",
                self.image_size
            ));
        }
        let patches = self.patch.forward(g, image)?;
        let n = g.shape(patches)[0];
        let mut x = g.concat_rows(&[self.cls, patches])?;
        x = g.add(x, self.pos)?;
        for layer in &self.layers {
            x = layer.forward(g, x, None)?;
        }
        Ok(EncoderOutput {
            cls: g.slice_rows(x, 0, 1)?,
            seq: g.slice_rows(x, 1, n)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub token_emb: Var,
    pub pos: Var,
    pub layers: Vec<EncoderLayer>,
    pub max_len: usize,
}

impl TextEncoder {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.dim;
        pb.scope("text_encoder", |pb| {
            let token_emb = pb.param("token_emb", &[cfg.vocab_size, d], Init::DEFAULT);
            let pos = pb.param("pos", &[cfg.max_text_len + 1, d], Init::DEFAULT);
            let layers = (0..cfg.text_depth)
                .map(|i| EncoderLayer::new(pb, &format!("layer{i}"), d, cfg.heads))
                .collect::<Result<_>>()?;
            Ok(TextEncoder {
                token_emb,
                pos,
                layers,
                max_len: cfg.max_text_len,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, tokens: &TokenSequence) -> Result<EncoderOutput> {
        if tokens.ids.len() > self.max_len + 1 {
            return Err(Error::Input(format!(
                "token sequence of {} positions exceeds {} + CLS",
                tokens.ids.len(),
                self.max_len
            )));
        }
        if tokens.ids.len() != tokens.pad.len() || tokens.ids.first() != Some(&CLS) {
            return Err(Error::Input("malformed token sequence".into()));
        }
        let vocab = g.shape(self.token_emb)[0];
        if let Some(&bad) = tokens.ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let len = tokens.ids.len();
        let ids: Vec<usize> = tokens.ids.iter().map(|&i| i as usize).collect();
        let emb = g.gather_rows(self.token_emb, Arc::new(ids))?;
        let pos = g.slice_rows(self.pos, 0, len)?;
        let mut x = g.add(emb, pos)?;
        let keys: Vec<bool> = tokens.pad.iter().map(|&p| !p).collect();
        let mask = Mask::keys(len, &keys);
        for layer in &self.layers {
            x = layer.forward(g, x, Some(&mask))?;
        }
        Ok(EncoderOutput {
            cls: g.slice_rows(x, 0, 1)?,
            seq: g.slice_rows(x, 1, len - 1)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn vocab() -> Vocab {
        Vocab::from_words(&["hello", "world", "cat"])
    }

    #[test]
    fn tokenize_cases() {
        let v = vocab();
        let empty = tokenize("", &v, 4).unwrap();
        assert_eq!(empty.ids, vec![CLS, PAD, PAD, PAD, PAD]);
        assert_eq!(empty.content_len(), 0);
        let hh = tokenize("Hello hello", &v, 4).unwrap();
        assert_eq!(hh.ids[1], hh.ids[2]);
        assert_eq!(hh.ids[1], v.id("hello"));
        let oov = tokenize("zebra", &v, 4).unwrap();
        assert_eq!(oov.ids[1], UNK);
        let long = tokenize("cat cat cat cat cat cat", &v, 4).unwrap();
        assert_eq!(long.ids.len(), 5);
        assert!(long.pad.iter().all(|&p| !p));
    }

    #[test]
    fn empty_vocab_is_config_error() {
        let v = Vocab::from_tokens(RESERVED.iter().map(|s| s.to_string()).collect()).unwrap();
        assert!(matches!(tokenize("a", &v, 4), Err(Error::Config(_))));
        assert!(Vocab::parse("").is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = vocab();
        assert_eq!(Vocab::parse(&v.to_file_string()).unwrap(), v);
    }

    #[test]
    fn patch_counts() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let pe = PatchEmbed::new(&mut pb, "pe", 1, 2, 8);
        let out = patch_embed(&store, &pe, &Tensor::zeros(&[4, 4])).unwrap();
        assert_eq!(out.shape(), &[4, 8]);
        // zero image → bias rows (bias initialized to zero)
        assert!(out.data().iter().all(|&x| x == 0.0));
        assert!(patch_embed(&store, &pe, &Tensor::zeros(&[5, 4])).is_err());
        assert_eq!(patch_indices(3, 256, 256, 16).unwrap().len() / (3 * 256), 256);
    }

    #[test]
    fn patch_layout() {
        let idx = patch_indices(1, 4, 4, 2).unwrap();
        // second patch (top-right) starts at column 2
        assert_eq!(&idx[4..8], &[2, 3, 6, 7]);
    }
}
