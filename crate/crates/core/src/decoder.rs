//! Unified decoder: image, text and pair forgery queries; two symmetric
//! cross-modal interaction stacks and a final fusing attention.

use crate::config::ModelConfig;
use crate::error::{dim_err, Result};
use crate::graph::{Graph, Mask, Var};
use crate::nn::{AttentionParams, Ffn, LayerNorm};
use crate::params::{Init, ParamBuilder, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Materialized decoder queries.
#[derive(Clone, Debug)]
pub struct DecoderQueries<T> {
    /// `[1+K, D]`: image CLS then the grounding embeddings.
    pub image_q: Tensor<T>,
    /// `[1+L, D]`: text CLS then the text sequence.
    pub text_q: Tensor<T>,
    /// `[1, D]`
    pub pair_q: Tensor<T>,
}

pub fn init_decoder_queries<T: Scalar>(
    img_cls: &Tensor<T>,
    text_cls: &Tensor<T>,
    text_seq: &Tensor<T>,
    grounding: &Tensor<T>,
    pair: &Tensor<T>,
) -> Result<DecoderQueries<T>> {
    let d = img_cls.cols();
    for t in [text_cls, text_seq, grounding, pair] {
        if t.cols() != d && !t.is_empty() {
            return Err(dim_err!("width {} differs from {d}", t.cols()));
        }
    }
    Ok(DecoderQueries {
        image_q: Tensor::concat_rows(&[img_cls, grounding])?,
        text_q: Tensor::concat_rows(&[text_cls, text_seq])?,
        pair_q: pair.clone(),
    })
}

/// Key-side features with an optional per-row validity mask.
#[derive(Clone, Copy, Debug)]
pub struct Keys<'a> {
    pub rows: Var,
    pub valid: Option<&'a [bool]>,
}

impl Keys<'_> {
    fn mask(&self, queries: usize) -> Option<Mask> {
        self.valid.map(|v| Mask::keys(queries, v))
    }
}

/// Attention over own-modality features, then over the other modality, then
/// FFN; every stage is a pre-norm residual.
#[derive(Clone, Copy, Debug)]
pub struct CrossModalInteraction {
    pub ln_q1: LayerNorm,
    pub ln_own: LayerNorm,
    pub attn_own: AttentionParams,
    pub ln_q2: LayerNorm,
    pub ln_other: LayerNorm,
    pub attn_other: AttentionParams,
    pub ln_ffn: LayerNorm,
    pub ffn: Ffn,
}

impl CrossModalInteraction {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, d: usize, heads: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(CrossModalInteraction {
                ln_q1: LayerNorm::new(pb, "ln_q1", d),
                ln_own: LayerNorm::new(pb, "ln_own", d),
                attn_own: AttentionParams::new(pb, "attn_own", d, heads)?,
                ln_q2: LayerNorm::new(pb, "ln_q2", d),
                ln_other: LayerNorm::new(pb, "ln_other", d),
                attn_other: AttentionParams::new(pb, "attn_other", d, heads)?,
                ln_ffn: LayerNorm::new(pb, "ln_ffn", d),
                ffn: Ffn::new(pb, "ffn", d, 4 * d),
            })
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, q: Var, own: Keys<'_>, other: Keys<'_>) -> Result<Var> {
        let nq = g.shape(q)[0];
        let h = self.ln_q1.forward(g, q)?;
        let kv = self.ln_own.forward(g, own.rows)?;
        let a = self.attn_own.forward(g, h, kv, own.mask(nq).as_ref())?;
        let x = g.add(q, a)?;
        let h = self.ln_q2.forward(g, x)?;
        let kv = self.ln_other.forward(g, other.rows)?;
        let a = self.attn_other.forward(g, h, kv, other.mask(nq).as_ref())?;
        let x = g.add(x, a)?;
        let h = self.ln_ffn.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.add(x, f)
    }
}

/// The pair query attends to `[img_out; text_out]`, then FFN.
#[derive(Clone, Copy, Debug)]
pub struct FusingInteraction {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: AttentionParams,
    pub ln_ffn: LayerNorm,
    pub ffn: Ffn,
}

impl FusingInteraction {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, d: usize, heads: usize) -> Result<Self> {
        pb.scope("fusing", |pb| {
            Ok(FusingInteraction {
                ln_q: LayerNorm::new(pb, "ln_q", d),
                ln_kv: LayerNorm::new(pb, "ln_kv", d),
                attn: AttentionParams::new(pb, "attn", d, heads)?,
                ln_ffn: LayerNorm::new(pb, "ln_ffn", d),
                ffn: Ffn::new(pb, "ffn", d, 4 * d),
            })
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pair_q: Var,
        img_out: Var,
        text_out: Var,
        text_valid: Option<&[bool]>,
    ) -> Result<Var> {
        let ni = g.shape(img_out)[0];
        let nt = g.shape(text_out)[0];
        let kv = g.concat_rows(&[img_out, text_out])?;
        let mask = text_valid.map(|v| {
            let keys: Vec<bool> = std::iter::repeat_n(true, ni).chain(v.iter().copied()).collect();
            Mask::keys(1, &keys)
        });
        if let Some(v) = text_valid {
            if v.len() != nt {
                return Err(dim_err!("{} validity flags for {nt} text rows", v.len()));
            }
        }
        let h = self.ln_q.forward(g, pair_q)?;
        let kv = self.ln_kv.forward(g, kv)?;
        let a = self.attn.forward(g, h, kv, mask.as_ref())?;
        let x = g.add(pair_q, a)?;
        let h = self.ln_ffn.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.add(x, f)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub image: CrossModalInteraction,
    pub text: CrossModalInteraction,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// `[1+K, D]`
    pub img: Var,
    /// `[1+L, D]`
    pub text: Var,
    /// `[1, D]`
    pub pair: Var,
}

#[derive(Clone, Debug)]
pub struct UnifiedDecoder {
    /// `[K, D]`; absent when `K = 0`.
    pub grounding: Option<Var>,
    pub pair_q: Var,
    pub layers: Vec<DecoderLayer>,
    pub ln_img: LayerNorm,
    pub ln_text: LayerNorm,
    pub fusing: FusingInteraction,
    pub ln_pair: LayerNorm,
}

/// Inputs of one decoder pass.
#[derive(Clone, Copy, Debug)]
pub struct DecoderInputs<'a> {
    /// `[R, D]` visual forgery features.
    pub visual: Var,
    /// `[1+L, D]` encoder text features (CLS first).
    pub text: Var,
    /// Validity of each text row (CLS included); PAD rows are `false`.
    pub text_valid: &'a [bool],
    /// `[1, D]`
    pub img_cls: Var,
}

impl UnifiedDecoder {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.dim;
        pb.scope("decoder", |pb| {
            let grounding = (cfg.grounding_queries > 0)
                .then(|| pb.param("grounding", &[cfg.grounding_queries, d], Init::DEFAULT));
            let pair_q = pb.param("pair_query", &[1, d], Init::DEFAULT);
            let layers = (0..cfg.decoder_depth)
                .map(|i| {
                    pb.scope(&format!("layer{i}"), |pb| {
                        Ok(DecoderLayer {
                            image: CrossModalInteraction::new(pb, "image", d, cfg.heads)?,
                            text: CrossModalInteraction::new(pb, "text", d, cfg.heads)?,
                        })
                    })
                })
                .collect::<Result<_>>()?;
            Ok(UnifiedDecoder {
                grounding,
                pair_q,
                layers,
                ln_img: LayerNorm::new(pb, "ln_img", d),
                ln_text: LayerNorm::new(pb, "ln_text", d),
                fusing: FusingInteraction::new(pb, d, cfg.heads)?,
                ln_pair: LayerNorm::new(pb, "ln_pair", d),
            })
        })
    }

    /// Image-side queries `[img_cls; grounding]`.
    pub fn image_queries<T: Scalar>(&self, g: &mut Graph<T>, img_cls: Var) -> Result<Var> {
        match self.grounding {
            Some(gr) => g.concat_rows(&[img_cls, gr]),
            None => Ok(img_cls),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, inp: DecoderInputs<'_>) -> Result<DecoderOutput> {
        let nt = g.shape(inp.text)[0];
        if inp.text_valid.len() != nt {
            return Err(dim_err!("{} validity flags for {nt} text rows", inp.text_valid.len()));
        }
        let mut img = self.image_queries(g, inp.img_cls)?;
        let mut text = inp.text;
        let visual = Keys {
            rows: inp.visual,
            valid: None,
        };
        let textual = Keys {
            rows: inp.text,
            valid: Some(inp.text_valid),
        };
        for layer in &self.layers {
            let ni = layer.image.forward(g, img, visual, textual)?;
            let nt = layer.text.forward(g, text, textual, visual)?;
            img = ni;
            text = nt;
        }
        let img = self.ln_img.forward(g, img)?;
        let text = self.ln_text.forward(g, text)?;
        let pair = self.fusing.forward(g, self.pair_q, img, text, Some(inp.text_valid))?;
        let pair = self.ln_pair.forward(g, pair)?;
        Ok(DecoderOutput { img, text, pair })
    }
}

/// Value-level decoder pass; returns `(img_out, text_out, pair_out)`.
pub fn decoder_forward<T: Scalar>(
    store: &ParamStore<T>,
    dec: &UnifiedDecoder,
    visual: &Tensor<T>,
    text: &Tensor<T>,
    text_valid: &[bool],
    img_cls: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new(store);
    let inp = DecoderInputs {
        visual: g.constant(visual.clone()),
        text: g.constant(text.clone()),
        text_valid,
        img_cls: g.constant(img_cls.clone()),
    };
    let out = dec.forward(&mut g, inp)?;
    Ok((
        g.value(out.img).clone(),
        g.value(out.text).clone(),
        g.value(out.pair).clone(),
    ))
}
