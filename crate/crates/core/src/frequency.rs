//! Frequency encoder: Haar sub-bands → per-band patch queries with a prepended
//! learnable band embedding → stacked intra-band / inter-band self-attention.
//!
//! Queries are kept flattened band-major: row `b·S + s` is slot `s` of band `b`,
//! with `S = N + 1` and slot 0 holding the band embedding.

use std::sync::Arc;

use crate::config::{FreqAttention, FreqInput, ModelConfig};
use crate::error::{dim_err, Result};
use crate::graph::{Graph, Mask, Var};
use crate::nn::{AttentionParams, Ffn, LayerNorm, Linear};
use crate::params::{Init, ParamBuilder, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::wavelet::{SubBands, LUMA_WEIGHTS};

pub const BANDS: usize = 4;

/// Content and position parts of the frequency queries, materialized.
#[derive(Clone, Debug)]
pub struct FrequencyQueries<T> {
    /// `[4, N+1, D]`; slot 0 of each band is its band embedding.
    pub content: Tensor<T>,
    /// `[N+1, D]`, shared by all bands.
    pub position: Tensor<T>,
    /// `[4, D]`
    pub band_embeddings: Tensor<T>,
}

impl<T: Scalar> FrequencyQueries<T> {
    /// `content + position` flattened to `[4(N+1), D]`.
    pub fn combined(&self) -> Tensor<T> {
        let s = self.position.rows();
        let d = self.position.cols();
        let mut out = self.content.clone().reshape(&[BANDS * s, d]).expect("same size");
        for b in 0..BANDS {
            for i in 0..s {
                for (o, &p) in out.row_mut(b * s + i).iter_mut().zip(self.position.row(i)) {
                    *o = *o + p;
                }
            }
        }
        out
    }
}

/// Block-diagonal mask: a query sees only queries of its own band.
pub fn intra_band_mask(slots: usize) -> Mask {
    let n = BANDS * slots;
    Mask::from_fn(n, n, |i, j| i / slots == j / slots)
}

/// Same-slot mask: a query sees the four queries sharing its spatial slot.
pub fn inter_band_mask(slots: usize) -> Mask {
    let n = BANDS * slots;
    Mask::from_fn(n, n, |i, j| i % slots == j % slots)
}

/// Self-attention restricted to each band: 4 independent `(N+1)×(N+1)` maps.
pub fn intra_band_attention<T: Scalar>(
    g: &mut Graph<T>,
    attn: &AttentionParams,
    x: Var,
    slots: usize,
) -> Result<Var> {
    check_rows(g, x, slots)?;
    let q = attn.q.forward(g, x)?;
    let k = attn.k.forward(g, x)?;
    let v = attn.v.forward(g, x)?;
    let mut outs = Vec::with_capacity(BANDS);
    for b in 0..BANDS {
        let qb = g.slice_rows(q, b * slots, slots)?;
        let kb = g.slice_rows(k, b * slots, slots)?;
        let vb = g.slice_rows(v, b * slots, slots)?;
        outs.push(g.attention(qb, kb, vb, attn.heads, None)?);
    }
    let cat = g.concat_rows(&outs)?;
    attn.o.forward(g, cat)
}

/// Self-attention across bands at one slot: `N+1` independent `4×4` maps.
pub fn inter_band_attention<T: Scalar>(
    g: &mut Graph<T>,
    attn: &AttentionParams,
    x: Var,
    slots: usize,
) -> Result<Var> {
    check_rows(g, x, slots)?;
    let to_slot_major: Vec<usize> = (0..slots)
        .flat_map(|s| (0..BANDS).map(move |b| b * slots + s))
        .collect();
    let to_band_major: Vec<usize> = (0..BANDS * slots)
        .map(|r| (r % slots) * BANDS + r / slots)
        .collect();
    let xs = g.gather_rows(x, Arc::new(to_slot_major))?;
    let q = attn.q.forward(g, xs)?;
    let k = attn.k.forward(g, xs)?;
    let v = attn.v.forward(g, xs)?;
    let mut outs = Vec::with_capacity(slots);
    for s in 0..slots {
        let qs = g.slice_rows(q, s * BANDS, BANDS)?;
        let ks = g.slice_rows(k, s * BANDS, BANDS)?;
        let vs = g.slice_rows(v, s * BANDS, BANDS)?;
        outs.push(g.attention(qs, ks, vs, attn.heads, None)?);
    }
    let cat = g.concat_rows(&outs)?;
    let back = g.gather_rows(cat, Arc::new(to_band_major))?;
    attn.o.forward(g, back)
}

fn check_rows<T: Scalar>(g: &Graph<T>, x: Var, slots: usize) -> Result<()> {
    if g.shape(x).len() != 2 || g.shape(x)[0] != BANDS * slots {
        return Err(dim_err!(
            "frequency queries must be [{}, D], got {:?}",
            BANDS * slots,
            g.shape(x)
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct FreqLayer {
    pub ln1: LayerNorm,
    pub intra: AttentionParams,
    pub ln2: LayerNorm,
    pub inter: AttentionParams,
    pub ln3: LayerNorm,
    pub ffn: Ffn,
}

impl FreqLayer {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, d: usize, heads: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(FreqLayer {
                ln1: LayerNorm::new(pb, "ln1", d),
                intra: AttentionParams::new(pb, "intra", d, heads)?,
                ln2: LayerNorm::new(pb, "ln2", d),
                inter: AttentionParams::new(pb, "inter", d, heads)?,
                ln3: LayerNorm::new(pb, "ln3", d),
                ffn: Ffn::new(pb, "ffn", d, 4 * d),
            })
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        slots: usize,
        mode: FreqAttention,
    ) -> Result<Var> {
        let mut x = x;
        match mode {
            FreqAttention::Full => {
                let h = self.ln1.forward(g, x)?;
                let a = self.intra.forward(g, h, h, None)?;
                x = g.add(x, a)?;
            }
            _ => {
                if mode != FreqAttention::InterOnly {
                    let h = self.ln1.forward(g, x)?;
                    let a = intra_band_attention(g, &self.intra, h, slots)?;
                    x = g.add(x, a)?;
                }
                if mode != FreqAttention::IntraOnly {
                    let h = self.ln2.forward(g, x)?;
                    let a = inter_band_attention(g, &self.inter, h, slots)?;
                    x = g.add(x, a)?;
                }
            }
        }
        let h = self.ln3.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.add(x, f)
    }
}

#[derive(Clone, Debug)]
pub struct FrequencyEncoder {
    pub patch: Linear,
    pub band_emb: Var,
    pub pos: Var,
    pub layers: Vec<FreqLayer>,
    pub mode: FreqAttention,
    pub input: FreqInput,
    pub patch_size: usize,
    pub band_side: usize,
}

impl FrequencyEncoder {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.dim;
        let p = cfg.freq_patch();
        let channels = match cfg.freq_input {
            FreqInput::Luma => 1,
            FreqInput::Rgb => 3,
        };
        pb.scope("frequency_encoder", |pb| {
            let patch = Linear::new(pb, "patch_embed", channels * p * p, d);
            let band_emb = pb.param("band_emb", &[BANDS, d], Init::DEFAULT);
            let pos = pb.param("pos", &[cfg.num_freq_patches() + 1, d], Init::DEFAULT);
            let layers = (0..cfg.freq_depth)
                .map(|i| FreqLayer::new(pb, &format!("layer{i}"), d, cfg.heads))
                .collect::<Result<_>>()?;
            Ok(FrequencyEncoder {
                patch,
                band_emb,
                pos,
                layers,
                mode: cfg.freq_attention,
                input: cfg.freq_input,
                patch_size: p,
                band_side: cfg.image_size / 2,
            })
        })
    }

    pub fn slots(&self) -> usize {
        let side = self.band_side / self.patch_size;
        side * side + 1
    }

    fn channels(&self) -> usize {
        match self.input {
            FreqInput::Luma => 1,
            FreqInput::Rgb => 3,
        }
    }

    /// `[3, H, W]` image → stacked sub-bands `[C·4, H/2, W/2]` (channel-major).
    pub fn sub_bands<T: Scalar>(&self, g: &mut Graph<T>, image: Var) -> Result<Var> {
        let s = g.shape(image).to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(dim_err!("expected a [3, H, W] image, got {s:?}"));
        }
        let (h, w) = (s[1], s[2]);
        let flat = g.reshape(image, &[3, h * w])?;
        let maps: Vec<Var> = match self.input {
            FreqInput::Luma => {
                let wts = g.constant(Tensor::from_f64(&[1, 3], &LUMA_WEIGHTS)?);
                vec![g.matmul(wts, flat)?]
            }
            FreqInput::Rgb => (0..3)
                .map(|c| g.slice_rows(flat, c, 1))
                .collect::<Result<_>>()?,
        };
        let mut bands = Vec::with_capacity(maps.len());
        for m in maps {
            let m = g.reshape(m, &[h, w])?;
            let b = g.haar(m)?;
            bands.push(g.reshape(b, &[BANDS, h * w / 4])?);
        }
        let cat = g.concat_rows(&bands)?;
        g.reshape(cat, &[self.channels() * BANDS, h / 2, w / 2])
    }

    /// Frequency queries `[4(N+1), D]` from stacked sub-bands.
    pub fn queries<T: Scalar>(&self, g: &mut Graph<T>, bands: Var) -> Result<Var> {
        let s = g.shape(bands).to_vec();
        let c = self.channels();
        if s.len() != 3 || s[0] != c * BANDS {
            return Err(dim_err!("expected [{}, h, w] sub-bands, got {s:?}", c * BANDS));
        }
        let (h, w, p) = (s[1], s[2], self.patch_size);
        if h % p != 0 || w % p != 0 {
            return Err(dim_err!("sub-band {h}×{w} is not divisible into {p}×{p} patches"));
        }
        let n = (h / p) * (w / p);
        let slots = n + 1;
        if slots != self.slots() {
            return Err(dim_err!("expected {} patches per band, got {n}", self.slots() - 1));
        }
        let mut idx = Vec::with_capacity(BANDS * n * c * p * p);
        for b in 0..BANDS {
            for py in 0..h / p {
                for px in 0..w / p {
                    for ch in 0..c {
                        for dy in 0..p {
                            for dx in 0..p {
                                let plane = ch * BANDS + b;
                                idx.push(((plane * h + py * p + dy) * w + px * p + dx) as u32);
                            }
                        }
                    }
                }
            }
        }
        let patches = g.gather(bands, Arc::new(idx), &[BANDS * n, c * p * p])?;
        let emb = self.patch.forward(g, patches)?;
        // rows of [band_emb; emb] rearranged so each band starts with its embedding
        let stacked = g.concat_rows(&[self.band_emb, emb])?;
        let order: Vec<usize> = (0..BANDS)
            .flat_map(|b| std::iter::once(b).chain((0..n).map(move |i| BANDS + b * n + i)))
            .collect();
        let content = g.gather_rows(stacked, Arc::new(order))?;
        let tiled: Vec<usize> = (0..BANDS).flat_map(|_| 0..slots).collect();
        let pos = g.gather_rows(self.pos, Arc::new(tiled))?;
        g.add(content, pos)
    }

    /// Runs the layers on queries and returns the four slot-0 rows `[4, D]`.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, queries: Var) -> Result<Var> {
        let slots = self.slots();
        let mut x = queries;
        for layer in &self.layers {
            x = layer.forward(g, x, slots, self.mode)?;
        }
        let heads: Vec<usize> = (0..BANDS).map(|b| b * slots).collect();
        g.gather_rows(x, Arc::new(heads))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, image: Var) -> Result<Var> {
        let bands = self.sub_bands(g, image)?;
        let q = self.queries(g, bands)?;
        self.encode(g, q)
    }

    /// Runs the encoder on already-computed luma sub-bands.
    pub fn forward_sub_bands<T: Scalar>(&self, g: &mut Graph<T>, bands: &SubBands<T>) -> Result<Var> {
        let b = g.constant(bands.stacked());
        let q = self.queries(g, b)?;
        self.encode(g, q)
    }
}

pub fn init_frequency_queries<T: Scalar>(
    store: &ParamStore<T>,
    enc: &FrequencyEncoder,
    bands: &SubBands<T>,
) -> Result<FrequencyQueries<T>> {
    let mut g = Graph::new(store);
    let b = g.constant(bands.stacked());
    let q = enc.queries(&mut g, b)?;
    let slots = enc.slots();
    let d = g.shape(q)[1];
    let position = store.get(enc.pos).clone();
    let mut content = g.value(q).clone();
    for r in 0..BANDS * slots {
        for (o, &p) in content.row_mut(r).iter_mut().zip(position.row(r % slots)) {
            *o = *o - p;
        }
    }
    Ok(FrequencyQueries {
        content: content.reshape(&[BANDS, slots, d])?,
        position,
        band_embeddings: store.get(enc.band_emb).clone(),
    })
}

pub fn frequency_encoder_forward<T: Scalar>(
    store: &ParamStore<T>,
    enc: &FrequencyEncoder,
    bands: &SubBands<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new(store);
    let out = enc.forward_sub_bands(&mut g, bands)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, probe_loss, GradCheckConfig};
    use crate::rng::Rng;
    use crate::wavelet::haar_dwt2d;

    fn build(cfg: &ModelConfig, seed: u64) -> (ParamStore<f64>, FrequencyEncoder) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let enc = FrequencyEncoder::new(&mut ParamBuilder::new(&mut store, &mut rng), cfg).unwrap();
        (store, enc)
    }

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    fn bands_of(img: &Tensor<f64>) -> SubBands<f64> {
        haar_dwt2d(img).unwrap()
    }

    #[test]
    fn query_and_output_shapes() {
        let cfg = ModelConfig::default();
        let (store, enc) = build(&cfg, 1);
        let mut rng = Rng::new(2);
        let bands = bands_of(&random(&[32, 32], &mut rng));
        let q = init_frequency_queries(&store, &enc, &bands).unwrap();
        assert_eq!(q.content.shape(), &[4, 5, 32]);
        assert_eq!(q.position.shape(), &[5, 32]);
        // slot 0 of each band is its band embedding
        for b in 0..BANDS {
            for (a, e) in q.content.row(b * 5).iter().zip(q.band_embeddings.row(b)) {
                assert!((a - e).abs() < 1e-15);
            }
        }
        let out = frequency_encoder_forward(&store, &enc, &bands).unwrap();
        assert_eq!(out.shape(), &[4, 32]);
    }

    #[test]
    fn indivisible_band_is_rejected() {
        let cfg = ModelConfig::default();
        let (store, enc) = build(&cfg, 1);
        let mut g = Graph::new(&store);
        let b = g.constant(Tensor::zeros(&[4, 12, 12]));
        assert!(enc.queries(&mut g, b).is_err());
    }

    #[test]
    fn zero_bands_give_embeddings_plus_positions() {
        let cfg = ModelConfig::default();
        let (store, enc) = build(&cfg, 3);
        let bands = bands_of(&Tensor::zeros(&[32, 32]));
        let q = init_frequency_queries(&store, &enc, &bands).unwrap();
        // patch rows reduce to the (zero) projection bias
        for b in 0..BANDS {
            for s in 1..5 {
                assert!(q.content.row(b * 5 + s).iter().all(|&v| v.abs() < 1e-15));
            }
        }
    }

    #[test]
    fn depth_zero_returns_slot_zero_inputs() {
        let cfg = ModelConfig {
            freq_depth: 0,
            ..ModelConfig::default()
        };
        let (store, enc) = build(&cfg, 4);
        let mut rng = Rng::new(5);
        let bands = bands_of(&random(&[32, 32], &mut rng));
        let out = frequency_encoder_forward(&store, &enc, &bands).unwrap();
        let emb = store.get(enc.band_emb);
        let pos = store.get(enc.pos);
        for b in 0..BANDS {
            for (j, &v) in out.row(b).iter().enumerate() {
                assert!((v - emb.row(b)[j] - pos.row(0)[j]).abs() < 1e-15);
            }
        }
    }

    fn mask_equivalence(seed: u64) -> f64 {
        let mut rng = Rng::new(seed);
        let heads = [1, 2, 4][rng.below(3)];
        let dim = heads * (1 + rng.below(4));
        let slots = 1 + rng.below(6);
        let mut store = ParamStore::new();
        let attn = AttentionParams::new(&mut ParamBuilder::new(&mut store, &mut rng), "a", dim, heads).unwrap();
        let x = random(&[BANDS * slots, dim], &mut rng);
        let mut g = Graph::new(&store);
        let xv = g.constant(x);
        let intra = intra_band_attention(&mut g, &attn, xv, slots).unwrap();
        let intra_ref = attn.forward(&mut g, xv, xv, Some(&intra_band_mask(slots))).unwrap();
        let inter = inter_band_attention(&mut g, &attn, xv, slots).unwrap();
        let inter_ref = attn.forward(&mut g, xv, xv, Some(&inter_band_mask(slots))).unwrap();
        let a = g.value(intra).max_abs_diff(g.value(intra_ref));
        let b = g.value(inter).max_abs_diff(g.value(inter_ref));
        a.max(b)
    }

    #[test]
    fn stages_match_masked_full_attention() {
        for seed in 0..20 {
            assert!(mask_equivalence(seed) < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn single_slot_intra_is_value_projection() {
        let mut rng = Rng::new(9);
        let mut store = ParamStore::new();
        let attn = AttentionParams::new(&mut ParamBuilder::new(&mut store, &mut rng), "a", 8, 2).unwrap();
        let x = random(&[BANDS, 8], &mut rng);
        let mut g = Graph::new(&store);
        let xv = g.constant(x);
        let out = intra_band_attention(&mut g, &attn, xv, 1).unwrap();
        let v = attn.v.forward(&mut g, xv).unwrap();
        let expect = attn.o.forward(&mut g, v).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(expect)) < 1e-14);
    }

    #[test]
    fn inter_stage_is_local_to_each_slot() {
        let mut rng = Rng::new(11);
        let slots = 5;
        let mut store = ParamStore::new();
        let attn = AttentionParams::new(&mut ParamBuilder::new(&mut store, &mut rng), "a", 8, 2).unwrap();
        let x = random(&[BANDS * slots, 8], &mut rng);
        let mut y = x.clone();
        let j = 3;
        for v in y.row_mut(2 * slots + j) {
            *v += 0.7;
        }
        let mut g = Graph::new(&store);
        let (xv, yv) = (g.constant(x), g.constant(y));
        let a = inter_band_attention(&mut g, &attn, xv, slots).unwrap();
        let b = inter_band_attention(&mut g, &attn, yv, slots).unwrap();
        for r in 0..BANDS * slots {
            let same = g.value(a).row(r) == g.value(b).row(r);
            assert_eq!(same, r % slots != j, "row {r}");
        }
    }

    #[test]
    fn equal_bands_are_permutation_invariant() {
        let mut rng = Rng::new(13);
        let slots = 3;
        let mut store = ParamStore::new();
        let attn = AttentionParams::new(&mut ParamBuilder::new(&mut store, &mut rng), "a", 8, 2).unwrap();
        let one = random(&[slots, 8], &mut rng);
        let x = Tensor::concat_rows(&[&one, &one, &one, &one]).unwrap();
        let mut g = Graph::new(&store);
        let xv = g.constant(x);
        let out = inter_band_attention(&mut g, &attn, xv, slots).unwrap();
        let o = g.value(out);
        for b in 1..BANDS {
            for s in 0..slots {
                assert_eq!(o.row(s), o.row(b * slots + s));
            }
        }
    }

    #[test]
    fn intra_only_keeps_bands_apart() {
        let cfg = ModelConfig {
            freq_depth: 1,
            freq_attention: FreqAttention::IntraOnly,
            ..ModelConfig::default()
        };
        let (store, enc) = build(&cfg, 21);
        let mut rng = Rng::new(22);
        let bands = bands_of(&random(&[32, 32], &mut rng));
        let mut poked = bands.clone();
        // one patch of the HL band
        poked.hl.set(&[1, 2], poked.hl.at(&[1, 2]) + 1.0);
        let a = frequency_encoder_forward(&store, &enc, &bands).unwrap();
        let b = frequency_encoder_forward(&store, &enc, &poked).unwrap();
        for band in 0..BANDS {
            let same = a.row(band) == b.row(band);
            assert_eq!(same, band != 2, "band {band}");
        }

        // with the inter stage on, the perturbation reaches every slot-0 vector
        let cfg = ModelConfig {
            freq_depth: 1,
            ..ModelConfig::default()
        };
        let (store, enc) = build(&cfg, 21);
        let a = frequency_encoder_forward(&store, &enc, &bands).unwrap();
        let b = frequency_encoder_forward(&store, &enc, &poked).unwrap();
        assert!((0..BANDS).all(|band| a.row(band) != b.row(band)));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for mode in [FreqAttention::IntraInter, FreqAttention::Full] {
            let cfg = ModelConfig {
                dim: 8,
                heads: 2,
                freq_depth: 2,
                freq_attention: mode,
                ..ModelConfig::default()
            };
            let (store, enc) = build(&cfg, 31);
            let mut rng = Rng::new(32);
            let img = random(&[3, 32, 32], &mut rng);
            let report = grad_check(
                &store,
                None,
                |g| {
                    let x = g.constant(img.clone());
                    let out = enc.forward(g, x)?;
                    probe_loss(g, out, 7)
                },
                GradCheckConfig::default(),
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{mode:?}: {report:?}");
        }
    }
}
