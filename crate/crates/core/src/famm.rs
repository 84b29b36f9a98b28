//! Forgery-aware mutual module: a four-level feature pyramid over the image
//! patch grid, per-location score/box heads, score-driven top-k selection and
//! cross-attention from the frequency features onto the selected locations.

use std::sync::Arc;

use crate::config::{MatchWeights, ModelConfig, SamplingRates};
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var, NO_INDEX};
use crate::losses::{set_prediction_loss, SetLoss};
use crate::nn::{AttentionParams, Ffn, LayerNorm, Mlp};
use crate::params::{Init, ParamBuilder};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scale {
    Half,
    One,
    Two,
    Four,
}

impl Scale {
    pub const ALL: [Scale; 4] = [Scale::Half, Scale::One, Scale::Two, Scale::Four];

    /// Side of this level's map for a grid of side `g`.
    pub fn side(self, g: usize) -> usize {
        match self {
            Scale::Half => g.div_ceil(2),
            Scale::One => g,
            Scale::Two => 2 * g,
            Scale::Four => 4 * g,
        }
    }

    /// Selection rate; `None` for the level kept whole.
    pub fn rate(self, r: &SamplingRates) -> Option<f64> {
        match self {
            Scale::Half => None,
            Scale::One => Some(r.x1),
            Scale::Two => Some(r.x2),
            Scale::Four => Some(r.x4),
        }
    }
}

/// One pyramid level with materialized values.
#[derive(Clone, Debug)]
pub struct PyramidLevel<T> {
    pub scale: Scale,
    /// `[(s·G)², D]`
    pub features: Tensor<T>,
    /// `[(s·G)²]`, in (0, 1)
    pub scores: Tensor<T>,
    /// `[(s·G)², 4]` cxcywh, in (0, 1)
    pub boxes: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ConvKind {
    Conv,
    Deconv,
}

/// 2-D (transposed) convolution with `D` in and out channels over maps stored
/// as `[side², D]` row-major location rows.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: Var,
    pub b: Var,
    kind: ConvKind,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    pub dim: usize,
}

impl Conv2d {
    fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        kind: ConvKind,
        dim: usize,
        (kernel, stride, padding, output_padding): (usize, usize, usize, usize),
    ) -> Self {
        let kk = kernel * kernel * dim;
        let shape = match kind {
            ConvKind::Conv => [kk, dim],
            ConvKind::Deconv => [dim, kk],
        };
        pb.scope(name, |pb| Conv2d {
            w: pb.param("weight", &shape, Init::DEFAULT),
            b: pb.param("bias", &[dim], Init::Zeros),
            kind,
            kernel,
            stride,
            padding,
            output_padding,
            dim,
        })
    }

    pub fn out_side(&self, side: usize) -> usize {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        match self.kind {
            ConvKind::Conv => (side + 2 * p - k) / s + 1,
            ConvKind::Deconv => (side - 1) * s + k + self.output_padding - 2 * p,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, side: usize) -> Result<Var> {
        if g.shape(x) != [side * side, self.dim] {
            return Err(dim_err!("conv input {:?} is not a {side}×{side} map", g.shape(x)));
        }
        let out = self.out_side(side);
        let y = match self.kind {
            ConvKind::Conv => {
                let idx = im2col_indices(side, self.dim, self.kernel, self.stride, self.padding, out);
                let cols = g.gather(x, Arc::new(idx), &[out * out, self.kernel * self.kernel * self.dim])?;
                g.matmul(cols, self.w)?
            }
            ConvKind::Deconv => {
                let contrib = g.matmul(x, self.w)?;
                let idx = deconv_indices(side, self.dim, self.kernel, self.stride, self.padding, out);
                g.scatter_add(contrib, Arc::new(idx), &[out * out, self.dim])?
            }
        };
        g.add_row(y, self.b)
    }
}

/// Gather layout for a strided convolution: row = output location, columns
/// ordered `(ky, kx, channel)`; taps in the zero padding read nothing.
fn im2col_indices(side: usize, d: usize, k: usize, s: usize, p: usize, out: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(out * out * k * k * d);
    for oy in 0..out {
        for ox in 0..out {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let ix = (ox * s + kx) as isize - p as isize;
                    let inside = iy >= 0 && ix >= 0 && (iy as usize) < side && (ix as usize) < side;
                    for c in 0..d {
                        idx.push(if inside {
                            ((iy as usize * side + ix as usize) * d + c) as u32
                        } else {
                            NO_INDEX
                        });
                    }
                }
            }
        }
    }
    idx
}

/// Scatter layout for a transposed convolution: input location `(iy, ix)`
/// with tap `(ky, kx)` lands on `(iy·s − p + ky, ix·s − p + kx)`.
fn deconv_indices(side: usize, d: usize, k: usize, s: usize, p: usize, out: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(side * side * k * k * d);
    for iy in 0..side {
        for ix in 0..side {
            for ky in 0..k {
                for kx in 0..k {
                    let oy = (iy * s + ky) as isize - p as isize;
                    let ox = (ix * s + kx) as isize - p as isize;
                    let inside = oy >= 0 && ox >= 0 && (oy as usize) < out && (ox as usize) < out;
                    for c in 0..d {
                        idx.push(if inside {
                            ((oy as usize * out + ox as usize) * d + c) as u32
                        } else {
                            NO_INDEX
                        });
                    }
                }
            }
        }
    }
    idx
}

/// Graph handles of one level.
#[derive(Clone, Copy, Debug)]
pub struct LevelVars {
    pub scale: Scale,
    pub side: usize,
    pub features: Var,
    /// `[n, 1]` pre-sigmoid scores
    pub score_logits: Var,
    /// `[n, 4]` sigmoid boxes
    pub boxes: Var,
}

#[derive(Clone, Debug)]
pub struct Selection {
    /// `[M, D]`
    pub gathered: Var,
    /// `(level, flat index)` of every gathered row, in row order.
    pub locations: Vec<(Scale, usize)>,
}

#[derive(Clone, Copy, Debug)]
pub struct Pyramid {
    pub convs: [Conv2d; 4],
    pub score_head: Mlp,
    pub box_head: Mlp,
}

impl Pyramid {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, d: usize) -> Self {
        pb.scope("pyramid", |pb| Pyramid {
            convs: [
                Conv2d::new(pb, "half", ConvKind::Conv, d, (3, 2, 1, 0)),
                Conv2d::new(pb, "one", ConvKind::Conv, d, (3, 1, 1, 0)),
                Conv2d::new(pb, "two", ConvKind::Deconv, d, (3, 2, 1, 1)),
                Conv2d::new(pb, "four", ConvKind::Deconv, d, (4, 4, 0, 0)),
            ],
            score_head: Mlp::new(pb, "score_head", d, 1),
            box_head: Mlp::new(pb, "box_head", d, 4),
        })
    }

    /// Patch features `[G², D]` → the four level maps (features only).
    pub fn build<T: Scalar>(&self, g: &mut Graph<T>, patches: Var) -> Result<Vec<(Scale, usize, Var)>> {
        let n = g.shape(patches)[0];
        let side = (n as f64).sqrt().round() as usize;
        if side * side != n || n == 0 {
            return Err(dim_err!("{n} patches do not form a square grid"));
        }
        Scale::ALL
            .iter()
            .zip(&self.convs)
            .map(|(&s, c)| Ok((s, c.out_side(side), c.forward(g, patches, side)?)))
            .collect()
    }

    pub fn heads<T: Scalar>(&self, g: &mut Graph<T>, features: Var) -> Result<(Var, Var)> {
        let score_logits = self.score_head.forward(g, features)?;
        let b = self.box_head.forward(g, features)?;
        Ok((score_logits, g.sigmoid(b)))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, patches: Var) -> Result<Vec<LevelVars>> {
        self.build(g, patches)?
            .into_iter()
            .map(|(scale, side, features)| {
                let (score_logits, boxes) = self.heads(g, features)?;
                Ok(LevelVars {
                    scale,
                    side,
                    features,
                    score_logits,
                    boxes,
                })
            })
            .collect()
    }
}

/// `⌊rate · count⌋`, tolerant of representation error just below an integer.
pub fn selected_count(count: usize, rate: f64) -> Result<usize> {
    if !(rate > 0.0) || rate > 1.0 {
        return Err(Error::Config(format!("sampling rate {rate} must lie in (0, 1]")));
    }
    Ok(((rate * count as f64) + 1e-9).floor() as usize)
}

/// Indices of the `k` largest scores, ties to the lower index, returned ascending.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

fn level_picks(scale: Scale, scores: &[f64], rates: &SamplingRates) -> Result<Vec<usize>> {
    Ok(match scale.rate(rates) {
        None => (0..scores.len()).collect(),
        Some(r) => top_k(scores, selected_count(scores.len(), r)?),
    })
}

/// Gathers the top-scored locations of every level (the 0.5× level whole).
pub fn select<T: Scalar>(g: &mut Graph<T>, levels: &[LevelVars], rates: &SamplingRates) -> Result<Selection> {
    let mut parts = Vec::new();
    let mut locations = Vec::new();
    for l in levels {
        let scores: Vec<f64> = g.value(l.score_logits).data().iter().map(|v| v.f64()).collect();
        let picks = level_picks(l.scale, &scores, rates)?;
        if picks.is_empty() {
            continue;
        }
        locations.extend(picks.iter().map(|&i| (l.scale, i)));
        parts.push(g.gather_rows(l.features, Arc::new(picks))?);
    }
    if parts.is_empty() {
        return Err(Error::Config("forgery selection kept no locations".into()));
    }
    Ok(Selection {
        gathered: g.concat_rows(&parts)?,
        locations,
    })
}

/// Fixed sinusoidal code of each location's centre in normalized image
/// coordinates, so one spot gets the same code at every scale. `[M, d]`,
/// `d` divisible by 4.
pub fn location_encoding<T: Scalar>(locations: &[(Scale, usize)], grid: usize, d: usize) -> Result<Tensor<T>> {
    if !d.is_multiple_of(4) {
        return Err(dim_err!("location encoding width {d} is not divisible by 4"));
    }
    let f = d / 4;
    let mut out = Vec::with_capacity(locations.len() * d);
    for &(scale, idx) in locations {
        let side = scale.side(grid);
        let cy = ((idx / side) as f64 + 0.5) / side as f64;
        let cx = ((idx % side) as f64 + 0.5) / side as f64;
        for coord in [cx, cy] {
            for k in 0..f {
                let w = std::f64::consts::PI * 2f64.powf(k as f64 / 2.0);
                out.push(T::c((w * coord).sin()));
                out.push(T::c((w * coord).cos()));
            }
        }
    }
    Tensor::new(&[locations.len(), d], out)
}

/// Value-level selection over materialized pyramid levels.
pub fn forgery_select<T: Scalar>(
    levels: &[PyramidLevel<T>],
    rates: &SamplingRates,
) -> Result<(Tensor<T>, Vec<(Scale, usize)>)> {
    let mut rows: Vec<Tensor<T>> = Vec::new();
    let mut locations = Vec::new();
    for l in levels {
        let scores: Vec<f64> = l.scores.to_f64_vec();
        if scores.len() != l.features.rows() {
            return Err(dim_err!("{} scores for {} locations", scores.len(), l.features.rows()));
        }
        for i in level_picks(l.scale, &scores, rates)? {
            locations.push((l.scale, i));
            rows.push(l.features.slice_rows(i, 1)?);
        }
    }
    if rows.is_empty() {
        return Err(Error::Config("forgery selection kept no locations".into()));
    }
    let refs: Vec<&Tensor<T>> = rows.iter().collect();
    Ok((Tensor::concat_rows(&refs)?, locations))
}

/// Matched set loss summed over the levels.
pub fn pyramid_aux_loss<T: Scalar>(
    g: &mut Graph<T>,
    levels: &[LevelVars],
    gt: &[[f64; 4]],
    w: &MatchWeights,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for l in levels {
        let SetLoss { loss, .. } = set_prediction_loss(g, l.score_logits, l.boxes, gt, w)?;
        total = Some(match total {
            Some(t) => g.add(t, loss)?,
            None => loss,
        });
    }
    total.ok_or_else(|| Error::Input("no pyramid levels".into()))
}

/// Frequency rows attend to the selected visual rows (pre-norm residual,
/// then FFN); output `[aligned freq; gathered]`.
#[derive(Clone, Copy, Debug)]
pub struct MutualCrossAttention {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: AttentionParams,
    pub ln_ffn: LayerNorm,
    pub ffn: Ffn,
}

impl MutualCrossAttention {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, d: usize, heads: usize) -> Result<Self> {
        pb.scope("mutual", |pb| {
            Ok(MutualCrossAttention {
                ln_q: LayerNorm::new(pb, "ln_q", d),
                ln_kv: LayerNorm::new(pb, "ln_kv", d),
                attn: AttentionParams::new(pb, "attn", d, heads)?,
                ln_ffn: LayerNorm::new(pb, "ln_ffn", d),
                ffn: Ffn::new(pb, "ffn", d, 4 * d),
            })
        })
    }

    pub fn align<T: Scalar>(&self, g: &mut Graph<T>, freq: Var, gathered: Var) -> Result<Var> {
        if g.shape(gathered)[0] == 0 {
            return Err(Error::Config("no selected locations to attend to".into()));
        }
        let q = self.ln_q.forward(g, freq)?;
        let kv = self.ln_kv.forward(g, gathered)?;
        let a = self.attn.forward(g, q, kv, None)?;
        let x = g.add(freq, a)?;
        let h = self.ln_ffn.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.add(x, f)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, freq: Var, gathered: Var) -> Result<Var> {
        let aligned = self.align(g, freq, gathered)?;
        g.concat_rows(&[aligned, gathered])
    }
}

/// Everything the module owns.
#[derive(Clone, Copy, Debug)]
pub struct Famm {
    pub pyramid: Pyramid,
    pub mutual: MutualCrossAttention,
}

impl Famm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        pb.scope("famm", |pb| {
            Ok(Famm {
                pyramid: Pyramid::new(pb, cfg.dim),
                mutual: MutualCrossAttention::new(pb, cfg.dim, cfg.heads)?,
            })
        })
    }
}

/// Location counts per level for a grid of side `g`.
pub fn level_counts(g: usize) -> [usize; 4] {
    Scale::ALL.map(|s| s.side(g) * s.side(g))
}
