//! Task heads on the decoder outputs and the weighted training objective.

use serde::{Deserialize, Serialize};

use crate::config::{LossWeights, MatchWeights};
use crate::decoder::DecoderOutput;
use crate::error::{dim_err, Error, Result};
use crate::famm::{pyramid_aux_loss, LevelVars};
use crate::graph::{Graph, Var};
use crate::kernels::sigmoid;
use crate::losses::{set_prediction_loss, valid_weights};
use crate::nn::{Linear, Mlp};
use crate::params::ParamBuilder;
use crate::tensor::Scalar;

/// Fine-grained manipulation types, in label order.
pub const FG_NAMES: [&str; 4] = ["FS", "FA", "TS", "TA"];

#[derive(Clone, Copy, Debug)]
pub struct Heads {
    pub binary: Mlp,
    pub fg_image: Mlp,
    pub fg_text: Mlp,
    pub boxes: Mlp,
    pub conf: Linear,
    pub token: Mlp,
}

/// Graph handles of every head output.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// `[1, 1]`
    pub binary_logit: Var,
    /// `[2, 2]`; flat order FS, FA, TS, TA
    pub fg_logits: Var,
    /// `[K, 4]` sigmoid cxcywh
    pub boxes: Var,
    /// `[K, 1]`
    pub conf_logits: Var,
    /// `[L, 1]`
    pub token_logits: Var,
}

impl Heads {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, d: usize) -> Self {
        pb.scope("heads", |pb| Heads {
            binary: Mlp::new(pb, "binary", d, 1),
            fg_image: Mlp::new(pb, "fg_image", d, 2),
            fg_text: Mlp::new(pb, "fg_text", d, 2),
            boxes: Mlp::new(pb, "boxes", d, 4),
            conf: Linear::new(pb, "conf", d, 1),
            token: Mlp::new(pb, "token", d, 1),
        })
    }

    /// The output layers (zeroing these zeroes every logit).
    pub fn output_layers(&self) -> [Linear; 6] {
        [
            self.binary.fc2,
            self.fg_image.fc2,
            self.fg_text.fc2,
            self.boxes.fc2,
            self.conf,
            self.token.fc2,
        ]
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, dec: &DecoderOutput) -> Result<HeadVars> {
        let ni = g.shape(dec.img)[0];
        let nt = g.shape(dec.text)[0];
        if nt < 1 || ni < 1 {
            return Err(dim_err!("decoder outputs lack their CLS rows"));
        }
        let binary_logit = self.binary.forward(g, dec.pair)?;
        let img_cls = g.slice_rows(dec.img, 0, 1)?;
        let text_cls = g.slice_rows(dec.text, 0, 1)?;
        let fi = self.fg_image.forward(g, img_cls)?;
        let ft = self.fg_text.forward(g, text_cls)?;
        let fg_logits = g.concat_rows(&[fi, ft])?;
        let grounding = g.slice_rows(dec.img, 1, ni - 1)?;
        let b = self.boxes.forward(g, grounding)?;
        let boxes = g.sigmoid(b);
        let conf_logits = self.conf.forward(g, grounding)?;
        let content = g.slice_rows(dec.text, 1, nt - 1)?;
        let token_logits = self.token.forward(g, content)?;
        Ok(HeadVars {
            binary_logit,
            fg_logits,
            boxes,
            conf_logits,
            token_logits,
        })
    }
}

/// Per-sample predictions as plain values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub binary_logit: f64,
    pub fg_logits: [f64; 4],
    pub boxes: Vec<[f64; 4]>,
    /// Sigmoid confidences.
    pub box_conf: Vec<f64>,
    pub token_logits: Vec<f64>,
}

impl Predictions {
    pub fn from_graph<T: Scalar>(g: &Graph<T>, h: &HeadVars) -> Self {
        let vals = |v: Var| g.value(v).to_f64_vec();
        let fg = vals(h.fg_logits);
        Predictions {
            binary_logit: vals(h.binary_logit)[0],
            fg_logits: [fg[0], fg[1], fg[2], fg[3]],
            boxes: vals(h.boxes).chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
            box_conf: vals(h.conf_logits).into_iter().map(sigmoid).collect(),
            token_logits: vals(h.token_logits),
        }
    }

    pub fn binary_score(&self) -> f64 {
        sigmoid(self.binary_logit)
    }

    pub fn fg_scores(&self) -> [f64; 4] {
        self.fg_logits.map(sigmoid)
    }

    pub fn token_scores(&self) -> Vec<f64> {
        self.token_logits.iter().map(|&x| sigmoid(x)).collect()
    }

    /// The box of the highest-confidence grounding query (first on ties).
    pub fn best_box(&self) -> Option<([f64; 4], f64)> {
        let mut best: Option<([f64; 4], f64)> = None;
        for (b, &c) in self.boxes.iter().zip(&self.box_conf) {
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((*b, c));
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub pair_fake: bool,
    pub fg_labels: [bool; 4],
    pub face_boxes: Vec<[f64; 4]>,
    /// One flag per content position; PAD positions are excluded by `token_valid`.
    pub token_fake: Vec<bool>,
    pub token_valid: Vec<bool>,
}

impl GroundTruth {
    pub fn validate(&self) -> Result<()> {
        if self.fg_labels.iter().any(|&l| l) && !self.pair_fake {
            return Err(Error::Input("manipulation labels on a pristine pair".into()));
        }
        if self.token_fake.len() != self.token_valid.len() {
            return Err(dim_err!("token labels and validity differ in length"));
        }
        for b in &self.face_boxes {
            if b.iter().any(|v| !(0.0..=1.0).contains(v)) || b[2] <= 0.0 || b[3] <= 0.0 {
                return Err(Error::Input(format!("box {b:?} outside the unit square")));
            }
        }
        Ok(())
    }
}

/// One value per loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms<V> {
    pub binary: V,
    pub fine_grained: V,
    pub bbox: V,
    pub token: V,
    pub pyramid: V,
}

impl<V: Copy> LossTerms<V> {
    pub fn named(&self) -> [(&'static str, V); 5] {
        [
            ("binary", self.binary),
            ("fine_grained", self.fine_grained),
            ("bbox", self.bbox),
            ("token", self.token),
            ("pyramid", self.pyramid),
        ]
    }

    pub fn map<U>(&self, mut f: impl FnMut(V) -> U) -> LossTerms<U> {
        LossTerms {
            binary: f(self.binary),
            fine_grained: f(self.fine_grained),
            bbox: f(self.bbox),
            token: f(self.token),
            pyramid: f(self.pyramid),
        }
    }

    pub fn zip<U>(&self, o: &LossTerms<V>, mut f: impl FnMut(V, V) -> U) -> LossTerms<U> {
        LossTerms {
            binary: f(self.binary, o.binary),
            fine_grained: f(self.fine_grained, o.fine_grained),
            bbox: f(self.bbox, o.bbox),
            token: f(self.token, o.token),
            pyramid: f(self.pyramid, o.pyramid),
        }
    }
}

impl LossTerms<f64> {
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.binary * self.binary
            + w.fine_grained * self.fine_grained
            + w.bbox * self.bbox
            + w.token * self.token
            + w.pyramid * self.pyramid
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub matching: MatchWeights,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

/// Builds every loss term and their weighted sum.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    heads: &HeadVars,
    levels: &[LevelVars],
    gt: &GroundTruth,
    s: &LossSettings,
) -> Result<(Var, LossTerms<Var>)> {
    gt.validate()?;
    let w = s.weights;
    if [w.binary, w.fine_grained, w.bbox, w.token, w.pyramid]
        .iter()
        .any(|&v| !(v >= 0.0))
    {
        return Err(Error::Config("loss weights must be non-negative".into()));
    }
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let binary = g.bce_logits(heads.binary_logit, &[flag(gt.pair_fake)], &[1.0])?;
    let fine_grained = g.bce_logits(heads.fg_logits, &gt.fg_labels.map(flag), &[0.25; 4])?;
    let bbox = set_prediction_loss(g, heads.conf_logits, heads.boxes, &gt.face_boxes, &s.matching)?.loss;
    let nl = g.shape(heads.token_logits)[0];
    if gt.token_fake.len() != nl {
        return Err(dim_err!("{} token labels for {nl} token logits", gt.token_fake.len()));
    }
    let token = if gt.token_valid.iter().any(|&v| v) {
        let tw = valid_weights(&gt.token_valid)?;
        let tt: Vec<f64> = gt.token_fake.iter().map(|&b| flag(b)).collect();
        g.focal(heads.token_logits, &tt, &tw, s.focal_gamma, s.focal_alpha)?
    } else {
        // captions without content tokens contribute nothing
        g.constant(crate::tensor::Tensor::scalar(T::zero()))
    };
    let pyramid = if levels.is_empty() {
        g.constant(crate::tensor::Tensor::scalar(T::zero()))
    } else {
        pyramid_aux_loss(g, levels, &gt.face_boxes, &s.matching)?
    };
    let terms = LossTerms {
        binary,
        fine_grained,
        bbox,
        token,
        pyramid,
    };
    let mut total = g.scale(binary, w.binary);
    for (v, wt) in [
        (fine_grained, w.fine_grained),
        (bbox, w.bbox),
        (token, w.token),
        (pyramid, w.pyramid),
    ] {
        let t = g.scale(v, wt);
        total = g.add(total, t)?;
    }
    Ok((total, terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{bce, box_set_loss, focal_loss, multilabel_bce};
    use crate::params::ParamStore;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn settings() -> LossSettings {
        LossSettings {
            weights: LossWeights::default(),
            matching: MatchWeights::default(),
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }

    fn heads_on(g: &mut Graph<f64>, bin: f64, fg: [f64; 4], boxes: &[[f64; 4]], conf: &[f64], tok: &[f64]) -> HeadVars {
        let rows: Vec<Vec<f64>> = boxes.iter().map(|b| b.to_vec()).collect();
        HeadVars {
            binary_logit: g.constant(Tensor::from_f64(&[1, 1], &[bin]).unwrap()),
            fg_logits: g.constant(Tensor::from_f64(&[2, 2], &fg).unwrap()),
            boxes: g.constant(Tensor::from_rows(&rows).unwrap()),
            conf_logits: g.constant(Tensor::from_f64(&[conf.len(), 1], conf).unwrap()),
            token_logits: g.constant(Tensor::from_f64(&[tok.len(), 1], tok).unwrap()),
        }
    }

    fn truth() -> GroundTruth {
        GroundTruth {
            pair_fake: true,
            fg_labels: [true, false, false, true],
            face_boxes: vec![[0.4, 0.6, 0.3, 0.2]],
            token_fake: vec![false, true, false, false],
            token_valid: vec![true, true, true, false],
        }
    }

    #[test]
    fn zero_heads_give_neutral_outputs() {
        let d = 8;
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(1);
        let heads = Heads::new(&mut ParamBuilder::new(&mut store, &mut rng), d);
        for l in heads.output_layers() {
            let s = store.get(l.w).shape().to_vec();
            *store.get_mut(l.w) = Tensor::zeros(&s);
        }
        let mut g = Graph::new(&store);
        let dec = DecoderOutput {
            img: g.constant(Tensor::full(&[6, d], 0.3)),
            text: g.constant(Tensor::full(&[51, d], -0.2)),
            pair: g.constant(Tensor::full(&[1, d], 1.0)),
        };
        let h = heads.forward(&mut g, &dec).unwrap();
        let p = Predictions::from_graph(&g, &h);
        assert_eq!(p.binary_logit, 0.0);
        assert_eq!(p.fg_logits, [0.0; 4]);
        assert_eq!(p.boxes, vec![[0.5; 4]; 5]);
        assert_eq!(p.box_conf, vec![0.5; 5]);
        assert_eq!(p.token_logits, vec![0.0; 50]);
    }

    #[test]
    fn perfect_predictions_cost_nothing() {
        let gt = truth();
        let mut g = Graph::<f64>::empty();
        let big = 60.0;
        let h = heads_on(
            &mut g,
            big,
            [big, -big, -big, big],
            &[[0.2, 0.2, 0.1, 0.1], gt.face_boxes[0]],
            &[-big, big],
            &[-big, big, -big, 0.0],
        );
        let (total, _) = total_loss(&mut g, &h, &[], &gt, &settings()).unwrap();
        assert!(g.value(total).data()[0] < 1e-20);
    }

    #[test]
    fn total_is_the_sum_of_the_separately_checked_terms() {
        let gt = truth();
        let mut g = Graph::<f64>::empty();
        let boxes = [[0.3, 0.5, 0.2, 0.2], [0.6, 0.6, 0.3, 0.3]];
        let conf = [0.4, -0.3];
        let tok = [0.2, -0.5, 1.0, 3.0];
        let fg = [0.1, -0.2, 0.3, 0.0];
        let h = heads_on(&mut g, 0.7, fg, &boxes, &conf, &tok);
        let (total, terms) = total_loss(&mut g, &h, &[], &gt, &settings()).unwrap();

        let b = bce(0.7, 1.0);
        let f = multilabel_bce(&fg, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let rows: Vec<Vec<f64>> = boxes.iter().map(|b| b.to_vec()).collect();
        let bx = box_set_loss(
            &Tensor::<f64>::from_rows(&rows).unwrap(),
            &Tensor::from_f64(&[2], &conf).unwrap(),
            &gt.face_boxes,
            &MatchWeights::default(),
        )
        .unwrap();
        let t = focal_loss(&tok, &[0.0, 1.0, 0.0, 0.0], 2.0, 0.25, &gt.token_valid).unwrap();
        let vals = terms.map(|v| g.value(v).data()[0]);
        assert!((vals.binary - b).abs() < 1e-14);
        assert!((vals.fine_grained - f).abs() < 1e-14);
        assert!((vals.bbox - bx).abs() < 1e-14);
        assert!((vals.token - t).abs() < 1e-14);
        assert_eq!(vals.pyramid, 0.0);
        assert!((g.value(total).data()[0] - (b + f + bx + t)).abs() < 1e-13);

        // zeroing one weight removes exactly that term
        let mut s = settings();
        s.weights.token = 0.0;
        let (t2, _) = total_loss(&mut g, &h, &[], &gt, &s).unwrap();
        assert!((g.value(t2).data()[0] - (b + f + bx)).abs() < 1e-13);
    }

    #[test]
    fn inconsistent_labels_are_rejected() {
        let mut gt = truth();
        gt.pair_fake = false;
        assert!(gt.validate().is_err());
        let mut gt = truth();
        gt.face_boxes[0][0] = 1.2;
        assert!(gt.validate().is_err());
    }

    #[test]
    fn best_box_is_argmax_confidence() {
        let p = Predictions {
            binary_logit: 0.0,
            fg_logits: [0.0; 4],
            boxes: vec![[0.1; 4], [0.2; 4], [0.3; 4]],
            box_conf: vec![0.2, 0.9, 0.9],
            token_logits: vec![],
        };
        assert_eq!(p.best_box().unwrap().0, [0.2; 4]);
    }
}
