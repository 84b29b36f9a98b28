//! Training objectives: logit-space BCE, focal loss, and the matched set loss
//! shared by the grounding queries and the pyramid levels.

use std::sync::Arc;

use crate::boxes::{giou_cxcywh, iou_cxcywh};
use crate::config::MatchWeights;
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::sigmoid;
use crate::matching::{hungarian, MatchResult};
use crate::tensor::{Scalar, Tensor};

pub use crate::boxes::giou_corners as giou;

/// Binary cross entropy of `σ(logit)` against `target`.
pub fn bce(logit: f64, target: f64) -> f64 {
    let mut g = Graph::<f64>::empty();
    let x = g.constant(Tensor::scalar(logit));
    let l = g.bce_logits(x, &[target], &[1.0]).expect("one logit");
    g.value(l).data()[0]
}

/// Mean BCE over the classes.
pub fn multilabel_bce(logits: &[f64], targets: &[f64]) -> Result<f64> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(dim_err!("{} logits vs {} targets", logits.len(), targets.len()));
    }
    let mut g = Graph::<f64>::empty();
    let x = g.constant(Tensor::new(&[logits.len()], logits.to_vec())?);
    let w = vec![1.0 / logits.len() as f64; logits.len()];
    let l = g.bce_logits(x, targets, &w)?;
    Ok(g.value(l).data()[0])
}

/// Per-position weights averaging over the valid entries.
pub fn valid_weights(valid: &[bool]) -> Result<Vec<f64>> {
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(Error::Input("focal loss over an empty valid mask".into()));
    }
    Ok(valid
        .iter()
        .map(|&v| if v { 1.0 / n as f64 } else { 0.0 })
        .collect())
}

/// Mean focal loss over the valid positions.
pub fn focal_loss(
    logits: &[f64],
    targets: &[f64],
    gamma: f64,
    alpha: f64,
    valid: &[bool],
) -> Result<f64> {
    if logits.len() != targets.len() || logits.len() != valid.len() {
        return Err(dim_err!("focal loss: length mismatch"));
    }
    let w = valid_weights(valid)?;
    let mut g = Graph::<f64>::empty();
    let x = g.constant(Tensor::new(&[logits.len()], logits.to_vec())?);
    let l = g.focal(x, targets, &w, gamma, alpha)?;
    Ok(g.value(l).data()[0])
}

/// `[n × m]` matching cost between predictions and ground-truth boxes.
pub fn match_cost(scores: &[f64], boxes: &[[f64; 4]], gt: &[[f64; 4]], w: &MatchWeights) -> Result<Vec<f64>> {
    if scores.len() != boxes.len() {
        return Err(dim_err!("{} scores for {} boxes", scores.len(), boxes.len()));
    }
    let mut cost = Vec::with_capacity(boxes.len() * gt.len());
    for (s, b) in scores.iter().zip(boxes) {
        for t in gt {
            let l1: f64 = b.iter().zip(t).map(|(x, y)| (x - y).abs()).sum();
            let giou = giou_cxcywh(*b, *t)?;
            cost.push(w.class * (1.0 - s) + w.l1 * l1 + w.giou * (1.0 - giou));
        }
    }
    Ok(cost)
}

/// Breakdown of one set loss.
#[derive(Clone, Debug)]
pub struct SetLoss {
    pub loss: Var,
    pub matching: MatchResult,
}

/// Hungarian-matched set loss over `n` predictions:
/// mean BCE of every confidence (matched → 1, others → 0), plus
/// `(L1 + 1 − GIoU)` on matched boxes averaged over the ground truth.
pub fn set_prediction_loss<T: Scalar>(
    g: &mut Graph<T>,
    conf_logits: Var,
    boxes: Var,
    gt: &[[f64; 4]],
    w: &MatchWeights,
) -> Result<SetLoss> {
    let n = g.value(conf_logits).len();
    if g.shape(boxes) != [n, 4] {
        return Err(dim_err!("{n} confidences vs boxes {:?}", g.shape(boxes)));
    }
    let scores: Vec<f64> = g.value(conf_logits).data().iter().map(|&x| sigmoid(x).f64()).collect();
    let pred: Vec<[f64; 4]> = g
        .value(boxes)
        .data()
        .chunks(4)
        .map(|c| [c[0].f64(), c[1].f64(), c[2].f64(), c[3].f64()])
        .collect();
    let cost = match_cost(&scores, &pred, gt, w)?;
    let matching = hungarian(&cost, n, gt.len())?;

    let mut targets = vec![0.0; n];
    for &(p, _) in &matching.pairs {
        targets[p] = 1.0;
    }
    let weights = vec![1.0 / n.max(1) as f64; n];
    let mut loss = g.bce_logits(conf_logits, &targets, &weights)?;
    if !matching.pairs.is_empty() {
        let rows: Vec<usize> = matching.pairs.iter().map(|&(p, _)| p).collect();
        let tgt: Vec<f64> = matching.pairs.iter().flat_map(|&(_, t)| gt[t]).collect();
        let picked = g.gather_rows(boxes, Arc::new(rows))?;
        let l1 = g.l1(picked, &tgt)?;
        let gl = g.giou_loss(picked, &tgt)?;
        let b = g.add(l1, gl)?;
        let b = g.scale(b, 1.0 / gt.len() as f64);
        loss = g.add(loss, b)?;
    }
    Ok(SetLoss { loss, matching })
}

/// Set loss of the `K` grounding queries; `boxes [K×4]` cxcywh, `conf_logits [K]`.
pub fn box_set_loss<T: Scalar>(
    boxes: &Tensor<T>,
    conf_logits: &Tensor<T>,
    gt: &[[f64; 4]],
    w: &MatchWeights,
) -> Result<f64> {
    let mut g = Graph::<T>::empty();
    let b = g.constant(boxes.clone());
    let c = g.constant(conf_logits.clone());
    let out = set_prediction_loss(&mut g, c, b, gt, w)?;
    Ok(g.value(out.loss).data()[0].f64())
}

/// IoU of the highest-confidence box with a ground-truth box.
pub fn best_box_iou(boxes: &[[f64; 4]], conf: &[f64], gt: [f64; 4]) -> Option<f64> {
    let best = conf
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, f64)>, (i, &c)| match acc {
            Some((_, bc)) if bc >= c => acc,
            _ => Some((i, c)),
        })?;
    Some(iou_cxcywh(boxes[best.0], gt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::giou_corners;
    use std::f64::consts::LN_2;

    #[test]
    fn bce_closed_forms() {
        assert!((bce(0.0, 1.0) - LN_2).abs() < 1e-15);
        assert!(bce(40.0, 1.0) < 1e-15);
        assert!((multilabel_bce(&[0.0; 4], &[0.0; 4]).unwrap() - LN_2).abs() < 1e-15);
        // large negative logit, positive target: stable linear growth
        assert!((bce(-800.0, 1.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn focal_closed_forms() {
        let v = focal_loss(&[0.0], &[1.0], 2.0, 0.25, &[true]).unwrap();
        assert!((v - 0.25 * 0.25 * LN_2).abs() < 1e-15);
        assert!((v - 0.04332).abs() < 1e-5);
        assert!(focal_loss(&[30.0], &[1.0], 2.0, 0.25, &[true]).unwrap() < 1e-20);
        assert!(focal_loss(&[0.0], &[1.0], 2.0, 0.25, &[false]).is_err());
    }

    #[test]
    fn focal_reduces_to_half_bce() {
        let logits = [-2.0, 0.3, 1.7, -0.4, 5.0];
        let targets = [0.0, 1.0, 1.0, 0.0, 0.0];
        let valid = [true, true, false, true, true];
        let f = focal_loss(&logits, &targets, 0.0, 0.5, &valid).unwrap();
        let mean_bce = (0..5)
            .filter(|&i| valid[i])
            .map(|i| bce(logits[i], targets[i]))
            .sum::<f64>()
            / 4.0;
        assert!((f - 0.5 * mean_bce).abs() < 1e-12);
    }

    #[test]
    fn giou_cases() {
        let a = [0.0, 0.0, 1.0, 1.0];
        assert!((giou(a, a).unwrap() - 1.0).abs() < 1e-15);
        assert!(giou(a, [1.0, 0.0, 2.0, 1.0]).unwrap().abs() < 1e-15);
        assert!((giou(a, [2.0, 0.0, 3.0, 1.0]).unwrap() + 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(giou(a, [2.0, 0.0, 3.0, 1.0]).unwrap(), giou_corners([2.0, 0.0, 3.0, 1.0], a).unwrap());
    }

    fn logits(p: &[f64]) -> Tensor<f64> {
        Tensor::new(&[p.len()], p.iter().map(|&v| (v / (1.0 - v)).ln()).collect()).unwrap()
    }

    #[test]
    fn box_set_loss_limits() {
        let w = MatchWeights::default();
        let gt = [0.4, 0.5, 0.2, 0.3];
        let boxes = Tensor::<f64>::from_rows(&[vec![0.7, 0.7, 0.1, 0.1], gt.to_vec(), vec![0.2, 0.2, 0.3, 0.3]]).unwrap();
        let conf = Tensor::from_f64(&[3], &[-40.0, 40.0, -40.0]).unwrap();
        assert!(box_set_loss(&boxes, &conf, &[gt], &w).unwrap() < 1e-15);
        let conf = Tensor::from_f64(&[3], &[-40.0; 3]).unwrap();
        assert!(box_set_loss(&boxes, &conf, &[], &w).unwrap() < 1e-15);
    }

    #[test]
    fn box_set_loss_two_queries_by_hand() {
        let w = MatchWeights::default();
        let gt = [0.5, 0.5, 0.4, 0.4];
        let b0 = [0.3, 0.3, 0.2, 0.2];
        let b1 = [0.55, 0.5, 0.4, 0.3];
        let p = [0.6, 0.3];
        let boxes = Tensor::from_rows(&[b0.to_vec(), b1.to_vec()]).unwrap();
        let got = box_set_loss(&boxes, &logits(&p), &[gt], &w).unwrap();

        // both assignments by hand; cheaper one supervises
        let l1 = |b: [f64; 4]| b.iter().zip(gt).map(|(x, y)| (x - y).abs()).sum::<f64>();
        let gi = |b: [f64; 4]| giou_cxcywh(b, gt).unwrap();
        let c0 = 2.0 * (1.0 - p[0]) + 5.0 * l1(b0) + 2.0 * (1.0 - gi(b0));
        let c1 = 2.0 * (1.0 - p[1]) + 5.0 * l1(b1) + 2.0 * (1.0 - gi(b1));
        assert!(c1 < c0);
        let want = (-(p[1]).ln() - (1.0 - p[0]).ln()) / 2.0 + l1(b1) + 1.0 - gi(b1);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn box_set_loss_is_slot_permutation_invariant() {
        let w = MatchWeights::default();
        let rows = vec![
            vec![0.3, 0.3, 0.2, 0.2],
            vec![0.55, 0.5, 0.4, 0.3],
            vec![0.6, 0.2, 0.1, 0.3],
        ];
        let c = [0.2, -0.3, 1.1];
        let gt = [[0.5, 0.5, 0.4, 0.4], [0.6, 0.25, 0.1, 0.2]];
        let a = box_set_loss(&Tensor::<f64>::from_rows(&rows).unwrap(), &Tensor::from_f64(&[3], &c).unwrap(), &gt, &w).unwrap();
        let perm = [2, 0, 1];
        let rows_p: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let c_p: Vec<f64> = perm.iter().map(|&i| c[i]).collect();
        let b = box_set_loss(&Tensor::<f64>::from_rows(&rows_p).unwrap(), &Tensor::from_f64(&[3], &c_p).unwrap(), &gt, &w).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn best_box_picks_argmax_confidence() {
        let boxes = [[0.2, 0.2, 0.2, 0.2], [0.5, 0.5, 0.2, 0.2]];
        let iou = best_box_iou(&boxes, &[0.1, 0.9], [0.5, 0.5, 0.2, 0.2]).unwrap();
        assert!((iou - 1.0).abs() < 1e-12);
        assert!(best_box_iou(&[], &[], [0.5; 4]).is_none());
    }
}
