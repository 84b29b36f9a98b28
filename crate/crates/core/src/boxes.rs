//! Axis-aligned box geometry. `cxcywh` is the canonical parameterization;
//! corner form `(x0, y0, x1, y1)` is only used inside IoU / GIoU.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub fn cxcywh_to_corners(b: [f64; 4]) -> [f64; 4] {
    let [cx, cy, w, h] = b;
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

pub fn corners_to_cxcywh(b: [f64; 4]) -> [f64; 4] {
    let [x0, y0, x1, y1] = b;
    [(x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0]
}

fn area(b: [f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

fn intersection(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    iw * ih
}

/// IoU of two corner-form boxes; 0 when the union is empty.
pub fn iou_corners(a: [f64; 4], b: [f64; 4]) -> f64 {
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn iou_cxcywh(a: [f64; 4], b: [f64; 4]) -> f64 {
    iou_corners(cxcywh_to_corners(a), cxcywh_to_corners(b))
}

/// Generalized IoU of two corner-form boxes, in (−1, 1].
pub fn giou_corners(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    for bx in [a, b] {
        if !(bx[2] > bx[0] && bx[3] > bx[1]) {
            return Err(Error::Input(format!("box {bx:?} has non-positive extent")));
        }
    }
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    let hull = [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])];
    let c = area(hull);
    Ok(inter / union - (c - union) / c)
}

pub fn giou_cxcywh(a: [f64; 4], b: [f64; 4]) -> Result<f64> {
    giou_corners(cxcywh_to_corners(a), cxcywh_to_corners(b))
}

/// `1 − GIoU(pred, gt)` for cxcywh boxes, with its gradient with respect to the
/// predicted `(cx, cy, w, h)`.
pub(crate) fn giou_loss_grad<T: Scalar>(pred: &[T], gt: &[T]) -> (T, [T; 4]) {
    let two = T::c(2.0);
    let half = T::c(0.5);
    let (x0, y0) = (pred[0] - pred[2] * half, pred[1] - pred[3] * half);
    let (x1, y1) = (pred[0] + pred[2] * half, pred[1] + pred[3] * half);
    let (gx0, gy0) = (gt[0] - gt[2] * half, gt[1] - gt[3] * half);
    let (gx1, gy1) = (gt[0] + gt[2] * half, gt[1] + gt[3] * half);
    let ind = |c: bool| if c { T::one() } else { T::zero() };

    let iw_raw = x1.min(gx1) - x0.max(gx0);
    let ih_raw = y1.min(gy1) - y0.max(gy0);
    let iw = iw_raw.max(T::zero());
    let ih = ih_raw.max(T::zero());
    let inter = iw * ih;
    // d/d(x0, y0, x1, y1)
    let diw = [-ind(iw_raw > T::zero() && x0 > gx0), ind(iw_raw > T::zero() && x1 < gx1)];
    let dih = [-ind(ih_raw > T::zero() && y0 > gy0), ind(ih_raw > T::zero() && y1 < gy1)];
    let dinter = [ih * diw[0], iw * dih[0], ih * diw[1], iw * dih[1]];

    let (pw, ph) = (x1 - x0, y1 - y0);
    let ap = pw * ph;
    let ag = (gx1 - gx0) * (gy1 - gy0);
    let dap = [-ph, -pw, ph, pw];
    let union = ap + ag - inter;
    let dunion: [T; 4] = std::array::from_fn(|i| dap[i] - dinter[i]);

    let cw = x1.max(gx1) - x0.min(gx0);
    let ch = y1.max(gy1) - y0.min(gy0);
    let dcw = [-ind(x0 < gx0), ind(x1 > gx1)];
    let dch = [-ind(y0 < gy0), ind(y1 > gy1)];
    let hull = cw * ch;
    let dhull = [ch * dcw[0], cw * dch[0], ch * dcw[1], cw * dch[1]];

    let iou = inter / union;
    let ratio = union / hull;
    let loss = two - iou - ratio;
    let dcorner: [T; 4] = std::array::from_fn(|i| {
        let diou = (dinter[i] * union - inter * dunion[i]) / (union * union);
        let dratio = (dunion[i] * hull - union * dhull[i]) / (hull * hull);
        -diou - dratio
    });
    let grad = [
        dcorner[0] + dcorner[2],
        dcorner[1] + dcorner[3],
        (dcorner[2] - dcorner[0]) * half,
        (dcorner[3] - dcorner[1]) * half,
    ];
    (loss, grad)
}

/// Mirrors a cxcywh box about the vertical image axis.
pub fn hflip_box(b: [f64; 4]) -> [f64; 4] {
    [1.0 - b[0], b[1], b[2], b[3]]
}
