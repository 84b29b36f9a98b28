//! Evaluation metrics: binary detection, multi-label type classification,
//! box grounding and token grounding. All values are percentages.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::boxes::iou_cxcywh;
use crate::error::{Error, Result};
use crate::heads::{GroundTruth, Predictions, FG_NAMES};

const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub eer: Option<f64>,
    pub acc: f64,
}

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Input(format!("{what}: {a} scores but {b} labels")));
    }
    if a == 0 {
        return Err(Error::UndefinedMetric(format!("{what}: no samples")));
    }
    Ok(())
}

fn check_finite(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("metric scores".into()));
    }
    Ok(())
}

/// Mann-Whitney AUC in percent, ties counted half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len(), "auc")?;
    check_finite(scores)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("auc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum keeps tied (half-integer) ranks exact
    let mut rank2_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank2 = (i + j + 2) as f64;
        rank2_pos += rank2 * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    let u = (rank2_pos - np * (np + 1.0)) / 2.0;
    Ok(100.0 * u / (np * n_neg as f64))
}

/// ROC vertices `(fpr, fnr)` from the strictest threshold down.
fn roc(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64)> {
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut pts = vec![(0.0, 1.0)];
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        pts.push((fp / n_neg, 1.0 - tp / n_pos));
    }
    pts
}

/// Equal error rate in percent, interpolated on the first ROC segment where
/// FPR catches up with FNR.
pub fn eer(scores: &[f64], labels: &[bool]) -> Result<f64> {
    auc(scores, labels)?;
    let pts = roc(scores, labels);
    for w in pts.windows(2) {
        let (f0, n0) = w[0];
        let (f1, n1) = w[1];
        let d0 = f0 - n0;
        let d1 = f1 - n1;
        if d1 >= 0.0 {
            let t = if d1 == d0 { 0.0 } else { -d0 / (d1 - d0) };
            return Ok(100.0 * (f0 + t * (f1 - f0)));
        }
    }
    // the last vertex is (1, 0), so the crossing always exists
    unreachable!("roc ends at fpr 1, fnr 0")
}

pub fn accuracy(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len(), "accuracy")?;
    check_finite(scores)?;
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= THRESHOLD) == l)
        .count();
    Ok(100.0 * hits as f64 / scores.len() as f64)
}

/// ACC is always returned; AUC and EER are `None` for single-class input.
pub fn binary_metrics(scores: &[f64], labels: &[bool]) -> Result<BinaryMetrics> {
    let acc = accuracy(scores, labels)?;
    let (auc, eer) = match auc(scores, labels) {
        Ok(a) => (Some(a), Some(eer(scores, labels)?)),
        Err(Error::UndefinedMetric(_)) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(BinaryMetrics { auc, eer, acc })
}

/// Ranking with ties broken negatives-first, so the result does not depend on
/// input order.
fn ap_order(scores: &[f64], labels: &[bool]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => labels[a].cmp(&labels[b]),
        o => o,
    });
    order
}

/// Average precision in percent: precision averaged at each positive's rank.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len(), "average precision")?;
    check_finite(scores)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("average precision needs a positive".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &k) in ap_order(scores, labels).iter().enumerate() {
        if labels[k] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(100.0 * sum / n_pos as f64)
}

/// Precision, recall and F1 from counts, in percent. Precision is 0 when
/// nothing was predicted positive; recall is 0 when there are no positives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, pred: bool, truth: bool) {
        match (pred, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => {}
        }
    }

    pub fn merge(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        100.0 * a as f64 / b as f64
    }
}

pub fn f1(pr: f64, re: f64) -> f64 {
    if pr + re == 0.0 {
        0.0
    } else {
        2.0 * pr * re / (pr + re)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiLabelMetrics {
    pub map: Option<f64>,
    pub cf1: Option<f64>,
    pub of1: f64,
    /// `None` for classes without positives.
    pub ap: [Option<f64>; 4],
    pub f1: [Option<f64>; 4],
    /// Classes left out of mAP and CF1.
    pub skipped: Vec<String>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn multilabel_metrics(scores: &[[f64; 4]], labels: &[[bool; 4]]) -> Result<MultiLabelMetrics> {
    check_lengths(scores.len(), labels.len(), "multilabel")?;
    let mut ap = [None; 4];
    let mut f1s = [None; 4];
    let mut pooled = Counts::default();
    let mut skipped = Vec::new();
    for c in 0..4 {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[c]).collect();
        let mut counts = Counts::default();
        for (&si, &li) in s.iter().zip(&l) {
            counts.add(si >= THRESHOLD, li);
        }
        pooled = pooled.merge(counts);
        match average_precision(&s, &l) {
            Ok(a) => {
                ap[c] = Some(a);
                f1s[c] = Some(counts.f1());
            }
            Err(Error::UndefinedMetric(_)) => skipped.push(FG_NAMES[c].to_string()),
            Err(e) => return Err(e),
        }
    }
    Ok(MultiLabelMetrics {
        map: mean(ap.iter().flatten().copied()),
        cf1: mean(f1s.iter().flatten().copied()),
        of1: pooled.f1(),
        ap,
        f1: f1s,
        skipped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxMetrics {
    pub iou_m: f64,
    pub iou50: f64,
    pub iou75: f64,
    pub count: usize,
}

/// Scores one predicted box per sample against its ground-truth boxes (best
/// IoU when there are several). Samples without ground truth are skipped.
pub fn box_metrics(pred: &[[f64; 4]], gt: &[Vec<[f64; 4]>]) -> Result<BoxMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!("box metrics: {} predictions, {} targets", pred.len(), gt.len())));
    }
    let ious: Vec<f64> = pred
        .iter()
        .zip(gt)
        .filter(|(_, g)| !g.is_empty())
        .map(|(p, g)| g.iter().map(|&b| iou_cxcywh(*p, b)).fold(0.0, f64::max))
        .collect();
    if ious.is_empty() {
        return Err(Error::UndefinedMetric("no samples with a ground-truth box".into()));
    }
    let n = ious.len() as f64;
    let frac = |t: f64| 100.0 * ious.iter().filter(|&&i| i >= t).count() as f64 / n;
    Ok(BoxMetrics {
        iou_m: 100.0 * ious.iter().sum::<f64>() / n,
        iou50: frac(0.5),
        iou75: frac(0.75),
        count: ious.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenMetrics {
    pub pr: f64,
    pub re: f64,
    pub f1: f64,
    /// Set when nothing was predicted fake (precision reported as 0).
    pub no_predicted_positives: bool,
    pub counts: Counts,
}

/// Micro-averaged over every valid token of every sample.
pub fn token_metrics(pred: &[Vec<bool>], gt: &[Vec<bool>], valid: &[Vec<bool>]) -> Result<TokenMetrics> {
    if pred.len() != gt.len() || pred.len() != valid.len() {
        return Err(Error::Input("token metrics: mismatched sample counts".into()));
    }
    let mut counts = Counts::default();
    for ((p, g), v) in pred.iter().zip(gt).zip(valid) {
        if p.len() != g.len() || p.len() != v.len() {
            return Err(Error::Input("token metrics: mismatched sequence lengths".into()));
        }
        for i in 0..p.len() {
            if v[i] {
                counts.add(p[i], g[i]);
            }
        }
    }
    Ok(TokenMetrics {
        pr: counts.precision(),
        re: counts.recall(),
        f1: counts.f1(),
        no_predicted_positives: counts.tp + counts.fp == 0,
        counts,
    })
}

/// Full evaluation summary; undefined entries are `None` and explained in `notes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: Option<f64>,
    pub eer: Option<f64>,
    pub acc: f64,
    pub map: Option<f64>,
    pub cf1: Option<f64>,
    pub of1: f64,
    pub iou_m: Option<f64>,
    pub iou50: Option<f64>,
    pub iou75: Option<f64>,
    pub token_pr: f64,
    pub token_re: f64,
    pub token_f1: f64,
    pub f1_fs: Option<f64>,
    pub f1_fa: Option<f64>,
    pub f1_ts: Option<f64>,
    pub f1_ta: Option<f64>,
    pub samples: usize,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub const COLUMNS: [&'static str; 16] = [
        "auc", "eer", "acc", "map", "cf1", "of1", "iou_m", "iou50", "iou75", "token_pr", "token_re", "token_f1", "f1_fs",
        "f1_fa", "f1_ts", "f1_ta",
    ];

    pub fn values(&self) -> [Option<f64>; 16] {
        [
            self.auc,
            self.eer,
            Some(self.acc),
            self.map,
            self.cf1,
            Some(self.of1),
            self.iou_m,
            self.iou50,
            self.iou75,
            Some(self.token_pr),
            Some(self.token_re),
            Some(self.token_f1),
            self.f1_fs,
            self.f1_fa,
            self.f1_ts,
            self.f1_ta,
        ]
    }

    /// Header plus one row; undefined cells are empty.
    pub fn to_csv(&self) -> String {
        let row: Vec<String> = self
            .values()
            .iter()
            .map(|v| v.map(|x| format!("{x:.4}")).unwrap_or_default())
            .collect();
        format!("{}\n{}\n", Self::COLUMNS.join(","), row.join(","))
    }

    pub fn from_predictions(preds: &[Predictions], truths: &[GroundTruth]) -> Result<EvalReport> {
        if preds.len() != truths.len() {
            return Err(Error::Input(format!("{} predictions for {} samples", preds.len(), truths.len())));
        }
        if preds.is_empty() {
            return Err(Error::UndefinedMetric("nothing to evaluate".into()));
        }
        let mut notes = Vec::new();
        let scores: Vec<f64> = preds.iter().map(Predictions::binary_score).collect();
        let labels: Vec<bool> = truths.iter().map(|t| t.pair_fake).collect();
        let bin = binary_metrics(&scores, &labels)?;
        if bin.auc.is_none() {
            notes.push("auc/eer undefined: only one class present".to_string());
        }

        let fg_scores: Vec<[f64; 4]> = preds.iter().map(Predictions::fg_scores).collect();
        let fg_labels: Vec<[bool; 4]> = truths.iter().map(|t| t.fg_labels).collect();
        let ml = multilabel_metrics(&fg_scores, &fg_labels)?;
        for c in &ml.skipped {
            notes.push(format!("{c}: no positives, left out of map/cf1"));
        }

        let mut boxes = Vec::with_capacity(preds.len());
        for p in preds {
            boxes.push(p.best_box().map(|b| b.0).unwrap_or([0.0; 4]));
        }
        let gt_boxes: Vec<Vec<[f64; 4]>> = truths.iter().map(|t| t.face_boxes.clone()).collect();
        let bx = match box_metrics(&boxes, &gt_boxes) {
            Ok(b) => Some(b),
            Err(Error::UndefinedMetric(m)) => {
                notes.push(format!("box metrics undefined: {m}"));
                None
            }
            Err(e) => return Err(e),
        };

        let tok_pred: Vec<Vec<bool>> = preds
            .iter()
            .map(|p| p.token_scores().iter().map(|&s| s >= THRESHOLD).collect())
            .collect();
        let tok_gt: Vec<Vec<bool>> = truths.iter().map(|t| t.token_fake.clone()).collect();
        let tok_valid: Vec<Vec<bool>> = truths.iter().map(|t| t.token_valid.clone()).collect();
        let tok = token_metrics(&tok_pred, &tok_gt, &tok_valid)?;
        if tok.no_predicted_positives {
            notes.push("token precision set to 0: no token predicted fake".to_string());
        }

        Ok(EvalReport {
            auc: bin.auc,
            eer: bin.eer,
            acc: bin.acc,
            map: ml.map,
            cf1: ml.cf1,
            of1: ml.of1,
            iou_m: bx.map(|b| b.iou_m),
            iou50: bx.map(|b| b.iou50),
            iou75: bx.map(|b| b.iou75),
            token_pr: tok.pr,
            token_re: tok.re,
            token_f1: tok.f1,
            f1_fs: ml.f1[0],
            f1_fa: ml.f1[1],
            f1_ts: ml.f1[2],
            f1_ta: ml.f1[3],
            samples: preds.len(),
            notes,
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let groups: [(&str, &[usize]); 5] = [
            ("binary", &[0, 1, 2]),
            ("multi-label", &[3, 4, 5]),
            ("box", &[6, 7, 8]),
            ("token", &[9, 10, 11]),
            ("per-class f1", &[12, 13, 14, 15]),
        ];
        let vals = self.values();
        writeln!(f, "samples: {}", self.samples)?;
        for (name, idx) in groups {
            write!(f, "{name:<13}")?;
            for &i in idx {
                match vals[i] {
                    Some(v) => write!(f, " {:>8}={v:>7.2}", Self::COLUMNS[i])?,
                    None => write!(f, " {:>8}={:>7}", Self::COLUMNS[i], "n/a")?,
                }
            }
            writeln!(f)?;
        }
        for n in &self.notes {
            writeln!(f, "note: {n}")?;
        }
        Ok(())
    }
}
