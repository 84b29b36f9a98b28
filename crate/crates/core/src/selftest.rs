//! Runs the oracle and invariant checks of every module and reports one line
//! per check. Also backs the acceptance tests.

use std::fmt;
use std::time::Instant;

use crate::boxes::giou_corners;
use crate::config::{LossWeights, MatchWeights, ModelConfig, SamplingRates};
use crate::decoder::{DecoderInputs, DecoderOutput, UnifiedDecoder};
use crate::error::Result;
use crate::exec::Exec;
use crate::famm::{pyramid_aux_loss, select, Famm};
use crate::frequency::{inter_band_attention, inter_band_mask, intra_band_attention, intra_band_mask, FrequencyEncoder};
use crate::gradcheck::{grad_check, probe_loss, GradCheckConfig, GradCheckReport};
use crate::graph::{Fault, Graph, Var};
use crate::heads::{total_loss, GroundTruth, Heads, LossSettings};
use crate::losses::{bce, focal_loss};
use crate::matching::hungarian;
use crate::metrics::{self, EvalReport};
use crate::nn::{AttentionParams, EncoderLayer, Mlp};
use crate::oracle;
use crate::params::{ParamBuilder, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use crate::wavelet::{haar_dwt2d, haar_idwt2d};
use crate::Mask;

pub const GRAD_TOL: f64 = 1e-4;

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).expect("shape matches data")
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DwtStats {
    pub max_err_f32: f64,
    pub max_err_f64: f64,
    /// Relative energy change, worst over both precisions.
    pub max_energy_rel: f64,
    /// Fast transform vs. the separable two-pass oracle (f64).
    pub max_oracle_diff: f64,
}

fn round_trip<T: Scalar>(img: &Tensor<f64>) -> Result<(f64, f64)> {
    let x: Tensor<T> = img.cast();
    let bands = haar_dwt2d(&x)?;
    let back = haar_idwt2d(&bands)?;
    let err = back.max_abs_diff(&x).f64();
    let e_in: f64 = x.data().iter().map(|v| v.f64().powi(2)).sum();
    let e_out: f64 = bands.bands().iter().flat_map(|b| b.data()).map(|v| v.f64().powi(2)).sum();
    Ok((err, (e_out - e_in).abs() / e_in))
}

/// Haar round trip on `n` random `size×size` images in both precisions.
pub fn dwt_round_trip(n: usize, size: usize, seed: u64, exec: Exec) -> Result<DwtStats> {
    let root = Rng::new(seed);
    let per = exec.map_range(n, |i| -> Result<DwtStats> {
        let img = randn(&[size, size], &mut root.fork(i as u64));
        let (e32, r32) = round_trip::<f32>(&img)?;
        let (e64, r64) = round_trip::<f64>(&img)?;
        let fast = haar_dwt2d(&img)?.stacked();
        let slow = oracle::separable_haar(img.data(), size, size).concat();
        let diff = fast.data().iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        Ok(DwtStats {
            max_err_f32: e32,
            max_err_f64: e64,
            max_energy_rel: r32.max(r64),
            max_oracle_diff: diff,
        })
    });
    let mut s = DwtStats::default();
    for p in per {
        let p = p?;
        s.max_err_f32 = s.max_err_f32.max(p.max_err_f32);
        s.max_err_f64 = s.max_err_f64.max(p.max_err_f64);
        s.max_energy_rel = s.max_energy_rel.max(p.max_energy_rel);
        s.max_oracle_diff = s.max_oracle_diff.max(p.max_oracle_diff);
    }
    Ok(s)
}

fn cols(t: &Tensor<f64>, start: usize, len: usize) -> Tensor<f64> {
    let data = (0..t.rows()).flat_map(|r| t.row(r)[start..start + len].to_vec()).collect();
    Tensor::new(&[t.rows(), len], data).expect("column slice")
}

fn naive_mha(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, heads: usize, mask: &Mask) -> Tensor<f64> {
    let dh = q.cols() / heads;
    let allow = |i: usize, j: usize| mask.allowed[i * mask.cols + j];
    let per: Vec<Tensor<f64>> = (0..heads)
        .map(|h| oracle::attention(&cols(q, h * dh, dh), &cols(k, h * dh, dh), &cols(v, h * dh, dh), Some(&allow)))
        .collect();
    let data = (0..q.rows()).flat_map(|r| per.iter().flat_map(move |t| t.row(r).to_vec())).collect();
    Tensor::new(&[q.rows(), q.cols()], data).expect("head concat")
}

/// Largest difference between the band-restricted attention stages and
/// naive per-head attention over the flattened queries under the
/// corresponding boolean masks, over `n` random configurations.
pub fn mask_equivalence(n: usize, seed: u64, exec: Exec) -> Result<f64> {
    let root = Rng::new(seed);
    let per = exec.map_range(n, |i| -> Result<f64> {
        let mut rng = root.fork(i as u64);
        let heads = [1, 2, 4][rng.below(3)];
        let dim = heads * (1 + rng.below(4));
        let slots = 1 + rng.below(8);
        let mut store = ParamStore::new();
        let attn = AttentionParams::new(&mut ParamBuilder::new(&mut store, &mut rng), "a", dim, heads)?;
        let x = randn(&[4 * slots, dim], &mut rng);
        let mut g = Graph::new(&store);
        let xv = g.constant(x);
        let (q, k, v) = (attn.q.forward(&mut g, xv)?, attn.k.forward(&mut g, xv)?, attn.v.forward(&mut g, xv)?);
        let (qt, kt, vt) = (g.value(q).clone(), g.value(k).clone(), g.value(v).clone());
        // rows are band-major: row = band * slots + slot
        let n = 4 * slots;
        let intra = Mask::from_fn(n, n, |i, j| i / slots == j / slots);
        let inter = Mask::from_fn(n, n, |i, j| i % slots == j % slots);
        if intra != intra_band_mask(slots) || inter != inter_band_mask(slots) {
            return Err(crate::Error::Input(format!("band masks disagree at {slots} slots")));
        }
        let mut worst: f64 = 0.0;
        for (fast, mask) in [
            (intra_band_attention(&mut g, &attn, xv, slots)?, intra),
            (inter_band_attention(&mut g, &attn, xv, slots)?, inter),
        ] {
            let mixed = g.constant(naive_mha(&qt, &kt, &vt, heads, &mask));
            let reference = attn.o.forward(&mut g, mixed)?;
            worst = worst.max(g.value(fast).max_abs_diff(g.value(reference)));
        }
        Ok(worst)
    });
    per.into_iter().try_fold(0.0, |a: f64, r| Ok(a.max(r?)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HungarianStats {
    pub instances: usize,
    /// Instances whose cost differs from the brute-force minimum at all.
    pub mismatches: usize,
    pub max_abs_diff: f64,
}

/// Hungarian vs. factorial enumeration on random rectangular matrices up to
/// `max_side`. Even instances use integer costs (exact arithmetic), odd ones reals.
pub fn hungarian_vs_brute_force(n: usize, max_side: usize, seed: u64, exec: Exec) -> Result<HungarianStats> {
    let root = Rng::new(seed);
    let per = exec.map_range(n, |i| -> Result<(bool, f64)> {
        let mut rng = root.fork(i as u64);
        let (r, c) = (1 + rng.below(max_side), 1 + rng.below(max_side));
        let cost: Vec<f64> = (0..r * c)
            .map(|_| if i % 2 == 0 { rng.below(20) as f64 } else { rng.range(-3.0, 3.0) })
            .collect();
        let fast = hungarian(&cost, r, c)?.total_cost;
        let slow = oracle::brute_force_assignment(&cost, r, c);
        let d = (fast - slow).abs();
        let exact = if i % 2 == 0 { fast == slow } else { d <= 1e-12 * slow.abs().max(1.0) };
        Ok((!exact, d))
    });
    let mut s = HungarianStats {
        instances: n,
        ..HungarianStats::default()
    };
    for p in per {
        let (bad, d) = p?;
        s.mismatches += usize::from(bad);
        s.max_abs_diff = s.max_abs_diff.max(d);
    }
    Ok(s)
}

fn toy() -> ModelConfig {
    ModelConfig::default()
}

fn check(store: &ParamStore<f64>, fault: Option<Fault>, f: impl Fn(&mut Graph<f64>) -> Result<Var>) -> Result<GradCheckReport> {
    grad_check(
        store,
        None,
        f,
        GradCheckConfig {
            coords_per_tensor: 4,
            seed: 17,
            fault,
            ..GradCheckConfig::default()
        },
    )
}

fn sample_truth(cfg: &ModelConfig) -> GroundTruth {
    let l = cfg.max_text_len;
    GroundTruth {
        pair_fake: true,
        fg_labels: [true, false, true, false],
        face_boxes: vec![[0.42, 0.55, 0.3, 0.35]],
        token_fake: (0..l).map(|i| i == 2 || i == 3).collect(),
        token_valid: (0..l).map(|i| i < l - 3).collect(),
    }
}

/// Central-difference checks of every parameterized block and every loss
/// term on the toy configuration, in f64.
pub fn module_grad_checks(fault: Option<Fault>) -> Result<Vec<(String, GradCheckReport)>> {
    let cfg = toy();
    let d = cfg.dim;
    let mut out = Vec::new();
    let mut rng = Rng::new(2024);

    // numerics: masked encoder block (LN, attention, FFN) followed by an MLP
    {
        let mut store = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let layer = EncoderLayer::new(&mut pb, "layer", d, cfg.heads)?;
        let mlp = Mlp::new(&mut pb, "mlp", d, 3);
        let x = randn(&[6, d], &mut rng);
        let mask = Mask::from_fn(6, 6, |i, j| j <= i);
        out.push((
            "numerics blocks".into(),
            check(&store, fault, |g| {
                let xv = g.constant(x.clone());
                let h = layer.forward(g, xv, Some(&mask))?;
                let y = mlp.forward(g, h)?;
                probe_loss(g, y, 1)
            })?,
        ));
    }

    // frequency encoder on a toy image
    {
        let mut store = ParamStore::new();
        let enc = FrequencyEncoder::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg)?;
        let s = cfg.image_size;
        let img = randn(&[3, s, s], &mut rng).map(|v| 0.5 + 0.2 * v);
        out.push((
            "frequency encoder".into(),
            check(&store, fault, |g| {
                let x = g.constant(img.clone());
                let y = enc.forward(g, x)?;
                probe_loss(g, y, 2)
            })?,
        ));
    }

    // FAMM: pyramid, auxiliary loss and mutual attention (every location kept
    // so selection cannot flip under the probe step)
    {
        let mut store = ParamStore::new();
        let famm = Famm::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg)?;
        let patches = randn(&[cfg.num_patches(), d], &mut rng);
        let freq = randn(&[4, d], &mut rng);
        let gt = sample_truth(&cfg).face_boxes;
        out.push((
            "famm".into(),
            check(&store, fault, |g| {
                let x = g.constant(patches.clone());
                let f = g.constant(freq.clone());
                let levels = famm.pyramid.forward(g, x)?;
                let sel = select(g, &levels, &SamplingRates::ALL)?;
                let y = famm.mutual.forward(g, f, sel.gathered)?;
                let a = probe_loss(g, y, 3)?;
                let b = pyramid_aux_loss(g, &levels, &gt, &MatchWeights::default())?;
                g.add(a, b)
            })?,
        ));
    }

    // unified decoder with padded text
    {
        let mut store = ParamStore::new();
        let dec = UnifiedDecoder::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg)?;
        let visual = randn(&[9, d], &mut rng);
        let text = randn(&[1 + cfg.max_text_len, d], &mut rng);
        let img_cls = randn(&[1, d], &mut rng);
        let valid: Vec<bool> = (0..=cfg.max_text_len).map(|i| i < 7).collect();
        out.push((
            "unified decoder".into(),
            check(&store, fault, |g| {
                let inputs = DecoderInputs {
                    visual: g.constant(visual.clone()),
                    text: g.constant(text.clone()),
                    text_valid: &valid,
                    img_cls: g.constant(img_cls.clone()),
                };
                let o = dec.forward(g, inputs)?;
                let both = g.concat_rows(&[o.img, o.text, o.pair])?;
                probe_loss(g, both, 4)
            })?,
        ));
    }

    // each loss term alone, through the heads
    {
        let mut store = ParamStore::new();
        let heads = Heads::new(&mut ParamBuilder::new(&mut store, &mut rng), d);
        let img = randn(&[1 + cfg.grounding_queries, d], &mut rng);
        let text = randn(&[1 + cfg.max_text_len, d], &mut rng);
        let pair = randn(&[1, d], &mut rng);
        let truth = sample_truth(&cfg);
        let zero = LossWeights {
            binary: 0.0,
            fine_grained: 0.0,
            bbox: 0.0,
            token: 0.0,
            pyramid: 0.0,
        };
        let terms: [(&str, LossWeights); 4] = [
            ("binary loss", LossWeights { binary: 1.0, ..zero }),
            ("fine-grained loss", LossWeights { fine_grained: 1.0, ..zero }),
            ("box loss", LossWeights { bbox: 1.0, ..zero }),
            ("token loss", LossWeights { token: 1.0, ..zero }),
        ];
        for (name, weights) in terms {
            let settings = LossSettings {
                weights,
                matching: cfg.match_weights,
                focal_gamma: cfg.focal_gamma,
                focal_alpha: cfg.focal_alpha,
            };
            out.push((
                name.into(),
                check(&store, fault, |g| {
                    let dec = DecoderOutput {
                        img: g.constant(img.clone()),
                        text: g.constant(text.clone()),
                        pair: g.constant(pair.clone()),
                    };
                    let hv = heads.forward(g, &dec)?;
                    Ok(total_loss(g, &hv, &[], &truth, &settings)?.0)
                })?,
            ));
        }
    }

    // pyramid auxiliary loss alone
    {
        let mut store = ParamStore::new();
        let famm = Famm::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg)?;
        let patches = randn(&[cfg.num_patches(), d], &mut rng);
        let gt = sample_truth(&cfg).face_boxes;
        let pyramid_vars = store.vars_with_prefix("famm.pyramid");
        let pyramid_vars = if pyramid_vars.is_empty() { None } else { Some(pyramid_vars) };
        let report = grad_check(
            &store,
            pyramid_vars.as_deref(),
            |g| {
                let x = g.constant(patches.clone());
                let levels = famm.pyramid.forward(g, x)?;
                pyramid_aux_loss(g, &levels, &gt, &MatchWeights::default())
            },
            GradCheckConfig {
                coords_per_tensor: 4,
                seed: 19,
                fault,
                ..GradCheckConfig::default()
            },
        )?;
        out.push(("pyramid loss".into(), report));
    }
    Ok(out)
}

/// `(name, value, expected)` for the closed-form loss values.
pub fn loss_closed_forms() -> Result<Vec<(&'static str, f64, f64)>> {
    let ln2 = std::f64::consts::LN_2;
    Ok(vec![
        ("bce(0, 1)", bce(0.0, 1.0), ln2),
        (
            "focal(p=0.5, y=1)",
            focal_loss(&[0.0], &[1.0], 2.0, 0.25, &[true])?,
            0.25 * 0.25 * ln2,
        ),
        ("giou identical", giou_corners([0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0])?, 1.0),
        ("giou touching", giou_corners([0.0, 0.0, 1.0, 1.0], [1.0, 0.0, 2.0, 1.0])?, 0.0),
        ("giou gap", giou_corners([0.0, 0.0, 1.0, 1.0], [2.0, 0.0, 3.0, 1.0])?, -1.0 / 3.0),
    ])
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricOracleStats {
    pub instances: usize,
    pub auc_mismatches: usize,
    pub ap_mismatches: usize,
    /// Worst `|F1 − 2·PR·RE/(PR+RE)|` over every reported triple.
    pub f1_identity: f64,
}

fn identity_gap(pr: f64, re: f64, f1: f64) -> f64 {
    (f1 - metrics::f1(pr, re)).abs()
}

/// Rank-based AUC and AP against their quadratic oracles (exact equality),
/// plus the F1 identity on random reports.
pub fn metric_oracles(n: usize, seed: u64) -> Result<MetricOracleStats> {
    let root = Rng::new(seed);
    let mut s = MetricOracleStats {
        instances: n,
        ..MetricOracleStats::default()
    };
    for i in 0..n {
        let mut rng = root.fork(i as u64);
        let len = 2 + rng.below(60);
        let levels = 2 + rng.below(10);
        let scores: Vec<f64> = (0..len).map(|_| rng.below(levels) as f64 / levels as f64).collect();
        let mut labels: Vec<bool> = (0..len).map(|_| rng.bernoulli(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        s.auc_mismatches += usize::from(metrics::auc(&scores, &labels)? != oracle::pairwise_auc(&scores, &labels));
        s.ap_mismatches +=
            usize::from(metrics::average_precision(&scores, &labels)? != oracle::average_precision(&scores, &labels));

        let pred: Vec<Vec<bool>> = (0..8).map(|_| (0..6).map(|_| rng.bernoulli(0.3)).collect()).collect();
        let gt: Vec<Vec<bool>> = (0..8).map(|_| (0..6).map(|_| rng.bernoulli(0.3)).collect()).collect();
        let valid: Vec<Vec<bool>> = (0..8).map(|_| (0..6).map(|_| rng.bernoulli(0.8)).collect()).collect();
        let t = metrics::token_metrics(&pred, &gt, &valid)?;
        s.f1_identity = s.f1_identity.max(identity_gap(t.pr, t.re, t.f1));
    }
    Ok(s)
}

/// The F1 identity on a full report (token triple).
pub fn report_f1_identity(r: &EvalReport) -> f64 {
    identity_gap(r.token_pr, r.token_re, r.token_f1)
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct SelfTestReport {
    pub checks: Vec<CheckOutcome>,
}

impl SelfTestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for SelfTestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {:<28} {} ({:.2}s)",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail,
                c.seconds
            )?;
        }
        let n = self.checks.iter().filter(|c| c.passed).count();
        write!(f, "{n}/{} checks passed", self.checks.len())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SelfTestOptions {
    pub fault: Option<Fault>,
    pub exec: Exec,
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let t = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        name: name.into(),
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

pub fn run(opts: SelfTestOptions) -> SelfTestReport {
    let exec = opts.exec;
    let mut checks = vec![
        timed("dwt round trip", || {
            let s = dwt_round_trip(100, 64, 1, exec)?;
            Ok((
                s.max_err_f32 <= 1e-6 && s.max_err_f64 <= 1e-12 && s.max_energy_rel <= 1e-6 && s.max_oracle_diff <= 1e-12,
                format!(
                    "err32={:.1e} err64={:.1e} energy={:.1e} oracle={:.1e}",
                    s.max_err_f32, s.max_err_f64, s.max_energy_rel, s.max_oracle_diff
                ),
            ))
        }),
        timed("band attention masks", || {
            let m = mask_equivalence(50, 2, exec)?;
            Ok((m <= 1e-6, format!("max diff {m:.1e}")))
        }),
        timed("hungarian brute force", || {
            let s = hungarian_vs_brute_force(200, 7, 3, exec)?;
            Ok((s.mismatches == 0, format!("{} mismatches of {}", s.mismatches, s.instances)))
        }),
        timed("loss closed forms", || {
            let v = loss_closed_forms()?;
            let worst = v.iter().map(|(_, a, b)| (a - b).abs()).fold(0.0, f64::max);
            Ok((worst <= 1e-10, format!("max diff {worst:.1e}")))
        }),
        timed("metric oracles", || {
            let s = metric_oracles(100, 4)?;
            Ok((
                s.auc_mismatches == 0 && s.ap_mismatches == 0 && s.f1_identity <= 1e-9,
                format!(
                    "auc {} / ap {} mismatches, f1 gap {:.1e}",
                    s.auc_mismatches, s.ap_mismatches, s.f1_identity
                ),
            ))
        }),
    ];
    let t = Instant::now();
    match module_grad_checks(opts.fault) {
        Ok(reports) => {
            let share = t.elapsed().as_secs_f64() / reports.len() as f64;
            for (name, r) in reports {
                checks.push(CheckOutcome {
                    name: format!("grad {name}"),
                    passed: r.max_rel_error < GRAD_TOL,
                    detail: format!("max rel err {:.1e} over {} coords", r.max_rel_error, r.checked),
                    seconds: share,
                });
            }
        }
        Err(e) => checks.push(CheckOutcome {
            name: "grad checks".into(),
            passed: false,
            detail: format!("error: {e}"),
            seconds: t.elapsed().as_secs_f64(),
        }),
    }
    SelfTestReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        let d = dwt_round_trip(4, 16, 0, Exec::Sequential).unwrap();
        assert!(d.max_err_f64 < 1e-12 && d.max_err_f32 < 1e-6 && d.max_oracle_diff < 1e-12, "{d:?}");
        assert!(mask_equivalence(5, 0, Exec::Sequential).unwrap() < 1e-12);
        assert_eq!(hungarian_vs_brute_force(20, 5, 0, Exec::Sequential).unwrap().mismatches, 0);
        let m = metric_oracles(10, 0).unwrap();
        assert_eq!((m.auc_mismatches, m.ap_mismatches), (0, 0));
        for (name, a, b) in loss_closed_forms().unwrap() {
            assert!((a - b).abs() < 1e-12, "{name}");
        }
    }

    #[test]
    fn grad_checks_pass_and_catch_a_sign_flip() {
        let good = module_grad_checks(None).unwrap();
        assert_eq!(good.len(), 9);
        for (name, r) in &good {
            assert!(r.max_rel_error < GRAD_TOL, "{name}: {r:?}");
        }
        let bad = module_grad_checks(Some(Fault::NegateMatMulRhs)).unwrap();
        assert!(bad.iter().any(|(_, r)| r.max_rel_error > GRAD_TOL));
        // every block with a weight matrix notices
        let caught = bad.iter().filter(|(_, r)| r.max_rel_error > GRAD_TOL).count();
        assert!(caught >= 8, "{bad:?}");
    }
}
