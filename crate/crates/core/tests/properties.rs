use mmground::boxes::{corners_to_cxcywh, cxcywh_to_corners, giou_corners, iou_corners};
use mmground::data::{parse_manifest, to_jsonl, ManifestRecord};
use mmground::matching::hungarian;
use mmground::metrics::{self, Counts};
use mmground::oracle;
use mmground::wavelet::{haar_dwt2d, haar_idwt2d};
use mmground::Tensor;
use proptest::prelude::*;

fn image() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..9, 1usize..9).prop_flat_map(|(h, w)| {
        proptest::collection::vec(-10.0f64..10.0, 4 * h * w).prop_map(move |v| (2 * h, 2 * w, v))
    })
}

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            proptest::collection::vec((0u8..8).prop_map(|s| s as f64 / 8.0), n),
            proptest::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(s, mut l)| {
                l[0] = true;
                l[1] = false;
                (s, l)
            })
    })
}

fn corner_box() -> impl Strategy<Value = [f64; 4]> {
    (0.0f64..1.0, 0.0f64..1.0, 0.01f64..1.0, 0.01f64..1.0).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dwt_inverts_and_keeps_energy((h, w, data) in image()) {
        let x = Tensor::new(&[h, w], data).unwrap();
        let bands = haar_dwt2d(&x).unwrap();
        let back = haar_idwt2d(&bands).unwrap();
        prop_assert!(back.max_abs_diff(&x) <= 1e-12);
        let e_in: f64 = x.data().iter().map(|v| v * v).sum();
        prop_assert!((bands.energy() - e_in).abs() <= 1e-9 * e_in.max(1.0));
        let slow = oracle::separable_haar(x.data(), h, w).concat();
        let fast = bands.stacked();
        for (a, b) in fast.data().iter().zip(&slow) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn hungarian_is_optimal(rows in 1usize..6, cols in 1usize..6, seed in proptest::collection::vec(0u8..30, 36)) {
        let cost: Vec<f64> = seed.iter().take(rows * cols).map(|&c| c as f64).collect();
        let m = hungarian(&cost, rows, cols).unwrap();
        prop_assert_eq!(m.total_cost, oracle::brute_force_assignment(&cost, rows, cols));
        prop_assert_eq!(m.pairs.len(), rows.min(cols));
        let mut seen_g: Vec<usize> = m.pairs.iter().map(|p| p.1).collect();
        seen_g.sort();
        seen_g.dedup();
        prop_assert_eq!(seen_g.len(), m.pairs.len());
    }

    #[test]
    fn auc_and_ap_match_their_oracles((scores, labels) in scored()) {
        prop_assert_eq!(metrics::auc(&scores, &labels).unwrap(), oracle::pairwise_auc(&scores, &labels));
        prop_assert_eq!(
            metrics::average_precision(&scores, &labels).unwrap(),
            oracle::average_precision(&scores, &labels)
        );
    }

    #[test]
    fn auc_is_invariant_to_sample_order((scores, labels) in scored(), rot in 0usize..40) {
        let n = scores.len();
        let r = rot % n;
        let s2: Vec<f64> = (0..n).map(|i| scores[(i + r) % n]).collect();
        let l2: Vec<bool> = (0..n).map(|i| labels[(i + r) % n]).collect();
        prop_assert_eq!(metrics::auc(&scores, &labels).unwrap(), metrics::auc(&s2, &l2).unwrap());
    }

    #[test]
    fn auc_flips_with_the_score_sign((scores, labels) in scored()) {
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let a = metrics::auc(&scores, &labels).unwrap();
        let b = metrics::auc(&neg, &labels).unwrap();
        prop_assert!((a + b - 100.0).abs() < 1e-9);
    }

    #[test]
    fn f1_identity_on_counts(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
        let c = Counts { tp, fp, fn_ };
        prop_assert!((c.f1() - metrics::f1(c.precision(), c.recall())).abs() < 1e-12);
        prop_assert!((0.0..=100.0).contains(&c.f1()));
    }

    #[test]
    fn box_formats_round_trip(b in corner_box()) {
        let back = cxcywh_to_corners(corners_to_cxcywh(b));
        for (x, y) in back.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn giou_is_bounded_and_symmetric(a in corner_box(), b in corner_box()) {
        let g = giou_corners(a, b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&g));
        prop_assert!((g - giou_corners(b, a).unwrap()).abs() < 1e-12);
        prop_assert!(g <= iou_corners(a, b) + 1e-12);
        prop_assert!((giou_corners(a, a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn manifest_lines_round_trip(
        id in "[a-z]{1,8}",
        words in proptest::collection::vec("[a-z]{1,6}", 1..8),
        fake in any::<bool>(),
        cx in 0.3f64..0.7,
    ) {
        let rec = ManifestRecord {
            id,
            image_path: "img.ppm".into(),
            text: words.join(" "),
            pair_fake: u8::from(fake),
            fg_labels: [fake, false, false, false],
            face_boxes: if fake { vec![[cx, 0.5, 0.2, 0.3]] } else { vec![] },
            fake_token_indices: vec![],
        };
        let text = to_jsonl(std::slice::from_ref(&rec)).unwrap();
        prop_assert_eq!(parse_manifest(&text).unwrap(), vec![rec]);
    }
}
