use super::*;
use crate::rng::stream;
use rand::Rng;

#[test]
fn perfect_single_detection_has_ap_one() {
    let gt = vec![(BoxF::new(2.0, 2.0, 10.0, 10.0), 0u32)];
    let dets = vec![(0.9, BoxF::new(2.0, 2.0, 10.0, 10.0), 0u32)];
    let r = average_precision(&dets, &gt, 0.5);
    assert!((r.ap - 1.0).abs() < 1e-12);
    assert!(!r.vacuous);
}

#[test]
fn total_miss_has_ap_zero() {
    let gt = vec![(BoxF::new(2.0, 2.0, 10.0, 10.0), 0u32)];
    let r = average_precision(&[], &gt, 0.5);
    assert_eq!(r.ap, 0.0);
    assert!(!r.vacuous);
}

#[test]
fn empty_everything_is_vacuous_one() {
    let r = average_precision(&[], &[], 0.5);
    assert_eq!(r.ap, 1.0);
    assert!(r.vacuous);
    // detections with no ground truth are all false positives
    let r = average_precision(&[(0.5, BoxF::new(0.0, 0.0, 1.0, 1.0), 0)], &[], 0.5);
    assert_eq!(r.ap, 0.0);
    assert!(!r.vacuous);
}

/// Brute-force PR oracle: rebuild the curve by re-running greedy matching on
/// every score-ordered prefix from scratch, then integrate the envelope.
fn brute_force_ap(detections: &[(f64, BoxF, u32)], gts: &[(BoxF, u32)], iou: f64) -> f64 {
    if gts.is_empty() {
        return if detections.is_empty() { 1.0 } else { 0.0 };
    }
    if detections.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].0.partial_cmp(&detections[a].0).unwrap());

    let match_count = |prefix: &[usize]| -> usize {
        let mut used = vec![false; gts.len()];
        let mut tied = 0usize;
        for &di in prefix {
            let (_, dbox, dimg) = detections[di];
            let mut best: Option<(usize, f64)> = None;
            for (gi, &(gbox, gimg)) in gts.iter().enumerate() {
                if gimg != dimg || used[gi] {
                    continue;
                }
                let v = crate::geom::box_iou(&dbox, &gbox);
                if v >= iou && best.map_or(true, |(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                used[gi] = true;
                tied += 1;
            }
        }
        tied
    };

    let n = order.len();
    let mut precisions = Vec::with_capacity(n);
    let mut recalls = Vec::with_capacity(n);
    for k in 1..=n {
        let tp = match_count(&order[..k]);
        precisions.push(tp as f64 / k as f64);
        recalls.push(tp as f64 / gts.len() as f64);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for k in 0..n {
        let p_env = precisions[k..]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        ap += (recalls[k] - prev_r) * p_env;
        prev_r = recalls[k];
    }
    ap
}

fn random_box(rng: &mut rand_chacha::ChaCha8Rng) -> BoxF {
    let x1 = rng.gen_range(0.0..40.0);
    let y1 = rng.gen_range(0.0..40.0);
    BoxF::new(
        x1,
        y1,
        x1 + rng.gen_range(2.0..20.0),
        y1 + rng.gen_range(2.0..20.0),
    )
}

#[test]
fn ap_matches_brute_force_oracle_on_1000_cases() {
    let mut rng = stream(21, "metrics/ap-oracle");
    for case in 0..1000 {
        let n_gt = rng.gen_range(0..5);
        let n_det = rng.gen_range(0..8);
        let gts: Vec<(BoxF, u32)> = (0..n_gt)
            .map(|_| (random_box(&mut rng), rng.gen_range(0..2u32)))
            .collect();
        let dets: Vec<(f64, BoxF, u32)> = (0..n_det)
            .map(|_| {
                (
                    rng.gen_range(0.0..1.0),
                    random_box(&mut rng),
                    rng.gen_range(0..2u32),
                )
            })
            .collect();
        let fast = average_precision(&dets, &gts, 0.5).ap;
        let slow = brute_force_ap(&dets, &gts, 0.5);
        assert!(
            (fast - slow).abs() < 1e-9,
            "case {case}: {fast} vs {slow}"
        );
    }
}

#[test]
fn ap_is_rank_invariant_over_200_cases() {
    let mut rng = stream(22, "metrics/rank");
    for _ in 0..200 {
        let gts: Vec<(BoxF, u32)> = (0..rng.gen_range(1..5))
            .map(|_| (random_box(&mut rng), 0u32))
            .collect();
        let dets: Vec<(f64, BoxF, u32)> = (0..rng.gen_range(1..8))
            .map(|_| (rng.gen_range(0.1..0.9), random_box(&mut rng), 0u32))
            .collect();
        let base = average_precision(&dets, &gts, 0.5).ap;
        // strictly increasing transform of scores
        let transformed: Vec<(f64, BoxF, u32)> = dets
            .iter()
            .map(|&(s, b, i)| (s.exp() * 3.0 + 1.0, b, i))
            .collect();
        let moved = average_precision(&transformed, &gts, 0.5).ap;
        assert!((base - moved).abs() < 1e-12);
    }
}

#[test]
fn ap_monotonicity_under_extra_detections() {
    let mut rng = stream(23, "metrics/mono");
    for _ in 0..200 {
        let gts: Vec<(BoxF, u32)> = (0..rng.gen_range(1..4))
            .map(|_| (random_box(&mut rng), 0u32))
            .collect();
        let mut dets: Vec<(f64, BoxF, u32)> = (0..rng.gen_range(1..6))
            .map(|_| (rng.gen_range(0.2..0.9), random_box(&mut rng), 0u32))
            .collect();
        let base = average_precision(&dets, &gts, 0.5).ap;

        // lowest-score false positive never increases AP
        dets.push((0.01, BoxF::new(900.0, 900.0, 901.0, 901.0), 0));
        let with_fp = average_precision(&dets, &gts, 0.5).ap;
        assert!(with_fp <= base + 1e-12);
        dets.pop();

        // highest-score true positive never decreases AP
        dets.push((0.99, gts[0].0, 0));
        let with_tp = average_precision(&dets, &gts, 0.5).ap;
        assert!(with_tp >= base - 1e-12);
    }
}

#[test]
fn miou_identity_disjoint_and_hand_case() {
    use ndarray::arr2;
    let gt = arr2(&[[0u16, 0, BACKGROUND], [1, 1, BACKGROUND]]);
    let split = [0usize, 1];
    assert_eq!(mean_iou_dense(&gt, &gt, &split), Some(1.0));

    let pred = arr2(&[[1u16, 1, 0], [BACKGROUND, 0, 0]]);
    // class 0: pred {02,11*,12}... inter with gt {00,01} is empty
    // class 1: pred {00,01}, gt {10,11}: inter empty
    assert_eq!(mean_iou_dense(&pred, &gt, &split), Some(0.0));

    // 8x8 two-class pixel-count oracle
    let mut gt8 = ndarray::Array2::from_elem((8, 8), BACKGROUND);
    let mut pred8 = ndarray::Array2::from_elem((8, 8), BACKGROUND);
    for y in 0..4 {
        for x in 0..4 {
            gt8[[y, x]] = 0;
        }
    }
    for y in 2..6 {
        for x in 2..6 {
            pred8[[y, x]] = 0;
        }
    }
    for y in 5..8 {
        for x in 5..8 {
            gt8[[y, x]] = 1;
            pred8[[y, x]] = 1;
        }
    }
    pred8[[5, 5]] = BACKGROUND;
    // class 0: pred lost cell (5,5) to class 1 then background, so 15 cells;
    // inter 4 (2..4 x 2..4), union 16+15-4=27. class 1: inter 8, union 9.
    let expect = (4.0 / 27.0 + 8.0 / 9.0) / 2.0;
    let got = mean_iou_dense(&pred8, &gt8, &[0, 1]).unwrap();
    assert!((got - expect).abs() < 1e-12);

    // no split class present in GT -> absent
    let empty = ndarray::Array2::from_elem((8, 8), BACKGROUND);
    assert_eq!(mean_iou_dense(&pred8, &empty, &[0, 1]), None);
}

#[test]
fn miou_is_bounded_and_exact_only_on_identity() {
    let mut rng = stream(24, "metrics/miou-range");
    for _ in 0..100 {
        let labels = |rng: &mut rand_chacha::ChaCha8Rng| {
            ndarray::Array2::from_shape_fn((6, 6), |_| {
                let v: u16 = rng.gen_range(0..4);
                if v == 3 {
                    BACKGROUND
                } else {
                    v
                }
            })
        };
        let gt = labels(&mut rng);
        let pred = labels(&mut rng);
        if let Some(v) = mean_iou_dense(&pred, &gt, &[0, 1, 2]) {
            assert!((0.0..=1.0).contains(&v));
            if (v - 1.0).abs() < 1e-12 {
                // exact 1.0 requires identical restricted label sets
                for (p, g) in pred.iter().zip(gt.iter()) {
                    let p = if *p < 3 { *p } else { BACKGROUND };
                    let g = if *g < 3 { *g } else { BACKGROUND };
                    assert_eq!(p, g);
                }
            }
        }
    }
}

#[test]
fn downsample_majority_prefers_objects_then_low_index() {
    use ndarray::arr2;
    // strict majority wins, even for background
    let mask = arr2(&[[BACKGROUND, 5u16], [2, BACKGROUND]]);
    let grid = downsample_mask(&mask, 2);
    assert_eq!(grid[[0, 0]], BACKGROUND);

    // object/background tie: the object label wins
    let mask = arr2(&[[BACKGROUND, 2u16], [2, BACKGROUND]]);
    let grid = downsample_mask(&mask, 2);
    assert_eq!(grid[[0, 0]], 2);

    // object/object tie: the lower index wins
    let mask = arr2(&[[5u16, 5], [2, 2]]);
    let grid = downsample_mask(&mask, 2);
    assert_eq!(grid[[0, 0]], 2);
}

#[test]
fn detection_map_splits_base_and_novel() {
    let categories = crate::synthdata::CategorySet::new(
        vec!["a".into(), "b".into(), "c".into()],
        vec![true, true, false],
    )
    .unwrap();
    let gt = vec![
        (0u32, BoxF::new(0.0, 0.0, 4.0, 4.0), 0usize),
        (0u32, BoxF::new(10.0, 10.0, 14.0, 14.0), 2usize),
    ];
    let dets = vec![
        Detection {
            image_id: 0,
            bbox: BoxF::new(0.0, 0.0, 4.0, 4.0),
            category_index: 0,
            score: 0.9,
        },
        // novel class missed entirely
    ];
    let summary = detection_map(&dets, &gt, &categories, 0.5);
    assert!((summary.map_base - 1.0).abs() < 1e-12);
    assert_eq!(summary.map_novel, 0.0);
    assert!((summary.map_overall - 0.5).abs() < 1e-12);
    // class b absent from GT: excluded
    assert!(!summary.per_class_ap.contains_key(&1));
}
