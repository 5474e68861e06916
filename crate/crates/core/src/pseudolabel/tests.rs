use super::*;
use crate::rng::stream;
use rand::Rng;

fn grid_scores(values: &[f64], w: usize) -> (Vec<f64>, (usize, usize)) {
    (values.to_vec(), (values.len() / w, w))
}

#[test]
fn empty_threshold_set_and_full_grid() {
    let (scores, grid) = grid_scores(&[0.1, 0.2, 0.3, 0.4], 2);
    assert!(connected_regions(&scores, 0.5, grid, 4, 0, Connectivity::Four).is_empty());

    let regions = connected_regions(&scores, 0.05, grid, 4, 3, Connectivity::Four);
    assert_eq!(regions.len(), 1);
    assert_eq!(regions[0].pixels, vec![0, 1, 2, 3]);
    assert_eq!(regions[0].class_index, 3);
    assert_eq!(regions[0].hull, PixelBox::new(0, 0, 8, 8));
}

#[test]
fn diagonal_blobs_split_under_four_connectivity() {
    // 7x7 with two blobs touching only at a diagonal
    let mut v = vec![0.0f64; 49];
    for (y, x) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
        v[y * 7 + x] = 1.0;
    }
    for (y, x) in [(3, 3), (3, 4), (4, 3), (4, 4)] {
        v[y * 7 + x] = 1.0;
    }
    let four = connected_regions(&v, 0.5, (7, 7), 1, 0, Connectivity::Four);
    assert_eq!(four.len(), 2);
    let eight = connected_regions(&v, 0.5, (7, 7), 1, 0, Connectivity::Eight);
    assert_eq!(eight.len(), 1);
}

/// Recursive flood-fill oracle (independent of the BFS implementation).
fn flood_fill_regions(
    scores: &[f64],
    delta: f64,
    grid: (usize, usize),
    eight: bool,
) -> Vec<Vec<u32>> {
    let (h, w) = grid;
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    fn recurse(
        p: usize,
        scores: &[f64],
        delta: f64,
        h: usize,
        w: usize,
        eight: bool,
        seen: &mut [bool],
        acc: &mut Vec<u32>,
    ) {
        if seen[p] || scores[p] < delta {
            return;
        }
        seen[p] = true;
        acc.push(p as u32);
        let (y, x) = (p / w, p % w);
        let mut neighbors = vec![];
        if y > 0 {
            neighbors.push(p - w);
        }
        if y + 1 < h {
            neighbors.push(p + w);
        }
        if x > 0 {
            neighbors.push(p - 1);
        }
        if x + 1 < w {
            neighbors.push(p + 1);
        }
        if eight {
            if y > 0 && x > 0 {
                neighbors.push(p - w - 1);
            }
            if y > 0 && x + 1 < w {
                neighbors.push(p - w + 1);
            }
            if y + 1 < h && x > 0 {
                neighbors.push(p + w - 1);
            }
            if y + 1 < h && x + 1 < w {
                neighbors.push(p + w + 1);
            }
        }
        for n in neighbors {
            recurse(n, scores, delta, h, w, eight, seen, acc);
        }
    }
    for p in 0..h * w {
        if !seen[p] && scores[p] >= delta {
            let mut acc = Vec::new();
            recurse(p, scores, delta, h, w, eight, &mut seen, &mut acc);
            acc.sort_unstable();
            out.push(acc);
        }
    }
    out
}

#[test]
fn regions_match_flood_fill_oracle_on_1000_maps() {
    let mut rng = stream(51, "pl/flood");
    for case in 0..1000 {
        let h = rng.gen_range(1..=32);
        let w = rng.gen_range(1..=32);
        let scores: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let delta = rng.gen_range(0.2..0.8);
        let eight = case % 3 == 0;
        let conn = if eight { Connectivity::Eight } else { Connectivity::Four };
        let got = connected_regions(&scores, delta, (h, w), 1, 0, conn);
        let expect = flood_fill_regions(&scores, delta, (h, w), eight);
        assert_eq!(got.len(), expect.len(), "case {case} ({h}x{w})");
        let mut got_sets: Vec<Vec<u32>> = got.iter().map(|r| r.pixels.clone()).collect();
        got_sets.sort();
        let mut expect_sets = expect;
        expect_sets.sort();
        assert_eq!(got_sets, expect_sets, "case {case}");
    }
}

#[test]
fn delta_nesting_over_200_maps() {
    let mut rng = stream(52, "pl/nesting");
    for _ in 0..200 {
        let (h, w) = (rng.gen_range(2..16), rng.gen_range(2..16));
        let scores: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let d1 = rng.gen_range(0.1..0.5);
        let d2 = rng.gen_range(d1..0.9);
        let loose = connected_regions(&scores, d1, (h, w), 1, 0, Connectivity::Four);
        let tight = connected_regions(&scores, d2, (h, w), 1, 0, Connectivity::Four);
        // every region at the higher threshold nests inside one looser region
        for t in &tight {
            let found = loose.iter().any(|l| {
                t.pixels.iter().all(|p| l.pixels.binary_search(p).is_ok())
            });
            assert!(found, "region at delta2 not nested in any delta1 region");
        }
    }
}

#[test]
fn mask_iou_identity_disjoint_and_corner() {
    // region = exact 4x4 block of grid cells
    let mut scores = vec![0.0f64; 8 * 8];
    for y in 0..4 {
        for x in 0..4 {
            scores[y * 8 + x] = 1.0;
        }
    }
    let region = &connected_regions(&scores, 0.5, (8, 8), 1, 0, Connectivity::Four)[0];

    let exact = BoxF::new(0.0, 0.0, 4.0, 4.0);
    assert!((mask_iou(&exact, region, (8, 8), 1) - 1.0).abs() < 1e-12);

    let disjoint = BoxF::new(5.0, 5.0, 8.0, 8.0);
    assert_eq!(mask_iou(&disjoint, region, (8, 8), 1), 0.0);

    // 4x4 box overlapping the 4x4 region by a 2x2 corner: 4 / 28
    let corner = BoxF::new(2.0, 2.0, 6.0, 6.0);
    let got = mask_iou(&corner, region, (8, 8), 1);
    assert!((got - 4.0 / 28.0).abs() < 1e-12);

    // degenerate box
    let degenerate = BoxF::new(3.0, 3.0, 3.0, 5.0);
    assert_eq!(mask_iou(&degenerate, region, (8, 8), 1), 0.0);
}

#[test]
fn mask_iou_matches_pixel_set_oracle_on_1000_cases() {
    let mut rng = stream(53, "pl/iou-oracle");
    for case in 0..1000 {
        let (h, w) = (rng.gen_range(2..20), rng.gen_range(2..20));
        let stride = *[1usize, 2, 4].get(case % 3).unwrap();
        let scores: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let regions = connected_regions(&scores, 0.5, (h, w), stride, 0, Connectivity::Four);
        if regions.is_empty() {
            continue;
        }
        let region = &regions[case % regions.len()];
        let x1 = rng.gen_range(0.0..(w * stride) as f64);
        let y1 = rng.gen_range(0.0..(h * stride) as f64);
        let bbox = BoxF::new(
            x1,
            y1,
            x1 + rng.gen_range(0.5..(w * stride) as f64),
            y1 + rng.gen_range(0.5..(h * stride) as f64),
        );
        let got = mask_iou(&bbox, region, (h, w), stride);

        // pixel-set enumeration oracle over grid cells
        use std::collections::HashSet;
        let mut box_set = HashSet::new();
        for gy in 0..h {
            for gx in 0..w {
                // cell [gx*s,(gx+1)*s) x [gy*s,(gy+1)*s) overlaps the box?
                let (cx1, cy1) = ((gx * stride) as f64, (gy * stride) as f64);
                let (cx2, cy2) = (cx1 + stride as f64, cy1 + stride as f64);
                if bbox.x1 < cx2 && cx1 < bbox.x2 && bbox.y1 < cy2 && cy1 < bbox.y2 {
                    box_set.insert((gy * w + gx) as u32);
                }
            }
        }
        let region_set: HashSet<u32> = region.pixels.iter().copied().collect();
        let inter = box_set.intersection(&region_set).count();
        let union = box_set.union(&region_set).count();
        let expect = if box_set.is_empty() {
            0.0
        } else {
            inter as f64 / union as f64
        };
        assert!((got - expect).abs() < 1e-12, "case {case}: {got} vs {expect}");
    }
}

#[test]
fn mask_iou_is_symmetric_under_rasterization_exchange() {
    let mut rng = stream(54, "pl/iou-sym");
    for _ in 0..200 {
        let (h, w, stride) = (10usize, 12usize, 2usize);
        // two axis-aligned integer boxes; region B is built from box B's cells
        let make_box = |rng: &mut rand_chacha::ChaCha8Rng| {
            let gx1 = rng.gen_range(0..w - 1);
            let gy1 = rng.gen_range(0..h - 1);
            let gx2 = rng.gen_range(gx1 + 1..=w);
            let gy2 = rng.gen_range(gy1 + 1..=h);
            BoxF::new(
                (gx1 * stride) as f64,
                (gy1 * stride) as f64,
                (gx2 * stride) as f64,
                (gy2 * stride) as f64,
            )
        };
        let box_a = make_box(&mut rng);
        let box_b = make_box(&mut rng);
        let region_of = |b: &BoxF| {
            let mut scores = vec![0.0f64; h * w];
            for gy in 0..h {
                for gx in 0..w {
                    let (cx, cy) = ((gx * stride) as f64, (gy * stride) as f64);
                    if cx >= b.x1 && cx < b.x2 && cy >= b.y1 && cy < b.y2 {
                        scores[gy * w + gx] = 1.0;
                    }
                }
            }
            connected_regions(&scores, 0.5, (h, w), stride, 0, Connectivity::Four)
                .into_iter()
                .next()
                .unwrap()
        };
        let ab = mask_iou(&box_a, &region_of(&box_b), (h, w), stride);
        let ba = mask_iou(&box_b, &region_of(&box_a), (h, w), stride);
        assert!((ab - ba).abs() < 1e-12);
        // identity
        let aa = mask_iou(&box_a, &region_of(&box_a), (h, w), stride);
        assert!((aa - 1.0).abs() < 1e-12);
    }
}

fn toy_category_set() -> crate::synthdata::CategorySet {
    crate::synthdata::CategorySet::new(
        vec!["b0".into(), "b1".into(), "n0".into(), "n1".into()],
        vec![true, true, false, false],
    )
    .unwrap()
}

fn random_score_map(
    rng: &mut rand_chacha::ChaCha8Rng,
    grid: (usize, usize),
    n: usize,
) -> DenseScoreMap {
    DenseScoreMap {
        values: crate::graph::randn2(rng, grid.0 * grid.1, n, 1.0),
        grid,
        names: toy_category_set().names().to_vec(),
    }
}

#[test]
fn no_proposals_means_no_labels() {
    let mut rng = stream(55, "pl/empty");
    let s = random_score_map(&mut rng, (6, 6), 4);
    let labels = generate_pseudo_labels(
        &s,
        0,
        &[],
        &Thresholds::default(),
        &toy_category_set(),
        4,
        ScoreNormalization::MinMax,
        Connectivity::Four,
    )
    .unwrap();
    assert!(labels.is_empty());
}

#[test]
fn category_mismatch_is_input_error() {
    let mut rng = stream(56, "pl/mismatch");
    let mut s = random_score_map(&mut rng, (4, 4), 4);
    s.names[0] = "other".into();
    assert!(matches!(
        generate_pseudo_labels(
            &s,
            0,
            &[],
            &Thresholds::default(),
            &toy_category_set(),
            4,
            ScoreNormalization::MinMax,
            Connectivity::Four,
        ),
        Err(crate::Error::Input(_))
    ));
}

#[test]
fn out_of_range_thresholds_are_config_errors() {
    let t = Thresholds {
        gamma: 1.01,
        ..Default::default()
    };
    assert!(matches!(t.validate(), Err(crate::Error::Config(_))));
    let t = Thresholds {
        delta: 0.0,
        ..Default::default()
    };
    assert!(t.validate().is_err());
}

/// Independent whole-pipeline oracle: brute-force loops, recursive flood
/// fill, hash-set IoU, no shared helpers with the implementation.
fn oracle_pseudo_labels(
    s: &DenseScoreMap,
    image_id: u32,
    proposals: &[Proposal],
    t: &Thresholds,
    categories: &crate::synthdata::CategorySet,
    stride: usize,
    minmax: bool,
) -> Vec<PseudoLabel> {
    let (h, w) = s.grid;
    let n = categories.len();
    // base-as-background eligibility by raw argmax
    let mut eligible = vec![false; h * w];
    for p in 0..h * w {
        let mut best = 0;
        for c in 1..n {
            if s.values[[p, c]] > s.values[[p, best]] {
                best = c;
            }
        }
        eligible[p] = !categories.is_base(best);
    }
    // per-column min-max
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for c in 0..n {
        let col: Vec<f64> = (0..h * w).map(|p| s.values[[p, c]]).collect();
        if !minmax {
            cols.push(col);
            continue;
        }
        let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = max - min;
        cols.push(if range < 1e-12 {
            vec![0.0; h * w]
        } else {
            col.iter().map(|v| (v - min) / range).collect()
        });
    }
    // regions per novel class via recursive flood fill on the eligible set
    let mut regions: Vec<(usize, std::collections::HashSet<u32>)> = Vec::new();
    for class in 0..n {
        if categories.is_base(class) {
            continue;
        }
        let masked: Vec<f64> = (0..h * w)
            .map(|p| if eligible[p] { cols[class][p] } else { -1.0 })
            .collect();
        for pix in flood_fill_regions(&masked, t.delta, (h, w), false) {
            regions.push((class, pix.into_iter().collect()));
        }
    }
    let mut out = Vec::new();
    for prop in proposals {
        if prop.objectness < t.objectness_min {
            continue;
        }
        let gx1 = (prop.bbox.x1 / stride as f64).floor().max(0.0) as usize;
        let gy1 = (prop.bbox.y1 / stride as f64).floor().max(0.0) as usize;
        let gx2 = ((prop.bbox.x2 / stride as f64).ceil().max(0.0) as usize).min(w);
        let gy2 = ((prop.bbox.y2 / stride as f64).ceil().max(0.0) as usize).min(h);
        if gx2 <= gx1 || gy2 <= gy1 {
            continue;
        }
        let mut cells = std::collections::HashSet::new();
        for y in gy1..gy2 {
            for x in gx1..gx2 {
                cells.insert((y * w + x) as u32);
            }
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for (ri, (class, pix)) in regions.iter().enumerate() {
            let inter = cells.intersection(pix).count();
            let union = cells.union(pix).count();
            let score = inter as f64 / union as f64;
            if score < t.gamma {
                continue;
            }
            let better = match best {
                None => true,
                Some((bs, bc, _)) => score > bs || (score == bs && *class < bc),
            };
            if better {
                best = Some((score, *class, ri));
            }
        }
        if let Some((score, class, _)) = best {
            out.push(PseudoLabel {
                image_id,
                bbox: prop.bbox,
                class_index: class,
                confidence: score,
            });
        }
    }
    out
}

#[test]
fn generation_matches_independent_pipeline_on_50_scenes() {
    let mut rng = stream(57, "pl/pipeline-oracle");
    let categories = toy_category_set();
    let thresholds = Thresholds::default();
    for case in 0..50 {
        let grid = (12usize, 12usize);
        let stride = 4usize;
        // correlated blobby scores so regions actually form
        let mut values = crate::graph::randn2(&mut rng, grid.0 * grid.1, 4, 0.3);
        let n_blobs = rng.gen_range(1..4);
        for _ in 0..n_blobs {
            let c = rng.gen_range(0..4);
            let cy = rng.gen_range(0..grid.0);
            let cx = rng.gen_range(0..grid.1);
            let r = rng.gen_range(1..4) as isize;
            for y in 0..grid.0 as isize {
                for x in 0..grid.1 as isize {
                    if (y - cy as isize).abs() <= r && (x - cx as isize).abs() <= r {
                        values[[(y as usize) * grid.1 + x as usize, c]] += 2.0;
                    }
                }
            }
        }
        let s = DenseScoreMap {
            values,
            grid,
            names: categories.names().to_vec(),
        };
        let n_props = rng.gen_range(0..6);
        let proposals: Vec<Proposal> = (0..n_props)
            .map(|_| {
                let x1 = rng.gen_range(0.0..40.0);
                let y1 = rng.gen_range(0.0..40.0);
                Proposal {
                    bbox: BoxF::new(x1, y1, x1 + rng.gen_range(4.0..24.0), y1 + rng.gen_range(4.0..24.0)),
                    objectness: rng.gen_range(0.9..1.0),
                }
            })
            .collect();
        let got = generate_pseudo_labels(
            &s,
            case,
            &proposals,
            &thresholds,
            &categories,
            stride,
            ScoreNormalization::MinMax,
            Connectivity::Four,
        )
        .unwrap();
        let expect = oracle_pseudo_labels(&s, case, &proposals, &thresholds, &categories, stride, true);
        assert_eq!(got, expect, "case {case}");
    }
}

#[test]
fn gamma_and_objectness_shrink_the_label_set() {
    let mut rng = stream(58, "pl/shrink");
    let categories = toy_category_set();
    for case in 0..200u32 {
        let grid = (10usize, 10usize);
        let mut values = crate::graph::randn2(&mut rng, 100, 4, 0.4);
        for p in 0..100 {
            if rng.gen_bool(0.3) {
                let c = rng.gen_range(2..4);
                values[[p, c]] += 2.5;
            }
        }
        let s = DenseScoreMap {
            values,
            grid,
            names: categories.names().to_vec(),
        };
        let proposals: Vec<Proposal> = (0..5)
            .map(|_| {
                let x1 = rng.gen_range(0.0..30.0);
                let y1 = rng.gen_range(0.0..30.0);
                Proposal {
                    bbox: BoxF::new(x1, y1, x1 + rng.gen_range(4.0..20.0), y1 + rng.gen_range(4.0..20.0)),
                    objectness: rng.gen_range(0.5..1.0),
                }
            })
            .collect();
        let run = |gamma: f64, objectness_min: f64| {
            generate_pseudo_labels(
                &s,
                case,
                &proposals,
                &Thresholds {
                    delta: 0.6,
                    gamma,
                    objectness_min,
                },
                &categories,
                4,
                ScoreNormalization::MinMax,
                Connectivity::Four,
            )
            .unwrap()
        };
        let loose = run(0.2, 0.6);
        let tighter_gamma = run(0.5, 0.6);
        let tighter_obj = run(0.2, 0.9);
        assert!(tighter_gamma.len() <= loose.len(), "case {case}");
        assert!(tighter_obj.len() <= loose.len(), "case {case}");
        // emitted labels always satisfy the bounds and are non-base
        for l in &loose {
            assert!(l.confidence >= 0.2 && l.confidence <= 1.0);
            assert!(!categories.is_base(l.class_index));
        }
    }
}

#[test]
fn gamma_one_keeps_only_exact_matches() {
    let categories = toy_category_set();
    // a clean 2x2 novel-class blob, one exact proposal and one off-by-one
    let mut values = ndarray::Array2::from_elem((36, 4), -1.0);
    for (y, x) in [(2usize, 2usize), (2, 3), (3, 2), (3, 3)] {
        values[[y * 6 + x, 2]] = 1.0;
    }
    let s = DenseScoreMap {
        values,
        grid: (6, 6),
        names: categories.names().to_vec(),
    };
    let stride = 4;
    let exact = Proposal {
        bbox: BoxF::new(8.0, 8.0, 16.0, 16.0),
        objectness: 0.99,
    };
    let off = Proposal {
        bbox: BoxF::new(4.0, 8.0, 16.0, 16.0),
        objectness: 0.99,
    };
    let labels = generate_pseudo_labels(
        &s,
        0,
        &[exact, off],
        &Thresholds {
            gamma: 0.999999,
            ..Default::default()
        },
        &categories,
        stride,
        ScoreNormalization::MinMax,
        Connectivity::Four,
    )
    .unwrap();
    assert_eq!(labels.len(), 1);
    assert_eq!(labels[0].bbox, exact.bbox);
    assert_eq!(labels[0].class_index, 2);
}

#[test]
fn score_map_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = stream(59, "pl/smap");
    let s = random_score_map(&mut rng, (3, 5), 4);
    let path = dir.path().join("s.p3smap");
    write_score_map(&path, &s).unwrap();
    let back = read_score_map(&path, s.names.clone()).unwrap();
    assert_eq!(back.grid, s.grid);
    // f32 quantization round trip
    for (a, b) in s.values.iter().zip(back.values.iter()) {
        assert_eq!(*a as f32, *b as f32);
    }
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], SCOREMAP_MAGIC);
}

#[test]
fn pseudo_label_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let labels = vec![PseudoLabel {
        image_id: 3,
        bbox: BoxF::new(1.0, 2.0, 5.0, 9.0),
        class_index: 2,
        confidence: 0.75,
    }];
    let records = vec![PseudoLabelRecord::from_labels(
        3,
        &labels,
        Thresholds::default(),
        ScoreNormalization::MinMax,
    )];
    let path = dir.path().join("labels.jsonl");
    write_pseudo_label_file(&path, &records).unwrap();
    let back = read_pseudo_label_file(&path).unwrap();
    assert_eq!(back, records);
    assert_eq!(back[0].normalization, "minmax");
}
