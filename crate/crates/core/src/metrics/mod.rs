//! Evaluation: mAP at IoU 0.5 over base/novel/overall splits, and mIoU of
//! dense score maps.
//!
//! AP uses score-descending greedy matching (each ground-truth box matchable
//! once) and all-points interpolation of the precision-recall curve. Class
//! APs are averaged unweighted; classes absent from the ground truth are
//! excluded from the mean.

use crate::geom::{box_iou, BoxF};
use crate::synthdata::codec::BACKGROUND;
use crate::synthdata::CategorySet;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One detection, as emitted by the detector or a pseudo-label run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u32,
    pub bbox: BoxF,
    pub category_index: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    /// True when both detections and ground truth were empty.
    pub vacuous: bool,
}

/// Average precision for one class.
///
/// `detections` are `(score, box, image_id)`; `gts` are `(box, image_id)`.
pub fn average_precision(
    detections: &[(f64, BoxF, u32)],
    gts: &[(BoxF, u32)],
    iou_thresh: f64,
) -> ApResult {
    if gts.is_empty() {
        return ApResult {
            ap: if detections.is_empty() { 1.0 } else { 0.0 },
            vacuous: detections.is_empty(),
        };
    }
    if detections.is_empty() {
        return ApResult { ap: 0.0, vacuous: false };
    }

    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].0.partial_cmp(&detections[a].0).unwrap());

    let mut matched = vec![false; gts.len()];
    let mut tp_flags = Vec::with_capacity(detections.len());
    for &di in &order {
        let (_, dbox, dimg) = detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, &(gbox, gimg)) in gts.iter().enumerate() {
            if gimg != dimg || matched[gi] {
                continue;
            }
            let iou = box_iou(&dbox, &gbox);
            if iou >= iou_thresh && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[gi] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }

    let n_gt = gts.len() as f64;
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (k, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (k + 1) as f64);
        recalls.push(tp as f64 / n_gt);
    }

    // all-points interpolation: monotone precision envelope, integrate over recall
    let mut envelope = precisions.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..envelope.len() {
        ap += (recalls[i] - prev_recall) * envelope[i];
        prev_recall = recalls[i];
    }
    ApResult { ap, vacuous: false }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MapSummary {
    pub per_class_ap: BTreeMap<usize, f64>,
    pub map_base: f64,
    pub map_novel: f64,
    pub map_overall: f64,
}

/// mAP@`iou_thresh` over all classes present in the ground truth.
pub fn detection_map(
    detections: &[Detection],
    ground_truth: &[(u32, BoxF, usize)],
    categories: &CategorySet,
    iou_thresh: f64,
) -> MapSummary {
    let mut per_class_ap = BTreeMap::new();
    let mut base_aps = Vec::new();
    let mut novel_aps = Vec::new();
    let mut all_aps = Vec::new();
    for class in 0..categories.len() {
        let gts: Vec<(BoxF, u32)> = ground_truth
            .iter()
            .filter(|(_, _, c)| *c == class)
            .map(|(img, b, _)| (*b, *img))
            .collect();
        if gts.is_empty() {
            continue; // absent from GT: excluded from the mean
        }
        let dets: Vec<(f64, BoxF, u32)> = detections
            .iter()
            .filter(|d| d.category_index == class)
            .map(|d| (d.score, d.bbox, d.image_id))
            .collect();
        let ap = average_precision(&dets, &gts, iou_thresh).ap;
        per_class_ap.insert(class, ap);
        all_aps.push(ap);
        if categories.is_base(class) {
            base_aps.push(ap);
        } else {
            novel_aps.push(ap);
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    MapSummary {
        per_class_ap,
        map_base: mean(&base_aps),
        map_novel: mean(&novel_aps),
        map_overall: mean(&all_aps),
    }
}

/// Downsample a full-resolution mask to the score grid by majority vote per
/// `stride x stride` cell. Ties prefer an object label over background, then
/// the lowest category index.
pub fn downsample_mask(mask: &Array2<u16>, stride: usize) -> Array2<u16> {
    let (h, w) = mask.dim();
    let (gh, gw) = (h / stride, w / stride);
    let mut out = Array2::from_elem((gh, gw), BACKGROUND);
    for gy in 0..gh {
        for gx in 0..gw {
            let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
            for y in gy * stride..(gy + 1) * stride {
                for x in gx * stride..(gx + 1) * stride {
                    *counts.entry(mask[[y, x]]).or_insert(0) += 1;
                }
            }
            let mut best = BACKGROUND;
            let mut best_key = (0usize, true, u16::MAX);
            for (&label, &count) in &counts {
                let key = (count, label == BACKGROUND, label);
                // more votes wins; then objects beat background; then lower index
                let better = key.0 > best_key.0
                    || (key.0 == best_key.0 && best_key.1 && !key.1)
                    || (key.0 == best_key.0 && key.1 == best_key.1 && key.2 < best_key.2);
                if better {
                    best_key = key;
                    best = label;
                }
            }
            out[[gy, gx]] = best;
        }
    }
    out
}

/// Mean IoU between predicted and ground-truth pixel sets over the given
/// split classes. Pixels predicting a class outside the split count as
/// background. Returns `None` when no split class appears in the ground
/// truth of any cell.
pub fn mean_iou_dense(
    pred_labels: &Array2<u16>,
    gt_grid: &Array2<u16>,
    split_classes: &[usize],
) -> Option<f64> {
    assert_eq!(pred_labels.dim(), gt_grid.dim(), "grid shape mismatch");
    let restrict = |v: u16| -> u16 {
        if v != BACKGROUND && split_classes.contains(&(v as usize)) {
            v
        } else {
            BACKGROUND
        }
    };
    let mut ious = Vec::new();
    for &class in split_classes {
        let c = class as u16;
        let mut inter = 0usize;
        let mut union = 0usize;
        let mut gt_present = false;
        for (p, g) in pred_labels.iter().zip(gt_grid.iter()) {
            let p = restrict(*p) == c;
            let g = restrict(*g) == c;
            if g {
                gt_present = true;
            }
            if p && g {
                inter += 1;
            }
            if p || g {
                union += 1;
            }
        }
        if gt_present {
            ious.push(inter as f64 / union as f64);
        }
    }
    if ious.is_empty() {
        None
    } else {
        Some(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

/// Full evaluation report, one JSON document.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_novel: f64,
    pub map_base: f64,
    pub map_overall: f64,
    pub per_class_ap: BTreeMap<String, f64>,
    pub miou_novel: Option<f64>,
    pub miou_base: Option<f64>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn write(&self, path: &std::path::Path) -> crate::Result<()> {
        Ok(std::fs::write(path, serde_json::to_vec_pretty(self)?)?)
    }

    pub fn text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "mAP@0.5  novel {:>7.4}  base {:>7.4}  overall {:>7.4}\n",
            self.map_novel, self.map_base, self.map_overall
        ));
        if let (Some(n), Some(b)) = (self.miou_novel, self.miou_base) {
            out.push_str(&format!("mIoU     novel {n:>7.4}  base {b:>7.4}\n"));
        }
        for (name, ap) in &self.per_class_ap {
            out.push_str(&format!("  {name:<20} AP {ap:>7.4}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests;
