//! Toy region-proposal source: sliding square anchors over the feature grid,
//! scored and refined by a small convolutional head. Trained on base-class
//! boxes only; every positive anchor assignment is logged so the base-only
//! contract can be audited. An oracle mode (ground-truth boxes plus jitter)
//! exists to isolate pseudo-label quality from proposal quality.

use crate::error::{Error, Result};
use crate::geom::{box_iou, BoxF, PixelBox};
use crate::graph::{conv_kernel_init, Graph};
use crate::rng;
use crate::synthdata::LoadedSplit;
use crate::vlm::ConvLayer;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Proposal;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RpnConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Square anchor sides in pixels, one anchor per size per cell.
    pub anchor_sizes: Vec<u32>,
    pub iou_pos: f64,
    pub iou_neg: f64,
    /// Positive + negative anchors sampled per image per step.
    pub samples_per_image: usize,
    pub max_proposals: usize,
    /// Overlap at which near-duplicate proposals are merged away.
    pub nms_iou: f64,
}

impl Default for RpnConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            lr: 0.05,
            seed: 0,
            anchor_sizes: vec![10, 14, 18],
            iou_pos: 0.5,
            iou_neg: 0.3,
            samples_per_image: 16,
            max_proposals: 40,
            nms_iou: 0.8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RpnParams {
    pub conv: Vec<ConvLayer>,
    pub anchor_sizes: Vec<u32>,
}

impl RpnParams {
    pub fn stride(&self) -> usize {
        self.conv.iter().map(|c| c.stride).product()
    }

    pub fn n_anchors(&self) -> usize {
        self.anchor_sizes.len()
    }

    pub fn to_checkpoint(&self) -> crate::ckpt::Checkpoint {
        let mut ckpt = crate::ckpt::Checkpoint::new();
        for (i, layer) in self.conv.iter().enumerate() {
            ckpt.insert(format!("rpn/conv{i}/w"), layer.weight.clone().into_dyn());
            ckpt.insert(format!("rpn/conv{i}/b"), layer.bias.clone().into_dyn());
            ckpt.insert(
                format!("rpn/conv{i}/meta"),
                ndarray::arr1(&[
                    layer.stride as f64,
                    layer.pad as f64,
                    if layer.relu { 1.0 } else { 0.0 },
                ])
                .into_dyn(),
            );
        }
        ckpt.insert(
            "rpn/meta",
            ndarray::arr1(&[self.conv.len() as f64]).into_dyn(),
        );
        ckpt.insert(
            "rpn/anchor_sizes",
            ndarray::Array1::from(
                self.anchor_sizes.iter().map(|&s| s as f64).collect::<Vec<_>>(),
            )
            .into_dyn(),
        );
        ckpt
    }

    pub fn from_checkpoint(ckpt: &crate::ckpt::Checkpoint) -> Result<Self> {
        let n_conv = ckpt.get("rpn/meta")?[[0]] as usize;
        let mut conv = Vec::with_capacity(n_conv);
        for i in 0..n_conv {
            let m = ckpt.get(&format!("rpn/conv{i}/meta"))?;
            conv.push(ConvLayer {
                weight: ckpt
                    .get(&format!("rpn/conv{i}/w"))?
                    .clone()
                    .into_dimensionality()
                    .map_err(|e| Error::Shape(e.to_string()))?,
                bias: ckpt
                    .get(&format!("rpn/conv{i}/b"))?
                    .clone()
                    .into_dimensionality()
                    .map_err(|e| Error::Shape(e.to_string()))?,
                stride: m[[0]] as usize,
                pad: m[[1]] as usize,
                relu: m[[2]] != 0.0,
            });
        }
        let anchor_sizes = ckpt
            .get("rpn/anchor_sizes")?
            .iter()
            .map(|&v| v as u32)
            .collect();
        Ok(Self { conv, anchor_sizes })
    }

    pub fn weight_hash(&self) -> String {
        let parts: Vec<(String, Vec<f64>)> = self
            .conv
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                vec![
                    (format!("conv{i}/w"), l.weight.iter().copied().collect()),
                    (format!("conv{i}/b"), l.bias.iter().copied().collect()),
                ]
            })
            .collect();
        crate::hash::hash_named_tensors(parts.iter().map(|(n, v)| (n.as_str(), v.as_slice())))
    }
}

/// Anchor center/size for a global anchor index.
fn anchor_box(params: &RpnParams, grid_w: usize, index: usize) -> BoxF {
    let a = params.n_anchors();
    let cell = index / a;
    let size = params.anchor_sizes[index % a] as f64;
    let stride = params.stride() as f64;
    let (gy, gx) = (cell / grid_w, cell % grid_w);
    let cx = (gx as f64 + 0.5) * stride;
    let cy = (gy as f64 + 0.5) * stride;
    BoxF::new(cx - size / 2.0, cy - size / 2.0, cx + size / 2.0, cy + size / 2.0)
}

fn init_params(cfg: &RpnConfig) -> RpnParams {
    let mut rng = rng::stream(cfg.seed, "rpn/init");
    let a = cfg.anchor_sizes.len();
    RpnParams {
        conv: vec![
            ConvLayer {
                weight: conv_kernel_init(&mut rng, 12, 3, 3),
                bias: Array1::zeros(12),
                stride: 2,
                pad: 1,
                relu: true,
            },
            ConvLayer {
                weight: conv_kernel_init(&mut rng, 16, 12, 3),
                bias: Array1::zeros(16),
                stride: 2,
                pad: 1,
                relu: true,
            },
            // head: [objectness x A, dx x A, dy x A, dw x A, dh x A]
            ConvLayer {
                weight: conv_kernel_init(&mut rng, 5 * a, 16, 1),
                bias: Array1::zeros(5 * a),
                stride: 1,
                pad: 0,
                relu: false,
            },
        ],
        anchor_sizes: cfg.anchor_sizes.clone(),
    }
}

/// Raw head outputs per anchor: `(P*A)`-row matrices of objectness logits and
/// the 4 box deltas, built on a graph so training can backprop through them.
struct HeadOutputs {
    objectness: crate::graph::Var,
    deltas: crate::graph::Var,
    n_anchors_total: usize,
}

fn head_forward(
    g: &mut Graph,
    params: &RpnParams,
    kernels: &[crate::graph::Var],
    biases: &[crate::graph::Var],
    pixels: &ndarray::Array3<f32>,
) -> HeadOutputs {
    let (h, w, _) = pixels.dim();
    let chw = ndarray::Array3::from_shape_fn((3, h, w), |(c, y, x)| pixels[[y, x, c]] as f64);
    let mut cur = g.leaf(chw.into_dyn());
    for (i, layer) in params.conv.iter().enumerate() {
        cur = g.conv2d(cur, kernels[i], biases[i], layer.stride, layer.pad);
        if layer.relu {
            cur = g.relu(cur);
        }
    }
    let shape = g.value(cur).shape().to_vec();
    let (ch, gh, gw) = (shape[0], shape[1], shape[2]);
    let a = params.n_anchors();
    let flat = g.reshape(cur, &[ch, gh * gw]);
    let rows = g.transpose(flat); // (P, 5A)
    let p = gh * gw;

    let obj = g.slice_cols(rows, 0, a);
    let objectness = g.reshape(obj, &[p * a, 1]);
    let mut delta_cols = Vec::with_capacity(4);
    for k in 0..4 {
        let block = g.slice_cols(rows, (k + 1) * a, a);
        delta_cols.push(g.reshape(block, &[p * a, 1]));
    }
    let d01 = g.concat_cols(delta_cols[0], delta_cols[1]);
    let d23 = g.concat_cols(delta_cols[2], delta_cols[3]);
    let deltas = g.concat_cols(d01, d23);
    HeadOutputs {
        objectness,
        deltas,
        n_anchors_total: p * a,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum AnchorLabel {
    Positive { gt: usize },
    Negative,
    Ignore,
}

fn assign_anchors(
    params: &RpnParams,
    grid: (usize, usize),
    gt_boxes: &[PixelBox],
    cfg: &RpnConfig,
) -> Vec<AnchorLabel> {
    let total = grid.0 * grid.1 * params.n_anchors();
    let mut labels = vec![AnchorLabel::Negative; total];
    let mut best_iou = vec![0.0f64; total];
    let mut best_gt = vec![usize::MAX; total];
    for i in 0..total {
        let abox = anchor_box(params, grid.1, i);
        for (gi, gt) in gt_boxes.iter().enumerate() {
            let iou = box_iou(&abox, &gt.to_f());
            if iou > best_iou[i] {
                best_iou[i] = iou;
                best_gt[i] = gi;
            }
        }
        labels[i] = if best_iou[i] >= cfg.iou_pos {
            AnchorLabel::Positive { gt: best_gt[i] }
        } else if best_iou[i] < cfg.iou_neg {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
    }
    // force-match: every ground-truth box claims its best anchor
    for (gi, gt) in gt_boxes.iter().enumerate() {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for i in 0..total {
            let v = box_iou(&anchor_box(params, grid.1, i), &gt.to_f());
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        if best_v > 0.0 {
            labels[best] = AnchorLabel::Positive { gt: gi };
        }
    }
    labels
}

fn box_deltas(anchor: &BoxF, gt: &BoxF) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    [
        (gcx - acx) / anchor.width(),
        (gcy - acy) / anchor.height(),
        (gt.width() / anchor.width()).ln(),
        (gt.height() / anchor.height()).ln(),
    ]
}

fn apply_deltas(anchor: &BoxF, d: &[f64; 4]) -> BoxF {
    let (acx, acy) = anchor.center();
    let cx = acx + d[0] * anchor.width();
    let cy = acy + d[1] * anchor.height();
    let w = anchor.width() * d[2].clamp(-4.0, 4.0).exp();
    let h = anchor.height() * d[3].clamp(-4.0, 4.0).exp();
    BoxF::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

/// One positive anchor assignment, kept for the base-class-only audit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PositiveAssignment {
    pub image_id: u32,
    pub anchor: usize,
    pub matched_class: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RpnTrainLog {
    pub epoch_losses: Vec<f64>,
    pub positive_assignments: Vec<PositiveAssignment>,
}

/// Train the proposal head on the (base-only) annotations of a split.
pub fn train_rpn(train: &LoadedSplit, cfg: &RpnConfig) -> Result<(RpnParams, RpnTrainLog)> {
    let mut params = init_params(cfg);
    let mut log_out = RpnTrainLog::default();
    let stride = params.stride();

    // anchor targets are fixed per scene: compute once
    let mut all_targets = Vec::with_capacity(train.scenes.len());
    for scene in &train.scenes {
        let (h, w, _) = scene.image.pixels.dim();
        let grid = (h / stride, w / stride);
        let labels = assign_anchors(&params, grid, &scene.annotation.boxes, cfg);
        for (i, lab) in labels.iter().enumerate() {
            if let AnchorLabel::Positive { gt } = lab {
                log_out.positive_assignments.push(PositiveAssignment {
                    image_id: scene.image.id,
                    anchor: i,
                    matched_class: scene.annotation.class_ids[*gt],
                });
            }
        }
        all_targets.push((grid, labels));
    }

    let mut batch_counter = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.scenes.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &format!("rpn/epoch/{epoch}")));
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for &idx in &order {
            let scene = &train.scenes[idx];
            let (grid, labels) = &all_targets[idx];
            let loss_value = rpn_step(
                &mut params,
                scene,
                *grid,
                labels,
                cfg,
                &format!("rpn/sample/{epoch}/{idx}"),
            )?;
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    batch: batch_counter,
                    loss: loss_value,
                });
            }
            epoch_loss += loss_value;
            steps += 1;
            batch_counter += 1;
        }
        let mean = epoch_loss / steps.max(1) as f64;
        log::info!("rpn epoch {epoch}: loss {mean:.5}");
        log_out.epoch_losses.push(mean);
    }
    Ok((params, log_out))
}

fn rpn_step(
    params: &mut RpnParams,
    scene: &crate::synthdata::LoadedScene,
    grid: (usize, usize),
    labels: &[AnchorLabel],
    cfg: &RpnConfig,
    sample_stream: &str,
) -> Result<f64> {
    let mut g = Graph::new();
    let kernels: Vec<_> = params
        .conv
        .iter()
        .map(|c| g.leaf(c.weight.clone().into_dyn()))
        .collect();
    let biases: Vec<_> = params
        .conv
        .iter()
        .map(|c| g.leaf(c.bias.clone().into_dyn()))
        .collect();
    let head = head_forward(&mut g, params, &kernels, &biases, &scene.image.pixels);

    // deterministic positive/negative sampling
    let mut positives: Vec<usize> = Vec::new();
    let mut negatives: Vec<usize> = Vec::new();
    for (i, lab) in labels.iter().enumerate() {
        match lab {
            AnchorLabel::Positive { .. } => positives.push(i),
            AnchorLabel::Negative => negatives.push(i),
            AnchorLabel::Ignore => {}
        }
    }
    let mut sampler = rng::stream(cfg.seed, sample_stream);
    positives.shuffle(&mut sampler);
    negatives.shuffle(&mut sampler);
    let half = cfg.samples_per_image / 2;
    positives.truncate(half.max(1));
    negatives.truncate(cfg.samples_per_image.saturating_sub(positives.len()).max(1));

    // binary CE through a two-column logit trick: rows [0, logit]
    let n_total = head.n_anchors_total;
    let zeros = g.leaf2(Array2::zeros((n_total, 1)));
    let two_col = g.concat_cols(zeros, head.objectness);
    let mut targets = vec![0usize; n_total];
    let mut valid = vec![false; n_total];
    for &i in &positives {
        targets[i] = 1;
        valid[i] = true;
    }
    for &i in &negatives {
        valid[i] = true;
    }
    let cls_loss = g.cross_entropy_rows(two_col, &targets, &valid);

    let loss = if positives.is_empty() {
        cls_loss
    } else {
        // gather positive rows with a constant selection matrix
        let mut sel = Array2::<f64>::zeros((positives.len(), n_total));
        let mut delta_targets = Array2::<f64>::zeros((positives.len(), 4));
        for (row, &i) in positives.iter().enumerate() {
            sel[[row, i]] = 1.0;
            if let AnchorLabel::Positive { gt } = labels[i] {
                let abox = anchor_box(params, grid.1, i);
                let d = box_deltas(&abox, &scene.annotation.boxes[gt].to_f());
                for (k, v) in d.iter().enumerate() {
                    delta_targets[[row, k]] = *v;
                }
            }
        }
        let sel = g.leaf2(sel);
        let pos_deltas = g.matmul(sel, head.deltas);
        let reg_loss = g.l1_mean(pos_deltas, delta_targets);
        g.add(cls_loss, reg_loss)
    };

    let loss_value = g.scalar(loss);
    let grads = g.backward(loss);
    for (i, layer) in params.conv.iter_mut().enumerate() {
        if let Some(gk) = grads.get(kernels[i]) {
            let gk = gk.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            layer.weight.zip_mut_with(&gk, |w, gr| *w -= cfg.lr * gr);
        }
        if let Some(gb) = grads.get(biases[i]) {
            let gb = gb.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            layer.bias.zip_mut_with(&gb, |w, gr| *w -= cfg.lr * gr);
        }
    }
    Ok(loss_value)
}

/// Proposals for one image, objectness-descending, deduplicated by NMS.
pub fn rpn_propose(
    params: &RpnParams,
    image: &crate::synthdata::SceneImage,
    max_proposals: usize,
    nms_iou: f64,
) -> Vec<Proposal> {
    let (h, w, _) = image.pixels.dim();
    let mut g = Graph::new();
    let kernels: Vec<_> = params
        .conv
        .iter()
        .map(|c| g.leaf(c.weight.clone().into_dyn()))
        .collect();
    let biases: Vec<_> = params
        .conv
        .iter()
        .map(|c| g.leaf(c.bias.clone().into_dyn()))
        .collect();
    let head = head_forward(&mut g, params, &kernels, &biases, &image.pixels);
    let obj = g.sigmoid(head.objectness);
    let obj = g.value(obj).clone();
    let deltas = g.value(head.deltas).clone();

    let grid_w = (w / params.stride()).max(1);
    let mut scored: Vec<(f64, usize)> = (0..head.n_anchors_total)
        .map(|i| (obj[[i, 0]], i))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let mut kept: Vec<Proposal> = Vec::new();
    for (score, i) in scored {
        if kept.len() >= max_proposals {
            break;
        }
        let abox = anchor_box(params, grid_w, i);
        let d = [
            deltas[[i, 0]],
            deltas[[i, 1]],
            deltas[[i, 2]],
            deltas[[i, 3]],
        ];
        let decoded = apply_deltas(&abox, &d).clip(w as f64, h as f64);
        if decoded.width() < 1.0 || decoded.height() < 1.0 {
            continue;
        }
        if kept.iter().any(|k| box_iou(&k.bbox, &decoded) >= nms_iou) {
            continue;
        }
        kept.push(Proposal {
            bbox: decoded,
            objectness: score,
        });
    }
    kept
}

/// Oracle proposals: every annotated box, jittered, with objectness 1.0.
/// Class information is never consulted — the oracle is class-agnostic.
pub fn oracle_proposals(
    boxes: &[PixelBox],
    image_size: (u32, u32),
    jitter_frac: f64,
    seed: u64,
    image_id: u32,
) -> Vec<Proposal> {
    let mut rng = rng::stream(seed, &format!("oracle-proposals/{image_id}"));
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    boxes
        .iter()
        .map(|b| {
            let bf = b.to_f();
            let jw = jitter_frac * bf.width();
            let jh = jitter_frac * bf.height();
            let bbox = BoxF::new(
                bf.x1 + rng.gen_range(-jw..=jw),
                bf.y1 + rng.gen_range(-jh..=jh),
                bf.x2 + rng.gen_range(-jw..=jw),
                bf.y2 + rng.gen_range(-jh..=jh),
            )
            .clip(w, h);
            Proposal {
                bbox,
                objectness: 1.0,
            }
        })
        .collect()
}
