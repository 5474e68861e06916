//! The final open-vocabulary detector and its self-training stage.
//!
//! A small convolutional backbone feeds ROI-pooled features into two heads:
//! a projection to the text-embedding space whose logits are inner products
//! against the frozen class-embedding matrix (plus one learnable background
//! row), and a class-agnostic 4-output box regressor. Proposals come from the
//! frozen toy RPN. Training consumes base ground truth plus pseudo labels;
//! swapping the classifier rows for a different category set's embeddings
//! requires no retraining.

use crate::error::{Error, Result};
use crate::geom::{box_iou, BoxF};
use crate::graph::{conv_kernel_init, uniform_fan_in, Graph, Var};
use crate::metrics::Detection;
use crate::pseudolabel::rpn::{rpn_propose, RpnParams};
use crate::pseudolabel::PseudoLabelRecord;
use crate::rng;
use crate::synthdata::{LoadedSplit, SceneImage};
use crate::vlm::{ClassEmbeddings, ConvLayer};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub rois_per_image: usize,
    pub iou_fg: f64,
    pub iou_bg: f64,
    /// Backbone feature width before the heads.
    pub feature_dim: usize,
    pub max_proposals: usize,
    pub proposal_nms: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            lr: 0.02,
            weight_decay: 1e-4,
            seed: 0,
            rois_per_image: 24,
            iou_fg: 0.5,
            iou_bg: 0.5,
            feature_dim: 32,
            max_proposals: 40,
            proposal_nms: 0.8,
        }
    }
}

/// Per-ROI training target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrainingTarget {
    Foreground { class: usize, deltas: [f64; 4] },
    Background,
    Ignore,
}

/// Best-IoU assignment of proposals to labeled boxes.
///
/// `iou >= iou_fg` makes a foreground with that box's class; `iou < iou_bg`
/// makes background; anything between is ignored.
pub fn assign_targets(
    proposals: &[BoxF],
    labeled: &[(BoxF, usize)],
    iou_fg: f64,
    iou_bg: f64,
) -> Result<Vec<TrainingTarget>> {
    if iou_bg > iou_fg {
        return Err(Error::Config("iou_bg must not exceed iou_fg".into()));
    }
    Ok(proposals
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (i, (b, _)) in labeled.iter().enumerate() {
                let iou = box_iou(p, b);
                if best.map_or(true, |(_, v)| iou > v) {
                    best = Some((i, iou));
                }
            }
            match best {
                Some((i, iou)) if iou >= iou_fg => TrainingTarget::Foreground {
                    class: labeled[i].1,
                    deltas: encode_deltas(p, &labeled[i].0),
                },
                Some((_, iou)) if iou >= iou_bg => TrainingTarget::Ignore,
                _ => TrainingTarget::Background,
            }
        })
        .collect())
}

/// Standard box-delta parameterization `(dx, dy, dw, dh)`.
pub fn encode_deltas(proposal: &BoxF, target: &BoxF) -> [f64; 4] {
    let (pcx, pcy) = proposal.center();
    let (tcx, tcy) = target.center();
    [
        (tcx - pcx) / proposal.width().max(1e-9),
        (tcy - pcy) / proposal.height().max(1e-9),
        (target.width() / proposal.width().max(1e-9)).max(1e-9).ln(),
        (target.height() / proposal.height().max(1e-9)).max(1e-9).ln(),
    ]
}

pub fn decode_deltas(proposal: &BoxF, d: &[f64; 4]) -> BoxF {
    let (pcx, pcy) = proposal.center();
    let cx = pcx + d[0] * proposal.width();
    let cy = pcy + d[1] * proposal.height();
    let w = proposal.width() * d[2].clamp(-4.0, 4.0).exp();
    let h = proposal.height() * d[3].clamp(-4.0, 4.0).exp();
    BoxF::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

#[derive(Clone, Debug)]
pub struct DetectorParams {
    pub backbone: Vec<ConvLayer>,
    pub roi_w: Array2<f64>,
    pub roi_b: Array1<f64>,
    pub reg_w: Array2<f64>,
    pub reg_b: Array1<f64>,
    /// Frozen classifier rows (text embeddings); never receives gradient.
    pub class_embed: Array2<f64>,
    pub class_names: Vec<String>,
    /// Learnable background row appended to the classifier.
    pub bg_embed: Array1<f64>,
    pub rpn: RpnParams,
    pub max_proposals: usize,
    pub proposal_nms: f64,
}

impl DetectorParams {
    pub fn stride(&self) -> usize {
        self.backbone.iter().map(|c| c.stride).product()
    }

    pub fn n_classes(&self) -> usize {
        self.class_embed.nrows()
    }

    /// Hash of the frozen classifier rows only.
    pub fn classifier_hash(&self) -> String {
        let rows: Vec<f64> = self.class_embed.iter().copied().collect();
        crate::hash::hash_named_tensors([("class_embed", rows.as_slice())].into_iter())
    }

    /// Open-vocabulary swap: new classifier rows, all other weights shared.
    /// Only the logit layer's row count changes.
    pub fn with_class_embeddings(&self, embeddings: &ClassEmbeddings) -> Result<DetectorParams> {
        if embeddings.values.ncols() != self.class_embed.ncols() {
            return Err(Error::Shape(format!(
                "classifier width {} does not match embedding width {}",
                self.class_embed.ncols(),
                embeddings.values.ncols()
            )));
        }
        let mut out = self.clone();
        out.class_embed = embeddings.values.clone();
        out.class_names = embeddings.names.clone();
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> crate::ckpt::Checkpoint {
        let mut ckpt = self.rpn.to_checkpoint();
        for (i, layer) in self.backbone.iter().enumerate() {
            ckpt.insert(format!("detector/backbone{i}/w"), layer.weight.clone().into_dyn());
            ckpt.insert(format!("detector/backbone{i}/b"), layer.bias.clone().into_dyn());
            ckpt.insert(
                format!("detector/backbone{i}/meta"),
                ndarray::arr1(&[
                    layer.stride as f64,
                    layer.pad as f64,
                    if layer.relu { 1.0 } else { 0.0 },
                ])
                .into_dyn(),
            );
        }
        ckpt.insert("detector/roi/w", self.roi_w.clone().into_dyn());
        ckpt.insert("detector/roi/b", self.roi_b.clone().into_dyn());
        ckpt.insert("detector/reg/w", self.reg_w.clone().into_dyn());
        ckpt.insert("detector/reg/b", self.reg_b.clone().into_dyn());
        ckpt.insert("detector/class_embed", self.class_embed.clone().into_dyn());
        ckpt.insert("detector/bg_embed", self.bg_embed.clone().into_dyn());
        let names_blob: Vec<f64> = self
            .class_names
            .join("\n")
            .bytes()
            .map(|b| b as f64)
            .collect();
        ckpt.insert("detector/class_names_utf8", ndarray::Array1::from(names_blob).into_dyn());
        ckpt.insert(
            "detector/meta",
            ndarray::arr1(&[
                self.backbone.len() as f64,
                self.max_proposals as f64,
                self.proposal_nms,
            ])
            .into_dyn(),
        );
        ckpt
    }

    pub fn from_checkpoint(ckpt: &crate::ckpt::Checkpoint) -> Result<Self> {
        let meta = ckpt.get("detector/meta")?;
        let n_backbone = meta[[0]] as usize;
        let shape_err = |e: ndarray::ShapeError| Error::Shape(e.to_string());
        let mut backbone = Vec::with_capacity(n_backbone);
        for i in 0..n_backbone {
            let m = ckpt.get(&format!("detector/backbone{i}/meta"))?;
            backbone.push(ConvLayer {
                weight: ckpt
                    .get(&format!("detector/backbone{i}/w"))?
                    .clone()
                    .into_dimensionality()
                    .map_err(shape_err)?,
                bias: ckpt
                    .get(&format!("detector/backbone{i}/b"))?
                    .clone()
                    .into_dimensionality()
                    .map_err(shape_err)?,
                stride: m[[0]] as usize,
                pad: m[[1]] as usize,
                relu: m[[2]] != 0.0,
            });
        }
        let names_bytes: Vec<u8> = ckpt
            .get("detector/class_names_utf8")?
            .iter()
            .map(|&v| v as u8)
            .collect();
        let class_names = String::from_utf8(names_bytes)
            .map_err(|_| Error::Input("class name blob not UTF-8".into()))?
            .split('\n')
            .map(|s| s.to_string())
            .collect();
        Ok(Self {
            backbone,
            roi_w: ckpt.get("detector/roi/w")?.clone().into_dimensionality().map_err(shape_err)?,
            roi_b: ckpt.get("detector/roi/b")?.clone().into_dimensionality().map_err(shape_err)?,
            reg_w: ckpt.get("detector/reg/w")?.clone().into_dimensionality().map_err(shape_err)?,
            reg_b: ckpt.get("detector/reg/b")?.clone().into_dimensionality().map_err(shape_err)?,
            class_embed: ckpt
                .get("detector/class_embed")?
                .clone()
                .into_dimensionality()
                .map_err(shape_err)?,
            class_names,
            bg_embed: ckpt
                .get("detector/bg_embed")?
                .clone()
                .into_dimensionality()
                .map_err(shape_err)?,
            rpn: RpnParams::from_checkpoint(ckpt)?,
            max_proposals: meta[[1]] as usize,
            proposal_nms: meta[[2]],
        })
    }
}

fn init_params(
    cfg: &DetectorConfig,
    class_embeddings: &ClassEmbeddings,
    rpn: RpnParams,
) -> DetectorParams {
    let mut rng = rng::stream(cfg.seed, "detector/init");
    let d_feat = cfg.feature_dim;
    let d_embed = class_embeddings.values.ncols();
    DetectorParams {
        backbone: vec![
            ConvLayer {
                weight: conv_kernel_init(&mut rng, 16, 3, 3),
                bias: Array1::zeros(16),
                stride: 2,
                pad: 1,
                relu: true,
            },
            ConvLayer {
                weight: conv_kernel_init(&mut rng, 32, 16, 3),
                bias: Array1::zeros(32),
                stride: 2,
                pad: 1,
                relu: true,
            },
            ConvLayer {
                weight: conv_kernel_init(&mut rng, d_feat, 32, 1),
                bias: Array1::zeros(d_feat),
                stride: 1,
                pad: 0,
                relu: true,
            },
        ],
        roi_w: uniform_fan_in(&mut rng, d_feat, d_embed),
        roi_b: Array1::zeros(d_embed),
        reg_w: uniform_fan_in(&mut rng, d_feat, 4),
        reg_b: Array1::zeros(4),
        class_embed: class_embeddings.values.clone(),
        class_names: class_embeddings.names.clone(),
        bg_embed: Array1::zeros(d_embed),
        rpn,
        max_proposals: cfg.max_proposals,
        proposal_nms: cfg.proposal_nms,
    }
}

struct DetectorVars {
    kernels: Vec<Var>,
    biases: Vec<Var>,
    roi_w: Var,
    roi_b: Var,
    reg_w: Var,
    reg_b: Var,
    class_embed: Var,
    bg_embed: Var,
}

fn graph_leaves(params: &DetectorParams, g: &mut Graph) -> DetectorVars {
    DetectorVars {
        kernels: params
            .backbone
            .iter()
            .map(|c| g.leaf(c.weight.clone().into_dyn()))
            .collect(),
        biases: params
            .backbone
            .iter()
            .map(|c| g.leaf(c.bias.clone().into_dyn()))
            .collect(),
        roi_w: g.leaf2(params.roi_w.clone()),
        roi_b: g.leaf(params.roi_b.clone().insert_axis(ndarray::Axis(0)).into_dyn()),
        reg_w: g.leaf2(params.reg_w.clone()),
        reg_b: g.leaf(params.reg_b.clone().insert_axis(ndarray::Axis(0)).into_dyn()),
        class_embed: g.leaf2(params.class_embed.clone()),
        bg_embed: g.leaf2(
            params
                .bg_embed
                .clone()
                .insert_axis(ndarray::Axis(0))
                .to_owned(),
        ),
    }
}

/// Backbone feature rows (`P x D_feat`) for one image.
fn graph_feature_rows(
    params: &DetectorParams,
    g: &mut Graph,
    vars: &DetectorVars,
    pixels: &ndarray::Array3<f32>,
) -> Var {
    let (h, w, _) = pixels.dim();
    let chw = ndarray::Array3::from_shape_fn((3, h, w), |(c, y, x)| pixels[[y, x, c]] as f64);
    let mut cur = g.leaf(chw.into_dyn());
    for (i, layer) in params.backbone.iter().enumerate() {
        cur = g.conv2d(cur, vars.kernels[i], vars.biases[i], layer.stride, layer.pad);
        if layer.relu {
            cur = g.relu(cur);
        }
    }
    let shape = g.value(cur).shape().to_vec();
    let flat = g.reshape(cur, &[shape[0], shape[1] * shape[2]]);
    g.transpose(flat)
}

/// Average-pooling matrix mapping feature rows to one pooled row per ROI.
/// A box that rasterizes to nothing falls back to the cell under its center.
fn roi_pool_matrix(rois: &[BoxF], grid: (usize, usize), stride: usize) -> Array2<f64> {
    let (h, w) = grid;
    let mut pool = Array2::<f64>::zeros((rois.len(), h * w));
    for (r, roi) in rois.iter().enumerate() {
        let s = stride as f64;
        let gx1 = (roi.x1 / s).floor().max(0.0) as usize;
        let gy1 = (roi.y1 / s).floor().max(0.0) as usize;
        let gx2 = ((roi.x2 / s).ceil().max(0.0) as usize).min(w);
        let gy2 = ((roi.y2 / s).ceil().max(0.0) as usize).min(h);
        let mut cells = Vec::new();
        for y in gy1..gy2 {
            for x in gx1.min(w)..gx2 {
                cells.push(y * w + x);
            }
        }
        if cells.is_empty() {
            let (cx, cy) = roi.center();
            let x = ((cx / s).floor().max(0.0) as usize).min(w - 1);
            let y = ((cy / s).floor().max(0.0) as usize).min(h - 1);
            cells.push(y * w + x);
        }
        let weight = 1.0 / cells.len() as f64;
        for c in cells {
            pool[[r, c]] = weight;
        }
    }
    pool
}

/// Per-ROI classifier logits (`R x (K+1)`, background last) and box deltas
/// (`R x 4`), as graph values.
fn graph_roi_heads(
    g: &mut Graph,
    vars: &DetectorVars,
    feature_rows: Var,
    pool: Array2<f64>,
) -> (Var, Var) {
    let pool = g.leaf2(pool);
    let pooled = g.matmul(pool, feature_rows);
    let roi = g.matmul(pooled, vars.roi_w);
    let roi = g.add_row(roi, vars.roi_b);
    let classifier = g.stack_rows(&[vars.class_embed, vars.bg_embed]);
    let classifier_t = g.transpose(classifier);
    let logits = g.matmul(roi, classifier_t);
    let reg = g.matmul(pooled, vars.reg_w);
    let reg = g.add_row(reg, vars.reg_b);
    (logits, reg)
}

/// Classification + regression losses for one batch of ROIs.
///
/// `cls_logits` is `R x (K+1)` with the background logit last; `reg_pred` is
/// `R x 4`. Classification averages over foreground and background rows;
/// regression is mean absolute error over foreground rows only (0 when none).
pub fn selftrain_loss(
    cls_logits: &Array2<f64>,
    reg_pred: &Array2<f64>,
    targets: &[TrainingTarget],
) -> Result<(f64, f64, f64)> {
    if cls_logits.nrows() != targets.len() || reg_pred.nrows() != targets.len() {
        return Err(Error::Shape("prediction/target count mismatch".into()));
    }
    let mut g = Graph::new();
    let logits = g.leaf2(cls_logits.clone());
    let reg = g.leaf2(reg_pred.clone());
    let (loss_cls, loss_reg, _) = graph_selftrain_loss(&mut g, logits, reg, targets, cls_logits.ncols())?;
    Ok((
        g.scalar(loss_cls),
        loss_reg.map(|v| g.scalar(v)).unwrap_or(0.0),
        g.scalar(loss_cls) + loss_reg.map(|v| g.scalar(v)).unwrap_or(0.0),
    ))
}

fn graph_selftrain_loss(
    g: &mut Graph,
    cls_logits: Var,
    reg_pred: Var,
    targets: &[TrainingTarget],
    n_cols: usize,
) -> Result<(Var, Option<Var>, usize)> {
    let bg_class = n_cols - 1;
    let mut labels = vec![0usize; targets.len()];
    let mut valid = vec![false; targets.len()];
    let mut fg_rows = Vec::new();
    let mut fg_deltas = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        match t {
            TrainingTarget::Foreground { class, deltas } => {
                if *class >= bg_class {
                    return Err(Error::Input(format!("class {class} out of classifier range")));
                }
                labels[i] = *class;
                valid[i] = true;
                fg_rows.push(i);
                fg_deltas.push(*deltas);
            }
            TrainingTarget::Background => {
                labels[i] = bg_class;
                valid[i] = true;
            }
            TrainingTarget::Ignore => {}
        }
    }
    if !valid.iter().any(|v| *v) {
        return Err(Error::Degenerate("no usable ROI in batch".into()));
    }
    let loss_cls = g.cross_entropy_rows(cls_logits, &labels, &valid);
    let loss_reg = if fg_rows.is_empty() {
        None
    } else {
        let mut sel = Array2::<f64>::zeros((fg_rows.len(), targets.len()));
        let mut target = Array2::<f64>::zeros((fg_rows.len(), 4));
        for (row, (&src, deltas)) in fg_rows.iter().zip(&fg_deltas).enumerate() {
            sel[[row, src]] = 1.0;
            for k in 0..4 {
                target[[row, k]] = deltas[k];
            }
        }
        let sel = g.leaf2(sel);
        let fg_pred = g.matmul(sel, reg_pred);
        Some(g.l1_mean(fg_pred, target))
    };
    Ok((loss_cls, loss_reg, fg_rows.len()))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DetectorTrainLog {
    pub epoch_losses: Vec<f64>,
    pub classifier_hash_before: String,
    pub classifier_hash_after: String,
}

/// Self-train the detector on base ground truth plus pseudo labels.
pub fn train_detector(
    train: &LoadedSplit,
    pseudo: &[PseudoLabelRecord],
    class_embeddings: &ClassEmbeddings,
    rpn: RpnParams,
    cfg: &DetectorConfig,
) -> Result<(DetectorParams, DetectorTrainLog)> {
    let mut params = init_params(cfg, class_embeddings, rpn);
    let mut log_out = DetectorTrainLog {
        classifier_hash_before: params.classifier_hash(),
        ..Default::default()
    };
    let stride = params.stride();
    let n_classes = params.n_classes();

    // assemble per-image label sets and a fixed proposal pool
    struct ImagePlan {
        proposals: Vec<BoxF>,
        targets: Vec<TrainingTarget>,
    }
    let mut plans = Vec::with_capacity(train.scenes.len());
    for scene in &train.scenes {
        let mut labeled: Vec<(BoxF, usize)> = scene
            .annotation
            .boxes
            .iter()
            .zip(&scene.annotation.class_ids)
            .map(|(b, &c)| (b.to_f(), c))
            .collect();
        for record in pseudo.iter().filter(|r| r.image_id == scene.image.id) {
            for l in &record.labels {
                if l.category_index >= n_classes {
                    return Err(Error::Input(format!(
                        "pseudo label class {} out of range",
                        l.category_index
                    )));
                }
                labeled.push((
                    BoxF::new(l.bbox[0], l.bbox[1], l.bbox[2], l.bbox[3]),
                    l.category_index,
                ));
            }
        }

        let (h, w, _) = scene.image.pixels.dim();
        let mut proposals: Vec<BoxF> = rpn_propose(
            &params.rpn,
            &scene.image,
            cfg.max_proposals,
            cfg.proposal_nms,
        )
        .into_iter()
        .map(|p| p.bbox)
        .collect();
        // labeled boxes and jittered copies guarantee foreground ROIs
        let mut jitter = rng::stream(cfg.seed, &format!("detector/roi-jitter/{}", scene.image.id));
        for (b, _) in &labeled {
            proposals.push(*b);
            for _ in 0..2 {
                let jw = 0.15 * b.width();
                let jh = 0.15 * b.height();
                proposals.push(
                    BoxF::new(
                        b.x1 + jitter.gen_range(-jw..=jw),
                        b.y1 + jitter.gen_range(-jh..=jh),
                        b.x2 + jitter.gen_range(-jw..=jw),
                        b.y2 + jitter.gen_range(-jh..=jh),
                    )
                    .clip(w as f64, h as f64),
                );
            }
        }
        let targets = assign_targets(&proposals, &labeled, cfg.iou_fg, cfg.iou_bg)?;
        plans.push(ImagePlan { proposals, targets });
    }

    let mut batch_counter = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * step_decay(epoch, cfg.epochs);
        let mut order: Vec<usize> = (0..train.scenes.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &format!("detector/epoch/{epoch}")));

        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for &idx in &order {
            let scene = &train.scenes[idx];
            let plan = &plans[idx];
            let (h, w, _) = scene.image.pixels.dim();
            let grid = (h / stride, w / stride);

            // deterministic ROI sampling, foreground-biased
            let mut fg: Vec<usize> = Vec::new();
            let mut bg: Vec<usize> = Vec::new();
            for (i, t) in plan.targets.iter().enumerate() {
                match t {
                    TrainingTarget::Foreground { .. } => fg.push(i),
                    TrainingTarget::Background => bg.push(i),
                    TrainingTarget::Ignore => {}
                }
            }
            let mut sampler = rng::stream(cfg.seed, &format!("detector/sample/{epoch}/{idx}"));
            fg.shuffle(&mut sampler);
            bg.shuffle(&mut sampler);
            fg.truncate(cfg.rois_per_image / 2);
            bg.truncate(cfg.rois_per_image - fg.len());
            let chosen: Vec<usize> = fg.into_iter().chain(bg).collect();
            if chosen.is_empty() {
                continue;
            }
            let rois: Vec<BoxF> = chosen.iter().map(|&i| plan.proposals[i]).collect();
            let targets: Vec<TrainingTarget> = chosen.iter().map(|&i| plan.targets[i]).collect();

            let mut g = Graph::new();
            let vars = graph_leaves(&params, &mut g);
            let feature_rows = graph_feature_rows(&params, &mut g, &vars, &scene.image.pixels);
            let pool = roi_pool_matrix(&rois, grid, stride);
            let (logits, reg) = graph_roi_heads(&mut g, &vars, feature_rows, pool);
            let (loss_cls, loss_reg, _) =
                graph_selftrain_loss(&mut g, logits, reg, &targets, n_classes + 1)?;
            let loss = match loss_reg {
                Some(r) => g.add(loss_cls, r),
                None => loss_cls,
            };

            let loss_value = g.scalar(loss);
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    batch: batch_counter,
                    loss: loss_value,
                });
            }
            let grads = g.backward(loss);
            apply_detector_sgd(&mut params, &vars, &grads, lr, cfg.weight_decay);

            epoch_loss += loss_value;
            steps += 1;
            batch_counter += 1;
        }
        let mean = epoch_loss / steps.max(1) as f64;
        log::info!("detector epoch {epoch}: lr {lr:.4} loss {mean:.5}");
        log_out.epoch_losses.push(mean);
    }

    log_out.classifier_hash_after = params.classifier_hash();
    Ok((params, log_out))
}

/// Step decay mirroring a 12-epoch schedule with drops at epochs 8 and 11:
/// factor 0.1 at 2/3 and 11/12 of the run.
fn step_decay(epoch: usize, total: usize) -> f64 {
    let first = (total * 2) / 3;
    let second = (total * 11) / 12;
    if epoch >= second {
        0.01
    } else if epoch >= first {
        0.1
    } else {
        1.0
    }
}

fn apply_detector_sgd(
    params: &mut DetectorParams,
    vars: &DetectorVars,
    grads: &crate::graph::Grads,
    lr: f64,
    weight_decay: f64,
) {
    for (i, layer) in params.backbone.iter_mut().enumerate() {
        if let Some(gk) = grads.get(vars.kernels[i]) {
            let gk = gk.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            ndarray::Zip::from(&mut layer.weight)
                .and(&gk)
                .for_each(|w, g| *w -= lr * (g + weight_decay * *w));
        }
        if let Some(gb) = grads.get(vars.biases[i]) {
            let gb = gb.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            ndarray::Zip::from(&mut layer.bias)
                .and(&gb)
                .for_each(|w, g| *w -= lr * g);
        }
    }
    let step2 = |dst: &mut Array2<f64>, v: Var| {
        if let Some(g) = grads.get(v) {
            let g = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            ndarray::Zip::from(dst)
                .and(&g)
                .for_each(|w, gr| *w -= lr * (gr + weight_decay * *w));
        }
    };
    let step1 = |dst: &mut Array1<f64>, v: Var| {
        if let Some(g) = grads.get(v) {
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            ndarray::Zip::from(dst)
                .and(&g2.row(0))
                .for_each(|w, gr| *w -= lr * gr);
        }
    };
    step2(&mut params.roi_w, vars.roi_w);
    step1(&mut params.roi_b, vars.roi_b);
    step2(&mut params.reg_w, vars.reg_w);
    step1(&mut params.reg_b, vars.reg_b);
    // background row learns; the classifier rows stay frozen
    if let Some(g) = grads.get(vars.bg_embed) {
        let g = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        ndarray::Zip::from(&mut params.bg_embed)
            .and(&g.row(0))
            .for_each(|w, gr| *w -= lr * gr);
    }
}

/// Greedy per-class non-maximum suppression; input order breaks score ties.
pub fn greedy_nms(detections: &[Detection], nms_iou: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for &i in &order {
        let d = &detections[i];
        let suppressed = kept.iter().any(|k| {
            k.category_index == d.category_index
                && k.image_id == d.image_id
                && box_iou(&k.bbox, &d.bbox) >= nms_iou
        });
        if !suppressed {
            kept.push(d.clone());
        }
    }
    kept
}

/// Detect objects in one image: propose, classify, regress, NMS.
pub fn infer_detect(
    params: &DetectorParams,
    image: &SceneImage,
    score_thresh: f64,
    nms_iou: f64,
) -> Vec<Detection> {
    let proposals = rpn_propose(&params.rpn, image, params.max_proposals, params.proposal_nms);
    if proposals.is_empty() {
        return vec![];
    }
    let (h, w, _) = image.pixels.dim();
    let stride = params.stride();
    let grid = (h / stride, w / stride);

    let mut g = Graph::new();
    let vars = graph_leaves(params, &mut g);
    let feature_rows = graph_feature_rows(params, &mut g, &vars, &image.pixels);
    let rois: Vec<BoxF> = proposals.iter().map(|p| p.bbox).collect();
    let pool = roi_pool_matrix(&rois, grid, stride);
    let (logits, reg) = graph_roi_heads(&mut g, &vars, feature_rows, pool);
    let probs = g.softmax_rows(logits);
    let probs = g.value(probs).clone();
    let reg = g.value(reg).clone();

    let n_classes = params.n_classes();
    let mut candidates = Vec::new();
    for (r, roi) in rois.iter().enumerate() {
        let deltas = [reg[[r, 0]], reg[[r, 1]], reg[[r, 2]], reg[[r, 3]]];
        let refined = decode_deltas(roi, &deltas).clip(w as f64, h as f64);
        if refined.width() < 1e-6 || refined.height() < 1e-6 {
            continue;
        }
        for c in 0..n_classes {
            let score = probs[[r, c]];
            if score >= score_thresh {
                candidates.push(Detection {
                    image_id: image.id,
                    bbox: refined,
                    category_index: c,
                    score,
                });
            }
        }
    }
    greedy_nms(&candidates, nms_iou)
}

/// Detections-file codec: one JSON object per line.
pub fn write_detections_jsonl(path: &std::path::Path, detections: &[Detection]) -> Result<()> {
    #[derive(Serialize)]
    struct Line {
        image_id: u32,
        bbox: [f64; 4],
        category_index: usize,
        score: f64,
    }
    let mut out = String::new();
    for d in detections {
        let line = Line {
            image_id: d.image_id,
            bbox: [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2],
            category_index: d.category_index,
            score: d.score,
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(std::fs::write(path, out)?)
}

pub fn read_detections_jsonl(path: &std::path::Path) -> Result<Vec<Detection>> {
    #[derive(Deserialize)]
    struct Line {
        image_id: u32,
        bbox: [f64; 4],
        category_index: usize,
        score: f64,
    }
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let line: Line = serde_json::from_str(l)?;
            Ok(Detection {
                image_id: line.image_id,
                bbox: BoxF::new(line.bbox[0], line.bbox[1], line.bbox[2], line.bbox[3]),
                category_index: line.category_index,
                score: line.score,
            })
        })
        .collect()
}
