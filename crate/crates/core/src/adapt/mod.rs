//! The fine-grained prompt adapting stage.
//!
//! A pseudo dense supervision map is built once from the frozen model's own
//! score map (hard per-pixel argmax by default, soft distributions behind a
//! flag); then only the prompt modules are optimized under a per-pixel
//! cross-entropy between the prompted score map and those targets. Encoder
//! weights never change — the stage verifies that by hashing them.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics;
use crate::prompts::{
    graph_prompted_class_rows, graph_visual_prompt_rows, prompted_class_embeddings,
    visual_prompt_forward, TextPromptState, VisualPromptState,
};
use crate::rng;
use crate::synthdata::{CategorySet, LoadedSplit, SceneImage};
use crate::vlm::{
    class_embeddings, dense_score_map, encode_image_dense, encode_image_dense_raw,
    ClassEmbeddings, DenseScoreMap, EncoderParams,
};
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Per-pixel supervision labels over the combined category set.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTargetMap {
    pub labels: Vec<usize>,
    pub valid: Vec<bool>,
    pub grid: (usize, usize),
}

/// Hard targets: per-pixel argmax, ties to the lowest category index.
pub fn build_target_map(s: &DenseScoreMap) -> DenseTargetMap {
    let labels = s
        .values
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (i, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            best
        })
        .collect();
    DenseTargetMap {
        labels,
        valid: vec![true; s.values.nrows()],
        grid: s.grid,
    }
}

/// Mean cross-entropy over valid pixels between `softmax(S_hat / temperature)`
/// rows and the target labels.
pub fn dense_alignment_loss(
    s_hat: &DenseScoreMap,
    target: &DenseTargetMap,
    temperature: f64,
) -> Result<f64> {
    if temperature <= 0.0 {
        return Err(Error::Input("temperature must be positive".into()));
    }
    if s_hat.values.nrows() != target.labels.len() || target.labels.len() != target.valid.len() {
        return Err(Error::Shape(format!(
            "score rows {} vs target labels {}",
            s_hat.values.nrows(),
            target.labels.len()
        )));
    }
    if target
        .labels
        .iter()
        .any(|&l| l >= s_hat.values.ncols())
    {
        return Err(Error::Input("target label out of category range".into()));
    }
    if !target.valid.iter().any(|v| *v) {
        return Err(Error::Degenerate("no valid pixel in target map".into()));
    }
    let mut g = Graph::new();
    let logits = g.leaf2(s_hat.values.clone());
    let scaled = g.scale(logits, 1.0 / temperature);
    let loss = g.cross_entropy_rows(scaled, &target.labels, &target.valid);
    Ok(g.scalar(loss))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub lr_text: f64,
    pub lr_visual: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub seed: u64,
    pub use_text_prompt: bool,
    pub use_visual_prompt: bool,
    /// Hand-crafted template wrapped around category names (`{}` slot).
    pub hand_template: Option<String>,
    pub layout_before: usize,
    pub layout_total: usize,
    /// Soft distribution targets instead of hard argmax.
    pub soft_targets: bool,
    /// Epoch window in which the text group steps (end exclusive; usize::MAX
    /// means "until the last epoch"). Staging the two groups keeps the
    /// expressive fusion layer from erasing the class-embedding drift.
    pub text_from_epoch: usize,
    pub text_until_epoch: usize,
    /// Epoch window in which the visual group steps.
    pub visual_from_epoch: usize,
    pub visual_until_epoch: usize,
    /// Similarity threshold echoed into the report's thresholded mIoU.
    pub report_delta: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr_text: 1e-1,
            lr_visual: 1e-5,
            batch_size: 8,
            temperature: 0.07,
            seed: 0,
            use_text_prompt: true,
            use_visual_prompt: true,
            hand_template: None,
            layout_before: 1,
            layout_total: 1,
            soft_targets: false,
            text_from_epoch: 0,
            text_until_epoch: usize::MAX,
            visual_from_epoch: 0,
            visual_until_epoch: usize::MAX,
            report_delta: 0.6,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_text <= 0.0 || self.lr_visual <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        crate::prompts::PromptLayout::new(self.layout_before, self.layout_total)?;
        Ok(())
    }

    pub fn ablation_mode(&self) -> String {
        let mut parts = Vec::new();
        if self.hand_template.is_some() {
            parts.push("hand");
        }
        if self.use_text_prompt {
            parts.push("text");
        }
        if self.use_visual_prompt {
            parts.push("visual");
        }
        if parts.is_empty() {
            "none".into()
        } else if parts == ["text", "visual"] {
            "both".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub miou_novel: Option<f64>,
    pub miou_base: Option<f64>,
    /// Novel mIoU with the class-presence set thresholded at delta instead of argmax.
    pub miou_novel_delta: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdaptReport {
    pub ablation_mode: String,
    pub epochs: Vec<EpochStats>,
    pub encoder_hash_before: String,
    pub encoder_hash_after: String,
}

impl AdaptReport {
    /// One JSON object per epoch line.
    pub fn write_jsonl(&self, path: &std::path::Path) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            epoch: usize,
            loss: f64,
            miou_novel: Option<f64>,
            miou_base: Option<f64>,
            miou_novel_delta: Option<f64>,
            ablation_mode: &'a str,
        }
        let mut out = String::new();
        for e in &self.epochs {
            let line = Line {
                epoch: e.epoch,
                loss: e.loss,
                miou_novel: e.miou_novel,
                miou_base: e.miou_base,
                miou_novel_delta: e.miou_novel_delta,
                ablation_mode: &self.ablation_mode,
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(std::fs::write(path, out)?)
    }
}

/// The adapted model as a bundle of frozen encoder plus optional prompts.
pub struct PromptedVlm<'a> {
    pub encoder: &'a EncoderParams,
    pub text_prompt: Option<&'a TextPromptState>,
    pub visual_prompt: Option<&'a VisualPromptState>,
    pub hand_template: Option<&'a str>,
}

impl PromptedVlm<'_> {
    /// Key-side class embeddings (the prompted text tower).
    pub fn key_embeddings(&self, categories: &CategorySet) -> Result<ClassEmbeddings> {
        match self.text_prompt {
            Some(tp) => {
                prompted_class_embeddings(tp, self.encoder, categories, self.hand_template)
            }
            None => class_embeddings(self.encoder, categories, self.hand_template),
        }
    }

    /// Value-side class embeddings (the plain text tower, bare names).
    pub fn value_embeddings(&self, categories: &CategorySet) -> Result<ClassEmbeddings> {
        class_embeddings(self.encoder, categories, None)
    }

    /// The prompted dense score map for one image.
    pub fn score_map(&self, image: &SceneImage, categories: &CategorySet) -> Result<DenseScoreMap> {
        let keys = self.key_embeddings(categories)?;
        let values = self.value_embeddings(categories)?;
        self.score_map_with(image, &keys, &values)
    }

    /// Same, with precomputed embeddings (they are image-independent).
    ///
    /// The visual prompt attends from the raw (unnormalized) pixel rows;
    /// normalization applies to whatever embedding reaches the score map.
    pub fn score_map_with(
        &self,
        image: &SceneImage,
        keys: &ClassEmbeddings,
        values: &ClassEmbeddings,
    ) -> Result<DenseScoreMap> {
        let f_out = match self.visual_prompt {
            Some(vp) => {
                let raw = encode_image_dense_raw(self.encoder, image)?;
                let mut fused = visual_prompt_forward(vp, &raw, keys, values)?;
                if self.encoder.normalize {
                    normalize_rows_in_place(&mut fused.values);
                }
                fused
            }
            None => encode_image_dense(self.encoder, image)?,
        };
        dense_score_map(&f_out, keys)
    }
}

fn normalize_rows_in_place(values: &mut Array2<f64>) {
    for mut row in values.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm >= 1e-12 {
            row.mapv_inplace(|v| v / norm);
        }
    }
}

/// Grid argmax labels of a score map (category index per cell).
pub fn argmax_label_grid(s: &DenseScoreMap) -> Array2<u16> {
    let target = build_target_map(s);
    Array2::from_shape_vec(s.grid, target.labels.iter().map(|&l| l as u16).collect())
        .expect("grid shape")
}

/// Optimize only the prompt modules under dense self-supervision.
///
/// Targets come from the frozen model with bare category names, computed once
/// before the first epoch. Returns updated prompt states and the per-epoch
/// report; encoder weights are hash-checked before and after.
pub fn run_adapt(
    encoder: &EncoderParams,
    text_prompt: TextPromptState,
    visual_prompt: VisualPromptState,
    train: &LoadedSplit,
    heldout: &LoadedSplit,
    cfg: &AdaptConfig,
) -> Result<(TextPromptState, VisualPromptState, AdaptReport)> {
    cfg.validate()?;
    if !encoder.frozen {
        return Err(Error::Input("encoder must be frozen before adapting".into()));
    }
    let mut text_prompt = text_prompt;
    let mut visual_prompt = visual_prompt;
    let categories = &train.categories;
    let encoder_hash_before = encoder.weight_hash();

    // frozen-teacher targets from the plain model, cached across epochs;
    // raw features cached too since the encoder never changes
    let plain = class_embeddings(encoder, categories, None)?;
    let mut features_raw: Vec<Array2<f64>> = Vec::with_capacity(train.scenes.len());
    let mut hard_targets: Vec<DenseTargetMap> = Vec::with_capacity(train.scenes.len());
    let mut soft_targets: Vec<Array2<f64>> = Vec::new();
    for scene in &train.scenes {
        let f = encode_image_dense(encoder, &scene.image)?;
        let s = dense_score_map(&f, &plain)?;
        hard_targets.push(build_target_map(&s));
        if cfg.soft_targets {
            soft_targets.push(softmax_rows(&s.values, cfg.temperature));
        }
        let raw = encode_image_dense_raw(encoder, &scene.image)?;
        features_raw.push(raw.values);
    }

    let bare_sequences: Vec<Vec<usize>> = categories
        .names()
        .iter()
        .map(|n| encoder.vocab.tokenize_category(n))
        .collect::<Result<_>>()?;
    let key_sequences: Vec<Vec<usize>> = match &cfg.hand_template {
        Some(t) => categories
            .names()
            .iter()
            .map(|n| encoder.vocab.tokenize_template(t, n))
            .collect::<Result<_>>()?,
        None => bare_sequences.clone(),
    };

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut batch_counter = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.scenes.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &format!("adapt/epoch/{epoch}")));

        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let enc_vars = encoder.graph_leaves(&mut g);
            let tp_vars = text_prompt.graph_leaves(&mut g);
            let vp_vars = visual_prompt.graph_leaves(&mut g);

            let keys = if cfg.use_text_prompt {
                graph_prompted_class_rows(
                    &mut g,
                    &text_prompt,
                    &tp_vars,
                    encoder,
                    &enc_vars,
                    &key_sequences,
                )?
            } else {
                encoder.graph_text_rows(&mut g, &enc_vars, &key_sequences)?
            };
            let values = encoder.graph_text_rows(&mut g, &enc_vars, &bare_sequences)?;
            let keys_t = g.transpose(keys);

            let mut per_image = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let f_raw = g.leaf2(features_raw[idx].clone());
                let rows = if cfg.use_visual_prompt {
                    let fused = graph_visual_prompt_rows(
                        &mut g,
                        &visual_prompt,
                        &vp_vars,
                        f_raw,
                        keys,
                        values,
                    );
                    if encoder.normalize {
                        g.l2_norm_rows(fused)
                    } else {
                        fused
                    }
                } else if encoder.normalize {
                    g.l2_norm_rows(f_raw)
                } else {
                    f_raw
                };
                let scores = g.matmul(rows, keys_t);
                let logits = g.scale(scores, 1.0 / cfg.temperature);
                let ce = if cfg.soft_targets {
                    g.soft_cross_entropy_rows(logits, soft_targets[idx].clone())
                } else {
                    let t = &hard_targets[idx];
                    g.cross_entropy_rows(logits, &t.labels, &t.valid)
                };
                per_image.push(ce);
            }
            let mut total = per_image[0];
            for &v in &per_image[1..] {
                total = g.add(total, v);
            }
            let loss = g.scale(total, 1.0 / chunk.len() as f64);

            let loss_value = g.scalar(loss);
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    batch: batch_counter,
                    loss: loss_value,
                });
            }
            let grads = g.backward(loss);
            if cfg.use_text_prompt
                && epoch >= cfg.text_from_epoch
                && epoch < cfg.text_until_epoch
            {
                text_prompt.apply_sgd(&tp_vars, &grads, cfg.lr_text);
            }
            if cfg.use_visual_prompt
                && epoch >= cfg.visual_from_epoch
                && epoch < cfg.visual_until_epoch
            {
                visual_prompt.apply_sgd(&vp_vars, &grads, cfg.lr_visual);
            }
            epoch_loss += loss_value;
            n_batches += 1;
            batch_counter += 1;
        }

        let loss = epoch_loss / n_batches.max(1) as f64;
        let stats = heldout_miou(
            encoder,
            &text_prompt,
            &visual_prompt,
            cfg,
            heldout,
            epoch,
            loss,
        )?;
        log::info!(
            "adapt[{}] epoch {epoch}: loss {loss:.5} miou_novel {:?}",
            cfg.ablation_mode(),
            stats.miou_novel
        );
        epochs.push(stats);
    }

    let report = AdaptReport {
        ablation_mode: cfg.ablation_mode(),
        epochs,
        encoder_hash_before,
        encoder_hash_after: encoder.weight_hash(),
    };
    Ok((text_prompt, visual_prompt, report))
}

fn softmax_rows(values: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = values.mapv(|v| v / temperature);
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn heldout_miou(
    encoder: &EncoderParams,
    text_prompt: &TextPromptState,
    visual_prompt: &VisualPromptState,
    cfg: &AdaptConfig,
    heldout: &LoadedSplit,
    epoch: usize,
    loss: f64,
) -> Result<EpochStats> {
    let vlm = PromptedVlm {
        encoder,
        text_prompt: cfg.use_text_prompt.then_some(text_prompt),
        visual_prompt: cfg.use_visual_prompt.then_some(visual_prompt),
        hand_template: cfg.hand_template.as_deref(),
    };
    let categories = &heldout.categories;
    let keys = vlm.key_embeddings(categories)?;
    let values = vlm.value_embeddings(categories)?;
    let novel = categories.novel_indices();
    let base = categories.base_indices();

    let mut novel_accum = MeanAccum::default();
    let mut base_accum = MeanAccum::default();
    let mut delta_accum = MeanAccum::default();
    for scene in &heldout.scenes {
        let s = vlm.score_map_with(&scene.image, &keys, &values)?;
        let stride = encoder.stride();
        let gt_grid = metrics::downsample_mask(&scene.annotation.dense_mask, stride);
        let pred = argmax_label_grid(&s);
        novel_accum.push(metrics::mean_iou_dense(&pred, &gt_grid, &novel));
        base_accum.push(metrics::mean_iou_dense(&pred, &gt_grid, &base));

        // delta-thresholded variant: class-presence sets from normalized columns
        let normalized = s.min_max_normalized();
        let thresh_pred = threshold_label_grid(&normalized, &novel, cfg.report_delta);
        delta_accum.push(metrics::mean_iou_dense(&thresh_pred, &gt_grid, &novel));
    }
    Ok(EpochStats {
        epoch,
        loss,
        miou_novel: novel_accum.mean(),
        miou_base: base_accum.mean(),
        miou_novel_delta: delta_accum.mean(),
    })
}

/// Label grid where a cell takes the highest-scoring split class whose
/// normalized score clears `delta`, background otherwise.
fn threshold_label_grid(s: &DenseScoreMap, classes: &[usize], delta: f64) -> Array2<u16> {
    let mut out = Array2::from_elem(s.grid, crate::synthdata::codec::BACKGROUND);
    for (p, row) in s.values.rows().into_iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for &c in classes {
            let v = row[c];
            if v >= delta && best.map_or(true, |(_, b)| v > b) {
                best = Some((c, v));
            }
        }
        if let Some((c, _)) = best {
            out[[p / s.grid.1, p % s.grid.1]] = c as u16;
        }
    }
    out
}

#[derive(Default)]
struct MeanAccum {
    sum: f64,
    n: usize,
}

impl MeanAccum {
    fn push(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.sum += v;
            self.n += 1;
        }
    }

    fn mean(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}
