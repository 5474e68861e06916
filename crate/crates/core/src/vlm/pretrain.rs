//! Global contrastive pretraining of the toy VLM.
//!
//! Each training image is paired with a template sentence for its dominant
//! category; the loss is symmetric InfoNCE between mean-pooled image
//! embeddings and sentence embeddings. Plain SGD, single-threaded, fully
//! deterministic under the named seed streams.

use super::{EncoderParams, EncoderVars, ConvLayer, Vocabulary};
use crate::error::{Error, Result};
use crate::graph::{conv_kernel_init, randn2, uniform_fan_in, Graph, Var};
use crate::rng;
use crate::synthdata::{LoadedSplit, SceneImage};
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub temperature: f64,
    /// Horizontal-flip augmentation (all shape classes are mirror-symmetric).
    pub flip_augment: bool,
    /// Mean raw per-pixel feature norm after calibration. Scoring normalizes
    /// rows, so this only sets the working scale of the cross-attention
    /// logits in the visual prompt.
    pub feature_norm: f64,
    pub embed_dim: usize,
    pub normalize: bool,
    pub template: String,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 3e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            temperature: 0.2,
            flip_augment: true,
            feature_norm: 16.0,
            embed_dim: 64,
            normalize: true,
            template: "a photo of a {}".into(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Fresh encoder weights for a category vocabulary.
pub fn init_encoder(cfg: &PretrainConfig, category_names: &[String]) -> EncoderParams {
    let vocab = Vocabulary::for_categories(category_names, &cfg.template);
    let mut rng = rng::stream(cfg.seed, "pretrain/init");
    let d = cfg.embed_dim;
    let conv = vec![
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
            weight: conv_kernel_init(&mut rng, d, 32, 1),
            bias: Array1::zeros(d),
            stride: 1,
            pad: 0,
            relu: false,
        },
    ];
    let token_embed = randn2(&mut rng, vocab.len(), d, 0.02);
    let text_w = uniform_fan_in(&mut rng, d, d);
    EncoderParams {
        embed_dim: d,
        conv,
        token_embed,
        text_w,
        text_b: Array1::zeros(d),
        vocab,
        normalize: cfg.normalize,
        frozen: false,
    }
}

/// Build the symmetric InfoNCE loss for one batch of (image, sentence) pairs.
pub fn infonce_graph(
    params: &EncoderParams,
    g: &mut Graph,
    vars: &EncoderVars,
    images: &[&SceneImage],
    sequences: &[Vec<usize>],
    temperature: f64,
) -> Result<Var> {
    if images.len() != sequences.len() || images.len() < 2 {
        return Err(Error::Input("contrastive batch needs >= 2 pairs".into()));
    }
    let mut pooled = Vec::with_capacity(images.len());
    for image in images {
        pooled.push(params.graph_image_pooled(g, vars, &image.pixels));
    }
    let img = g.stack_rows(&pooled);
    let txt = params.graph_text_rows(g, vars, sequences)?;
    let txt_t = g.transpose(txt);
    let sims = g.matmul(img, txt_t);
    let logits = g.scale(sims, 1.0 / temperature);

    let b = images.len();
    let targets: Vec<usize> = (0..b).collect();
    let valid = vec![true; b];
    let ce_i2t = g.cross_entropy_rows(logits, &targets, &valid);
    let logits_t = g.transpose(logits);
    let ce_t2i = g.cross_entropy_rows(logits_t, &targets, &valid);
    let total = g.add(ce_i2t, ce_t2i);
    Ok(g.scale(total, 0.5))
}

/// Pretrain on the train split. Returns frozen params and per-epoch losses.
pub fn pretrain_contrastive(
    train: &LoadedSplit,
    cfg: &PretrainConfig,
) -> Result<(EncoderParams, PretrainReport)> {
    let mut params = init_encoder(cfg, train.categories.names());

    // usable scenes: those with a dominant (visible) category
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (i, scene) in train.scenes.iter().enumerate() {
        if let Some(cat) = scene.annotation.dominant_category() {
            pairs.push((i, cat));
        }
    }
    let distinct: std::collections::BTreeSet<usize> = pairs.iter().map(|(_, c)| *c).collect();
    if distinct.len() < 2 {
        return Err(Error::Config(
            "pretraining needs at least 2 categories present in the train split".into(),
        ));
    }

    let sequences: Vec<Vec<usize>> = train
        .categories
        .names()
        .iter()
        .map(|name| params.vocab.tokenize_template(&cfg.template, name))
        .collect::<Result<_>>()?;

    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut adam = AdamState::zeros(&params);
    let mut batch_counter = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order = pairs.clone();
        order.shuffle(&mut rng::stream(cfg.seed, &format!("pretrain/epoch/{epoch}")));

        let mut flip_rng = rng::stream(cfg.seed, &format!("pretrain/flip/{epoch}"));
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut g = Graph::new();
            let vars = params.graph_leaves(&mut g);
            let flipped: Vec<SceneImage> = chunk
                .iter()
                .map(|&(i, _)| {
                    let image = &train.scenes[i].image;
                    if cfg.flip_augment && flip_rng.gen_bool(0.5) {
                        SceneImage {
                            id: image.id,
                            pixels: flip_horizontal(&image.pixels),
                        }
                    } else {
                        image.clone()
                    }
                })
                .collect();
            let images: Vec<&SceneImage> = flipped.iter().collect();
            let seqs: Vec<Vec<usize>> =
                chunk.iter().map(|&(_, c)| sequences[c].clone()).collect();
            let loss = infonce_graph(&params, &mut g, &vars, &images, &seqs, cfg.temperature)?;
            let loss_value = g.scalar(loss);
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    batch: batch_counter,
                    loss: loss_value,
                });
            }
            let grads = g.backward(loss);
            apply_encoder_adam(&mut params, &mut adam, &vars, &grads, cfg);

            epoch_loss += loss_value;
            n_batches += 1;
            batch_counter += 1;
        }
        let mean_loss = epoch_loss / n_batches.max(1) as f64;
        log::info!("pretrain epoch {epoch}: loss {mean_loss:.5}");
        losses.push(mean_loss);
    }

    calibrate_feature_scale(&mut params, train, cfg.feature_norm)?;
    params.frozen = true;
    Ok((params, PretrainReport { epoch_losses: losses }))
}

/// Rescale the final projection layer so the mean raw per-pixel feature norm
/// over the train split hits `target`. A single frozen scalar folded into the
/// encoder: row-normalized scoring is unaffected.
fn calibrate_feature_scale(
    params: &mut EncoderParams,
    train: &LoadedSplit,
    target: f64,
) -> crate::error::Result<()> {
    if target <= 0.0 {
        return Ok(());
    }
    let sample = train.scenes.len().min(32);
    let mut total = 0.0;
    let mut count = 0usize;
    for scene in train.scenes.iter().take(sample) {
        let raw = super::encode_image_dense_raw(params, &scene.image)?;
        for row in raw.values.rows() {
            total += row.iter().map(|v| v * v).sum::<f64>().sqrt();
            count += 1;
        }
    }
    let mean = total / count.max(1) as f64;
    if mean < 1e-9 {
        return Ok(());
    }
    let scale = target / mean;
    if let Some(last) = params.conv.last_mut() {
        last.weight.mapv_inplace(|w| w * scale);
        last.bias.mapv_inplace(|b| b * scale);
    }
    Ok(())
}

/// Adam state for one tensor.
struct AdamSlot<D: ndarray::Dimension> {
    m: ndarray::Array<f64, D>,
    v: ndarray::Array<f64, D>,
}

impl<D: ndarray::Dimension> AdamSlot<D> {
    fn zeros(dim: D) -> Self {
        Self {
            m: ndarray::Array::zeros(dim.clone()),
            v: ndarray::Array::zeros(dim),
        }
    }

    fn step(
        &mut self,
        param: &mut ndarray::Array<f64, D>,
        grad: &ndarray::ArrayView<f64, D>,
        lr: f64,
        beta1: f64,
        beta2: f64,
        t: usize,
    ) {
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        ndarray::Zip::from(&mut self.m)
            .and(grad)
            .for_each(|m, g| *m = beta1 * *m + (1.0 - beta1) * g);
        ndarray::Zip::from(&mut self.v)
            .and(grad)
            .for_each(|v, g| *v = beta2 * *v + (1.0 - beta2) * g * g);
        ndarray::Zip::from(param)
            .and(&self.m)
            .and(&self.v)
            .for_each(|w, m, v| {
                let mh = m / bc1;
                let vh = v / bc2;
                *w -= lr * mh / (vh.sqrt() + 1e-8);
            });
    }
}

struct AdamState {
    conv_w: Vec<AdamSlot<ndarray::Ix4>>,
    conv_b: Vec<AdamSlot<ndarray::Ix1>>,
    token_embed: AdamSlot<ndarray::Ix2>,
    text_w: AdamSlot<ndarray::Ix2>,
    text_b: AdamSlot<ndarray::Ix1>,
    t: usize,
}

impl AdamState {
    fn zeros(params: &EncoderParams) -> Self {
        Self {
            conv_w: params
                .conv
                .iter()
                .map(|c| AdamSlot::zeros(c.weight.raw_dim()))
                .collect(),
            conv_b: params
                .conv
                .iter()
                .map(|c| AdamSlot::zeros(c.bias.raw_dim()))
                .collect(),
            token_embed: AdamSlot::zeros(params.token_embed.raw_dim()),
            text_w: AdamSlot::zeros(params.text_w.raw_dim()),
            text_b: AdamSlot::zeros(params.text_b.raw_dim()),
            t: 0,
        }
    }
}

fn apply_encoder_adam(
    params: &mut EncoderParams,
    state: &mut AdamState,
    vars: &EncoderVars,
    grads: &crate::graph::Grads,
    cfg: &PretrainConfig,
) {
    state.t += 1;
    let (lr, b1, b2, t) = (cfg.lr, cfg.adam_beta1, cfg.adam_beta2, state.t);
    for (i, layer) in params.conv.iter_mut().enumerate() {
        if let Some(gk) = grads.get(vars.conv_kernels[i]) {
            let gk = gk.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            state.conv_w[i].step(&mut layer.weight, &gk, lr, b1, b2, t);
        }
        if let Some(gb) = grads.get(vars.conv_biases[i]) {
            let gb = gb.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            state.conv_b[i].step(&mut layer.bias, &gb, lr, b1, b2, t);
        }
    }
    if let Some(g) = grads.get(vars.token_embed) {
        let g = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        state.token_embed.step(&mut params.token_embed, &g, lr, b1, b2, t);
    }
    if let Some(g) = grads.get(vars.text_w) {
        let g = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        state.text_w.step(&mut params.text_w, &g, lr, b1, b2, t);
    }
    if let Some(g) = grads.get(vars.text_b) {
        let g = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let g1 = g.row(0);
        state.text_b.step(&mut params.text_b, &g1, lr, b1, b2, t);
    }
}

fn flip_horizontal(pixels: &ndarray::Array3<f32>) -> ndarray::Array3<f32> {
    let (h, w, c) = pixels.dim();
    ndarray::Array3::from_shape_fn((h, w, c), |(y, x, ch)| pixels[[y, w - 1 - x, ch]])
}

/// Top-1 retrieval accuracy of base-class template sentences on a split.
pub fn retrieval_top1(
    params: &EncoderParams,
    split: &LoadedSplit,
    template: &str,
) -> Result<Option<f64>> {
    let base = split.categories.base_indices();
    let sequences: Vec<Vec<usize>> = base
        .iter()
        .map(|&c| params.vocab.tokenize_template(template, split.categories.name(c)))
        .collect::<Result<_>>()?;
    let texts = super::encode_text(params, &sequences)?;

    let mut correct = 0usize;
    let mut total = 0usize;
    for scene in &split.scenes {
        let Some(dom) = scene.annotation.dominant_category() else {
            continue;
        };
        let Some(rank) = base.iter().position(|&c| c == dom) else {
            continue; // dominant category is novel: not part of base retrieval
        };
        let emb = super::global_image_embedding(params, &scene.image)?;
        let mut best = 0usize;
        let mut best_sim = f64::NEG_INFINITY;
        for (k, row) in texts.values.rows().into_iter().enumerate() {
            let sim: f64 = row.iter().zip(emb.iter()).map(|(a, b)| a * b).sum();
            if sim > best_sim {
                best_sim = sim;
                best = k;
            }
        }
        if best == rank {
            correct += 1;
        }
        total += 1;
    }
    if total == 0 {
        return Ok(None);
    }
    Ok(Some(correct as f64 / total as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_scene, DatasetConfig, LoadedScene};

    fn tiny_split(n: usize) -> LoadedSplit {
        let cfg = DatasetConfig::reference();
        let categories = cfg.category_set().unwrap();
        let scenes = (0..n)
            .map(|i| {
                let (image, annotation) =
                    generate_scene(&cfg, rng::derive_seed(3, &format!("t/{i}")), i as u32).unwrap();
                LoadedScene { image, annotation }
            })
            .collect();
        LoadedSplit { categories, scenes }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let split = tiny_split(6);
        let cfg = PretrainConfig {
            epochs: 0,
            embed_dim: 8,
            ..Default::default()
        };
        let init = init_encoder(&cfg, split.categories.names());
        let (trained, report) = pretrain_contrastive(&split, &cfg).unwrap();
        assert!(report.epoch_losses.is_empty());
        assert_eq!(init.weight_hash(), trained.weight_hash());
        assert!(trained.frozen);
    }

    #[test]
    fn initial_loss_is_near_ln_batch_size() {
        let split = tiny_split(12);
        let cfg = PretrainConfig {
            embed_dim: 16,
            ..Default::default()
        };
        let params = init_encoder(&cfg, split.categories.names());
        let images: Vec<&SceneImage> = split.scenes.iter().map(|s| &s.image).collect();
        let seqs: Vec<Vec<usize>> = split
            .scenes
            .iter()
            .map(|s| {
                let c = s.annotation.dominant_category().unwrap();
                params
                    .vocab
                    .tokenize_template(&cfg.template, split.categories.name(c))
                    .unwrap()
            })
            .collect();
        let mut g = Graph::new();
        let vars = params.graph_leaves(&mut g);
        let loss = infonce_graph(&params, &mut g, &vars, &images, &seqs, cfg.temperature).unwrap();
        let value = g.scalar(loss);
        let expect = (images.len() as f64).ln();
        assert!(
            (value - expect).abs() <= 0.15 * expect,
            "init loss {value} vs ln B {expect}"
        );
    }

    #[test]
    fn single_category_split_is_rejected() {
        let mut split = tiny_split(6);
        // overwrite every mask with category 0
        for scene in &mut split.scenes {
            scene.annotation.dense_mask.fill(0);
        }
        let cfg = PretrainConfig {
            epochs: 1,
            embed_dim: 8,
            ..Default::default()
        };
        assert!(matches!(
            pretrain_contrastive(&split, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn short_schedule_reduces_loss() {
        let split = tiny_split(16);
        let cfg = PretrainConfig {
            epochs: 5,
            batch_size: 8,
            embed_dim: 16,
            ..Default::default()
        };
        let (_, report) = pretrain_contrastive(&split, &cfg).unwrap();
        assert!(report.epoch_losses.len() == 5);
        assert!(
            report.epoch_losses[4] < report.epoch_losses[0],
            "losses: {:?}",
            report.epoch_losses
        );
    }
}
