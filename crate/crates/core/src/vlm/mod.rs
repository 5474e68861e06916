//! The frozen toy vision-language model.
//!
//! The image encoder is a small convolutional stack emitting one embedding
//! per cell of a downsampled grid (dense features, no global pooling). The
//! text encoder is a token-embedding table with a mean pooler and a single
//! linear projection. The dense score map is the plain inner product between
//! pixel embeddings and class embeddings — temperature never enters it, only
//! the losses.

pub mod pretrain;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::hash;
use crate::synthdata::{CategorySet, SceneImage};
use ndarray::{Array1, Array2, Array3, Array4};
use std::collections::BTreeMap;

/// Per-pixel embeddings over a downsampled grid, one row per cell in
/// row-major order (`p = y * grid_w + x`).
#[derive(Clone, Debug)]
pub struct DenseFeatureMap {
    pub values: Array2<f64>,
    pub grid: (usize, usize),
    pub stride: usize,
}

impl DenseFeatureMap {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.grid;
        if h * w != self.values.nrows() {
            return Err(Error::Shape(format!(
                "grid {h}x{w} does not match {} rows",
                self.values.nrows()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite feature entry".into()));
        }
        Ok(())
    }
}

/// One embedding row per category, in category order.
#[derive(Clone, Debug)]
pub struct ClassEmbeddings {
    pub values: Array2<f64>,
    pub names: Vec<String>,
    pub normalized: bool,
}

impl ClassEmbeddings {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }
}

/// Per-pixel, per-category alignment scores.
#[derive(Clone, Debug)]
pub struct DenseScoreMap {
    pub values: Array2<f64>,
    pub grid: (usize, usize),
    pub names: Vec<String>,
}

impl DenseScoreMap {
    pub fn n_categories(&self) -> usize {
        self.values.ncols()
    }

    /// Per-column min-max rescale to [0,1]. Makes a fixed similarity
    /// threshold meaningful when raw scores are cosines in [-1,1].
    /// Columns with no spread map to all zeros.
    pub fn min_max_normalized(&self) -> DenseScoreMap {
        let mut values = self.values.clone();
        for mut col in values.columns_mut() {
            let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let range = max - min;
            if range < 1e-12 {
                col.fill(0.0);
            } else {
                col.mapv_inplace(|v| (v - min) / range);
            }
        }
        DenseScoreMap {
            values,
            grid: self.grid,
            names: self.names.clone(),
        }
    }
}

/// One convolution layer of the image encoder.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
    pub relu: bool,
}

/// Whitespace-free word vocabulary; category names tokenize on `-`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn new(words: Vec<String>) -> Self {
        let mut uniq = Vec::new();
        let mut index = BTreeMap::new();
        for w in words {
            if !index.contains_key(&w) {
                index.insert(w.clone(), uniq.len());
                uniq.push(w);
            }
        }
        Self { words: uniq, index }
    }

    /// Vocabulary covering category-name parts plus template words.
    pub fn for_categories(names: &[String], template: &str) -> Self {
        let mut words: Vec<String> = Vec::new();
        for t in template.split_whitespace() {
            if t != "{}" {
                words.push(t.to_string());
            }
        }
        for name in names {
            for part in name.split('-') {
                words.push(part.to_string());
            }
        }
        Self::new(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn token(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Input(format!("word '{word}' not in vocabulary")))
    }

    /// Category name -> token sequence (split on `-`).
    pub fn tokenize_category(&self, name: &str) -> Result<Vec<usize>> {
        name.split('-').map(|p| self.token(p)).collect()
    }

    /// Expand `template` (with a `{}` slot) around a category name.
    pub fn tokenize_template(&self, template: &str, name: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let mut used_slot = false;
        for t in template.split_whitespace() {
            if t == "{}" {
                out.extend(self.tokenize_category(name)?);
                used_slot = true;
            } else {
                out.push(self.token(t)?);
            }
        }
        if !used_slot {
            out.extend(self.tokenize_category(name)?);
        }
        Ok(out)
    }
}

/// All weights of the toy VLM. `frozen` flips after pretraining; every later
/// stage treats these as constants.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub embed_dim: usize,
    pub conv: Vec<ConvLayer>,
    pub token_embed: Array2<f64>,
    pub text_w: Array2<f64>,
    pub text_b: Array1<f64>,
    pub vocab: Vocabulary,
    pub normalize: bool,
    pub frozen: bool,
}

impl EncoderParams {
    pub fn stride(&self) -> usize {
        self.conv.iter().map(|c| c.stride).product()
    }

    /// Hash of every weight tensor, for frozen-weight contracts.
    pub fn weight_hash(&self) -> String {
        let mut parts: Vec<(String, Vec<f64>)> = Vec::new();
        for (i, layer) in self.conv.iter().enumerate() {
            parts.push((format!("conv{i}/w"), layer.weight.iter().copied().collect()));
            parts.push((format!("conv{i}/b"), layer.bias.iter().copied().collect()));
        }
        parts.push(("token_embed".into(), self.token_embed.iter().copied().collect()));
        parts.push(("text_w".into(), self.text_w.iter().copied().collect()));
        parts.push(("text_b".into(), self.text_b.iter().copied().collect()));
        hash::hash_named_tensors(parts.iter().map(|(n, v)| (n.as_str(), v.as_slice())))
    }

    pub fn to_checkpoint(&self) -> crate::ckpt::Checkpoint {
        let mut ckpt = crate::ckpt::Checkpoint::new();
        for (i, layer) in self.conv.iter().enumerate() {
            ckpt.insert(format!("encoder/image/conv{i}/w"), layer.weight.clone().into_dyn());
            ckpt.insert(format!("encoder/image/conv{i}/b"), layer.bias.clone().into_dyn());
            ckpt.insert(
                format!("encoder/image/conv{i}/meta"),
                ndarray::arr1(&[
                    layer.stride as f64,
                    layer.pad as f64,
                    if layer.relu { 1.0 } else { 0.0 },
                ])
                .into_dyn(),
            );
        }
        ckpt.insert("encoder/text/token_embed", self.token_embed.clone().into_dyn());
        ckpt.insert("encoder/text/proj_w", self.text_w.clone().into_dyn());
        ckpt.insert("encoder/text/proj_b", self.text_b.clone().into_dyn());
        ckpt.insert(
            "encoder/meta",
            ndarray::arr1(&[
                self.embed_dim as f64,
                self.conv.len() as f64,
                if self.normalize { 1.0 } else { 0.0 },
                if self.frozen { 1.0 } else { 0.0 },
            ])
            .into_dyn(),
        );
        let vocab_blob: Vec<f64> = {
            let joined = self.vocab.words().join(" ");
            joined.bytes().map(|b| b as f64).collect()
        };
        ckpt.insert("encoder/vocab_utf8", ndarray::Array1::from(vocab_blob).into_dyn());
        ckpt
    }

    pub fn from_checkpoint(ckpt: &crate::ckpt::Checkpoint) -> Result<Self> {
        let meta = ckpt.get("encoder/meta")?;
        let embed_dim = meta[[0]] as usize;
        let n_conv = meta[[1]] as usize;
        let normalize = meta[[2]] != 0.0;
        let frozen = meta[[3]] != 0.0;

        let mut conv = Vec::with_capacity(n_conv);
        for i in 0..n_conv {
            let w = ckpt.get(&format!("encoder/image/conv{i}/w"))?;
            let b = ckpt.get(&format!("encoder/image/conv{i}/b"))?;
            let m = ckpt.get(&format!("encoder/image/conv{i}/meta"))?;
            conv.push(ConvLayer {
                weight: w.clone().into_dimensionality().map_err(shape_err)?,
                bias: b.clone().into_dimensionality().map_err(shape_err)?,
                stride: m[[0]] as usize,
                pad: m[[1]] as usize,
                relu: m[[2]] != 0.0,
            });
        }
        let token_embed = ckpt
            .get("encoder/text/token_embed")?
            .clone()
            .into_dimensionality()
            .map_err(shape_err)?;
        let text_w = ckpt
            .get("encoder/text/proj_w")?
            .clone()
            .into_dimensionality()
            .map_err(shape_err)?;
        let text_b = ckpt
            .get("encoder/text/proj_b")?
            .clone()
            .into_dimensionality()
            .map_err(shape_err)?;
        let vocab_bytes: Vec<u8> = ckpt
            .get("encoder/vocab_utf8")?
            .iter()
            .map(|&v| v as u8)
            .collect();
        let joined = String::from_utf8(vocab_bytes)
            .map_err(|_| Error::Input("vocab blob is not UTF-8".into()))?;
        let vocab = Vocabulary::new(joined.split(' ').map(|s| s.to_string()).collect());

        Ok(Self {
            embed_dim,
            conv,
            token_embed,
            text_w,
            text_b,
            vocab,
            normalize,
            frozen,
        })
    }
}

fn shape_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Shape(e.to_string())
}

/// Graph handles for the encoder weights, for training passes.
pub struct EncoderVars {
    pub conv_kernels: Vec<Var>,
    pub conv_biases: Vec<Var>,
    pub token_embed: Var,
    pub text_w: Var,
    pub text_b: Var,
}

impl EncoderParams {
    pub fn graph_leaves(&self, g: &mut Graph) -> EncoderVars {
        EncoderVars {
            conv_kernels: self
                .conv
                .iter()
                .map(|c| g.leaf(c.weight.clone().into_dyn()))
                .collect(),
            conv_biases: self
                .conv
                .iter()
                .map(|c| g.leaf(c.bias.clone().into_dyn()))
                .collect(),
            token_embed: g.leaf2(self.token_embed.clone()),
            text_w: g.leaf2(self.text_w.clone()),
            text_b: g.leaf(self.text_b.clone().insert_axis(ndarray::Axis(0)).into_dyn()),
        }
    }

    /// Dense pixel embeddings as a graph value: `(h*w/stride^2) x D` rows.
    pub fn graph_image_rows(&self, g: &mut Graph, vars: &EncoderVars, pixels: &Array3<f32>) -> Var {
        let rows = self.graph_image_rows_raw(g, vars, pixels);
        if self.normalize {
            g.l2_norm_rows(rows)
        } else {
            rows
        }
    }

    /// Unnormalized per-pixel embedding rows.
    pub fn graph_image_rows_raw(
        &self,
        g: &mut Graph,
        vars: &EncoderVars,
        pixels: &Array3<f32>,
    ) -> Var {
        let (h, w, _) = pixels.dim();
        // HWC f32 -> CHW f64
        let chw = Array3::from_shape_fn((3, h, w), |(c, y, x)| pixels[[y, x, c]] as f64);
        let mut cur = g.leaf(chw.into_dyn());
        for (i, layer) in self.conv.iter().enumerate() {
            cur = g.conv2d(
                cur,
                vars.conv_kernels[i],
                vars.conv_biases[i],
                layer.stride,
                layer.pad,
            );
            if layer.relu {
                cur = g.relu(cur);
            }
        }
        let shape = g.value(cur).shape().to_vec();
        let (d, gh, gw) = (shape[0], shape[1], shape[2]);
        let flat = g.reshape(cur, &[d, gh * gw]);
        g.transpose(flat)
    }

    /// Global image embedding as a graph value (`1 x D`): raw per-pixel
    /// features mean-pooled, then normalized once. Raw pooling keeps the
    /// high-activation object pixels dominant in the pooled direction.
    pub fn graph_image_pooled(&self, g: &mut Graph, vars: &EncoderVars, pixels: &Array3<f32>) -> Var {
        let (h, w, _) = pixels.dim();
        let chw = Array3::from_shape_fn((3, h, w), |(c, y, x)| pixels[[y, x, c]] as f64);
        let mut cur = g.leaf(chw.into_dyn());
        for (i, layer) in self.conv.iter().enumerate() {
            cur = g.conv2d(
                cur,
                vars.conv_kernels[i],
                vars.conv_biases[i],
                layer.stride,
                layer.pad,
            );
            if layer.relu {
                cur = g.relu(cur);
            }
        }
        let shape = g.value(cur).shape().to_vec();
        let (d, gh, gw) = (shape[0], shape[1], shape[2]);
        let flat = g.reshape(cur, &[d, gh * gw]);
        let rows = g.transpose(flat);
        let mean = g.mean_rows(rows);
        if self.normalize {
            g.l2_norm_rows(mean)
        } else {
            mean
        }
    }

    /// Mean-pool token embeddings per sequence, then project. Pooling is a
    /// constant matrix multiply so gradients reach the embedding table.
    pub fn graph_text_rows(
        &self,
        g: &mut Graph,
        vars: &EncoderVars,
        sequences: &[Vec<usize>],
    ) -> Result<Var> {
        let vocab_size = self.token_embed.nrows();
        let mut pool = Array2::<f64>::zeros((sequences.len(), vocab_size));
        for (s, seq) in sequences.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::Input("empty token sequence".into()));
            }
            for &tok in seq {
                if tok >= vocab_size {
                    return Err(Error::Input(format!("token {tok} out of vocabulary")));
                }
                pool[[s, tok]] += 1.0 / seq.len() as f64;
            }
        }
        let pool = g.leaf2(pool);
        let pooled = g.matmul(pool, vars.token_embed);
        Ok(self.graph_text_project(g, vars, pooled))
    }

    /// Shared tail of the text encoder: linear projection + optional norm.
    /// `pooled` is one already-pooled row per sequence.
    pub fn graph_text_project(&self, g: &mut Graph, vars: &EncoderVars, pooled: Var) -> Var {
        let projected = g.matmul(pooled, vars.text_w);
        let out = g.add_row(projected, vars.text_b);
        if self.normalize {
            g.l2_norm_rows(out)
        } else {
            out
        }
    }
}

// ---- public pure operations ------------------------------------------------

/// Encode one image to per-pixel embeddings on the downsampled grid.
pub fn encode_image_dense(params: &EncoderParams, image: &SceneImage) -> Result<DenseFeatureMap> {
    let raw = encode_image_dense_raw(params, image)?;
    if !params.normalize {
        return Ok(raw);
    }
    let mut values = raw.values;
    for mut row in values.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm >= 1e-12 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    Ok(DenseFeatureMap {
        values,
        grid: raw.grid,
        stride: raw.stride,
    })
}

/// Same, but rows are left unnormalized regardless of the normalize flag.
/// The cross-attention of the visual prompt consumes these: raw magnitudes
/// carry the per-pixel evidence that normalized rows strip away.
pub fn encode_image_dense_raw(
    params: &EncoderParams,
    image: &SceneImage,
) -> Result<DenseFeatureMap> {
    let (h, w, c) = image.pixels.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let stride = params.stride();
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} not divisible by encoder stride {stride}"
        )));
    }
    let mut g = Graph::new();
    let vars = params.graph_leaves(&mut g);
    let rows = params.graph_image_rows_raw(&mut g, &vars, &image.pixels);
    let values = g
        .value(rows)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(shape_err)?
        .to_owned();
    let map = DenseFeatureMap {
        values,
        grid: (h / stride, w / stride),
        stride,
    };
    map.validate()?;
    Ok(map)
}

/// Encode token sequences to one embedding row each.
pub fn encode_text(params: &EncoderParams, sequences: &[Vec<usize>]) -> Result<ClassEmbeddings> {
    if sequences.is_empty() {
        return Ok(ClassEmbeddings {
            values: Array2::zeros((0, params.embed_dim)),
            names: vec![],
            normalized: params.normalize,
        });
    }
    let mut g = Graph::new();
    let vars = params.graph_leaves(&mut g);
    let rows = params.graph_text_rows(&mut g, &vars, sequences)?;
    let values = g
        .value(rows)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(shape_err)?
        .to_owned();
    let names = sequences
        .iter()
        .map(|seq| {
            seq.iter()
                .map(|&t| params.vocab.words()[t].as_str())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    Ok(ClassEmbeddings {
        values,
        names,
        normalized: params.normalize,
    })
}

/// Plain class embeddings for a category set, optionally via a hand template.
pub fn class_embeddings(
    params: &EncoderParams,
    categories: &CategorySet,
    template: Option<&str>,
) -> Result<ClassEmbeddings> {
    let sequences: Vec<Vec<usize>> = categories
        .names()
        .iter()
        .map(|name| match template {
            Some(t) => params.vocab.tokenize_template(t, name),
            None => params.vocab.tokenize_category(name),
        })
        .collect::<Result<_>>()?;
    let mut emb = encode_text(params, &sequences)?;
    emb.names = categories.names().to_vec();
    Ok(emb)
}

/// The dense score map: exact inner products, no temperature, no scaling.
pub fn dense_score_map(f: &DenseFeatureMap, t: &ClassEmbeddings) -> Result<DenseScoreMap> {
    if f.values.ncols() != t.values.ncols() {
        return Err(Error::Shape(format!(
            "feature width {} != embedding width {}",
            f.values.ncols(),
            t.values.ncols()
        )));
    }
    Ok(DenseScoreMap {
        values: f.values.dot(&t.values.t()),
        grid: f.grid,
        names: t.names.clone(),
    })
}

/// Global image embedding: raw features mean-pooled, then normalized once
/// (the same pooling the contrastive pretraining optimizes).
pub fn global_image_embedding(params: &EncoderParams, image: &SceneImage) -> Result<Array1<f64>> {
    let (h, w, c) = image.pixels.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let stride = params.stride();
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} not divisible by encoder stride {stride}"
        )));
    }
    let mut g = Graph::new();
    let vars = params.graph_leaves(&mut g);
    let pooled = params.graph_image_pooled(&mut g, &vars, &image.pixels);
    let row = g
        .value(pooled)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(shape_err)?
        .row(0)
        .to_owned();
    Ok(row)
}
