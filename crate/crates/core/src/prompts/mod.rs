//! The two learnable prompt modules — the only trainable parameters of the
//! adapting stage.
//!
//! Text prompt: `m` learnable token embeddings arranged around the category
//! token (`before` of them in front). A forward recurrence runs over the
//! prefix and a backward recurrence over the suffix; per position the two
//! states are concatenated (the absent half contributes zeros) and mapped by
//! a ReLU two-layer perceptron to the prompt vector actually inserted into
//! the sequence.
//!
//! Visual prompt: projection-free cross-attention from pixel embeddings
//! (queries) to prompted class embeddings (keys) and plain class embeddings
//! (values), fused with the original pixel embedding by a single affine
//! layer mapping `2D -> D`.

use crate::error::{Error, Result};
use crate::graph::{orthogonal, randn2, uniform_fan_in, Graph, Var};
use crate::vlm::{ClassEmbeddings, DenseFeatureMap, EncoderParams, EncoderVars};
use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;

/// Prompt slot layout: `before` prompt tokens precede the category token,
/// `total` is the number of prompt tokens overall.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptLayout {
    pub before: usize,
    pub total: usize,
}

impl PromptLayout {
    pub fn new(before: usize, total: usize) -> Result<Self> {
        if before > total {
            return Err(Error::Layout { before, total });
        }
        Ok(Self { before, total })
    }
}

impl Default for PromptLayout {
    /// One prompt token after the category token ("back" position).
    fn default() -> Self {
        Self { before: 1, total: 1 }
    }
}

/// A slot in a prompted token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SequenceSlot {
    /// Learnable prompt slot by prompt index.
    Prompt(usize),
    /// A concrete vocabulary token.
    Token(usize),
}

/// `[p_1..p_before, CAT.., p_{before+1}..p_total]`.
pub fn build_prompted_sequence(
    category_tokens: &[usize],
    layout: PromptLayout,
) -> Result<Vec<SequenceSlot>> {
    PromptLayout::new(layout.before, layout.total)?;
    let mut out = Vec::with_capacity(layout.total + category_tokens.len());
    for i in 0..layout.before {
        out.push(SequenceSlot::Prompt(i));
    }
    out.extend(category_tokens.iter().map(|&t| SequenceSlot::Token(t)));
    for i in layout.before..layout.total {
        out.push(SequenceSlot::Prompt(i));
    }
    Ok(out)
}

/// One direction of the recurrent contextualizer (LSTM cell weights).
#[derive(Clone, Debug)]
pub struct RecurrentParams {
    /// input -> gates, `D x 4H`, gate order `[input, forget, cell, output]`
    pub w_ih: Array2<f64>,
    /// hidden -> gates, `H x 4H`
    pub w_hh: Array2<f64>,
    pub bias: Array1<f64>,
}

impl RecurrentParams {
    fn zeros(d: usize, h: usize) -> Self {
        Self {
            w_ih: Array2::zeros((d, 4 * h)),
            w_hh: Array2::zeros((h, 4 * h)),
            bias: Array1::zeros(4 * h),
        }
    }

    fn init(rng: &mut ChaCha8Rng, d: usize, h: usize) -> Self {
        let mut w_hh = Array2::zeros((h, 4 * h));
        for gate in 0..4 {
            let block = orthogonal(rng, h);
            w_hh
                .slice_mut(ndarray::s![.., gate * h..(gate + 1) * h])
                .assign(&block);
        }
        Self {
            w_ih: uniform_fan_in(rng, d, 4 * h),
            w_hh,
            bias: Array1::zeros(4 * h),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TextPromptState {
    pub layout: PromptLayout,
    /// `total x D` learnable prompt embeddings.
    pub embeddings: Array2<f64>,
    pub forward: RecurrentParams,
    pub backward: RecurrentParams,
    pub mlp_w1: Array2<f64>,
    pub mlp_b1: Array1<f64>,
    pub mlp_w2: Array2<f64>,
    pub mlp_b2: Array1<f64>,
}

impl TextPromptState {
    /// Prompt embeddings N(0, 0.02^2), orthogonal recurrent blocks, fan-in
    /// hidden layer. The MLP output layer starts at zero so every prompt
    /// vector is zero initially and the prompted class embedding coincides
    /// with the plain one; adaptation then departs from the frozen model's
    /// behavior instead of from noise.
    pub fn init(rng: &mut ChaCha8Rng, layout: PromptLayout, d: usize) -> Self {
        let h = d;
        Self {
            layout,
            embeddings: randn2(rng, layout.total, d, 0.02),
            forward: RecurrentParams::init(rng, d, h),
            backward: RecurrentParams::init(rng, d, h),
            mlp_w1: uniform_fan_in(rng, 2 * h, h),
            mlp_b1: Array1::zeros(h),
            mlp_w2: Array2::zeros((h, d)),
            mlp_b2: Array1::zeros(d),
        }
    }

    /// All-zero weights; the contextualizer output collapses to zero vectors.
    pub fn zeros(layout: PromptLayout, d: usize) -> Self {
        let h = d;
        Self {
            layout,
            embeddings: Array2::zeros((layout.total, d)),
            forward: RecurrentParams::zeros(d, h),
            backward: RecurrentParams::zeros(d, h),
            mlp_w1: Array2::zeros((2 * h, h)),
            mlp_b1: Array1::zeros(h),
            mlp_w2: Array2::zeros((h, d)),
            mlp_b2: Array1::zeros(d),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.forward.w_hh.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.ncols().max(self.mlp_w2.ncols())
    }
}

#[derive(Clone, Debug)]
pub struct VisualPromptState {
    /// `2D x D` fusion weights (affine by default; ReLU behind a switch).
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub relu: bool,
}

impl VisualPromptState {
    /// Identity on the pixel half, zero on the attended half: the fused
    /// embedding starts exactly at the frozen pixel embedding and the
    /// attended context blends in only as far as training pushes it.
    pub fn init(rng: &mut ChaCha8Rng, d: usize) -> Self {
        let _ = rng;
        let mut w = Array2::zeros((2 * d, d));
        for i in 0..d {
            w[[i, i]] = 1.0;
        }
        Self {
            w,
            b: Array1::zeros(d),
            relu: false,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.w.ncols()
    }
}

// ---- graph handles ----------------------------------------------------------

pub struct TextPromptVars {
    pub embeddings: Var,
    pub fwd_w_ih: Var,
    pub fwd_w_hh: Var,
    pub fwd_bias: Var,
    pub bwd_w_ih: Var,
    pub bwd_w_hh: Var,
    pub bwd_bias: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
}

impl TextPromptState {
    pub fn graph_leaves(&self, g: &mut Graph) -> TextPromptVars {
        let row = |g: &mut Graph, a: &Array1<f64>| g.leaf(a.clone().insert_axis(Axis(0)).into_dyn());
        TextPromptVars {
            embeddings: g.leaf2(self.embeddings.clone()),
            fwd_w_ih: g.leaf2(self.forward.w_ih.clone()),
            fwd_w_hh: g.leaf2(self.forward.w_hh.clone()),
            fwd_bias: row(g, &self.forward.bias),
            bwd_w_ih: g.leaf2(self.backward.w_ih.clone()),
            bwd_w_hh: g.leaf2(self.backward.w_hh.clone()),
            bwd_bias: row(g, &self.backward.bias),
            mlp_w1: g.leaf2(self.mlp_w1.clone()),
            mlp_b1: row(g, &self.mlp_b1),
            mlp_w2: g.leaf2(self.mlp_w2.clone()),
            mlp_b2: row(g, &self.mlp_b2),
        }
    }
}

pub struct VisualPromptVars {
    pub w: Var,
    pub b: Var,
}

impl VisualPromptState {
    pub fn graph_leaves(&self, g: &mut Graph) -> VisualPromptVars {
        VisualPromptVars {
            w: g.leaf2(self.w.clone()),
            b: g.leaf(self.b.clone().insert_axis(Axis(0)).into_dyn()),
        }
    }
}

fn lstm_step(
    g: &mut Graph,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    hidden: usize,
) -> (Var, Var) {
    let xs = g.matmul(x, w_ih);
    let hs = g.matmul(h_prev, w_hh);
    let pre = g.add(xs, hs);
    let gates = g.add(pre, bias);
    let i = g.slice_cols(gates, 0, hidden);
    let f = g.slice_cols(gates, hidden, hidden);
    let z = g.slice_cols(gates, 2 * hidden, hidden);
    let o = g.slice_cols(gates, 3 * hidden, hidden);
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let z = g.tanh(z);
    let o = g.sigmoid(o);
    let fc = g.mul(f, c_prev);
    let iz = g.mul(i, z);
    let c = g.add(fc, iz);
    let tc = g.tanh(c);
    let h = g.mul(o, tc);
    (h, c)
}

/// Contextualized prompt vectors `h_1..h_total`, each a `1 x D` graph value.
///
/// The forward recurrence covers the prefix slots, the backward recurrence
/// covers the suffix slots (walked from the end); the missing half of the
/// concatenation is zero.
pub fn graph_prompt_vectors(
    g: &mut Graph,
    state: &TextPromptState,
    vars: &TextPromptVars,
) -> Vec<Var> {
    let m = state.layout.total;
    let l = state.layout.before;
    let h = state.hidden_dim();
    if m == 0 {
        return vec![];
    }

    let inputs: Vec<Var> = (0..m).map(|i| g.slice_rows(vars.embeddings, i, 1)).collect();
    let zero_h = g.leaf2(Array2::zeros((1, h)));

    // forward pass over the prefix
    let mut fwd_states: Vec<Var> = Vec::with_capacity(l);
    let (mut hf, mut cf) = (zero_h, zero_h);
    for &x in inputs.iter().take(l) {
        let (h_new, c_new) = lstm_step(g, x, hf, cf, vars.fwd_w_ih, vars.fwd_w_hh, vars.fwd_bias, h);
        fwd_states.push(h_new);
        hf = h_new;
        cf = c_new;
    }

    // backward pass over the suffix, walked right-to-left
    let mut bwd_states: Vec<Var> = Vec::with_capacity(m - l);
    let (mut hb, mut cb) = (zero_h, zero_h);
    for &x in inputs[l..].iter().rev() {
        let (h_new, c_new) = lstm_step(g, x, hb, cb, vars.bwd_w_ih, vars.bwd_w_hh, vars.bwd_bias, h);
        bwd_states.push(h_new);
        hb = h_new;
        cb = c_new;
    }
    bwd_states.reverse();

    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let cat = if i < l {
            g.concat_cols(fwd_states[i], zero_h)
        } else {
            g.concat_cols(zero_h, bwd_states[i - l])
        };
        let a = g.matmul(cat, vars.mlp_w1);
        let a = g.add_row(a, vars.mlp_b1);
        let a = g.relu(a);
        let b = g.matmul(a, vars.mlp_w2);
        let hvec = g.add_row(b, vars.mlp_b2);
        out.push(hvec);
    }
    out
}

/// Prompted class embedding rows (`K x D`) for every category token sequence.
///
/// Prompt vectors are shared across categories; each category's sequence is
/// the prompt slots around its tokens, mean-pooled and projected by the
/// frozen text encoder tail.
pub fn graph_prompted_class_rows(
    g: &mut Graph,
    state: &TextPromptState,
    vars: &TextPromptVars,
    encoder: &EncoderParams,
    enc_vars: &EncoderVars,
    category_sequences: &[Vec<usize>],
) -> Result<Var> {
    let prompt_vecs = graph_prompt_vectors(g, state, vars);
    let l = state.layout.before;
    let mut rows = Vec::with_capacity(category_sequences.len());
    for seq in category_sequences {
        let slots = build_prompted_sequence(seq, state.layout)?;
        let mut parts: Vec<Var> = Vec::with_capacity(slots.len());
        for slot in slots {
            match slot {
                SequenceSlot::Prompt(i) => parts.push(prompt_vecs[i]),
                SequenceSlot::Token(t) => {
                    if t >= encoder.token_embed.nrows() {
                        return Err(Error::Input(format!("token {t} out of vocabulary")));
                    }
                    parts.push(g.slice_rows(enc_vars.token_embed, t, 1));
                }
            }
        }
        let seq_rows = g.stack_rows(&parts);
        let pooled = g.mean_rows(seq_rows);
        rows.push(pooled);
    }
    let _ = l;
    let pooled_all = g.stack_rows(&rows);
    Ok(encoder.graph_text_project(g, enc_vars, pooled_all))
}

/// Semantic-aware pixel embeddings from cross-attention fusion (`P x D`).
///
/// Attention logits are scaled inner products of pixel rows against the
/// prompted class embeddings (keys); the attended value rows come from the
/// plain class embeddings. No learned projections inside the attention.
pub fn graph_visual_prompt_rows(
    g: &mut Graph,
    state: &VisualPromptState,
    vars: &VisualPromptVars,
    f_rows: Var,
    t_prompted: Var,
    t_plain: Var,
) -> Var {
    let d = state.embed_dim() as f64;
    let keys_t = g.transpose(t_prompted);
    let logits = g.matmul(f_rows, keys_t);
    let logits = g.scale(logits, 1.0 / d.sqrt());
    let attn = g.softmax_rows(logits);
    let attended = g.matmul(attn, t_plain);
    let cat = g.concat_cols(f_rows, attended);
    let fused = g.matmul(cat, vars.w);
    let fused = g.add_row(fused, vars.b);
    if state.relu {
        g.relu(fused)
    } else {
        fused
    }
}

// ---- pure wrappers -----------------------------------------------------------

/// Prompted embedding row for one category (inference path).
pub fn text_prompt_forward(
    state: &TextPromptState,
    category_tokens: &[usize],
    encoder: &EncoderParams,
) -> Result<Array1<f64>> {
    let mut g = Graph::new();
    let enc_vars = encoder.graph_leaves(&mut g);
    let vars = state.graph_leaves(&mut g);
    let rows = graph_prompted_class_rows(
        &mut g,
        state,
        &vars,
        encoder,
        &enc_vars,
        &[category_tokens.to_vec()],
    )?;
    let out = g.value(rows);
    Ok(out
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .row(0)
        .to_owned())
}

/// Prompted class embeddings for a whole category list (inference path).
/// With a hand template, the prompt slots wrap the expanded template tokens.
pub fn prompted_class_embeddings(
    state: &TextPromptState,
    encoder: &EncoderParams,
    categories: &crate::synthdata::CategorySet,
    template: Option<&str>,
) -> Result<ClassEmbeddings> {
    let sequences: Vec<Vec<usize>> = categories
        .names()
        .iter()
        .map(|n| match template {
            Some(t) => encoder.vocab.tokenize_template(t, n),
            None => encoder.vocab.tokenize_category(n),
        })
        .collect::<Result<_>>()?;
    let mut g = Graph::new();
    let enc_vars = encoder.graph_leaves(&mut g);
    let vars = state.graph_leaves(&mut g);
    let rows = graph_prompted_class_rows(&mut g, state, &vars, encoder, &enc_vars, &sequences)?;
    let values = g
        .value(rows)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned();
    Ok(ClassEmbeddings {
        values,
        names: categories.names().to_vec(),
        normalized: encoder.normalize,
    })
}

/// Fuse pixel embeddings with attended class context (inference path).
///
/// `t_prompted` supplies keys, `t_plain` supplies values; both must cover the
/// same categories in the same order.
pub fn visual_prompt_forward(
    state: &VisualPromptState,
    f: &DenseFeatureMap,
    t_prompted: &ClassEmbeddings,
    t_plain: &ClassEmbeddings,
) -> Result<DenseFeatureMap> {
    if t_prompted.names != t_plain.names {
        return Err(Error::Input(
            "key/value class embeddings cover different category orders".into(),
        ));
    }
    let d = state.embed_dim();
    if f.values.ncols() != d || t_prompted.values.ncols() != d || t_plain.values.ncols() != d {
        return Err(Error::Shape("embedding width mismatch in visual prompt".into()));
    }
    let mut g = Graph::new();
    let vars = state.graph_leaves(&mut g);
    let f_rows = g.leaf2(f.values.clone());
    let tp = g.leaf2(t_prompted.values.clone());
    let tv = g.leaf2(t_plain.values.clone());
    let out = graph_visual_prompt_rows(&mut g, state, &vars, f_rows, tp, tv);
    Ok(DenseFeatureMap {
        values: g
            .value(out)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned(),
        grid: f.grid,
        stride: f.stride,
    })
}

// ---- optimizer updates -----------------------------------------------------------

impl TextPromptState {
    /// Plain SGD step from a backward sweep's gradients.
    pub fn apply_sgd(&mut self, vars: &TextPromptVars, grads: &crate::graph::Grads, lr: f64) {
        let step2 = |dst: &mut Array2<f64>, v: Var| {
            if let Some(g) = grads.get(v) {
                let g = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                dst.zip_mut_with(&g, |w, gr| *w -= lr * gr);
            }
        };
        let step1 = |dst: &mut Array1<f64>, v: Var| {
            if let Some(g) = grads.get(v) {
                let g = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                dst.zip_mut_with(&g.row(0), |w, gr| *w -= lr * gr);
            }
        };
        step2(&mut self.embeddings, vars.embeddings);
        step2(&mut self.forward.w_ih, vars.fwd_w_ih);
        step2(&mut self.forward.w_hh, vars.fwd_w_hh);
        step1(&mut self.forward.bias, vars.fwd_bias);
        step2(&mut self.backward.w_ih, vars.bwd_w_ih);
        step2(&mut self.backward.w_hh, vars.bwd_w_hh);
        step1(&mut self.backward.bias, vars.bwd_bias);
        step2(&mut self.mlp_w1, vars.mlp_w1);
        step1(&mut self.mlp_b1, vars.mlp_b1);
        step2(&mut self.mlp_w2, vars.mlp_w2);
        step1(&mut self.mlp_b2, vars.mlp_b2);
    }
}

impl VisualPromptState {
    pub fn apply_sgd(&mut self, vars: &VisualPromptVars, grads: &crate::graph::Grads, lr: f64) {
        if let Some(g) = grads.get(vars.w) {
            let g = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            self.w.zip_mut_with(&g, |w, gr| *w -= lr * gr);
        }
        if let Some(g) = grads.get(vars.b) {
            let g = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            self.b.zip_mut_with(&g.row(0), |w, gr| *w -= lr * gr);
        }
    }
}

// ---- checkpoints ---------------------------------------------------------------

impl TextPromptState {
    pub fn to_checkpoint(&self, ckpt: &mut crate::ckpt::Checkpoint) {
        let p = "prompt/text";
        ckpt.insert(format!("{p}/layout"), ndarray::arr1(&[
            self.layout.before as f64,
            self.layout.total as f64,
        ]).into_dyn());
        ckpt.insert(format!("{p}/embeddings"), self.embeddings.clone().into_dyn());
        for (dir, lstm) in [("fwd", &self.forward), ("bwd", &self.backward)] {
            ckpt.insert(format!("{p}/{dir}/w_ih"), lstm.w_ih.clone().into_dyn());
            ckpt.insert(format!("{p}/{dir}/w_hh"), lstm.w_hh.clone().into_dyn());
            ckpt.insert(format!("{p}/{dir}/bias"), lstm.bias.clone().into_dyn());
        }
        ckpt.insert(format!("{p}/mlp/w1"), self.mlp_w1.clone().into_dyn());
        ckpt.insert(format!("{p}/mlp/b1"), self.mlp_b1.clone().into_dyn());
        ckpt.insert(format!("{p}/mlp/w2"), self.mlp_w2.clone().into_dyn());
        ckpt.insert(format!("{p}/mlp/b2"), self.mlp_b2.clone().into_dyn());
    }

    pub fn from_checkpoint(ckpt: &crate::ckpt::Checkpoint) -> Result<Self> {
        let p = "prompt/text";
        let layout = ckpt.get(&format!("{p}/layout"))?;
        let layout = PromptLayout::new(layout[[0]] as usize, layout[[1]] as usize)?;
        let get2 = |name: String| -> Result<Array2<f64>> {
            Ok(ckpt.get(&name)?.clone().into_dimensionality().map_err(|e| Error::Shape(e.to_string()))?)
        };
        let get1 = |name: String| -> Result<Array1<f64>> {
            Ok(ckpt.get(&name)?.clone().into_dimensionality().map_err(|e| Error::Shape(e.to_string()))?)
        };
        Ok(Self {
            layout,
            embeddings: get2(format!("{p}/embeddings"))?,
            forward: RecurrentParams {
                w_ih: get2(format!("{p}/fwd/w_ih"))?,
                w_hh: get2(format!("{p}/fwd/w_hh"))?,
                bias: get1(format!("{p}/fwd/bias"))?,
            },
            backward: RecurrentParams {
                w_ih: get2(format!("{p}/bwd/w_ih"))?,
                w_hh: get2(format!("{p}/bwd/w_hh"))?,
                bias: get1(format!("{p}/bwd/bias"))?,
            },
            mlp_w1: get2(format!("{p}/mlp/w1"))?,
            mlp_b1: get1(format!("{p}/mlp/b1"))?,
            mlp_w2: get2(format!("{p}/mlp/w2"))?,
            mlp_b2: get1(format!("{p}/mlp/b2"))?,
        })
    }

    pub fn weight_hash(&self) -> String {
        let parts: Vec<(String, Vec<f64>)> = vec![
            ("embeddings".into(), self.embeddings.iter().copied().collect()),
            ("fwd_w_ih".into(), self.forward.w_ih.iter().copied().collect()),
            ("fwd_w_hh".into(), self.forward.w_hh.iter().copied().collect()),
            ("fwd_bias".into(), self.forward.bias.iter().copied().collect()),
            ("bwd_w_ih".into(), self.backward.w_ih.iter().copied().collect()),
            ("bwd_w_hh".into(), self.backward.w_hh.iter().copied().collect()),
            ("bwd_bias".into(), self.backward.bias.iter().copied().collect()),
            ("mlp_w1".into(), self.mlp_w1.iter().copied().collect()),
            ("mlp_b1".into(), self.mlp_b1.iter().copied().collect()),
            ("mlp_w2".into(), self.mlp_w2.iter().copied().collect()),
            ("mlp_b2".into(), self.mlp_b2.iter().copied().collect()),
        ];
        crate::hash::hash_named_tensors(parts.iter().map(|(n, v)| (n.as_str(), v.as_slice())))
    }
}

impl VisualPromptState {
    pub fn to_checkpoint(&self, ckpt: &mut crate::ckpt::Checkpoint) {
        ckpt.insert("prompt/visual/w", self.w.clone().into_dyn());
        ckpt.insert("prompt/visual/b", self.b.clone().into_dyn());
        ckpt.insert(
            "prompt/visual/relu",
            ndarray::arr1(&[if self.relu { 1.0 } else { 0.0 }]).into_dyn(),
        );
    }

    pub fn from_checkpoint(ckpt: &crate::ckpt::Checkpoint) -> Result<Self> {
        Ok(Self {
            w: ckpt
                .get("prompt/visual/w")?
                .clone()
                .into_dimensionality()
                .map_err(|e| Error::Shape(e.to_string()))?,
            b: ckpt
                .get("prompt/visual/b")?
                .clone()
                .into_dimensionality()
                .map_err(|e| Error::Shape(e.to_string()))?,
            relu: ckpt.get("prompt/visual/relu")?[[0]] != 0.0,
        })
    }

    pub fn weight_hash(&self) -> String {
        let parts: Vec<(String, Vec<f64>)> = vec![
            ("w".into(), self.w.iter().copied().collect()),
            ("b".into(), self.b.iter().copied().collect()),
        ];
        crate::hash::hash_named_tensors(parts.iter().map(|(n, v)| (n.as_str(), v.as_slice())))
    }
}

/// Both prompt modules plus the ablation switches they were trained with.
/// Serialized into one checkpoint so downstream stages are self-describing.
#[derive(Clone, Debug)]
pub struct PromptBundle {
    pub text: TextPromptState,
    pub visual: VisualPromptState,
    pub use_text: bool,
    pub use_visual: bool,
    pub hand_template: Option<String>,
}

impl PromptBundle {
    pub fn to_checkpoint(&self) -> crate::ckpt::Checkpoint {
        let mut ckpt = crate::ckpt::Checkpoint::new();
        self.text.to_checkpoint(&mut ckpt);
        self.visual.to_checkpoint(&mut ckpt);
        ckpt.insert(
            "prompt/mode",
            ndarray::arr1(&[
                if self.use_text { 1.0 } else { 0.0 },
                if self.use_visual { 1.0 } else { 0.0 },
                if self.hand_template.is_some() { 1.0 } else { 0.0 },
            ])
            .into_dyn(),
        );
        if let Some(t) = &self.hand_template {
            let blob: Vec<f64> = t.bytes().map(|b| b as f64).collect();
            ckpt.insert("prompt/hand_template_utf8", ndarray::Array1::from(blob).into_dyn());
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &crate::ckpt::Checkpoint) -> Result<Self> {
        let mode = ckpt.get("prompt/mode")?;
        let hand_template = if mode[[2]] != 0.0 {
            let bytes: Vec<u8> = ckpt
                .get("prompt/hand_template_utf8")?
                .iter()
                .map(|&v| v as u8)
                .collect();
            Some(
                String::from_utf8(bytes)
                    .map_err(|_| Error::Input("hand template blob not UTF-8".into()))?,
            )
        } else {
            None
        };
        Ok(Self {
            text: TextPromptState::from_checkpoint(ckpt)?,
            visual: VisualPromptState::from_checkpoint(ckpt)?,
            use_text: mode[[0]] != 0.0,
            use_visual: mode[[1]] != 0.0,
            hand_template,
        })
    }

    /// View through the frozen encoder for scoring.
    pub fn vlm<'a>(&'a self, encoder: &'a EncoderParams) -> crate::adapt::PromptedVlm<'a> {
        crate::adapt::PromptedVlm {
            encoder,
            text_prompt: self.use_text.then_some(&self.text),
            visual_prompt: self.use_visual.then_some(&self.visual),
            hand_template: self.hand_template.as_deref(),
        }
    }
}

#[cfg(test)]
mod tests;
