use super::*;
use crate::graph::Graph;
use crate::rng::stream;
use crate::vlm::{encode_text, ConvLayer, Vocabulary};
use ndarray::{arr1, arr2, Array4};

fn test_encoder(normalize: bool) -> EncoderParams {
    EncoderParams {
        embed_dim: 2,
        conv: vec![ConvLayer {
            weight: Array4::zeros((2, 3, 1, 1)),
            bias: arr1(&[0.0, 0.0]),
            stride: 1,
            pad: 0,
            relu: false,
        }],
        token_embed: arr2(&[[1.0, 0.0], [0.0, 1.0], [0.5, -0.5], [2.0, 1.0]]),
        text_w: ndarray::Array2::eye(2),
        text_b: arr1(&[0.0, 0.0]),
        vocab: Vocabulary::new(vec![
            "red".into(),
            "circle".into(),
            "blue".into(),
            "square".into(),
        ]),
        normalize,
        frozen: true,
    }
}

#[test]
fn prompted_sequence_layouts() {
    let cat = vec![7usize];
    let front = build_prompted_sequence(&cat, PromptLayout::new(0, 1).unwrap()).unwrap();
    assert_eq!(front, vec![SequenceSlot::Token(7), SequenceSlot::Prompt(0)]);

    let mid = build_prompted_sequence(&cat, PromptLayout::new(1, 2).unwrap()).unwrap();
    assert_eq!(
        mid,
        vec![
            SequenceSlot::Prompt(0),
            SequenceSlot::Token(7),
            SequenceSlot::Prompt(1)
        ]
    );

    let bare = build_prompted_sequence(&cat, PromptLayout::new(0, 0).unwrap()).unwrap();
    assert_eq!(bare, vec![SequenceSlot::Token(7)]);

    assert!(matches!(
        PromptLayout::new(3, 2),
        Err(crate::Error::Layout { .. })
    ));
}

#[test]
fn empty_prompt_reduces_to_plain_encoding() {
    let encoder = test_encoder(true);
    let mut rng = stream(1, "prompts/m0");
    let state = TextPromptState::init(&mut rng, PromptLayout::new(0, 0).unwrap(), 2);
    let prompted = text_prompt_forward(&state, &[0, 1], &encoder).unwrap();
    let plain = encode_text(&encoder, &[vec![0, 1]]).unwrap();
    for d in 0..2 {
        assert!((prompted[d] - plain.values[[0, d]]).abs() < 1e-12);
    }
}

#[test]
fn zero_weights_collapse_to_padded_mean() {
    // un-normalized, identity projection: the output is exactly the mean of
    // [0-vec, cat tokens..., 0-vec] rows
    let encoder = test_encoder(false);
    let state = TextPromptState::zeros(PromptLayout::new(1, 2).unwrap(), 2);
    let out = text_prompt_forward(&state, &[0, 1], &encoder).unwrap();
    // sequence rows: h1=0, e(red)=[1,0], e(circle)=[0,1], h2=0 -> mean over 4
    assert!((out[0] - 0.25).abs() < 1e-12);
    assert!((out[1] - 0.25).abs() < 1e-12);
}

#[test]
fn hand_unrolled_recurrence_oracle() {
    // one prompt token before the category token, D = H = 2
    let d = 2usize;
    let mut state = TextPromptState::zeros(PromptLayout::new(1, 1).unwrap(), d);
    state.embeddings = arr2(&[[0.3, -0.7]]);
    state.forward.w_ih = arr2(&[
        [0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8],
        [0.2, 0.1, -0.1, 0.3, 0.2, -0.3, 0.1, 0.5],
    ]);
    state.forward.w_hh = arr2(&[
        [0.05, 0.1, -0.05, 0.2, 0.1, 0.0, -0.1, 0.3],
        [0.0, -0.2, 0.1, 0.05, -0.15, 0.25, 0.2, -0.1],
    ]);
    state.forward.bias = arr1(&[0.01, -0.02, 0.03, 0.04, 0.05, -0.06, 0.07, 0.08]);
    state.mlp_w1 = arr2(&[
        [0.5, -0.3],
        [0.2, 0.7],
        [-0.4, 0.1],
        [0.6, -0.2],
    ]);
    state.mlp_b1 = arr1(&[0.1, -0.1]);
    state.mlp_w2 = arr2(&[[1.0, 0.5], [-0.5, 0.25]]);
    state.mlp_b2 = arr1(&[0.0, 0.2]);

    // independent step-by-step recurrence with scalar arithmetic
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    let x = [0.3f64, -0.7];
    let mut gates = [0.0f64; 8];
    for (g_idx, gate) in gates.iter_mut().enumerate() {
        *gate = x[0] * state.forward.w_ih[[0, g_idx]]
            + x[1] * state.forward.w_ih[[1, g_idx]]
            + state.forward.bias[g_idx];
    }
    let (mut h_cell, mut c_cell) = ([0.0f64; 2], [0.0f64; 2]);
    for k in 0..2 {
        let i = sigmoid(gates[k]);
        let f = sigmoid(gates[2 + k]);
        let z = gates[4 + k].tanh();
        let o = sigmoid(gates[6 + k]);
        c_cell[k] = f * 0.0 + i * z;
        h_cell[k] = o * c_cell[k].tanh();
    }
    // concat [h, 0], two-layer ReLU MLP
    let cat = [h_cell[0], h_cell[1], 0.0, 0.0];
    let mut hidden = [0.0f64; 2];
    for (j, hv) in hidden.iter_mut().enumerate() {
        let mut acc = state.mlp_b1[j];
        for (k, c) in cat.iter().enumerate() {
            acc += c * state.mlp_w1[[k, j]];
        }
        *hv = acc.max(0.0);
    }
    let mut expect = [0.0f64; 2];
    for (j, e) in expect.iter_mut().enumerate() {
        let mut acc = state.mlp_b2[j];
        for (k, h) in hidden.iter().enumerate() {
            acc += h * state.mlp_w2[[k, j]];
        }
        *e = acc;
    }

    let mut g = Graph::new();
    let vars = state.graph_leaves(&mut g);
    let vecs = graph_prompt_vectors(&mut g, &state, &vars);
    assert_eq!(vecs.len(), 1);
    let got = g.value(vecs[0]);
    for d in 0..2 {
        assert!(
            (got[[0, d]] - expect[d]).abs() < 1e-12,
            "dim {d}: {} vs {}",
            got[[0, d]],
            expect[d]
        );
    }
}

#[test]
fn context_flows_through_the_prefix_chain() {
    // with everything in the prefix (l = m = 2), h_2 must react to q_1
    let mut rng = stream(2, "prompts/bidir");
    let mut state = TextPromptState::init(&mut rng, PromptLayout::new(2, 2).unwrap(), 3);
    let mut g = Graph::new();
    let vars = state.graph_leaves(&mut g);
    let base_var = graph_prompt_vectors(&mut g, &state, &vars)[1];
    let base = g.value(base_var).clone();

    state.embeddings[[0, 0]] += 0.5;
    let mut g2 = Graph::new();
    let vars2 = state.graph_leaves(&mut g2);
    let moved_var = graph_prompt_vectors(&mut g2, &state, &vars2)[1];
    let moved = g2.value(moved_var).clone();
    assert!((&base - &moved).iter().any(|v| v.abs() > 1e-9));
}

#[test]
fn context_flows_backward_through_the_suffix_chain() {
    // with everything in the suffix (l = 0), h_1 must react to q_m
    let mut rng = stream(3, "prompts/bwd");
    let mut state = TextPromptState::init(&mut rng, PromptLayout::new(0, 2).unwrap(), 3);
    let mut g = Graph::new();
    let vars = state.graph_leaves(&mut g);
    let base_var = graph_prompt_vectors(&mut g, &state, &vars)[0];
    let base = g.value(base_var).clone();

    state.embeddings[[1, 1]] -= 0.4;
    let mut g2 = Graph::new();
    let vars2 = state.graph_leaves(&mut g2);
    let moved_var = graph_prompt_vectors(&mut g2, &state, &vars2)[0];
    let moved = g2.value(moved_var).clone();
    assert!((&base - &moved).iter().any(|v| v.abs() > 1e-9));
}

fn feature_map(values: ndarray::Array2<f64>) -> DenseFeatureMap {
    let rows = values.nrows();
    DenseFeatureMap {
        values,
        grid: (1, rows),
        stride: 1,
    }
}

fn embeddings(values: ndarray::Array2<f64>, names: &[&str]) -> ClassEmbeddings {
    ClassEmbeddings {
        values,
        names: names.iter().map(|s| s.to_string()).collect(),
        normalized: false,
    }
}

/// Fusion weights that pass the attended context straight through.
fn pick_attended(d: usize) -> VisualPromptState {
    let mut w = ndarray::Array2::zeros((2 * d, d));
    for i in 0..d {
        w[[d + i, i]] = 1.0;
    }
    VisualPromptState {
        w,
        b: ndarray::Array1::zeros(d),
        relu: false,
    }
}

#[test]
fn single_class_attention_is_identity() {
    let state = pick_attended(2);
    let f = feature_map(arr2(&[[0.3, -0.8], [1.5, 0.2]]));
    let tp = embeddings(arr2(&[[0.9, 0.1]]), &["only"]);
    let tv = embeddings(arr2(&[[-0.4, 2.0]]), &["only"]);
    let out = visual_prompt_forward(&state, &f, &tp, &tv).unwrap();
    for p in 0..2 {
        assert!((out.values[[p, 0]] - -0.4).abs() < 1e-12);
        assert!((out.values[[p, 1]] - 2.0).abs() < 1e-12);
    }
}

#[test]
fn orthogonal_queries_attend_uniformly() {
    let state = pick_attended(4);
    // pixel rows live in dims {2,3}; key rows live in dims {0,1}
    let f = feature_map(arr2(&[[0.0, 0.0, 1.0, -2.0]]));
    let tp = embeddings(
        arr2(&[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.5, 0.5, 0.0, 0.0]]),
        &["a", "b", "c"],
    );
    let tv = embeddings(
        arr2(&[
            [3.0, 0.0, 0.0, 0.0],
            [0.0, 6.0, 0.0, 0.0],
            [0.0, 0.0, 9.0, 0.0],
        ]),
        &["a", "b", "c"],
    );
    let out = visual_prompt_forward(&state, &f, &tp, &tv).unwrap();
    // uniform weights -> mean of value rows
    let expect = [1.0, 2.0, 3.0, 0.0];
    for d in 0..4 {
        assert!((out.values[[0, d]] - expect[d]).abs() < 1e-12);
    }
}

#[test]
fn two_pixel_two_class_matches_dense_oracle() {
    let mut rng = stream(4, "prompts/vp-oracle");
    let state = VisualPromptState::init(&mut rng, 2);
    let fv = arr2(&[[0.25, -1.0], [2.0, 0.5]]);
    let tpv = arr2(&[[1.0, 0.2], [-0.3, 0.8]]);
    let tvv = arr2(&[[0.6, -0.6], [1.1, 0.9]]);
    let f = feature_map(fv.clone());
    let tp = embeddings(tpv.clone(), &["a", "b"]);
    let tv = embeddings(tvv.clone(), &["a", "b"]);
    let out = visual_prompt_forward(&state, &f, &tp, &tv).unwrap();

    // independently coded softmax–matmul–concat–affine chain
    let scale = 1.0 / (2.0f64).sqrt();
    for p in 0..2 {
        let logits: Vec<f64> = (0..2)
            .map(|c| scale * (fv[[p, 0]] * tpv[[c, 0]] + fv[[p, 1]] * tpv[[c, 1]]))
            .collect();
        let max = logits[0].max(logits[1]);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let attn: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let attended: Vec<f64> = (0..2)
            .map(|d| attn[0] * tvv[[0, d]] + attn[1] * tvv[[1, d]])
            .collect();
        let cat = [fv[[p, 0]], fv[[p, 1]], attended[0], attended[1]];
        for d in 0..2 {
            let mut acc = state.b[d];
            for (k, c) in cat.iter().enumerate() {
                acc += c * state.w[[k, d]];
            }
            assert!(
                (out.values[[p, d]] - acc).abs() < 1e-12,
                "pixel {p} dim {d}"
            );
        }
    }
}

#[test]
fn attention_rows_are_stochastic_and_shift_invariant() {
    let mut rng = stream(5, "prompts/attn");
    let d = 3usize;
    let state = pick_attended(d);
    // rows of equal sum so an all-ones query offset shifts every logit equally
    let tpv = arr2(&[[1.0, 2.0, 0.0], [0.0, 1.0, 2.0], [2.0, 0.0, 1.0]]);
    let tvv = crate::graph::randn2(&mut rng, 3, 3, 1.0);
    let tp = embeddings(tpv, &["a", "b", "c"]);
    let tv = embeddings(tvv, &["a", "b", "c"]);

    for trial in 0..50 {
        let fv = crate::graph::randn2(&mut rng, 4, d, 1.0);
        let f = feature_map(fv.clone());
        let out = visual_prompt_forward(&state, &f, &tp, &tv).unwrap();

        // attended rows are convex combinations: reconstruct weights against
        // the value rows and check nonnegativity + sum 1 via the softmax itself
        let scale = 1.0 / (d as f64).sqrt();
        for p in 0..4 {
            let logits: Vec<f64> = (0..3)
                .map(|c| scale * fv.row(p).dot(&tp.values.row(c)))
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let sum: f64 = exps.iter().map(|e| e / z).sum();
            assert!((sum - 1.0).abs() < 1e-9, "trial {trial}");
            assert!(exps.iter().all(|e| e / z >= 0.0));
        }

        // shift invariance: adding a constant to all logits of one pixel
        let mut shifted = fv.clone();
        for v in shifted.row_mut(0).iter_mut() {
            *v += 0.7; // adds 0.7 * rowsum(tp) * scale = equal offset per class
        }
        let out2 = visual_prompt_forward(&state, &feature_map(shifted), &tp, &tv).unwrap();
        for d_i in 0..d {
            assert!(
                (out.values[[0, d_i]] - out2.values[[0, d_i]]).abs() < 1e-9,
                "trial {trial}: attention moved under a uniform logit shift"
            );
        }
    }
}

#[test]
fn values_are_linear_keys_only_reweight() {
    let mut rng = stream(6, "prompts/kv");
    let d = 3usize;
    let state = pick_attended(d);
    let fv = crate::graph::randn2(&mut rng, 2, d, 1.0);
    let tpv = crate::graph::randn2(&mut rng, 3, d, 1.0);
    // identity basis values: attended coordinates ARE the attention weights
    let tvv = ndarray::Array2::eye(3);
    let f = feature_map(fv.clone());
    let tp = embeddings(tpv.clone(), &["a", "b", "c"]);
    let tv = embeddings(tvv.clone(), &["a", "b", "c"]);
    let base = visual_prompt_forward(&state, &f, &tp, &tv).unwrap();

    // value perturbation: exactly linear in the values
    let delta = crate::graph::randn2(&mut rng, 3, d, 1.0);
    let t_eps = |eps: f64| embeddings(&tvv + &(&delta * eps), &["a", "b", "c"]);
    let out_half = visual_prompt_forward(&state, &f, &tp, &t_eps(0.5)).unwrap();
    let out_one = visual_prompt_forward(&state, &f, &tp, &t_eps(1.0)).unwrap();
    for p in 0..2 {
        for k in 0..d {
            let d_half = out_half.values[[p, k]] - base.values[[p, k]];
            let d_one = out_one.values[[p, k]] - base.values[[p, k]];
            assert!((2.0 * d_half - d_one).abs() < 1e-9, "value path not linear");
        }
    }

    // key perturbation: coordinates move but stay a probability vector
    let tp2 = embeddings(&tpv + &(&delta * 0.5), &["a", "b", "c"]);
    let rew = visual_prompt_forward(&state, &f, &tp2, &tv).unwrap();
    for p in 0..2 {
        let row_sum: f64 = rew.values.row(p).sum();
        assert!((row_sum - 1.0).abs() < 1e-9);
        assert!(rew.values.row(p).iter().all(|&v| v >= 0.0));
        let moved = (0..3).any(|k| (rew.values[[p, k]] - base.values[[p, k]]).abs() > 1e-9);
        assert!(moved, "key perturbation left the weights unchanged");
    }
}

#[test]
fn order_mismatch_is_an_input_error() {
    let state = pick_attended(2);
    let f = feature_map(arr2(&[[1.0, 0.0]]));
    let tp = embeddings(arr2(&[[1.0, 0.0], [0.0, 1.0]]), &["a", "b"]);
    let tv = embeddings(arr2(&[[1.0, 0.0], [0.0, 1.0]]), &["b", "a"]);
    assert!(matches!(
        visual_prompt_forward(&state, &f, &tp, &tv),
        Err(crate::Error::Input(_))
    ));
}

#[test]
fn prompt_states_round_trip_through_checkpoints() {
    let mut rng = stream(7, "prompts/ckpt");
    let text = TextPromptState::init(&mut rng, PromptLayout::new(1, 3).unwrap(), 4);
    let visual = VisualPromptState::init(&mut rng, 4);

    let mut ckpt = crate::ckpt::Checkpoint::new();
    text.to_checkpoint(&mut ckpt);
    visual.to_checkpoint(&mut ckpt);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prompts.p3ckpt");
    ckpt.write(&path).unwrap();
    let back = crate::ckpt::Checkpoint::read(&path).unwrap();

    let text2 = TextPromptState::from_checkpoint(&back).unwrap();
    let visual2 = VisualPromptState::from_checkpoint(&back).unwrap();
    assert_eq!(text2.layout, text.layout);
    // storage is f32: values agree to f32 precision and a second round trip
    // is a fixed point
    for (a, b) in text.embeddings.iter().zip(text2.embeddings.iter()) {
        assert_eq!(*a as f32, *b as f32);
    }
    let mut ckpt2 = crate::ckpt::Checkpoint::new();
    text2.to_checkpoint(&mut ckpt2);
    visual2.to_checkpoint(&mut ckpt2);
    let path2 = dir.path().join("prompts2.p3ckpt");
    ckpt2.write(&path2).unwrap();
    let back2 = crate::ckpt::Checkpoint::read(&path2).unwrap();
    let text3 = TextPromptState::from_checkpoint(&back2).unwrap();
    let visual3 = VisualPromptState::from_checkpoint(&back2).unwrap();
    assert_eq!(text2.weight_hash(), text3.weight_hash());
    assert_eq!(visual2.weight_hash(), visual3.weight_hash());
}
