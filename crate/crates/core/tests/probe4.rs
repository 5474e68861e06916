//! Throwaway probe: does mixing attended class prototypes into raw pixel
//! features help novel-class mIoU, before any training? (ignored by default)

use p3ovd::adapt::argmax_label_grid;
use p3ovd::metrics::{downsample_mask, mean_iou_dense};
use p3ovd::prompts::{visual_prompt_forward, VisualPromptState};
use p3ovd::rng;
use p3ovd::synthdata::codec::BACKGROUND;
use p3ovd::synthdata::{generate_scene, DatasetConfig, LoadedScene, LoadedSplit};
use p3ovd::vlm::pretrain::{pretrain_contrastive, PretrainConfig};
use p3ovd::vlm::{class_embeddings, dense_score_map, encode_image_dense_raw};

fn build_split(cfg: &DatasetConfig, tag: &str, n: usize, offset: u32) -> LoadedSplit {
    let categories = cfg.category_set().unwrap();
    let blank_novel = tag == "train";
    let scenes = (0..n)
        .map(|i| {
            let seed = rng::derive_seed(0, &format!("data/scene/{tag}/{i}"));
            let (image, mut annotation) = generate_scene(cfg, seed, offset + i as u32).unwrap();
            if blank_novel {
                for v in annotation.dense_mask.iter_mut() {
                    if *v != BACKGROUND && !categories.is_base(*v as usize) {
                        *v = BACKGROUND;
                    }
                }
            }
            LoadedScene { image, annotation }
        })
        .collect();
    LoadedSplit { categories, scenes }
}

#[test]
#[ignore]
fn probe_prototype_mixing() {
    let dcfg = DatasetConfig::reference();
    let train = build_split(&dcfg, "train", 720, 0);
    let val = build_split(&dcfg, "val", 64, 10000);
    let pcfg = PretrainConfig {
        seed: rng::derive_seed(0, "stage/pretrain"),
        ..Default::default()
    };
    let (encoder, _) = pretrain_contrastive(&train, &pcfg).unwrap();
    let plain = class_embeddings(&encoder, &val.categories, None).unwrap();
    let novel = val.categories.novel_indices();
    let base = val.categories.base_indices();
    let d = encoder.embed_dim;

    // raw feature norm statistics
    let raw0 = encode_image_dense_raw(&encoder, &val.scenes[0].image).unwrap();
    let norms: Vec<f64> = raw0
        .values
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mean_norm = norms.iter().sum::<f64>() / norms.len() as f64;
    println!(
        "raw row norms: mean {mean_norm:.3} min {:.3} max {:.3}",
        norms.iter().cloned().fold(f64::INFINITY, f64::min),
        norms.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    );

    for eps in [0.0, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0] {
        let mut w = ndarray::Array2::zeros((2 * d, d));
        for i in 0..d {
            w[[i, i]] = 1.0;
            w[[d + i, i]] = eps;
        }
        let state = VisualPromptState {
            w,
            b: ndarray::Array1::zeros(d),
            relu: false,
        };
        let (mut ns, mut nn, mut bs, mut bn) = (0.0, 0, 0.0, 0);
        for scene in &val.scenes {
            let raw = encode_image_dense_raw(&encoder, &scene.image).unwrap();
            let mut fused = visual_prompt_forward(&state, &raw, &plain, &plain).unwrap();
            for mut row in fused.values.rows_mut() {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n >= 1e-12 {
                    row.mapv_inplace(|v| v / n);
                }
            }
            let s = dense_score_map(&fused, &plain).unwrap();
            let gt = downsample_mask(&scene.annotation.dense_mask, encoder.stride());
            let pred = argmax_label_grid(&s);
            if let Some(v) = mean_iou_dense(&pred, &gt, &novel) {
                ns += v;
                nn += 1;
            }
            if let Some(v) = mean_iou_dense(&pred, &gt, &base) {
                bs += v;
                bn += 1;
            }
        }
        println!(
            "eps={eps}: miou_novel {:.4} miou_base {:.4}",
            ns / nn.max(1) as f64,
            bs / bn.max(1) as f64
        );
    }
}
