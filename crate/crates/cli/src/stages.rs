//! The six pipeline stages, each reading upstream artifacts from disk and
//! writing its own plus a run manifest. Stages share nothing in memory, so
//! any stage can be deleted and re-run in isolation.

use crate::config::PipelineConfig;
use crate::manifest::{file_ref, FileRef, RunManifest, Workspace};
use anyhow::Result;
use p3ovd::adapt::{argmax_label_grid, run_adapt};
use p3ovd::ckpt::Checkpoint;
use p3ovd::detector::{infer_detect, train_detector, DetectorParams};
use p3ovd::metrics::{detection_map, downsample_mask, mean_iou_dense, Detection, EvalReport};
use p3ovd::prompts::{PromptBundle, PromptLayout, TextPromptState, VisualPromptState};
use p3ovd::pseudolabel::rpn::{oracle_proposals, rpn_propose, train_rpn, RpnParams};
use p3ovd::pseudolabel::{
    generate_pseudo_labels, read_pseudo_label_file, write_pseudo_label_file, write_score_map,
    Connectivity, Proposal, PseudoLabelRecord, ScoreNormalization,
};
use p3ovd::synthdata::{self, generate_dataset, LoadedSplit};
use p3ovd::vlm::{class_embeddings, EncoderParams};
use std::path::Path;
use std::time::Instant;

fn elapsed(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        anyhow::bail!(p3ovd::Error::Input(format!(
            "{what} not found at {} (run the upstream stage first)",
            path.display()
        )));
    }
    Ok(())
}

pub fn load_train(ws: &Workspace) -> Result<LoadedSplit> {
    require(&ws.dataset_manifest(), "dataset")?;
    Ok(synthdata::load_split(&ws.data_dir().join("train"))?)
}

pub fn load_val(ws: &Workspace) -> Result<LoadedSplit> {
    require(&ws.dataset_manifest(), "dataset")?;
    Ok(synthdata::load_split(&ws.data_dir().join("val"))?)
}

/// The sealed train split: full ground truth paired with the shared images.
pub fn load_train_sealed(ws: &Workspace) -> Result<LoadedSplit> {
    require(&ws.dataset_manifest(), "dataset")?;
    Ok(synthdata::load_split_with(
        &ws.data_dir().join("train").join("sealed"),
        &ws.data_dir().join("train"),
    )?)
}

pub fn load_encoder(ws: &Workspace) -> Result<EncoderParams> {
    require(&ws.encoder_ckpt(), "encoder checkpoint")?;
    Ok(EncoderParams::from_checkpoint(&Checkpoint::read(&ws.encoder_ckpt())?)?)
}

pub fn load_prompts(ws: &Workspace, tag: &str) -> Result<PromptBundle> {
    let path = ws.prompts_ckpt(tag);
    require(&path, "prompt checkpoint")?;
    Ok(PromptBundle::from_checkpoint(&Checkpoint::read(&path)?)?)
}

pub fn load_or_train_rpn(cfg: &PipelineConfig, ws: &Workspace) -> Result<(RpnParams, Vec<FileRef>)> {
    let path = ws.rpn_ckpt();
    if path.exists() {
        let params = RpnParams::from_checkpoint(&Checkpoint::read(&path)?)?;
        return Ok((params, vec![file_ref(&ws.root, &path)?]));
    }
    let train = load_train(ws)?;
    let (params, log) = train_rpn(&train, &cfg.rpn)?;
    // audit trail for the base-class-only contract
    let audit_path = ws.report_dir().join("rpn_train_log.json");
    std::fs::write(&audit_path, serde_json::to_vec_pretty(&log)?)?;
    params.to_checkpoint().write(&path)?;
    Ok((
        params,
        vec![file_ref(&ws.root, &path)?, file_ref(&ws.root, &audit_path)?],
    ))
}

pub fn stage_gen_data(cfg: &PipelineConfig, ws: &Workspace) -> Result<RunManifest> {
    let start = Instant::now();
    ws.ensure_dirs()?;
    generate_dataset(
        &cfg.dataset,
        cfg.data.n_train,
        cfg.data.n_val,
        cfg.seed,
        &ws.data_dir(),
    )?;
    // the dataset manifest embeds per-file hashes, so it pins the whole tree
    let manifest = RunManifest {
        stage: "gen-data".into(),
        tag: "default".into(),
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        inputs: vec![],
        outputs: vec![file_ref(&ws.root, &ws.dataset_manifest())?],
        wall_time_s: elapsed(start),
    };
    manifest.write(&ws.stage_manifest("gen-data", "default"))?;
    Ok(manifest)
}

pub fn stage_pretrain(cfg: &PipelineConfig, ws: &Workspace) -> Result<RunManifest> {
    let start = Instant::now();
    ws.ensure_dirs()?;
    let train = load_train(ws)?;
    let (params, report) = p3ovd::vlm::pretrain::pretrain_contrastive(&train, &cfg.pretrain)?;
    params.to_checkpoint().write(&ws.encoder_ckpt())?;
    let report_path = ws.report_dir().join("pretrain.json");
    std::fs::write(&report_path, serde_json::to_vec_pretty(&report)?)?;

    let manifest = RunManifest {
        stage: "pretrain".into(),
        tag: "default".into(),
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        inputs: vec![file_ref(&ws.root, &ws.dataset_manifest())?],
        outputs: vec![
            file_ref(&ws.root, &ws.encoder_ckpt())?,
            file_ref(&ws.root, &report_path)?,
        ],
        wall_time_s: elapsed(start),
    };
    manifest.write(&ws.stage_manifest("pretrain", "default"))?;
    Ok(manifest)
}

pub fn stage_adapt(cfg: &PipelineConfig, ws: &Workspace, tag: &str) -> Result<RunManifest> {
    let start = Instant::now();
    ws.ensure_dirs()?;
    let encoder = load_encoder(ws)?;
    let train = load_train(ws)?;
    let val = load_val(ws)?;

    let layout = PromptLayout::new(cfg.adapt.layout_before, cfg.adapt.layout_total)?;
    let d = encoder.embed_dim;
    let text = TextPromptState::init(
        &mut p3ovd::rng::stream(cfg.adapt.seed, "adapt/init/text"),
        layout,
        d,
    );
    let visual = VisualPromptState::init(
        &mut p3ovd::rng::stream(cfg.adapt.seed, "adapt/init/visual"),
        d,
    );
    let (text, visual, report) = run_adapt(&encoder, text, visual, &train, &val, &cfg.adapt)?;
    anyhow::ensure!(
        report.encoder_hash_before == report.encoder_hash_after,
        "encoder weights changed during adaptation"
    );

    let bundle = PromptBundle {
        text,
        visual,
        use_text: cfg.adapt.use_text_prompt,
        use_visual: cfg.adapt.use_visual_prompt,
        hand_template: cfg.adapt.hand_template.clone(),
    };
    bundle.to_checkpoint().write(&ws.prompts_ckpt(tag))?;
    report.write_jsonl(&ws.adapt_report(tag))?;

    let manifest = RunManifest {
        stage: "adapt".into(),
        tag: tag.into(),
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        inputs: vec![
            file_ref(&ws.root, &ws.dataset_manifest())?,
            file_ref(&ws.root, &ws.encoder_ckpt())?,
        ],
        outputs: vec![
            file_ref(&ws.root, &ws.prompts_ckpt(tag))?,
            file_ref(&ws.root, &ws.adapt_report(tag))?,
        ],
        wall_time_s: elapsed(start),
    };
    manifest.write(&ws.stage_manifest("adapt", tag))?;
    Ok(manifest)
}

/// Proposals for every train scene, from the trained RPN or the oracle.
fn collect_proposals(
    cfg: &PipelineConfig,
    ws: &Workspace,
    train: &LoadedSplit,
    rpn: &RpnParams,
) -> Result<Vec<Vec<Proposal>>> {
    if cfg.label.oracle_proposals {
        // class-agnostic oracle: sealed box geometry with jitter
        let sealed = load_train_sealed(ws)?;
        Ok(sealed
            .scenes
            .iter()
            .map(|scene| {
                let (h, w, _) = scene.image.pixels.dim();
                oracle_proposals(
                    &scene.annotation.boxes,
                    (w as u32, h as u32),
                    cfg.label.oracle_jitter,
                    cfg.seed,
                    scene.image.id,
                )
            })
            .collect())
    } else {
        Ok(train
            .scenes
            .iter()
            .map(|scene| {
                rpn_propose(rpn, &scene.image, cfg.rpn.max_proposals, cfg.rpn.nms_iou)
            })
            .collect())
    }
}

pub fn stage_label(cfg: &PipelineConfig, ws: &Workspace, tag: &str) -> Result<RunManifest> {
    let start = Instant::now();
    ws.ensure_dirs()?;
    cfg.label.thresholds.validate()?;
    let encoder = load_encoder(ws)?;
    let bundle = load_prompts(ws, tag)?;
    let train = load_train(ws)?;
    let (rpn, mut extra_outputs) = load_or_train_rpn(cfg, ws)?;

    let vlm = bundle.vlm(&encoder);
    let categories = &train.categories;
    let keys = vlm.key_embeddings(categories)?;
    let values = vlm.value_embeddings(categories)?;
    let proposals = collect_proposals(cfg, ws, &train, &rpn)?;
    let normalization = if encoder.normalize {
        ScoreNormalization::MinMax
    } else {
        ScoreNormalization::None
    };

    let mut records = Vec::with_capacity(train.scenes.len());
    let scoremap_dir = ws.scoremap_dir(tag);
    if cfg.label.save_scoremaps {
        std::fs::create_dir_all(&scoremap_dir)?;
    }
    for (scene, props) in train.scenes.iter().zip(&proposals) {
        let s = vlm.score_map_with(&scene.image, &keys, &values)?;
        if cfg.label.save_scoremaps {
            let path = scoremap_dir.join(format!("img_{:06}.p3smap", scene.image.id));
            write_score_map(&path, &s)?;
        }
        let labels = generate_pseudo_labels(
            &s,
            scene.image.id,
            props,
            &cfg.label.thresholds,
            categories,
            encoder.stride(),
            normalization,
            Connectivity::Four,
        )?;
        records.push(PseudoLabelRecord::from_labels(
            scene.image.id,
            &labels,
            cfg.label.thresholds,
            normalization,
        ));
    }
    write_pseudo_label_file(&ws.labels_file(tag), &records)?;

    let mut outputs = vec![file_ref(&ws.root, &ws.labels_file(tag))?];
    outputs.append(&mut extra_outputs);
    let manifest = RunManifest {
        stage: "label".into(),
        tag: tag.into(),
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        inputs: vec![
            file_ref(&ws.root, &ws.dataset_manifest())?,
            file_ref(&ws.root, &ws.encoder_ckpt())?,
            file_ref(&ws.root, &ws.prompts_ckpt(tag))?,
        ],
        outputs,
        wall_time_s: elapsed(start),
    };
    manifest.write(&ws.stage_manifest("label", tag))?;
    Ok(manifest)
}

pub fn stage_train_detector(
    cfg: &PipelineConfig,
    ws: &Workspace,
    tag: &str,
    prompts_tag: &str,
    use_pseudo: bool,
) -> Result<RunManifest> {
    let start = Instant::now();
    ws.ensure_dirs()?;
    let encoder = load_encoder(ws)?;
    let bundle = load_prompts(ws, prompts_tag)?;
    let train = load_train(ws)?;
    let (rpn, _) = load_or_train_rpn(cfg, ws)?;

    let categories = &train.categories;
    let embeddings = if cfg.prompted_classifier {
        bundle.vlm(&encoder).key_embeddings(categories)?
    } else {
        class_embeddings(&encoder, categories, None)?
    };

    let mut inputs = vec![
        file_ref(&ws.root, &ws.dataset_manifest())?,
        file_ref(&ws.root, &ws.encoder_ckpt())?,
        file_ref(&ws.root, &ws.prompts_ckpt(prompts_tag))?,
        file_ref(&ws.root, &ws.rpn_ckpt())?,
    ];
    let pseudo = if use_pseudo {
        let path = ws.labels_file(tag);
        require(&path, "pseudo-label file")?;
        inputs.push(file_ref(&ws.root, &path)?);
        read_pseudo_label_file(&path)?
    } else {
        vec![]
    };

    let (params, log) = train_detector(&train, &pseudo, &embeddings, rpn, &cfg.detector)?;
    anyhow::ensure!(
        log.classifier_hash_before == log.classifier_hash_after,
        "classifier rows changed during self-training"
    );
    params.to_checkpoint().write(&ws.detector_ckpt(tag))?;
    std::fs::write(&ws.detector_report(tag), serde_json::to_vec_pretty(&log)?)?;

    let manifest = RunManifest {
        stage: "train-detector".into(),
        tag: tag.into(),
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        inputs,
        outputs: vec![
            file_ref(&ws.root, &ws.detector_ckpt(tag))?,
            file_ref(&ws.root, &ws.detector_report(tag))?,
        ],
        wall_time_s: elapsed(start),
    };
    manifest.write(&ws.stage_manifest("train-detector", tag))?;
    Ok(manifest)
}

pub fn load_detector(ws: &Workspace, tag: &str) -> Result<DetectorParams> {
    let path = ws.detector_ckpt(tag);
    require(&path, "detector checkpoint")?;
    Ok(DetectorParams::from_checkpoint(&Checkpoint::read(&path)?)?)
}

pub fn stage_eval(
    cfg: &PipelineConfig,
    ws: &Workspace,
    tag: &str,
    prompts_tag: &str,
    detections_override: Option<&Path>,
) -> Result<(RunManifest, EvalReport)> {
    let start = Instant::now();
    ws.ensure_dirs()?;
    let val = load_val(ws)?;
    let categories = &val.categories;
    let mut inputs = vec![file_ref(&ws.root, &ws.dataset_manifest())?];
    let mut outputs = Vec::new();

    let detections: Vec<Detection> = match detections_override {
        Some(path) => {
            require(path, "detections file")?;
            inputs.push(file_ref(&ws.root, path)?);
            p3ovd::detector::read_detections_jsonl(path)?
        }
        None => {
            let detector = load_detector(ws, tag)?;
            inputs.push(file_ref(&ws.root, &ws.detector_ckpt(tag))?);
            let mut all = Vec::new();
            for scene in &val.scenes {
                all.extend(infer_detect(
                    &detector,
                    &scene.image,
                    cfg.eval.score_thresh,
                    cfg.eval.nms_iou,
                ));
            }
            p3ovd::detector::write_detections_jsonl(&ws.detections_file(tag), &all)?;
            outputs.push(file_ref(&ws.root, &ws.detections_file(tag))?);
            all
        }
    };

    let gt: Vec<(u32, p3ovd::geom::BoxF, usize)> = val
        .scenes
        .iter()
        .flat_map(|scene| {
            scene
                .annotation
                .boxes
                .iter()
                .zip(&scene.annotation.class_ids)
                .map(|(b, &c)| (scene.image.id, b.to_f(), c))
        })
        .collect();
    let summary = detection_map(&detections, &gt, categories, 0.5);

    // dense mIoU of the adapted score map on the val split
    let (miou_novel, miou_base) = match (load_encoder(ws), load_prompts(ws, prompts_tag)) {
        (Ok(encoder), Ok(bundle)) => {
            inputs.push(file_ref(&ws.root, &ws.encoder_ckpt())?);
            inputs.push(file_ref(&ws.root, &ws.prompts_ckpt(prompts_tag))?);
            let vlm = bundle.vlm(&encoder);
            let keys = vlm.key_embeddings(categories)?;
            let values = vlm.value_embeddings(categories)?;
            let novel = categories.novel_indices();
            let base = categories.base_indices();
            let (mut ns, mut nn, mut bs, mut bn) = (0.0, 0usize, 0.0, 0usize);
            for scene in &val.scenes {
                let s = vlm.score_map_with(&scene.image, &keys, &values)?;
                let gt_grid = downsample_mask(&scene.annotation.dense_mask, encoder.stride());
                let pred = argmax_label_grid(&s);
                if let Some(v) = mean_iou_dense(&pred, &gt_grid, &novel) {
                    ns += v;
                    nn += 1;
                }
                if let Some(v) = mean_iou_dense(&pred, &gt_grid, &base) {
                    bs += v;
                    bn += 1;
                }
            }
            (
                (nn > 0).then(|| ns / nn as f64),
                (bn > 0).then(|| bs / bn as f64),
            )
        }
        _ => (None, None),
    };

    let report = EvalReport {
        map_novel: summary.map_novel,
        map_base: summary.map_base,
        map_overall: summary.map_overall,
        per_class_ap: summary
            .per_class_ap
            .iter()
            .map(|(&c, &ap)| (categories.name(c).to_string(), ap))
            .collect(),
        miou_novel,
        miou_base,
        config: serde_json::json!({
            "seed": cfg.seed,
            "split": "val",
            "tag": tag,
            "score_thresh": cfg.eval.score_thresh,
            "nms_iou": cfg.eval.nms_iou,
            "thresholds": cfg.label.thresholds,
        }),
    };
    report.write(&ws.eval_report(tag))?;
    outputs.push(file_ref(&ws.root, &ws.eval_report(tag))?);

    let manifest = RunManifest {
        stage: "eval".into(),
        tag: tag.into(),
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        inputs,
        outputs,
        wall_time_s: elapsed(start),
    };
    manifest.write(&ws.stage_manifest("eval", tag))?;
    Ok((manifest, report))
}

/// Novel-class mAP of a pseudo-label file against the sealed train ground
/// truth (the pseudo-label quality number).
pub fn pseudo_label_quality(
    ws: &Workspace,
    records: &[PseudoLabelRecord],
) -> Result<p3ovd::metrics::MapSummary> {
    let sealed = load_train_sealed(ws)?;
    let detections: Vec<Detection> = records
        .iter()
        .flat_map(|r| {
            r.labels.iter().map(move |l| Detection {
                image_id: r.image_id,
                bbox: p3ovd::geom::BoxF::new(l.bbox[0], l.bbox[1], l.bbox[2], l.bbox[3]),
                category_index: l.category_index,
                score: l.confidence,
            })
        })
        .collect();
    let gt: Vec<(u32, p3ovd::geom::BoxF, usize)> = sealed
        .scenes
        .iter()
        .flat_map(|scene| {
            scene
                .annotation
                .boxes
                .iter()
                .zip(&scene.annotation.class_ids)
                .map(|(b, &c)| (scene.image.id, b.to_f(), c))
        })
        .collect();
    Ok(detection_map(&detections, &gt, &sealed.categories, 0.5))
}
