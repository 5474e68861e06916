//! Resolved pipeline configuration.
//!
//! Values resolve in precedence order: built-in defaults, then a flat
//! `key=value` config file (section-prefixed keys, `#` comments), then
//! command-line overrides. One root seed feeds every named random stream.

use anyhow::{bail, Context, Result};
use p3ovd::adapt::AdaptConfig;
use p3ovd::detector::DetectorConfig;
use p3ovd::pseudolabel::rpn::RpnConfig;
use p3ovd::pseudolabel::Thresholds;
use p3ovd::synthdata::DatasetConfig;
use p3ovd::vlm::pretrain::PretrainConfig;
use serde::Serialize;
use std::path::Path;

#[derive(Clone, Debug, Serialize)]
pub struct DataSection {
    pub n_train: usize,
    pub n_val: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct LabelSection {
    pub thresholds: Thresholds,
    pub oracle_proposals: bool,
    pub oracle_jitter: f64,
    pub save_scoremaps: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSection {
    pub score_thresh: f64,
    pub nms_iou: f64,
}

/// Everything a full pipeline run needs, resolved and hashable.
#[derive(Clone, Debug, Serialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataSection,
    pub dataset: DatasetConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub rpn: RpnConfig,
    pub label: LabelSection,
    pub detector: DetectorConfig,
    /// Use prompted text embeddings as the detector classifier (switchable).
    pub prompted_classifier: bool,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection {
                n_train: 720,
                n_val: 64,
            },
            dataset: DatasetConfig::reference(),
            pretrain: PretrainConfig::default(),
            adapt: AdaptConfig::default(),
            rpn: RpnConfig::default(),
            label: LabelSection {
                thresholds: Thresholds::default(),
                oracle_proposals: false,
                oracle_jitter: 0.05,
                save_scoremaps: false,
            },
            detector: DetectorConfig::default(),
            prompted_classifier: true,
            eval: EvalSection {
                score_thresh: 0.35,
                nms_iou: 0.5,
            },
        }
    }
}

impl PipelineConfig {
    /// Apply one `section.key=value` override.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_u = |v: &str| -> Result<usize> {
            v.parse().with_context(|| format!("bad integer '{v}' for {key}"))
        };
        let parse_f = |v: &str| -> Result<f64> {
            v.parse().with_context(|| format!("bad float '{v}' for {key}"))
        };
        let parse_b = |v: &str| -> Result<bool> {
            match v {
                "true" | "on" | "1" => Ok(true),
                "false" | "off" | "0" => Ok(false),
                _ => bail!("bad boolean '{v}' for {key}"),
            }
        };
        match key {
            "seed" => self.seed = value.parse().with_context(|| format!("bad seed '{value}'"))?,
            "data.n_train" => self.data.n_train = parse_u(value)?,
            "data.n_val" => self.data.n_val = parse_u(value)?,
            "data.height" => self.dataset.height = parse_u(value)? as u32,
            "data.width" => self.dataset.width = parse_u(value)? as u32,
            "data.min_objects" => self.dataset.min_objects = parse_u(value)? as u32,
            "data.max_objects" => self.dataset.max_objects = parse_u(value)? as u32,
            "pretrain.epochs" => self.pretrain.epochs = parse_u(value)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse_u(value)?,
            "pretrain.lr" => self.pretrain.lr = parse_f(value)?,
            "pretrain.temperature" => self.pretrain.temperature = parse_f(value)?,
            "pretrain.embed_dim" => self.pretrain.embed_dim = parse_u(value)?,
            "pretrain.normalize" => self.pretrain.normalize = parse_b(value)?,
            "pretrain.template" => self.pretrain.template = value.to_string(),
            "adapt.epochs" => self.adapt.epochs = parse_u(value)?,
            "adapt.lr_text" => self.adapt.lr_text = parse_f(value)?,
            "adapt.lr_visual" => self.adapt.lr_visual = parse_f(value)?,
            "adapt.batch_size" => self.adapt.batch_size = parse_u(value)?,
            "adapt.temperature" => self.adapt.temperature = parse_f(value)?,
            "adapt.text_prompt" => self.adapt.use_text_prompt = parse_b(value)?,
            "adapt.visual_prompt" => self.adapt.use_visual_prompt = parse_b(value)?,
            "adapt.soft_targets" => self.adapt.soft_targets = parse_b(value)?,
            "adapt.layout_before" => self.adapt.layout_before = parse_u(value)?,
            "adapt.layout_total" => self.adapt.layout_total = parse_u(value)?,
            "rpn.epochs" => self.rpn.epochs = parse_u(value)?,
            "rpn.lr" => self.rpn.lr = parse_f(value)?,
            "rpn.max_proposals" => self.rpn.max_proposals = parse_u(value)?,
            "label.delta" => self.label.thresholds.delta = parse_f(value)?,
            "label.gamma" => self.label.thresholds.gamma = parse_f(value)?,
            "label.objectness" => self.label.thresholds.objectness_min = parse_f(value)?,
            "label.oracle_proposals" => self.label.oracle_proposals = parse_b(value)?,
            "label.save_scoremaps" => self.label.save_scoremaps = parse_b(value)?,
            "detector.epochs" => self.detector.epochs = parse_u(value)?,
            "detector.lr" => self.detector.lr = parse_f(value)?,
            "detector.weight_decay" => self.detector.weight_decay = parse_f(value)?,
            "detector.rois_per_image" => self.detector.rois_per_image = parse_u(value)?,
            "detector.prompted_classifier" => self.prompted_classifier = parse_b(value)?,
            "eval.score_thresh" => self.eval.score_thresh = parse_f(value)?,
            "eval.nms_iou" => self.eval.nms_iou = parse_f(value)?,
            _ => bail!("unknown config key '{key}'"),
        }
        Ok(())
    }

    /// Load overrides from a flat key=value file.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("config line {} is not key=value: '{line}'", lineno + 1);
            };
            self.apply(key.trim(), value.trim())
                .with_context(|| format!("config line {}", lineno + 1))?;
        }
        Ok(())
    }

    /// Propagate the root seed into the per-stage configs.
    pub fn finalize(&mut self) {
        self.pretrain.seed = p3ovd::rng::derive_seed(self.seed, "stage/pretrain");
        self.adapt.seed = p3ovd::rng::derive_seed(self.seed, "stage/adapt");
        self.rpn.seed = p3ovd::rng::derive_seed(self.seed, "stage/rpn");
        self.detector.seed = p3ovd::rng::derive_seed(self.seed, "stage/detector");
    }

    /// Hash of the fully resolved configuration.
    pub fn config_hash(&self) -> String {
        p3ovd::hash::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}
