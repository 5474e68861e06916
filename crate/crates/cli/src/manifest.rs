//! Per-stage run manifests.
//!
//! Every stage records the hashes of the artifacts it consumed and produced;
//! re-running a stage with identical inputs must reproduce identical output
//! hashes. Wall time is informational and excluded from any hash.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub tag: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<FileRef>,
    pub outputs: Vec<FileRef>,
    pub wall_time_s: f64,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)
            .with_context(|| format!("writing manifest {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).with_context(|| format!("reading manifest {}", path.display()))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Output hashes keyed by relative path, for cross-run comparisons.
    pub fn output_hashes(&self) -> Vec<(String, String)> {
        self.outputs
            .iter()
            .map(|f| (f.path.clone(), f.sha256.clone()))
            .collect()
    }
}

/// Hash a file into a manifest entry with a root-relative path.
pub fn file_ref(root: &Path, path: &Path) -> Result<FileRef> {
    let rel = path
        .strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/");
    Ok(FileRef {
        path: rel,
        sha256: p3ovd::hash::sha256_file(path)
            .with_context(|| format!("hashing {}", path.display()))?,
    })
}

/// Artifact layout under one workspace root.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn ensure_dirs(&self) -> Result<()> {
        for d in [
            self.data_dir(),
            self.checkpoint_dir(),
            self.label_dir(),
            self.report_dir(),
            self.manifest_dir(),
            self.sweep_dir(),
        ] {
            std::fs::create_dir_all(&d)
                .with_context(|| format!("creating {}", d.display()))?;
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn label_dir(&self) -> PathBuf {
        self.root.join("labels")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn manifest_dir(&self) -> PathBuf {
        self.root.join("manifests")
    }

    pub fn sweep_dir(&self) -> PathBuf {
        self.root.join("sweeps")
    }

    pub fn dataset_manifest(&self) -> PathBuf {
        self.data_dir().join("manifest.json")
    }

    pub fn encoder_ckpt(&self) -> PathBuf {
        self.checkpoint_dir().join("encoder.p3ckpt")
    }

    pub fn rpn_ckpt(&self) -> PathBuf {
        self.checkpoint_dir().join("rpn.p3ckpt")
    }

    pub fn prompts_ckpt(&self, tag: &str) -> PathBuf {
        self.checkpoint_dir().join(format!("prompts_{tag}.p3ckpt"))
    }

    pub fn detector_ckpt(&self, tag: &str) -> PathBuf {
        self.checkpoint_dir().join(format!("detector_{tag}.p3ckpt"))
    }

    pub fn labels_file(&self, tag: &str) -> PathBuf {
        self.label_dir().join(format!("pseudo_labels_{tag}.jsonl"))
    }

    pub fn scoremap_dir(&self, tag: &str) -> PathBuf {
        self.label_dir().join(format!("scoremaps_{tag}"))
    }

    pub fn adapt_report(&self, tag: &str) -> PathBuf {
        self.report_dir().join(format!("adapt_{tag}.jsonl"))
    }

    pub fn detector_report(&self, tag: &str) -> PathBuf {
        self.report_dir().join(format!("detector_{tag}.json"))
    }

    pub fn detections_file(&self, tag: &str) -> PathBuf {
        self.report_dir().join(format!("detections_{tag}.jsonl"))
    }

    pub fn eval_report(&self, tag: &str) -> PathBuf {
        self.report_dir().join(format!("eval_{tag}.json"))
    }

    pub fn stage_manifest(&self, stage: &str, tag: &str) -> PathBuf {
        self.manifest_dir().join(format!("{stage}_{tag}.json"))
    }
}
