//! Desk-scale open-vocabulary detection pipeline.
//!
//! The crate implements the full pretrain / adapt / pseudo-label / self-train
//! loop on a synthetic shapes benchmark:
//!
//! * [`synthdata`] — deterministic generator for a miniature detection
//!   benchmark with a base/novel category split, plus the on-disk codecs.
//! * [`vlm`] — the frozen toy vision-language model: a dense image encoder,
//!   a text encoder, global contrastive pretraining and the dense score map.
//! * [`prompts`] — the two learnable prompt modules (text and visual), the
//!   only trainable parameters of the adapting stage.
//! * [`adapt`] — dense-alignment fine-tuning of the prompt modules under
//!   supervision from the frozen model's own score map.
//! * [`pseudolabel`] — connected-region extraction, mask IoU scoring and
//!   pseudo-label emission for non-base classes, plus the toy RPN.
//! * [`detector`] — a toy two-stage detector whose classification layer is
//!   the frozen text-embedding matrix, trained on ground truth plus pseudo
//!   labels.
//! * [`metrics`] — mAP@0.5 and dense-score-map mIoU.
//!
//! All numerics run in `f64`; checkpoints and raster artifacts are stored as
//! little-endian `f32`/`u16` binary containers (see [`ckpt`] and
//! [`synthdata::codec`]).

pub mod adapt;
pub mod ckpt;
pub mod detector;
pub mod error;
pub mod geom;
pub mod graph;
pub mod hash;
pub mod metrics;
pub mod prompts;
pub mod pseudolabel;
pub mod rng;
pub mod synthdata;
pub mod vlm;

pub use error::{Error, Result};
