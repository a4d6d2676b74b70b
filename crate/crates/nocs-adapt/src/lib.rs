//! Category-level object pose and size estimation from normalized object
//! coordinates (NOCS), plus the self-training machinery to adapt a per-point
//! predictor from a labeled source split to an unlabeled target split.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`geom`] — similarity transforms, Umeyama alignment, RANSAC pose fitting,
//!   and symmetry-aware rotation errors.
//! - [`nocs`] — NOCS maps, binned classification encodings, cross-entropy
//!   losses and gradients, and pose + size recovery from a prediction.
//! - [`filter`] — bidirectional point filtering of pseudo labels against
//!   observed depth, plus the confidence/entropy/ensemble baseline filters.
//! - [`synth`] — procedural scene generation with exact ground truth and
//!   configurable noise, outlier, and domain-shift models.
//! - [`adapt`] — the toy multi-branch predictor, teacher pre-training, and
//!   the teacher–student adaptation loop.
//! - [`metrics`] — 3D IoU and pose-threshold average precision.
//! - [`dataset`] — on-disk formats: instance files, manifests, checkpoints,
//!   and evaluation reports.
//!
//! Heavy inner loops (hypothesis scoring, per-point losses, instance
//! generation) run on rayon when the `parallel` feature is enabled (the
//! default) and fall back to plain loops otherwise. Both lanes produce
//! bit-identical results; see [`exec`].

pub mod adapt;
pub mod dataset;
mod error;
pub mod exec;
pub mod filter;
pub mod geom;
pub mod metrics;
pub mod nocs;
pub mod seeding;
pub mod synth;

pub use error::{Error, Result};
