//! Zero-shot instance segmentation head, desk scale.
//!
//! The crate trains and evaluates a classification head that has to name
//! object instances it was never trained on.  Two failure modes dominate that
//! setting: novel objects get captured by the visually closest training class
//! (bias), or they get captured by the background slot (ambiguation).  The
//! modules here attack both:
//!
//! * [`semantic`] — class embedding tables, seen-to-unseen correlation, and
//!   Gumbel pseudo labels that let a model practice unseen classification on
//!   seen data.
//! * [`classifier`] — an input-conditional classifier: class prototypes are
//!   rebuilt per image by attending over the image's own proposal embeddings.
//! * [`objectives`] — decoupled seen/unseen cross-entropy losses.
//! * [`background`] — an image-adaptive background prototype pooled from the
//!   region no instance claims.
//! * [`pipeline`] — a synthetic scene generator plus class-agnostic proposal
//!   machinery, sized so full experiments run in seconds on a laptop.
//! * [`eval`] — mask IoU, Recall@k, mAP, harmonic-mean reporting, and the
//!   copy-paste expansion that trades precision for unseen recall.
//! * [`harness`] — deterministic training/evaluation loops behind the CLI.

pub mod autodiff;
pub mod background;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod error;
pub mod eval;
pub mod harness;
pub mod hungarian;
pub mod mask;
pub mod objectives;
pub mod pipeline;
pub mod rle;
pub mod semantic;

pub use error::{Error, Result};
