//! Class-incremental learning for anchor-free object detectors with
//! distribution-focal-loss (DFL) regression heads.
//!
//! The crate is organised around the pieces of a continual detection run:
//!
//! - [`detector`]: grid geometry, a small convolutional detector with a
//!   decoupled per-scale head, DFL decoding and inference post-processing.
//! - [`taskloss`]: the supervised loss (BCE + CIoU + DFL) with ground-truth
//!   assignment and old-class masking.
//! - [`distill`]: teacher/student losses: the DFL-aware self-distillation
//!   (weighted tempered cross-entropy plus IoU-gated BCE), plain L2 LwF and
//!   an ERD-style elastic response distillation.
//! - [`replay`]: a capacity-bounded replay memory with class-balancing
//!   greedy eviction (OCDM).
//! - [`continual`]: `NpM` schedules, the per-task trainer, mAP evaluation and
//!   experiment drivers.
//! - [`data`]: synthetic shape scenes and COCO-style annotation files.
//!
//! Every loss returns its value together with its analytic gradient with
//! respect to the student's raw outputs; the detector backpropagates that
//! gradient through its own layers.

pub mod config;
pub mod continual;
pub mod data;
pub mod detector;
pub mod distill;
pub mod error;
pub(crate) mod numeric;
pub mod replay;
pub mod taskloss;

pub use error::{Error, Result};
