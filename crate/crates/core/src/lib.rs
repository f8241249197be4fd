//! Pixel-labeling MRF with a triple-penalty, label-context-mixture pairwise
//! term, solved by a single mean-field step expressed as filtering layers.
//!
//! * [`tensor`]: dense tensors, the DPT file format, bilinear resizing
//! * [`mrf`]: labels, features, distances, energy and free energy
//! * [`meanfield`]: the reference mean-field updates
//! * [`layers`]: the b12..b15 filtering stack and its lookup-table fast path
//! * [`cost`]: operation counts of the stack
//! * [`learning`]: loss, analytic gradients, staged training
//! * [`synth`]: synthetic scenes with planted label contexts
//! * [`metrics`]: mIoU, tagging, localization and boundary accuracy

pub mod cost;
pub mod error;
pub mod layers;
pub mod learning;
pub mod meanfield;
pub mod metrics;
pub mod mrf;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
