//! Self-supervised dense representation learning for time-lapse microscopy
//! by time-arrow prediction: patch-pair sampling, anti-shortcut augmentation,
//! a dense feature extractor with a permutation-equivariant prediction head,
//! the training loop, Grad-CAM attribution, and a label-efficiency probe
//! harness, plus a synthetic benchmark generator used as ground-truth oracle.

pub mod augment;
pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod nn;
pub mod sampler;
pub mod synth;
pub mod train;
pub mod video;
