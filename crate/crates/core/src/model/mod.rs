//! The dense single-image feature extractor and the time-arrow prediction
//! heads (permutation-equivariant, plus the plain-CNN ablation baseline).

mod equivariant;
mod plain_head;
mod tap;
mod unet;

pub use equivariant::{flip_slots, EquivariantHead, EquivariantLayer, HeadConfig};
pub use plain_head::{PlainCnnHead, PlainHeadConfig};
pub use tap::{Head, HeadChoice, TapModel, TapModelConfig};
pub use unet::{FeatureExtractorConfig, UNet};
