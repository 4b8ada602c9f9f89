//! Token-level text-image fusion for multimodal sentiment classification,
//! with label-based and augmentation-based contrastive training objectives.

pub mod augment;
pub mod autodiff;
pub mod data;
pub mod nn;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod params;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;
