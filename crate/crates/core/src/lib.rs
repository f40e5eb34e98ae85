//! Semi-supervised segmentation with extreme consistency.
//!
//! A student U-Net learns from a small labeled set with a Dice loss while
//! being pushed, through a soft-Dice consistency term, to agree with an EMA
//! teacher across heavy intensity, geometric and cut-and-paste mixing
//! perturbations that only the student ever sees.

pub mod data;
pub mod error;
pub mod experiments;
pub mod losses;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod segnet;
pub mod transforms;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use segnet::{ema_update, Mode, NetworkConfig, SegNetwork};
pub use tensor::{ImageBatch, MaskBatch, ProbMap, Tensor4};

pub type UNet32 = SegNetwork<f32>;
pub type UNet64 = SegNetwork<f64>;
