//! Basic (mild) and extreme (strong) transforms as replayable instances.
//!
//! Every instance is plain data: sample it once, store it, and apply it to
//! images and predictions separately. Instances serialize to JSON with kind
//! names in snake case, for example
//!
//! ```json
//! {"intensity_ops":[{"kind":"equalize","param":0.41},
//!                   {"kind":"posterize","param":5.0},
//!                   {"kind":"invert","param":0.87}],
//!  "geometric":{"kind":"rotation","degrees":-3.2},
//!  "mixing":{"active":true,"rect":{"x":9,"y":20,"w":17,"h":17},
//!            "source_index":1,"size_ratio":0.27}}
//! ```

mod basic;
mod extreme;
mod geometric;
mod intensity;

pub use basic::{
    adjust_hsv, apply_basic, permute_channels, sample_basic, BasicTransformInstance, FlipMode, MAX_HUE_SHIFT,
    SATURATION_RANGE,
};
pub use extreme::{
    apply_extreme_to_images, apply_extreme_to_images_each, apply_extreme_to_predictions,
    apply_extreme_to_predictions_each, apply_mixing_images, sample_extreme, ExtremePool, ExtremeTransformInstance,
    Frame, MixingOp, Rect, INTENSITY_OPS_PER_INSTANCE, MAX_MIXING_RATIO, MIXING_PROBABILITY,
};
pub use geometric::{
    apply_geometric, flip, renormalize, warp_affine, Affine, Fill, FlipAxis, GeometricOp, Interp, MAX_ROTATION_DEG,
    translation_limit, MAX_TRANSLATION_PX, SCALE_RANGE, TRANSLATION_REFERENCE_SIDE,
};
pub use intensity::{apply_intensity, IntensityKind, IntensityOp};
