//! Mild in-distribution augmentation applied to labeled pairs.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ImageBatch, MaskBatch, Tensor4};

use super::geometric::{
    flip, translation_limit, warp_affine, Affine, Fill, FlipAxis, Interp, MAX_ROTATION_DEG, MAX_TRANSLATION_PX, SCALE_RANGE,
};

pub const SATURATION_RANGE: (f64, f64) = (0.9, 1.1);
pub const MAX_HUE_SHIFT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipMode {
    None,
    Horizontal,
    Vertical,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasicTransformInstance {
    pub saturation_factor: f64,
    /// Fraction of a full turn of the hue wheel.
    pub hue_shift: f64,
    pub flip: FlipMode,
    /// Output channel `c` takes input channel `channel_perm[c]`.
    pub channel_perm: [usize; 3],
    pub affine: Affine,
}

impl BasicTransformInstance {
    pub const IDENTITY: BasicTransformInstance = BasicTransformInstance {
        saturation_factor: 1.0,
        hue_shift: 0.0,
        flip: FlipMode::None,
        channel_perm: [0, 1, 2],
        affine: Affine::IDENTITY,
    };

    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; 3];
        let perm_ok = self.channel_perm.iter().all(|&c| c < 3 && !std::mem::replace(&mut seen[c], true));
        let a = &self.affine;
        let ok = perm_ok
            && (SATURATION_RANGE.0..=SATURATION_RANGE.1).contains(&self.saturation_factor)
            && self.hue_shift.abs() <= MAX_HUE_SHIFT
            && a.rotation_deg.abs() <= MAX_ROTATION_DEG
            && (SCALE_RANGE.0..=SCALE_RANGE.1).contains(&a.scale)
            && a.translate.iter().all(|t| t.abs() <= MAX_TRANSLATION_PX);
        if ok {
            Ok(())
        } else {
            Err(Error::Range(format!("basic transform out of range: {self:?}")))
        }
    }

    /// Draws with the full translation range.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::sample_with(rng, MAX_TRANSLATION_PX)
    }

    /// Draws with the translation range scaled to a `height x width` image
    /// (see [`translation_limit`]).
    pub fn sample_for<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> Self {
        Self::sample_with(rng, translation_limit(height, width))
    }

    fn sample_with<R: Rng + ?Sized>(rng: &mut R, max_translation: f64) -> Self {
        let t = max_translation.clamp(0.0, MAX_TRANSLATION_PX);
        let saturation_factor = rng.random_range(SATURATION_RANGE.0..=SATURATION_RANGE.1);
        let hue_shift = rng.random_range(-MAX_HUE_SHIFT..=MAX_HUE_SHIFT);
        let flip = [FlipMode::None, FlipMode::Horizontal, FlipMode::Vertical][rng.random_range(0..3usize)];
        let mut channel_perm = [0, 1, 2];
        channel_perm.shuffle(rng);
        let affine = Affine {
            rotation_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            scale: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            translate: [rng.random_range(-t..=t), rng.random_range(-t..=t)],
        };
        Self {
            saturation_factor,
            hue_shift,
            flip,
            channel_perm,
            affine,
        }
    }
}

/// Draws a basic transform from a seed.
pub fn sample_basic(seed: u64) -> BasicTransformInstance {
    use rand::SeedableRng;
    BasicTransformInstance::sample(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Scales saturation and rotates hue in HSV space. Needs three channels.
pub fn adjust_hsv<T: Scalar>(x: &mut Tensor4<T>, saturation_factor: f64, hue_shift: f64) -> Result<()> {
    if x.channels() != 3 {
        return Err(Error::Shape(format!("HSV adjustment needs 3 channels, got {}", x.channels())));
    }
    let plane = x.plane_len();
    for i in 0..x.batch() {
        let item = x.item_slice_mut(i);
        for k in 0..plane {
            let (r, g, b) = (item[k].as_f64(), item[plane + k].as_f64(), item[2 * plane + k].as_f64());
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r, g, b) = hsv_to_rgb(h + hue_shift, (s * saturation_factor).clamp(0.0, 1.0), v);
            item[k] = T::lit(r);
            item[plane + k] = T::lit(g);
            item[2 * plane + k] = T::lit(b);
        }
    }
    Ok(())
}

/// Reorders channels: output channel `c` is input channel `perm[c]`.
pub fn permute_channels<T: Scalar>(x: &Tensor4<T>, perm: &[usize]) -> Result<Tensor4<T>> {
    let c = x.channels();
    if perm.len() != c || perm.iter().any(|&p| p >= c) {
        return Err(Error::Shape(format!("channel permutation {perm:?} does not fit {c} channels")));
    }
    let mut out = Tensor4::zeros(x.shape());
    for i in 0..x.batch() {
        for (dst, &src) in perm.iter().enumerate() {
            out.plane_mut(i, dst).copy_from_slice(x.plane(i, src));
        }
    }
    Ok(out)
}

fn flip_mode<T: Scalar>(x: Tensor4<T>, mode: FlipMode) -> Tensor4<T> {
    match mode {
        FlipMode::None => x,
        FlipMode::Horizontal => flip(&x, FlipAxis::Horizontal),
        FlipMode::Vertical => flip(&x, FlipAxis::Vertical),
    }
}

/// Colour changes go to the image only; flip and affine go to both, with
/// nearest-neighbour resampling and background fill for the mask.
pub fn apply_basic<T: Scalar>(
    t: &BasicTransformInstance,
    x: &ImageBatch<T>,
    y: Option<&MaskBatch<T>>,
) -> Result<(ImageBatch<T>, Option<MaskBatch<T>>)> {
    t.validate()?;
    if let Some(m) = y {
        if m.batch() != x.batch() || m.height() != x.height() || m.width() != x.width() {
            return Err(Error::Shape("mask batch does not match image batch".into()));
        }
    }
    let mut img = x.0.clone();
    if t.saturation_factor != 1.0 || t.hue_shift != 0.0 {
        adjust_hsv(&mut img, t.saturation_factor, t.hue_shift)?;
    }
    if t.channel_perm != [0, 1, 2] {
        img = permute_channels(&img, &t.channel_perm)?;
    }
    img = flip_mode(img, t.flip);
    img = warp_affine(&img, &t.affine, Interp::Bilinear, Fill::Constant(0.0));
    img.as_mut_slice().iter_mut().for_each(|v| *v = v.max(T::zero()).min(T::one()));
    let mask = y.map(|m| {
        let m = flip_mode(m.0.clone(), t.flip);
        MaskBatch(warp_affine(&m, &t.affine, Interp::Nearest, Fill::Background))
    });
    Ok((ImageBatch(img), mask))
}
