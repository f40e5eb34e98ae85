//! Photometric operations of the extreme pool. They act on images only;
//! predictions are invariant to all of them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityKind {
    Autocontrast,
    Brightness,
    Color,
    Contrast,
    Equalize,
    Invert,
    Solarize,
    Posterize,
}

impl IntensityKind {
    pub const ALL: [IntensityKind; 8] = [
        IntensityKind::Autocontrast,
        IntensityKind::Brightness,
        IntensityKind::Color,
        IntensityKind::Contrast,
        IntensityKind::Equalize,
        IntensityKind::Invert,
        IntensityKind::Solarize,
        IntensityKind::Posterize,
    ];

    /// Whether `param` lies in this kind's sampling support.
    pub fn accepts(self, param: f64) -> bool {
        use IntensityKind::*;
        match self {
            Autocontrast | Color | Equalize => (0.0..=1.0).contains(&param),
            Brightness | Contrast => (0.5..=1.0).contains(&param),
            Invert => (0.0..=0.25).contains(&param) || (0.75..=1.0).contains(&param),
            Solarize => (0.3..=1.0).contains(&param),
            Posterize => (4.0..=8.0).contains(&param) && param.fract() == 0.0,
        }
    }

    pub fn sample_param<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        use IntensityKind::*;
        match self {
            Autocontrast | Color | Equalize => rng.random_range(0.0..=1.0),
            Brightness | Contrast => rng.random_range(0.5..=1.0),
            Invert => {
                if rng.random_bool(0.5) {
                    rng.random_range(0.0..=0.25)
                } else {
                    rng.random_range(0.75..=1.0)
                }
            }
            Solarize => rng.random_range(0.3..=1.0),
            Posterize => rng.random_range(4..=8u32) as f64,
        }
    }
}

/// One photometric operation with its blend ratio, enhancement factor,
/// threshold or bit count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensityOp {
    pub kind: IntensityKind,
    pub param: f64,
}

/// Rec. 601 luma.
#[inline]
fn luma<T: Scalar>(r: T, g: T, b: T) -> T {
    T::lit(0.299) * r + T::lit(0.587) * g + T::lit(0.114) * b
}

fn blend<T: Scalar>(x: &mut [T], enhanced: &[T], ratio: T) {
    let keep = T::one() - ratio;
    for (v, &e) in x.iter_mut().zip(enhanced) {
        *v = ratio * e + keep * *v;
    }
}

#[inline]
fn to_u8<T: Scalar>(v: T) -> usize {
    (v * T::lit(255.0)).round().max(T::zero()).min(T::lit(255.0)).to_usize().unwrap_or(0)
}

/// Histogram equalization lookup table over 256 bins.
fn equalize_lut(hist: &[usize; 256]) -> Option<[usize; 256]> {
    let nonzero: Vec<usize> = hist.iter().copied().filter(|&h| h > 0).collect();
    if nonzero.len() <= 1 {
        return None;
    }
    let step = (nonzero.iter().sum::<usize>() - nonzero[nonzero.len() - 1]) / 255;
    if step == 0 {
        return None;
    }
    let mut lut = [0usize; 256];
    let mut n = step / 2;
    for (i, &h) in hist.iter().enumerate() {
        lut[i] = (n / step).min(255);
        n += h;
    }
    Some(lut)
}

fn apply_item<T: Scalar>(op: IntensityOp, item: &mut [T], channels: usize, plane: usize) {
    let p = T::lit(op.param);
    match op.kind {
        IntensityKind::Brightness => item.iter_mut().for_each(|v| *v *= p),
        IntensityKind::Invert => item.iter_mut().for_each(|v| *v = p * (T::one() - *v) + (T::one() - p) * *v),
        IntensityKind::Solarize => item.iter_mut().for_each(|v| {
            if *v > p {
                *v = T::one() - *v
            }
        }),
        IntensityKind::Posterize => {
            let mask = (0xFFusize << (8 - op.param as usize)) & 0xFF;
            let inv = T::lit(1.0 / 255.0);
            item.iter_mut().for_each(|v| *v = T::from_usize(to_u8(*v) & mask).unwrap() * inv);
        }
        IntensityKind::Color | IntensityKind::Contrast => {
            let gray: Vec<T> = if channels == 3 {
                (0..plane)
                    .map(|i| luma(item[i], item[plane + i], item[2 * plane + i]))
                    .collect()
            } else {
                item[..plane].to_vec()
            };
            if op.kind == IntensityKind::Color {
                for c in 0..channels {
                    for (v, &g) in item[c * plane..(c + 1) * plane].iter_mut().zip(&gray) {
                        *v = g + p * (*v - g);
                    }
                }
            } else {
                let mean = gray.iter().copied().sum::<T>() / T::from_usize(plane).unwrap();
                item.iter_mut().for_each(|v| *v = mean + p * (*v - mean));
            }
        }
        IntensityKind::Autocontrast => {
            for c in 0..channels {
                let ch = &mut item[c * plane..(c + 1) * plane];
                let lo = ch.iter().copied().fold(T::infinity(), T::min);
                let hi = ch.iter().copied().fold(T::neg_infinity(), T::max);
                if hi > lo {
                    let scale = T::one() / (hi - lo);
                    let enhanced: Vec<T> = ch.iter().map(|&v| (v - lo) * scale).collect();
                    blend(ch, &enhanced, p);
                }
            }
        }
        IntensityKind::Equalize => {
            let inv = T::lit(1.0 / 255.0);
            for c in 0..channels {
                let ch = &mut item[c * plane..(c + 1) * plane];
                let mut hist = [0usize; 256];
                ch.iter().for_each(|&v| hist[to_u8(v)] += 1);
                if let Some(lut) = equalize_lut(&hist) {
                    let enhanced: Vec<T> = ch.iter().map(|&v| T::from_usize(lut[to_u8(v)]).unwrap() * inv).collect();
                    blend(ch, &enhanced, p);
                }
            }
        }
    }
    item.iter_mut().for_each(|v| *v = v.max(T::zero()).min(T::one()));
}

/// Applies one photometric op to every image of the batch, per image and per
/// channel where the op needs statistics. Output is clipped to `[0, 1]`.
pub fn apply_intensity<T: Scalar>(op: IntensityOp, x: &Tensor4<T>) -> Result<Tensor4<T>> {
    if !op.kind.accepts(op.param) {
        return Err(Error::Range(format!(
            "{:?} parameter {} outside its sampling range",
            op.kind, op.param
        )));
    }
    let mut out = x.clone();
    let (channels, plane) = (x.channels(), x.plane_len());
    for i in 0..x.batch() {
        apply_item(op, out.item_slice_mut(i), channels, plane);
    }
    Ok(out)
}
