//! Geometric warps shared by images, masks and probability maps.
//!
//! Pixel centres sit at integer coordinates and the warp pivots on the image
//! centre `((W - 1) / 2, (H - 1) / 2)`. Rotation is counter-clockwise as seen
//! on screen (y axis pointing down). Translation moves content by `(dx, dy)`
//! pixels towards +x / +y.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

pub const MAX_ROTATION_DEG: f64 = 10.0;
pub const MAX_TRANSLATION_PX: f64 = 32.0;
pub const SCALE_RANGE: (f64, f64) = (0.75, 1.25);
/// Shorter image side from which the full translation range applies.
pub const TRANSLATION_REFERENCE_SIDE: usize = 256;

/// Translation bound for a `height x width` raster: [`MAX_TRANSLATION_PX`]
/// from the reference side up, proportionally less on smaller rasters.
pub fn translation_limit(height: usize, width: usize) -> f64 {
    MAX_TRANSLATION_PX * (height.min(width) as f64 / TRANSLATION_REFERENCE_SIDE as f64).min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipAxis {
    /// Mirror left-right.
    Horizontal,
    /// Mirror top-bottom.
    Vertical,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeometricOp {
    Rotation { degrees: f64 },
    Translation { dx: f64, dy: f64 },
    Scale { factor: f64 },
    Flip { axis: FlipAxis },
}

impl GeometricOp {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            GeometricOp::Rotation { degrees } => degrees.abs() <= MAX_ROTATION_DEG,
            GeometricOp::Translation { dx, dy } => dx.abs() <= MAX_TRANSLATION_PX && dy.abs() <= MAX_TRANSLATION_PX,
            GeometricOp::Scale { factor } => (SCALE_RANGE.0..=SCALE_RANGE.1).contains(&factor),
            GeometricOp::Flip { .. } => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Range(format!("geometric op out of range: {self:?}")))
        }
    }

    /// One kind uniformly from the four, then its parameter. Translations
    /// stay within `max_translation` pixels per axis.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, max_translation: f64) -> Self {
        let t = max_translation.clamp(0.0, MAX_TRANSLATION_PX);
        match rng.random_range(0..4u32) {
            0 => GeometricOp::Rotation {
                degrees: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            },
            1 => GeometricOp::Translation {
                dx: rng.random_range(-t..=t),
                dy: rng.random_range(-t..=t),
            },
            2 => GeometricOp::Scale {
                factor: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            },
            _ => GeometricOp::Flip {
                axis: if rng.random_bool(0.5) {
                    FlipAxis::Horizontal
                } else {
                    FlipAxis::Vertical
                },
            },
        }
    }

    fn affine(&self) -> Option<Affine> {
        match *self {
            GeometricOp::Rotation { degrees } => Some(Affine {
                rotation_deg: degrees,
                ..Affine::IDENTITY
            }),
            GeometricOp::Translation { dx, dy } => Some(Affine {
                translate: [dx, dy],
                ..Affine::IDENTITY
            }),
            GeometricOp::Scale { factor } => Some(Affine {
                scale: factor,
                ..Affine::IDENTITY
            }),
            GeometricOp::Flip { .. } => None,
        }
    }
}

/// Rotation about the centre, isotropic scale, then translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Affine {
    pub rotation_deg: f64,
    pub scale: f64,
    pub translate: [f64; 2],
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        rotation_deg: 0.0,
        scale: 1.0,
        translate: [0.0, 0.0],
    };

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.scale == 1.0 && self.translate == [0.0, 0.0]
    }

    /// Output-to-source map as `[a, b, c, d, e, f]`:
    /// `sx = a x + b y + c`, `sy = d x + e y + f`.
    fn inverse_map(&self, h: usize, w: usize) -> [f64; 6] {
        let (cx, cy) = ((w as f64 - 1.0) * 0.5, (h as f64 - 1.0) * 0.5);
        let theta = self.rotation_deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        let k = 1.0 / self.scale;
        // forward on screen: x' - cx = s (cos u + sin v), y' - cy = s (-sin u + cos v)
        // with (u, v) = source offset from the centre; invert the rotation.
        let (a, b) = (k * cos, -k * sin);
        let (d, e) = (k * sin, k * cos);
        let (tx, ty) = (cx + self.translate[0], cy + self.translate[1]);
        [a, b, cx - a * tx - b * ty, d, e, cy - d * tx - e * ty]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interp {
    Bilinear,
    Nearest,
}

/// Value given to pixels that map outside the source raster.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    /// The same constant in every channel.
    Constant(f64),
    /// Channel 0 set to one, every other channel zero.
    Background,
}

impl Fill {
    fn value<T: Scalar>(self, channel: usize) -> T {
        match self {
            Fill::Constant(v) => T::lit(v),
            Fill::Background => {
                if channel == 0 {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// Mirrors every plane along `axis`. Lossless and its own inverse.
pub fn flip<T: Scalar>(x: &Tensor4<T>, axis: FlipAxis) -> Tensor4<T> {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor4::zeros(x.shape());
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane(i, ch);
            let dst = out.plane_mut(i, ch);
            for r in 0..h {
                let sr = match axis {
                    FlipAxis::Vertical => h - 1 - r,
                    FlipAxis::Horizontal => r,
                };
                let srow = &src[sr * w..(sr + 1) * w];
                let drow = &mut dst[r * w..(r + 1) * w];
                match axis {
                    FlipAxis::Horizontal => drow.iter_mut().zip(srow.iter().rev()).for_each(|(d, &s)| *d = s),
                    FlipAxis::Vertical => drow.copy_from_slice(srow),
                }
            }
        }
    }
    out
}

/// Shift by whole pixels; exact, no interpolation.
fn shift<T: Scalar>(x: &Tensor4<T>, dx: i64, dy: i64, fill: Fill) -> Tensor4<T> {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor4::zeros(x.shape());
    for i in 0..n {
        for ch in 0..c {
            let f = fill.value::<T>(ch);
            let src = x.plane(i, ch);
            let dst = out.plane_mut(i, ch);
            for r in 0..h {
                let sr = r as i64 - dy;
                for col in 0..w {
                    let sc = col as i64 - dx;
                    dst[r * w + col] = if sr >= 0 && sr < h as i64 && sc >= 0 && sc < w as i64 {
                        src[sr as usize * w + sc as usize]
                    } else {
                        f
                    };
                }
            }
        }
    }
    out
}

/// General affine warp by inverse mapping.
pub fn warp_affine<T: Scalar>(x: &Tensor4<T>, affine: &Affine, interp: Interp, fill: Fill) -> Tensor4<T> {
    if affine.is_identity() {
        return x.clone();
    }
    if affine.rotation_deg == 0.0
        && affine.scale == 1.0
        && affine.translate.iter().all(|t| t.fract() == 0.0)
    {
        return shift(x, affine.translate[0] as i64, affine.translate[1] as i64, fill);
    }
    let [n, c, h, w] = x.shape();
    let m = affine.inverse_map(h, w);
    let mut out = Tensor4::zeros(x.shape());
    let fills: Vec<T> = (0..c).map(|ch| fill.value(ch)).collect();
    let inside = |r: i64, col: i64| r >= 0 && r < h as i64 && col >= 0 && col < w as i64;
    for r in 0..h {
        for col in 0..w {
            let (xf, yf) = (col as f64, r as f64);
            let sx = m[0] * xf + m[1] * yf + m[2];
            let sy = m[3] * xf + m[4] * yf + m[5];
            match interp {
                Interp::Nearest => {
                    let (sc, sr) = (sx.round() as i64, sy.round() as i64);
                    let ok = inside(sr, sc);
                    for i in 0..n {
                        for ch in 0..c {
                            let v = if ok {
                                x.plane(i, ch)[sr as usize * w + sc as usize]
                            } else {
                                fills[ch]
                            };
                            out.plane_mut(i, ch)[r * w + col] = v;
                        }
                    }
                }
                Interp::Bilinear => {
                    let (x0, y0) = (sx.floor(), sy.floor());
                    let (fx, fy) = (sx - x0, sy - y0);
                    let (x0, y0) = (x0 as i64, y0 as i64);
                    let taps = [
                        (y0, x0, (1.0 - fx) * (1.0 - fy)),
                        (y0, x0 + 1, fx * (1.0 - fy)),
                        (y0 + 1, x0, (1.0 - fx) * fy),
                        (y0 + 1, x0 + 1, fx * fy),
                    ];
                    for i in 0..n {
                        for ch in 0..c {
                            let plane = x.plane(i, ch);
                            let mut acc = T::zero();
                            for &(tr, tc, wt) in &taps {
                                if wt == 0.0 {
                                    continue;
                                }
                                let v = if inside(tr, tc) {
                                    plane[tr as usize * w + tc as usize]
                                } else {
                                    fills[ch]
                                };
                                acc += T::lit(wt) * v;
                            }
                            out.plane_mut(i, ch)[r * w + col] = acc;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Applies `op` to any raster. Flips and whole-pixel translations are exact
/// index moves; the rest resample with `interp`.
pub fn apply_geometric<T: Scalar>(op: &GeometricOp, x: &Tensor4<T>, interp: Interp, fill: Fill) -> Result<Tensor4<T>> {
    op.validate()?;
    Ok(match op {
        GeometricOp::Flip { axis } => flip(x, *axis),
        other => warp_affine(x, &other.affine().expect("non-flip op"), interp, fill),
    })
}

/// Rescales each pixel's class vector to sum to one.
pub fn renormalize<T: Scalar>(p: &mut Tensor4<T>) {
    let [n, c, h, w] = p.shape();
    let plane = h * w;
    for i in 0..n {
        let item = p.item_slice_mut(i);
        for k in 0..plane {
            let s: T = (0..c).map(|ch| item[ch * plane + k]).sum();
            if s > T::zero() {
                let inv = T::one() / s;
                (0..c).for_each(|ch| item[ch * plane + k] *= inv);
            } else {
                (0..c).for_each(|ch| item[ch * plane + k] = if ch == 0 { T::one() } else { T::zero() });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: [usize; 4]) -> Tensor4<f64> {
        let len = shape.iter().product();
        Tensor4::from_vec(shape, (0..len).map(|i| (i % 97) as f64 / 97.0).collect()).unwrap()
    }

    #[test]
    fn flip_directions() {
        let x = Tensor4::from_vec([1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(flip(&x, FlipAxis::Horizontal).as_slice(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        assert_eq!(flip(&x, FlipAxis::Vertical).as_slice(), &[4.0, 5.0, 6.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn translation_moves_content_right_and_down() {
        let mut x = Tensor4::<f64>::zeros([1, 1, 4, 4]);
        *x.at_mut(0, 0, 1, 1) = 1.0;
        let op = GeometricOp::Translation { dx: 2.0, dy: 1.0 };
        let y = apply_geometric(&op, &x, Interp::Bilinear, Fill::Constant(0.0)).unwrap();
        assert_eq!(y.at(0, 0, 2, 3), 1.0);
        assert_eq!(y.as_slice().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn fractional_translation_matches_general_warp_path() {
        let x = ramp([1, 2, 16, 16]);
        let a = Affine {
            translate: [3.5, -2.25],
            ..Affine::IDENTITY
        };
        let y = warp_affine(&x, &a, Interp::Bilinear, Fill::Constant(0.0));
        // interior value at (r, c) interpolates source at (r + 2.25, c - 3.5)
        let (r, c) = (5usize, 8usize);
        let (sy, sx) = (r as f64 + 2.25, c as f64 - 3.5);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (fy, fx) = (sy.fract(), sx.fract());
        let p = |rr: usize, cc: usize| x.at(0, 1, rr, cc);
        let want = p(y0, x0) * (1.0 - fx) * (1.0 - fy)
            + p(y0, x0 + 1) * fx * (1.0 - fy)
            + p(y0 + 1, x0) * (1.0 - fx) * fy
            + p(y0 + 1, x0 + 1) * fx * fy;
        assert!((y.at(0, 1, r, c) - want).abs() < 1e-12);
    }

    #[test]
    fn rotation_by_ninety_degrees_permutes_a_square() {
        // outside the sampled range, but pins the direction convention
        let x = ramp([1, 1, 5, 5]);
        let a = Affine {
            rotation_deg: 90.0,
            ..Affine::IDENTITY
        };
        let y = warp_affine(&x, &a, Interp::Nearest, Fill::Constant(0.0));
        // counter-clockwise on screen: the top-right corner moves to top-left
        assert_eq!(y.at(0, 0, 0, 0), x.at(0, 0, 0, 4));
        assert_eq!(y.at(0, 0, 4, 0), x.at(0, 0, 0, 0));
    }

    #[test]
    fn scale_keeps_centre_pixel() {
        let x = ramp([1, 1, 5, 5]);
        let op = GeometricOp::Scale { factor: 1.2 };
        let y = apply_geometric(&op, &x, Interp::Bilinear, Fill::Constant(0.0)).unwrap();
        assert!((y.at(0, 0, 2, 2) - x.at(0, 0, 2, 2)).abs() < 1e-12);
    }

    #[test]
    fn background_fill_and_renormalize() {
        let mut p = Tensor4::<f64>::zeros([1, 2, 4, 4]);
        p.plane_mut(0, 1).fill(1.0);
        let op = GeometricOp::Rotation { degrees: 7.0 };
        let mut q = apply_geometric(&op, &p, Interp::Bilinear, Fill::Background).unwrap();
        renormalize(&mut q);
        for k in 0..16 {
            assert!((q.plane(0, 0)[k] + q.plane(0, 1)[k] - 1.0).abs() < 1e-12);
        }
        assert!(q.at(0, 0, 0, 0) > 0.0, "corner pulls in background");
    }

    #[test]
    fn rejects_out_of_range() {
        let x = ramp([1, 1, 4, 4]);
        let op = GeometricOp::Rotation { degrees: 11.0 };
        assert!(apply_geometric(&op, &x, Interp::Bilinear, Fill::Constant(0.0)).is_err());
    }
}
