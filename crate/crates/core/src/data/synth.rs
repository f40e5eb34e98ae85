//! Synthetic segmentation task: thin curved "vessels" and elliptical
//! "lesions" on textured, noisy backgrounds, with bright unlabeled blobs as
//! distractors. Colours, contrast and texture vary per image. Pixels outside
//! a circular field of view are black background, as in fundus photographs.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_seed;

use super::{Dataset, Item, CHANNELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    /// Inclusive range of vessel strokes per image; the minimum must be at
    /// least one so every mask is nonempty.
    pub vessels: (usize, usize),
    pub vessel_width: (f64, f64),
    pub lesions: (usize, usize),
    /// Semi-axis range as a fraction of the shorter image side.
    pub lesion_radius: (f64, f64),
    pub distractors: (usize, usize),
    /// Foreground darkening relative to the background.
    pub contrast: (f64, f64),
    /// Per-channel jitter of the background colour.
    pub color_jitter: f64,
    /// Amplitude of the low-frequency background texture.
    pub texture: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Field-of-view radius as a fraction of half the image diagonal; 1 or
    /// more keeps the whole raster.
    pub field_of_view: (f64, f64),
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            vessels: (2, 4),
            vessel_width: (1.5, 3.5),
            lesions: (0, 2),
            lesion_radius: (0.05, 0.14),
            distractors: (1, 3),
            contrast: (0.08, 0.4),
            color_jitter: 0.15,
            texture: 0.12,
            noise: 0.05,
            field_of_view: (0.72, 0.95),
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            (self.vessels.0 as f64, self.vessels.1 as f64),
            self.vessel_width,
            (self.lesions.0 as f64, self.lesions.1 as f64),
            self.lesion_radius,
            (self.distractors.0 as f64, self.distractors.1 as f64),
            self.contrast,
            self.field_of_view,
        ];
        if ranges.iter().any(|(lo, hi)| !(lo <= hi && lo.is_finite() && hi.is_finite())) {
            return Err(Error::Config("synthetic parameter range has min above max".into()));
        }
        if self.vessels.0 == 0 {
            return Err(Error::Config("synthetic images need at least one vessel".into()));
        }
        if self.vessel_width.0 <= 0.0 || self.lesion_radius.0 <= 0.0 || self.field_of_view.0 <= 0.0 {
            return Err(Error::Config("vessel width, lesion radius and field of view must be positive".into()));
        }
        if [self.color_jitter, self.texture, self.noise].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("synthetic jitter, texture and noise must be non-negative".into()));
        }
        Ok(())
    }
}

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<f64>,
    mask: Vec<bool>,
}

impl Canvas {
    /// Blends `color` with per-pixel opacity `cover(x, y)` over the bounding box.
    fn paint(&mut self, bbox: (f64, f64, f64, f64), color: [f64; 3], label: bool, cover: impl Fn(f64, f64) -> (f64, bool)) {
        let plane = self.h * self.w;
        let x0 = bbox.0.floor().max(0.0) as usize;
        let y0 = bbox.1.floor().max(0.0) as usize;
        let x1 = (bbox.2.ceil().max(0.0) as usize).min(self.w.saturating_sub(1));
        let y1 = (bbox.3.ceil().max(0.0) as usize).min(self.h.saturating_sub(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (a, inside) = cover(x as f64, y as f64);
                let k = y * self.w + x;
                if a > 0.0 {
                    for (c, &col) in color.iter().enumerate() {
                        let v = &mut self.rgb[c * plane + k];
                        *v = (1.0 - a) * *v + a * col;
                    }
                }
                if label && inside {
                    self.mask[k] = true;
                }
            }
        }
    }
}

fn quad_bezier(p: [(f64, f64); 3], t: f64) -> (f64, f64) {
    let u = 1.0 - t;
    (
        u * u * p[0].0 + 2.0 * u * t * p[1].0 + t * t * p[2].0,
        u * u * p[0].1 + 2.0 * u * t * p[1].1 + t * t * p[2].1,
    )
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

fn clamp_color(c: [f64; 3]) -> [f64; 3] {
    c.map(|v| v.clamp(0.0, 1.0))
}

/// `base + scale * dir`, clamped.
fn offset(base: [f64; 3], dir: [f64; 3], scale: f64) -> [f64; 3] {
    clamp_color([0, 1, 2].map(|c| base[c] + scale * dir[c]))
}

fn draw_item(params: &SynthParams, h: usize, w: usize, rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<bool>) {
    let plane = h * w;
    let (hf, wf) = (h as f64, w as f64);
    let side = hf.min(wf);
    let j = params.color_jitter;
    let base = clamp_color([0.62, 0.48, 0.40].map(|b| b + rng.random_range(-j..=j)));
    let contrast = rng.random_range(params.contrast.0..=params.contrast.1);

    let mut canvas = Canvas {
        h,
        w,
        rgb: vec![0.0; CHANNELS * plane],
        mask: vec![false; plane],
    };
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta = rng.random_range(0.0..PI);
            let freq = rng.random_range(1.0..4.0) / side;
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = params.texture * rng.random_range(0.3..1.0);
            (freq * theta.cos(), freq * theta.sin(), phase, amp)
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let t: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, a)| a * (2.0 * PI * (fx * x as f64 + fy * y as f64) + ph).sin())
                .sum::<f64>()
                / 3.0;
            for c in 0..CHANNELS {
                canvas.rgb[c * plane + y * w + x] = base[c] + t;
            }
        }
    }

    let n_distractors = rng.random_range(params.distractors.0..=params.distractors.1);
    for _ in 0..n_distractors {
        let (cx, cy) = (rng.random_range(0.0..wf), rng.random_range(0.0..hf));
        let r = side * rng.random_range(0.03..0.08);
        let boost = rng.random_range(0.8..1.6);
        let color = offset(base, [0.2, 0.2, 0.12], boost);
        canvas.paint((cx - r - 1.0, cy - r - 1.0, cx + r + 1.0, cy + r + 1.0), color, false, |x, y| {
            let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            ((r + 0.5 - d).clamp(0.0, 1.0), false)
        });
    }

    let n_lesions = rng.random_range(params.lesions.0..=params.lesions.1);
    for _ in 0..n_lesions {
        let (cx, cy) = (rng.random_range(0.15 * wf..0.85 * wf), rng.random_range(0.15 * hf..0.85 * hf));
        let ra = side * rng.random_range(params.lesion_radius.0..=params.lesion_radius.1);
        let rb = ra * rng.random_range(0.5..1.0);
        let phi = rng.random_range(0.0..PI);
        let (s, c) = phi.sin_cos();
        let color = offset(base, [0.5, 0.75, 0.6], -1.2 * contrast);
        canvas.paint((cx - ra - 1.0, cy - ra - 1.0, cx + ra + 1.0, cy + ra + 1.0), color, true, |x, y| {
            let (dx, dy) = (x - cx, y - cy);
            let u = (c * dx + s * dy) / ra;
            let v = (-s * dx + c * dy) / rb;
            let rho = (u * u + v * v).sqrt();
            // signed distance in pixels, approximately
            let d = (rho - 1.0) * rb;
            ((0.5 - d).clamp(0.0, 1.0), rho <= 1.0)
        });
    }

    let n_vessels = rng.random_range(params.vessels.0..=params.vessels.1);
    for _ in 0..n_vessels {
        let pts = [
            (rng.random_range(0.0..wf), rng.random_range(0.0..hf)),
            (rng.random_range(-0.2 * wf..1.2 * wf), rng.random_range(-0.2 * hf..1.2 * hf)),
            (rng.random_range(0.0..wf), rng.random_range(0.0..hf)),
        ];
        let width = rng.random_range(params.vessel_width.0..=params.vessel_width.1);
        let half = width * 0.5;
        let color = offset(base, [0.6, 0.85, 0.55], -contrast);
        let poly: Vec<(f64, f64)> = (0..=48).map(|i| quad_bezier(pts, i as f64 / 48.0)).collect();
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for &(x, y) in &poly {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        canvas.paint((x0 - half - 1.0, y0 - half - 1.0, x1 + half + 1.0, y1 + half + 1.0), color, true, |x, y| {
            let d = poly
                .windows(2)
                .map(|s| segment_distance(x, y, s[0], s[1]))
                .fold(f64::MAX, f64::min);
            ((half + 0.5 - d).clamp(0.0, 1.0), d < half)
        });
    }

    // guarantee a nonempty mask even when every stroke rounds away
    if !canvas.mask.iter().any(|&m| m) {
        let k = (h / 2) * w + w / 2;
        canvas.mask[k] = true;
        for c in 0..CHANNELS {
            canvas.rgb[c * plane + k] = (base[c] - contrast).clamp(0.0, 1.0);
        }
    }

    let noise = Normal::new(0.0, params.noise).expect("validated noise level");
    let mut image: Vec<f32> = canvas
        .rgb
        .iter()
        .map(|&v| {
            let v = (v + noise.sample(rng)).clamp(0.0, 1.0);
            ((v * 255.0).round() / 255.0) as f32
        })
        .collect();

    let fov = rng.random_range(params.field_of_view.0..=params.field_of_view.1) * 0.5 * hf.hypot(wf);
    let (cx, cy) = ((wf - 1.0) * 0.5, (hf - 1.0) * 0.5);
    for y in 0..h {
        for x in 0..w {
            if (x as f64 - cx).hypot(y as f64 - cy) > fov {
                let k = y * w + x;
                canvas.mask[k] = false;
                for c in 0..CHANNELS {
                    image[c * plane + k] = 0.0;
                }
            }
        }
    }
    if !canvas.mask.iter().any(|&m| m) {
        let k = (h / 2) * w + w / 2;
        canvas.mask[k] = true;
    }
    (image, canvas.mask)
}

/// `n` labeled images of `height x width`. Item `i` depends only on
/// `(seed, i)`, and pixel values are exact multiples of 1/255 so a PNG round
/// trip is lossless.
pub fn synth_generate(n: usize, height: usize, width: usize, params: &SynthParams, seed: u64) -> Result<Dataset> {
    params.validate()?;
    if height == 0 || width == 0 || height % 16 != 0 || width % 16 != 0 {
        return Err(Error::Config(format!("synthetic resolution {height}x{width} must be a positive multiple of 16")));
    }
    let items = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let (image, mask) = draw_item(params, height, width, &mut rng);
            Item {
                id: format!("synth_{i:05}"),
                image,
                mask: Some(mask),
            }
        })
        .collect();
    Dataset::new(format!("synth-{seed}"), height, width, items)
}

/// Fixed global colour and contrast remap imitating a scanner change.
/// Masks are untouched.
pub fn shift_domain(ds: &Dataset) -> Dataset {
    let plane = ds.height * ds.width;
    let mut out = ds.clone();
    out.name = format!("{}-shifted", ds.name);
    for it in &mut out.items {
        let src = it.image.clone();
        for k in 0..plane {
            let (r, g, b) = (src[k] as f64, src[plane + k] as f64, src[2 * plane + k] as f64);
            let mapped = [
                0.25 + 0.55 * b.powf(0.8),
                0.10 + 0.70 * r,
                0.15 + 0.60 * g.powf(1.3),
            ];
            for (c, v) in mapped.iter().enumerate() {
                it.image[c * plane + k] = ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_nonempty() {
        let p = SynthParams::default();
        let a = synth_generate(6, 32, 48, &p, 4).unwrap();
        let b = synth_generate(6, 32, 48, &p, 4).unwrap();
        assert_eq!(a, b);
        for it in &a.items {
            assert!(it.mask.as_ref().unwrap().iter().any(|&m| m));
            assert!(it.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_ne!(a.items[0].image, a.items[1].image);
    }

    #[test]
    fn items_depend_only_on_their_index() {
        let p = SynthParams::default();
        let a = synth_generate(3, 32, 32, &p, 8).unwrap();
        let b = synth_generate(5, 32, 32, &p, 8).unwrap();
        assert_eq!(a.items[..], b.items[..3]);
    }

    #[test]
    fn shift_keeps_masks_and_changes_pixels() {
        let ds = synth_generate(3, 32, 32, &SynthParams::default(), 1).unwrap();
        let sh = shift_domain(&ds);
        for (a, b) in ds.items.iter().zip(&sh.items) {
            assert_eq!(a.mask, b.mask);
            assert_ne!(a.image, b.image);
        }
    }

    #[test]
    fn rejects_bad_params() {
        let p = SynthParams {
            vessels: (0, 2),
            ..SynthParams::default()
        };
        assert!(synth_generate(1, 32, 32, &p, 0).is_err());
        assert!(synth_generate(1, 30, 32, &SynthParams::default(), 0).is_err());
    }
}
