//! Strong out-of-distribution transform: three photometric ops, one warp and
//! an optional square patch pasted from a labeled image.

use rand::Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ImageBatch, ProbMap, Tensor4};

use super::geometric::{apply_geometric, renormalize, translation_limit, Fill, GeometricOp, Interp};
use super::intensity::{apply_intensity, IntensityKind, IntensityOp};

pub const INTENSITY_OPS_PER_INSTANCE: usize = 3;
pub const MIXING_PROBABILITY: f64 = 0.5;
pub const MAX_MIXING_RATIO: f64 = 0.5;

/// Pixel rectangle, `x`/`w` along the width axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.y && row < self.y + self.h && col >= self.x && col < self.x + self.w
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.x + self.w <= width && self.y + self.h <= height
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixingOp {
    pub active: bool,
    pub rect: Rect,
    /// Item of the labeled batch the patch is cut from.
    pub source_index: usize,
    pub size_ratio: f64,
}

/// What the sampler needs to know about the batch it targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    /// Size of the labeled batch that patches may come from.
    pub sources: usize,
}

/// Which families an extreme transform may draw from. Disabled families are
/// still sampled, so every pool consumes the random stream identically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtremePool {
    pub intensity: bool,
    pub geometric: bool,
    pub mixing: bool,
}

impl ExtremePool {
    pub const FULL: ExtremePool = ExtremePool {
        intensity: true,
        geometric: true,
        mixing: true,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtremeTransformInstance {
    /// Applied in this order.
    pub intensity_ops: Vec<IntensityOp>,
    pub geometric: Option<GeometricOp>,
    pub mixing: MixingOp,
}

impl ExtremeTransformInstance {
    pub fn identity() -> Self {
        Self {
            intensity_ops: Vec::new(),
            geometric: None,
            mixing: MixingOp::default(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, pool: ExtremePool, frame: Frame) -> Self {
        let kinds = rand::seq::index::sample(rng, IntensityKind::ALL.len(), INTENSITY_OPS_PER_INSTANCE);
        let intensity_ops: Vec<IntensityOp> = kinds
            .iter()
            .map(|k| {
                let kind = IntensityKind::ALL[k];
                IntensityOp {
                    kind,
                    param: kind.sample_param(rng),
                }
            })
            .collect();
        let geometric = GeometricOp::sample(rng, translation_limit(frame.height, frame.width));

        let coin = rng.random_bool(MIXING_PROBABILITY);
        let size_ratio = rng.random_range(0.0..=MAX_MIXING_RATIO);
        let side = ((size_ratio * frame.height.min(frame.width) as f64).round() as usize).min(frame.height.min(frame.width));
        let x = rng.random_range(0..=frame.width - side);
        let y = rng.random_range(0..=frame.height - side);
        let source_index = rng.random_range(0..frame.sources.max(1));
        let mixing = MixingOp {
            active: pool.mixing && coin && frame.sources > 0,
            rect: Rect { x, y, w: side, h: side },
            source_index,
            size_ratio,
        };

        Self {
            intensity_ops: if pool.intensity { intensity_ops } else { Vec::new() },
            geometric: pool.geometric.then_some(geometric),
            mixing,
        }
    }

    /// Checks parameter ranges and the mixing rectangle against a raster.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        for op in &self.intensity_ops {
            if !op.kind.accepts(op.param) {
                return Err(Error::Range(format!("{:?} parameter {} out of range", op.kind, op.param)));
            }
        }
        if let Some(g) = &self.geometric {
            g.validate()?;
        }
        if self.mixing.active && !self.mixing.rect.fits(height, width) {
            return Err(Error::Range(format!(
                "mixing rect {:?} outside a {height}x{width} raster",
                self.mixing.rect
            )));
        }
        Ok(())
    }
}

/// Full-pool extreme transform from a seed. With `mixing_allowed` false the
/// patch is drawn but never active.
pub fn sample_extreme(seed: u64, mixing_allowed: bool, frame: Frame) -> ExtremeTransformInstance {
    let pool = ExtremePool {
        mixing: mixing_allowed,
        ..ExtremePool::FULL
    };
    ExtremeTransformInstance::sample(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed), pool, frame)
}

fn paste<T: Scalar>(target: &mut Tensor4<T>, source: &Tensor4<T>, rect: Rect) {
    let w = target.width();
    for i in 0..target.batch() {
        for c in 0..target.channels() {
            let src = source.plane(0, c);
            let dst = target.plane_mut(i, c);
            for r in rect.y..rect.y + rect.h {
                let span = r * w + rect.x..r * w + rect.x + rect.w;
                dst[span.clone()].copy_from_slice(&src[span]);
            }
        }
    }
}

fn check_source<T: Scalar>(op: &MixingOp, target: &Tensor4<T>, source: &Tensor4<T>) -> Result<()> {
    let [_, c, h, w] = target.shape();
    if source.channels() != c || source.height() != h || source.width() != w {
        return Err(Error::Shape("mixing source and target rasters differ".into()));
    }
    if op.source_index >= source.batch() {
        return Err(Error::Range(format!(
            "mixing source index {} but only {} labeled items",
            op.source_index,
            source.batch()
        )));
    }
    if !op.rect.fits(h, w) {
        return Err(Error::Range(format!("mixing rect {:?} outside a {h}x{w} raster", op.rect)));
    }
    Ok(())
}

fn source_item<T: Scalar>(source: &Tensor4<T>, index: usize) -> Tensor4<T> {
    let [_, c, h, w] = source.shape();
    Tensor4::from_vec([1, c, h, w], source.item_slice(index).to_vec()).expect("item shape")
}

/// Replaces `op.rect` of every target image with the same region of the
/// chosen labeled image. An inactive op returns the target unchanged.
pub fn apply_mixing_images<T: Scalar>(op: &MixingOp, target: &ImageBatch<T>, labeled_source: &ImageBatch<T>) -> Result<ImageBatch<T>> {
    check_source(op, target, labeled_source)?;
    let mut out = target.0.clone();
    if op.active {
        paste(&mut out, &source_item(labeled_source, op.source_index), op.rect);
    }
    Ok(ImageBatch(out))
}

fn image_path<T: Scalar>(t: &ExtremeTransformInstance, x: &Tensor4<T>) -> Result<Tensor4<T>> {
    let mut y = x.clone();
    for op in &t.intensity_ops {
        y = apply_intensity(*op, &y)?;
    }
    if let Some(g) = &t.geometric {
        y = apply_geometric(g, &y, Interp::Bilinear, Fill::Constant(0.0))?;
    }
    Ok(y)
}

/// Photometric ops in stored order, then the warp, then the patch. The patch
/// is cut from the labeled image after the same photometric ops and warp.
pub fn apply_extreme_to_images<T: Scalar>(
    t: &ExtremeTransformInstance,
    x: &ImageBatch<T>,
    labeled_source: Option<&ImageBatch<T>>,
) -> Result<ImageBatch<T>> {
    t.validate(x.height(), x.width())?;
    let mut y = image_path(t, x)?;
    if t.mixing.active {
        let src = labeled_source.ok_or_else(|| Error::Data("mixing is active but no labeled source was given".into()))?;
        check_source(&t.mixing, &y, src)?;
        let patch = image_path(t, &source_item(src, t.mixing.source_index))?;
        paste(&mut y, &patch, t.mixing.rect);
    }
    y.as_mut_slice().iter_mut().for_each(|v| *v = v.max(T::zero()).min(T::one()));
    Ok(ImageBatch(y))
}

fn prediction_path<T: Scalar>(t: &ExtremeTransformInstance, p: &Tensor4<T>) -> Result<Tensor4<T>> {
    match &t.geometric {
        None => Ok(p.clone()),
        Some(g) => {
            let mut q = apply_geometric(g, p, Interp::Bilinear, Fill::Background)?;
            if resamples(g) {
                renormalize(&mut q);
            }
            Ok(q)
        }
    }
}

fn resamples(g: &GeometricOp) -> bool {
    match *g {
        GeometricOp::Flip { .. } => false,
        GeometricOp::Translation { dx, dy } => dx.fract() != 0.0 || dy.fract() != 0.0,
        _ => true,
    }
}

/// The prediction-side counterpart of [`apply_extreme_to_images`]:
/// photometric ops are ignored, the warp uses background fill and
/// renormalization, and the patch comes from the labeled reference map.
pub fn apply_extreme_to_predictions<T: Scalar>(
    t: &ExtremeTransformInstance,
    p_target: &ProbMap<T>,
    p_labeled_ref: Option<&ProbMap<T>>,
) -> Result<ProbMap<T>> {
    t.validate(p_target.height(), p_target.width())?;
    let mut q = prediction_path(t, p_target)?;
    if t.mixing.active {
        let src = p_labeled_ref.ok_or_else(|| Error::Data("mixing is active but no labeled reference was given".into()))?;
        check_source(&t.mixing, &q, src)?;
        let patch = prediction_path(t, &source_item(src, t.mixing.source_index))?;
        paste(&mut q, &patch, t.mixing.rect);
    }
    Ok(ProbMap(q))
}

fn per_item<T: Scalar>(
    ts: &[ExtremeTransformInstance],
    x: &Tensor4<T>,
    f: impl Fn(&ExtremeTransformInstance, Tensor4<T>) -> Result<Tensor4<T>>,
) -> Result<Tensor4<T>> {
    if ts.len() != x.batch() {
        return Err(Error::Shape(format!("{} transforms for a batch of {}", ts.len(), x.batch())));
    }
    let items = ts
        .iter()
        .enumerate()
        .map(|(i, t)| f(t, source_item(x, i)))
        .collect::<Result<Vec<_>>>()?;
    Tensor4::stack(&items.iter().collect::<Vec<_>>())
}

/// [`apply_extreme_to_images`] with one instance per batch item.
pub fn apply_extreme_to_images_each<T: Scalar>(
    ts: &[ExtremeTransformInstance],
    x: &ImageBatch<T>,
    labeled_source: Option<&ImageBatch<T>>,
) -> Result<ImageBatch<T>> {
    per_item(ts, x, |t, item| Ok(apply_extreme_to_images(t, &ImageBatch(item), labeled_source)?.0)).map(ImageBatch)
}

/// [`apply_extreme_to_predictions`] with one instance per batch item.
pub fn apply_extreme_to_predictions_each<T: Scalar>(
    ts: &[ExtremeTransformInstance],
    p: &ProbMap<T>,
    p_labeled_ref: Option<&ProbMap<T>>,
) -> Result<ProbMap<T>> {
    per_item(ts, p, |t, item| Ok(apply_extreme_to_predictions(t, &ProbMap(item), p_labeled_ref)?.0)).map(ProbMap)
}
