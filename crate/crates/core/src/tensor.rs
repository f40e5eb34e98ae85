//! Dense rank-4 rasters (batch x channels x height x width) and the
//! domain newtypes built on top of them.

use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major NCHW raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot hold a {:?} raster ({} values)",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Self { shape, data })
    }

    /// Stacks single items (each `1 x C x H x W`) into one batch.
    pub fn stack(items: &[&Tensor4<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack an empty list".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for item in items {
            if item.shape[1..] != first.shape[1..] {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    item.shape, first.shape
                )));
            }
            n += item.shape[0];
            data.extend_from_slice(&item.data);
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Copies batch item `i` into its own `1 x C x H x W` raster.
    pub fn item(&self, i: usize) -> Self {
        Self {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.item_slice(i).to_vec(),
        }
    }

    pub fn set_item(&mut self, i: usize, src: &Tensor4<T>) {
        assert_eq!(src.shape[0], 1);
        assert_eq!(src.shape[1..], self.shape[1..]);
        self.item_slice_mut(i).copy_from_slice(&src.data);
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }
    #[inline]
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }
    #[inline]
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.plane_len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn item_slice(&self, i: usize) -> &[T] {
        let len = self.item_len();
        &self.data[i * len..(i + 1) * len]
    }
    #[inline]
    pub fn item_slice_mut(&mut self, i: usize) -> &mut [T] {
        let len = self.item_len();
        &mut self.data[i * len..(i + 1) * len]
    }
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let len = self.plane_len();
        let start = (n * self.shape[1] + c) * len;
        &self.data[start..start + len]
    }
    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let len = self.plane_len();
        let start = (n * self.shape[1] + c) * len;
        &mut self.data[start..start + len]
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let [_, ch, h, w] = self.shape;
        self.data[((n * ch + c) * h + y) * w + x]
    }
    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut T {
        let [_, ch, h, w] = self.shape;
        &mut self.data[((n * ch + c) * h + y) * w + x]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.as_f64()).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn ensure_shape(&self, expected: [usize; 4], what: &str) -> Result<()> {
        if self.shape != expected {
            return Err(Error::Shape(format!(
                "{what}: expected {:?}, got {:?}",
                expected, self.shape
            )));
        }
        Ok(())
    }
}

/// Input images with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<T>(pub Tensor4<T>);

/// One-hot ground truth, `classes` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskBatch<T>(pub Tensor4<T>);

/// Per-pixel class probabilities (softmax output or a warped copy of one).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap<T>(pub Tensor4<T>);

macro_rules! raster_newtype {
    ($name:ident) => {
        impl<T> Deref for $name<T> {
            type Target = Tensor4<T>;
            fn deref(&self) -> &Tensor4<T> {
                &self.0
            }
        }
        impl<T> DerefMut for $name<T> {
            fn deref_mut(&mut self) -> &mut Tensor4<T> {
                &mut self.0
            }
        }
        impl<T> $name<T> {
            pub fn into_inner(self) -> Tensor4<T> {
                self.0
            }
        }
    };
}

raster_newtype!(ImageBatch);
raster_newtype!(MaskBatch);
raster_newtype!(ProbMap);

impl<T: Scalar> ImageBatch<T> {
    /// Validates range and the multiple-of-16 spatial constraint.
    pub fn new(t: Tensor4<T>) -> Result<Self> {
        if t.height() % 16 != 0 || t.width() % 16 != 0 {
            return Err(Error::Shape(format!(
                "image height/width must be multiples of 16, got {}x{}",
                t.height(),
                t.width()
            )));
        }
        if let Some(v) = t
            .as_slice()
            .iter()
            .find(|v| !v.is_finite() || **v < T::zero() || **v > T::one())
        {
            return Err(Error::Range(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self(t))
    }
}

impl<T: Scalar> MaskBatch<T> {
    /// Validates that every pixel is a one-hot vector.
    pub fn new(t: Tensor4<T>) -> Result<Self> {
        let plane = t.plane_len();
        for n in 0..t.batch() {
            let item = t.item_slice(n);
            for p in 0..plane {
                let mut sum = T::zero();
                for c in 0..t.channels() {
                    let v = item[c * plane + p];
                    if v != T::zero() && v != T::one() {
                        return Err(Error::Range(format!("mask entry {v} is not 0 or 1")));
                    }
                    sum += v;
                }
                if sum != T::one() {
                    return Err(Error::Range("mask pixel is not one-hot".into()));
                }
            }
        }
        Ok(Self(t))
    }

    /// Builds a two-class one-hot mask from per-pixel foreground flags
    /// (`batch x H x W`, row-major).
    pub fn from_foreground(batch: usize, h: usize, w: usize, fg: &[bool]) -> Self {
        assert_eq!(fg.len(), batch * h * w);
        let mut t = Tensor4::zeros([batch, 2, h, w]);
        for n in 0..batch {
            for p in 0..h * w {
                let f = fg[n * h * w + p];
                t.plane_mut(n, 0)[p] = if f { T::zero() } else { T::one() };
                t.plane_mut(n, 1)[p] = if f { T::one() } else { T::zero() };
            }
        }
        Self(t)
    }
}

impl<T: Scalar> ProbMap<T> {
    /// Largest deviation of a per-pixel class sum from one.
    pub fn max_normalization_error(&self) -> T {
        let plane = self.plane_len();
        let mut worst = T::zero();
        for n in 0..self.batch() {
            let item = self.item_slice(n);
            for p in 0..plane {
                let s: T = (0..self.channels()).map(|c| item[c * plane + p]).sum();
                worst = worst.max((s - T::one()).abs());
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stack_and_item_are_inverse() {
        let a = Tensor4::<f32>::from_vec([1, 2, 1, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor4::<f32>::from_vec([1, 2, 1, 2], vec![5., 6., 7., 8.]).unwrap();
        let s = Tensor4::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), [2, 2, 1, 2]);
        assert_eq!(s.item(1), b);
        assert_eq!(s.at(1, 1, 0, 0), 7.0);
    }

    #[test]
    fn image_batch_rejects_bad_sizes_and_ranges() {
        assert!(ImageBatch::new(Tensor4::<f32>::zeros([1, 3, 15, 16])).is_err());
        assert!(ImageBatch::new(Tensor4::<f32>::filled([1, 3, 16, 16], 1.5)).is_err());
        assert!(ImageBatch::new(Tensor4::<f32>::filled([1, 3, 16, 16], 0.5)).is_ok());
    }

    #[test]
    fn mask_from_foreground_is_one_hot() {
        let m = MaskBatch::<f64>::from_foreground(1, 1, 3, &[true, false, true]);
        assert!(MaskBatch::new(m.0.clone()).is_ok());
        assert_eq!(m.plane(0, 1), &[1.0, 0.0, 1.0]);
    }
}
