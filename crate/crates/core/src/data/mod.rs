//! Datasets, splits, batch samplers and the synthetic task generator.

mod io;
mod sampler;
mod synth;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::tensor::{ImageBatch, MaskBatch, Tensor4};

pub use io::{load_dataset, save_dataset};
pub use sampler::InfiniteSampler;
pub use synth::{shift_domain, synth_generate, SynthParams};

/// Image channels of every dataset item.
pub const CHANNELS: usize = 3;

/// One RGB image, planar `3 x H x W` in `[0, 1]`, with an optional binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: String,
    pub image: Vec<f32>,
    pub mask: Option<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub items: Vec<Item>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, height: usize, width: usize, items: Vec<Item>) -> Result<Self> {
        if height == 0 || width == 0 || height % 16 != 0 || width % 16 != 0 {
            return Err(Error::Data(format!("resolution {height}x{width} is not a positive multiple of 16")));
        }
        let plane = height * width;
        for it in &items {
            if it.image.len() != CHANNELS * plane {
                return Err(Error::Data(format!("item `{}` does not have {height}x{width} RGB pixels", it.id)));
            }
            if it.mask.as_ref().is_some_and(|m| m.len() != plane) {
                return Err(Error::Data(format!("mask of `{}` does not match {height}x{width}", it.id)));
            }
        }
        Ok(Self {
            name: name.into(),
            height,
            width,
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.items.iter().all(|it| it.mask.is_some())
    }

    pub fn ids(&self) -> Vec<String> {
        self.items.iter().map(|it| it.id.clone()).collect()
    }

    /// Copy with every mask removed.
    pub fn without_masks(&self) -> Dataset {
        let mut out = self.clone();
        out.items.iter_mut().for_each(|it| it.mask = None);
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            height: self.height,
            width: self.width,
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
        }
    }

    pub fn image_batch<T: Scalar>(&self, indices: &[usize]) -> Result<ImageBatch<T>> {
        let mut data = Vec::with_capacity(indices.len() * CHANNELS * self.height * self.width);
        for &i in indices {
            let it = self.items.get(i).ok_or_else(|| Error::Data(format!("item index {i} out of range")))?;
            data.extend(it.image.iter().map(|&v| T::lit(v as f64)));
        }
        ImageBatch::new(Tensor4::from_vec([indices.len(), CHANNELS, self.height, self.width], data)?)
    }

    pub fn mask_batch<T: Scalar>(&self, indices: &[usize]) -> Result<MaskBatch<T>> {
        let mut fg = Vec::with_capacity(indices.len() * self.height * self.width);
        for &i in indices {
            let it = self.items.get(i).ok_or_else(|| Error::Data(format!("item index {i} out of range")))?;
            let m = it
                .mask
                .as_ref()
                .ok_or_else(|| Error::Data(format!("item `{}` has no mask", it.id)))?;
            fg.extend_from_slice(m);
        }
        Ok(MaskBatch::from_foreground(indices.len(), self.height, self.width, &fg))
    }

    /// Every image as one batch.
    pub fn all_images<T: Scalar>(&self) -> Result<ImageBatch<T>> {
        self.image_batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    LimitedAnnotation,
    DomainShift,
}

/// Keeps the masks of `n_labeled` seed-chosen items and strips the rest.
/// Both halves keep the original item order.
pub fn split_limited(ds: &Dataset, n_labeled: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if !ds.is_fully_labeled() {
        return Err(Error::Data(format!("`{}` must be fully labeled to split", ds.name)));
    }
    if n_labeled == 0 || n_labeled > ds.len() {
        return Err(Error::Data(format!(
            "cannot label {n_labeled} of {} items in `{}`",
            ds.len(),
            ds.name
        )));
    }
    let mut rng = crate::rng::stream(derive_seed(seed, 0x5b1), crate::rng::Stream::LabeledOrder);
    let mut chosen = index::sample(&mut rng, ds.len(), n_labeled).into_vec();
    chosen.sort_unstable();
    let rest: Vec<usize> = (0..ds.len()).filter(|i| chosen.binary_search(i).is_err()).collect();
    Ok((ds.subset(&chosen), ds.subset(&rest).without_masks()))
}

/// Labeled source training set plus the target training set with its
/// labels discarded.
pub fn split_domain_shift(source: &Dataset, target: &Dataset) -> Result<(Dataset, Dataset)> {
    if !source.is_fully_labeled() {
        return Err(Error::Data(format!("source `{}` must be fully labeled", source.name)));
    }
    if source.height != target.height || source.width != target.width {
        return Err(Error::Data("source and target resolutions differ".into()));
    }
    if source.name == target.name && source.ids() == target.ids() {
        log::warn!("domain-shift split uses `{}` as both source and target", source.name);
    }
    Ok((source.clone(), target.without_masks()))
}

/// Split membership written beside every run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub protocol: Protocol,
    pub seed: u64,
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let items = (0..n)
            .map(|i| Item {
                id: format!("img{i:03}"),
                image: vec![i as f32 / n as f32; 3 * 256],
                mask: Some((0..256).map(|k| k % (i + 2) == 0).collect()),
            })
            .collect();
        Dataset::new("toy", 16, 16, items).unwrap()
    }

    #[test]
    fn limited_split_is_disjoint_exhaustive_and_strips_labels() {
        let ds = toy(30);
        let (l, u) = split_limited(&ds, 3, 11).unwrap();
        assert_eq!((l.len(), u.len()), (3, 27));
        assert!(l.is_fully_labeled());
        assert!(u.items.iter().all(|it| it.mask.is_none()));
        let mut all: Vec<String> = l.ids().into_iter().chain(u.ids()).collect();
        all.sort();
        assert_eq!(all, ds.ids());
        assert_eq!(split_limited(&ds, 3, 11).unwrap().0.ids(), l.ids());
        assert_ne!(split_limited(&ds, 3, 12).unwrap().0.ids(), l.ids());
    }

    #[test]
    fn limited_split_bounds() {
        let ds = toy(5);
        let (l, u) = split_limited(&ds, 5, 0).unwrap();
        assert_eq!((l.len(), u.len()), (5, 0));
        assert!(split_limited(&ds, 0, 0).is_err());
        assert!(split_limited(&ds, 6, 0).is_err());
    }

    #[test]
    fn domain_shift_split_discards_target_labels() {
        let src = toy(30);
        let mut tgt = toy(12);
        tgt.name = "target".into();
        let (l, u) = split_domain_shift(&src, &tgt).unwrap();
        assert_eq!((l.len(), u.len()), (30, 12));
        assert!(u.items.iter().all(|it| it.mask.is_none()));
    }

    #[test]
    fn batches_have_expected_layout() {
        let ds = toy(4);
        let x = ds.image_batch::<f32>(&[2, 0]).unwrap();
        assert_eq!(x.shape(), [2, 3, 16, 16]);
        assert_eq!(x.at(0, 1, 0, 0), 0.5);
        let y = ds.mask_batch::<f32>(&[1]).unwrap();
        assert_eq!(y.at(0, 1, 0, 0), 1.0);
        assert_eq!(y.at(0, 1, 0, 1), 0.0);
        assert!(ds.without_masks().mask_batch::<f32>(&[0]).is_err());
    }

    #[test]
    fn rejects_bad_resolution() {
        assert!(Dataset::new("x", 20, 16, vec![]).is_err());
    }
}
