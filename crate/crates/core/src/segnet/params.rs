use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Trained by the optimizer.
    Weight,
    /// Running statistics; never receives gradients but is tracked by EMA.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub data: Vec<T>,
}

/// Flat, ordered, named parameter collection.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    entries: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, name: String, shape: Vec<usize>, kind: ParamKind, data: Vec<T>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(Param {
            name,
            shape,
            kind,
            data,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn get(&self, i: usize) -> &Param<T> {
        &self.entries[i]
    }

    pub fn data(&self, i: usize) -> &[T] {
        &self.entries[i].data
    }

    pub fn data_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.entries[i].data
    }

    pub(crate) fn take_data(&mut self, i: usize) -> Vec<T> {
        std::mem::take(&mut self.entries[i].data)
    }

    pub(crate) fn put_data(&mut self, i: usize, data: Vec<T>) {
        debug_assert!(self.entries[i].data.is_empty());
        self.entries[i].data = data;
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.entries.iter().find(|p| p.name == name)
    }

    /// Number of trainable scalars.
    pub fn weight_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.data.len())
            .sum()
    }

    /// Same names, kinds and shapes in the same order.
    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Shape(format!(
                "parameter collections differ in length: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.shape != b.shape || a.kind != b.kind {
                return Err(Error::Shape(format!(
                    "parameter `{}` {:?} does not pair with `{}` {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    /// Every scalar in collection order, for comparisons in tests and tools.
    pub fn flatten(&self) -> Vec<T> {
        self.entries.iter().flat_map(|p| p.data.iter().copied()).collect()
    }
}

/// Gradients aligned with a [`ParamSet`]; buffer slots stay empty.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub(crate) slots: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Self {
            slots: params
                .iter()
                .map(|p| match p.kind {
                    ParamKind::Weight => vec![T::zero(); p.data.len()],
                    ParamKind::Buffer => Vec::new(),
                })
                .collect(),
        }
    }

    pub fn slot(&self, i: usize) -> &[T] {
        &self.slots[i]
    }

    pub fn slot_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.slots[i]
    }

    /// `self += scale * other`. A zero scale leaves `self` bit-for-bit
    /// untouched (no `-0 + 0` sign flips).
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        if scale == T::zero() {
            return;
        }
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * *y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(|v| v.is_finite())
    }

    pub fn flatten(&self) -> Vec<T> {
        self.slots.iter().flatten().copied().collect()
    }
}
