use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Endless stream of index batches. Each pass visits every item once in a
/// fresh seeded order; batches may straddle two passes, so sets smaller than
/// the batch repeat items within a batch.
#[derive(Clone, Debug)]
pub struct InfiniteSampler {
    len: usize,
    batch: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl InfiniteSampler {
    pub fn new(len: usize, batch: usize, rng: ChaCha8Rng) -> Result<Self> {
        if len == 0 {
            return Err(Error::Data("cannot sample from an empty dataset".into()));
        }
        if batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(Self {
            len,
            batch,
            order: Vec::new(),
            pos: 0,
            rng,
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.order = (0..self.len).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

impl Iterator for InfiniteSampler {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}
