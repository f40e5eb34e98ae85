//! Adam over the trainable entries of a [`ParamSet`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::segnet::{Gradients, ParamKind, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    /// Number of completed updates.
    pub t: u64,
    pub(crate) m: Vec<Vec<T>>,
    pub(crate) v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = |p: &crate::segnet::Param<T>| match p.kind {
            ParamKind::Weight => vec![T::zero(); p.data.len()],
            ParamKind::Buffer => Vec::new(),
        };
        Self {
            config,
            t: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    pub(crate) fn from_parts(config: AdamConfig, t: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Self {
        Self { config, t, m, v }
    }

    /// One bias-corrected Adam update of every weight entry.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Gradients<T>) -> Result<()> {
        if grads.slots.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let bc1 = T::one() - T::lit(c.beta1.powi(self.t as i32));
        let bc2 = T::one() - T::lit(c.beta2.powi(self.t as i32));
        let lr = T::lit(c.learning_rate);
        let eps = T::lit(c.eps);
        for (i, p) in params.iter_mut().enumerate() {
            if p.kind != ParamKind::Weight {
                continue;
            }
            let g = &grads.slots[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_each_weight_by_lr_against_gradient_sign() {
        let mut p = ParamSet::<f64>::new();
        p.push("w".into(), vec![3], ParamKind::Weight, vec![1.0, 1.0, 1.0]);
        p.push("b".into(), vec![1], ParamKind::Buffer, vec![5.0]);
        let mut g = Gradients::zeros_like(&p);
        g.slot_mut(0).copy_from_slice(&[2.0, -0.5, 0.0]);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p, &g).unwrap();
        let w = p.data(0);
        assert!((w[0] - 0.999).abs() < 1e-9);
        assert!((w[1] - 1.001).abs() < 1e-9);
        assert_eq!(w[2], 1.0);
        assert_eq!(p.data(1), &[5.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamSet::<f64>::new();
        p.push("w".into(), vec![1], ParamKind::Weight, vec![3.0]);
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 0.05,
                ..AdamConfig::default()
            },
            &p,
        );
        for _ in 0..2000 {
            let mut g = Gradients::zeros_like(&p);
            g.slot_mut(0)[0] = 2.0 * p.data(0)[0];
            adam.step(&mut p, &g).unwrap();
        }
        assert!(p.data(0)[0].abs() < 1e-3);
    }
}
