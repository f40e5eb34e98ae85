//! Dice losses and the consistency-weight schedule.
//!
//! Both Dice variants score the foreground channel (class 1) per batch item
//! as `1 - (2 * sum(a * b) + smooth) / (sum(a) + sum(b) + smooth)` and
//! average over the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{MaskBatch, ProbMap, Tensor4};

pub const DEFAULT_SMOOTH: f64 = 1.0;
const FOREGROUND: usize = 1;

fn check_pair<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>, smooth: f64) -> Result<()> {
    b.ensure_shape(a.shape(), "dice operands")?;
    if a.channels() <= FOREGROUND {
        return Err(Error::Shape("dice needs a foreground channel".into()));
    }
    if smooth.is_nan() || smooth <= 0.0 {
        return Err(Error::Range(format!("dice smoothing must be positive, got {smooth}")));
    }
    Ok(())
}

/// Value of the foreground soft Dice loss and, optionally, its gradient with
/// respect to `a` (the other argument is held constant).
fn soft_dice<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>, smooth: f64, want_grad: bool) -> (T, Option<Tensor4<T>>) {
    let n = a.batch();
    let s = T::lit(smooth);
    let two = T::lit(2.0);
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut total = T::zero();
    let mut grad = want_grad.then(|| Tensor4::zeros(a.shape()));
    for i in 0..n {
        let pa = a.plane(i, FOREGROUND);
        let pb = b.plane(i, FOREGROUND);
        let mut inter = T::zero();
        let mut sum_a = T::zero();
        let mut sum_b = T::zero();
        for (&x, &y) in pa.iter().zip(pb) {
            inter += x * y;
            sum_a += x;
            sum_b += y;
        }
        let num = two * inter + s;
        let den = sum_a + sum_b + s;
        total += T::one() - num / den;
        if let Some(g) = grad.as_mut() {
            // d/da_k [1 - num/den] = -(2 b_k den - num) / den^2
            let den2 = den * den;
            for (gk, &y) in g.plane_mut(i, FOREGROUND).iter_mut().zip(pb) {
                *gk = -(two * y * den - num) / den2 * inv_n;
            }
        }
    }
    (total * inv_n, grad)
}

/// Supervised Dice loss of a prediction against a one-hot mask.
pub fn dice_loss<T: Scalar>(pred: &ProbMap<T>, target: &MaskBatch<T>, smooth: f64) -> Result<T> {
    check_pair(pred, target, smooth)?;
    Ok(soft_dice(pred, target, smooth, false).0)
}

/// [`dice_loss`] together with its gradient with respect to `pred`.
pub fn dice_loss_grad<T: Scalar>(pred: &ProbMap<T>, target: &MaskBatch<T>, smooth: f64) -> Result<(T, Tensor4<T>)> {
    check_pair(pred, target, smooth)?;
    let (v, g) = soft_dice(pred, target, smooth, true);
    Ok((v, g.expect("gradient requested")))
}

/// Soft Dice disagreement between two probability maps. Symmetric as a value.
pub fn soft_dice_consistency<T: Scalar>(student: &ProbMap<T>, reference: &ProbMap<T>, smooth: f64) -> Result<T> {
    check_pair(student, reference, smooth)?;
    Ok(soft_dice(student, reference, smooth, false).0)
}

/// [`soft_dice_consistency`] with the gradient taken through `student` only;
/// `reference` is a constant.
pub fn soft_dice_consistency_grad<T: Scalar>(
    student: &ProbMap<T>,
    reference: &ProbMap<T>,
    smooth: f64,
) -> Result<(T, Tensor4<T>)> {
    check_pair(student, reference, smooth)?;
    let (v, g) = soft_dice(student, reference, smooth, true);
    Ok((v, g.expect("gradient requested")))
}

/// Consistency weight ramp: zero up to `t1`, `lambda_max` from `t2` on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RampSchedule {
    pub t1: u64,
    pub t2: u64,
    pub lambda_max: f64,
}

impl Default for RampSchedule {
    fn default() -> Self {
        Self {
            t1: 8_000,
            t2: 14_000,
            lambda_max: 1.0,
        }
    }
}

impl RampSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.t1 > self.t2 {
            return Err(Error::Config(format!("ramp.t1 = {} exceeds ramp.t2 = {}", self.t1, self.t2)));
        }
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return Err(Error::Config("ramp.lambda_max must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// `lambda_max * exp(-5 (1 - tau)^2)` with `tau = (step - t1) / (t2 - t1)`
/// strictly between the endpoints. The curve starts at
/// `lambda_max * exp(-5)`, so the step at `t1` is a jump of that size. When
/// `t1 == t2` the weight switches straight to `lambda_max` at `t2`.
pub fn ramp_lambda(step: u64, sched: &RampSchedule) -> f64 {
    if step >= sched.t2 {
        return sched.lambda_max;
    }
    if step <= sched.t1 {
        return 0.0;
    }
    let tau = (step - sched.t1) as f64 / (sched.t2 - sched.t1) as f64;
    sched.lambda_max * (-5.0 * (1.0 - tau) * (1.0 - tau)).exp()
}

/// Loss values of one training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l_seg: f64,
    pub l_ec_labeled: f64,
    pub l_ec_unlabeled: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(step: u64, l_seg: f64, l_ec_labeled: f64, l_ec_unlabeled: f64, lambda: f64) -> Self {
        Self {
            step,
            l_seg,
            l_ec_labeled,
            l_ec_unlabeled,
            lambda,
            total: l_seg + lambda * (l_ec_labeled + l_ec_unlabeled),
        }
    }

    pub fn all_finite(&self) -> bool {
        [self.l_seg, self.l_ec_labeled, self.l_ec_unlabeled, self.lambda, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two(fg: [f64; 4]) -> Tensor4<f64> {
        let mut data = fg.map(|v| 1.0 - v).to_vec();
        data.extend_from_slice(&fg);
        Tensor4::from_vec([1, 2, 2, 2], data).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let m = MaskBatch(two_by_two([1.0, 0.0, 1.0, 1.0]));
        let p = ProbMap(m.0.clone());
        assert!(dice_loss(&p, &m, 1.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn all_background_prediction_on_full_foreground() {
        // |G| = 4, nothing predicted: 1 - 1 / 5
        let m = MaskBatch(two_by_two([1.0; 4]));
        let p = ProbMap(two_by_two([0.0; 4]));
        assert!((dice_loss(&p, &m, 1.0).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn uniform_half_against_half_foreground() {
        // inter = 1, sums = 2 + 2: 1 - 3/5
        let a = ProbMap(two_by_two([0.5; 4]));
        let b = ProbMap(two_by_two([1.0, 1.0, 0.0, 0.0]));
        let v = soft_dice_consistency(&a, &b, 1.0).unwrap();
        assert!((v - 0.4).abs() < 1e-15);
        assert_eq!(v, soft_dice_consistency(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn batch_of_duplicates_equals_single() {
        let p = two_by_two([0.2, 0.7, 0.9, 0.1]);
        let m = two_by_two([0.0, 1.0, 1.0, 0.0]);
        let single = dice_loss(&ProbMap(p.clone()), &MaskBatch(m.clone()), 1.0).unwrap();
        let pb = Tensor4::stack(&[&p, &p]).unwrap();
        let mb = Tensor4::stack(&[&m, &m]).unwrap();
        let double = dice_loss(&ProbMap(pb), &MaskBatch(mb), 1.0).unwrap();
        assert!((single - double).abs() < 1e-15);
    }

    #[test]
    fn errors_on_shape_mismatch_and_bad_smooth() {
        let a = ProbMap(two_by_two([0.5; 4]));
        let b = ProbMap(Tensor4::zeros([1, 2, 2, 3]));
        assert!(soft_dice_consistency(&a, &b, 1.0).is_err());
        assert!(soft_dice_consistency(&a, &a, 0.0).is_err());
    }

    #[test]
    fn smooth_to_zero_approaches_plain_dice() {
        // plain Dice: 2*1.6 / (2.0 + 3) = 0.64 -> complement 0.36
        let p = ProbMap(two_by_two([0.9, 0.7, 0.4, 0.0]));
        let m = MaskBatch(two_by_two([1.0, 1.0, 1.0, 0.0]));
        let exact = 1.0 - 2.0 * (0.9 + 0.7 + 0.4) / (2.0 + 3.0);
        let mut prev = f64::INFINITY;
        for smooth in [1.0, 1e-1, 1e-2, 1e-4, 1e-8] {
            let err = (dice_loss(&p, &m, smooth).unwrap() - exact).abs();
            assert!(err <= prev);
            prev = err;
        }
        assert!(prev < 1e-8);
    }

    #[test]
    fn ramp_endpoints_and_midpoint() {
        let r = RampSchedule {
            t1: 8_000,
            t2: 14_000,
            lambda_max: 1.0,
        };
        assert_eq!(ramp_lambda(0, &r), 0.0);
        assert_eq!(ramp_lambda(8_000, &r), 0.0);
        assert!(ramp_lambda(8_001, &r) > 0.0);
        assert!(ramp_lambda(13_999, &r) < 1.0);
        assert_eq!(ramp_lambda(14_000, &r), 1.0);
        // exp(-1.25) to 18 digits
        assert!((ramp_lambda(11_000, &r) - 0.286_504_796_860_190_1).abs() < 1e-15);
    }

    #[test]
    fn ramp_degenerate_interval_switches_at_t2() {
        let r = RampSchedule {
            t1: 5,
            t2: 5,
            lambda_max: 0.1,
        };
        assert_eq!(ramp_lambda(4, &r), 0.0);
        assert_eq!(ramp_lambda(5, &r), 0.1);
    }

    #[test]
    fn report_total_is_weighted_sum() {
        let r = LossReport::new(3, 0.5, 0.25, 0.125, 0.5);
        assert_eq!(r.total, 0.5 + 0.5 * 0.375);
    }
}
