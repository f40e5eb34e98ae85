use proptest::prelude::*;

use exconsist::losses::{dice_loss, ramp_lambda, soft_dice_consistency, soft_dice_consistency_grad, RampSchedule};
use exconsist::{ema_update, ImageBatch, MaskBatch, NetworkConfig, ProbMap, SegNetwork, Tensor4};

fn probmap(n: usize, h: usize, w: usize) -> impl Strategy<Value = ProbMap<f64>> {
    prop::collection::vec(0.0f64..=1.0, n * h * w).prop_map(move |fg| {
        let mut t = Tensor4::zeros([n, 2, h, w]);
        for i in 0..n {
            for p in 0..h * w {
                let f = fg[i * h * w + p];
                t.plane_mut(i, 0)[p] = 1.0 - f;
                t.plane_mut(i, 1)[p] = f;
            }
        }
        ProbMap(t)
    })
}

fn mask(n: usize, h: usize, w: usize) -> impl Strategy<Value = MaskBatch<f64>> {
    prop::collection::vec(any::<bool>(), n * h * w).prop_map(move |fg| MaskBatch::from_foreground(n, h, w, &fg))
}

fn tiny() -> NetworkConfig {
    NetworkConfig {
        base_width: 2,
        ..NetworkConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_losses_are_bounded(p in probmap(2, 8, 8), q in probmap(2, 8, 8), m in mask(2, 8, 8)) {
        let d = dice_loss(&p, &m, 1.0).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        let c = soft_dice_consistency(&p, &q, 1.0).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));
        prop_assert!((c - soft_dice_consistency(&q, &p, 1.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn hard_agreement_has_zero_consistency(m in mask(2, 8, 8)) {
        let p = ProbMap(m.0.clone());
        prop_assert!(soft_dice_consistency(&p, &p, 1.0).unwrap().abs() < 1e-12);
        prop_assert!(dice_loss(&p, &m, 1.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn consistency_gradient_touches_only_the_foreground(p in probmap(2, 8, 8), q in probmap(2, 8, 8)) {
        let (_, g) = soft_dice_consistency_grad(&p, &q, 1.0).unwrap();
        for i in 0..2 {
            prop_assert!(g.plane(i, 0).iter().all(|v| *v == 0.0));
        }
        prop_assert!(g.all_finite());
    }

    #[test]
    fn ramp_is_monotone_and_bounded(t1 in 0u64..5_000, len in 0u64..20_000, lambda_max in 0.0f64..10.0) {
        let r = RampSchedule { t1, t2: t1 + len, lambda_max };
        let end = r.t2 + 100;
        let mut prev = 0.0;
        for k in 0..=1000u64 {
            let step = end * k / 1000;
            let l = ramp_lambda(step, &r);
            prop_assert!(l >= prev && l <= lambda_max, "step {step}: {l} after {prev}");
            prev = l;
        }
        prop_assert_eq!(ramp_lambda(end, &r), lambda_max);
        // with t1 == t2 the schedule is a plain switch at t2
        if len > 0 {
            prop_assert_eq!(ramp_lambda(t1, &r), 0.0);
        }
    }

    #[test]
    fn ema_stays_between_teacher_and_student(alpha in 0.0f64..=1.0, s1 in any::<u64>(), s2 in any::<u64>()) {
        let t0 = SegNetwork::<f64>::build(&tiny(), s1).unwrap();
        let s = SegNetwork::<f64>::build(&tiny(), s2).unwrap();
        let mut t = t0.clone();
        ema_update(&mut t, &s, alpha).unwrap();
        for ((a, b), c) in t0.params().flatten().iter().zip(s.params().flatten()).zip(t.params().flatten()) {
            let (lo, hi) = if *a < b { (*a, b) } else { (b, *a) };
            prop_assert!(c >= lo - 1e-15 && c <= hi + 1e-15);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn network_outputs_are_distributions(values in prop::collection::vec(0.0f64..=1.0, 2 * 3 * 16 * 16), seed in any::<u64>()) {
        let net = SegNetwork::<f64>::build(&tiny(), seed).unwrap();
        let x = ImageBatch::new(Tensor4::from_vec([2, 3, 16, 16], values).unwrap()).unwrap();
        let p = net.predict(&x).unwrap();
        prop_assert_eq!(p.shape(), [2, 2, 16, 16]);
        prop_assert!(p.max_normalization_error() < 1e-12);
        prop_assert!(p.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn ema_fixed_points() {
    let t0 = SegNetwork::<f64>::build(&tiny(), 1).unwrap();
    let s = SegNetwork::<f64>::build(&tiny(), 2).unwrap();
    let mut t = t0.clone();
    ema_update(&mut t, &s, 1.0).unwrap();
    assert_eq!(t.params(), t0.params());
    ema_update(&mut t, &s, 0.0).unwrap();
    assert_eq!(t.params(), s.params());
    let mut same = s.clone();
    ema_update(&mut same, &s, 0.37).unwrap();
    for (a, b) in same.params().flatten().iter().zip(s.params().flatten()) {
        assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
    }
}
