use exconsist::data::{synth_generate, Dataset, SynthParams};
use exconsist::losses::RampSchedule;
use exconsist::rng::{derive_seed, stream, Stream};
use exconsist::segnet::{load_checkpoint, ParamKind};
use exconsist::trainer::{
    init_train, resume_training, run_training, train_step, train_step_traced, AblationFlags, MetricRecord, Method,
    TrainConfig, TrainData, TrainState,
};
use exconsist::transforms::{ExtremePool, ExtremeTransformInstance, Frame};
use exconsist::{ImageBatch, MaskBatch, NetworkConfig};

fn net() -> NetworkConfig {
    NetworkConfig {
        base_width: 2,
        ..NetworkConfig::default()
    }
}

fn data() -> (Dataset, Dataset) {
    let ds = synth_generate(6, 16, 16, &SynthParams::default(), 11).unwrap();
    (ds.subset(&[0, 1, 2]), ds.subset(&[3, 4, 5]).without_masks())
}

fn cfg(method: Method) -> TrainConfig {
    TrainConfig {
        method,
        alpha: 0.9,
        total_steps: 8,
        batch_labeled: 2,
        batch_unlabeled: 2,
        seed: 5,
        val_every: 4,
        ramp: RampSchedule {
            t1: 0,
            t2: 4,
            lambda_max: 1.0,
        },
        ..TrainConfig::default()
    }
}

/// Full consistency weight from the first step.
fn cfg_on() -> TrainConfig {
    TrainConfig {
        ramp: RampSchedule {
            t1: 0,
            t2: 0,
            lambda_max: 1.0,
        },
        ..cfg(Method::ExtremeConsistency)
    }
}

fn batches(lab: &Dataset, unl: &Dataset, step: u64) -> (ImageBatch<f64>, MaskBatch<f64>, ImageBatch<f64>) {
    let i = [(step % 3) as usize, ((step + 1) % 3) as usize];
    (
        lab.image_batch(&i).unwrap(),
        lab.mask_batch(&i).unwrap(),
        unl.image_batch(&i).unwrap(),
    )
}

fn run_steps(state: &mut TrainState<f64>, c: &TrainConfig, steps: u64) {
    let (lab, unl) = data();
    for s in 0..steps {
        let (x, y, u) = batches(&lab, &unl, s);
        train_step(state, (&x, &y), Some(&u), c).unwrap();
    }
}

#[test]
fn zero_weight_matches_supervised_bit_for_bit() {
    let mut full = cfg(Method::ExtremeConsistency);
    full.ramp.lambda_max = 0.0;
    full.skip_idle_consistency = false;
    let sup = cfg(Method::Supervised);
    let mut a = init_train::<f64>(&net(), &full).unwrap();
    let mut b = init_train::<f64>(&net(), &sup).unwrap();
    run_steps(&mut a, &full, 50);
    run_steps(&mut b, &sup, 50);
    assert_eq!(a.student.params(), b.student.params());
    assert_eq!(a.teacher.params(), b.teacher.params());
}

#[test]
fn idle_branches_report_zero_when_skipped() {
    let mut c = cfg(Method::ExtremeConsistency);
    c.ramp = RampSchedule {
        t1: 3,
        t2: 6,
        lambda_max: 1.0,
    };
    let (lab, unl) = data();
    let mut st = init_train::<f64>(&net(), &c).unwrap();
    for s in 0..5 {
        let (x, y, u) = batches(&lab, &unl, s);
        let r = train_step(&mut st, (&x, &y), Some(&u), &c).unwrap();
        if s <= 3 {
            assert_eq!((r.lambda, r.l_ec_labeled, r.l_ec_unlabeled), (0.0, 0.0, 0.0));
        } else {
            assert!(r.lambda > 0.0 && r.l_ec_labeled > 0.0 && r.l_ec_unlabeled > 0.0);
        }
    }
}

#[test]
fn teacher_follows_the_closed_form_average() {
    let c = cfg(Method::ExtremeConsistency);
    let (lab, unl) = data();
    let mut st = init_train::<f64>(&net(), &c).unwrap();
    let mut expected = st.teacher.params().flatten();
    for s in 0..10 {
        let (x, y, u) = batches(&lab, &unl, s);
        train_step(&mut st, (&x, &y), Some(&u), &c).unwrap();
        for (e, v) in expected.iter_mut().zip(st.student.params().flatten()) {
            *e = c.alpha * *e + (1.0 - c.alpha) * v;
        }
        assert_eq!(st.teacher.params().flatten(), expected, "step {s}");
    }
    // buffers are averaged too, so they moved away from their init
    let moved = st
        .teacher
        .params()
        .iter()
        .filter(|p| p.kind == ParamKind::Buffer)
        .any(|p| p.name.contains("mean") && p.data.iter().any(|&v| v != 0.0));
    assert!(moved);
}

#[test]
fn same_seed_same_run_other_seed_other_run() {
    let c = cfg(Method::ExtremeConsistency);
    let mut a = init_train::<f64>(&net(), &c).unwrap();
    let mut b = init_train::<f64>(&net(), &c).unwrap();
    run_steps(&mut a, &c, 4);
    run_steps(&mut b, &c, 4);
    assert_eq!(a.student.params(), b.student.params());
    let c2 = TrainConfig { seed: 6, ..c.clone() };
    let mut d = init_train::<f64>(&net(), &c2).unwrap();
    run_steps(&mut d, &c2, 4);
    assert_ne!(a.student.params(), d.student.params());
}

#[test]
fn recorded_transforms_come_from_the_step_streams() {
    let c = cfg_on();
    let (lab, unl) = data();
    let mut st = init_train::<f64>(&net(), &c).unwrap();
    for s in 0..3u64 {
        let (x, y, u) = batches(&lab, &unl, s);
        let (_, rec) = train_step_traced(&mut st, (&x, &y), Some(&u), &c).unwrap();
        assert_eq!(rec.basic.len(), 2);
        assert!(rec.extreme_labeled.iter().all(|t| !t.mixing.active));
        let frame = Frame {
            height: 16,
            width: 16,
            sources: 2,
        };
        let mut rng = stream(derive_seed(c.seed, s), Stream::ExtremeUnlabeled);
        let replay: Vec<_> = (0..2)
            .map(|_| ExtremeTransformInstance::sample(&mut rng, ExtremePool::FULL, frame))
            .collect();
        assert_eq!(rec.extreme_unlabeled, replay);
        for t in rec.extreme_unlabeled.iter().chain(&rec.extreme_labeled) {
            t.validate(16, 16).unwrap();
            assert!(!t.mixing.active || t.mixing.source_index < 2);
        }
    }
}

#[test]
fn self_reference_ignores_the_teacher() {
    let mut c = cfg(Method::ExtremeConsistency);
    c.ablation = AblationFlags {
        use_teacher: false,
        ..AblationFlags::default()
    };
    let mut a = init_train::<f64>(&net(), &c).unwrap();
    let mut b = init_train::<f64>(&net(), &c).unwrap();
    let mut garbage = b.teacher.params().clone();
    garbage.iter_mut().filter(|p| p.kind == ParamKind::Weight).for_each(|p| p.data.iter_mut().for_each(|v| *v *= -3.0));
    b.teacher.set_params(garbage).unwrap();
    run_steps(&mut a, &c, 4);
    run_steps(&mut b, &c, 4);
    assert_eq!(a.student.params(), b.student.params());
}

#[test]
fn teacher_reference_changes_the_student() {
    // the teacher enters the student's update only through the target
    let c = cfg_on();
    let mut a = init_train::<f64>(&net(), &c).unwrap();
    let mut b = init_train::<f64>(&net(), &c).unwrap();
    let mut other = b.teacher.params().clone();
    other.iter_mut().filter(|p| p.kind == ParamKind::Weight).for_each(|p| p.data.iter_mut().for_each(|v| *v *= -3.0));
    b.teacher.set_params(other).unwrap();
    run_steps(&mut a, &c, 1);
    run_steps(&mut b, &c, 1);
    assert_ne!(a.student.params(), b.student.params());
}

#[test]
fn missing_unlabeled_batch_is_an_error() {
    let c = cfg_on();
    let (lab, _) = data();
    let mut st = init_train::<f64>(&net(), &c).unwrap();
    let x = lab.image_batch::<f64>(&[0, 1]).unwrap();
    let y = lab.mask_batch::<f64>(&[0, 1]).unwrap();
    assert!(train_step(&mut st, (&x, &y), None, &c).is_err());
}

#[test]
fn every_method_and_ablation_keeps_losses_finite() {
    let (lab, unl) = data();
    let mut configs = vec![cfg(Method::Supervised), cfg(Method::ExtremeAugmented)];
    for f in [
        AblationFlags::default(),
        AblationFlags {
            exclusive: false,
            ..AblationFlags::default()
        },
        AblationFlags {
            use_unlabeled: false,
            ..AblationFlags::default()
        },
        AblationFlags {
            diverse_intensity: false,
            diverse_geometric: false,
            ..AblationFlags::default()
        },
    ] {
        configs.push(TrainConfig {
            ablation: f,
            ..cfg(Method::ExtremeConsistency)
        });
    }
    for c in configs {
        let out = run_training::<f32>(
            &net(),
            &c,
            TrainData {
                labeled: &lab,
                unlabeled: Some(&unl),
                validation: Some(&lab),
            },
            None,
        )
        .unwrap();
        for m in &out.metrics {
            match m {
                MetricRecord::Step(r) => assert!(r.all_finite() && r.l_seg >= 0.0),
                MetricRecord::Validation { val_dice, .. } => assert!((0.0..=1.0).contains(val_dice)),
            }
        }
    }
}

#[test]
fn resume_from_checkpoint_matches_uninterrupted_run() {
    let (lab, unl) = data();
    let data = TrainData {
        labeled: &lab,
        unlabeled: Some(&unl),
        validation: Some(&lab),
    };
    let c = cfg(Method::ExtremeConsistency);
    let whole = run_training::<f64>(&net(), &c, data, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let half = TrainConfig {
        total_steps: 5,
        ..c.clone()
    };
    run_training::<f64>(&net(), &half, data, Some(dir.path())).unwrap();
    let ck = load_checkpoint::<f64>(&dir.path().join("checkpoint_last.bin")).unwrap();
    assert_eq!(ck.step, 5);
    assert!(dir.path().join("checkpoint_best.bin").exists());
    let lines = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    // five steps plus validations after steps 4 and 5
    assert_eq!(lines.lines().count(), 7);

    let state = TrainState::from_checkpoint(&ck).unwrap();
    let resumed = resume_training(state, &c, data, None).unwrap();
    assert_eq!(resumed.state.student.params(), whole.state.student.params());
    assert_eq!(resumed.state.teacher.params(), whole.state.teacher.params());
}
