//! Mean-teacher training with extreme consistency.
//!
//! One step:
//! 1. a basic transform per labeled item, applied to image and mask;
//! 2. supervised Dice of the student on the transformed labeled batch;
//! 3. labeled consistency: an extreme transform per item (no mixing), the
//!    student sees the transformed image and its output is compared with the
//!    equally transformed reference prediction;
//! 4. unlabeled consistency on the raw unlabeled batch, with patches mixed in
//!    from the transformed labeled batch;
//! 5. one Adam step on `L_seg + lambda (L_ec^l + L_ec^u)`;
//! 6. EMA update of the teacher.
//!
//! Reference predictions never carry gradient. Every step draws its
//! randomness from per-step, per-branch substreams, so disabling a branch
//! leaves the draws of every other branch unchanged.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, InfiniteSampler};
use crate::error::{Error, Result};
use crate::experiments::eval_dice;
use crate::losses::{dice_loss_grad, ramp_lambda, soft_dice_consistency_grad, LossReport, RampSchedule, DEFAULT_SMOOTH};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{derive_seed, stream, Stream};
use crate::scalar::Scalar;
use crate::segnet::{ema_update, save_checkpoint, Checkpoint, Gradients, NetworkConfig, ParamSet, SegNetwork};
use crate::tensor::{ImageBatch, MaskBatch, ProbMap, Tensor4};
use crate::transforms::{
    apply_basic, apply_extreme_to_images_each, apply_extreme_to_predictions_each, apply_geometric,
    BasicTransformInstance, ExtremePool, ExtremeTransformInstance, Fill, Frame, Interp,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Supervised Dice only.
    Supervised,
    /// Supervised Dice on labeled images passed through an extreme transform
    /// (no mixing) after the basic one; no consistency terms.
    ExtremeAugmented,
    /// The full teacher-student objective.
    ExtremeConsistency,
}

/// Switches for the ablation study. All on is the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub use_unlabeled: bool,
    /// Extreme transforms only on the student side. When off, the reference
    /// network sees the transformed input too.
    pub exclusive: bool,
    pub diverse_intensity: bool,
    pub diverse_geometric: bool,
    pub diverse_mixing: bool,
    /// When off, the reference is the student's own train-mode prediction
    /// with gradients blocked.
    pub use_teacher: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_unlabeled: true,
            exclusive: true,
            diverse_intensity: true,
            diverse_geometric: true,
            diverse_mixing: true,
            use_teacher: true,
        }
    }
}

impl AblationFlags {
    pub fn pool(&self) -> ExtremePool {
        ExtremePool {
            intensity: self.diverse_intensity,
            geometric: self.diverse_geometric,
            mixing: self.diverse_mixing,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    /// EMA decay of the teacher.
    pub alpha: f64,
    pub learning_rate: f64,
    pub total_steps: u64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub seed: u64,
    pub smooth: f64,
    /// Validate the teacher every this many steps (and after the last one).
    pub val_every: u64,
    /// Write `checkpoint_last.bin` every this many steps; 0 disables.
    pub checkpoint_every: u64,
    /// Skip the consistency branches while their weight is zero. Their
    /// losses are then reported as 0.
    pub skip_idle_consistency: bool,
    pub ramp: RampSchedule,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::ExtremeConsistency,
            alpha: 0.999,
            learning_rate: 1e-3,
            total_steps: 20_000,
            batch_labeled: 4,
            batch_unlabeled: 4,
            seed: 0,
            smooth: DEFAULT_SMOOTH,
            val_every: 200,
            checkpoint_every: 0,
            skip_idle_consistency: true,
            ramp: RampSchedule::default(),
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("train.alpha = {} outside [0, 1]", self.alpha)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        if self.batch_labeled == 0 {
            return Err(Error::Config("train.batch_labeled must be positive".into()));
        }
        if self.uses_unlabeled() && self.batch_unlabeled == 0 {
            return Err(Error::Config("train.batch_unlabeled must be positive".into()));
        }
        if !(self.smooth > 0.0 && self.smooth.is_finite()) {
            return Err(Error::Config("train.smooth must be positive".into()));
        }
        if self.val_every == 0 {
            return Err(Error::Config("train.val_every must be positive".into()));
        }
        self.ramp.validate()?;
        let a = &self.ablation;
        if self.method == Method::ExtremeConsistency && !(a.diverse_intensity || a.diverse_geometric || a.diverse_mixing) {
            return Err(Error::Config("ablation needs at least one diverse_* family".into()));
        }
        Ok(())
    }

    pub fn uses_unlabeled(&self) -> bool {
        self.method == Method::ExtremeConsistency && self.ablation.use_unlabeled
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub student: SegNetwork<T>,
    pub teacher: SegNetwork<T>,
    pub optimizer: Adam<T>,
    /// Completed steps.
    pub step: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.student.config().clone(),
            step: self.step,
            student: self.student.params().clone(),
            teacher: self.teacher.params().clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        Ok(Self {
            student: ck.student_network()?,
            teacher: ck.teacher_network()?,
            optimizer: ck.optimizer.clone(),
            step: ck.step,
        })
    }
}

/// Student and teacher from independent substreams of `cfg.seed`.
pub fn init_train<T: Scalar>(net: &NetworkConfig, cfg: &TrainConfig) -> Result<TrainState<T>> {
    cfg.validate()?;
    let student = SegNetwork::build_with(net, &mut stream(cfg.seed, Stream::StudentInit))?;
    let teacher = SegNetwork::build_with(net, &mut stream(cfg.seed, Stream::TeacherInit))?;
    let optimizer = Adam::new(cfg.adam(), student.params());
    Ok(TrainState {
        student,
        teacher,
        optimizer,
        step: 0,
    })
}

fn step_rng(cfg: &TrainConfig, step: u64, which: Stream) -> ChaCha8Rng {
    stream(derive_seed(cfg.seed, step), which)
}

/// Identity on values; the result is only ever used as a constant target.
pub fn stopgrad<T: Scalar>(p: &ProbMap<T>) -> ProbMap<T> {
    p.clone()
}

fn basic_per_item<T: Scalar>(
    ts: &[BasicTransformInstance],
    x: &ImageBatch<T>,
    y: &MaskBatch<T>,
) -> Result<(ImageBatch<T>, MaskBatch<T>)> {
    let mut xs = Vec::with_capacity(ts.len());
    let mut ys = Vec::with_capacity(ts.len());
    for (i, t) in ts.iter().enumerate() {
        let (xi, yi) = apply_basic(t, &ImageBatch(x.item(i)), Some(&MaskBatch(y.item(i))))?;
        xs.push(xi.0);
        ys.push(yi.expect("mask given").0);
    }
    Ok((
        ImageBatch(Tensor4::stack(&xs.iter().collect::<Vec<_>>())?),
        MaskBatch(Tensor4::stack(&ys.iter().collect::<Vec<_>>())?),
    ))
}

/// Warps one-hot masks with the geometric part of each extreme transform.
fn extreme_masks<T: Scalar>(ts: &[ExtremeTransformInstance], y: &MaskBatch<T>) -> Result<MaskBatch<T>> {
    let mut out = y.0.clone();
    for (i, t) in ts.iter().enumerate() {
        if let Some(g) = &t.geometric {
            out.set_item(i, &apply_geometric(g, &y.item(i), Interp::Nearest, Fill::Background)?);
        }
    }
    Ok(MaskBatch(out))
}

fn sample_extremes(rng: &mut ChaCha8Rng, n: usize, pool: ExtremePool, frame: Frame) -> Vec<ExtremeTransformInstance> {
    (0..n).map(|_| ExtremeTransformInstance::sample(rng, pool, frame)).collect()
}

fn check_grads<T: Scalar>(g: &Gradients<T>, step: u64, what: &str) -> Result<()> {
    if g.all_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            detail: format!("non-finite gradient in the {what} term"),
        })
    }
}

/// Everything one consistency branch produces.
struct Branch<T> {
    loss: f64,
    grads: Gradients<T>,
}

/// Transforms sampled within one step; exposed for inspection in tests.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StepTransforms {
    pub basic: Vec<BasicTransformInstance>,
    pub extreme_labeled: Vec<ExtremeTransformInstance>,
    pub extreme_unlabeled: Vec<ExtremeTransformInstance>,
}

/// Runs one step and returns its losses.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    labeled: (&ImageBatch<T>, &MaskBatch<T>),
    unlabeled: Option<&ImageBatch<T>>,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    train_step_traced(state, labeled, unlabeled, cfg).map(|(r, _)| r)
}

/// [`train_step`] that also returns the sampled transforms.
pub fn train_step_traced<T: Scalar>(
    state: &mut TrainState<T>,
    labeled: (&ImageBatch<T>, &MaskBatch<T>),
    unlabeled: Option<&ImageBatch<T>>,
    cfg: &TrainConfig,
) -> Result<(LossReport, StepTransforms)> {
    let (xl, yl) = labeled;
    let n_l = xl.batch();
    if yl.batch() != n_l || yl.height() != xl.height() || yl.width() != xl.width() {
        return Err(Error::Shape("labeled images and masks differ in shape".into()));
    }
    let step = state.step;
    let flags = cfg.ablation;
    let mut record = StepTransforms::default();
    let frame = Frame {
        height: xl.height(),
        width: xl.width(),
        sources: n_l,
    };

    // (1) basic transform of the labeled pair
    let mut rng = step_rng(cfg, step, Stream::Basic);
    record.basic = (0..n_l)
        .map(|_| BasicTransformInstance::sample_for(&mut rng, xl.height(), xl.width()))
        .collect();
    let (mut xb, mut yb) = basic_per_item(&record.basic, xl, yl)?;
    if cfg.method == Method::ExtremeAugmented {
        let pool = ExtremePool {
            mixing: false,
            ..ExtremePool::FULL
        };
        let ts = sample_extremes(&mut step_rng(cfg, step, Stream::ExtremeLabeled), n_l, pool, frame);
        xb = apply_extreme_to_images_each(&ts, &xb, None)?;
        yb = extreme_masks(&ts, &yb)?;
        record.extreme_labeled = ts;
    }

    // (2) supervised term
    let (p_sup, trace_sup) = state
        .student
        .forward_traced(&xb, &mut step_rng(cfg, step, Stream::DropoutSupervised))?;
    let (l_seg, dp) = dice_loss_grad(&p_sup, &yb, cfg.smooth)?;
    let mut grads = state.student.backward(&trace_sup, &dp)?;
    check_grads(&grads, step, "supervised")?;

    // (3, 4) consistency terms
    let lambda = ramp_lambda(step, &cfg.ramp);
    let consistency = cfg.method == Method::ExtremeConsistency && !(cfg.skip_idle_consistency && lambda == 0.0);
    let mut l_ec_l = 0.0;
    let mut l_ec_u = 0.0;
    if consistency {
        let reference = |x: &ImageBatch<T>, salt: u64| -> Result<ProbMap<T>> {
            if flags.use_teacher {
                state.teacher.predict(x)
            } else {
                let mut rng = stream(derive_seed(derive_seed(cfg.seed, step), salt), Stream::DropoutReference);
                state.student.forward_train(x, &mut rng).map(|p| stopgrad(&p))
            }
        };
        let labeled_pool = ExtremePool {
            mixing: false,
            ..flags.pool()
        };
        record.extreme_labeled = sample_extremes(&mut step_rng(cfg, step, Stream::ExtremeLabeled), n_l, labeled_pool, frame);
        // the labeled reference doubles as the mixing-patch reference
        let ref_labeled = if flags.exclusive {
            Some(reference(&xb, 0)?)
        } else {
            None
        };

        let branch = |ts: &[ExtremeTransformInstance],
                      x: &ImageBatch<T>,
                      ref_x: Option<ProbMap<T>>,
                      salt: u64,
                      dropout: Stream|
         -> Result<Branch<T>> {
            let xs = apply_extreme_to_images_each(ts, x, Some(&xb))?;
            let target = if flags.exclusive {
                let r = match ref_x {
                    Some(r) => r,
                    None => reference(x, salt)?,
                };
                apply_extreme_to_predictions_each(ts, &r, ref_labeled.as_ref())?
            } else {
                reference(&xs, salt)?
            };
            let (p, trace) = state.student.forward_traced(&xs, &mut step_rng(cfg, step, dropout))?;
            let (loss, dp) = soft_dice_consistency_grad(&p, &target, cfg.smooth)?;
            let grads = state.student.backward(&trace, &dp)?;
            Ok(Branch {
                loss: loss.as_f64(),
                grads,
            })
        };

        let lab = branch(&record.extreme_labeled, &xb, ref_labeled.clone(), 1, Stream::DropoutLabeled)?;
        check_grads(&lab.grads, step, "labeled consistency")?;
        l_ec_l = lab.loss;
        grads.add_scaled(&lab.grads, T::lit(lambda));

        if flags.use_unlabeled {
            let xu = unlabeled.ok_or_else(|| Error::Data("unlabeled batch required by this configuration".into()))?;
            if xu.height() != xl.height() || xu.width() != xl.width() {
                return Err(Error::Shape("unlabeled and labeled batches differ in resolution".into()));
            }
            record.extreme_unlabeled =
                sample_extremes(&mut step_rng(cfg, step, Stream::ExtremeUnlabeled), xu.batch(), flags.pool(), frame);
            let unl = branch(&record.extreme_unlabeled, xu, None, 2, Stream::DropoutUnlabeled)?;
            check_grads(&unl.grads, step, "unlabeled consistency")?;
            l_ec_u = unl.loss;
            grads.add_scaled(&unl.grads, T::lit(lambda));
        }
    }

    let report = LossReport::new(step, l_seg.as_f64(), l_ec_l, l_ec_u, lambda);
    if !report.all_finite() {
        return Err(Error::Diverged {
            step,
            detail: serde_json::to_string(&report)?,
        });
    }

    // (5) student update, BN statistics from the supervised forward only
    state.optimizer.step(state.student.params_mut(), &grads)?;
    state.student.commit_batch_stats(&trace_sup);
    // (6) teacher update
    ema_update(&mut state.teacher, &state.student, cfg.alpha)?;
    state.step += 1;
    Ok((report, record))
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricRecord {
    Step(LossReport),
    Validation { step: u64, val_dice: f64 },
}

/// Datasets consumed by [`run_training`].
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub labeled: &'a Dataset,
    pub unlabeled: Option<&'a Dataset>,
    pub validation: Option<&'a Dataset>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
    /// Teacher weights with the best validation Dice (the final teacher
    /// when there is no validation set).
    pub best_teacher: ParamSet<T>,
    pub best_val_step: u64,
    pub best_val_dice: Option<f64>,
    pub metrics: Vec<MetricRecord>,
}

impl<T: Scalar> TrainOutcome<T> {
    /// The selected teacher as a network.
    pub fn selected_teacher(&self) -> Result<SegNetwork<T>> {
        let mut net = self.state.teacher.clone();
        net.set_params(self.best_teacher.clone())?;
        Ok(net)
    }
}

struct MetricsSink {
    out: Option<BufWriter<File>>,
    records: Vec<MetricRecord>,
}

impl MetricsSink {
    fn emit(&mut self, rec: MetricRecord, path: &Path) -> Result<()> {
        if let Some(out) = self.out.as_mut() {
            serde_json::to_writer(&mut *out, &rec)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        self.records.push(rec);
        Ok(())
    }
}

fn mean_dice<T: Scalar>(net: &SegNetwork<T>, ds: &Dataset) -> Result<f64> {
    let d = eval_dice(net, ds, 0.5)?;
    Ok(d.iter().sum::<f64>() / d.len().max(1) as f64)
}

/// Trains for `cfg.total_steps` steps. With `out_dir`, writes
/// `metrics.jsonl`, `checkpoint_best.bin` whenever validation improves,
/// periodic `checkpoint_last.bin`, and a final `checkpoint_last.bin`.
pub fn run_training<T: Scalar>(
    net: &NetworkConfig,
    cfg: &TrainConfig,
    data: TrainData<'_>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    let state = init_train::<T>(net, cfg)?;
    resume_training(state, cfg, data, out_dir)
}

/// [`run_training`] from an existing state, up to `cfg.total_steps`.
pub fn resume_training<T: Scalar>(
    mut state: TrainState<T>,
    cfg: &TrainConfig,
    data: TrainData<'_>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if !data.labeled.is_fully_labeled() || data.labeled.is_empty() {
        return Err(Error::Data("the labeled set must be nonempty and fully labeled".into()));
    }
    if let Some(v) = data.validation {
        if !v.is_fully_labeled() {
            return Err(Error::Data("the validation set must be fully labeled".into()));
        }
    }
    let unlabeled = if cfg.uses_unlabeled() {
        match data.unlabeled {
            Some(u) if !u.is_empty() => Some(u),
            _ => return Err(Error::Data("this configuration needs a nonempty unlabeled set".into())),
        }
    } else {
        None
    };

    let metrics_path = out_dir.map(|d| d.join("metrics.jsonl")).unwrap_or_default();
    let mut sink = MetricsSink {
        out: match out_dir {
            Some(_) => Some(BufWriter::new(File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?)),
            None => None,
        },
        records: Vec::new(),
    };

    let mut lab_sampler = InfiniteSampler::new(data.labeled.len(), cfg.batch_labeled, stream(cfg.seed, Stream::LabeledOrder))?;
    let mut unl_sampler = match unlabeled {
        Some(u) => Some(InfiniteSampler::new(u.len(), cfg.batch_unlabeled, stream(cfg.seed, Stream::UnlabeledOrder))?),
        None => None,
    };
    // replay the samplers up to the resumed step
    for _ in 0..state.step {
        lab_sampler.next_batch();
        if let Some(s) = unl_sampler.as_mut() {
            s.next_batch();
        }
    }

    let mut best_teacher = state.teacher.params().clone();
    let mut best_val_step = state.step;
    let mut best_val_dice: Option<f64> = None;

    while state.step < cfg.total_steps {
        let li = lab_sampler.next_batch();
        let xl = data.labeled.image_batch::<T>(&li)?;
        let yl = data.labeled.mask_batch::<T>(&li)?;
        let xu = match (unlabeled, unl_sampler.as_mut()) {
            (Some(u), Some(s)) => Some(u.image_batch::<T>(&s.next_batch())?),
            _ => None,
        };
        let report = train_step(&mut state, (&xl, &yl), xu.as_ref(), cfg)?;
        sink.emit(MetricRecord::Step(report), &metrics_path)?;

        let done = state.step == cfg.total_steps;
        if let Some(v) = data.validation {
            if state.step % cfg.val_every == 0 || done {
                let val_dice = mean_dice(&state.teacher, v)?;
                sink.emit(
                    MetricRecord::Validation {
                        step: state.step,
                        val_dice,
                    },
                    &metrics_path,
                )?;
                if best_val_dice.is_none_or(|b| val_dice > b) {
                    best_val_dice = Some(val_dice);
                    best_val_step = state.step;
                    best_teacher = state.teacher.params().clone();
                    if let Some(dir) = out_dir {
                        save_checkpoint(&dir.join("checkpoint_best.bin"), &state.checkpoint())?;
                    }
                }
            }
        }
        if let Some(dir) = out_dir {
            if done || (cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0) {
                save_checkpoint(&dir.join("checkpoint_last.bin"), &state.checkpoint())?;
            }
        }
    }
    if data.validation.is_none() {
        best_teacher = state.teacher.params().clone();
        best_val_step = state.step;
    }
    if let Some(out) = sink.out.as_mut() {
        out.flush().map_err(|e| Error::io(&metrics_path, e))?;
    }
    Ok(TrainOutcome {
        state,
        best_teacher,
        best_val_step,
        best_val_dice,
        metrics: sink.records,
    })
}
