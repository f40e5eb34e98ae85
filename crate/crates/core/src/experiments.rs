//! Evaluation, multi-trial studies, the ablation grid and significance tests.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{Dataset, Protocol};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::segnet::{NetworkConfig, SegNetwork};
use crate::trainer::{run_training, Method, TrainConfig, TrainData};

const EVAL_CHUNK: usize = 8;

/// `2|P ∩ G| / (|P| + |G|)`, with two empty sets scoring 1.
pub fn hard_dice(pred: &[bool], truth: &[bool]) -> f64 {
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

/// Per-image hard Dice of the eval-mode network, foreground probability
/// thresholded at `threshold`.
pub fn eval_dice<T: Scalar>(net: &SegNetwork<T>, ds: &Dataset, threshold: f64) -> Result<Vec<f64>> {
    if !ds.is_fully_labeled() {
        return Err(Error::Data(format!("`{}` has unlabeled items; Dice needs masks", ds.name)));
    }
    let t = T::lit(threshold);
    let mut out = Vec::with_capacity(ds.len());
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let probs = net.predict(&ds.image_batch::<T>(chunk)?)?;
        for (k, &i) in chunk.iter().enumerate() {
            let pred: Vec<bool> = probs.plane(k, 1).iter().map(|&v| v > t).collect();
            out.push(hard_dice(&pred, ds.items[i].mask.as_ref().expect("checked labeled")));
        }
    }
    Ok(out)
}

/// Two-sided Welch's t-test. When both samples have zero variance the
/// p-value is 1 for equal means and 0 otherwise.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Range("Welch's t-test needs at least two values per sample".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Ok(if ma == mb { 1.0 } else { 0.0 });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() - 1) as f64 + sb * sb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Range(format!("t distribution: {e}")))?;
    Ok((2.0 * dist.sf(t.abs())).min(1.0))
}

/// Mean and unbiased variance.
fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = if x.len() > 1 {
        x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v)
}

/// Data of one study. Training sees `labeled`, `unlabeled` and
/// `validation`; `test` is read only after model selection.
#[derive(Clone, Debug)]
pub struct StudySplits {
    pub protocol: Protocol,
    pub labeled: Dataset,
    pub unlabeled: Option<Dataset>,
    /// Selection split: the source validation set under domain shift.
    pub validation: Dataset,
    /// Reporting split: the target test set under domain shift.
    pub test: Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial_seed: u64,
    pub test_dice_mean: f64,
    pub per_image_dice: Vec<f64>,
    pub best_val_step: u64,
    pub best_val_dice: Option<f64>,
    /// Set when training aborted; the trial is excluded from the statistics.
    pub diverged: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config_id: String,
    pub dice_mean: f64,
    /// Sample standard deviation of the trial means (0 for one trial).
    pub dice_std: f64,
    pub n_trials: usize,
    pub n_diverged: usize,
    pub baseline: Option<String>,
    pub p_value: Option<f64>,
    pub trials: Vec<TrialReport>,
}

impl StudyReport {
    fn from_trials(config_id: String, trials: Vec<TrialReport>) -> Self {
        let means: Vec<f64> = trials.iter().filter(|t| t.diverged.is_none()).map(|t| t.test_dice_mean).collect();
        let (dice_mean, dice_var) = if means.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            mean_var(&means)
        };
        Self {
            config_id,
            dice_mean,
            dice_std: dice_var.sqrt(),
            n_trials: means.len(),
            n_diverged: trials.len() - means.len(),
            baseline: None,
            p_value: None,
            trials,
        }
    }

    pub fn trial_means(&self) -> Vec<f64> {
        self.trials
            .iter()
            .filter(|t| t.diverged.is_none())
            .map(|t| t.test_dice_mean)
            .collect()
    }

    /// Attaches the Welch p-value of this study against `baseline`.
    pub fn compare_with(&mut self, baseline: &StudyReport) -> Result<()> {
        self.p_value = Some(welch_t_test(&self.trial_means(), &baseline.trial_means())?);
        self.baseline = Some(baseline.config_id.clone());
        Ok(())
    }
}

/// Table of reports: one row per study.
pub fn reports_to_csv(reports: &[StudyReport]) -> String {
    let mut out = String::from("config_id,dice_mean,dice_std,n_trials,n_diverged,baseline,p_value\n");
    for r in reports {
        out.push_str(&format!(
            "{},{:.6},{:.6},{},{},{},{}\n",
            r.config_id,
            r.dice_mean,
            r.dice_std,
            r.n_trials,
            r.n_diverged,
            r.baseline.as_deref().unwrap_or(""),
            r.p_value.map(|p| format!("{p:.6e}")).unwrap_or_default()
        ));
    }
    out
}

/// `n` trial seeds derived from one study seed.
pub fn trial_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| derive_seed(seed, 0x7124_0000 + i)).collect()
}

fn run_trial<T: Scalar>(net: &NetworkConfig, train: &TrainConfig, splits: &StudySplits, seed: u64) -> Result<TrialReport> {
    let cfg = TrainConfig {
        seed,
        ..train.clone()
    };
    let data = TrainData {
        labeled: &splits.labeled,
        unlabeled: if cfg.uses_unlabeled() { splits.unlabeled.as_ref() } else { None },
        validation: Some(&splits.validation),
    };
    match run_training::<T>(net, &cfg, data, None) {
        Ok(outcome) => {
            let teacher = outcome.selected_teacher()?;
            let per_image_dice = eval_dice(&teacher, &splits.test, 0.5)?;
            Ok(TrialReport {
                trial_seed: seed,
                test_dice_mean: per_image_dice.iter().sum::<f64>() / per_image_dice.len().max(1) as f64,
                per_image_dice,
                best_val_step: outcome.best_val_step,
                best_val_dice: outcome.best_val_dice,
                diverged: None,
            })
        }
        Err(Error::Diverged { step, detail }) => {
            log::warn!("trial {seed} diverged at step {step}: {detail}");
            Ok(TrialReport {
                trial_seed: seed,
                test_dice_mean: f64::NAN,
                per_image_dice: Vec::new(),
                best_val_step: step,
                best_val_dice: None,
                diverged: Some(format!("step {step}: {detail}")),
            })
        }
        Err(e) => Err(e),
    }
}

/// Trains and evaluates one configuration once per seed. Trials run on up
/// to `threads` worker threads; results are ordered by position in `seeds`.
pub fn run_study<T: Scalar>(
    config_id: &str,
    net: &NetworkConfig,
    train: &TrainConfig,
    splits: &StudySplits,
    seeds: &[u64],
    threads: usize,
) -> Result<StudyReport> {
    if !splits.test.is_fully_labeled() || !splits.validation.is_fully_labeled() {
        return Err(Error::Data("validation and test splits must be labeled".into()));
    }
    let threads = threads.clamp(1, seeds.len().max(1));
    let results: Vec<Mutex<Option<Result<TrialReport>>>> = seeds.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= seeds.len() {
            break;
        }
        log::info!("{config_id}: trial {}/{} (seed {})", i + 1, seeds.len(), seeds[i]);
        let r = run_trial::<T>(net, train, splits, seeds[i]);
        *results[i].lock().expect("no poisoned trial slot") = Some(r);
    };
    if threads == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(work);
            }
        });
    }
    let trials = results
        .into_iter()
        .map(|m| m.into_inner().expect("no poisoned trial slot").expect("every trial ran"))
        .collect::<Result<Vec<_>>>()?;
    Ok(StudyReport::from_trials(config_id.to_string(), trials))
}

/// One row of the ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub id: String,
    pub train: TrainConfig,
    /// The full method, against which the others are compared.
    pub reference: bool,
}

/// The full method, its single-family and two-family pools, the switches
/// for exclusivity, unlabeled data and teacher, and the two supervised
/// baselines (basic augmentation only, basic plus extreme augmentation).
pub fn ablation_variants(base: &TrainConfig) -> Vec<Variant> {
    let full = TrainConfig {
        method: Method::ExtremeConsistency,
        ablation: Default::default(),
        ..base.clone()
    };
    let with = |id: &str, f: &dyn Fn(&mut TrainConfig)| {
        let mut t = full.clone();
        f(&mut t);
        Variant {
            id: id.to_string(),
            train: t,
            reference: false,
        }
    };
    let pool = |i: bool, g: bool, m: bool| {
        move |t: &mut TrainConfig| {
            t.ablation.diverse_intensity = i;
            t.ablation.diverse_geometric = g;
            t.ablation.diverse_mixing = m;
        }
    };
    let mut out = vec![
        with("intensity_only", &pool(true, false, false)),
        with("geometric_only", &pool(false, true, false)),
        with("mixing_only", &pool(false, false, true)),
        with("intensity_geometric", &pool(true, true, false)),
        with("no_exclusive", &|t| t.ablation.exclusive = false),
        with("no_unlabeled", &|t| t.ablation.use_unlabeled = false),
        with("no_teacher", &|t| t.ablation.use_teacher = false),
        with("supervised", &|t| t.method = Method::Supervised),
        with("supervised_extreme_aug", &|t| t.method = Method::ExtremeAugmented),
    ];
    out.push(Variant {
        id: "full".into(),
        train: full,
        reference: true,
    });
    out
}

/// Runs every variant of [`ablation_variants`] and attaches p-values
/// against the full method.
pub fn run_ablation_grid<T: Scalar>(
    net: &NetworkConfig,
    base: &TrainConfig,
    splits: &StudySplits,
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<StudyReport>> {
    let variants = ablation_variants(base);
    let mut reports = variants
        .iter()
        .map(|v| run_study::<T>(&v.id, net, &v.train, splits, seeds, threads))
        .collect::<Result<Vec<_>>>()?;
    let reference = variants.iter().position(|v| v.reference).expect("grid has a reference");
    let full = reports[reference].clone();
    if seeds.len() >= 2 {
        for (r, v) in reports.iter_mut().zip(&variants) {
            if !v.reference && r.n_trials >= 2 && full.n_trials >= 2 {
                r.compare_with(&full)?;
            }
        }
    }
    Ok(reports)
}
