//! Command implementations behind the `exconsist` binary.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use exconsist::data::{load_dataset, save_dataset, shift_domain, synth_generate, SynthParams};
use exconsist::experiments::{
    eval_dice, reports_to_csv, run_ablation_grid, run_study, trial_seeds, StudyReport, StudySplits,
};
use exconsist::segnet::load_checkpoint;
use exconsist::trainer::{run_training, Method, TrainData};

pub use config::{ResolvedData, RunConfig, StudyKind};

/// File names inside a run directory.
pub const FROZEN_CONFIG: &str = "config.toml";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration.
    Config(String),
    /// Failure while running, including divergence.
    Runtime(exconsist::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<exconsist::Error> for CliError {
    fn from(e: exconsist::Error) -> Self {
        match e {
            exconsist::Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(exconsist::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn to_json(v: &impl Serialize) -> Result<String, CliError> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::Runtime(e.into()))
}

/// Worker threads for studies, from `EXCONSIST_THREADS` (default 1).
pub fn thread_budget() -> Result<usize, CliError> {
    match std::env::var("EXCONSIST_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!("EXCONSIST_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

/// Writes the resolved configuration and split manifest into `out`.
fn freeze(cfg: &RunConfig, data: &ResolvedData, out: &Path) -> Result<(), CliError> {
    create_dir(out)?;
    write_file(&out.join(FROZEN_CONFIG), cfg.to_toml()?)?;
    write_file(&out.join(MANIFEST), to_json(&data.manifest)?)
}

/// Trains one model. Writes the frozen configuration, the split manifest,
/// `metrics.jsonl` and the checkpoints into `out`.
pub fn cmd_train(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.validate()?;
    }
    let data = cfg.resolve_data()?;
    freeze(&cfg, &data, out)?;
    let s = &data.splits;
    let train = cfg.train_config();
    let outcome = run_training::<f32>(
        &cfg.network,
        &train,
        TrainData {
            labeled: &s.labeled,
            unlabeled: s.unlabeled.as_ref(),
            validation: Some(&s.validation),
        },
        Some(out),
    )?;
    log::info!(
        "done: best validation Dice {:.4} at step {}",
        outcome.best_val_dice.unwrap_or(f64::NAN),
        outcome.best_val_step
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    Teacher,
    Student,
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub network: Which,
    pub step: u64,
    pub mean_dice: f64,
    pub per_image: Vec<(String, f64)>,
}

/// Hard Dice of a checkpointed network on a labeled directory. The input
/// resolution is `resolution`, else that of the frozen configuration next to
/// the checkpoint.
pub fn cmd_eval(
    checkpoint: &Path,
    data_dir: &Path,
    out: &Path,
    which: Which,
    resolution: Option<(usize, usize)>,
) -> Result<EvalReport, CliError> {
    let (h, w) = match resolution {
        Some(r) => r,
        None => {
            let frozen = checkpoint.parent().unwrap_or(Path::new(".")).join(FROZEN_CONFIG);
            if !frozen.exists() {
                return Err(CliError::Config(format!(
                    "no --resolution given and no {FROZEN_CONFIG} beside the checkpoint"
                )));
            }
            let cfg = RunConfig::load(&frozen)?;
            (cfg.data.height, cfg.data.width)
        }
    };
    let ck = load_checkpoint::<f32>(checkpoint)?;
    let ds = load_dataset(data_dir, h, w)?;
    if !ds.is_fully_labeled() {
        return Err(CliError::Config(format!("{} has no masks to evaluate against", data_dir.display())));
    }
    let net = match which {
        Which::Teacher => ck.teacher_network()?,
        Which::Student => ck.student_network()?,
    };
    let dice = eval_dice(&net, &ds, 0.5)?;
    let report = EvalReport {
        checkpoint: checkpoint.to_path_buf(),
        network: which,
        step: ck.step,
        mean_dice: dice.iter().sum::<f64>() / dice.len().max(1) as f64,
        per_image: ds.ids().into_iter().zip(dice).collect(),
    };
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_file(out, to_json(&report)?)?;
    Ok(report)
}

/// Runs the study described by the configuration and writes `study.csv`
/// and `study.json` beside the frozen configuration and manifest.
pub fn cmd_study(config: &Path, out: &Path, trials: Option<usize>, seed: Option<u64>) -> Result<Vec<StudyReport>, CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(n) = trials {
        cfg.study.n_trials = n;
    }
    if let Some(s) = seed {
        cfg.study.seed = s;
    }
    cfg.validate()?;
    let threads = thread_budget()?;
    let data = cfg.resolve_data()?;
    freeze(&cfg, &data, out)?;
    let reports = run_configured_study(&cfg, &data, threads)?;
    write_file(&out.join("study.csv"), reports_to_csv(&reports))?;
    write_file(&out.join("study.json"), to_json(&reports)?)?;
    Ok(reports)
}

/// The study of `cfg` on already resolved data.
pub fn run_configured_study(cfg: &RunConfig, data: &ResolvedData, threads: usize) -> Result<Vec<StudyReport>, CliError> {
    let seeds = trial_seeds(cfg.study.seed, cfg.study.n_trials);
    let train = cfg.train_config();
    let net = &cfg.network;
    let s = &data.splits;
    let method_id = match train.method {
        Method::ExtremeConsistency if train.ablation == Default::default() => "full",
        Method::ExtremeConsistency => "ablated",
        Method::ExtremeAugmented => "supervised_extreme_aug",
        Method::Supervised => "supervised",
    };
    let reports = match cfg.study.kind {
        StudyKind::Single => vec![run_study::<f32>(method_id, net, &train, s, &seeds, threads)?],
        StudyKind::Ablation => run_ablation_grid::<f32>(net, &train, s, &seeds, threads)?,
        StudyKind::Bounds => {
            let mut main = run_study::<f32>(method_id, net, &train, s, &seeds, threads)?;
            let sup = exconsist::trainer::TrainConfig {
                method: Method::Supervised,
                ..train.clone()
            };
            let lower = run_study::<f32>("lower_bound", net, &sup, s, &seeds, threads)?;
            if seeds.len() >= 2 && main.n_trials >= 2 && lower.n_trials >= 2 {
                main.compare_with(&lower)?;
            }
            let mut out = vec![main, lower];
            if let Some(full) = &data.full_train {
                let all = StudySplits {
                    labeled: full.clone(),
                    unlabeled: None,
                    ..s.clone()
                };
                out.push(run_study::<f32>("upper_bound", net, &sup, &all, &seeds, threads)?);
            }
            out
        }
    };
    Ok(reports)
}

/// Writes `n` synthetic image/mask pairs, colour-shifted with `shifted`.
pub fn cmd_make_synth(n: usize, resolution: (usize, usize), out: &Path, seed: u64, shifted: bool) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Config("--n must be positive".into()));
    }
    let ds = synth_generate(n, resolution.0, resolution.1, &SynthParams::default(), seed)?;
    let ds = if shifted { shift_domain(&ds) } else { ds };
    save_dataset(&ds, out)?;
    Ok(())
}

/// Parses `64` or `64x96` (height x width).
pub fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad resolution `{s}`"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => parse(s).map(|v| (v, v)),
    }
}
