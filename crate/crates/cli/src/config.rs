//! Run configuration files (TOML) and the datasets they describe.
//!
//! Every key has a default except `data.protocol` plus one data source.
//! Relative directories are resolved against the file's own directory, so a
//! frozen copy written elsewhere still points at the same data.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use exconsist::data::{
    load_dataset, shift_domain, split_limited, synth_generate, Dataset, Protocol, SplitManifest, SynthParams,
};
use exconsist::experiments::StudySplits;
use exconsist::losses::{RampSchedule, DEFAULT_SMOOTH};
use exconsist::rng::derive_seed;
use exconsist::trainer::{AblationFlags, Method, TrainConfig};
use exconsist::NetworkConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub ramp: RampSchedule,
    pub data: DataSection,
    #[serde(default)]
    pub ablation: AblationFlags,
    #[serde(default)]
    pub study: StudySection,
}

/// The scalar training settings; the ramp and ablation switches have their
/// own sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub method: Method,
    pub alpha: f64,
    pub learning_rate: f64,
    pub total_steps: u64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub seed: u64,
    pub smooth: f64,
    pub val_every: u64,
    pub checkpoint_every: u64,
    pub skip_idle_consistency: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            method: t.method,
            alpha: t.alpha,
            learning_rate: t.learning_rate,
            total_steps: t.total_steps,
            batch_labeled: t.batch_labeled,
            batch_unlabeled: t.batch_unlabeled,
            seed: t.seed,
            smooth: DEFAULT_SMOOTH,
            val_every: t.val_every,
            checkpoint_every: t.checkpoint_every,
            skip_idle_consistency: t.skip_idle_consistency,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub protocol: Protocol,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    /// Labeled training items; absent keeps every label (the upper bound
    /// under limited annotation, the whole source set under domain shift).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_labeled: Option<usize>,
    #[serde(default)]
    pub split_seed: u64,
    /// Training set; the source training set under domain shift.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_dir: Option<PathBuf>,
    /// Validation set used for model selection (source domain).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_dir: Option<PathBuf>,
    /// Test set; the target test set under domain shift.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_dir: Option<PathBuf>,
    /// Domain shift only: target training images, used without labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_dir: Option<PathBuf>,
    /// Generated data instead of directories.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSection>,
}

fn default_side() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Domain shift only: colour-shifted unlabeled target images.
    pub n_target: usize,
    pub seed: u64,
    pub params: SynthParams,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_val: 16,
            n_test: 48,
            n_target: 192,
            seed: 0,
            params: SynthParams::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    /// The configured method alone.
    Single,
    /// The configured method, the supervised lower bound on the labeled
    /// subset and, under limited annotation, the fully supervised upper bound.
    #[default]
    Bounds,
    /// The ablation grid around the full method.
    Ablation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySection {
    pub kind: StudyKind,
    pub n_trials: usize,
    pub seed: u64,
}

impl Default for StudySection {
    fn default() -> Self {
        Self {
            kind: StudyKind::Bounds,
            n_trials: 10,
            seed: 0,
        }
    }
}

/// Data of a run, resolved from its configuration.
#[derive(Clone, Debug)]
pub struct ResolvedData {
    pub splits: StudySplits,
    /// Every training item with its label, for the upper bound.
    pub full_train: Option<Dataset>,
    pub manifest: SplitManifest,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates `path`, anchoring relative data directories at
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = std::fs::canonicalize(base).unwrap_or_else(|_| base.to_path_buf());
        let d = &mut cfg.data;
        for dir in [&mut d.train_dir, &mut d.val_dir, &mut d.test_dir, &mut d.target_dir].into_iter().flatten() {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(format!("cannot serialize configuration: {e}")))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            method: t.method,
            alpha: t.alpha,
            learning_rate: t.learning_rate,
            total_steps: t.total_steps,
            batch_labeled: t.batch_labeled,
            batch_unlabeled: t.batch_unlabeled,
            seed: t.seed,
            smooth: t.smooth,
            val_every: t.val_every,
            checkpoint_every: t.checkpoint_every,
            skip_idle_consistency: t.skip_idle_consistency,
            ramp: self.ramp,
            ablation: self.ablation,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.network.validate()?;
        self.train_config().validate()?;
        // TOML integers are signed 64-bit
        for (key, v) in [
            ("train.seed", self.train.seed),
            ("data.split_seed", self.data.split_seed),
            ("study.seed", self.study.seed),
        ] {
            if v > i64::MAX as u64 {
                return Err(CliError::Config(format!("{key} must fit in a signed 64-bit integer")));
            }
        }
        if self.study.n_trials == 0 {
            return Err(CliError::Config("study.n_trials must be positive".into()));
        }
        let d = &self.data;
        if d.height == 0 || d.height % 16 != 0 || d.width == 0 || d.width % 16 != 0 {
            return Err(CliError::Config(format!(
                "data.height and data.width must be positive multiples of 16, got {}x{}",
                d.height, d.width
            )));
        }
        if d.n_labeled == Some(0) {
            return Err(CliError::Config("data.n_labeled must be positive".into()));
        }
        match &d.synthetic {
            Some(s) => {
                if d.train_dir.is_some() || d.val_dir.is_some() || d.test_dir.is_some() || d.target_dir.is_some() {
                    return Err(CliError::Config("data.synthetic excludes the data.*_dir keys".into()));
                }
                s.params.validate()?;
                if s.n_train == 0 || s.n_val == 0 || s.n_test == 0 {
                    return Err(CliError::Config("data.synthetic needs nonzero n_train, n_val and n_test".into()));
                }
                if d.protocol == Protocol::DomainShift && s.n_target == 0 {
                    return Err(CliError::Config("data.synthetic.n_target must be positive under domain shift".into()));
                }
            }
            None => {
                for (key, dir) in [("data.train_dir", &d.train_dir), ("data.val_dir", &d.val_dir), ("data.test_dir", &d.test_dir)] {
                    if dir.is_none() {
                        return Err(CliError::Config(format!("{key} is required without data.synthetic")));
                    }
                }
                if d.protocol == Protocol::DomainShift && d.target_dir.is_none() {
                    return Err(CliError::Config("data.target_dir is required under domain shift".into()));
                }
            }
        }
        Ok(())
    }

    /// Loads or generates the datasets and applies the split.
    pub fn resolve_data(&self) -> Result<ResolvedData, CliError> {
        let d = &self.data;
        let (h, w) = (d.height, d.width);
        let (train, val, test, target) = match &d.synthetic {
            Some(s) => {
                let gen = |n, k| synth_generate(n, h, w, &s.params, derive_seed(s.seed, k));
                let target = match d.protocol {
                    Protocol::DomainShift => Some(shift_domain(&gen(s.n_target, 4)?)),
                    Protocol::LimitedAnnotation => None,
                };
                let test = gen(s.n_test, 3)?;
                let test = match d.protocol {
                    Protocol::DomainShift => shift_domain(&test),
                    Protocol::LimitedAnnotation => test,
                };
                (gen(s.n_train, 1)?, gen(s.n_val, 2)?, test, target)
            }
            None => {
                let load = |p: &Option<PathBuf>| load_dataset(p.as_ref().expect("validated"), h, w);
                let target = match d.protocol {
                    Protocol::DomainShift => Some(load(&d.target_dir)?),
                    Protocol::LimitedAnnotation => None,
                };
                (load(&d.train_dir)?, load(&d.val_dir)?, load(&d.test_dir)?, target)
            }
        };
        if !train.is_fully_labeled() {
            return Err(CliError::Config(format!("training set `{}` must be fully labeled", train.name)));
        }
        let (labeled, rest) = match d.n_labeled {
            Some(n) if n < train.len() => {
                let (l, u) = split_limited(&train, n, d.split_seed)?;
                (l, Some(u))
            }
            Some(n) if n > train.len() => {
                return Err(CliError::Config(format!(
                    "data.n_labeled = {n} exceeds the {} training items",
                    train.len()
                )))
            }
            _ => (train.clone(), None),
        };
        let unlabeled = match d.protocol {
            Protocol::LimitedAnnotation => rest,
            Protocol::DomainShift => target.map(|t| t.without_masks()),
        };
        let manifest = SplitManifest {
            protocol: d.protocol,
            seed: d.split_seed,
            labeled: labeled.ids(),
            unlabeled: unlabeled.as_ref().map(|u| u.ids()).unwrap_or_default(),
            validation: val.ids(),
            test: test.ids(),
        };
        let full_train = (d.protocol == Protocol::LimitedAnnotation).then_some(train);
        Ok(ResolvedData {
            splits: StudySplits {
                protocol: d.protocol,
                labeled,
                unlabeled,
                validation: val,
                test,
            },
            full_train,
            manifest,
        })
    }
}
