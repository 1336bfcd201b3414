//! The experiment configuration file, the flag overrides layered on top of
//! it, and the builders that turn the result into a data source and a
//! session schedule.
//!
//! Every command that runs the pipeline reads one JSON file with three
//! optional keys (missing keys take the defaults shown):
//!
//! ```json
//! {
//!   "run": { "master_seed": 7, "base_epochs": 10, "...": "see RunConfig" },
//!   "data": { "kind": "synthetic", "dataset_seed": 999,
//!             "n_points": 256, "noisy": false },
//!   "schedule": { "kind": "synthetic",
//!                 "classes": ["sphere", "cube", "...10 shape names"],
//!                 "base_classes": 4, "classes_per_session": 2,
//!                 "train_per_class": 6, "test_per_class": 3 }
//! }
//! ```
//!
//! `data.kind` may instead be `"files"` with a `root` directory and a list
//! of dataset `manifests`; `schedule.kind` may be `"shipped"` with a `name`
//! of `s2s` or `s2r`, or `"file"` with a `path` to a schedule JSON. Relative
//! paths resolve from the working directory. Command-line flags override
//! individual `run` keys, and the merged result is what a run snapshots.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use fscil_core::benchmark::{
    build_schedule, load_manifest, load_schedule, s2r_schedule, s2s_schedule, synthetic_manifest,
    AliasMap, SessionSchedule,
};
use fscil_core::geometry::{PointCloud, BASE_SHAPES};
use fscil_core::learner::{CloudSource, FileSource, RunConfig, SyntheticSource};
use fscil_core::Result;

use crate::Usage;

/// Everything a run needs: hyperparameters, where clouds come from, and how
/// classes are spread over sessions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub data: DataSpec,
    pub schedule: ScheduleSpec,
}

impl ExperimentConfig {
    /// Reads a config file, or starts from all defaults when no path is
    /// given, then applies the flag overrides.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<Self> {
        let mut cfg: Self = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Self::default(),
        };
        overrides.apply(&mut cfg.run);
        cfg.run.validate()?;
        Ok(cfg)
    }

    /// The snapshot text written into run directories: pretty JSON with a
    /// trailing newline, byte-stable for identical configs.
    pub fn to_pretty_json(&self) -> anyhow::Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }
}

/// Where point clouds come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    /// Procedural shapes materialized on demand; nothing touches disk.
    Synthetic {
        dataset_seed: u64,
        n_points: usize,
        #[serde(default)]
        noisy: bool,
    },
    /// Clouds on disk, located through dataset manifests under a root.
    Files {
        root: PathBuf,
        manifests: Vec<PathBuf>,
    },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Synthetic {
            dataset_seed: 999,
            n_points: 256,
            noisy: false,
        }
    }
}

/// How classes are spread over sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScheduleSpec {
    /// One of the schedules shipped with the library: `s2s` or `s2r`.
    Shipped { name: String },
    /// A schedule JSON written by `gen-benchmark`.
    File { path: PathBuf },
    /// Built from procedural classes: the first `base_classes` names form
    /// session 1, the rest arrive `classes_per_session` at a time.
    Synthetic {
        classes: Vec<String>,
        base_classes: usize,
        classes_per_session: usize,
        train_per_class: usize,
        test_per_class: usize,
    },
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::Synthetic {
            classes: BASE_SHAPES.iter().map(|s| s.to_string()).collect(),
            base_classes: 4,
            classes_per_session: 2,
            train_per_class: 6,
            test_per_class: 3,
        }
    }
}

/// `run`-key overrides exposed as flags on every pipeline command.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Master seed governing every random draw of the run.
    #[arg(long)]
    pub master_seed: Option<u64>,
    /// Score in the retained principal subspace (on) or by plain cosine (off).
    #[arg(long, value_enum)]
    pub rfe: Option<Toggle>,
    /// Fuse the point branch into the global feature (on) or skip it (off).
    #[arg(long, value_enum)]
    pub snc: Option<Toggle>,
    /// Add the contrastive term over augmented copies (on) or train on
    /// cross-entropy alone (off).
    #[arg(long, value_enum)]
    pub cl: Option<Toggle>,
    /// Training epochs of the base session.
    #[arg(long)]
    pub base_epochs: Option<usize>,
    /// Training epochs of each incremental session.
    #[arg(long)]
    pub inc_epochs: Option<usize>,
    /// Shots per new class in incremental sessions.
    #[arg(long)]
    pub shots: Option<usize>,
    /// Augmented copies per sample feeding the contrastive term.
    #[arg(long)]
    pub n_aug: Option<usize>,
    /// Fraction of spectral energy the principal basis retains.
    #[arg(long)]
    pub energy_fraction: Option<f64>,
    /// Count base-session classes in the novel-class average.
    #[arg(long, value_enum)]
    pub ncacc_include_base: Option<Toggle>,
}

impl Overrides {
    pub fn apply(&self, run: &mut RunConfig) {
        if let Some(seed) = self.master_seed {
            run.master_seed = seed;
        }
        if let Some(t) = self.rfe {
            run.rfe_enabled = t.into();
        }
        if let Some(t) = self.snc {
            run.snc_enabled = t.into();
        }
        if let Some(t) = self.cl {
            run.cl_enabled = t.into();
        }
        if let Some(n) = self.base_epochs {
            run.base_epochs = n;
        }
        if let Some(n) = self.inc_epochs {
            run.inc_epochs = n;
        }
        if let Some(n) = self.shots {
            run.shots = n;
        }
        if let Some(n) = self.n_aug {
            run.n_aug = n;
        }
        if let Some(f) = self.energy_fraction {
            run.energy_fraction = f;
        }
        if let Some(t) = self.ncacc_include_base {
            run.ncacc_include_base = t.into();
        }
    }
}

/// Two-state flag value, so `--rfe off` reads naturally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

impl From<Toggle> for bool {
    fn from(t: Toggle) -> bool {
        matches!(t, Toggle::On)
    }
}

/// A cloud source chosen at runtime, so one `Learner` type serves both data
/// kinds.
#[derive(Debug, Clone)]
pub enum AnySource {
    Synthetic(SyntheticSource),
    Files(FileSource),
}

impl CloudSource for AnySource {
    fn class_of(&self, sample_id: &str) -> Result<String> {
        match self {
            AnySource::Synthetic(s) => s.class_of(sample_id),
            AnySource::Files(s) => s.class_of(sample_id),
        }
    }

    fn load(&self, sample_id: &str) -> Result<PointCloud> {
        match self {
            AnySource::Synthetic(s) => s.load(sample_id),
            AnySource::Files(s) => s.load(sample_id),
        }
    }
}

/// Materializes the data half of a config.
pub fn build_source(data: &DataSpec) -> anyhow::Result<AnySource> {
    match data {
        DataSpec::Synthetic {
            dataset_seed,
            n_points,
            noisy,
        } => {
            let source = if *noisy {
                SyntheticSource::noisy(*dataset_seed, *n_points)
            } else {
                SyntheticSource::new(*dataset_seed, *n_points)
            };
            Ok(AnySource::Synthetic(source))
        }
        DataSpec::Files { root, manifests } => {
            if manifests.is_empty() {
                return Err(Usage("data.manifests must name at least one manifest".into()).into());
            }
            let loaded = manifests
                .iter()
                .map(|p| {
                    load_manifest(p)
                        .with_context(|| format!("loading manifest {}", p.display()))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let refs: Vec<&_> = loaded.iter().collect();
            Ok(AnySource::Files(FileSource::new(root, &refs)?))
        }
    }
}

/// Materializes the schedule half of a config.
pub fn resolve_schedule(schedule: &ScheduleSpec) -> anyhow::Result<SessionSchedule> {
    match schedule {
        ScheduleSpec::Shipped { name } => match name.as_str() {
            "s2s" => Ok(s2s_schedule()?),
            "s2r" => Ok(s2r_schedule()?),
            other => Err(Usage(format!(
                "unknown shipped schedule {other:?}; expected \"s2s\" or \"s2r\""
            ))
            .into()),
        },
        ScheduleSpec::File { path } => Ok(load_schedule(path)
            .with_context(|| format!("loading schedule {}", path.display()))?),
        ScheduleSpec::Synthetic {
            classes,
            base_classes,
            classes_per_session,
            train_per_class,
            test_per_class,
        } => {
            if *base_classes == 0 || *base_classes >= classes.len() {
                return Err(Usage(format!(
                    "schedule.base_classes must be between 1 and {} (classes listed minus one)",
                    classes.len().saturating_sub(1)
                ))
                .into());
            }
            let names: Vec<&str> = classes.iter().map(|s| s.as_str()).collect();
            let base =
                synthetic_manifest("synthetic-base", &names[..*base_classes], *train_per_class, *test_per_class)?;
            let inc = synthetic_manifest(
                "synthetic-incremental",
                &names[*base_classes..],
                *train_per_class,
                *test_per_class,
            )?;
            Ok(build_schedule(&base, &inc, *classes_per_session, &AliasMap::default())?)
        }
    }
}
