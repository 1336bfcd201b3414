//! The eight subcommands: benchmark and data generation, embedding and
//! basis precomputation, and the train / eval / report / ablate loop.
//!
//! Every command is deterministic: identical inputs (files, flags, seeds)
//! produce byte-identical outputs, so reruns are cheap to verify with a
//! plain file comparison.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use ndarray::Array2;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fscil_core::benchmark::{
    build_schedule, load_aliases, load_manifest, s2r_schedule, s2s_schedule, save_manifest,
    save_schedule, AliasMap, ClassEntry, DatasetManifest, SampleRef, Split,
    SHIPPED_CLASSES_PER_SESSION,
};
use fscil_core::encoders::{encode_text_toy, load_embeddings, save_embeddings, EmbeddingMatrix};
use fscil_core::geometry::{save_cloud, BASE_SHAPES};
use fscil_core::learner::{load_checkpoint, CloudSource, Learner, SyntheticSource};
use fscil_core::metrics::{
    compile_report, render_table, report_to_json, session_accuracy, MetricsReport, PredictionLog,
    ReportOptions,
};
use fscil_core::rfe::{fit_basis, read_pcv1, write_pcv1, PrincipalBasis};
use fscil_core::Error;

use crate::config::{resolve_schedule, build_source, ExperimentConfig, Overrides};
use crate::Usage;

/// Applies `FSCIL_FORGE_THREADS` before any worker pool spins up; unset
/// means one worker per machine core.
pub fn init_threads() -> std::result::Result<(), String> {
    let value = match std::env::var("FSCIL_FORGE_THREADS") {
        Ok(v) => v,
        Err(std::env::VarError::NotPresent) => return Ok(()),
        Err(e) => return Err(format!("FSCIL_FORGE_THREADS: {e}")),
    };
    let workers: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("FSCIL_FORGE_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| format!("thread pool: {e}"))
}

// ----- shared plumbing -----

/// What a finished run directory contains, written as `run.json`. All paths
/// are relative to the directory, so it relocates as a unit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentRun {
    /// Hash of the config and schedule snapshots; identical inputs collide
    /// on purpose.
    pub run_id: String,
    /// The exact merged configuration the run used.
    pub config: ExperimentConfig,
    pub schedule: String,
    pub basis: Option<String>,
    pub checkpoints: Vec<String>,
    pub log: String,
    pub outcomes: String,
    /// Conventional target of the `report` command.
    pub report: String,
}

/// Per-session training summary, written as `outcomes.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session: usize,
    pub train_accuracy: f64,
    /// Micro accuracy over the test union of sessions 1..=b.
    pub eval_accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

fn run_id(config_json: &str, schedule_json: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(config_json.as_bytes());
    hasher.update(schedule_json.as_bytes());
    hasher
        .finalize()
        .iter()
        .take(6)
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn checkpoint_name(session: usize) -> String {
    format!("session-{session:02}.ckpt")
}

fn write_pretty_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Depth view rows of the listed samples, stacked in order with
/// `"{id}#view{v}"` keys — the exact matrix the base-session basis fit sees.
fn stacked_depth_rows<S: CloudSource>(
    learner: &Learner<S>,
    ids: &[String],
) -> anyhow::Result<EmbeddingMatrix> {
    let mut rows = Array2::zeros((0, learner.config().feature_dim));
    let mut keys = Vec::new();
    for id in ids {
        let (f2d, _) = learner.encode_sample(id)?;
        for (v, row) in f2d.rows.outer_iter().enumerate() {
            rows.push_row(row)
                .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
            keys.push(format!("{id}#view{v}"));
        }
    }
    Ok(EmbeddingMatrix::new(rows, keys)?)
}

// ----- gen-benchmark -----

#[derive(Args, Debug)]
pub struct GenBenchmarkArgs {
    /// Shipped benchmark to emit: `s2s` or `s2r`.
    #[arg(long, conflicts_with_all = ["base", "increment"])]
    pub task: Option<String>,
    /// Base dataset manifest filling session 1.
    #[arg(long, requires = "increment")]
    pub base: Option<PathBuf>,
    /// Incremental dataset manifest feeding sessions 2 and later.
    #[arg(long, requires = "base")]
    pub increment: Option<PathBuf>,
    /// Classes per incremental session.
    #[arg(long, default_value_t = SHIPPED_CLASSES_PER_SESSION)]
    pub per_session: usize,
    /// Alias map JSON for cross-dataset class-overlap removal.
    #[arg(long)]
    pub aliases: Option<PathBuf>,
    /// Output schedule path.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_gen_benchmark(args: &GenBenchmarkArgs) -> anyhow::Result<()> {
    let schedule = match (&args.task, &args.base, &args.increment) {
        (Some(task), None, None) => match task.as_str() {
            "s2s" => s2s_schedule()?,
            "s2r" => s2r_schedule()?,
            other => {
                return Err(
                    Usage(format!("unknown task {other:?}; expected \"s2s\" or \"s2r\"")).into(),
                )
            }
        },
        (None, Some(base), Some(increment)) => {
            let base = load_manifest(base)
                .with_context(|| format!("loading manifest {}", base.display()))?;
            let increment = load_manifest(increment)
                .with_context(|| format!("loading manifest {}", increment.display()))?;
            let aliases = match &args.aliases {
                Some(p) => load_aliases(p)
                    .with_context(|| format!("loading aliases {}", p.display()))?,
                None => AliasMap::default(),
            };
            build_schedule(&base, &increment, args.per_session, &aliases)?
        }
        _ => {
            return Err(Usage(
                "pass either --task s2s|s2r or both --base and --increment".to_string(),
            )
            .into())
        }
    };

    let sizes: Vec<String> = schedule
        .sessions
        .iter()
        .map(|p| p.classes.len().to_string())
        .collect();
    println!("{} sessions: {}", schedule.n_sessions(), sizes.join(","));
    save_schedule(&schedule, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

// ----- gen-synthetic-data -----

#[derive(Args, Debug)]
pub struct GenSyntheticDataArgs {
    /// Shape classes to materialize (comma-separated).
    #[arg(long, value_delimiter = ',', default_values_t = BASE_SHAPES.map(String::from))]
    pub classes: Vec<String>,
    #[arg(long, default_value_t = 6)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 3)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 256)]
    pub n_points: usize,
    /// Seed of the per-sample generator streams.
    #[arg(long, default_value_t = 999)]
    pub dataset_seed: u64,
    /// Heavier jitter plus uniform outliers, imitating real scans.
    #[arg(long)]
    pub noisy: bool,
    /// Dataset name recorded in the manifest.
    #[arg(long, default_value = "synthetic")]
    pub name: String,
    /// Output directory for `manifest.json` and the cloud files.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_gen_synthetic_data(args: &GenSyntheticDataArgs) -> anyhow::Result<()> {
    let source = if args.noisy {
        SyntheticSource::noisy(args.dataset_seed, args.n_points)
    } else {
        SyntheticSource::new(args.dataset_seed, args.n_points)
    };

    let mut entries = Vec::new();
    let mut written = 0usize;
    for class in &args.classes {
        let mut samples = Vec::new();
        for (split, word, count) in [
            (Split::Train, "train", args.train_per_class),
            (Split::Test, "test", args.test_per_class),
        ] {
            for i in 0..count {
                let sample_id = format!("{class}/{word}/{i:03}");
                let relative = format!("clouds/{class}/{word}-{i:03}.pcb1");
                let cloud = source.load(&sample_id)?;
                let path = args.out.join(&relative);
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent)
                        .with_context(|| format!("creating {}", parent.display()))?;
                }
                save_cloud(&cloud, &path)?;
                samples.push(SampleRef {
                    sample_id,
                    split,
                    path: relative,
                });
                written += 1;
            }
        }
        entries.push(ClassEntry {
            class_name: class.clone(),
            samples,
        });
    }

    let manifest = DatasetManifest::new(&args.name, entries)?;
    save_manifest(&manifest, &args.out.join("manifest.json"))?;
    println!(
        "wrote {written} clouds across {} classes -> {}",
        args.classes.len(),
        args.out.display()
    );
    Ok(())
}

// ----- embed -----

#[derive(Args, Debug)]
pub struct EmbedArgs {
    /// JSON config file; omitted means defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Output directory for the embedding file trios.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_embed(args: &EmbedArgs) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(args.config.as_deref(), &args.overrides)?;
    let schedule = resolve_schedule(&cfg.schedule)?;
    let source = build_source(&cfg.data)?;
    let learner = Learner::new(cfg.run.clone(), schedule, source)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let mut depth_rows = Array2::zeros((0, cfg.run.feature_dim));
    let mut depth_keys = Vec::new();
    let mut point_rows = Array2::zeros((0, cfg.run.point_feature_dim));
    let mut point_keys = Vec::new();
    let mut n_samples = 0usize;
    for plan in &learner.schedule().sessions {
        for id in plan.train.iter().chain(plan.test.iter()) {
            let (f2d, f3d) = learner.encode_sample(id)?;
            for (v, row) in f2d.rows.outer_iter().enumerate() {
                depth_rows
                    .push_row(row)
                    .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
                depth_keys.push(format!("{id}#view{v}"));
            }
            if let Some(fp) = f3d {
                point_rows
                    .push_row(fp.view())
                    .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
                point_keys.push(id.clone());
            }
            n_samples += 1;
        }
    }

    let mut text_rows = Array2::zeros((0, cfg.run.feature_dim));
    let mut text_keys = Vec::new();
    for plan in &learner.schedule().sessions {
        for class in &plan.classes {
            let prototype = encode_text_toy(class, cfg.run.feature_dim)?;
            text_rows
                .push_row(prototype.view())
                .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
            text_keys.push(class.clone());
        }
    }

    let depth = EmbeddingMatrix::new(depth_rows, depth_keys)?;
    save_embeddings(&depth, &args.out.join("depth.json"))?;
    let n_point_rows = point_keys.len();
    if cfg.run.snc_enabled {
        let points = EmbeddingMatrix::new(point_rows, point_keys)?;
        save_embeddings(&points, &args.out.join("points.json"))?;
    }
    let text = EmbeddingMatrix::new(text_rows, text_keys)?;
    save_embeddings(&text, &args.out.join("text.json"))?;

    println!(
        "embedded {n_samples} samples: {} depth rows, {} point rows, {} prototypes -> {}",
        depth.n_rows(),
        n_point_rows,
        text.n_rows(),
        args.out.display()
    );
    Ok(())
}

// ----- fit-basis -----

#[derive(Args, Debug)]
pub struct FitBasisArgs {
    /// JSON config file; omitted means defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Embedding manifest to fit on, instead of the config's base session.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Energy fraction to retain; defaults to the config value.
    #[arg(long)]
    pub energy: Option<f64>,
    /// Output basis path.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_fit_basis(args: &FitBasisArgs) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(args.config.as_deref(), &args.overrides)?;
    let energy = args.energy.unwrap_or(cfg.run.energy_fraction);
    let matrix = match &args.embeddings {
        Some(path) => load_embeddings(path)
            .with_context(|| format!("loading embeddings {}", path.display()))?,
        None => {
            let schedule = resolve_schedule(&cfg.schedule)?;
            let source = build_source(&cfg.data)?;
            let learner = Learner::new(cfg.run.clone(), schedule, source)?;
            let base_train = learner.schedule().plan(1)?.train.clone();
            stacked_depth_rows(&learner, &base_train)?
        }
    };

    let basis = fit_basis(&matrix, energy)?;
    let file = fs::File::create(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    write_pcv1(&basis, BufWriter::new(file))?;

    let total: f64 = basis.singular_values.iter().map(|s| s * s).sum();
    let kept: f64 = basis.singular_values[..basis.m()].iter().map(|s| s * s).sum();
    let fraction = if total > 0.0 { kept / total } else { 1.0 };
    println!(
        "kept {} of {} directions, energy {:.4} (asked {:.4})",
        basis.m(),
        basis.c(),
        fraction,
        energy
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

// ----- train -----

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON config file; omitted means defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Directory receiving snapshots, checkpoints, log, and outcomes.
    #[arg(long)]
    pub run_dir: PathBuf,
}

pub fn cmd_train(args: &TrainArgs) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(args.config.as_deref(), &args.overrides)?;
    let schedule = resolve_schedule(&cfg.schedule)?;
    let source = build_source(&cfg.data)?;

    let config_json = cfg.to_pretty_json()?;
    let schedule_json = schedule.to_json()?;
    let id = run_id(&config_json, &schedule_json);

    let dir = &args.run_dir;
    fs::create_dir_all(dir.join("checkpoints"))
        .with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.json"), &config_json)?;
    fs::write(dir.join("schedule.json"), &schedule_json)?;

    let mut learner = Learner::new(cfg.run.clone(), schedule, source)?;
    let n_sessions = learner.schedule().n_sessions();
    println!("run {id}: {n_sessions} sessions");

    let mut summaries = Vec::new();
    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();
    for session in 1..=n_sessions {
        let outcome = learner.run_session(session)?;
        let name = format!("checkpoints/{}", checkpoint_name(session));
        learner.checkpoint(&dir.join(&name))?;
        checkpoints.push(name);

        let eval_accuracy = session_accuracy(&outcome.predictions, session)?;
        let first = outcome.epoch_losses.first().copied().unwrap_or(0.0);
        let last = outcome.epoch_losses.last().copied().unwrap_or(0.0);
        println!(
            "session {session}: loss {first:.3} -> {last:.3}, train acc {:.3}, eval acc {eval_accuracy:.3} on {} samples",
            outcome.train_accuracy,
            outcome.predictions.rows.len()
        );
        rows.extend(outcome.predictions.rows.iter().cloned());
        summaries.push(SessionSummary {
            session,
            train_accuracy: outcome.train_accuracy,
            eval_accuracy,
            epoch_losses: outcome.epoch_losses,
        });
    }

    let log = PredictionLog::new(rows)?;
    log.save_csv(&dir.join("log.csv"))?;
    write_pretty_json(&dir.join("outcomes.json"), &summaries)?;

    let basis = match learner.basis() {
        Some(basis) => {
            let file = fs::File::create(dir.join("basis.pcv1"))?;
            write_pcv1(basis, BufWriter::new(file))?;
            Some("basis.pcv1".to_string())
        }
        None => None,
    };

    let manifest = ExperimentRun {
        run_id: id.clone(),
        config: cfg,
        schedule: "schedule.json".into(),
        basis,
        checkpoints,
        log: "log.csv".into(),
        outcomes: "outcomes.json".into(),
        report: "report.json".into(),
    };
    write_pretty_json(&dir.join("run.json"), &manifest)?;
    println!("run {id} complete -> {}", dir.display());
    Ok(())
}

// ----- eval -----

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// A directory written by `train`.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Session checkpoint to rescore; defaults to the last session.
    #[arg(long)]
    pub session: Option<usize>,
    /// Output CSV path; defaults to `eval-session-NN.csv` in the run dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_eval(args: &EvalArgs) -> anyhow::Result<()> {
    let dir = &args.run_dir;
    let cfg: ExperimentConfig = read_json(&dir.join("config.json"))?;
    let schedule = fscil_core::benchmark::load_schedule(&dir.join("schedule.json"))?;
    let through = args.session.unwrap_or_else(|| schedule.n_sessions());

    let ckpt_path = dir.join("checkpoints").join(checkpoint_name(through));
    let (params, _) = load_checkpoint(&ckpt_path)
        .with_context(|| format!("loading checkpoint {}", ckpt_path.display()))?;
    let basis_path = dir.join("basis.pcv1");
    let basis: Option<PrincipalBasis> = if cfg.run.rfe_enabled && basis_path.exists() {
        let file = fs::File::open(&basis_path)?;
        Some(read_pcv1(BufReader::new(file))?)
    } else {
        None
    };

    let source = build_source(&cfg.data)?;
    let mut learner = Learner::new(cfg.run.clone(), schedule, source)?;
    let log = learner.evaluate_restored(params, basis, through)?;

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| dir.join(format!("eval-session-{through:02}.csv")));
    log.save_csv(&out)?;
    let accuracy = session_accuracy(&log, through)?;
    println!(
        "session {through}: accuracy {accuracy:.4} on {} samples -> {}",
        log.rows.len(),
        out.display()
    );
    Ok(())
}

// ----- report -----

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// A directory written by `train`.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// JSON report path; defaults to `report.json` in the run dir.
    #[arg(long)]
    pub out_json: Option<PathBuf>,
    /// Text table path; defaults to `report.txt` in the run dir.
    #[arg(long)]
    pub out_table: Option<PathBuf>,
}

pub fn cmd_report(args: &ReportArgs) -> anyhow::Result<()> {
    let dir = &args.run_dir;
    let cfg: ExperimentConfig = read_json(&dir.join("config.json"))?;
    let schedule = fscil_core::benchmark::load_schedule(&dir.join("schedule.json"))?;
    let log = PredictionLog::load_csv(&dir.join("log.csv"))?;

    let options = ReportOptions {
        ncacc_include_base: cfg.run.ncacc_include_base,
    };
    let echo = serde_json::to_value(&cfg)?;
    let report = compile_report(&log, &schedule, options, echo)?;

    let json = report_to_json(&report)?;
    let table = render_table(&report);
    let json_path = args.out_json.clone().unwrap_or_else(|| dir.join("report.json"));
    let table_path = args.out_table.clone().unwrap_or_else(|| dir.join("report.txt"));
    fs::write(&json_path, &json).with_context(|| format!("writing {}", json_path.display()))?;
    fs::write(&table_path, &table)
        .with_context(|| format!("writing {}", table_path.display()))?;

    print!("{table}");
    println!("wrote {} and {}", json_path.display(), table_path.display());
    Ok(())
}

// ----- ablate -----

/// The flag grid: no features, each standalone recovery feature, both
/// without the contrastive term, and the full configuration.
const VARIANTS: [(bool, bool, bool); 5] = [
    (false, false, false),
    (true, false, false),
    (false, true, false),
    (true, true, false),
    (true, true, true),
];

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// JSON config file; omitted means defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Master seeds to average over; defaults to the config's seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Output directory for `ablation.json` and `ablation.txt`.
    #[arg(long)]
    pub out: PathBuf,
}

/// One grid row: flag states plus seed-averaged metrics, accuracies and
/// rates as fractions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub rfe: bool,
    pub snc: bool,
    pub cl: bool,
    pub seeds: Vec<u64>,
    pub first_micro: f64,
    pub first_macro: f64,
    pub last_micro: f64,
    pub last_macro: f64,
    pub ncacc: f64,
    pub delta_micro: f64,
    pub delta_macro: f64,
    pub f_micro: f64,
    pub f_macro: f64,
}

fn mean_row(rfe: bool, snc: bool, cl: bool, seeds: &[u64], reports: &[MetricsReport]) -> AblationRow {
    let n = reports.len() as f64;
    let mean = |pick: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(pick).sum::<f64>() / n;
    AblationRow {
        rfe,
        snc,
        cl,
        seeds: seeds.to_vec(),
        first_micro: mean(&|r| r.sessions.first().map_or(0.0, |s| s.micro_acc)),
        first_macro: mean(&|r| r.sessions.first().map_or(0.0, |s| s.macro_acc)),
        last_micro: mean(&|r| r.sessions.last().map_or(0.0, |s| s.micro_acc)),
        last_macro: mean(&|r| r.sessions.last().map_or(0.0, |s| s.macro_acc)),
        ncacc: mean(&|r| r.ncacc),
        delta_micro: mean(&|r| r.delta_micro),
        delta_macro: mean(&|r| r.delta_macro),
        f_micro: mean(&|r| r.f_micro),
        f_macro: mean(&|r| r.f_macro),
    }
}

fn onoff(flag: bool) -> &'static str {
    if flag {
        "on"
    } else {
        "off"
    }
}

/// Fixed-width grid over the variants, percentages with one decimal, the
/// micro row above the macro row.
fn ablation_table(rows: &[AblationRow]) -> String {
    let cell = |v: f64| format!("{:>7.1}", v * 100.0);
    let mut text = format!(
        "{:>4} {:>4} {:>4}{:>8}{:>7}{:>7}{:>7}{:>7}\n",
        "rfe", "snc", "cl", "first", "last", "ncacc", "delta", "f"
    );
    for row in rows {
        text.push_str(&format!(
            "{:>4} {:>4} {:>4} {}{}{}{}{}  micro\n",
            onoff(row.rfe),
            onoff(row.snc),
            onoff(row.cl),
            cell(row.first_micro),
            cell(row.last_micro),
            cell(row.ncacc),
            cell(row.delta_micro),
            cell(row.f_micro),
        ));
        text.push_str(&format!(
            "{:>14} {}{}{}{}{}  macro\n",
            "",
            cell(row.first_macro),
            cell(row.last_macro),
            cell(row.ncacc),
            cell(row.delta_macro),
            cell(row.f_macro),
        ));
    }
    text
}

pub fn cmd_ablate(args: &AblateArgs) -> anyhow::Result<()> {
    let base_cfg = ExperimentConfig::load(args.config.as_deref(), &args.overrides)?;
    let seeds = if args.seeds.is_empty() {
        vec![base_cfg.run.master_seed]
    } else {
        args.seeds.clone()
    };
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let mut rows = Vec::new();
    for (rfe, snc, cl) in VARIANTS {
        let mut reports = Vec::new();
        for &seed in &seeds {
            let mut cfg = base_cfg.clone();
            cfg.run.rfe_enabled = rfe;
            cfg.run.snc_enabled = snc;
            cfg.run.cl_enabled = cl;
            cfg.run.master_seed = seed;

            let schedule = resolve_schedule(&cfg.schedule)?;
            let source = build_source(&cfg.data)?;
            let mut learner = Learner::new(cfg.run.clone(), schedule, source)?;
            let result = learner.run_all()?;
            let options = ReportOptions {
                ncacc_include_base: cfg.run.ncacc_include_base,
            };
            let report = compile_report(
                &result.log,
                learner.schedule(),
                options,
                serde_json::to_value(&cfg)?,
            )?;
            reports.push(report);
        }
        log::info!(
            "variant rfe={} snc={} cl={} finished over {} seed(s)",
            onoff(rfe),
            onoff(snc),
            onoff(cl),
            seeds.len()
        );
        rows.push(mean_row(rfe, snc, cl, &seeds, &reports));
    }

    let table = ablation_table(&rows);
    write_pretty_json(&args.out.join("ablation.json"), &rows)?;
    fs::write(args.out.join("ablation.txt"), &table)?;
    print!("{table}");
    println!("wrote {}", args.out.display());
    Ok(())
}
