//! Incremental training protocol: losses, optimizer, few-shot sampling,
//! exemplar memory, and the session loop.
//!
//! A [`Learner`] owns the frozen encoders, the trainable heads, the growing
//! prototype bank, and the exemplar memory, and walks a
//! [`SessionSchedule`](crate::benchmark::SessionSchedule) in order. Session 1
//! trains on the full base split; later sessions see only a few seeded shots
//! per new class plus one remembered exemplar per old class. After each
//! session the model is evaluated on the union of all test splits seen so
//! far, producing one [`PredictionLog`] row per test sample.
//!
//! The per-sample objective is cross-entropy over prototype similarities
//! plus, when contrastive alignment is enabled, an InfoNCE term that pulls
//! the fused features of augmented copies toward their class prototype and
//! away from all others. Each roster sample gets its fixed set of augmented
//! copies when the session starts, so the session loss is a stationary
//! function of the head parameters that the epochs minimize. Only the merger
//! and adapter heads train; all encoder outputs — original and augmented —
//! are computed once and reused across epochs, so a parameter perturbation
//! never touches rendering. That makes the whole per-sample loss, exposed as
//! [`sample_loss_and_grads`], a pure function of the head parameters — which
//! is exactly what the finite-difference tests probe.
//!
//! Every random choice (shot sampling, batch order, augmentation draws,
//! exemplar picks) flows from the master seed through named substreams, so a
//! run is reproducible bit for bit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use log::warn;
use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::benchmark::{DatasetManifest, SessionSchedule};
use crate::encoders::{
    EmbeddingMatrix, FeatureVector, PrototypeBank, ToyDepthEncoder, ToyPointEncoder,
};
use crate::error::{Error, Result};
use crate::geometry::{
    augment, load_cloud, normalize_unit_sphere, AugmentationConfig, PointCloud,
    NOISY_JITTER_SIGMA, NOISY_OUTLIER_FRACTION, SYNTHETIC_JITTER_SIGMA,
};
use crate::heads::{
    fuse_backward, heads_backward_split, heads_forward, GradientBundle, HeadsDims,
    HeadsForwardState, HeadsParams,
};
use crate::metrics::{PredictionLog, PredictionRow};
use crate::projection::{default_camera_set, render_views, Camera};
use crate::rfe::{
    cosine_logit, cosine_logit_grad, fit_basis, predict_probs, rcs_logit, rcs_logit_grad,
    PrincipalBasis,
};
use crate::rng::{derive_seed, named_seed, SplitMix64};

/// Probabilities below this are clamped before the log in cross-entropy.
pub const CE_PROB_FLOOR: f64 = 1e-12;

/// Named substreams hanging off the master seed. Every random draw in a run
/// comes from exactly one of them, so each component can be reproduced in
/// isolation from the master seed alone.
pub const SEED_STREAM_DEPTH_ENCODER: &str = "enc-depth";
/// See [`SEED_STREAM_DEPTH_ENCODER`].
pub const SEED_STREAM_POINT_ENCODER: &str = "enc-points";
/// See [`SEED_STREAM_DEPTH_ENCODER`].
pub const SEED_STREAM_HEADS_INIT: &str = "heads-init";
/// See [`SEED_STREAM_DEPTH_ENCODER`].
pub const SEED_STREAM_SHOTS: &str = "shots";
/// See [`SEED_STREAM_DEPTH_ENCODER`].
pub const SEED_STREAM_SHUFFLE: &str = "shuffle";
/// See [`SEED_STREAM_DEPTH_ENCODER`].
pub const SEED_STREAM_AUG: &str = "aug";
/// See [`SEED_STREAM_DEPTH_ENCODER`].
pub const SEED_STREAM_MEMORY: &str = "memory";

/// First-moment decay of the optimizer.
pub const ADAM_BETA1: f64 = 0.9;
/// Second-moment decay of the optimizer.
pub const ADAM_BETA2: f64 = 0.999;
/// Denominator guard of the optimizer.
pub const ADAM_EPSILON: f64 = 1e-8;

/// Which feature the prototype classifier reads.
///
/// `Global` scores the fused feature (the default); `Depth` scores the
/// merger output directly even when the point branch is active, in which
/// case the point branch trains only through the contrastive term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RfeTarget {
    Global,
    Depth,
}

/// Full configuration of a training run. All fields have defaults, so a
/// JSON config file may specify any subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Learning rate of the head optimizer.
    pub lr: f64,
    /// Decoupled weight decay applied before each optimizer step.
    pub weight_decay: f64,
    /// Temperature of the contrastive loss.
    pub tau: f64,
    /// Weight of the contrastive loss in the total objective.
    pub alpha: f64,
    /// Training epochs in the base session.
    pub base_epochs: usize,
    /// Training epochs in each incremental session.
    pub inc_epochs: usize,
    /// Training samples drawn per new class in incremental sessions.
    pub shots: usize,
    /// Exemplars remembered per class for replay in later sessions.
    pub memory_per_class: usize,
    /// Minibatch size (the final batch of an epoch may be smaller).
    pub batch_size: usize,
    /// Augmented copies per sample feeding the contrastive loss.
    pub n_aug: usize,
    /// Number of rendered views per cloud.
    pub n_views: usize,
    /// Shared feature dimension C of depth, text, and fused features.
    pub feature_dim: usize,
    /// Raw point-feature dimension D3 out of the point encoder.
    pub point_feature_dim: usize,
    /// Hidden width of the merger head.
    pub merger_hidden: usize,
    /// Hidden width of the adapter head.
    pub adapter_hidden: usize,
    /// Spectral energy retained when fitting the principal basis.
    pub energy_fraction: f64,
    /// Score with the renormalized (projected) similarity instead of plain
    /// cosine.
    pub rfe_enabled: bool,
    /// Run the point branch and fuse it with the depth branch.
    pub snc_enabled: bool,
    /// Add the contrastive alignment term to the objective.
    pub cl_enabled: bool,
    /// Which feature the classifier scores.
    pub rfe_target: RfeTarget,
    /// Average novel-class accuracy over all sessions instead of only the
    /// incremental ones.
    pub ncacc_include_base: bool,
    /// Root seed of every random choice in the run.
    pub master_seed: u64,
    /// Square depth-map resolution in pixels.
    pub resolution: usize,
    /// Camera distance from the origin before augmentation scaling.
    pub camera_distance: f64,
    /// Splat radius of a rendered point, in pixels.
    pub point_radius_px: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            tau: 0.1,
            alpha: 1.0,
            base_epochs: 10,
            inc_epochs: 20,
            shots: 5,
            memory_per_class: 1,
            batch_size: 32,
            n_aug: 2,
            n_views: crate::projection::DEFAULT_N_VIEWS,
            feature_dim: crate::encoders::DEFAULT_FEATURE_DIM,
            point_feature_dim: crate::encoders::DEFAULT_POINT_DIM,
            merger_hidden: crate::encoders::DEFAULT_FEATURE_DIM,
            adapter_hidden: crate::encoders::DEFAULT_FEATURE_DIM,
            energy_fraction: crate::rfe::DEFAULT_ENERGY_FRACTION,
            rfe_enabled: true,
            snc_enabled: true,
            cl_enabled: true,
            rfe_target: RfeTarget::Global,
            ncacc_include_base: false,
            master_seed: 7,
            resolution: 32,
            camera_distance: crate::projection::DEFAULT_CAMERA_DISTANCE,
            point_radius_px: crate::projection::DEFAULT_POINT_RADIUS_PX,
        }
    }
}

impl RunConfig {
    /// Checks every field is in range.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            (self.lr, "lr"),
            (self.tau, "tau"),
            (self.camera_distance, "camera_distance"),
        ];
        for (value, name) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive: {value}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative: {}",
                self.weight_decay
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be non-negative: {}",
                self.alpha
            )));
        }
        let at_least_one = [
            (self.base_epochs, "base_epochs"),
            (self.inc_epochs, "inc_epochs"),
            (self.shots, "shots"),
            (self.batch_size, "batch_size"),
            (self.n_aug, "n_aug"),
            (self.feature_dim, "feature_dim"),
            (self.point_feature_dim, "point_feature_dim"),
            (self.merger_hidden, "merger_hidden"),
            (self.adapter_hidden, "adapter_hidden"),
            (self.resolution, "resolution"),
        ];
        for (value, name) in at_least_one {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(1..=26).contains(&self.n_views) {
            return Err(Error::Config(format!(
                "n_views must be in 1..=26: {}",
                self.n_views
            )));
        }
        if !(self.energy_fraction > 0.0 && self.energy_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "energy_fraction must be in (0, 1]: {}",
                self.energy_fraction
            )));
        }
        Ok(())
    }

    /// Head tensor shapes implied by the config.
    pub fn heads_dims(&self) -> HeadsDims {
        HeadsDims {
            n_views: self.n_views,
            c: self.feature_dim,
            h: self.merger_hidden,
            d3: self.point_feature_dim,
            h3: self.adapter_hidden,
        }
    }
}

// ----- losses -----

static CE_CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// How many times cross-entropy has clamped a zero probability since process
/// start (or the last [`reset_ce_clamp_events`]).
pub fn ce_clamp_events() -> u64 {
    CE_CLAMP_EVENTS.load(Ordering::Relaxed)
}

/// Resets the clamp counter (test support).
pub fn reset_ce_clamp_events() {
    CE_CLAMP_EVENTS.store(0, Ordering::Relaxed);
}

/// Cross-entropy of one prediction: −ln p(true class).
///
/// A probability below [`CE_PROB_FLOOR`] is clamped there, with a warning
/// and a bump of the global clamp counter — a softmax output of exact zero
/// means the logits have collapsed, which is worth noticing but not worth a
/// NaN in the training loss.
pub fn ce_loss(probs: &Array1<f64>, true_index: usize) -> Result<f64> {
    if true_index >= probs.len() {
        return Err(Error::ShapeMismatch(format!(
            "true index {true_index} outside {} classes",
            probs.len()
        )));
    }
    let p = probs[true_index];
    if !p.is_finite() {
        return Err(Error::Data(format!("non-finite probability {p}")));
    }
    if p < CE_PROB_FLOOR {
        warn!("cross-entropy clamped probability {p:.3e} to {CE_PROB_FLOOR:.0e}");
        CE_CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
        return Ok(-CE_PROB_FLOOR.ln());
    }
    Ok(-p.ln())
}

/// Loss and similarity-space gradients of one InfoNCE term.
#[derive(Debug, Clone)]
pub struct InfoNceEval {
    pub loss: f64,
    /// ∂loss/∂(positive similarity).
    pub d_sim_pos: f64,
    /// ∂loss/∂(each negative similarity), in input order.
    pub d_sim_neg: Vec<f64>,
}

/// InfoNCE from precomputed similarities:
/// −ln(exp(s⁺/τ) / (exp(s⁺/τ) + Σ exp(s⁻/τ))).
pub fn infonce_from_sims(sim_pos: f64, sim_neg: &[f64], tau: f64) -> Result<InfoNceEval> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("tau must be positive: {tau}")));
    }
    if sim_neg.is_empty() {
        return Err(Error::Config(
            "contrastive loss needs at least one negative".into(),
        ));
    }
    let z_pos = sim_pos / tau;
    let z_neg: Vec<f64> = sim_neg.iter().map(|s| s / tau).collect();
    let z_max = z_neg.iter().cloned().fold(z_pos, f64::max);
    let e_pos = (z_pos - z_max).exp();
    let e_neg: Vec<f64> = z_neg.iter().map(|z| (z - z_max).exp()).collect();
    let denom = e_pos + e_neg.iter().sum::<f64>();
    let q_pos = e_pos / denom;
    Ok(InfoNceEval {
        loss: -(q_pos.ln()),
        d_sim_pos: (q_pos - 1.0) / tau,
        d_sim_neg: e_neg.iter().map(|e| (e / denom) / tau).collect(),
    })
}

/// InfoNCE over cosine similarities between a feature and prototype vectors.
pub fn infonce_loss(
    feature: &FeatureVector,
    positive: &FeatureVector,
    negatives: &[FeatureVector],
    tau: f64,
) -> Result<f64> {
    let sim_pos = cosine_logit(feature, positive)?;
    let sim_neg: Vec<f64> = negatives
        .iter()
        .map(|n| cosine_logit(feature, n))
        .collect::<Result<_>>()?;
    Ok(infonce_from_sims(sim_pos, &sim_neg, tau)?.loss)
}

/// Total objective: classification loss plus α times the contrastive loss.
pub fn total_loss(l_cls: f64, l_cont: f64, alpha: f64) -> f64 {
    l_cls + alpha * l_cont
}

// ----- optimizer -----

/// Moment estimates of the decoupled-weight-decay Adam optimizer, flat over
/// the fixed head tensor order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    /// Completed steps (drives bias correction).
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(flat_len: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; flat_len],
            v: vec![0.0; flat_len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One optimizer step over every head parameter.
///
/// Decay first — each parameter is scaled by (1 − lr·wd) — then the
/// bias-corrected moment update `p -= lr·m̂ / (√v̂ + ε)`. Decoupling the
/// decay from the moments is what distinguishes this from L2-regularized
/// Adam.
pub fn adamw_step(
    params: &mut HeadsParams,
    grads: &GradientBundle,
    opt: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) || !(weight_decay >= 0.0 && weight_decay.is_finite()) {
        return Err(Error::Config(format!(
            "bad optimizer hyperparameters: lr={lr}, weight_decay={weight_decay}"
        )));
    }
    if params.flat_len() != opt.len() {
        return Err(Error::ShapeMismatch(format!(
            "optimizer tracks {} parameters but the heads have {}",
            opt.len(),
            params.flat_len()
        )));
    }
    let grad_slices = grads.tensor_slices();
    let mut param_slices = params.tensor_slices_mut();
    opt.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(opt.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(opt.step as i32);
    let mut offset = 0;
    for (p, g) in param_slices.iter_mut().zip(grad_slices.iter()) {
        if p.len() != g.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter tensor of {} entries vs gradient of {}",
                p.len(),
                g.len()
            )));
        }
        for i in 0..p.len() {
            let gi = g[i];
            if !gi.is_finite() {
                return Err(Error::Data(format!("non-finite gradient entry {gi}")));
            }
            p[i] *= 1.0 - lr * weight_decay;
            let m = &mut opt.m[offset + i];
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * gi;
            let v = &mut opt.v[offset + i];
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
        offset += p.len();
    }
    Ok(())
}

// ----- checkpoints -----

const OPT1_MAGIC: &[u8; 4] = b"OPT1";

/// Writes the heads followed, optionally, by an optimizer block, so training
/// can resume mid-run with intact moment estimates.
pub fn save_checkpoint(
    params: &HeadsParams,
    opt: Option<&OptimizerState>,
    path: &Path,
) -> Result<()> {
    if let Some(opt) = opt {
        if opt.len() != params.flat_len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer tracks {} parameters but the heads have {}",
                opt.len(),
                params.flat_len()
            )));
        }
    }
    let mut file = File::create(path)?;
    crate::heads::write_hds1(params, &mut file)?;
    if let Some(opt) = opt {
        file.write_all(OPT1_MAGIC)?;
        file.write_all(&opt.step.to_le_bytes())?;
        for value in opt.m.iter().chain(opt.v.iter()) {
            file.write_all(&value.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a checkpoint; the optimizer block is `None` when absent.
pub fn load_checkpoint(path: &Path) -> Result<(HeadsParams, Option<OptimizerState>)> {
    let mut file = File::open(path)?;
    let params = crate::heads::read_hds1(&mut file)?;
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if rest.is_empty() {
        return Ok((params, None));
    }
    let flat_len = params.flat_len();
    let expected = 4 + 8 + 16 * flat_len;
    if rest.len() != expected || &rest[..4] != OPT1_MAGIC {
        return Err(Error::Format(format!(
            "optimizer block malformed: {} trailing bytes",
            rest.len()
        )));
    }
    let step = u64::from_le_bytes(rest[4..12].try_into().expect("8 bytes"));
    let mut values = Vec::with_capacity(2 * flat_len);
    for chunk in rest[12..].chunks_exact(8) {
        let value = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if !value.is_finite() {
            return Err(Error::Data("non-finite optimizer moment".into()));
        }
        values.push(value);
    }
    let v = values.split_off(flat_len);
    Ok((params, Some(OptimizerState { step, m: values, v })))
}

// ----- sampling and memory -----

/// Draws `shots` ids from the pool without replacement (seeded).
///
/// A pool smaller than `shots` is returned whole with a warning; an empty
/// pool is an error because the session would silently train on nothing.
pub fn sample_shots(pool: &[String], shots: usize, seed: u64) -> Result<Vec<String>> {
    if shots == 0 {
        return Err(Error::Config("shots must be at least 1".into()));
    }
    if pool.is_empty() {
        return Err(Error::Data(
            "cannot draw training shots from an empty pool".into(),
        ));
    }
    if pool.len() <= shots {
        if pool.len() < shots {
            warn!(
                "requested {shots} shots but the pool has only {}; taking all",
                pool.len()
            );
        }
        return Ok(pool.to_vec());
    }
    let mut rng = SplitMix64::new(seed);
    Ok(rng
        .sample_indices(pool.len(), shots)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect())
}

/// Replay store: up to a fixed number of exemplar sample ids per past class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExemplarMemory {
    per_class: BTreeMap<String, Vec<String>>,
}

impl ExemplarMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn n_samples(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn contains_class(&self, class: &str) -> bool {
        self.per_class.contains_key(class)
    }

    /// Exemplar ids of one class.
    pub fn class_ids(&self, class: &str) -> Option<&[String]> {
        self.per_class.get(class).map(Vec::as_slice)
    }

    /// Every (class, sample id) pair in class order.
    pub fn samples(&self) -> Vec<(String, String)> {
        self.per_class
            .iter()
            .flat_map(|(class, ids)| ids.iter().map(move |id| (class.clone(), id.clone())))
            .collect()
    }

    /// Remembers up to `cap` seeded exemplars of a newly finished class.
    /// A class may be remembered only once per run.
    pub fn remember(&mut self, class: &str, pool: &[String], cap: usize, seed: u64) -> Result<()> {
        if self.contains_class(class) {
            return Err(Error::Protocol(format!(
                "class {class:?} already has exemplars in memory"
            )));
        }
        let chosen = sample_shots(pool, cap, seed)?;
        self.per_class.insert(class.to_string(), chosen);
        Ok(())
    }
}

// ----- cloud sources -----

/// Resolves sample ids to point clouds.
pub trait CloudSource {
    /// Class of a sample, without loading its geometry.
    fn class_of(&self, sample_id: &str) -> Result<String>;
    /// The cloud itself.
    fn load(&self, sample_id: &str) -> Result<PointCloud>;
}

/// Generates clouds on demand from ids shaped `"{class}/{split}/{index}"`.
///
/// Each id seeds its own generator stream off the dataset seed, so any
/// sample can be re-materialized alone, identically, in any order.
#[derive(Debug, Clone)]
pub struct SyntheticSource {
    pub dataset_seed: u64,
    pub n_points: usize,
    pub jitter_sigma: f64,
    pub outlier_fraction: f64,
}

impl SyntheticSource {
    /// Clean synthetic surfaces with light jitter.
    pub fn new(dataset_seed: u64, n_points: usize) -> Self {
        Self {
            dataset_seed,
            n_points,
            jitter_sigma: SYNTHETIC_JITTER_SIGMA,
            outlier_fraction: 0.0,
        }
    }

    /// Scan-like variant: heavier jitter plus uniform outliers.
    pub fn noisy(dataset_seed: u64, n_points: usize) -> Self {
        Self {
            dataset_seed,
            n_points,
            jitter_sigma: NOISY_JITTER_SIGMA,
            outlier_fraction: NOISY_OUTLIER_FRACTION,
        }
    }
}

impl CloudSource for SyntheticSource {
    fn class_of(&self, sample_id: &str) -> Result<String> {
        let parts: Vec<&str> = sample_id.split('/').collect();
        match parts.as_slice() {
            [class, _split, _index] if !class.is_empty() => Ok(class.to_string()),
            _ => Err(Error::Data(format!(
                "synthetic sample id {sample_id:?} is not class/split/index"
            ))),
        }
    }

    fn load(&self, sample_id: &str) -> Result<PointCloud> {
        let class = self.class_of(sample_id)?;
        let seed = named_seed(self.dataset_seed, sample_id);
        let mut cloud = crate::geometry::gen_synthetic_with(
            &class,
            self.n_points,
            seed,
            self.jitter_sigma,
            self.outlier_fraction,
        )?;
        cloud.sample_id = sample_id.to_string();
        Ok(cloud)
    }
}

/// Loads clouds from disk, using manifest paths relative to a root.
#[derive(Debug, Clone)]
pub struct FileSource {
    entries: BTreeMap<String, (String, PathBuf)>,
}

impl FileSource {
    pub fn new(root: &Path, manifests: &[&DatasetManifest]) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for manifest in manifests {
            manifest.validate()?;
            for entry in &manifest.classes {
                for sample in &entry.samples {
                    let value = (entry.class_name.clone(), root.join(&sample.path));
                    if entries.insert(sample.sample_id.clone(), value).is_some() {
                        return Err(Error::Manifest(format!(
                            "sample id {:?} appears in more than one manifest",
                            sample.sample_id
                        )));
                    }
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl CloudSource for FileSource {
    fn class_of(&self, sample_id: &str) -> Result<String> {
        self.entries
            .get(sample_id)
            .map(|(class, _)| class.clone())
            .ok_or_else(|| Error::Data(format!("unknown sample id {sample_id:?}")))
    }

    fn load(&self, sample_id: &str) -> Result<PointCloud> {
        let (class, path) = self
            .entries
            .get(sample_id)
            .ok_or_else(|| Error::Data(format!("unknown sample id {sample_id:?}")))?;
        load_cloud(path, class, sample_id)
    }
}

// ----- per-sample loss -----

/// Frozen-encoder outputs of one training sample: the unaugmented features
/// for the classification term and any augmented copies for the contrastive
/// term.
#[derive(Debug, Clone)]
pub struct SampleInputs {
    pub f2d: EmbeddingMatrix,
    pub f3d: Option<FeatureVector>,
    pub aug: Vec<(EmbeddingMatrix, Option<FeatureVector>)>,
    pub class_index: usize,
}

/// The loss-shape switches of [`sample_loss_and_grads`].
#[derive(Debug, Clone, Copy)]
pub struct LossSettings {
    pub tau: f64,
    pub alpha: f64,
    pub rfe_enabled: bool,
    pub rfe_target: RfeTarget,
}

impl From<&RunConfig> for LossSettings {
    fn from(cfg: &RunConfig) -> Self {
        Self {
            tau: cfg.tau,
            alpha: cfg.alpha,
            rfe_enabled: cfg.rfe_enabled,
            rfe_target: cfg.rfe_target,
        }
    }
}

fn classifier_feature<'a>(
    fg: &'a FeatureVector,
    state: &'a HeadsForwardState,
    target: RfeTarget,
) -> &'a FeatureVector {
    match target {
        RfeTarget::Global => fg,
        RfeTarget::Depth => state.fd(),
    }
}

fn class_logit(
    feature: &FeatureVector,
    proto: &FeatureVector,
    basis: Option<&PrincipalBasis>,
) -> Result<f64> {
    match basis {
        Some(basis) => rcs_logit(feature, proto, basis),
        None => cosine_logit(feature, proto),
    }
}

fn class_logit_grad(
    feature: &FeatureVector,
    proto: &FeatureVector,
    basis: Option<&PrincipalBasis>,
) -> Result<FeatureVector> {
    match basis {
        Some(basis) => rcs_logit_grad(feature, proto, basis),
        None => cosine_logit_grad(feature, proto),
    }
}

/// Loss and head gradients of one sample under fixed encoder outputs.
///
/// The classification term scores the configured feature against every
/// prototype (renormalized similarity when a basis is active, cosine
/// otherwise) and takes cross-entropy. Each augmented copy adds an α-weighted
/// InfoNCE term on plain cosine similarities between its fused feature and
/// the prototypes: the true class is the positive, all others negatives.
///
/// Returns the summed loss and the gradient of it with respect to every
/// head parameter.
pub fn sample_loss_and_grads(
    inputs: &SampleInputs,
    params: &HeadsParams,
    prototypes: &[FeatureVector],
    basis: Option<&PrincipalBasis>,
    settings: &LossSettings,
) -> Result<(f64, GradientBundle)> {
    let k = prototypes.len();
    if inputs.class_index >= k {
        return Err(Error::ShapeMismatch(format!(
            "class index {} outside {} prototypes",
            inputs.class_index, k
        )));
    }
    let score_basis = if settings.rfe_enabled {
        Some(basis.ok_or_else(|| {
            Error::Config("renormalized scoring enabled but no basis was fitted".into())
        })?)
    } else {
        None
    };

    // Classification term on the unaugmented sample.
    let (fg, state) = heads_forward(&inputs.f2d, inputs.f3d.as_ref(), params)?;
    let feature = classifier_feature(&fg, &state, settings.rfe_target);
    let mut logits = Array1::zeros(k);
    for j in 0..k {
        logits[j] = class_logit(feature, &prototypes[j], score_basis)?;
    }
    let probs = predict_probs(&logits);
    let mut loss = ce_loss(&probs, inputs.class_index)?;

    let c = fg.len();
    let mut d_feature = Array1::zeros(c);
    for j in 0..k {
        let coefficient = probs[j] - if j == inputs.class_index { 1.0 } else { 0.0 };
        if coefficient != 0.0 {
            let grad = class_logit_grad(feature, &prototypes[j], score_basis)?;
            d_feature.scaled_add(coefficient, &grad);
        }
    }
    let (d_fd, d_fp) = match settings.rfe_target {
        RfeTarget::Global => fuse_backward(&state, &d_feature)?,
        RfeTarget::Depth => (d_feature, Array1::zeros(c)),
    };
    let mut bundle = heads_backward_split(&state, params, d_fd, d_fp)?;

    // Contrastive term on each augmented copy.
    for (f2d_aug, f3d_aug) in &inputs.aug {
        let (fg_aug, state_aug) = heads_forward(f2d_aug, f3d_aug.as_ref(), params)?;
        let sim_pos = cosine_logit(&fg_aug, &prototypes[inputs.class_index])?;
        let mut sim_neg = Vec::with_capacity(k - 1);
        for (j, proto) in prototypes.iter().enumerate() {
            if j != inputs.class_index {
                sim_neg.push(cosine_logit(&fg_aug, proto)?);
            }
        }
        let eval = infonce_from_sims(sim_pos, &sim_neg, settings.tau)?;
        loss += settings.alpha * eval.loss;

        let mut d_fg = Array1::zeros(c);
        let pos_grad = cosine_logit_grad(&fg_aug, &prototypes[inputs.class_index])?;
        d_fg.scaled_add(settings.alpha * eval.d_sim_pos, &pos_grad);
        let mut neg_slot = 0;
        for (j, proto) in prototypes.iter().enumerate() {
            if j != inputs.class_index {
                let grad = cosine_logit_grad(&fg_aug, proto)?;
                d_fg.scaled_add(settings.alpha * eval.d_sim_neg[neg_slot], &grad);
                neg_slot += 1;
            }
        }
        let (d_fd_aug, d_fp_aug) = fuse_backward(&state_aug, &d_fg)?;
        let bundle_aug = heads_backward_split(&state_aug, params, d_fd_aug, d_fp_aug)?;
        bundle.accumulate(&bundle_aug, 1.0);
    }

    Ok((loss, bundle))
}

// ----- the session loop -----

/// Training record of one finished session.
#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub session: usize,
    /// Mean per-sample loss of each epoch, in epoch order.
    pub epoch_losses: Vec<f64>,
    /// Accuracy on the session's own training samples under the final
    /// parameters.
    pub train_accuracy: f64,
    /// Evaluation rows over the union of test splits of sessions 1..=b.
    pub predictions: PredictionLog,
}

/// Everything a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    /// All evaluation rows of all sessions, in session order.
    pub log: PredictionLog,
    pub outcomes: Vec<SessionOutcome>,
    pub memory: ExemplarMemory,
}

struct PreparedSample {
    sample_id: String,
    class_index: usize,
    class_name: String,
    f2d: EmbeddingMatrix,
    f3d: Option<FeatureVector>,
    /// The session's fixed augmented copies feeding the contrastive term.
    aug: Vec<(EmbeddingMatrix, Option<FeatureVector>)>,
}

/// Drives a schedule session by session; see the module docs for the
/// protocol.
pub struct Learner<S: CloudSource> {
    cfg: RunConfig,
    schedule: SessionSchedule,
    source: S,
    depth_encoder: ToyDepthEncoder,
    point_encoder: ToyPointEncoder,
    cameras: Vec<Camera>,
    params: HeadsParams,
    opt: OptimizerState,
    prototypes: PrototypeBank,
    proto_rows: Vec<FeatureVector>,
    basis: Option<PrincipalBasis>,
    memory: ExemplarMemory,
    eval_cache: BTreeMap<String, (EmbeddingMatrix, Option<FeatureVector>)>,
    next_session: usize,
    /// Set by [`Learner::evaluate_restored`]; a restored learner only scores.
    restored: bool,
}

impl<S: CloudSource> Learner<S> {
    pub fn new(cfg: RunConfig, schedule: SessionSchedule, source: S) -> Result<Self> {
        cfg.validate()?;
        schedule.validate()?;
        let depth_encoder = ToyDepthEncoder::new(
            cfg.feature_dim,
            named_seed(cfg.master_seed, SEED_STREAM_DEPTH_ENCODER),
        );
        let point_encoder = ToyPointEncoder::new(
            cfg.point_feature_dim,
            named_seed(cfg.master_seed, SEED_STREAM_POINT_ENCODER),
        );
        let cameras = default_camera_set(
            cfg.n_views,
            cfg.camera_distance,
            (cfg.resolution, cfg.resolution),
        )?;
        let params = HeadsParams::init(&cfg.heads_dims(), named_seed(cfg.master_seed, SEED_STREAM_HEADS_INIT));
        let opt = OptimizerState::new(params.flat_len());
        let prototypes = PrototypeBank::new(cfg.feature_dim);
        Ok(Self {
            cfg,
            schedule,
            source,
            depth_encoder,
            point_encoder,
            cameras,
            params,
            opt,
            prototypes,
            proto_rows: Vec::new(),
            basis: None,
            memory: ExemplarMemory::new(),
            eval_cache: BTreeMap::new(),
            next_session: 1,
            restored: false,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &SessionSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &HeadsParams {
        &self.params
    }

    pub fn prototypes(&self) -> &PrototypeBank {
        &self.prototypes
    }

    pub fn basis(&self) -> Option<&PrincipalBasis> {
        self.basis.as_ref()
    }

    pub fn memory(&self) -> &ExemplarMemory {
        &self.memory
    }

    /// 1-based index of the next session to run.
    pub fn next_session(&self) -> usize {
        self.next_session
    }

    /// Writes heads plus optimizer state.
    pub fn checkpoint(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.params, Some(&self.opt), path)
    }

    /// Unaugmented frozen-encoder outputs of a normalized cloud.
    fn prepare_features(
        &self,
        cloud: &PointCloud,
    ) -> Result<(EmbeddingMatrix, Option<FeatureVector>)> {
        let maps = render_views(cloud, &self.cameras, self.cfg.point_radius_px)?;
        let f2d = self.depth_encoder.encode(&maps)?;
        let f3d = self
            .cfg
            .snc_enabled
            .then(|| self.point_encoder.encode(cloud));
        Ok((f2d, f3d))
    }

    /// Frozen-encoder outputs for one sample, exactly as training and
    /// evaluation see them: the loaded cloud is normalized, rendered from
    /// the configured cameras, and passed through the seeded toy encoders.
    /// Lets callers precompute embedding files that match a run bit for bit.
    pub fn encode_sample(
        &self,
        sample_id: &str,
    ) -> Result<(EmbeddingMatrix, Option<FeatureVector>)> {
        let cloud = normalize_unit_sphere(&self.source.load(sample_id)?)?;
        self.prepare_features(&cloud)
    }

    /// One augmented copy: rotate the cloud, scale the camera distance, and
    /// re-encode.
    fn augmented_features(
        &self,
        cloud: &PointCloud,
        seed: u64,
    ) -> Result<(EmbeddingMatrix, Option<FeatureVector>)> {
        let (aug_cloud, record) = augment(cloud, seed, &AugmentationConfig::default())?;
        let cameras: Vec<Camera> = self
            .cameras
            .iter()
            .map(|c| c.scaled(record.view_distance_scale))
            .collect();
        let maps = render_views(&aug_cloud, &cameras, self.cfg.point_radius_px)?;
        let f2d = self.depth_encoder.encode(&maps)?;
        let f3d = self
            .cfg
            .snc_enabled
            .then(|| self.point_encoder.encode(&aug_cloud));
        Ok((f2d, f3d))
    }

    /// Predicted class index for encoder outputs; ties resolve to the lowest
    /// class index.
    fn classify(&self, f2d: &EmbeddingMatrix, f3d: Option<&FeatureVector>) -> Result<usize> {
        let (fg, state) = heads_forward(f2d, f3d, &self.params)?;
        let feature = classifier_feature(&fg, &state, self.cfg.rfe_target);
        let score_basis = if self.cfg.rfe_enabled {
            self.basis.as_ref()
        } else {
            None
        };
        let mut best = 0;
        let mut best_logit = f64::NEG_INFINITY;
        for (j, proto) in self.proto_rows.iter().enumerate() {
            let logit = class_logit(feature, proto, score_basis)?;
            if logit > best_logit {
                best = j;
                best_logit = logit;
            }
        }
        Ok(best)
    }

    /// Loads, normalizes, and encodes one roster sample, including its fixed
    /// augmented copies when `aug_seed` is given.
    fn prepare_sample(
        &self,
        sample_id: &str,
        class_name: &str,
        aug_seed: Option<u64>,
    ) -> Result<PreparedSample> {
        let class_index = self.prototypes.index_of(class_name).ok_or_else(|| {
            Error::Protocol(format!("class {class_name:?} has no prototype yet"))
        })?;
        let cloud = normalize_unit_sphere(&self.source.load(sample_id)?)?;
        let (f2d, f3d) = self.prepare_features(&cloud)?;
        let mut aug = Vec::new();
        if let Some(seed) = aug_seed {
            for copy in 0..self.cfg.n_aug {
                aug.push(self.augmented_features(&cloud, derive_seed(seed, copy as u64))?);
            }
        }
        Ok(PreparedSample {
            sample_id: sample_id.to_string(),
            class_index,
            class_name: class_name.to_string(),
            f2d,
            f3d,
            aug,
        })
    }

    /// The training roster of a session: (sample id, class) pairs — the full
    /// base split for session 1, seeded shots per class afterwards, plus all
    /// remembered exemplars.
    fn session_roster(&self, session: usize) -> Result<Vec<(String, String)>> {
        let plan = self.schedule.plan(session)?;
        let mut roster = Vec::new();
        if session == 1 {
            for id in &plan.train {
                let class = self.source.class_of(id)?;
                if !plan.classes.contains(&class) {
                    return Err(Error::Protocol(format!(
                        "training sample {id:?} of class {class:?} is not part of session 1"
                    )));
                }
                roster.push((id.clone(), class));
            }
        } else {
            let mut pools: BTreeMap<usize, Vec<String>> = BTreeMap::new();
            for id in &plan.train {
                let class = self.source.class_of(id)?;
                let position =
                    plan.classes.iter().position(|c| *c == class).ok_or_else(|| {
                        Error::Protocol(format!(
                            "training sample {id:?} of class {class:?} is not part of session {session}"
                        ))
                    })?;
                pools.entry(position).or_default().push(id.clone());
            }
            let shots_base = derive_seed(named_seed(self.cfg.master_seed, SEED_STREAM_SHOTS), session as u64);
            for (position, class) in plan.classes.iter().enumerate() {
                let pool = pools.get(&position).ok_or_else(|| {
                    Error::Data(format!(
                        "class {class:?} has no training samples in session {session}"
                    ))
                })?;
                let chosen =
                    sample_shots(pool, self.cfg.shots, derive_seed(shots_base, position as u64))?;
                roster.extend(chosen.into_iter().map(|id| (id, class.clone())));
            }
        }
        for (class, id) in self.memory.samples() {
            roster.push((id, class));
        }
        Ok(roster)
    }

    /// Runs one session: introduce prototypes, train the heads, remember
    /// exemplars, evaluate on everything seen so far.
    ///
    /// Sessions must run strictly in order; the optimizer restarts fresh
    /// each session so a short incremental session is not steered by moment
    /// estimates accumulated over the much larger base task.
    pub fn run_session(&mut self, session: usize) -> Result<SessionOutcome> {
        if self.restored {
            return Err(Error::Protocol(
                "a learner restored from a checkpoint is evaluation-only".to_string(),
            ));
        }
        if session != self.next_session {
            return Err(Error::Protocol(format!(
                "session {session} out of order; expected {}",
                self.next_session
            )));
        }
        let plan = self.schedule.plan(session)?.clone();

        self.prototypes.extend_with_text(&plan.classes)?;
        self.proto_rows = (0..self.prototypes.len())
            .map(|j| self.prototypes.rows.row(j).to_owned())
            .collect();

        let roster = self.session_roster(session)?;
        let aug_base = derive_seed(named_seed(self.cfg.master_seed, SEED_STREAM_AUG), session as u64);
        let prepared: Vec<PreparedSample> = roster
            .iter()
            .enumerate()
            .map(|(position, (id, class))| {
                let aug_seed = self
                    .cfg
                    .cl_enabled
                    .then(|| derive_seed(aug_base, position as u64));
                self.prepare_sample(id, class, aug_seed)
            })
            .collect::<Result<_>>()?;

        if session == 1 && self.cfg.rfe_enabled {
            self.basis = Some(self.fit_base_basis(&prepared)?);
        }

        self.opt = OptimizerState::new(self.params.flat_len());
        let settings = LossSettings::from(&self.cfg);
        let epochs = if session == 1 {
            self.cfg.base_epochs
        } else {
            self.cfg.inc_epochs
        };
        let shuffle_base =
            derive_seed(named_seed(self.cfg.master_seed, SEED_STREAM_SHUFFLE), session as u64);

        let mut epoch_losses = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..prepared.len()).collect();
            SplitMix64::new(derive_seed(shuffle_base, epoch as u64)).shuffle(&mut order);

            let mut loss_sum = 0.0;
            for batch in order.chunks(self.cfg.batch_size) {
                let mut grads: Option<GradientBundle> = None;
                for &index in batch {
                    let sample = &prepared[index];
                    let inputs = SampleInputs {
                        f2d: sample.f2d.clone(),
                        f3d: sample.f3d.clone(),
                        aug: sample.aug.clone(),
                        class_index: sample.class_index,
                    };
                    let (loss, bundle) = sample_loss_and_grads(
                        &inputs,
                        &self.params,
                        &self.proto_rows,
                        self.basis.as_ref(),
                        &settings,
                    )?;
                    loss_sum += loss;
                    match &mut grads {
                        None => grads = Some(bundle),
                        Some(acc) => acc.accumulate(&bundle, 1.0),
                    }
                }
                let mut grads = grads.expect("chunks yields non-empty batches");
                grads.scale(1.0 / batch.len() as f64);
                adamw_step(
                    &mut self.params,
                    &grads,
                    &mut self.opt,
                    self.cfg.lr,
                    self.cfg.weight_decay,
                )?;
            }
            epoch_losses.push(loss_sum / prepared.len() as f64);
        }

        let correct = prepared
            .iter()
            .map(|s| self.classify(&s.f2d, s.f3d.as_ref()))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .zip(prepared.iter())
            .filter(|(pred, s)| *pred == s.class_index)
            .count();
        let train_accuracy = correct as f64 / prepared.len() as f64;

        if self.cfg.memory_per_class > 0 {
            let memory_base =
                derive_seed(named_seed(self.cfg.master_seed, SEED_STREAM_MEMORY), session as u64);
            for (position, class) in plan.classes.iter().enumerate() {
                let pool: Vec<String> = prepared
                    .iter()
                    .filter(|s| s.class_name == *class)
                    .map(|s| s.sample_id.clone())
                    .collect();
                self.memory.remember(
                    class,
                    &pool,
                    self.cfg.memory_per_class,
                    derive_seed(memory_base, position as u64),
                )?;
            }
        }

        let predictions = self.evaluate(session)?;
        self.next_session += 1;
        Ok(SessionOutcome {
            session,
            epoch_losses,
            train_accuracy,
            predictions,
        })
    }

    /// Basis fit on the unaugmented depth features of the base training
    /// samples, stacked view-row by view-row.
    fn fit_base_basis(&self, prepared: &[PreparedSample]) -> Result<PrincipalBasis> {
        let c = self.cfg.feature_dim;
        let mut rows = ndarray::Array2::zeros((0, c));
        let mut keys = Vec::new();
        for sample in prepared {
            for (v, row) in sample.f2d.rows.outer_iter().enumerate() {
                rows.push_row(row)
                    .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
                keys.push(format!("{}#view{v}", sample.sample_id));
            }
        }
        let stacked = EmbeddingMatrix::new(rows, keys)?;
        fit_basis(&stacked, self.cfg.energy_fraction)
    }

    /// Evaluates on the union of test splits of sessions 1..=b.
    fn evaluate(&mut self, session: usize) -> Result<PredictionLog> {
        let mut rows = Vec::new();
        for past in 1..=session {
            let plan = self.schedule.plan(past)?.clone();
            for id in &plan.test {
                let class = self.source.class_of(id)?;
                let intro = self.schedule.intro_session(&class).ok_or_else(|| {
                    Error::Protocol(format!(
                        "test sample {id:?} belongs to class {class:?}, which the schedule never introduces"
                    ))
                })?;
                if intro > session {
                    return Err(Error::Protocol(format!(
                        "test sample {id:?} of class {class:?} appears before its class (session {intro})"
                    )));
                }
                if !self.eval_cache.contains_key(id) {
                    let cloud = normalize_unit_sphere(&self.source.load(id)?)?;
                    let features = self.prepare_features(&cloud)?;
                    self.eval_cache.insert(id.clone(), features);
                }
                let (f2d, f3d) = &self.eval_cache[id];
                let pred = self.classify(f2d, f3d.as_ref())?;
                rows.push(PredictionRow {
                    session,
                    sample_id: id.clone(),
                    true_label: class,
                    pred_label: self.prototypes.class_names[pred].clone(),
                    intro_session: intro,
                });
            }
        }
        PredictionLog::new(rows)
    }

    /// Replays the evaluation of session `through` with restored head
    /// parameters — rescoring a checkpoint without retraining.
    ///
    /// Prototypes for sessions 1..=`through` are re-derived from the
    /// schedule, and with scoring in the principal subspace enabled the
    /// base-session basis is either taken from `basis` or refit from the
    /// base training split; both paths are deterministic, so the rows equal
    /// the ones the original session produced. The learner must be fresh —
    /// restoring on top of trained state would silently mix two runs — and
    /// stays evaluation-only afterwards.
    pub fn evaluate_restored(
        &mut self,
        params: HeadsParams,
        basis: Option<PrincipalBasis>,
        through: usize,
    ) -> Result<PredictionLog> {
        if self.next_session != 1 || self.restored {
            return Err(Error::Protocol(
                "restore requires a fresh learner".to_string(),
            ));
        }
        if through < 1 || through > self.schedule.n_sessions() {
            return Err(Error::Protocol(format!(
                "session {through} outside the schedule (1..={})",
                self.schedule.n_sessions()
            )));
        }
        if params.flat_len() != self.params.flat_len() {
            return Err(Error::ShapeMismatch(format!(
                "restored parameters have {} values but the config calls for {}",
                params.flat_len(),
                self.params.flat_len()
            )));
        }
        for past in 1..=through {
            let classes = self.schedule.plan(past)?.classes.clone();
            self.prototypes.extend_with_text(&classes)?;
        }
        self.proto_rows = (0..self.prototypes.len())
            .map(|j| self.prototypes.rows.row(j).to_owned())
            .collect();
        self.params = params;
        if self.cfg.rfe_enabled {
            self.basis = match basis {
                Some(b) => {
                    if b.c() != self.cfg.feature_dim {
                        return Err(Error::ShapeMismatch(format!(
                            "basis dimension {} but features have dimension {}",
                            b.c(),
                            self.cfg.feature_dim
                        )));
                    }
                    Some(b)
                }
                None => {
                    let roster = self.session_roster(1)?;
                    let prepared = roster
                        .iter()
                        .map(|(id, class)| self.prepare_sample(id, class, None))
                        .collect::<Result<Vec<_>>>()?;
                    Some(self.fit_base_basis(&prepared)?)
                }
            };
        }
        self.restored = true;
        self.evaluate(through)
    }

    /// Runs every remaining session in order.
    pub fn run_all(&mut self) -> Result<ExperimentResult> {
        let mut outcomes = Vec::new();
        for session in self.next_session..=self.schedule.n_sessions() {
            outcomes.push(self.run_session(session)?);
        }
        let mut rows = Vec::new();
        for outcome in &outcomes {
            rows.extend(outcome.predictions.rows.iter().cloned());
        }
        Ok(ExperimentResult {
            log: PredictionLog::new(rows)?,
            outcomes,
            memory: self.memory.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::{build_schedule, synthetic_manifest, AliasMap};
    use crate::encoders::encode_text_toy;
    use ndarray::Array2;

    // --- config ---

    #[test]
    fn default_config_is_valid_and_survives_partial_json() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.lr, 1e-3);
        assert_eq!(cfg.weight_decay, 1e-4);
        assert_eq!(cfg.tau, 0.1);
        assert_eq!(cfg.alpha, 1.0);
        assert_eq!(cfg.base_epochs, 10);
        assert_eq!(cfg.inc_epochs, 20);
        assert_eq!(cfg.shots, 5);
        assert_eq!(cfg.memory_per_class, 1);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.n_aug, 2);

        let partial: RunConfig = serde_json::from_str(r#"{"shots": 3, "rfe_enabled": false}"#)
            .unwrap();
        assert_eq!(partial.shots, 3);
        assert!(!partial.rfe_enabled);
        assert_eq!(partial.lr, 1e-3);

        let unknown: std::result::Result<RunConfig, _> =
            serde_json::from_str(r#"{"learning_rate": 0.1}"#);
        assert!(unknown.is_err());
    }

    #[test]
    fn config_rejects_out_of_range_values() {
        for mutate in [
            (|c: &mut RunConfig| c.lr = 0.0) as fn(&mut RunConfig),
            |c| c.tau = -1.0,
            |c| c.weight_decay = -0.5,
            |c| c.base_epochs = 0,
            |c| c.shots = 0,
            |c| c.batch_size = 0,
            |c| c.n_views = 0,
            |c| c.n_views = 27,
            |c| c.energy_fraction = 0.0,
            |c| c.energy_fraction = 1.5,
        ] {
            let mut cfg = RunConfig::default();
            mutate(&mut cfg);
            assert!(cfg.validate().is_err());
        }
    }

    // --- losses ---

    #[test]
    fn ce_loss_hand_values() {
        let probs = ndarray::arr1(&[0.25, 0.5, 0.25]);
        assert!((ce_loss(&probs, 1).unwrap() - 0.5f64.ln().abs()).abs() < 1e-15);
        assert!((ce_loss(&probs, 0).unwrap() - 0.25f64.ln().abs()).abs() < 1e-15);
        assert!(ce_loss(&probs, 3).is_err());
    }

    #[test]
    fn ce_loss_clamps_zero_probability_and_counts_it() {
        let before = ce_clamp_events();
        let probs = ndarray::arr1(&[1.0, 0.0]);
        let loss = ce_loss(&probs, 1).unwrap();
        assert!((loss - (-CE_PROB_FLOOR.ln())).abs() < 1e-9);
        assert!(ce_clamp_events() >= before + 1);
    }

    #[test]
    fn infonce_hand_value_is_softplus_of_margin() {
        // s⁺=1, s⁻=[0], τ=0.1: loss = ln(1 + e^{-10}) = softplus(-10).
        let eval = infonce_from_sims(1.0, &[0.0], 0.1).unwrap();
        let expected = (1.0 + (-10.0f64).exp()).ln();
        assert!((eval.loss - expected).abs() < 1e-15);

        // All similarities equal: the positive is one of K+1 equal options.
        let eval = infonce_from_sims(0.3, &[0.3, 0.3, 0.3], 0.5).unwrap();
        assert!((eval.loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infonce_rejects_bad_inputs() {
        assert!(infonce_from_sims(1.0, &[0.0], 0.0).is_err());
        assert!(infonce_from_sims(1.0, &[], 0.1).is_err());
    }

    #[test]
    fn infonce_similarity_gradients_match_finite_differences() {
        let tau = 0.37;
        let pos = 0.6;
        let negs = [0.1, -0.4, 0.55];
        let eval = infonce_from_sims(pos, &negs, tau).unwrap();
        let h = 1e-6;

        let fd_pos = (infonce_from_sims(pos + h, &negs, tau).unwrap().loss
            - infonce_from_sims(pos - h, &negs, tau).unwrap().loss)
            / (2.0 * h);
        assert!((eval.d_sim_pos - fd_pos).abs() < 1e-8);

        for i in 0..negs.len() {
            let mut plus = negs;
            plus[i] += h;
            let mut minus = negs;
            minus[i] -= h;
            let fd = (infonce_from_sims(pos, &plus, tau).unwrap().loss
                - infonce_from_sims(pos, &minus, tau).unwrap().loss)
                / (2.0 * h);
            assert!((eval.d_sim_neg[i] - fd).abs() < 1e-8);
        }

        // Shift invariance: adding a constant to every similarity leaves the
        // loss unchanged, so the gradients must sum to zero.
        let total = eval.d_sim_pos + eval.d_sim_neg.iter().sum::<f64>();
        assert!(total.abs() < 1e-12);
    }

    #[test]
    fn infonce_loss_matches_cosine_composition() {
        let f = ndarray::arr1(&[1.0, 0.0, 1.0]);
        let pos = ndarray::arr1(&[1.0, 0.0, 0.0]);
        let negs = vec![ndarray::arr1(&[0.0, 1.0, 0.0])];
        let sim_pos = cosine_logit(&f, &pos).unwrap();
        let sim_neg = cosine_logit(&f, &negs[0]).unwrap();
        let via_sims = infonce_from_sims(sim_pos, &[sim_neg], 0.2).unwrap().loss;
        let direct = infonce_loss(&f, &pos, &negs, 0.2).unwrap();
        assert!((via_sims - direct).abs() < 1e-15);
    }

    #[test]
    fn total_loss_composes_linearly() {
        assert_eq!(total_loss(1.5, 0.25, 2.0), 2.0);
        assert_eq!(total_loss(1.5, 0.25, 0.0), 1.5);
    }

    // --- optimizer ---

    fn tiny_dims() -> HeadsDims {
        HeadsDims {
            n_views: 2,
            c: 3,
            h: 2,
            d3: 4,
            h3: 2,
        }
    }

    fn bundle_like(params: &HeadsParams) -> GradientBundle {
        let zeros = params.zeros_like();
        let c = params.merger.b1.len();
        GradientBundle {
            merger: zeros.merger,
            adapter: zeros.adapter,
            d_fd: Array1::zeros(c),
            d_fp: Array1::zeros(c),
        }
    }

    /// Independent scalar replay of the update rule.
    fn reference_adamw(
        p: f64,
        g: f64,
        m: f64,
        v: f64,
        step: u64,
        lr: f64,
        wd: f64,
    ) -> (f64, f64, f64) {
        let p = p * (1.0 - lr * wd);
        let m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g;
        let v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m / (1.0 - ADAM_BETA1.powi(step as i32));
        let v_hat = v / (1.0 - ADAM_BETA2.powi(step as i32));
        (p - lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON), m, v)
    }

    #[test]
    fn adamw_matches_scalar_reference_over_three_steps() {
        let dims = tiny_dims();
        let params0 = HeadsParams::init(&dims, 77);
        let mut params = params0.clone();
        let mut opt = OptimizerState::new(params.flat_len());
        let (lr, wd) = (0.01, 0.1);

        // Deterministic non-trivial gradients.
        let mut grads = bundle_like(&params);
        let mut rng = SplitMix64::new(5);
        let mut gref = Vec::new();
        {
            let mut slices = vec![
                grads.merger.w2.as_slice_mut().unwrap(),
                grads.merger.b2.as_slice_mut().unwrap(),
                grads.merger.w1.as_slice_mut().unwrap(),
                grads.merger.b1.as_slice_mut().unwrap(),
                grads.adapter.w1p.as_slice_mut().unwrap(),
                grads.adapter.b1p.as_slice_mut().unwrap(),
                grads.adapter.w2p.as_slice_mut().unwrap(),
                grads.adapter.b2p.as_slice_mut().unwrap(),
            ];
            for s in &mut slices {
                for x in s.iter_mut() {
                    *x = rng.next_gauss();
                    gref.push(*x);
                }
            }
        }

        // Flat reference state walked in the same fixed tensor order.
        let mut pref: Vec<f64> = params0
            .tensor_slices()
            .into_iter()
            .flat_map(|s| s.iter().cloned().collect::<Vec<_>>())
            .collect();
        let mut mref = vec![0.0; pref.len()];
        let mut vref = vec![0.0; pref.len()];

        for step in 1..=3u64 {
            adamw_step(&mut params, &grads, &mut opt, lr, wd).unwrap();
            for i in 0..pref.len() {
                let (p, m, v) =
                    reference_adamw(pref[i], gref[i], mref[i], vref[i], step, lr, wd);
                pref[i] = p;
                mref[i] = m;
                vref[i] = v;
            }
            let flat: Vec<f64> = params
                .tensor_slices()
                .into_iter()
                .flat_map(|s| s.iter().cloned().collect::<Vec<_>>())
                .collect();
            for i in 0..pref.len() {
                assert!(
                    (flat[i] - pref[i]).abs() <= 1e-12,
                    "step {step}, parameter {i}: {} vs {}",
                    flat[i],
                    pref[i]
                );
                assert!((opt.m[i] - mref[i]).abs() <= 1e-12);
                assert!((opt.v[i] - vref[i]).abs() <= 1e-12);
            }
        }
        assert_eq!(opt.step, 3);
    }

    #[test]
    fn adamw_zero_gradient_without_decay_is_identity() {
        let params0 = HeadsParams::init(&tiny_dims(), 3);
        let mut params = params0.clone();
        let mut opt = OptimizerState::new(params.flat_len());
        let grads = bundle_like(&params);
        adamw_step(&mut params, &grads, &mut opt, 0.01, 0.0).unwrap();
        assert_eq!(params.fingerprint(), params0.fingerprint());
    }

    #[test]
    fn adamw_zero_gradient_with_decay_only_shrinks() {
        let params0 = HeadsParams::init(&tiny_dims(), 3);
        let mut params = params0.clone();
        let mut opt = OptimizerState::new(params.flat_len());
        let grads = bundle_like(&params);
        let (lr, wd) = (0.01, 0.5);
        adamw_step(&mut params, &grads, &mut opt, lr, wd).unwrap();
        let factor = 1.0 - lr * wd;
        for (after, before) in params
            .tensor_slices()
            .iter()
            .flat_map(|s| s.iter())
            .zip(params0.tensor_slices().iter().flat_map(|s| s.iter()))
        {
            assert!((after - before * factor).abs() < 1e-15);
        }
    }

    #[test]
    fn adamw_rejects_mismatched_state() {
        let mut params = HeadsParams::init(&tiny_dims(), 3);
        let grads = bundle_like(&params);
        let mut opt = OptimizerState::new(params.flat_len() + 1);
        assert!(adamw_step(&mut params, &grads, &mut opt, 0.01, 0.0).is_err());
    }

    // --- checkpoints ---

    #[test]
    fn checkpoint_round_trip_with_and_without_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let params = HeadsParams::init(&tiny_dims(), 11);
        let mut opt = OptimizerState::new(params.flat_len());
        opt.step = 42;
        let mut rng = SplitMix64::new(1);
        for x in opt.m.iter_mut().chain(opt.v.iter_mut()) {
            *x = rng.next_gauss();
        }

        let with = dir.path().join("with.hds1");
        save_checkpoint(&params, Some(&opt), &with).unwrap();
        let (loaded, loaded_opt) = load_checkpoint(&with).unwrap();
        assert_eq!(loaded.fingerprint(), params.fingerprint());
        assert_eq!(loaded_opt.unwrap(), opt);

        let without = dir.path().join("without.hds1");
        save_checkpoint(&params, None, &without).unwrap();
        let (_, none_opt) = load_checkpoint(&without).unwrap();
        assert!(none_opt.is_none());
    }

    #[test]
    fn checkpoint_rejects_truncated_optimizer_block() {
        let dir = tempfile::tempdir().unwrap();
        let params = HeadsParams::init(&tiny_dims(), 11);
        let opt = OptimizerState::new(params.flat_len());
        let path = dir.path().join("trunc.hds1");
        save_checkpoint(&params, Some(&opt), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            Error::Format(_)
        ));
    }

    // --- sampling and memory ---

    fn pool(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("id-{i:02}")).collect()
    }

    #[test]
    fn sample_shots_is_deterministic_without_duplicates() {
        let pool = pool(10);
        let a = sample_shots(&pool, 4, 99).unwrap();
        let b = sample_shots(&pool, 4, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        let distinct: std::collections::BTreeSet<&String> = a.iter().collect();
        assert_eq!(distinct.len(), 4);
        for id in &a {
            assert!(pool.contains(id));
        }
        let c = sample_shots(&pool, 4, 100).unwrap();
        assert_ne!(a, c, "different seeds should give different draws");
    }

    #[test]
    fn sample_shots_takes_all_on_shortage_and_rejects_empty() {
        let pool = pool(3);
        assert_eq!(sample_shots(&pool, 5, 1).unwrap(), pool);
        assert!(matches!(
            sample_shots(&[], 5, 1).unwrap_err(),
            Error::Data(_)
        ));
        assert!(matches!(
            sample_shots(&pool, 0, 1).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn memory_caps_and_rejects_known_classes() {
        let mut memory = ExemplarMemory::new();
        memory.remember("sphere", &pool(8), 2, 5).unwrap();
        memory.remember("cube", &pool(1), 3, 6).unwrap();

        assert_eq!(memory.n_classes(), 2);
        assert_eq!(memory.class_ids("sphere").unwrap().len(), 2);
        assert_eq!(memory.class_ids("cube").unwrap().len(), 1);
        assert_eq!(memory.n_samples(), 3);
        assert!(memory.contains_class("sphere"));
        assert!(!memory.contains_class("torus"));

        // BTreeMap ordering makes the roster deterministic.
        let classes: Vec<String> = memory.samples().into_iter().map(|(c, _)| c).collect();
        assert_eq!(classes, vec!["cube".to_string(), "sphere".to_string(), "sphere".to_string()]);

        assert!(matches!(
            memory.remember("sphere", &pool(8), 2, 7).unwrap_err(),
            Error::Protocol(_)
        ));
    }

    // --- sources ---

    #[test]
    fn synthetic_source_is_deterministic_per_id() {
        let source = SyntheticSource::new(123, 64);
        assert_eq!(source.class_of("sphere/train/003").unwrap(), "sphere");
        assert!(source.class_of("no-slashes").is_err());
        assert!(source.class_of("a/b/c/d").is_err());

        let a = source.load("sphere/train/003").unwrap();
        let b = source.load("sphere/train/003").unwrap();
        assert_eq!(a.points, b.points);
        assert_eq!(a.sample_id, "sphere/train/003");
        assert_eq!(a.class_name, "sphere");

        let other = source.load("sphere/train/004").unwrap();
        assert_ne!(a.points, other.points);

        assert!(source.load("not-a-shape/train/000").is_err());
    }

    #[test]
    fn file_source_resolves_classes_and_paths() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = crate::geometry::gen_synthetic("sphere", 32, 9).unwrap();
        crate::geometry::save_cloud(&cloud, &dir.path().join("s0.pcb1")).unwrap();

        let manifest = DatasetManifest::new(
            "disk",
            vec![crate::benchmark::ClassEntry {
                class_name: "orb".into(),
                samples: vec![crate::benchmark::SampleRef {
                    sample_id: "orb/test/000".into(),
                    split: crate::benchmark::Split::Test,
                    path: "s0.pcb1".into(),
                }],
            }],
        )
        .unwrap();
        let source = FileSource::new(dir.path(), &[&manifest]).unwrap();
        assert_eq!(source.len(), 1);
        assert_eq!(source.class_of("orb/test/000").unwrap(), "orb");
        let loaded = source.load("orb/test/000").unwrap();
        assert_eq!(loaded.class_name, "orb");
        assert_eq!(loaded.points.len(), 32);
        assert!(source.load("missing").is_err());
    }

    // --- per-sample loss: finite differences ---

    fn random_matrix(rows: usize, cols: usize, rng: &mut SplitMix64) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.next_gauss())
    }

    fn random_inputs(
        dims: &HeadsDims,
        n_aug: usize,
        with_points: bool,
        rng: &mut SplitMix64,
    ) -> SampleInputs {
        let f2d = EmbeddingMatrix::new(
            random_matrix(dims.n_views, dims.c, rng),
            (0..dims.n_views).map(|v| format!("view-{v}")).collect(),
        )
        .unwrap();
        let f3d = with_points
            .then(|| Array1::from_shape_fn(dims.d3, |_| rng.next_gauss().abs()));
        let aug = (0..n_aug)
            .map(|a| {
                let m = EmbeddingMatrix::new(
                    random_matrix(dims.n_views, dims.c, rng),
                    (0..dims.n_views).map(|v| format!("aug{a}-{v}")).collect(),
                )
                .unwrap();
                let p = with_points
                    .then(|| Array1::from_shape_fn(dims.d3, |_| rng.next_gauss().abs()));
                (m, p)
            })
            .collect();
        SampleInputs {
            f2d,
            f3d,
            aug,
            class_index: 1,
        }
    }

    fn random_prototypes(k: usize, c: usize, rng: &mut SplitMix64) -> Vec<FeatureVector> {
        (0..k)
            .map(|_| {
                let v = Array1::from_shape_fn(c, |_| rng.next_gauss());
                let n = v.dot(&v).sqrt();
                v / n
            })
            .collect()
    }

    /// Smallest distance to a max/ReLU kink across all forward passes; seeds
    /// are screened so finite differences never straddle one.
    fn kink_margin(inputs: &SampleInputs, params: &HeadsParams) -> f64 {
        let mut margin = f64::INFINITY;
        let mut probe = |f2d: &EmbeddingMatrix, f3d: Option<&FeatureVector>| {
            let x = Array1::from_iter(f2d.rows.iter().cloned());
            let z2 = params.merger.w2.t().dot(&x) + &params.merger.b2;
            for z in z2.iter() {
                margin = margin.min(z.abs());
            }
            let (fg, state) = heads_forward(f2d, f3d, params).unwrap();
            let _ = fg;
            if let (Some(fp), Some(f3d)) = (state.fp(), f3d) {
                let z1p = params.adapter.w1p.t().dot(f3d) + &params.adapter.b1p;
                for z in z1p.iter() {
                    margin = margin.min(z.abs());
                }
                for (a, b) in state.fd().iter().zip(fp.iter()) {
                    margin = margin.min((a - b).abs());
                }
            }
        };
        probe(&inputs.f2d, inputs.f3d.as_ref());
        for (m, p) in &inputs.aug {
            probe(m, p.as_ref());
        }
        margin
    }

    #[test]
    fn sample_loss_gradients_match_finite_differences() {
        let dims = HeadsDims {
            n_views: 2,
            c: 6,
            h: 5,
            d3: 7,
            h3: 4,
        };
        // (seed, with_points, n_aug, rfe, target) — seeds chosen so every
        // forward stays at least 1e-3 from the nearest activation kink.
        let cases = [
            (901u64, true, 2usize, true, RfeTarget::Global),
            (902, true, 1, false, RfeTarget::Global),
            (905, false, 2, true, RfeTarget::Depth),
            (907, true, 0, true, RfeTarget::Global),
        ];
        for (seed, with_points, n_aug, rfe, target) in cases {
            let mut rng = SplitMix64::new(seed);
            let params = HeadsParams::init(&dims, rng.next_u64());
            let inputs = random_inputs(&dims, n_aug, with_points, &mut rng);
            let prototypes = random_prototypes(4, dims.c, &mut rng);
            let basis = {
                let feats = EmbeddingMatrix::new(
                    random_matrix(12, dims.c, &mut rng),
                    (0..12).map(|i| format!("r{i}")).collect(),
                )
                .unwrap();
                fit_basis(&feats, 0.9).unwrap()
            };
            let settings = LossSettings {
                tau: 0.3,
                alpha: 0.7,
                rfe_enabled: rfe,
                rfe_target: target,
            };

            let margin = kink_margin(&inputs, &params);
            assert!(
                margin > 1e-3,
                "seed {seed}: margin {margin} too close to a kink; reseed the case"
            );

            let (_, bundle) = sample_loss_and_grads(
                &inputs,
                &params,
                &prototypes,
                Some(&basis),
                &settings,
            )
            .unwrap();

            let h = 1e-5;
            let analytic = bundle.tensor_slices();
            for t in 0..8 {
                let len = analytic[t].len();
                for i in 0..len {
                    let mut plus = params.clone();
                    plus.tensor_slices_mut()[t][i] += h;
                    let (lp, _) = sample_loss_and_grads(
                        &inputs,
                        &plus,
                        &prototypes,
                        Some(&basis),
                        &settings,
                    )
                    .unwrap();
                    let mut minus = params.clone();
                    minus.tensor_slices_mut()[t][i] -= h;
                    let (lm, _) = sample_loss_and_grads(
                        &inputs,
                        &minus,
                        &prototypes,
                        Some(&basis),
                        &settings,
                    )
                    .unwrap();
                    let fd = (lp - lm) / (2.0 * h);
                    let got = analytic[t][i];
                    let scale = fd.abs().max(got.abs()).max(1e-6);
                    assert!(
                        (fd - got).abs() / scale <= 1e-4,
                        "seed {seed}, tensor {t}, entry {i}: analytic {got} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn loss_requires_basis_when_renormalized_scoring_is_on() {
        let dims = tiny_dims();
        let mut rng = SplitMix64::new(8);
        let params = HeadsParams::init(&dims, 8);
        let inputs = random_inputs(&dims, 0, false, &mut rng);
        let prototypes = random_prototypes(3, dims.c, &mut rng);
        let settings = LossSettings {
            tau: 0.1,
            alpha: 1.0,
            rfe_enabled: true,
            rfe_target: RfeTarget::Global,
        };
        assert!(matches!(
            sample_loss_and_grads(&inputs, &params, &prototypes, None, &settings).unwrap_err(),
            Error::Config(_)
        ));
    }

    // --- session loop ---

    fn tiny_run_config(master_seed: u64) -> RunConfig {
        RunConfig {
            base_epochs: 2,
            inc_epochs: 2,
            shots: 2,
            batch_size: 8,
            n_aug: 1,
            n_views: 3,
            feature_dim: 12,
            point_feature_dim: 16,
            merger_hidden: 10,
            adapter_hidden: 8,
            resolution: 16,
            energy_fraction: 0.9,
            master_seed,
            ..RunConfig::default()
        }
    }

    fn tiny_schedule() -> SessionSchedule {
        let base = synthetic_manifest("base", &["sphere", "cube", "cylinder"], 4, 2).unwrap();
        let inc = synthetic_manifest("inc", &["torus", "cone"], 4, 2).unwrap();
        build_schedule(&base, &inc, 2, &AliasMap::default()).unwrap()
    }

    fn tiny_learner(master_seed: u64) -> Learner<SyntheticSource> {
        Learner::new(
            tiny_run_config(master_seed),
            tiny_schedule(),
            SyntheticSource::new(master_seed ^ 0xDA7A, 64),
        )
        .unwrap()
    }

    #[test]
    fn sessions_must_run_in_order() {
        let mut learner = tiny_learner(21);
        assert!(matches!(
            learner.run_session(2).unwrap_err(),
            Error::Protocol(_)
        ));
        learner.run_session(1).unwrap();
        assert!(matches!(
            learner.run_session(1).unwrap_err(),
            Error::Protocol(_)
        ));
        assert_eq!(learner.next_session(), 2);
    }

    #[test]
    fn full_run_covers_schedule_and_memory_respects_cap() {
        let mut learner = tiny_learner(22);
        let result = learner.run_all().unwrap();

        assert_eq!(result.outcomes.len(), 2);
        // Session 1 evaluates 3 classes × 2 test rows; session 2 adds 2 more
        // classes.
        assert_eq!(result.outcomes[0].predictions.rows.len(), 6);
        assert_eq!(result.outcomes[1].predictions.rows.len(), 10);
        assert_eq!(result.log.rows.len(), 16);
        assert_eq!(result.outcomes[0].epoch_losses.len(), 2);
        for outcome in &result.outcomes {
            for loss in &outcome.epoch_losses {
                assert!(loss.is_finite() && *loss >= 0.0);
            }
            assert!((0.0..=1.0).contains(&outcome.train_accuracy));
        }

        // Every class remembered once, within the cap, drawn from its own
        // training ids.
        assert_eq!(result.memory.n_classes(), 5);
        for class in ["sphere", "cube", "cylinder", "torus", "cone"] {
            let ids = result.memory.class_ids(class).unwrap();
            assert_eq!(ids.len(), 1);
            assert!(ids[0].starts_with(&format!("{class}/train/")));
        }

        // The log feeds the metrics pipeline end to end.
        let report = crate::metrics::compile_report(
            &result.log,
            learner.schedule(),
            crate::metrics::ReportOptions::default(),
            serde_json::Value::Null,
        )
        .unwrap();
        assert_eq!(report.sessions.len(), 2);
    }

    #[test]
    fn rerun_with_same_seed_is_bit_identical() {
        let run = |seed| {
            let mut learner = tiny_learner(seed);
            let result = learner.run_all().unwrap();
            let mut csv = Vec::new();
            result.log.write_csv(&mut csv).unwrap();
            (csv, learner.params().fingerprint())
        };
        let (csv_a, fp_a) = run(33);
        let (csv_b, fp_b) = run(33);
        assert_eq!(csv_a, csv_b);
        assert_eq!(fp_a, fp_b);

        let (csv_c, fp_c) = run(34);
        assert!(csv_a != csv_c || fp_a != fp_c);
    }

    #[test]
    fn training_reduces_loss_on_separable_classes() {
        let mut cfg = tiny_run_config(44);
        cfg.base_epochs = 6;
        let base = synthetic_manifest("base", &["sphere", "cube"], 4, 1).unwrap();
        let inc = synthetic_manifest("inc", &["cone"], 4, 1).unwrap();
        let schedule = build_schedule(&base, &inc, 1, &AliasMap::default()).unwrap();
        let mut learner =
            Learner::new(cfg, schedule, SyntheticSource::new(4040, 64)).unwrap();
        let outcome = learner.run_session(1).unwrap();
        let first = outcome.epoch_losses[0];
        let last = *outcome.epoch_losses.last().unwrap();
        assert!(
            last < first,
            "loss should fall over training: {first} -> {last}"
        );
    }

    #[test]
    fn evaluation_rejects_classes_outside_the_schedule() {
        let cfg = RunConfig {
            cl_enabled: false,
            snc_enabled: false,
            rfe_enabled: false,
            ..tiny_run_config(55)
        };
        let schedule = SessionSchedule {
            sessions: vec![crate::benchmark::SessionPlan {
                index: 1,
                classes: vec!["sphere".into(), "cube".into()],
                train: vec!["sphere/train/000".into(), "cube/train/000".into()],
                // A valid shape, but never introduced by the schedule.
                test: vec!["torus/test/000".into()],
            }],
        };
        let mut learner =
            Learner::new(cfg, schedule, SyntheticSource::new(100, 48)).unwrap();
        let err = learner.run_session(1).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{err}");
    }

    #[test]
    fn depth_only_and_fused_runs_differ_through_point_branch() {
        // Guard: flag toggles actually change the computation.
        let run = |snc: bool| {
            let cfg = RunConfig {
                snc_enabled: snc,
                ..tiny_run_config(66)
            };
            let mut learner =
                Learner::new(cfg, tiny_schedule(), SyntheticSource::new(606, 64)).unwrap();
            learner.run_all().unwrap();
            learner.params().fingerprint()
        };
        assert_ne!(run(true), run(false));
    }

    #[test]
    fn full_energy_basis_reproduces_cosine_predictions() {
        // With every direction kept, renormalized scoring equals cosine
        // scoring, so the two paths must produce identical prediction logs.
        let run = |rfe: bool| {
            let cfg = RunConfig {
                rfe_enabled: rfe,
                energy_fraction: 1.0,
                ..tiny_run_config(77)
            };
            let mut learner =
                Learner::new(cfg, tiny_schedule(), SyntheticSource::new(707, 64)).unwrap();
            let result = learner.run_all().unwrap();
            let mut csv = Vec::new();
            result.log.write_csv(&mut csv).unwrap();
            csv
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn prototype_bank_grows_in_introduction_order() {
        let mut learner = tiny_learner(88);
        learner.run_session(1).unwrap();
        assert_eq!(
            learner.prototypes().class_names,
            vec!["sphere".to_string(), "cube".to_string(), "cylinder".to_string()]
        );
        learner.run_session(2).unwrap();
        assert_eq!(learner.prototypes().class_names.len(), 5);
        // Prototypes are exactly the text embeddings of the class names.
        let expected = encode_text_toy("torus", learner.config().feature_dim).unwrap();
        let got = learner.prototypes().rows.row(3).to_owned();
        assert_eq!(got, expected);
    }

    #[test]
    fn restored_evaluation_reproduces_each_sessions_rows() {
        // Train with per-session checkpoints, then rescore every checkpoint
        // on a fresh learner: the replayed rows must match the originals bit
        // for bit, both when the basis is refit and when it is supplied.
        let dir = tempfile::tempdir().unwrap();
        let ckpt = |session: usize| dir.path().join(format!("session-{session}.ckpt"));
        let mut learner = tiny_learner(33);
        let mut outcomes = Vec::new();
        for session in 1..=2 {
            outcomes.push(learner.run_session(session).unwrap());
            learner.checkpoint(&ckpt(session)).unwrap();
        }
        for outcome in &outcomes {
            let (params, _) = load_checkpoint(&ckpt(outcome.session)).unwrap();
            let mut fresh = tiny_learner(33);
            let log = fresh.evaluate_restored(params, None, outcome.session).unwrap();
            assert_eq!(log.rows, outcome.predictions.rows);
        }
        let (params, _) = load_checkpoint(&ckpt(2)).unwrap();
        let mut fresh = tiny_learner(33);
        let log = fresh
            .evaluate_restored(params, learner.basis().cloned(), 2)
            .unwrap();
        assert_eq!(log.rows, outcomes[1].predictions.rows);
    }

    #[test]
    fn restore_requires_a_fresh_learner_and_locks_out_training() {
        let mut trained = tiny_learner(34);
        trained.run_session(1).unwrap();
        let params = trained.params().clone();
        assert!(matches!(
            trained.evaluate_restored(params.clone(), None, 1).unwrap_err(),
            Error::Protocol(_)
        ));

        let mut fresh = tiny_learner(34);
        assert!(matches!(
            fresh.evaluate_restored(params.clone(), None, 9).unwrap_err(),
            Error::Protocol(_)
        ));
        fresh.evaluate_restored(params, None, 1).unwrap();
        assert!(matches!(
            fresh.run_session(1).unwrap_err(),
            Error::Protocol(_)
        ));
    }

    #[test]
    fn restore_rejects_mismatched_parameters_and_basis() {
        let other_dims = HeadsParams::init(
            &RunConfig::default().heads_dims(),
            named_seed(35, SEED_STREAM_HEADS_INIT),
        );
        let mut learner = tiny_learner(35);
        assert!(matches!(
            learner.evaluate_restored(other_dims, None, 1).unwrap_err(),
            Error::ShapeMismatch(_)
        ));

        // A basis over the wrong feature dimension is caught before scoring.
        let mut rng = SplitMix64::new(99);
        let rows = Array2::from_shape_fn((6, 5), |_| rng.next_gauss());
        let keys = (0..6).map(|i| format!("r{i}")).collect();
        let wrong_basis =
            fit_basis(&EmbeddingMatrix::new(rows, keys).unwrap(), 0.9).unwrap();
        let mut learner = tiny_learner(35);
        let params = learner.params().clone();
        assert!(matches!(
            learner
                .evaluate_restored(params, Some(wrong_basis), 1)
                .unwrap_err(),
            Error::ShapeMismatch(_)
        ));
    }

    #[test]
    fn encode_sample_is_deterministic_and_respects_the_point_branch() {
        let a = tiny_learner(36);
        let b = tiny_learner(36);
        let (f2d_a, f3d_a) = a.encode_sample("sphere/train/000").unwrap();
        let (f2d_b, f3d_b) = b.encode_sample("sphere/train/000").unwrap();
        assert_eq!(f2d_a.rows, f2d_b.rows);
        assert_eq!(f2d_a.row_keys, f2d_b.row_keys);
        assert_eq!(f3d_a, f3d_b);
        assert!(f3d_a.is_some());

        let cfg = RunConfig {
            snc_enabled: false,
            ..tiny_run_config(36)
        };
        let depth_only =
            Learner::new(cfg, tiny_schedule(), SyntheticSource::new(36 ^ 0xDA7A, 64)).unwrap();
        let (_, f3d) = depth_only.encode_sample("sphere/train/000").unwrap();
        assert!(f3d.is_none());
    }
}
