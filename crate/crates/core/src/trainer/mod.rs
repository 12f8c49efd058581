//! Pre-training: configuration, learning-rate schedule, optimizer, the
//! per-step orchestration of every branch, and the epoch loop with metrics
//! and checkpoints.

mod checkpoint;
mod eval;
mod gradcheck;
mod step;

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{fit_codebook, masked_count, EncoderConfig, ModelConfig, PointModel, Tokenizer};
use crate::data::{encoder_input, Triplet, ENCODER_POINTS, RGB_JITTER};
use crate::error::{domain, Error, Result};
use crate::geometry::{normalize_cloud, PointCloud};
use crate::losses::{ChamferVariant, LossWeights, MocoState, TAU_MAX, TAU_MIN};
use crate::nn::{ParamStore, Tensor};
use crate::renderer::RenderConfig;
use crate::rng::{derive_seed, stream, tag};

pub use checkpoint::{checkpoint_load, checkpoint_save, decode_checkpoint, encode_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use eval::{alignment, embed_dataset, embed_object, AlignmentReport, DatasetEmbeddings, ObjectEmbedding, PairAlignment};
pub use gradcheck::{finite_difference_check, finite_difference_check_with, BlockReport, CheckOptions, GradOp, GradReport};
pub use step::pretrain_step;

// ---------------------------------------------------------------------------
// Configuration

/// MoCo momentum, queue length and temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MocoConfig {
    pub momentum: f64,
    pub queue_size: usize,
    pub tau: f64,
}

impl Default for MocoConfig {
    fn default() -> Self {
        Self {
            momentum: 0.999,
            queue_size: 1024,
            tau: 0.07,
        }
    }
}

/// Everything that determines a pre-training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Linear warmup length; `None` means 10% of the run.
    pub warmup_steps: Option<u64>,
    /// Optional cap on the number of optimizer steps.
    pub max_steps: Option<u64>,
    pub seed: u64,
    /// Fraction of groups hidden from the encoder in both auto-encoders.
    pub mask_ratio: f64,
    pub loss_weights: LossWeights,
    pub chamfer: ChamferVariant,
    pub render: RenderConfig,
    /// Side of the square images fed to the RGB and depth encoders.
    pub image_size: usize,
    pub rgb_jitter: f64,
    pub encoder: EncoderConfig,
    pub group_count: usize,
    pub group_size: usize,
    pub codebook_size: usize,
    pub moco: MocoConfig,
}

impl Default for TrainConfig {
    /// The single-machine profile: 4-layer, 192-wide encoder, 32³ grid and
    /// 32×32 images.
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 0.05,
            epochs: 50,
            batch_size: 4,
            warmup_steps: None,
            max_steps: None,
            seed: 0,
            mask_ratio: 0.6,
            loss_weights: LossWeights::default(),
            chamfer: ChamferVariant::L2,
            render: RenderConfig::cube(32),
            image_size: 32,
            rgb_jitter: RGB_JITTER,
            encoder: EncoderConfig::desk(),
            group_count: 64,
            group_size: 32,
            codebook_size: 64,
            moco: MocoConfig::default(),
        }
    }
}

fn bad(field: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        msg: msg.into(),
    }
}

impl TrainConfig {
    /// Full-size profile: 12-layer, 384-wide encoder and 224×224 images.
    pub fn full_scale() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            image_size: 224,
            render: RenderConfig {
                image_width: 224,
                image_height: 224,
                ..RenderConfig::cube(32)
            },
            ..Self::default()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder,
            group_count: self.group_count,
            group_size: self.group_size,
            vocab: self.codebook_size,
            image_size: self.image_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.lr) {
            return Err(bad("lr", "must be finite and non-negative"));
        }
        if !finite_nonneg(self.weight_decay) {
            return Err(bad("weight_decay", "must be finite and non-negative"));
        }
        if self.epochs == 0 {
            return Err(bad("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be positive"));
        }
        if self.max_steps == Some(0) {
            return Err(bad("max_steps", "must be positive when set"));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(bad("mask_ratio", "must lie in (0, 1)"));
        }
        let m = masked_count(self.group_count, self.mask_ratio);
        if m == 0 || m >= self.group_count {
            return Err(bad(
                "mask_ratio",
                format!("must mask at least one and keep at least one of {} groups", self.group_count),
            ));
        }
        let w = self.loss_weights;
        for (name, v) in [("loss_weights.alpha", w.alpha), ("loss_weights.beta", w.beta), ("loss_weights.theta", w.theta)] {
            if !finite_nonneg(v) {
                return Err(bad(name, "must be finite and non-negative"));
            }
        }
        self.render.validate().map_err(|e| bad("render", e.to_string()))?;
        if self.image_size == 0 {
            return Err(bad("image_size", "must be positive"));
        }
        if self.render.image_width != self.image_size || self.render.image_height != self.image_size {
            return Err(bad(
                "render",
                format!("rendered depth views must be {0}x{0} to match image_size", self.image_size),
            ));
        }
        if !(0.0..1.0).contains(&self.rgb_jitter) {
            return Err(bad("rgb_jitter", "must lie in [0, 1)"));
        }
        self.encoder.validate().map_err(|e| bad("encoder", e.to_string()))?;
        if self.group_count < 2 || self.group_count > ENCODER_POINTS {
            return Err(bad("group_count", format!("must lie in [2, {ENCODER_POINTS}]")));
        }
        if self.group_size == 0 || self.group_size > ENCODER_POINTS {
            return Err(bad("group_size", format!("must lie in [1, {ENCODER_POINTS}]")));
        }
        if self.codebook_size < 2 {
            return Err(bad("codebook_size", "must be at least 2"));
        }
        let mc = self.moco;
        if !(0.0..=1.0).contains(&mc.momentum) {
            return Err(bad("moco.momentum", "must lie in [0, 1]"));
        }
        if mc.queue_size == 0 {
            return Err(bad("moco.queue_size", "must be positive"));
        }
        if !(mc.tau > 0.0 && mc.tau.is_finite()) {
            return Err(bad("moco.tau", "must be positive"));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| parse_error(e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| parse_error(&e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a `.json` file as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json_str(&text),
            _ => Self::from_toml_str(&text),
        }
    }
}

/// Maps a deserializer message to a config error naming the offending key.
fn parse_error(msg: &str) -> Error {
    let quoted = msg.split('`').nth(1).filter(|_| msg.contains("field"));
    bad(quoted.unwrap_or("<config>"), msg.trim())
}

// ---------------------------------------------------------------------------
// Schedule

/// Half-cosine decay from `base_lr` at step 0 to zero at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let s = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * s).cos())
}

/// [`cosine_lr`] scaled by a linear ramp over the first `warmup` steps.
pub fn scheduled_lr(step: u64, total_steps: u64, base_lr: f64, warmup: u64) -> f64 {
    let ramp = if step < warmup {
        (step + 1) as f64 / warmup as f64
    } else {
        1.0
    };
    cosine_lr(step, total_steps, base_lr) * ramp
}

/// Optimizer steps of a run over `n` objects.
pub fn total_steps(cfg: &TrainConfig, n: usize) -> u64 {
    let full = cfg.epochs as u64 * steps_per_epoch(cfg, n);
    cfg.max_steps.map_or(full, |m| m.min(full))
}

pub fn steps_per_epoch(cfg: &TrainConfig, n: usize) -> u64 {
    n.div_ceil(cfg.batch_size) as u64
}

pub fn warmup_steps(cfg: &TrainConfig, total: u64) -> u64 {
    cfg.warmup_steps.unwrap_or(total / 10)
}

/// Dataset indices of the batch at `step`: each epoch walks a fresh seeded
/// permutation; the last batch of an epoch may be short.
pub fn batch_indices(cfg: &TrainConfig, n: usize, step: u64) -> Vec<usize> {
    let spe = steps_per_epoch(cfg, n);
    let (epoch, k) = (step / spe, (step % spe) as usize);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(cfg.seed, &[tag::SHUFFLE, epoch]));
    let start = k * cfg.batch_size;
    order[start..(start + cfg.batch_size).min(n)].to_vec()
}

// ---------------------------------------------------------------------------
// Optimizer

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One AdamW update with decoupled weight decay `lr · wd · p` on decaying
/// parameters. `t` is the 1-based step used for bias correction.
/// Parameters without a gradient are left alone; a zero step leaves a value
/// bit-identical.
pub fn adamw_update(
    params: &mut ParamStore,
    grads: &[Option<Tensor>],
    m: &mut [Tensor],
    v: &mut [Tensor],
    t: u64,
    lr: f64,
    weight_decay: f64,
) {
    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let Some(g) = &grads[id.0] else { continue };
        let wd = if params.decays(id) { weight_decay } else { 0.0 };
        let (mi, vi) = (m[id.0].data_mut(), v[id.0].data_mut());
        let p = params.get_mut(id).data_mut();
        for k in 0..p.len() {
            let gk = g.data()[k];
            mi[k] = ADAM_BETA1 * mi[k] + (1.0 - ADAM_BETA1) * gk;
            vi[k] = ADAM_BETA2 * vi[k] + (1.0 - ADAM_BETA2) * gk * gk;
            let mhat = mi[k] / c1;
            let vhat = vi[k] / c2;
            let delta = lr * (mhat / (vhat.sqrt() + ADAM_EPS) + wd * p[k]);
            if delta != 0.0 {
                p[k] -= delta;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// State

/// Complete training state; together with the dataset it determines every
/// later step (all randomness is derived from the seed and step index).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Number of objects the run was started with.
    pub dataset_size: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub model: PointModel,
    pub params: ParamStore,
    /// Momentum key encoder (same layout as `params`).
    pub key_params: ParamStore,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub moco: MocoState,
    pub tokenizer: Tokenizer,
}

/// Normalized encoder input of an object.
pub fn base_cloud(triplet: &Triplet, seed: u64) -> Result<PointCloud> {
    Ok(normalize_cloud(&encoder_input(triplet, seed)?)?.cloud)
}

fn zeros_like(ps: &ParamStore) -> Vec<Tensor> {
    ps.ids().map(|id| Tensor::zeros(ps.get(id).shape())).collect()
}

impl TrainState {
    /// Fresh state: initialized network, key encoder copy, and a tokenizer
    /// whose codebook is fitted to the initial group features of the dataset.
    pub fn init(config: &TrainConfig, dataset: &[Triplet]) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(domain("pre-training needs a non-empty dataset"));
        }
        let (model, params) = PointModel::new(config.model_config(), config.seed)?;
        let (tparams, tembed) = Tokenizer::snapshot(&model, &params);
        let per_object: Vec<Vec<f64>> = dataset
            .par_iter()
            .map(|tr| {
                let cloud = base_cloud(tr, config.seed)?;
                let tokens = model.group(&cloud, derive_seed(config.seed, &[tag::CODEBOOK, tr.object_id]))?;
                Ok(Tokenizer::features(&tparams, &tembed, &tokens))
            })
            .collect::<Result<_>>()?;
        let features: Vec<f64> = per_object.concat();
        let codebook = fit_codebook(&features, model.dim(), config.codebook_size, config.seed)?;
        let moco = MocoState::new(config.moco.queue_size, model.dim(), config.moco.momentum, config.moco.tau)?;
        Ok(Self {
            config: config.clone(),
            dataset_size: dataset.len(),
            step: 0,
            adam_m: zeros_like(&params),
            adam_v: zeros_like(&params),
            key_params: params.clone(),
            model,
            params,
            moco,
            tokenizer: Tokenizer {
                params: tparams,
                embed: tembed,
                codebook,
            },
        })
    }

    pub fn total_steps(&self) -> u64 {
        total_steps(&self.config, self.dataset_size)
    }

    /// Current temperature of the cross-modal losses.
    pub fn tau(&self) -> f64 {
        self.params.get(self.model.log_tau).data()[0].exp()
    }

    pub(crate) fn clamp_log_tau(&mut self) {
        let v = &mut self.params.get_mut(self.model.log_tau).data_mut()[0];
        *v = v.clamp(TAU_MIN.ln(), TAU_MAX.ln());
    }
}

// ---------------------------------------------------------------------------
// Metrics and the run loop

/// One line of `metrics.jsonl`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepMetrics {
    /// 1-based index of the completed step.
    pub step: u64,
    pub lr: f64,
    pub l_rd: f64,
    pub l_rp: f64,
    pub l_pd: f64,
    pub l_moco: f64,
    pub l_ce: f64,
    pub l_dr: f64,
    pub l_cd: f64,
    pub total: f64,
}

impl StepMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

pub const METRICS_FILE: &str = "metrics.jsonl";

/// Where and how a run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Output directory for `metrics.jsonl` and checkpoints; nothing is
    /// written when unset.
    pub out_dir: Option<PathBuf>,
    /// Keep only the newest `n` epoch checkpoints.
    pub keep_checkpoints: Option<usize>,
}

pub fn epoch_checkpoint_name(epoch: u64) -> String {
    format!("epoch_{epoch:03}.drck")
}

/// Drops metrics records past `step` so a resumed run appends without
/// duplicates or gaps.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: StepMetrics = serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if m.step <= step {
            kept.push(line);
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    for l in kept {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

/// Runs steps until `until` (clamped to the run length) and returns the
/// metrics of the steps taken.
pub fn run_until(state: &mut TrainState, dataset: &[Triplet], until: u64, opts: &RunOptions) -> Result<Vec<StepMetrics>> {
    if dataset.len() != state.dataset_size {
        return Err(domain(format!(
            "state was created for {} objects, dataset has {}",
            state.dataset_size,
            dataset.len()
        )));
    }
    let total = state.total_steps();
    let until = until.min(total);
    let spe = steps_per_epoch(&state.config, dataset.len());
    let mut metrics_out = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(METRICS_FILE);
            if state.step == 0 {
                File::create(&path)?;
            } else {
                truncate_metrics(&path, state.step)?;
            }
            Some(BufWriter::new(OpenOptions::new().append(true).create(true).open(path)?))
        }
        None => None,
    };
    let mut log = Vec::new();
    while state.step < until {
        let idx = batch_indices(&state.config, dataset.len(), state.step);
        let batch: Vec<&Triplet> = idx.iter().map(|&i| &dataset[i]).collect();
        let m = pretrain_step(state, &batch)?;
        if let Some(w) = metrics_out.as_mut() {
            writeln!(w, "{}", m.to_json_line())?;
            w.flush()?;
        }
        log.push(m);
        if let Some(dir) = &opts.out_dir {
            if state.step % spe == 0 {
                let epoch = state.step / spe;
                checkpoint_save(state, &dir.join(epoch_checkpoint_name(epoch)))?;
                if let Some(keep) = opts.keep_checkpoints {
                    if epoch > keep as u64 {
                        let old = dir.join(epoch_checkpoint_name(epoch - keep as u64));
                        if old.exists() {
                            std::fs::remove_file(old)?;
                        }
                    }
                }
            } else if state.step == until {
                checkpoint_save(state, &dir.join("last.drck"))?;
            }
        }
    }
    Ok(log)
}

/// Initializes a state and trains it for the whole run.
pub fn pretrain(dataset: &[Triplet], cfg: &TrainConfig, opts: &RunOptions) -> Result<(TrainState, Vec<StepMetrics>)> {
    let mut state = TrainState::init(cfg, dataset)?;
    let total = state.total_steps();
    let log = run_until(&mut state, dataset, total, opts)?;
    Ok((state, log))
}

/// Continues a restored state to the end of its run.
pub fn resume(mut state: TrainState, dataset: &[Triplet], opts: &RunOptions) -> Result<(TrainState, Vec<StepMetrics>)> {
    let total = state.total_steps();
    let log = run_until(&mut state, dataset, total, opts)?;
    Ok((state, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 100, 5e-4), 5e-4);
        assert!(cosine_lr(100, 100, 5e-4).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 5e-4) - 2.5e-4).abs() < 1e-18);
        assert_eq!(scheduled_lr(0, 100, 1.0, 0), 1.0);
        assert!((scheduled_lr(0, 100, 1.0, 10) - 0.1 * cosine_lr(0, 100, 1.0)).abs() < 1e-15);
        assert_eq!(scheduled_lr(10, 100, 1.0, 10), cosine_lr(10, 100, 1.0));
    }

    #[test]
    fn defaults_and_profiles() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.weight_decay, c.epochs, c.batch_size), (5e-4, 0.05, 50, 4));
        c.validate().unwrap();
        let p = TrainConfig::full_scale();
        p.validate().unwrap();
        assert_eq!(p.encoder.dim, 384);
        assert_eq!(p.image_size, 224);
    }

    #[test]
    fn config_errors_name_the_field() {
        let e = TrainConfig::from_toml_str("lr = 1e-3\nbogus = 3\n").unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "bogus"), "{e}");
        let e = TrainConfig::from_toml_str("batch_size = 0\n").unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "batch_size"), "{e}");
        let e = TrainConfig::from_json_str("{\"moco\": {\"tau\": -1.0}}").unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "moco.tau"), "{e}");
        let e = TrainConfig::from_toml_str("[encoder]\nwidth = 3\n").unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "width"), "{e}");
        let c = TrainConfig::from_toml_str("epochs = 2\n[render]\ngrid_depth = 16\n").unwrap();
        assert_eq!((c.epochs, c.render.grid_depth, c.render.image_width), (2, 16, 32));
    }

    #[test]
    fn config_json_round_trip() {
        let c = TrainConfig {
            max_steps: Some(7),
            ..TrainConfig::default()
        };
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(TrainConfig::from_json_str(&text).unwrap(), c);
    }

    #[test]
    fn step_counts_and_batches() {
        let c = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        assert_eq!(total_steps(&c, 64), 16);
        assert_eq!(total_steps(&c, 65), 17);
        let c = TrainConfig {
            max_steps: Some(5),
            ..c
        };
        assert_eq!(total_steps(&c, 64), 5);
        let n = 10;
        let mut seen: Vec<usize> = (0..3).flat_map(|s| batch_indices(&c, n, s)).collect();
        assert_eq!(batch_indices(&c, n, 2).len(), 2);
        seen.sort();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        assert_ne!(batch_indices(&c, n, 0), batch_indices(&c, n, 3));
    }

    #[test]
    fn adamw_zero_lr_is_identity_and_first_step_is_sign() {
        let mut ps = ParamStore::new();
        let a = ps.add("a", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap(), true);
        let before = ps.clone();
        let g = vec![Some(Tensor::from_vec(&[2], vec![0.5, -3.0]).unwrap())];
        let (mut m, mut v) = (zeros_like(&ps), zeros_like(&ps));
        adamw_update(&mut ps, &g, &mut m, &mut v, 1, 0.0, 0.05);
        assert_eq!(ps, before);
        let (mut m, mut v) = (zeros_like(&ps), zeros_like(&ps));
        adamw_update(&mut ps, &g, &mut m, &mut v, 1, 0.1, 0.0);
        // bias-corrected first step moves each entry by lr · sign(g)
        let d = ps.get(a).data();
        assert!((d[0] - 0.9).abs() < 1e-7 && (d[1] + 1.9).abs() < 1e-7);
        let mut ps2 = before.clone();
        let (mut m, mut v) = (zeros_like(&ps), zeros_like(&ps));
        adamw_update(&mut ps2, &[None], &mut m, &mut v, 1, 0.1, 0.05);
        assert_eq!(ps2, before);
    }
}
