//! ELBO assembly, the stochastic training loop (Adam, plateau learning-rate
//! decay, early stopping, temperature annealing), and ablation-variant
//! construction.

use ndarray::{Array1, Array3, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoder::{EncoderKind, PosteriorField};
use crate::error::{Result, TvaeError};
use crate::latent::{
    kl_backward, kl_with_cache, log_softmax_backward, sample_joint_backward,
    sample_joint_with_cache, LatentGrad,
};
use crate::model::{ModelConfig, PriorSettings, TargetVae};
use crate::nn::{zero_grads, Adam, Parameterized};

// ---------------------------------------------------------------------------
// Variants
// ---------------------------------------------------------------------------

/// Ablation/model variants. V1-V3 progressively remove rotation inference;
/// the Full variants differ only in the rotation discretization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VariantId {
    /// Plain convolutions, inference on translation only (r = 1).
    V1TranslationOnly,
    /// Group-convolutional features, rotation axis collapsed by a learned
    /// linear map before the heads; posterior as in V1.
    V2CollapsedRotation,
    /// Full P4 model without the discrete angle offsets.
    V3NoOffset,
    FullP4,
    FullP8,
    FullP16,
}

impl VariantId {
    /// Rotation-axis length of the convolutional trunk.
    pub fn group_r(self) -> usize {
        match self {
            VariantId::V1TranslationOnly => 1,
            VariantId::V2CollapsedRotation | VariantId::V3NoOffset | VariantId::FullP4 => 4,
            VariantId::FullP8 => 8,
            VariantId::FullP16 => 16,
        }
    }

    pub fn encoder_kind(self) -> EncoderKind {
        match self {
            VariantId::V2CollapsedRotation => EncoderKind::CollapsedRotation,
            _ => EncoderKind::Group,
        }
    }

    pub fn theta_offsets_enabled(self) -> bool {
        !matches!(self, VariantId::V3NoOffset)
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            VariantId::V1TranslationOnly => "v1",
            VariantId::V2CollapsedRotation => "v2",
            VariantId::V3NoOffset => "v3",
            VariantId::FullP4 => "p4",
            VariantId::FullP8 => "p8",
            VariantId::FullP16 => "p16",
        };
        f.write_str(s)
    }
}

impl FromStr for VariantId {
    type Err = TvaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v1" | "v1-translation-only" => Ok(VariantId::V1TranslationOnly),
            "v2" | "v2-gconv-collapsed" => Ok(VariantId::V2CollapsedRotation),
            "v3" | "v3-no-offset" => Ok(VariantId::V3NoOffset),
            "p4" | "full-p4" | "full_p4" => Ok(VariantId::FullP4),
            "p8" | "full-p8" | "full_p8" => Ok(VariantId::FullP8),
            "p16" | "full-p16" | "full_p16" => Ok(VariantId::FullP16),
            other => Err(TvaeError::UnknownVariant(other.into())),
        }
    }
}

/// Builds a model for the given variant id on top of shared base settings.
pub fn build_variant(
    variant: VariantId,
    mut config: ModelConfig,
    prior: PriorSettings,
    seed: u64,
) -> Result<TargetVae> {
    config.variant = variant;
    TargetVae::new(config, prior, seed)
}

// ---------------------------------------------------------------------------
// Temperature schedule
// ---------------------------------------------------------------------------

/// Linear Gumbel-temperature annealing over the first `anneal_fraction` of
/// training, then constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_fraction: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule {
            start: 1.0,
            end: 0.1,
            anneal_fraction: 0.5,
        }
    }
}

impl TemperatureSchedule {
    pub fn at(&self, epoch: usize, max_epochs: usize) -> f64 {
        let anneal_epochs = (max_epochs as f64 * self.anneal_fraction).ceil();
        if anneal_epochs < 1.0 || epoch as f64 >= anneal_epochs {
            return self.end;
        }
        self.start + (self.end - self.start) * epoch as f64 / anneal_epochs
    }

    /// Parses "start:end:fraction", e.g. "1.0:0.1:0.5".
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(TvaeError::InvalidArgument(format!(
                "temperature schedule must be start:end:fraction, got {s}"
            )));
        }
        let nums: Vec<f64> = parts
            .iter()
            .map(|p| {
                p.parse::<f64>().map_err(|_| {
                    TvaeError::InvalidArgument(format!("bad number {p} in temperature schedule"))
                })
            })
            .collect::<Result<_>>()?;
        if !(nums[0] > 0.0 && nums[1] > 0.0 && (0.0..=1.0).contains(&nums[2])) {
            return Err(TvaeError::InvalidArgument(
                "temperatures must be positive and fraction in [0,1]".into(),
            ));
        }
        Ok(TemperatureSchedule {
            start: nums[0],
            end: nums[1],
            anneal_fraction: nums[2],
        })
    }
}

// ---------------------------------------------------------------------------
// Train configuration
// ---------------------------------------------------------------------------

/// Which loss the plateau scheduler and early stopping monitor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Monitor {
    TrainLoss,
    /// Holds out the given fraction of images as a validation split.
    ValidationLoss { fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Images processed per gradient accumulation chunk (memory control);
    /// None = whole batch at once.
    pub micro_batch: Option<usize>,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    /// Epochs without improvement before the learning rate decays.
    pub lr_patience: usize,
    /// Epochs without improvement before training stops.
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub temperature: TemperatureSchedule,
    pub monitor: Monitor,
    /// Save `last.tvae` every this many epochs (when an output dir is given).
    pub checkpoint_interval: usize,
    /// Emit a step record every this many optimizer steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 100,
            micro_batch: Some(25),
            learning_rate: 2e-4,
            lr_decay_factor: 0.5,
            lr_patience: 10,
            early_stop_patience: 20,
            max_epochs: 500,
            seed: 0,
            temperature: TemperatureSchedule::default(),
            monitor: Monitor::TrainLoss,
            checkpoint_interval: 10,
            log_every: 1,
        }
    }
}

// ---------------------------------------------------------------------------
// ELBO
// ---------------------------------------------------------------------------

/// Per-batch loss diagnostics (means over the batch).
#[derive(Debug, Clone, Copy, Default)]
pub struct ElboDiagnostics {
    pub loss: f64,
    pub recon: f64,
    pub kl_total: f64,
    pub kl_tr: f64,
    pub kl_theta: f64,
    pub kl_z: f64,
}

impl ElboDiagnostics {
    fn weighted_merge(parts: &[(ElboDiagnostics, usize)]) -> ElboDiagnostics {
        let total: usize = parts.iter().map(|(_, n)| n).sum();
        let mut out = ElboDiagnostics::default();
        for (d, n) in parts {
            let w = *n as f64 / total as f64;
            out.loss += w * d.loss;
            out.recon += w * d.recon;
            out.kl_total += w * d.kl_total;
            out.kl_tr += w * d.kl_tr;
            out.kl_theta += w * d.kl_theta;
            out.kl_z += w * d.kl_z;
        }
        out
    }
}

/// Flattens `[B, C, H, W]` images into the pixel-major `[B, P, C]` layout the
/// generator scores.
fn targets_from_images(images: &Array4<f64>) -> Array3<f64> {
    let (b, c, h, w) = (
        images.shape()[0],
        images.shape()[1],
        images.shape()[2],
        images.shape()[3],
    );
    let mut out = Array3::zeros((b, h * w, c));
    for bi in 0..b {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[[bi, i * w + j, ch]] = images[[bi, ch, i, j]];
                }
            }
        }
    }
    out
}

/// Negative ELBO of a batch, estimated with one posterior sample per image.
/// Forward only; use the training loop for gradients.
pub fn elbo_loss<R: Rng + ?Sized>(
    batch: &Array4<f64>,
    model: &TargetVae,
    temperature: f64,
    rng: &mut R,
) -> Result<(f64, ElboDiagnostics)> {
    let field = model.encoder.encode(batch)?;
    let (sample, _) = sample_joint_with_cache(&field, &model.grid, &model.prior, temperature, rng)?;
    let (kl, _) = kl_with_cache(&field, &model.prior)?;
    let coords = TargetVae::pose_coords(&model.grid, &sample.theta, &sample.t);
    let dist = model.generator.decode(&sample.z, &coords)?;
    let targets = targets_from_images(batch);
    let recon = dist.log_prob(&targets.view())?;
    finalize_diagnostics(&recon, &kl)
}

fn finalize_diagnostics(
    recon: &Array1<f64>,
    kl: &crate::latent::KlBreakdown,
) -> Result<(f64, ElboDiagnostics)> {
    let b = recon.len() as f64;
    let recon_mean = recon.sum() / b;
    let kl_mean = kl.total.sum() / b;
    let loss = -(recon_mean - kl_mean);
    let diag = ElboDiagnostics {
        loss,
        recon: recon_mean,
        kl_total: kl_mean,
        kl_tr: kl.kl_tr.sum() / b,
        kl_theta: kl.kl_theta.sum() / b,
        kl_z: kl.kl_z.sum() / b,
    };
    if !loss.is_finite() {
        return Err(TvaeError::Numeric(format!(
            "non-finite loss: {diag:?}"
        )));
    }
    Ok((loss, diag))
}

/// One forward/backward pass accumulating parameter gradients for
/// `grad_scale * sum_b (kl_b - recon_b)`. With `grad_scale = 1/total_batch`
/// the accumulated gradients over micro-batches equal those of the batch
/// mean loss.
pub(crate) fn elbo_step<R: Rng + ?Sized>(
    model: &mut TargetVae,
    batch: &Array4<f64>,
    temperature: f64,
    grad_scale: f64,
    rng: &mut R,
) -> Result<(f64, ElboDiagnostics)> {
    let b = batch.shape()[0];
    let (field, enc_cache) = model.encoder.forward_with_cache(batch)?;
    let (sample, lat_cache) =
        sample_joint_with_cache(&field, &model.grid, &model.prior, temperature, rng)?;
    let (kl, kl_cache) = kl_with_cache(&field, &model.prior)?;
    let coords = TargetVae::pose_coords(&model.grid, &sample.theta, &sample.t);
    let (dist, gen_cache) = model.generator.forward_with_cache(&sample.z, &coords)?;
    let targets = targets_from_images(batch);
    let (recon, mut d_values, mut d_log_sigma) = dist.log_prob_with_grad(&targets.view())?;
    let (loss, diag) = finalize_diagnostics(&recon, &kl)?;

    // loss contribution of recon is -grad_scale * sum_b recon_b
    d_values.mapv_inplace(|v| -grad_scale * v);
    if let Some(g) = d_log_sigma.as_mut() {
        g.mapv_inplace(|v| -grad_scale * v);
    }
    let (d_z, d_coords) =
        model
            .generator
            .backward(&sample.z, &dist, &gen_cache, &d_values, d_log_sigma.as_ref());
    let (d_theta, d_t) =
        TargetVae::pose_coords_backward(&model.grid, &sample.theta, &sample.t, &d_coords);

    let mut grad: LatentGrad =
        sample_joint_backward(&field, &model.grid, &lat_cache, &d_z, &d_theta, &d_t);
    // KL enters the loss with +grad_scale per image
    let d_kl = Array1::from_elem(b, grad_scale);
    kl_backward(&field, &model.prior, &kl_cache, &d_kl, &mut grad);

    let d_attn = log_softmax_backward(&lat_cache.log_q, &grad.d_log_q);
    let field_grad = PosteriorField {
        attn_logits: d_attn,
        mu_z: grad.d_mu_z,
        log_sigma_z: grad.d_log_sigma_z,
        mu_dtheta: grad.d_mu_dtheta,
        log_sigma_theta: grad.d_log_sigma_theta,
    };
    model.encoder.backward(batch, &enc_cache, &field_grad);
    Ok((loss, diag))
}

// ---------------------------------------------------------------------------
// Plateau scheduling
// ---------------------------------------------------------------------------

/// Tracks the monitored loss; decays the learning rate after `lr_patience`
/// epochs without improvement and requests a stop after
/// `early_stop_patience`.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    best: f64,
    lr_counter: usize,
    stop_counter: usize,
    lr_patience: usize,
    stop_patience: usize,
    factor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlateauAction {
    pub improved: bool,
    pub decay_lr: bool,
    pub stop: bool,
}

impl PlateauScheduler {
    pub fn new(lr_patience: usize, stop_patience: usize, factor: f64) -> Self {
        PlateauScheduler {
            best: f64::INFINITY,
            lr_counter: 0,
            stop_counter: 0,
            lr_patience,
            stop_patience,
            factor,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }

    pub fn observe(&mut self, loss: f64) -> PlateauAction {
        if loss < self.best {
            self.best = loss;
            self.lr_counter = 0;
            self.stop_counter = 0;
            return PlateauAction {
                improved: true,
                decay_lr: false,
                stop: false,
            };
        }
        self.lr_counter += 1;
        self.stop_counter += 1;
        let decay_lr = self.lr_counter >= self.lr_patience;
        if decay_lr {
            self.lr_counter = 0;
        }
        PlateauAction {
            improved: false,
            decay_lr,
            stop: self.stop_counter >= self.stop_patience,
        }
    }
}

// ---------------------------------------------------------------------------
// Fit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl_tr: f64,
    pub kl_theta: f64,
    pub kl_z: f64,
    pub lr: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_monitored_loss: f64,
    pub epochs_run: usize,
    pub early_stopped: bool,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch\tstep\tloss\trecon\tkl_tr\tkl_theta\tkl_z\tlr\ttemperature";
pub const EPOCH_LOG_HEADER: &str = "epoch\tmean_loss\tval_loss\tlr\ttemperature";

/// Trains the model in place with shuffled mini-batches, Adam, plateau
/// learning-rate decay, early stopping and periodic checkpointing.
///
/// Deterministic for a fixed seed (single worker). When `out_dir` is given,
/// writes `train_log.tsv`, `epochs.tsv`, `last.tvae` (periodic) and
/// `best.tvae` (on improvement). A non-finite loss aborts with an error,
/// leaving the most recent checkpoints on disk.
pub fn fit(
    model: &mut TargetVae,
    images: &Array4<f64>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<FitReport> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(TvaeError::InvalidArgument("empty dataset".into()));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 || !(cfg.learning_rate > 0.0) {
        return Err(TvaeError::InvalidArgument(
            "batch size, max epochs and learning rate must be positive".into(),
        ));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut indices: Vec<usize> = (0..n).collect();

    // optional validation split (taken once, before any shuffling)
    let val_count = match cfg.monitor {
        Monitor::TrainLoss => 0,
        Monitor::ValidationLoss { fraction } => {
            if !(0.0..1.0).contains(&fraction) {
                return Err(TvaeError::InvalidArgument(
                    "validation fraction must be in [0, 1)".into(),
                ));
            }
            ((n as f64 * fraction) as usize).min(n - 1)
        }
    };
    indices.shuffle(&mut rng);
    let val_indices: Vec<usize> = indices[n - val_count..].to_vec();
    let mut train_indices: Vec<usize> = indices[..n - val_count].to_vec();

    let mut adam = Adam::new(cfg.learning_rate);
    let mut scheduler =
        PlateauScheduler::new(cfg.lr_patience, cfg.early_stop_patience, cfg.lr_decay_factor);

    let mut step_log: Option<std::io::BufWriter<std::fs::File>> = None;
    let mut epoch_log: Option<std::io::BufWriter<std::fs::File>> = None;
    if let Some(dir) = out_dir {
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("train_log.tsv"))?);
        writeln!(f, "{TRAIN_LOG_HEADER}")?;
        step_log = Some(f);
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("epochs.tsv"))?);
        writeln!(f, "{EPOCH_LOG_HEADER}")?;
        epoch_log = Some(f);
    }

    let mut report = FitReport {
        steps: Vec::new(),
        epochs: Vec::new(),
        best_monitored_loss: f64::INFINITY,
        epochs_run: 0,
        early_stopped: false,
        best_checkpoint: None,
        last_checkpoint: None,
    };

    let micro = cfg.micro_batch.unwrap_or(cfg.batch_size).max(1);
    let mut global_step = 0usize;
    'epochs: for epoch in 0..cfg.max_epochs {
        train_indices.shuffle(&mut rng);
        let temperature = cfg.temperature.at(epoch, cfg.max_epochs);
        let mut epoch_parts: Vec<(ElboDiagnostics, usize)> = Vec::new();

        for batch_ids in train_indices.chunks(cfg.batch_size) {
            zero_grads(model.params());
            let scale = 1.0 / batch_ids.len() as f64;
            let mut batch_parts: Vec<(ElboDiagnostics, usize)> = Vec::new();
            for micro_ids in batch_ids.chunks(micro) {
                let batch = gather_images(images, micro_ids);
                let (_, diag) = elbo_step(model, &batch, temperature, scale, &mut rng)?;
                batch_parts.push((diag, micro_ids.len()));
            }
            adam.step(model.params());
            let diag = ElboDiagnostics::weighted_merge(&batch_parts);
            epoch_parts.push((diag, batch_ids.len()));
            global_step += 1;
            if global_step % cfg.log_every == 0 {
                let rec = StepRecord {
                    epoch,
                    step: global_step,
                    loss: diag.loss,
                    recon: diag.recon,
                    kl_tr: diag.kl_tr,
                    kl_theta: diag.kl_theta,
                    kl_z: diag.kl_z,
                    lr: adam.lr(),
                    temperature,
                };
                if let Some(f) = step_log.as_mut() {
                    writeln!(
                        f,
                        "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6e}\t{:.4}",
                        rec.epoch,
                        rec.step,
                        rec.loss,
                        rec.recon,
                        rec.kl_tr,
                        rec.kl_theta,
                        rec.kl_z,
                        rec.lr,
                        rec.temperature
                    )?;
                }
                report.steps.push(rec);
            }
        }

        let epoch_diag = ElboDiagnostics::weighted_merge(&epoch_parts);
        let val_loss = if val_indices.is_empty() {
            None
        } else {
            let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed ^ epoch as u64);
            let mut parts = Vec::new();
            for ids in val_indices.chunks(micro) {
                let batch = gather_images(images, ids);
                let (_, d) = elbo_loss(&batch, model, temperature, &mut val_rng)?;
                parts.push((d, ids.len()));
            }
            Some(ElboDiagnostics::weighted_merge(&parts).loss)
        };

        let rec = EpochRecord {
            epoch,
            mean_loss: epoch_diag.loss,
            val_loss,
            lr: adam.lr(),
            temperature,
        };
        if let Some(f) = epoch_log.as_mut() {
            writeln!(
                f,
                "{}\t{:.6}\t{}\t{:.6e}\t{:.4}",
                rec.epoch,
                rec.mean_loss,
                rec.val_loss.map_or("-".into(), |v| format!("{v:.6}")),
                rec.lr,
                rec.temperature
            )?;
            f.flush()?;
        }
        report.epochs.push(rec);
        report.epochs_run = epoch + 1;

        let monitored = val_loss.unwrap_or(epoch_diag.loss);
        let action = scheduler.observe(monitored);
        report.best_monitored_loss = scheduler.best();
        if action.improved {
            if let Some(dir) = out_dir {
                let path = dir.join("best.tvae");
                model.save(&path)?;
                report.best_checkpoint = Some(path);
            }
        }
        if action.decay_lr {
            adam.set_lr(adam.lr() * cfg.lr_decay_factor);
        }
        if let Some(dir) = out_dir {
            let due = cfg.checkpoint_interval > 0 && (epoch + 1) % cfg.checkpoint_interval == 0;
            if due || action.stop || epoch + 1 == cfg.max_epochs {
                let path = dir.join("last.tvae");
                model.save(&path)?;
                report.last_checkpoint = Some(path);
            }
        }
        if action.stop {
            report.early_stopped = true;
            break 'epochs;
        }
    }
    if let Some(dir) = out_dir {
        let path = dir.join("last.tvae");
        if report.last_checkpoint.is_none() {
            model.save(&path)?;
            report.last_checkpoint = Some(path);
        }
    }
    Ok(report)
}

fn gather_images(images: &Array4<f64>, ids: &[usize]) -> Array4<f64> {
    let (_, c, h, w) = (
        images.shape()[0],
        images.shape()[1],
        images.shape()[2],
        images.shape()[3],
    );
    let mut out = Array4::zeros((ids.len(), c, h, w));
    for (k, &i) in ids.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), k)
            .assign(&images.index_axis(ndarray::Axis(0), i));
    }
    out
}
