//! Optimization loop: Adam, decoder unit-norm projection, dead-latent
//! tracking, running-mean maintenance and checkpointing.

mod adam;
mod checkpoint;
mod tracker;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, project_decoder_unit_norm, remove_parallel_gradient, AdamHyper, AdamState};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, NormViolation, FORMAT_VERSION, LOAD_NORM_TOLERANCE,
};
pub use tracker::DeadLatentTracker;

use crate::data::{Dataset, DatasetManifest};
use crate::error::{Error, Result};
use crate::ksae::{init_params, KSaeConfig, KSaeParams};
use crate::loss::{backward, forward_loss};

/// EMA decay of the running data mean used to normalize the loss.
pub const MEAN_DECAY: f64 = 0.999;

/// Default dead-latent window, in batches.
pub const DEAD_WINDOW_BATCHES: u64 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    /// Tokens without firing after which a latent counts as dead.
    /// `None` means `DEAD_WINDOW_BATCHES * batch_size`.
    pub dead_token_threshold: Option<u64>,
    /// Project out the decoder-parallel gradient component before each step.
    pub grad_project: bool,
    /// Initialization and epoch-order seed.
    pub seed: u64,
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamHyper::default();
        Self {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            batch_size: 4096,
            total_steps: 10_000,
            dead_token_threshold: None,
            grad_project: false,
            seed: 0,
            prefetch: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.batch_size >= 1
            && self.total_steps >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }

    pub fn dead_threshold(&self) -> u64 {
        self.dead_token_threshold
            .unwrap_or(DEAD_WINDOW_BATCHES * self.batch_size as u64)
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_mse: f32,
    pub loss_aux: f32,
    pub loss_total: f32,
    /// Dead latents after this step's firing update.
    pub dead_count: usize,
    /// Mean value of the active TopK entries.
    pub mean_active: f64,
    /// Mean number of active latents per token.
    pub l0: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<StepMetrics>,
    pub tracker: DeadLatentTracker,
}

/// Training stopped on a numeric failure. `last_checkpoint` holds the state
/// before the failing step.
#[derive(Debug, thiserror::Error)]
#[error("training aborted at step {step}: {source}")]
pub struct TrainFailure {
    pub step: u64,
    #[source]
    pub source: Error,
    pub last_checkpoint: Option<Box<Checkpoint>>,
    pub metrics: Vec<StepMetrics>,
}

impl From<Error> for TrainFailure {
    fn from(source: Error) -> Self {
        Self {
            step: 0,
            source,
            last_checkpoint: None,
            metrics: Vec::new(),
        }
    }
}

impl From<TrainFailure> for Error {
    fn from(f: TrainFailure) -> Self {
        match f.source {
            Error::Numeric(m) => Error::Numeric(format!("step {}: {m}", f.step)),
            other => other,
        }
    }
}

/// Trains on the dataset described by `manifest`.
pub fn train(
    manifest: &DatasetManifest,
    ksae: &KSaeConfig,
    cfg: &TrainConfig,
) -> std::result::Result<TrainOutput, TrainFailure> {
    if manifest.dim != ksae.d {
        return Err(Error::Config(format!(
            "dataset dim {} does not match config d = {}",
            manifest.dim, ksae.d
        ))
        .into());
    }
    let dataset = Arc::new(manifest.load_dataset()?);
    train_dataset(dataset, ksae, cfg, |_, _| {})
}

/// Trains on an in-memory dataset, calling `observe` after every step.
pub fn train_dataset(
    dataset: Arc<Dataset>,
    ksae: &KSaeConfig,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&StepMetrics, &KSaeParams<f32>),
) -> std::result::Result<TrainOutput, TrainFailure> {
    ksae.validate()?;
    cfg.validate()?;
    if dataset.matrix.dim() != ksae.d {
        return Err(Error::Config(format!(
            "dataset dim {} does not match config d = {}",
            dataset.matrix.dim(),
            ksae.d
        ))
        .into());
    }
    let n = ksae.n();
    let threshold = cfg.dead_threshold();
    let hyper = cfg.adam();
    let provenance = dataset.matrix.provenance.clone();

    let mut epoch: u64 = 0;
    let mut stream = open_epoch(&dataset, cfg, epoch)?;
    let mut pending = stream.next();
    let first = pending
        .as_ref()
        .ok_or_else(|| Error::Config("dataset yields no full batch".into()))?;

    let mut params = init_params(ksae, first.matrix.view(), cfg.seed)?;
    let mut mean: Array1<f32> = params.b_pre.clone();
    let mut adam = AdamState::<f32>::new(ksae.d, n);
    let mut tracker = DeadLatentTracker::new(n);
    let mut metrics = Vec::with_capacity(cfg.total_steps as usize);

    let snapshot = |params: &KSaeParams<f32>, mean: &Array1<f32>, step: u64| Checkpoint {
        ksae: ksae.clone(),
        train: cfg.clone(),
        step,
        provenance: provenance.clone(),
        params: params.clone(),
        running_mean: mean.clone(),
        norm_violation: None,
    };

    for step in 1..=cfg.total_steps {
        let batch = match pending.take().or_else(|| stream.next()) {
            Some(b) => b,
            None => {
                epoch += 1;
                stream = open_epoch(&dataset, cfg, epoch)?;
                stream
                    .next()
                    .ok_or_else(|| Error::Config("dataset yields no full batch".into()))?
            }
        };
        let x = batch.matrix.view();
        let dead = tracker.dead_mask(threshold);

        let fail = |source: Error, params: &KSaeParams<f32>, mean: &Array1<f32>, metrics: &[StepMetrics]| {
            TrainFailure {
                step,
                source,
                last_checkpoint: Some(Box::new(snapshot(params, mean, step - 1))),
                metrics: metrics.to_vec(),
            }
        };

        let fwd = match forward_loss(&params, ksae, x, &dead, mean.view()) {
            Ok(f) if f.loss_total.is_finite() => f,
            Ok(f) => {
                let e = Error::Numeric(format!(
                    "non-finite loss (mse {}, aux {})",
                    f.loss_mse, f.loss_aux
                ));
                return Err(fail(e, &params, &mean, &metrics));
            }
            Err(e) => return Err(fail(e, &params, &mean, &metrics)),
        };
        let mut grads = backward(&params, ksae, x, &fwd).map_err(|e| fail(e, &params, &mean, &metrics))?;
        if cfg.grad_project {
            remove_parallel_gradient(&params, &mut grads);
        }
        adam_step(&mut params, &grads, &mut adam, &hyper).map_err(|e| fail(e, &params, &mean, &metrics))?;
        project_decoder_unit_norm(&mut params).map_err(|e| fail(e, &params, &mean, &metrics))?;
        tracker.track_firing(&fwd.z);

        let batch_mean = x.mean_axis(Axis(0)).expect("batch is non-empty");
        let decay = MEAN_DECAY as f32;
        mean.zip_mut_with(&batch_mean, |m, &b| *m = decay * *m + (1.0 - decay) * b);

        let active = fwd.z.active_count();
        let active_sum: f64 = fwd
            .z
            .codes
            .iter()
            .flat_map(|c| c.values.iter())
            .map(|&v| f64::from(v))
            .sum();
        let m = StepMetrics {
            step,
            loss_mse: fwd.loss_mse,
            loss_aux: fwd.loss_aux,
            loss_total: fwd.loss_total,
            dead_count: tracker.dead_count(threshold),
            mean_active: if active > 0 { active_sum / active as f64 } else { 0.0 },
            l0: active as f64 / x.nrows() as f64,
        };
        log::debug!(
            "step {step}: mse {:.5} aux {:.5} dead {}",
            m.loss_mse,
            m.loss_aux,
            m.dead_count
        );
        observe(&m, &params);
        metrics.push(m);
    }

    Ok(TrainOutput {
        checkpoint: snapshot(&params, &mean, cfg.total_steps),
        metrics,
        tracker,
    })
}

fn open_epoch(
    dataset: &Arc<Dataset>,
    cfg: &TrainConfig,
    epoch: u64,
) -> Result<Box<dyn Iterator<Item = crate::data::Batch>>> {
    let stream = dataset.batches(cfg.batch_size, cfg.seed.wrapping_add(epoch))?;
    if cfg.prefetch > 0 {
        Ok(Box::new(stream.prefetch(cfg.prefetch)))
    } else {
        Ok(Box::new(stream))
    }
}

/// Writes metrics as JSON lines.
pub fn write_metrics_log(metrics: &[StepMetrics], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for m in metrics {
        serde_json::to_writer(&mut out, m)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}
