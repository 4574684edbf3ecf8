//! Sample assembly with scene centering, synthetic views and token
//! dropout, the squared-error objective, and the Adam training loop.

mod augment;

pub use augment::{
    add_synthetic_views, apply_transform, center_scene, floor_projection, token_dropout, window_tokens, SceneTransform,
    TrainingWindow,
};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point3;
use crate::model::{forward, init_params, ModelConfig, ModelError, ObservationToken, QuerySpec};
use crate::synthdata::{derive_seed, Dataset, RigConfig, SynthError};
use crate::tensor::{lr_schedule, save_checkpoint, Adam, AdamConfig, CheckpointError, Gradients, Graph, ParamStore, Tensor,
    TensorError,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: u64, what: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub t_in: usize,
    pub t_out: usize,
    pub views_per_sample: usize,
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub base_lr: f64,
    pub dropout_rate: f64,
    pub centering_noise_radius: f64,
    pub synthetic_views_per_sample: usize,
    /// Uniform pixel jitter (±pixels) on synthetic-view rays; 0 keeps them exact.
    pub synthetic_view_jitter: f64,
    pub random_yaw: bool,
    pub seed: u64,
    pub log_interval: u64,
    pub adam: AdamConfig,
    /// Rig used for synthetic views.
    pub synthetic_rig: RigConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t_in: 9,
            t_out: 9,
            views_per_sample: 2,
            batch_size: 32,
            total_steps: 20_000,
            warmup_steps: 1_000,
            base_lr: 1e-4,
            dropout_rate: 0.2,
            centering_noise_radius: 0.3,
            synthetic_views_per_sample: 1,
            synthetic_view_jitter: 0.0,
            random_yaw: true,
            seed: 0,
            log_interval: 10,
            adam: AdamConfig::default(),
            synthetic_rig: RigConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The original large-batch schedule.
    pub fn full_preset() -> Self {
        Self { batch_size: 256, total_steps: 300_000, warmup_steps: 10_000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.t_in == 0 || self.t_out == 0 || self.t_out > self.t_in {
            return fail("need 1 <= t_out <= t_in");
        }
        if self.views_per_sample == 0 || self.batch_size == 0 || self.log_interval == 0 {
            return fail("views_per_sample, batch_size and log_interval must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail("dropout_rate must be in [0, 1)");
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return fail("base_lr must be finite and non-negative");
        }
        if !(self.centering_noise_radius >= 0.0 && self.centering_noise_radius.is_finite()) {
            return fail("centering_noise_radius must be finite and non-negative");
        }
        if !(self.synthetic_view_jitter >= 0.0 && self.synthetic_view_jitter.is_finite()) {
            return fail("synthetic_view_jitter must be finite and non-negative");
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
            return fail("invalid Adam parameters");
        }
        self.synthetic_rig.validate()?;
        Ok(())
    }
}

/// One assembled sample in the centered frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub tokens: Vec<ObservationToken>,
    pub query: QuerySpec,
    /// `[query.len() × 3]` targets in meters, row order of `query`.
    pub target: Vec<Point3>,
}

/// Squared Euclidean error averaged over every (frame, joint) entry.
/// Batches can be passed with their samples concatenated along frames.
pub fn mse_loss(pred: &[Vec<Point3>], gt: &[Vec<Point3>]) -> Result<f64, TrainError> {
    if pred.len() != gt.len() || pred.iter().zip(gt).any(|(a, b)| a.len() != b.len()) {
        return Err(TrainError::Shape("prediction and ground truth differ in shape".into()));
    }
    let n: usize = gt.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(TrainError::Shape("empty pose sequence".into()));
    }
    let total: f64 = pred.iter().flatten().zip(gt.iter().flatten()).map(|(a, b)| (a - b).norm_squared()).sum();
    Ok(total / n as f64)
}

/// Builds one sample: window, view subsampling, centering, synthetic views,
/// token dropout. Returns `None` if no sequence is long enough.
pub fn assemble_sample<R: Rng>(
    dataset: &Dataset,
    cfg: &TrainConfig,
    neck: usize,
    rng: &mut R,
) -> Option<TrainingSample> {
    let eligible: Vec<usize> =
        (0..dataset.sequences.len()).filter(|&i| dataset.sequences[i].num_frames() >= cfg.t_in).collect();
    if eligible.is_empty() {
        return None;
    }
    let seq = &dataset.sequences[eligible[rng.random_range(0..eligible.len())]];
    let start = rng.random_range(0..=seq.num_frames() - cfg.t_in);
    let frames = start..start + cfg.t_in;
    let n_views = cfg.views_per_sample.min(seq.num_cameras());
    let mut views = sample_indices(rng, seq.num_cameras(), n_views).into_vec();
    views.sort_unstable();

    let cams = seq.cameras_m();
    let window = TrainingWindow {
        tokens: window_tokens(&seq.detections, &cams, frames.clone(), &views),
        gt: frames.clone().map(|t| seq.gt_frame(t)).collect(),
    };
    let (centered, _) = center_scene(&window, neck, cfg.centering_noise_radius, cfg.random_yaw, rng);
    let mut tokens = centered.tokens;
    tokens.extend(add_synthetic_views(
        &centered.gt,
        cfg.synthetic_views_per_sample,
        &cfg.synthetic_rig,
        seq.num_cameras(),
        cfg.synthetic_view_jitter,
        rng,
    ));
    let tokens = token_dropout(&tokens, cfg.dropout_rate, rng);
    if tokens.is_empty() {
        return None;
    }
    let j = seq.num_joints();
    let query = QuerySpec::frames(j, cfg.t_out);
    let first = cfg.t_in - cfg.t_out;
    let target = centered.gt[first..].iter().flatten().copied().collect();
    Some(TrainingSample { tokens, query, target })
}

/// Batch for `step`; sample `i` draws from its own stream so assembly can
/// run in parallel without changing the result.
pub fn assemble_batch(dataset: &Dataset, cfg: &TrainConfig, neck: usize, step: u64) -> Result<Vec<TrainingSample>, TrainError> {
    let step_seed = derive_seed(cfg.seed, step);
    (0..cfg.batch_size as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(step_seed, i));
            // a sample can only come back empty when every detection is hidden
            (0..100)
                .find_map(|_| assemble_sample(dataset, cfg, neck, &mut rng))
                .ok_or_else(|| TrainError::Config(format!("no training window of {} frames with detections", cfg.t_in)))
        })
        .collect()
}

fn target_tensor(sample: &TrainingSample) -> Tensor<f32> {
    let data = sample.target.iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect();
    Tensor::new(vec![sample.target.len(), 3], data).expect("3 values per target")
}

/// Mean loss over the batch and the matching mean gradient.
pub fn batch_loss_and_grads(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    batch: &[TrainingSample],
) -> Result<(f64, Gradients<f32>), TrainError> {
    let scale = 1.0 / batch.len() as f32;
    let per_sample: Vec<Result<(f64, Gradients<f32>), TrainError>> = batch
        .par_iter()
        .map(|s| {
            let mut g = Graph::new(params);
            let pred = forward(&mut g, cfg, &s.tokens, &s.query)?;
            let loss = g.mean_squared_row_error(pred, target_tensor(s)).map_err(ModelError::from)?;
            let value = g.value(loss).data()[0] as f64;
            let k = g.constant(Tensor::scalar(scale));
            let scaled = g.scale_by(k, loss).map_err(ModelError::from)?;
            let grads = g.backward(scaled).map_err(ModelError::from)?;
            Ok((value, grads))
        })
        .collect();
    // summed in batch order so the result does not depend on scheduling
    let mut total = 0.0;
    let mut grads = Gradients::new();
    for r in per_sample {
        let (loss, g) = r?;
        total += loss;
        grads.merge(&g);
    }
    Ok((total / batch.len() as f64, grads))
}

/// Forward, loss, backward and one Adam update at learning rate `lr`.
pub fn training_step(
    params: &mut ParamStore<f32>,
    adam: &mut Adam<f32>,
    cfg: &ModelConfig,
    batch: &[TrainingSample],
    lr: f64,
) -> Result<f64, TrainError> {
    let step = adam.step_count() + 1;
    let (loss, grads) = batch_loss_and_grads(params, cfg, batch).map_err(|e| match e {
        TrainError::Model(ModelError::Tensor(TensorError::NonFinite(what))) => TrainError::NonFinite { step, what },
        e => e,
    })?;
    if !loss.is_finite() {
        return Err(TrainError::NonFinite { step, what: format!("loss ({loss})") });
    }
    if !grads.is_finite() {
        let bad: Vec<&str> = grads.iter().filter(|(_, g)| !g.is_finite()).map(|(n, _)| n.as_str()).collect();
        return Err(TrainError::NonFinite { step, what: format!("gradients in {}", bad.join(", ")) });
    }
    params.zero_grads();
    params.accumulate(&grads).map_err(ModelError::from)?;
    adam.step(params, lr);
    Ok(loss)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore<f32>,
    /// Loss of every step.
    pub losses: Vec<f64>,
}

/// Runs `total_steps` steps from a seeded initialization.
pub fn train(
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    dataset: &Dataset,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome, TrainError> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    if dataset.skeleton.num_joints() != model_cfg.num_joints {
        return Err(TrainError::Config(format!(
            "dataset has {} joints, model expects {}",
            dataset.skeleton.num_joints(),
            model_cfg.num_joints
        )));
    }
    let neck = dataset.skeleton.neck()?;
    let mut params = init_params(model_cfg, derive_seed(train_cfg.seed, u64::MAX))?;
    let mut adam = Adam::new(train_cfg.adam);
    let mut metrics = match &outputs.metrics {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            writeln!(w, "step,loss,lr,wallclock_s")?;
            Some(w)
        }
        None => None,
    };
    let started = Instant::now();
    let mut losses = Vec::with_capacity(train_cfg.total_steps as usize);
    for step in 1..=train_cfg.total_steps {
        let batch = assemble_batch(dataset, train_cfg, neck, step)?;
        let lr = lr_schedule(step, train_cfg.base_lr, train_cfg.warmup_steps, train_cfg.total_steps);
        let loss = training_step(&mut params, &mut adam, model_cfg, &batch, lr)?;
        losses.push(loss);
        if step % train_cfg.log_interval == 0 {
            let elapsed = started.elapsed().as_secs_f64();
            log::info!("step {step} loss {loss:.6} lr {lr:.3e} ({elapsed:.1}s)");
            if let Some(w) = metrics.as_mut() {
                writeln!(w, "{step},{loss},{lr},{elapsed:.3}")?;
            }
        }
    }
    if let Some(mut w) = metrics {
        w.flush()?;
    }
    if let Some(path) = &outputs.checkpoint {
        save_checkpoint(&params, model_cfg, path)?;
    }
    Ok(TrainOutcome { params, losses })
}

/// Convenience wrapper reading the dataset from disk.
pub fn train_from_path(
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    dataset_path: impl AsRef<Path>,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome, TrainError> {
    let dataset = crate::synthdata::read_dataset(dataset_path)?;
    train(train_cfg, model_cfg, &dataset, outputs)
}
