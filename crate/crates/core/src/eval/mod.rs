//! MPJPE, the causal streaming driver, the triangulation baseline and the
//! camera-subset, occlusion and time-window sweeps.

mod report;

pub use report::{write_report_csv, write_report_json, EvalReport, EvalRow, REPORT_CSV_HEADER};

use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{triangulate_dlt, CameraParams, Observation, Point3};
use crate::model::{predict, ModelConfig, ModelError, QuerySpec};
use crate::synthdata::{derive_seed, resimulate_detections, Dataset, Detection, NoiseConfig, RigConfig, SceneSequence, SynthError};
use crate::tensor::ParamStore;
use crate::training::{floor_projection, window_tokens, SceneTransform, TrainingWindow};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] SynthError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Detections for `[frame][camera][joint]`.
pub type DetectionArray = Vec<Vec<Vec<Detection>>>;

/// Mean Euclidean joint error in millimeters for poses given in meters.
pub fn mpjpe(pred: &[Vec<Point3>], gt: &[Vec<Point3>]) -> Result<f64, EvalError> {
    if pred.len() != gt.len() || pred.iter().zip(gt).any(|(a, b)| a.len() != b.len()) {
        return Err(EvalError::Shape("prediction and ground truth differ in shape".into()));
    }
    let n: usize = gt.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(EvalError::Shape("empty pose sequence".into()));
    }
    let total: f64 = pred.iter().flatten().zip(gt.iter().flatten()).map(|(a, b)| (a - b).norm()).sum();
    Ok(1000.0 * total / n as f64)
}

/// How each frame's centering point is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    /// Triangulated neck on the first frame, then the previous prediction.
    Recursive,
    /// Triangulated neck on every frame (stateless).
    TriangulateEachFrame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub t_in: usize,
    pub centering: Centering,
    /// Used when the neck cannot be triangulated.
    pub fallback_center: [f64; 3],
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self { t_in: 9, centering: Centering::Recursive, fallback_center: [0.0; 3] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalOutput {
    /// One world-frame pose per input frame, meters.
    pub poses: Vec<Vec<Point3>>,
    /// Centering point of each frame.
    pub centers: Vec<Point3>,
    /// Frames where the fallback center was used.
    pub fallback_frames: Vec<usize>,
    /// Frames without any detection in the window; their pose repeats the
    /// previous output (or sits at the center).
    pub empty_frames: Vec<usize>,
}

fn triangulated_neck(
    detections: &DetectionArray,
    cams_m: &[CameraParams],
    cameras: &[usize],
    frame: usize,
    neck: usize,
) -> Option<Point3> {
    let obs: Vec<Observation> = cameras
        .iter()
        .filter_map(|&c| {
            let d = detections[frame][c][neck];
            d.visible.then_some(Observation { camera: &cams_m[c], pixel: (d.u, d.v), confidence: d.confidence })
        })
        .collect();
    triangulate_dlt(&obs, true).ok().filter(|p| p.iter().all(|v| v.is_finite()))
}

/// Streaming inference: frame `t` sees only frames `t + 1 − t_in ..= t`,
/// is centered without rotation, decodes the latest frame only and is
/// mapped back to the world frame.
pub fn causal_infer<F: crate::tensor::Real>(
    params: &ParamStore<F>,
    cfg: &ModelConfig,
    cams_m: &[CameraParams],
    detections: &DetectionArray,
    cameras: &[usize],
    neck: usize,
    opts: &InferenceOptions,
) -> Result<CausalOutput, EvalError> {
    if opts.t_in == 0 {
        return Err(EvalError::Config("t_in must be at least 1".into()));
    }
    if detections.is_empty() {
        return Err(EvalError::Shape("no frames to infer".into()));
    }
    if let Some(&c) = cameras.iter().find(|&&c| c >= cams_m.len()) {
        return Err(EvalError::Shape(format!("camera {c} out of range")));
    }
    if detections.iter().any(|f| f.len() != cams_m.len() || f.iter().any(|v| v.len() != cfg.num_joints)) {
        return Err(EvalError::Shape(format!(
            "detections must be [frames][{}][{}] to match cameras and model",
            cams_m.len(),
            cfg.num_joints
        )));
    }
    let query = QuerySpec::frames(cfg.num_joints, 1);
    let mut out = CausalOutput { poses: Vec::new(), centers: Vec::new(), fallback_frames: Vec::new(), empty_frames: Vec::new() };
    let fallback = Point3::from(opts.fallback_center);
    for t in 0..detections.len() {
        let previous = out.poses.last().map(|p: &Vec<Point3>| p[neck]);
        let center = match (opts.centering, previous) {
            (Centering::Recursive, Some(prev)) => floor_projection(&prev),
            _ => match triangulated_neck(detections, cams_m, cameras, t, neck) {
                Some(p) => floor_projection(&p),
                None => {
                    out.fallback_frames.push(t);
                    floor_projection(&fallback)
                }
            },
        };
        let start = (t + 1).saturating_sub(opts.t_in);
        let window = TrainingWindow { tokens: window_tokens(detections, cams_m, start..t + 1, cameras), gt: Vec::new() };
        let transform = SceneTransform::new(center, 0.0);
        let centered = crate::training::apply_transform(&window, &transform);
        let pose = if centered.tokens.is_empty() {
            out.empty_frames.push(t);
            out.poses.last().cloned().unwrap_or_else(|| vec![center; cfg.num_joints])
        } else {
            predict(params, cfg, &centered.tokens, &query)?.iter().map(|p| transform.invert_point(p)).collect()
        };
        out.poses.push(pose);
        out.centers.push(center);
    }
    Ok(out)
}

/// Per-frame, per-joint weighted DLT over the selected cameras. `None`
/// where fewer than two views see the joint or the system is degenerate.
pub fn triangulation_baseline(
    cams_m: &[CameraParams],
    detections: &DetectionArray,
    cameras: &[usize],
) -> Vec<Vec<Option<Point3>>> {
    detections
        .iter()
        .map(|frame| {
            let joints = frame.first().map_or(0, Vec::len);
            (0..joints)
                .map(|j| {
                    let obs: Vec<Observation> = cameras
                        .iter()
                        .filter_map(|&c| {
                            let d = frame[c][j];
                            d.visible.then_some(Observation { camera: &cams_m[c], pixel: (d.u, d.v), confidence: d.confidence })
                        })
                        .collect();
                    if obs.len() < 2 {
                        return None;
                    }
                    triangulate_dlt(&obs, true).ok()
                })
                .collect()
        })
        .collect()
}

/// Error sums kept per joint so aggregation is a plain sum.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorAccumulator {
    pub sum_mm: Vec<f64>,
    pub count: Vec<usize>,
    pub poses: usize,
    pub excluded: usize,
    pub fallback_frames: usize,
}

impl ErrorAccumulator {
    pub fn new(joints: usize) -> Self {
        Self { sum_mm: vec![0.0; joints], count: vec![0; joints], poses: 0, excluded: 0, fallback_frames: 0 }
    }

    pub fn merge(&mut self, other: &Self) {
        self.sum_mm.iter_mut().zip(&other.sum_mm).for_each(|(a, b)| *a += b);
        self.count.iter_mut().zip(&other.count).for_each(|(a, b)| *a += b);
        self.poses += other.poses;
        self.excluded += other.excluded;
        self.fallback_frames += other.fallback_frames;
    }

    /// Mean over all counted joints; NaN when nothing was counted.
    pub fn mpjpe_mm(&self) -> f64 {
        let n: usize = self.count.iter().sum();
        if n == 0 {
            f64::NAN
        } else {
            self.sum_mm.iter().sum::<f64>() / n as f64
        }
    }

    pub fn per_joint_mm(&self) -> Vec<f64> {
        self.sum_mm.iter().zip(&self.count).map(|(s, &c)| if c == 0 { f64::NAN } else { s / c as f64 }).collect()
    }

    pub fn excluded_fraction(&self) -> f64 {
        let total = self.excluded + self.count.iter().sum::<usize>();
        if total == 0 {
            0.0
        } else {
            self.excluded as f64 / total as f64
        }
    }
}

/// One sequence together with the detections to evaluate on.
#[derive(Debug, Clone)]
pub struct EvalSequence<'a> {
    pub seq: &'a SceneSequence,
    pub detections: Cow<'a, DetectionArray>,
}

/// Stored detections, or fresh ones under `noise` keyed by `seed`.
pub fn prepare_sequences<'a>(
    dataset: &'a Dataset,
    resimulate: Option<(&RigConfig, &NoiseConfig)>,
    seed: u64,
) -> Vec<EvalSequence<'a>> {
    dataset
        .sequences
        .par_iter()
        .map(|seq| EvalSequence {
            seq,
            detections: match resimulate {
                None => Cow::Borrowed(&seq.detections),
                Some((rig, noise)) => Cow::Owned(resimulate_detections(seq, rig, noise, seed)),
            },
        })
        .collect()
}

/// Model error over `sequences` with the cameras in `cameras`.
pub fn evaluate_model<F: crate::tensor::Real>(
    params: &ParamStore<F>,
    cfg: &ModelConfig,
    sequences: &[EvalSequence<'_>],
    cameras: &[usize],
    neck: usize,
    opts: &InferenceOptions,
) -> Result<ErrorAccumulator, EvalError> {
    let parts: Vec<Result<ErrorAccumulator, EvalError>> = sequences
        .par_iter()
        .map(|s| {
            let cams = s.seq.cameras_m();
            let out = causal_infer(params, cfg, &cams, &s.detections, cameras, neck, opts)?;
            let mut acc = ErrorAccumulator::new(cfg.num_joints);
            for (t, pose) in out.poses.iter().enumerate() {
                for (j, (p, g)) in pose.iter().zip(s.seq.gt_frame(t)).enumerate() {
                    acc.sum_mm[j] += 1000.0 * (p - g).norm();
                    acc.count[j] += 1;
                }
                acc.poses += 1;
            }
            acc.fallback_frames = out.fallback_frames.len();
            Ok(acc)
        })
        .collect();
    let mut total = ErrorAccumulator::new(cfg.num_joints);
    for p in parts {
        total.merge(&p?);
    }
    Ok(total)
}

/// Baseline error over reconstructible joints only.
pub fn evaluate_baseline(sequences: &[EvalSequence<'_>], cameras: &[usize], joints: usize) -> ErrorAccumulator {
    let parts: Vec<ErrorAccumulator> = sequences
        .par_iter()
        .map(|s| {
            let cams = s.seq.cameras_m();
            let mut acc = ErrorAccumulator::new(joints);
            for (t, frame) in triangulation_baseline(&cams, &s.detections, cameras).iter().enumerate() {
                let gt = s.seq.gt_frame(t);
                let mut any = false;
                for (j, p) in frame.iter().enumerate() {
                    match p {
                        Some(p) => {
                            acc.sum_mm[j] += 1000.0 * (p - gt[j]).norm();
                            acc.count[j] += 1;
                            any = true;
                        }
                        None => acc.excluded += 1,
                    }
                }
                acc.poses += usize::from(any);
            }
            acc
        })
        .collect();
    let mut total = ErrorAccumulator::new(joints);
    parts.iter().for_each(|p| total.merge(p));
    total
}

/// All size-`n` subsets of `0..c` in lexicographic order.
pub fn camera_combinations(c: usize, n: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, c: usize, n: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for i in start..c {
            if c - i < n - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, c, n, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if n <= c {
        rec(0, c, n, &mut Vec::with_capacity(n), &mut out);
    }
    out
}

/// Every combination, or a seeded sample of `max` of them kept in
/// lexicographic order.
pub fn select_combinations(c: usize, n: usize, max: Option<usize>, seed: u64) -> Vec<Vec<usize>> {
    let mut all = camera_combinations(c, n);
    if let Some(max) = max {
        if all.len() > max {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, (c * 1000 + n) as u64));
            let mut idx: Vec<usize> = (0..all.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(max);
            idx.sort_unstable();
            all = idx.into_iter().map(|i| all[i].clone()).collect();
        }
    }
    all
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub seed: u64,
    pub n_cams: Vec<usize>,
    pub t_in: usize,
    /// Extra occlusion levels, evaluated on re-simulated detections.
    pub occlusion_probs: Vec<f64>,
    /// Camera count used by the occlusion and time-window sweeps.
    pub sweep_cams: usize,
    pub t_in_values: Vec<usize>,
    /// Cap on camera combinations per camera count (seeded sample).
    pub max_combinations: Option<usize>,
    /// Noise model for re-simulation; its occlusion_prob is replaced per level.
    pub noise: NoiseConfig,
    pub rig: RigConfig,
    pub baseline_only: bool,
    /// Occlusion level the stored detections were generated with; only
    /// used to label rows.
    pub dataset_occlusion_prob: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_cams: vec![2, 4],
            t_in: 9,
            occlusion_probs: vec![0.0, 0.3],
            sweep_cams: 4,
            t_in_values: vec![1, 2, 3, 6, 9],
            max_combinations: None,
            noise: NoiseConfig::default(),
            rig: RigConfig::default(),
            baseline_only: false,
            dataset_occlusion_prob: NoiseConfig::default().occlusion_prob,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.t_in == 0 || self.t_in_values.contains(&0) {
            return Err(EvalError::Config("t_in values must be at least 1".into()));
        }
        if self.n_cams.contains(&0) || self.sweep_cams == 0 {
            return Err(EvalError::Config("camera counts must be at least 1".into()));
        }
        if self.occlusion_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(EvalError::Config("occlusion probabilities must lie in [0, 1]".into()));
        }
        if self.max_combinations == Some(0) {
            return Err(EvalError::Config("max_combinations must be at least 1".into()));
        }
        self.noise.validate()?;
        self.rig.validate()?;
        Ok(())
    }
}

/// Trained weights plus their architecture.
#[derive(Clone, Copy)]
pub struct ModelRef<'a> {
    pub params: &'a ParamStore<f32>,
    pub cfg: &'a ModelConfig,
}

fn combo_label(kind: &str, method: &str, combo: &[usize]) -> String {
    let cams: Vec<String> = combo.iter().map(|c| format!("c{c}")).collect();
    format!("{kind}:{method}:{}", cams.join("-"))
}

#[allow(clippy::too_many_arguments)]
fn rows_for_condition(
    model: Option<ModelRef<'_>>,
    sequences: &[EvalSequence<'_>],
    combos: &[Vec<usize>],
    kind: &str,
    joints: usize,
    neck: usize,
    t_in: usize,
    occl_prob: f64,
    with_baseline: bool,
) -> Result<Vec<EvalRow>, EvalError> {
    let mut rows = Vec::new();
    for combo in combos {
        if let Some(m) = model {
            let opts = InferenceOptions { t_in, ..InferenceOptions::default() };
            let acc = evaluate_model(m.params, m.cfg, sequences, combo, neck, &opts)?;
            rows.push(EvalRow::from_acc(combo_label(kind, "model", combo), combo.len(), t_in, occl_prob, &acc));
        }
        if with_baseline {
            let acc = evaluate_baseline(sequences, combo, joints);
            rows.push(EvalRow::from_acc(combo_label(kind, "baseline", combo), combo.len(), t_in, occl_prob, &acc));
        }
    }
    Ok(rows)
}

fn checked_cameras(dataset: &Dataset, n: usize) -> Result<usize, EvalError> {
    let c = dataset.sequences.iter().map(SceneSequence::num_cameras).min().unwrap_or(0);
    if n > c {
        return Err(EvalError::Config(format!("{n} cameras requested but sequences have {c}")));
    }
    Ok(c)
}

fn check_model(model: Option<ModelRef<'_>>, dataset: &Dataset) -> Result<(), EvalError> {
    if let Some(m) = model {
        if m.cfg.num_joints != dataset.skeleton.num_joints() {
            return Err(EvalError::Shape(format!(
                "model predicts {} joints, dataset has {}",
                m.cfg.num_joints,
                dataset.skeleton.num_joints()
            )));
        }
    }
    Ok(())
}

/// One row per method and camera combination of size `n_cams`.
pub fn eval_camera_subsets(
    model: Option<ModelRef<'_>>,
    dataset: &Dataset,
    n_cams: usize,
    cfg: &EvalConfig,
) -> Result<Vec<EvalRow>, EvalError> {
    check_model(model, dataset)?;
    let c = checked_cameras(dataset, n_cams)?;
    let neck = dataset.skeleton.neck()?;
    let sequences = prepare_sequences(dataset, None, cfg.seed);
    let combos = select_combinations(c, n_cams, cfg.max_combinations, cfg.seed);
    let occl = cfg.dataset_occlusion_prob;
    rows_for_condition(model, &sequences, &combos, "cams", dataset.skeleton.num_joints(), neck, cfg.t_in, occl, true)
}

/// Re-simulated detections at each occlusion level, model and baseline.
pub fn eval_occlusion(
    model: Option<ModelRef<'_>>,
    dataset: &Dataset,
    occlusion_probs: &[f64],
    cfg: &EvalConfig,
) -> Result<Vec<EvalRow>, EvalError> {
    check_model(model, dataset)?;
    let c = checked_cameras(dataset, cfg.sweep_cams)?;
    let neck = dataset.skeleton.neck()?;
    let combos = select_combinations(c, cfg.sweep_cams, cfg.max_combinations, cfg.seed);
    let mut rows = Vec::new();
    for &p in occlusion_probs {
        let noise = NoiseConfig { occlusion_prob: p, ..cfg.noise.clone() };
        noise.validate()?;
        let sequences = prepare_sequences(dataset, Some((&cfg.rig, &noise)), cfg.seed);
        let kind = format!("occl{p}");
        rows.extend(rows_for_condition(
            model,
            &sequences,
            &combos,
            &kind,
            dataset.skeleton.num_joints(),
            neck,
            cfg.t_in,
            p,
            true,
        )?);
    }
    Ok(rows)
}

/// Model rows for each input window length on the stored detections.
pub fn eval_time_frames(
    model: ModelRef<'_>,
    dataset: &Dataset,
    t_in_values: &[usize],
    cfg: &EvalConfig,
) -> Result<Vec<EvalRow>, EvalError> {
    check_model(Some(model), dataset)?;
    let c = checked_cameras(dataset, cfg.sweep_cams)?;
    let neck = dataset.skeleton.neck()?;
    let sequences = prepare_sequences(dataset, None, cfg.seed);
    let combos = select_combinations(c, cfg.sweep_cams, cfg.max_combinations, cfg.seed);
    let occl = cfg.dataset_occlusion_prob;
    let mut rows = Vec::new();
    for &t_in in t_in_values {
        if t_in == 0 {
            return Err(EvalError::Config("t_in must be at least 1".into()));
        }
        let kind = format!("tin{t_in}");
        rows.extend(rows_for_condition(
            Some(model),
            &sequences,
            &combos,
            &kind,
            dataset.skeleton.num_joints(),
            neck,
            t_in,
            occl,
            false,
        )?);
    }
    Ok(rows)
}

/// Pose-weighted mean over rows whose condition starts with `prefix`.
pub fn mean_mpjpe(rows: &[EvalRow], prefix: &str) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for r in rows.iter().filter(|r| r.condition.starts_with(prefix) && r.mpjpe_mm.is_finite()) {
        sum += r.mpjpe_mm * r.n_poses as f64;
        n += r.n_poses;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Full sweep driven by `cfg`.
pub fn run_evaluation(model: Option<ModelRef<'_>>, dataset: &Dataset, cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let model = if cfg.baseline_only { None } else { model };
    let mut rows = Vec::new();
    for &n in &cfg.n_cams {
        rows.extend(eval_camera_subsets(model, dataset, n, cfg)?);
    }
    if !cfg.occlusion_probs.is_empty() {
        rows.extend(eval_occlusion(model, dataset, &cfg.occlusion_probs, cfg)?);
    }
    if let Some(m) = model {
        if !cfg.t_in_values.is_empty() {
            rows.extend(eval_time_frames(m, dataset, &cfg.t_in_values, cfg)?);
        }
    }
    Ok(EvalReport::new(cfg.clone(), model.map(|m| m.cfg.clone()), rows))
}
