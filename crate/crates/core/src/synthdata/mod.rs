//! Procedural multi-camera motion capture: skeleton motion, camera rigs,
//! noisy detections and the JSON-Lines dataset format.

mod io;
mod rig;
mod skeleton;

pub use io::{read_dataset, write_dataset, DATASET_FORMAT_VERSION};
pub use rig::{sample_cameras, simulate_detections, Detection, NoiseConfig, RigConfig};
pub(crate) use rig::sample_cameras_around;
pub use skeleton::{generate_motion, MotionConfig, SkeletonModel};

use nalgebra::{Matrix3, Vector3};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraParams, Point3};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("unsupported dataset format_version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },
    #[error("malformed record on line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("checksum mismatch on line {line}")]
    Checksum { line: usize },
}

/// Independent seed for stream `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Camera as stored on disk: row-major `K` and `R`, translation in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub k: [f64; 9],
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl CameraRecord {
    pub fn from_params(cam: &CameraParams) -> Self {
        let row_major = |m: &Matrix3<f64>| std::array::from_fn(|i| m[(i / 3, i % 3)]);
        Self { k: row_major(&cam.k), r: row_major(&cam.r), t: (cam.t * 1000.0).into() }
    }

    /// Camera in meters.
    pub fn to_params(&self) -> CameraParams {
        CameraParams {
            k: Matrix3::from_row_slice(&self.k),
            r: Matrix3::from_row_slice(&self.r),
            t: Vector3::from(self.t) / 1000.0,
        }
    }
}

/// One recorded take. Lengths are in millimeters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSequence {
    pub cameras: Vec<CameraRecord>,
    /// `[frame][joint]` ground truth in mm.
    pub gt_poses: Vec<Vec<[f64; 3]>>,
    /// `[frame][camera][joint]`.
    pub detections: Vec<Vec<Vec<Detection>>>,
    pub frame_rate: f64,
    pub seed: u64,
}

impl SceneSequence {
    pub fn num_frames(&self) -> usize {
        self.gt_poses.len()
    }

    pub fn num_cameras(&self) -> usize {
        self.cameras.len()
    }

    pub fn num_joints(&self) -> usize {
        self.gt_poses.first().map_or(0, Vec::len)
    }

    pub fn camera(&self, c: usize) -> CameraParams {
        self.cameras[c].to_params()
    }

    pub fn cameras_m(&self) -> Vec<CameraParams> {
        self.cameras.iter().map(CameraRecord::to_params).collect()
    }

    /// Ground truth of frame `t` in meters.
    pub fn gt_frame(&self, t: usize) -> Vec<Point3> {
        self.gt_poses[t].iter().map(|p| Vector3::from(*p) / 1000.0).collect()
    }

    pub fn gt_m(&self) -> Vec<Vec<Point3>> {
        (0..self.num_frames()).map(|t| self.gt_frame(t)).collect()
    }

    pub fn validate(&self) -> Result<(), String> {
        let (t, c, j) = (self.num_frames(), self.num_cameras(), self.num_joints());
        if t == 0 || c == 0 || j == 0 {
            return Err("sequence needs frames, cameras and joints".into());
        }
        if self.gt_poses.iter().any(|f| f.len() != j) {
            return Err("ground-truth frames have differing joint counts".into());
        }
        if self.detections.len() != t || self.detections.iter().any(|f| f.len() != c || f.iter().any(|v| v.len() != j)) {
            return Err(format!("detections must be {t}x{c}x{j}"));
        }
        for cam in &self.cameras {
            cam.to_params().validate().map_err(|e| e.to_string())?;
        }
        let bad = self.detections.iter().flatten().flatten().any(|d| {
            !(0.0..=1.0).contains(&d.confidence) || (d.visible && !(d.u.is_finite() && d.v.is_finite()))
        });
        if bad {
            return Err("detection with invalid confidence or coordinates".into());
        }
        if !(self.frame_rate > 0.0) {
            return Err("frame_rate must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub skeleton: SkeletonModel,
    pub frame_rate: f64,
    pub sequences: Vec<SceneSequence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub sequences: usize,
    pub frames: usize,
    pub cameras: usize,
    pub frame_rate: f64,
    pub seed: u64,
    pub skeleton: SkeletonModel,
    pub motion: MotionConfig,
    pub rig: RigConfig,
    pub noise: NoiseConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            sequences: 300,
            frames: 30,
            cameras: 8,
            frame_rate: 50.0,
            seed: 0,
            skeleton: SkeletonModel::default(),
            motion: MotionConfig::default(),
            rig: RigConfig::default(),
            noise: NoiseConfig::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.frames == 0 || self.cameras == 0 {
            return Err(SynthError::Config("frames and cameras must be at least 1".into()));
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return Err(SynthError::Config("frame_rate must be positive".into()));
        }
        self.skeleton.validate()?;
        self.skeleton.neck()?;
        self.motion.validate()?;
        self.rig.validate()?;
        self.noise.validate()
    }
}

/// One sequence as a pure function of `(config, seed)`.
pub fn generate_sequence(cfg: &GenConfig, seed: u64) -> SceneSequence {
    let poses = generate_motion(&cfg.skeleton, &cfg.motion, cfg.frames, cfg.frame_rate, derive_seed(seed, 0));
    let cameras = sample_cameras(cfg.cameras, &cfg.rig, derive_seed(seed, 1));
    let detections = simulate_detections(&poses, &cameras, &cfg.rig, &cfg.noise, derive_seed(seed, 2));
    SceneSequence {
        cameras: cameras.iter().map(CameraRecord::from_params).collect(),
        gt_poses: poses.iter().map(|f| f.iter().map(|p| (p * 1000.0).into()).collect()).collect(),
        detections,
        frame_rate: cfg.frame_rate,
        seed,
    }
}

/// `cfg.sequences` sequences; sequence `i` uses stream `i` of `cfg.seed`,
/// so the result does not depend on the thread count.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset, SynthError> {
    cfg.validate()?;
    let sequences = (0..cfg.sequences as u64)
        .into_par_iter()
        .map(|i| generate_sequence(cfg, derive_seed(cfg.seed, i)))
        .collect();
    Ok(Dataset { skeleton: cfg.skeleton.clone(), frame_rate: cfg.frame_rate, sequences })
}

/// Fresh detections for a stored sequence under different noise settings.
pub fn resimulate_detections(
    seq: &SceneSequence,
    rig: &RigConfig,
    noise: &NoiseConfig,
    seed: u64,
) -> Vec<Vec<Vec<Detection>>> {
    simulate_detections(&seq.gt_m(), &seq.cameras_m(), rig, noise, derive_seed(seed, seq.seed))
}
