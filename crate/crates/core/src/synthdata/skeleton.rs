use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use super::SynthError;
use crate::geometry::Point3;

/// Kinematic tree with rest-pose bone offsets (meters, z up, facing +y).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonModel {
    pub names: Vec<String>,
    /// `None` for the root.
    pub parents: Vec<Option<usize>>,
    /// Offset of each joint from its parent in the parent's frame.
    pub offsets: Vec<[f64; 3]>,
}

impl Default for SkeletonModel {
    fn default() -> Self {
        Self::h36m17()
    }
}

impl SkeletonModel {
    /// 17-joint layout in the usual Human3.6M order.
    pub fn h36m17() -> Self {
        let spec: [(&str, Option<usize>, [f64; 3]); 17] = [
            ("pelvis", None, [0.0, 0.0, 0.0]),
            ("right_hip", Some(0), [-0.13, 0.0, 0.0]),
            ("right_knee", Some(1), [0.0, 0.0, -0.44]),
            ("right_ankle", Some(2), [0.0, 0.0, -0.43]),
            ("left_hip", Some(0), [0.13, 0.0, 0.0]),
            ("left_knee", Some(4), [0.0, 0.0, -0.44]),
            ("left_ankle", Some(5), [0.0, 0.0, -0.43]),
            ("spine", Some(0), [0.0, 0.0, 0.23]),
            ("neck", Some(7), [0.0, 0.0, 0.25]),
            ("nose", Some(8), [0.0, 0.08, 0.10]),
            ("head", Some(9), [0.0, -0.04, 0.12]),
            ("left_shoulder", Some(8), [0.17, 0.0, -0.03]),
            ("left_elbow", Some(11), [0.0, 0.0, -0.28]),
            ("left_wrist", Some(12), [0.0, 0.0, -0.25]),
            ("right_shoulder", Some(8), [-0.17, 0.0, -0.03]),
            ("right_elbow", Some(14), [0.0, 0.0, -0.28]),
            ("right_wrist", Some(15), [0.0, 0.0, -0.25]),
        ];
        Self {
            names: spec.iter().map(|s| s.0.to_string()).collect(),
            parents: spec.iter().map(|s| s.1).collect(),
            offsets: spec.iter().map(|s| s.2).collect(),
        }
    }

    pub fn num_joints(&self) -> usize {
        self.names.len()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn neck(&self) -> Result<usize, SynthError> {
        self.joint_index("neck").ok_or_else(|| SynthError::Config("skeleton has no joint named \"neck\"".into()))
    }

    pub fn bone_lengths(&self) -> Vec<f64> {
        self.offsets.iter().map(|o| Vector3::from(*o).norm()).collect()
    }

    /// Checks: one root, parents precede children, non-root bones have
    /// positive length.
    pub fn validate(&self) -> Result<(), SynthError> {
        let n = self.names.len();
        if n == 0 || self.parents.len() != n || self.offsets.len() != n {
            return Err(SynthError::Config("skeleton arrays must be non-empty and equally long".into()));
        }
        if self.parents.iter().filter(|p| p.is_none()).count() != 1 || self.parents[0].is_some() {
            return Err(SynthError::Config("skeleton needs exactly one root at index 0".into()));
        }
        for (j, p) in self.parents.iter().enumerate().skip(1) {
            let p = p.expect("single root checked");
            if p >= j {
                return Err(SynthError::Config(format!("joint {j} has parent {p}; parents must come first")));
            }
            let len = Vector3::from(self.offsets[j]).norm();
            if !(len > 0.0 && len.is_finite()) {
                return Err(SynthError::Config(format!("bone {j} has non-positive length")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionConfig {
    /// The root stays within this distance of the origin along x and y.
    pub root_extent: f64,
    pub root_height: f64,
    /// Peak local joint rotation per axis, radians.
    pub joint_amplitude: f64,
    /// Highest joint oscillation frequency, Hz.
    pub max_joint_freq: f64,
    /// Highest root trajectory frequency, Hz.
    pub max_root_freq: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self { root_extent: 1.0, root_height: 0.92, joint_amplitude: 0.35, max_joint_freq: 1.2, max_root_freq: 0.25 }
    }
}

impl MotionConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let vals = [self.root_extent, self.root_height, self.joint_amplitude, self.max_joint_freq, self.max_root_freq];
        if vals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SynthError::Config("motion parameters must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct Wave {
    amp: f64,
    freq: f64,
    phase: f64,
}

fn waves(rng: &mut ChaCha8Rng, n: usize, total_amp: f64, min_freq: f64, max_freq: f64) -> Vec<Wave> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    raw.iter()
        .map(|&a| Wave {
            amp: total_amp * a / sum,
            freq: rng.random_range(min_freq..=max_freq.max(min_freq)),
            phase: rng.random_range(0.0..TAU),
        })
        .collect()
}

fn eval(ws: &[Wave], t: f64) -> f64 {
    ws.iter().map(|w| w.amp * (TAU * w.freq * t + w.phase).sin()).sum()
}

/// Forward-kinematics motion: a low-frequency Fourier root trajectory,
/// slowly turning heading and smoothly oscillating joint rotations.
/// Returns `frames` poses of `num_joints` world points in meters.
pub fn generate_motion(
    skeleton: &SkeletonModel,
    motion: &MotionConfig,
    frames: usize,
    frame_rate: f64,
    seed: u64,
) -> Vec<Vec<Point3>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let root_freq_lo = motion.max_root_freq * 0.2;
    let root_x = waves(&mut rng, 3, motion.root_extent, root_freq_lo, motion.max_root_freq);
    let root_y = waves(&mut rng, 3, motion.root_extent, root_freq_lo, motion.max_root_freq);
    let bob = waves(&mut rng, 1, 0.03, 0.5, 1.5);
    let heading0 = rng.random_range(0.0..TAU);
    let heading = waves(&mut rng, 2, 1.5, 0.02, 0.15);
    let joint_freq_lo = motion.max_joint_freq * 0.15;
    let joint_waves: Vec<[Vec<Wave>; 3]> = (0..skeleton.num_joints())
        .map(|_| std::array::from_fn(|_| waves(&mut rng, 2, motion.joint_amplitude, joint_freq_lo, motion.max_joint_freq)))
        .collect();
    let t0 = rng.random_range(0.0..100.0);

    let offsets: Vec<Vector3<f64>> = skeleton.offsets.iter().map(|o| Vector3::from(*o)).collect();
    (0..frames)
        .map(|f| {
            let t = t0 + f as f64 / frame_rate;
            let mut world_rot = vec![Rotation3::identity(); skeleton.num_joints()];
            let mut pos = vec![Point3::zeros(); skeleton.num_joints()];
            for j in 0..skeleton.num_joints() {
                let [ax, ay, az] = &joint_waves[j];
                match skeleton.parents[j] {
                    None => {
                        let tilt = Rotation3::from_euler_angles(0.2 * eval(ax, t), 0.2 * eval(ay, t), 0.0);
                        world_rot[j] = Rotation3::from_axis_angle(&Vector3::z_axis(), heading0 + eval(&heading, t)) * tilt;
                        pos[j] = Point3::new(eval(&root_x, t), eval(&root_y, t), motion.root_height + eval(&bob, t));
                    }
                    Some(p) => {
                        let local = Rotation3::from_euler_angles(eval(ax, t), eval(ay, t), eval(az, t));
                        pos[j] = pos[p] + world_rot[p] * offsets[j];
                        world_rot[j] = world_rot[p] * local;
                    }
                }
            }
            pos
        })
        .collect()
}
