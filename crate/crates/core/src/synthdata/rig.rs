use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use super::SynthError;
use crate::geometry::{project, CameraParams, Point3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigConfig {
    /// Half-width of the square capture area centered on the origin.
    pub scene_radius: f64,
    /// Cameras sit this far outside `scene_radius` (meters, sampled uniformly).
    pub distance_min: f64,
    pub distance_max: f64,
    pub height_min: f64,
    pub height_max: f64,
    pub focal_min: f64,
    pub focal_max: f64,
    pub image_width: f64,
    pub image_height: f64,
    /// Horizontal jitter of the look-at point around the origin.
    pub look_at_jitter: f64,
    pub look_at_height: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            scene_radius: 2.0,
            distance_min: 2.0,
            distance_max: 5.0,
            height_min: 0.5,
            height_max: 2.5,
            focal_min: 800.0,
            focal_max: 1200.0,
            image_width: 1000.0,
            image_height: 1000.0,
            look_at_jitter: 0.3,
            look_at_height: 1.0,
        }
    }
}

impl RigConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let ordered = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !(ordered(0.0, self.scene_radius)
            && ordered(0.0, self.distance_min)
            && ordered(self.distance_min, self.distance_max)
            && ordered(self.height_min, self.height_max)
            && ordered(f64::MIN_POSITIVE, self.focal_min)
            && ordered(self.focal_min, self.focal_max)
            && self.image_width > 0.0
            && self.image_height > 0.0
            && ordered(0.0, self.look_at_jitter))
        {
            return Err(SynthError::Config("invalid camera rig ranges".into()));
        }
        if self.scene_radius + self.distance_min <= self.look_at_jitter {
            return Err(SynthError::Config("cameras would overlap the look-at region".into()));
        }
        Ok(())
    }
}

/// `n` cameras around the capture area, azimuths stratified so the rig
/// surrounds the subject. Each looks at a jittered point near the origin.
pub fn sample_cameras(n: usize, rig: &RigConfig, seed: u64) -> Vec<CameraParams> {
    sample_cameras_around(n, rig, Point3::zeros(), &mut ChaCha8Rng::seed_from_u64(seed))
}

pub(crate) fn sample_cameras_around<R: Rng>(n: usize, rig: &RigConfig, center: Point3, rng: &mut R) -> Vec<CameraParams> {
    let offset = rng.random_range(0.0..TAU);
    (0..n)
        .map(|i| {
            let azimuth = offset + TAU * (i as f64 + rng.random_range(0.1..0.9)) / n as f64;
            let radius = rig.scene_radius + rng.random_range(rig.distance_min..=rig.distance_max);
            let height = rng.random_range(rig.height_min..=rig.height_max);
            let cam_center = center + Point3::new(radius * azimuth.cos(), radius * azimuth.sin(), height);
            let jitter = rig.look_at_jitter;
            let target = center
                + Point3::new(
                    rng.random_range(-jitter..=jitter),
                    rng.random_range(-jitter..=jitter),
                    rig.look_at_height,
                );
            let focal = rng.random_range(rig.focal_min..=rig.focal_max);
            let cx = rig.image_width / 2.0 + rng.random_range(-10.0..10.0);
            let cy = rig.image_height / 2.0 + rng.random_range(-10.0..10.0);
            let k = Matrix3::new(focal, 0.0, cx, 0.0, focal, cy, 0.0, 0.0, 1.0);
            CameraParams::look_at(k, cam_center, target).expect("horizontal offset keeps the view non-vertical")
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub pixel_noise_sigma: f64,
    pub occlusion_prob: f64,
    /// Share of occluded joints reported as outliers instead of dropped.
    pub outlier_prob: f64,
    pub outlier_sigma: f64,
    /// Confidence is `exp(-e / confidence_scale)` for a pixel error `e`.
    pub confidence_scale: f64,
    pub confidence_floor: f64,
    pub outlier_conf_min: f64,
    pub outlier_conf_max: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            pixel_noise_sigma: 2.0,
            occlusion_prob: 0.1,
            outlier_prob: 0.5,
            outlier_sigma: 40.0,
            confidence_scale: 5.0,
            confidence_floor: 0.05,
            outlier_conf_min: 0.05,
            outlier_conf_max: 0.3,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(SynthError::Config(format!("{name} = {p} is not a probability")))
            }
        };
        prob("occlusion_prob", self.occlusion_prob)?;
        prob("outlier_prob", self.outlier_prob)?;
        prob("confidence_floor", self.confidence_floor)?;
        if self.confidence_floor == 0.0 {
            return Err(SynthError::Config("confidence_floor must be positive".into()));
        }
        if ![self.pixel_noise_sigma, self.outlier_sigma].iter().all(|s| *s >= 0.0 && s.is_finite()) {
            return Err(SynthError::Config("noise sigmas must be finite and non-negative".into()));
        }
        if !(self.confidence_scale > 0.0 && self.confidence_scale.is_finite()) {
            return Err(SynthError::Config("confidence_scale must be positive".into()));
        }
        if !(0.0 < self.outlier_conf_min && self.outlier_conf_min <= self.outlier_conf_max && self.outlier_conf_max <= 1.0) {
            return Err(SynthError::Config("outlier confidence range must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// One 2D joint detection. Invisible detections carry zeros.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64, f64, bool)", into = "(f64, f64, f64, bool)")]
pub struct Detection {
    pub u: f64,
    pub v: f64,
    pub confidence: f64,
    pub visible: bool,
}

impl Detection {
    pub const HIDDEN: Detection = Detection { u: 0.0, v: 0.0, confidence: 0.0, visible: false };
}

impl From<(f64, f64, f64, bool)> for Detection {
    fn from((u, v, confidence, visible): (f64, f64, f64, bool)) -> Self {
        Self { u, v, confidence, visible }
    }
}

impl From<Detection> for (f64, f64, f64, bool) {
    fn from(d: Detection) -> Self {
        (d.u, d.v, d.confidence, d.visible)
    }
}

fn in_frame(rig: &RigConfig, u: f64, v: f64) -> bool {
    (0.0..rig.image_width).contains(&u) && (0.0..rig.image_height).contains(&v)
}

/// Noisy detections `[frame][camera][joint]` for world poses in meters.
pub fn simulate_detections(
    poses: &[Vec<Point3>],
    cameras: &[CameraParams],
    rig: &RigConfig,
    noise: &NoiseConfig,
    seed: u64,
) -> Vec<Vec<Vec<Detection>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixel = Normal::new(0.0, noise.pixel_noise_sigma).expect("validated sigma");
    let outlier = Normal::new(0.0, noise.outlier_sigma).expect("validated sigma");
    poses
        .iter()
        .map(|pose| {
            cameras
                .iter()
                .map(|cam| {
                    pose.iter()
                        .map(|p| {
                            // fixed draw count per entry keeps streams aligned across settings
                            let occluded = rng.random::<f64>() < noise.occlusion_prob;
                            let as_outlier = rng.random::<f64>() < noise.outlier_prob;
                            let (nu, nv) = (pixel.sample(&mut rng), pixel.sample(&mut rng));
                            let (ou, ov) = (outlier.sample(&mut rng), outlier.sample(&mut rng));
                            let outlier_conf = rng.random_range(noise.outlier_conf_min..=noise.outlier_conf_max);
                            let Ok((u, v)) = project(cam, p) else { return Detection::HIDDEN };
                            if !in_frame(rig, u, v) {
                                return Detection::HIDDEN;
                            }
                            let det = if occluded {
                                if !as_outlier {
                                    return Detection::HIDDEN;
                                }
                                Detection { u: u + ou, v: v + ov, confidence: outlier_conf, visible: true }
                            } else {
                                let e = nu.hypot(nv);
                                let confidence = (-e / noise.confidence_scale).exp().max(noise.confidence_floor);
                                Detection { u: u + nu, v: v + nv, confidence, visible: true }
                            };
                            if in_frame(rig, det.u, det.v) {
                                det
                            } else {
                                Detection::HIDDEN
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}
