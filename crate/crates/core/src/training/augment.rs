use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use crate::geometry::{pixel_to_ray, project, CameraParams, PluckerRay, Point3};
use crate::model::ObservationToken;
use crate::synthdata::{sample_cameras_around, Detection, RigConfig};

/// Rigid map `x ↦ Rz(yaw) (x − translation)` into the body-centered frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneTransform {
    pub translation: [f64; 3],
    pub yaw: f64,
}

impl SceneTransform {
    pub fn new(translation: Point3, yaw: f64) -> Self {
        Self { translation: translation.into(), yaw }
    }

    pub fn identity() -> Self {
        Self::new(Point3::zeros(), 0.0)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        *Rotation3::from_axis_angle(&Vector3::z_axis(), self.yaw).matrix()
    }

    pub fn origin(&self) -> Point3 {
        Vector3::from(self.translation)
    }

    pub fn apply_point(&self, p: &Point3) -> Point3 {
        self.rotation() * (p - self.origin())
    }

    pub fn apply_ray(&self, r: &PluckerRay) -> PluckerRay {
        r.transformed(&self.rotation(), &self.origin())
    }

    /// Maps a centered-frame point back to the world.
    pub fn invert_point(&self, p: &Point3) -> Point3 {
        self.rotation().transpose() * p + self.origin()
    }
}

/// Tokens and ground truth for a window of consecutive frames.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    pub tokens: Vec<ObservationToken>,
    /// `[frame][joint]`, meters; the last frame has `rel_time = 0`.
    pub gt: Vec<Vec<Point3>>,
}

/// Rays for the visible detections of `frames` in the chosen `cameras`
/// (world frame). `rel_time` counts back from the last frame of the range.
pub fn window_tokens(
    detections: &[Vec<Vec<Detection>>],
    cams_m: &[CameraParams],
    frames: std::ops::Range<usize>,
    cameras: &[usize],
) -> Vec<ObservationToken> {
    let last = frames.end as i32 - 1;
    let mut tokens = Vec::new();
    for t in frames {
        for &c in cameras {
            for (j, d) in detections[t][c].iter().enumerate() {
                if !d.visible {
                    continue;
                }
                let Ok(ray) = pixel_to_ray(&cams_m[c], d.u, d.v) else { continue };
                tokens.push(ObservationToken { joint_id: j, camera_id: c, rel_time: t as i32 - last, ray, confidence: d.confidence });
            }
        }
    }
    tokens
}

/// Floor (z = 0) projection of a point.
pub fn floor_projection(p: &Point3) -> Point3 {
    Point3::new(p.x, p.y, 0.0)
}

fn uniform_disk<R: Rng>(radius: f64, rng: &mut R) -> Point3 {
    let r = radius * rng.random::<f64>().sqrt();
    let a = rng.random_range(0.0..TAU);
    Point3::new(r * a.cos(), r * a.sin(), 0.0)
}

/// Training-time centering: the floor projection of the neck at a random
/// frame, jittered inside a disk of `noise_radius`, plus a random yaw when
/// `random_yaw` is set.
pub fn center_scene<R: Rng>(
    window: &TrainingWindow,
    neck: usize,
    noise_radius: f64,
    random_yaw: bool,
    rng: &mut R,
) -> (TrainingWindow, SceneTransform) {
    let t = rng.random_range(0..window.gt.len());
    let center = floor_projection(&window.gt[t][neck]) + uniform_disk(noise_radius, rng);
    let yaw = if random_yaw { rng.random_range(0.0..TAU) } else { 0.0 };
    let transform = SceneTransform::new(center, yaw);
    (apply_transform(window, &transform), transform)
}

pub fn apply_transform(window: &TrainingWindow, transform: &SceneTransform) -> TrainingWindow {
    let (rot, origin) = (transform.rotation(), transform.origin());
    TrainingWindow {
        tokens: window.tokens.iter().map(|t| ObservationToken { ray: t.ray.transformed(&rot, &origin), ..*t }).collect(),
        gt: window.gt.iter().map(|f| f.iter().map(|p| rot * (p - origin)).collect()).collect(),
    }
}

/// Exact rays from `n` freshly sampled cameras (around the origin of the
/// centered frame) through every ground-truth joint, confidence 1. A
/// positive `pixel_jitter` perturbs the pixel before back-projection.
pub fn add_synthetic_views<R: Rng>(
    gt: &[Vec<Point3>],
    n: usize,
    rig: &RigConfig,
    first_camera_id: usize,
    pixel_jitter: f64,
    rng: &mut R,
) -> Vec<ObservationToken> {
    if n == 0 {
        return Vec::new();
    }
    let cameras = sample_cameras_around(n, rig, Point3::zeros(), rng);
    let last = gt.len() as i32 - 1;
    let mut tokens = Vec::with_capacity(n * gt.len() * gt.first().map_or(0, Vec::len));
    for (c, cam) in cameras.iter().enumerate() {
        let center = cam.center();
        for (t, frame) in gt.iter().enumerate() {
            for (j, p) in frame.iter().enumerate() {
                let ray = if pixel_jitter > 0.0 {
                    let jittered = project(cam, p).ok().and_then(|(u, v)| {
                        let du = pixel_jitter * (rng.random::<f64>() * 2.0 - 1.0);
                        let dv = pixel_jitter * (rng.random::<f64>() * 2.0 - 1.0);
                        pixel_to_ray(cam, u + du, v + dv).ok()
                    });
                    jittered.unwrap_or_else(|| PluckerRay::from_point_direction(&center, &(p - center)))
                } else {
                    PluckerRay::from_point_direction(&center, &(p - center))
                };
                tokens.push(ObservationToken {
                    joint_id: j,
                    camera_id: first_camera_id + c,
                    rel_time: t as i32 - last,
                    ray,
                    confidence: 1.0,
                });
            }
        }
    }
    tokens
}

/// Keeps each token with probability `1 − rate`; redraws if nothing
/// survives (non-empty input only).
pub fn token_dropout<R: Rng>(tokens: &[ObservationToken], rate: f64, rng: &mut R) -> Vec<ObservationToken> {
    if rate <= 0.0 || tokens.is_empty() {
        return tokens.to_vec();
    }
    loop {
        let kept: Vec<_> = tokens.iter().copied().filter(|_| rng.random::<f64>() >= rate).collect();
        if !kept.is_empty() {
            return kept;
        }
    }
}
