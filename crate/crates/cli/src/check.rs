//! Self-verification suites: model gradients against central differences,
//! ray distance against a direct closest-point solve, and softmax against
//! a 64-bit reference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use rpose_core::geometry::{ray_distance, PluckerRay, Point3};
use rpose_core::model::{forward, init_params, ModelConfig, ObservationToken, QuerySpec};
use rpose_core::tensor::{Graph, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub gradient: f64,
    pub ray_distance: f64,
    pub softmax: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { gradient: 1e-3, ray_distance: 1e-7, softmax: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_error.is_finite() && self.max_error < self.tolerance
    }
}

pub fn gradient_config() -> ModelConfig {
    ModelConfig { d_model: 48, heads: 4, encoder_layers: 2, decoder_layers: 2, harmonic_frequencies: 6, ..ModelConfig::default() }
}

/// Tokens for `joints` joints seen in `frames` frames from `views` cameras.
pub fn check_tokens(joints: usize, frames: usize, views: usize, seed: u64) -> Vec<ObservationToken> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = Vec::new();
    for j in 0..joints {
        let target = Point3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(0.2..1.8));
        for f in 0..frames {
            for c in 0..views {
                let a = c as f64 * 2.1 + rng.random_range(-0.3..0.3);
                let center = Point3::new(4.0 * a.cos(), 4.0 * a.sin(), rng.random_range(0.5..2.5));
                tokens.push(ObservationToken {
                    joint_id: j,
                    camera_id: c,
                    rel_time: -(f as i32),
                    ray: PluckerRay::from_point_direction(&center, &(target - center)),
                    confidence: rng.random_range(0.2..1.0),
                });
            }
        }
    }
    tokens
}

/// Largest relative error `|a − n| / max(|a|, |n|, 1e-6)` between the
/// analytic gradient and central differences over `samples` coordinates.
pub fn gradient_check(cfg: &ModelConfig, tokens: &[ObservationToken], frames: usize, samples: usize, seed: u64) -> f64 {
    let params: ParamStore<f64> = init_params(cfg, seed).expect("valid check config").cast();
    let query = QuerySpec::frames(cfg.num_joints, frames);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let target: Vec<Vec<f64>> = (0..query.len()).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let target = Tensor::from_rows(&target).expect("rows of 3");
    let loss_of = |p: &ParamStore<f64>| {
        let mut g = Graph::new(p);
        let pred = forward(&mut g, cfg, tokens, &query).expect("forward");
        let loss = g.mean_squared_row_error(pred, target.clone()).expect("loss");
        let value = g.value(loss).data()[0];
        (value, g.backward(loss).expect("backward"))
    };
    let (_, grads) = loss_of(&params);
    let names: Vec<(String, usize)> = params.iter().map(|(n, t)| (n.clone(), t.numel())).collect();
    let total: usize = names.iter().map(|(_, n)| n).sum();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let mut pick = rng.random_range(0..total);
        let (name, idx) = names
            .iter()
            .find_map(|(n, len)| {
                if pick < *len {
                    Some((n.clone(), pick))
                } else {
                    pick -= len;
                    None
                }
            })
            .expect("index inside the store");
        let analytic = grads.get(&name).map_or(0.0, |g| g.data()[idx]);
        let mut plus = params.clone();
        plus.get_mut(&name).unwrap().data_mut()[idx] += h;
        let mut minus = params.clone();
        minus.get_mut(&name).unwrap().data_mut()[idx] -= h;
        let numeric = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

/// Distance between two lines from the closest-point normal equations.
pub fn closest_point_distance(p1: &Point3, d1: &Point3, p2: &Point3, d2: &Point3) -> f64 {
    let w = p1 - p2;
    let (a, b, c) = (d1.dot(d1), d1.dot(d2), d2.dot(d2));
    let (d, e) = (d1.dot(&w), d2.dot(&w));
    let den = a * c - b * b;
    if den.abs() < 1e-14 * a * c {
        // parallel: distance from p1 to the second line
        return (w - d2 * (e / c)).norm();
    }
    let s = (b * e - c * d) / den;
    let t = (a * e - b * d) / den;
    ((p1 + d1 * s) - (p2 + d2 * t)).norm()
}

fn random_unit<R: Rng>(rng: &mut R) -> Point3 {
    loop {
        let v = Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

pub fn ray_distance_check(pairs: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..pairs {
        let p1 = Point3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let p2 = Point3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let d1 = random_unit(&mut rng);
        let d2 = match i % 10 {
            0 => d1,
            1 => -d1,
            _ => random_unit(&mut rng),
        };
        let got = ray_distance(&PluckerRay::from_point_direction(&p1, &d1), &PluckerRay::from_point_direction(&p2, &d2));
        worst = worst.max((got - closest_point_distance(&p1, &d1, &p2, &d2)).abs());
    }
    worst
}

/// Softmax of the f32 engine against a 64-bit computation, including
/// large-magnitude logits and an additive bias.
pub fn softmax_check(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let store = ParamStore::<f32>::new();
    for i in 0..cases {
        let (rows, cols) = (rng.random_range(1..6), rng.random_range(1..40));
        let spread = [1.0, 30.0, 300.0][i % 3];
        let logits: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-spread..spread) as f32).collect();
        let bias: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-5.0..5.0) as f32).collect();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::new(vec![rows, cols], logits.clone()).unwrap());
        let b = g.constant(Tensor::new(vec![rows, cols], bias.clone()).unwrap());
        let y = g.softmax_rows(x, Some(b)).unwrap();
        let got = g.value(y).data();
        for r in 0..rows {
            // the bias is added in f32 before the softmax, so the reference starts from the same sums
            let z: Vec<f64> = (0..cols).map(|c| (logits[r * cols + c] + bias[r * cols + c]) as f64).collect();
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
            for c in 0..cols {
                worst = worst.max(((z[c] - m).exp() / s - got[r * cols + c] as f64).abs());
            }
        }
    }
    worst
}

/// All suites, in order, regardless of earlier failures.
pub fn run_all(tol: &Tolerances) -> Vec<SuiteResult> {
    let cfg = gradient_config();
    let tokens = check_tokens(2, 2, 2, 17);
    vec![
        SuiteResult { name: "gradient", max_error: gradient_check(&cfg, &tokens, 2, 200, 5), tolerance: tol.gradient },
        SuiteResult { name: "ray_distance", max_error: ray_distance_check(1000, 7), tolerance: tol.ray_distance },
        SuiteResult { name: "softmax", max_error: softmax_check(300, 9), tolerance: tol.softmax },
    ]
}
