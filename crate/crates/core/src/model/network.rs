use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::embed::harmonic_embed_into;
use super::{ModelConfig, ModelError, ObservationToken, QuerySpec};
use crate::geometry::{ray_distance, Point3};
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

/// Parameters initialized as: projections uniform in `±1/√fan_in`, learned
/// embeddings `N(0, 0.02²)`, layer norms at identity, `eta = 1`,
/// `gamma = 0.1` (zero when the corresponding bias is disabled).
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<f32>, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let d = cfg.d_model;
    let hidden = d * cfg.ffn_multiplier;
    let normal = Normal::new(0.0f32, 0.02).expect("valid sigma");

    let dense = |store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize| {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let u = Uniform::new_inclusive(-bound, bound).expect("valid range");
        let w: Vec<f32> = (0..fan_in * fan_out).map(|_| u.sample(rng)).collect();
        let b: Vec<f32> = (0..fan_out).map(|_| u.sample(rng)).collect();
        store.insert(format!("{name}.weight"), Tensor::new(vec![fan_in, fan_out], w)?)?;
        store.insert(format!("{name}.bias"), Tensor::new(vec![fan_out], b)?)
    };
    let embedding = |store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng, name: &str, rows: usize| {
        let data = (0..rows * d).map(|_| normal.sample(rng)).collect();
        store.insert(name, Tensor::new(vec![rows, d], data)?)
    };
    let norm = |store: &mut ParamStore<f32>, name: &str| {
        store.insert(format!("{name}.gain"), Tensor::full(&[d], 1.0))?;
        store.insert(format!("{name}.shift"), Tensor::zeros(&[d]))
    };

    dense(&mut store, &mut rng, "ray_embed", cfg.ray_features(), d)?;
    embedding(&mut store, &mut rng, "joint_embed", cfg.num_joints)?;
    dense(&mut store, &mut rng, "time_embed", cfg.time_features(), d)?;
    if cfg.embed_confidence {
        dense(&mut store, &mut rng, "conf_embed", cfg.time_features(), d)?;
    }
    for l in 0..cfg.encoder_layers {
        let p = format!("encoder.{l}");
        norm(&mut store, &format!("{p}.norm1"))?;
        for which in ["q", "k", "v", "out"] {
            dense(&mut store, &mut rng, &format!("{p}.attn.{which}"), d, d)?;
        }
        norm(&mut store, &format!("{p}.norm2"))?;
        dense(&mut store, &mut rng, &format!("{p}.ffn.fc1"), d, hidden)?;
        dense(&mut store, &mut rng, &format!("{p}.ffn.fc2"), hidden, d)?;
        let eta = if cfg.confidence_bias { 1.0 } else { 0.0 };
        let gamma = if cfg.geometry_bias { 0.1 } else { 0.0 };
        store.insert(format!("{p}.eta"), Tensor::scalar(eta))?;
        store.insert(format!("{p}.gamma"), Tensor::scalar(gamma))?;
    }
    norm(&mut store, "encoder.norm")?;
    embedding(&mut store, &mut rng, "decoder.query_embed", cfg.num_joints)?;
    dense(&mut store, &mut rng, "decoder.time_embed", cfg.time_features(), d)?;
    for l in 0..cfg.decoder_layers {
        let p = format!("decoder.{l}");
        norm(&mut store, &format!("{p}.norm1"))?;
        for which in ["q", "k", "v", "out"] {
            dense(&mut store, &mut rng, &format!("{p}.attn.{which}"), d, d)?;
        }
        norm(&mut store, &format!("{p}.norm2"))?;
        dense(&mut store, &mut rng, &format!("{p}.ffn.fc1"), d, hidden)?;
        dense(&mut store, &mut rng, &format!("{p}.ffn.fc2"), hidden, d)?;
    }
    norm(&mut store, "decoder.norm")?;
    dense(&mut store, &mut rng, "head.fc1", d, d)?;
    dense(&mut store, &mut rng, "head.fc2", d, 3)?;
    Ok(store)
}

fn dense<F: Real>(g: &mut Graph<'_, F>, name: &str, x: Var) -> Result<Var, ModelError> {
    let w = g.param(&format!("{name}.weight"))?;
    let b = g.param(&format!("{name}.bias"))?;
    Ok(g.linear(x, w, b)?)
}

fn norm<F: Real>(g: &mut Graph<'_, F>, name: &str, x: Var) -> Result<Var, ModelError> {
    let gain = g.param(&format!("{name}.gain"))?;
    let shift = g.param(&format!("{name}.shift"))?;
    Ok(g.layer_norm(x, gain, shift)?)
}

fn feed_forward<F: Real>(g: &mut Graph<'_, F>, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let h = dense(g, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h);
    dense(g, &format!("{prefix}.fc2"), h)
}

fn to_tensor<F: Real>(rows: usize, cols: usize, data: &[f64]) -> Result<Tensor<F>, ModelError> {
    Ok(Tensor::new(vec![rows, cols], data.iter().map(|&v| F::from_f64_lossy(v)).collect())?)
}

fn time_features(cfg: &ModelConfig, rel_times: impl Iterator<Item = i32>, out: &mut Vec<f64>) {
    for t in rel_times {
        harmonic_embed_into(&[t as f64 / cfg.max_rel_time as f64], cfg.harmonic_frequencies, out);
    }
}

fn validate_tokens(cfg: &ModelConfig, tokens: &[ObservationToken]) -> Result<(), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::Empty("token set"));
    }
    for (index, t) in tokens.iter().enumerate() {
        let reason = if t.joint_id >= cfg.num_joints {
            format!("joint_id {} out of range 0..{}", t.joint_id, cfg.num_joints)
        } else if !(0.0..=1.0).contains(&t.confidence) {
            format!("confidence {} outside [0, 1]", t.confidence)
        } else if !t.ray.as_array().iter().all(|v| v.is_finite()) {
            "non-finite ray".to_string()
        } else {
            continue;
        };
        return Err(ModelError::InvalidToken { index, reason });
    }
    Ok(())
}

/// Token features: projected harmonic ray embedding plus a learned joint
/// embedding plus a projected harmonic encoding of the relative time.
pub fn embed_tokens<F: Real>(
    g: &mut Graph<'_, F>,
    cfg: &ModelConfig,
    tokens: &[ObservationToken],
) -> Result<Var, ModelError> {
    validate_tokens(cfg, tokens)?;
    let n = tokens.len();
    let mut ray_h = Vec::with_capacity(n * cfg.ray_features());
    for t in tokens {
        let s = 1.0 / cfg.moment_scale;
        let r = t.ray;
        let x = [r.d.x, r.d.y, r.d.z, r.m.x * s, r.m.y * s, r.m.z * s];
        harmonic_embed_into(&x, cfg.harmonic_frequencies, &mut ray_h);
    }
    let mut time_h = Vec::with_capacity(n * cfg.time_features());
    time_features(cfg, tokens.iter().map(|t| t.rel_time), &mut time_h);

    let ray_h = g.constant(to_tensor(n, cfg.ray_features(), &ray_h)?);
    let rays = dense(g, "ray_embed", ray_h)?;
    let table = g.param("joint_embed")?;
    let ids: Vec<usize> = tokens.iter().map(|t| t.joint_id).collect();
    let joints = g.gather_rows(table, &ids)?;
    let time_h = g.constant(to_tensor(n, cfg.time_features(), &time_h)?);
    let times = dense(g, "time_embed", time_h)?;
    let x = g.add(rays, joints)?;
    let mut x = g.add(x, times)?;
    if cfg.embed_confidence {
        let mut conf_h = Vec::with_capacity(n * cfg.time_features());
        for t in tokens {
            harmonic_embed_into(&[t.confidence], cfg.harmonic_frequencies, &mut conf_h);
        }
        let conf_h = g.constant(to_tensor(n, cfg.time_features(), &conf_h)?);
        let conf = dense(g, "conf_embed", conf_h)?;
        x = g.add(x, conf)?;
    }
    Ok(x)
}

/// `(M_conf, M_dist)`: every row of `M_conf` holds the key confidences;
/// `M_dist[i][j]` is the distance between rays `i` and `j` in meters.
pub fn build_bias_matrices(tokens: &[ObservationToken]) -> (Tensor<f64>, Tensor<f64>) {
    let n = tokens.len();
    let conf_row: Vec<f64> = tokens.iter().map(|t| t.confidence).collect();
    let m_conf = Tensor::new(vec![n, n], conf_row.repeat(n)).expect("n*n entries");
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dij = ray_distance(&tokens[i].ray, &tokens[j].ray);
            dist[i * n + j] = dij;
            dist[j * n + i] = dij;
        }
    }
    (m_conf, Tensor::new(vec![n, n], dist).expect("n*n entries"))
}

pub struct EncoderOutput {
    /// Final-normalized token features `[n × d_model]`.
    pub memory: Var,
    /// Raw attention node of each encoder layer.
    pub attention: Vec<Var>,
}

/// Pre-norm encoder whose self-attention in layer `l` is biased by
/// `eta_l² · M_conf − gamma_l² · M_dist`.
pub fn encode<F: Real>(
    g: &mut Graph<'_, F>,
    cfg: &ModelConfig,
    features: Var,
    m_conf: &Tensor<f64>,
    m_dist: &Tensor<f64>,
) -> Result<EncoderOutput, ModelError> {
    let (n, _) = g.value(features).dims2()?;
    if m_conf.shape() != [n, n] || m_dist.shape() != [n, n] {
        return Err(ModelError::Config(format!("bias matrices must be {n}x{n}")));
    }
    let conf = cfg.confidence_bias.then(|| g.constant(m_conf.cast()));
    let neg_dist = cfg.geometry_bias.then(|| g.constant(m_dist.map(|v| -v).cast()));

    let mut x = features;
    let mut attention = Vec::with_capacity(cfg.encoder_layers);
    for l in 0..cfg.encoder_layers {
        let p = format!("encoder.{l}");
        let conf_term = match conf {
            Some(m) => {
                let eta = g.param(&format!("{p}.eta"))?;
                let eta2 = g.square(eta);
                Some(g.scale_by(eta2, m)?)
            }
            None => None,
        };
        let dist_term = match neg_dist {
            Some(m) => {
                let gamma = g.param(&format!("{p}.gamma"))?;
                let gamma2 = g.square(gamma);
                Some(g.scale_by(gamma2, m)?)
            }
            None => None,
        };
        let bias = match (conf_term, dist_term) {
            (Some(a), Some(b)) => Some(g.add(a, b)?),
            (a, b) => a.or(b),
        };
        let h = norm(g, &format!("{p}.norm1"), x)?;
        let (a, weights) = g.multi_head_attention(&format!("{p}.attn"), h, h, h, cfg.heads, bias)?;
        attention.push(weights);
        x = g.add(x, a)?;
        let h = norm(g, &format!("{p}.norm2"), x)?;
        let f = feed_forward(g, &format!("{p}.ffn"), h)?;
        x = g.add(x, f)?;
    }
    let memory = norm(g, "encoder.norm", x)?;
    Ok(EncoderOutput { memory, attention })
}

/// Cross-attention-only decoder: each query row attends to the memory and
/// never to other queries.
pub fn decode<F: Real>(
    g: &mut Graph<'_, F>,
    cfg: &ModelConfig,
    memory: Var,
    query: &QuerySpec,
) -> Result<Var, ModelError> {
    let (n, _) = g.value(memory).dims2()?;
    if n == 0 {
        return Err(ModelError::Empty("encoder memory"));
    }
    if query.is_empty() {
        return Err(ModelError::Empty("query"));
    }
    if let Some(&(j, _)) = query.entries.iter().find(|(j, _)| *j >= cfg.num_joints) {
        return Err(ModelError::Config(format!("query joint {j} out of range")));
    }
    let m = query.len();
    let ids: Vec<usize> = query.entries.iter().map(|&(j, _)| j).collect();
    let mut time_h = Vec::with_capacity(m * cfg.time_features());
    time_features(cfg, query.entries.iter().map(|&(_, t)| t), &mut time_h);

    let table = g.param("decoder.query_embed")?;
    let joints = g.gather_rows(table, &ids)?;
    let time_h = g.constant(to_tensor(m, cfg.time_features(), &time_h)?);
    let times = dense(g, "decoder.time_embed", time_h)?;
    let mut y = g.add(joints, times)?;
    for l in 0..cfg.decoder_layers {
        let p = format!("decoder.{l}");
        let h = norm(g, &format!("{p}.norm1"), y)?;
        let (a, _) = g.multi_head_attention(&format!("{p}.attn"), h, memory, memory, cfg.heads, None)?;
        y = g.add(y, a)?;
        let h = norm(g, &format!("{p}.norm2"), y)?;
        let f = feed_forward(g, &format!("{p}.ffn"), h)?;
        y = g.add(y, f)?;
    }
    norm(g, "decoder.norm", y)
}

/// Two-layer MLP from decoded features to 3D coordinates (meters, centered
/// frame).
pub fn regress_head<F: Real>(g: &mut Graph<'_, F>, _cfg: &ModelConfig, decoded: Var) -> Result<Var, ModelError> {
    let h = dense(g, "head.fc1", decoded)?;
    let h = g.gelu(h);
    dense(g, "head.fc2", h)
}

/// Full pipeline; returns `[query.len() × 3]` coordinates.
pub fn forward<F: Real>(
    g: &mut Graph<'_, F>,
    cfg: &ModelConfig,
    tokens: &[ObservationToken],
    query: &QuerySpec,
) -> Result<Var, ModelError> {
    let features = embed_tokens(g, cfg, tokens)?;
    let (m_conf, m_dist) = build_bias_matrices(tokens);
    let enc = encode(g, cfg, features, &m_conf, &m_dist)?;
    let decoded = decode(g, cfg, enc.memory, query)?;
    let out = regress_head(g, cfg, decoded)?;
    if !g.value(out).is_finite() {
        return Err(crate::tensor::TensorError::NonFinite("model output".into()).into());
    }
    Ok(out)
}

/// Forward pass returning points (meters, centered frame), one per query row.
pub fn predict<F: Real>(
    params: &ParamStore<F>,
    cfg: &ModelConfig,
    tokens: &[ObservationToken],
    query: &QuerySpec,
) -> Result<Vec<Point3>, ModelError> {
    let mut g = Graph::new(params);
    let out = forward(&mut g, cfg, tokens, query)?;
    Ok(g.value(out)
        .data()
        .chunks(3)
        .map(|c| Point3::new(c[0].as_f64(), c[1].as_f64(), c[2].as_f64()))
        .collect())
}
