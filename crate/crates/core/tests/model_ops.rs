use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rpose_core::geometry::{PluckerRay, Point3};
use rpose_core::model::{
    build_bias_matrices, decode, embed_tokens, encode, forward, init_params, predict, regress_head, ModelConfig,
    ModelError, ObservationToken, QuerySpec,
};
use rpose_core::tensor::{Graph, ParamStore, Tensor};

fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 24,
        heads: 3,
        encoder_layers: 2,
        decoder_layers: 2,
        harmonic_frequencies: 4,
        num_joints: 5,
        ..ModelConfig::default()
    }
}

fn params64(cfg: &ModelConfig, seed: u64) -> ParamStore<f64> {
    init_params(cfg, seed).unwrap().cast()
}

fn random_tokens(n: usize, cfg: &ModelConfig, seed: u64) -> Vec<ObservationToken> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let center = Point3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.5..2.5));
            let target = Point3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(0.0..1.8));
            ObservationToken {
                joint_id: rng.random_range(0..cfg.num_joints),
                camera_id: i % 3,
                rel_time: -rng.random_range(0..3),
                ray: PluckerRay::from_point_direction(&center, &(target - center)),
                confidence: rng.random_range(0.05..1.0),
            }
        })
        .collect()
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (n, _) = t.dims2().unwrap();
    (0..n).map(|i| t.row(i).to_vec()).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn embed(params: &ParamStore<f64>, cfg: &ModelConfig, tokens: &[ObservationToken]) -> Tensor<f64> {
    let mut g = Graph::new(params);
    let x = embed_tokens(&mut g, cfg, tokens).unwrap();
    g.value(x).clone()
}

fn encode_with(
    params: &ParamStore<f64>,
    cfg: &ModelConfig,
    tokens: &[ObservationToken],
    m_conf: &Tensor<f64>,
    m_dist: &Tensor<f64>,
) -> Tensor<f64> {
    let mut g = Graph::new(params);
    let x = embed_tokens(&mut g, cfg, tokens).unwrap();
    let out = encode(&mut g, cfg, x, m_conf, m_dist).unwrap();
    g.value(out.memory).clone()
}

fn permute_matrix(m: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let n = perm.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            data[i * n + j] = m.row(perm[i])[perm[j]];
        }
    }
    Tensor::new(vec![n, n], data).unwrap()
}

#[test]
fn embeddings_differ_by_joint_embedding_only() {
    let cfg = small_config();
    let params = params64(&cfg, 1);
    let mut tokens = random_tokens(1, &cfg, 2);
    tokens[0].joint_id = 1;
    let mut other = tokens.clone();
    other[0].joint_id = 3;
    let (a, b) = (embed(&params, &cfg, &tokens), embed(&params, &cfg, &other));
    let table = params.get("joint_embed").unwrap();
    for c in 0..cfg.d_model {
        let expected = table.row(1)[c] - table.row(3)[c];
        assert!((a.row(0)[c] - b.row(0)[c] - expected).abs() < 1e-12);
    }
}

#[test]
fn embeddings_differ_by_temporal_delta_only() {
    let cfg = small_config();
    let params = params64(&cfg, 1);
    let mut tokens = random_tokens(1, &cfg, 3);
    tokens[0].rel_time = 0;
    let mut other = tokens.clone();
    other[0].rel_time = -1;
    let (a, b) = (embed(&params, &cfg, &tokens), embed(&params, &cfg, &other));

    // temporal projection evaluated independently
    let w = params.get("time_embed.weight").unwrap();
    let time_proj = |t: f64| -> Vec<f64> {
        let h = rpose_core::model::harmonic_embed(&[t / cfg.max_rel_time as f64], cfg.harmonic_frequencies);
        (0..cfg.d_model).map(|c| h.iter().enumerate().map(|(i, v)| v * w.row(i)[c]).sum()).collect()
    };
    let (t0, t1) = (time_proj(0.0), time_proj(-1.0));
    for c in 0..cfg.d_model {
        assert!((a.row(0)[c] - b.row(0)[c] - (t0[c] - t1[c])).abs() < 1e-12);
    }
}

#[test]
fn embedding_rows_follow_token_permutation() {
    let cfg = small_config();
    let params = params64(&cfg, 1);
    let tokens = random_tokens(6, &cfg, 4);
    let perm = [3, 0, 5, 1, 4, 2];
    let permuted: Vec<_> = perm.iter().map(|&i| tokens[i]).collect();
    let (a, b) = (rows(&embed(&params, &cfg, &tokens)), rows(&embed(&params, &cfg, &permuted)));
    for (i, &p) in perm.iter().enumerate() {
        assert_eq!(b[i], a[p]);
    }
}

#[test]
fn invalid_tokens_rejected() {
    let cfg = small_config();
    let params = params64(&cfg, 1);
    let mut tokens = random_tokens(3, &cfg, 5);
    tokens[1].joint_id = cfg.num_joints;
    let mut g = Graph::new(&params);
    assert!(matches!(embed_tokens(&mut g, &cfg, &tokens), Err(ModelError::InvalidToken { index: 1, .. })));
    tokens[1].joint_id = 0;
    tokens[2].confidence = 1.5;
    assert!(matches!(embed_tokens(&mut g, &cfg, &tokens), Err(ModelError::InvalidToken { index: 2, .. })));
    assert!(matches!(embed_tokens(&mut g, &cfg, &[]), Err(ModelError::Empty(_))));
}

#[test]
fn bias_matrix_examples() {
    let cfg = small_config();
    let mut tokens = random_tokens(5, &cfg, 6);
    tokens.iter_mut().for_each(|t| t.confidence = 1.0);
    let (m_conf, m_dist) = build_bias_matrices(&tokens);
    assert!(m_conf.data().iter().all(|&v| v == 1.0));
    for i in 0..5 {
        assert_eq!(m_dist.row(i)[i], 0.0);
        for j in 0..5 {
            assert!((m_dist.row(i)[j] - m_dist.row(j)[i]).abs() < 1e-9);
        }
    }

    let tokens = random_tokens(4, &cfg, 7);
    let (m_conf, _) = build_bias_matrices(&tokens);
    for i in 0..4 {
        for j in 0..4 {
            assert_eq!(m_conf.row(i)[j], tokens[j].confidence);
        }
    }

    // two rays through one camera center
    let center = Point3::new(2.0, -3.0, 1.5);
    let mut same_cam = random_tokens(2, &cfg, 8);
    same_cam[0].ray = PluckerRay::from_point_direction(&center, &Vector3::new(-0.3, 1.0, -0.2));
    same_cam[1].ray = PluckerRay::from_point_direction(&center, &Vector3::new(-0.5, 0.9, 0.1));
    let (_, m_dist) = build_bias_matrices(&same_cam);
    assert!(m_dist.row(0)[1].abs() < 1e-12);
}

#[test]
fn single_token_encodes_finite() {
    let cfg = small_config();
    let params = params64(&cfg, 1);
    let tokens = random_tokens(1, &cfg, 9);
    let (c, d) = build_bias_matrices(&tokens);
    let mut g = Graph::new(&params);
    let x = embed_tokens(&mut g, &cfg, &tokens).unwrap();
    let out = encode(&mut g, &cfg, x, &c, &d).unwrap();
    assert!(g.value(out.memory).is_finite());
    for a in out.attention {
        let w = g.attention_weights(a).unwrap();
        assert!(w.probs.iter().all(|&p| p == 1.0));
    }
}

#[test]
fn zero_bias_scales_match_unbiased_encoder_bitwise() {
    let cfg = small_config();
    let mut params = params64(&cfg, 11);
    for l in 0..cfg.encoder_layers {
        *params.get_mut(&format!("encoder.{l}.eta")).unwrap() = Tensor::scalar(0.0);
        *params.get_mut(&format!("encoder.{l}.gamma")).unwrap() = Tensor::scalar(0.0);
    }
    let unbiased = ModelConfig { confidence_bias: false, geometry_bias: false, ..cfg.clone() };
    let tokens = random_tokens(7, &cfg, 12);
    let (c, d) = build_bias_matrices(&tokens);
    let a = encode_with(&params, &cfg, &tokens, &c, &d);
    let b = encode_with(&params, &unbiased, &tokens, &c, &d);
    assert_eq!(a.data(), b.data());
}

#[test]
fn encoder_is_permutation_equivariant() {
    let cfg = small_config();
    let params = params64(&cfg, 13);
    let tokens = random_tokens(8, &cfg, 14);
    let perm = [7, 2, 4, 0, 6, 1, 3, 5];
    let permuted: Vec<_> = perm.iter().map(|&i| tokens[i]).collect();
    let (c, d) = build_bias_matrices(&tokens);
    let a = rows(&encode_with(&params, &cfg, &tokens, &c, &d));
    let b = rows(&encode_with(&params, &cfg, &permuted, &permute_matrix(&c, &perm), &permute_matrix(&d, &perm)));
    for (i, &p) in perm.iter().enumerate() {
        assert!(max_diff(&b[i], &a[p]) < 1e-5);
    }
}

fn decode_rows(params: &ParamStore<f64>, cfg: &ModelConfig, tokens: &[ObservationToken], query: &QuerySpec) -> Vec<Vec<f64>> {
    let mut g = Graph::new(params);
    let x = embed_tokens(&mut g, cfg, tokens).unwrap();
    let (c, d) = build_bias_matrices(tokens);
    let enc = encode(&mut g, cfg, x, &c, &d).unwrap();
    let out = decode(&mut g, cfg, enc.memory, query).unwrap();
    rows(g.value(out))
}

#[test]
fn decoded_queries_are_independent() {
    let cfg = small_config();
    let params = params64(&cfg, 15);
    let tokens = random_tokens(9, &cfg, 16);
    let query = QuerySpec::frames(cfg.num_joints, 3);
    let batched = decode_rows(&params, &cfg, &tokens, &query);
    for (i, &entry) in query.entries.iter().enumerate() {
        let alone = decode_rows(&params, &cfg, &tokens, &QuerySpec { entries: vec![entry] });
        assert!(max_diff(&alone[0], &batched[i]) < 1e-6);
    }

    let dup = QuerySpec { entries: vec![(2, -1), (0, 0), (2, -1)] };
    let out = decode_rows(&params, &cfg, &tokens, &dup);
    assert_eq!(out[0], out[2]);
}

#[test]
fn latest_frame_query_matches_full_decode() {
    let cfg = small_config();
    let params = params64(&cfg, 17);
    let tokens = random_tokens(10, &cfg, 18);
    let t_in = 3;
    let full = decode_rows(&params, &cfg, &tokens, &QuerySpec::frames(cfg.num_joints, t_in));
    let last = decode_rows(&params, &cfg, &tokens, &QuerySpec::frames(cfg.num_joints, 1));
    for j in 0..cfg.num_joints {
        assert!(max_diff(&last[j], &full[(t_in - 1) * cfg.num_joints + j]) < 1e-6);
    }
}

#[test]
fn decode_rejects_empty_inputs() {
    let cfg = small_config();
    let params = params64(&cfg, 1);
    let mut g = Graph::new(&params);
    let empty = g.constant(Tensor::zeros(&[0, cfg.d_model]));
    assert!(decode(&mut g, &cfg, empty, &QuerySpec::frames(cfg.num_joints, 1)).is_err());
    let mem = g.constant(Tensor::zeros(&[2, cfg.d_model]));
    assert!(matches!(decode(&mut g, &cfg, mem, &QuerySpec { entries: vec![] }), Err(ModelError::Empty(_))));
}

#[test]
fn zero_head_predicts_origin() {
    let cfg = small_config();
    let mut params = params64(&cfg, 19);
    for name in ["head.fc1.weight", "head.fc1.bias", "head.fc2.weight", "head.fc2.bias"] {
        let t = params.get_mut(name).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let tokens = random_tokens(4, &cfg, 20);
    let out = predict(&params, &cfg, &tokens, &QuerySpec::frames(cfg.num_joints, 2)).unwrap();
    assert!(out.iter().all(|p| *p == Point3::zeros()));
}

#[test]
fn identical_decoded_rows_give_identical_predictions() {
    let cfg = small_config();
    let params = params64(&cfg, 21);
    let mut g = Graph::new(&params);
    let row: Vec<f64> = (0..cfg.d_model).map(|i| (i as f64 * 0.37).sin()).collect();
    let x = g.constant(Tensor::from_rows(&[row.clone(), row]).unwrap());
    let out = regress_head(&mut g, &cfg, x).unwrap();
    let v = g.value(out);
    assert_eq!(v.shape(), &[2, 3]);
    assert_eq!(v.row(0), v.row(1));
}

#[test]
fn head_gradient_matches_finite_differences() {
    let cfg = small_config();
    let params = params64(&cfg, 22);
    let decoded: Vec<Vec<f64>> = (0..4).map(|r| (0..cfg.d_model).map(|c| ((r * 7 + c) as f64 * 0.31).cos()).collect()).collect();
    let target = Tensor::from_rows(&[vec![0.1, -0.2, 0.9], vec![0.0, 0.3, 1.1], vec![-0.4, 0.2, 0.5], vec![0.2, 0.2, 0.2]]).unwrap();
    let loss_of = |p: &ParamStore<f64>| -> (f64, Option<rpose_core::tensor::Gradients<f64>>) {
        let mut g = Graph::new(p);
        let x = g.constant(Tensor::from_rows(&decoded).unwrap());
        let y = regress_head(&mut g, &cfg, x).unwrap();
        let loss = g.mean_squared_row_error(y, target.clone()).unwrap();
        (g.value(loss).data()[0], g.backward(loss).ok())
    };
    let grads = loss_of(&params).1.unwrap();
    let h = 1e-4;
    for name in ["head.fc1.weight", "head.fc1.bias", "head.fc2.weight", "head.fc2.bias"] {
        let analytic = grads.get(name).unwrap();
        for idx in (0..analytic.numel()).step_by(7) {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[idx] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[idx] -= h;
            let numeric = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h);
            let a = analytic.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-3, "{name}[{idx}]: analytic {a} numeric {numeric}");
        }
    }
}

#[test]
fn forward_is_deterministic_and_order_free() {
    let cfg = small_config();
    let params = params64(&cfg, 23);
    let tokens = random_tokens(9, &cfg, 24);
    let query = QuerySpec::frames(cfg.num_joints, 2);
    let a = predict(&params, &cfg, &tokens, &query).unwrap();
    assert_eq!(a, predict(&params, &cfg, &tokens, &query).unwrap());
    let mut reversed = tokens.clone();
    reversed.reverse();
    let b = predict(&params, &cfg, &reversed, &query).unwrap();
    for (p, q) in a.iter().zip(&b) {
        assert!((p - q).abs().max() < 1e-5);
    }
}

#[test]
fn f32_forward_tracks_f64() {
    let cfg = small_config();
    let p32 = init_params(&cfg, 25).unwrap();
    let p64: ParamStore<f64> = p32.cast();
    let tokens = random_tokens(9, &cfg, 26);
    let query = QuerySpec::frames(cfg.num_joints, 2);
    let a = predict(&p32, &cfg, &tokens, &query).unwrap();
    let b = predict(&p64, &cfg, &tokens, &query).unwrap();
    for (p, q) in a.iter().zip(&b) {
        assert!((p - q).abs().max() < 1e-4);
    }
}

#[test]
fn higher_confidence_draws_more_attention() {
    let cfg = small_config();
    let params = params64(&cfg, 27);
    let tokens = random_tokens(6, &cfg, 28);
    let weights_for = |tokens: &[ObservationToken]| {
        let mut g = Graph::new(&params);
        let x = embed_tokens(&mut g, &cfg, tokens).unwrap();
        let (c, d) = build_bias_matrices(tokens);
        let enc = encode(&mut g, &cfg, x, &c, &d).unwrap();
        g.attention_weights(enc.attention[0]).unwrap()
    };
    let before = weights_for(&tokens);
    let mut boosted = tokens.clone();
    boosted[2].confidence = (boosted[2].confidence + 0.5).min(1.0);
    let after = weights_for(&boosted);
    for h in 0..before.heads {
        for q in 0..before.queries {
            assert!(after.get(h, q, 2) > before.get(h, q, 2));
        }
    }
}

#[test]
fn farther_key_gets_less_attention() {
    let cfg = small_config();
    let params = params64(&cfg, 29);
    let mut tokens = random_tokens(5, &cfg, 30);
    // tokens 3 and 4 share every feature; only their distances differ
    tokens[4] = tokens[3];
    let (c, mut d) = build_bias_matrices(&tokens);
    let n = tokens.len();
    for i in 0..n {
        d.data_mut()[i * n + 4] = d.row(i)[3] + 0.5;
    }
    let mut g = Graph::new(&params);
    let x = embed_tokens(&mut g, &cfg, &tokens).unwrap();
    let enc = encode(&mut g, &cfg, x, &c, &d).unwrap();
    let w = g.attention_weights(enc.attention[0]).unwrap();
    for h in 0..w.heads {
        for q in 0..w.queries {
            assert!(w.get(h, q, 4) < w.get(h, q, 3));
        }
    }
}

#[test]
fn ignored_token_perturbation_is_reported() {
    let cfg = small_config();
    let params = params64(&cfg, 31);
    let mut tokens = random_tokens(8, &cfg, 32);
    let query = QuerySpec::frames(cfg.num_joints, 1);
    let base = predict(&params, &cfg, &tokens[..7], &query).unwrap();
    tokens[7].confidence = 0.0;
    let far = Point3::new(40.0, 40.0, 1.0);
    tokens[7].ray = PluckerRay::from_point_direction(&far, &Vector3::new(0.0, 0.0, 1.0));
    let with = predict(&params, &cfg, &tokens, &query).unwrap();
    let change = base.iter().zip(&with).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    println!("max output change from adding an ignored token: {change:.3e} m");
    assert!(change.is_finite());
}

#[test]
fn future_tokens_would_change_outputs() {
    let cfg = small_config();
    let params = params64(&cfg, 33);
    let tokens = random_tokens(6, &cfg, 34);
    let query = QuerySpec::frames(cfg.num_joints, 1);
    let causal = predict(&params, &cfg, &tokens, &query).unwrap();
    let mut leaked = tokens.clone();
    let mut future = random_tokens(2, &cfg, 35);
    future.iter_mut().for_each(|t| t.rel_time = 1);
    leaked.extend(future);
    let with_future = predict(&params, &cfg, &leaked, &query).unwrap();
    assert_ne!(causal, with_future);
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    assert!(ModelConfig { heads: 5, ..ModelConfig::default() }.validate().is_err());
    assert!(ModelConfig { encoder_layers: 0, ..ModelConfig::default() }.validate().is_err());
    assert!(init_params(&ModelConfig { d_model: 0, ..ModelConfig::default() }, 0).is_err());
    let text = serde_json::to_string(&small_config()).unwrap();
    assert_eq!(serde_json::from_str::<ModelConfig>(&text).unwrap(), small_config());
}

#[test]
fn init_is_seeded() {
    let cfg = small_config();
    let a = init_params(&cfg, 5).unwrap();
    let b = init_params(&cfg, 5).unwrap();
    let c = init_params(&cfg, 6).unwrap();
    assert!(a.iter().zip(b.iter()).all(|((_, x), (_, y))| x.data() == y.data()));
    assert!(a.iter().zip(c.iter()).any(|((_, x), (_, y))| x.data() != y.data()));
    assert_eq!(a.get("encoder.0.eta").unwrap().data(), &[1.0]);
    assert_eq!(a.get("encoder.0.gamma").unwrap().data(), &[0.1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_invariant_under_token_permutation(seed in 0u64..10_000, n in 1usize..10, rot in 0usize..10) {
        let cfg = small_config();
        let params = params64(&cfg, seed);
        let tokens = random_tokens(n, &cfg, seed + 1);
        let mut shuffled = tokens.clone();
        shuffled.rotate_left(rot % n);
        shuffled.swap(0, n - 1);
        let query = QuerySpec::frames(cfg.num_joints, 2);
        let a = predict(&params, &cfg, &tokens, &query).unwrap();
        let b = predict(&params, &cfg, &shuffled, &query).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs().max() < 1e-5);
        }
    }
}

#[test]
fn forward_reports_shapes() {
    let cfg = small_config();
    let params = params64(&cfg, 40);
    let tokens = random_tokens(3, &cfg, 41);
    let mut g = Graph::new(&params);
    let y = forward(&mut g, &cfg, &tokens, &QuerySpec::frames(cfg.num_joints, 4)).unwrap();
    assert_eq!(g.value(y).shape(), &[4 * cfg.num_joints, 3]);
}
