use cafe::attribution::{
    attribute, exact_shapley_map, target_value, AttnRule, AttributionParams, AttributionRequest, Baseline, Method, Model, Target,
};
use cafe::erf::{activation_map, compute_erf, select_target, TargetPolicy};
use cafe::io::{generate_suite, InstanceKind, SyntheticConfig};
use cafe::sae::SaeModel;
use cafe::vit::{hidden_states, init_vit, ViTConfig, ViTWeights};
use cafe::{DType, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const METHODS: [Method; 4] = [Method::Gradient, Method::Ig, Method::KernelShap, Method::AttnLrp];

fn image(cfg: &ViTConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(cfg.image_shape(), DType::F64, |_| rng.random_range(0.05..1.0))
}

fn zeros_like(t: &Tensor) -> Tensor {
    Tensor::zeros(t.shape().to_vec(), DType::F64)
}

/// Embedding-only network: `h⁰` is a linear function of each token's own
/// patch, so any SAE feature read at one token is a planted linear probe.
fn linear_probe(seed: u64) -> (ViTWeights, SaeModel) {
    let cfg = ViTConfig {
        image_size: 12,
        patch_size: 4,
        depth: 0,
        heads: 1,
        dim: 8,
        mlp_dim: 8,
        use_cls_token: false,
        layer_norm: false,
        seed,
        ..ViTConfig::default()
    };
    let mut w = init_vit(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0_f64, 1.0).unwrap();
    // Positive embeddings of positive pixels keep the probe above its kink.
    w.patch_w = Tensor::from_fn(w.patch_w.shape().to_vec(), DType::F64, |_| d.sample(&mut rng).abs());
    w.patch_b = zeros_like(&w.patch_b);
    w.pos = zeros_like(&w.pos);
    let mut sae = SaeModel::random(8, 4, seed, DType::F64).unwrap();
    sae.w_e = Tensor::from_fn(vec![4, 8], DType::F64, |_| rng.random_range(0.1..1.0));
    (w, sae)
}

fn map(model: &Model, method: Method, target: Target, img: &Tensor) -> Vec<f64> {
    let mut req = AttributionRequest::new(method, target, img.clone());
    req.params.shap_samples = 600;
    attribute(model, &req).unwrap().scores
}

#[test]
fn linear_probe_puts_all_mass_on_its_patch() {
    for seed in 0..3 {
        let (w, sae) = linear_probe(seed);
        let model = Model { vit: &w, sae: &sae };
        let img = image(&w.config, seed);
        let target = Target { layer: 0, token: 4, feature: 1 };
        let z = target_value(&model, &img, &target).unwrap();
        for m in METHODS {
            let s = map(&model, m, target, &img);
            for (p, v) in s.iter().enumerate() {
                if p == 4 {
                    assert!((v - z).abs() < 1e-6 * z, "{m}: {v} vs z = {z}");
                } else {
                    // KernelSHAP carries its ridge term, bounded like an additive game.
                    let tol = if m == Method::KernelShap { 1e-6 * z } else { 1e-8 };
                    assert!(v.abs() < tol, "{m}: patch {p} = {v}");
                }
            }
        }
    }
}

#[test]
fn ig_on_a_linear_target_equals_gradient_times_input_for_any_steps() {
    let (w, sae) = linear_probe(5);
    let model = Model { vit: &w, sae: &sae };
    let img = image(&w.config, 5);
    let target = Target { layer: 0, token: 2, feature: 3 };
    let gx = map(&model, Method::Gradient, target, &img);
    for steps in [2, 3, 17] {
        let mut req = AttributionRequest::new(Method::Ig, target, img.clone());
        req.params.ig_steps = steps;
        let ig = attribute(&model, &req).unwrap().scores;
        for (a, b) in ig.iter().zip(&gx) {
            assert!((a - b).abs() < 1e-12, "steps {steps}: {a} vs {b}");
        }
    }
}

#[test]
fn linear_chain_relevance_closed_form() {
    let (w, sae) = linear_probe(6);
    let model = Model { vit: &w, sae: &sae };
    let cfg = &w.config;
    let img = image(cfg, 6);
    let (token, feature) = (7, 0);
    let target = Target { layer: 0, token, feature };
    let z = target_value(&model, &img, &target).unwrap();
    let (d, len) = (cfg.dim, cfg.patch_len());
    let x = cafe::vit::patchify(&img, cfg.patch_size).unwrap();
    let x = x.row(token);
    let wp = w.patch_w.data();
    let h: Vec<f64> = (0..d).map(|j| (0..len).map(|i| wp[j * len + i] * x[i]).sum()).collect();
    let we = &sae.w_e.data()[feature * d..(feature + 1) * d];
    for eps in [1e-9, 1e-3, 0.5] {
        // ε-rule through the encoder row, the (zero) decoder-bias shift, the
        // (zero) positional add, then the patch embedding: every step
        // divides by its output + ε.
        let r_h: Vec<f64> = (0..d)
            .map(|j| h[j] * we[j] * z / (z + eps) * (h[j] / (h[j] + eps)).powi(2))
            .collect();
        let r_x: f64 = (0..len)
            .map(|i| x[i] * (0..d).map(|j| wp[j * len + i] * r_h[j] / (h[j] + eps)).sum::<f64>())
            .sum();
        let mut req = AttributionRequest::new(Method::AttnLrp, target, img.clone());
        req.params.lrp_eps = Some(eps);
        let s = attribute(&model, &req).unwrap().scores;
        assert!((s[token] - r_x).abs() < 1e-12 * z.max(1.0), "ε = {eps}: {} vs {r_x}", s[token]);
        assert!(s.iter().enumerate().all(|(p, v)| p == token || *v == 0.0));
    }
}

#[test]
fn constant_target_gives_zero_maps() {
    let cfg = ViTConfig {
        image_size: 12,
        depth: 2,
        dim: 16,
        mlp_dim: 32,
        heads: 2,
        ..ViTConfig::default()
    };
    let mut w = init_vit(&cfg).unwrap();
    w.patch_w = zeros_like(&w.patch_w);
    let sae = SaeModel::random(16, 32, 1, DType::F64).unwrap();
    let model = Model { vit: &w, sae: &sae };
    let img = image(&cfg, 1);
    let act = activation_map(&model, &img, 2, 0).unwrap();
    let act = if act.max() > 0.0 { act } else { activation_map(&model, &img, 2, 1).unwrap() };
    let spec = select_target(&act, TargetPolicy::MaxActivation).unwrap();
    for m in METHODS {
        let s = map(&model, m, spec.target(), &img);
        assert!(s.iter().all(|v| v.abs() < 1e-8), "{m}: {s:?}");
    }
}

fn toy(seed: u64) -> (ViTWeights, SaeModel) {
    let cfg = ViTConfig {
        image_size: 12,
        depth: 2,
        dim: 16,
        mlp_dim: 32,
        heads: 2,
        seed,
        ..ViTConfig::default()
    };
    (init_vit(&cfg).unwrap(), SaeModel::random(16, 32, seed, DType::F64).unwrap())
}

fn strongest(model: &Model, img: &Tensor, layer: usize) -> Target {
    let z = model.sae.encode_batch(&hidden_states(model.vit, img).unwrap()[layer]).unwrap();
    let m = model.sae.m();
    let i = (0..z.numel()).fold(0, |b, i| if z.data()[i] > z.data()[b] { i } else { b });
    Target { layer, token: i / m, feature: i % m }
}

#[test]
fn scaling_the_target_scales_every_map() {
    let (w, sae) = toy(3);
    let model = Model { vit: &w, sae: &sae };
    let img = image(&w.config, 3);
    let target = strongest(&model, &img, 2);
    let c = 3.0;
    let mut scaled = sae.clone();
    let n = sae.n();
    let mut we = sae.w_e.data().to_vec();
    we[target.feature * n..(target.feature + 1) * n].iter_mut().for_each(|v| *v *= c);
    scaled.w_e = Tensor::new(sae.w_e.shape().to_vec(), we, DType::F64).unwrap();
    let model_c = Model { vit: &w, sae: &scaled };
    for m in METHODS {
        let (a, b) = (map(&model, m, target, &img), map(&model_c, m, target, &img));
        let scale = a.iter().fold(0.0_f64, |x, v| x.max(v.abs()));
        for (x, y) in a.iter().zip(&b) {
            assert!((c * x - y).abs() <= 1e-6 * c * scale, "{m}: {x} vs {y}");
        }
    }
}

#[test]
fn every_method_returns_the_same_map_shape_and_is_deterministic() {
    let (w, sae) = toy(4);
    let model = Model { vit: &w, sae: &sae };
    let img = image(&w.config, 4);
    let act = activation_map(&model, &img, 1, 5).unwrap();
    let spec = select_target(&act, TargetPolicy::MaxActivation).unwrap();
    for m in METHODS {
        let params = AttributionParams { shap_samples: 200, ..Default::default() };
        let run = || compute_erf(&model, m, &spec, &img, &params, &Baseline::Zero).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.scores.len(), w.config.num_patches());
        assert!(a.scores.iter().all(|v| v.is_finite()));
        assert_eq!(a.grid, w.config.grid());
        assert_eq!(a.target, act.descriptor(spec.token));
        assert_eq!(a, b);
    }
}

#[test]
fn ig_with_input_equal_to_baseline_is_zero() {
    let (w, sae) = toy(5);
    let model = Model { vit: &w, sae: &sae };
    let img = zeros_like(&image(&w.config, 0));
    let target = strongest(&model, &img, 2);
    let s = map(&model, Method::Ig, target, &img);
    assert!(s.iter().all(|v| *v == 0.0));
}

/// Bias-free, LayerNorm-free, uniform-attention network with O(1)
/// activations.
fn audit(seed: u64) -> ViTWeights {
    let cfg = ViTConfig {
        image_size: 12,
        depth: 2,
        heads: 2,
        dim: 16,
        mlp_dim: 32,
        use_cls_token: false,
        layer_norm: false,
        seed,
        ..ViTConfig::default()
    };
    let mut w = init_vit(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = |t: &Tensor| {
        let d = Normal::new(0.0, 1.0 / (t.shape()[1] as f64).sqrt()).unwrap();
        Tensor::from_fn(t.shape().to_vec(), DType::F64, |_| d.sample(&mut rng))
    };
    w.patch_w = g(&w.patch_w);
    w.patch_b = zeros_like(&w.patch_b);
    w.pos = zeros_like(&w.pos);
    for b in &mut w.blocks {
        b.wq = zeros_like(&b.wq);
        b.wk = zeros_like(&b.wk);
        b.wv = g(&b.wv);
        b.wo = g(&b.wo);
        b.w1 = g(&b.w1);
        b.w2 = g(&b.w2);
        for bias in [&mut b.bq, &mut b.bk, &mut b.bv, &mut b.bo, &mut b.b1, &mut b.b2] {
            *bias = zeros_like(bias);
        }
    }
    w
}

#[test]
fn relevance_is_conserved_on_the_audit_network() {
    for seed in 1..=10 {
        let w = audit(seed);
        let sae = SaeModel::random(16, 32, seed, DType::F64).unwrap();
        let model = Model { vit: &w, sae: &sae };
        let img = image(&w.config, seed);
        let target = strongest(&model, &img, 1 + (seed as usize % 2));
        let z = target_value(&model, &img, &target).unwrap();
        let mut req = AttributionRequest::new(Method::AttnLrp, target, img);
        req.params.lrp_eps = Some(1e-9);
        req.params.attn_rule = AttnRule::AttnConst;
        let total: f64 = attribute(&model, &req).unwrap().scores.iter().sum();
        assert!((total - z).abs() < 1e-6 * z.abs(), "seed {seed}: {total} vs {z}");
    }
}

#[test]
fn planted_routers_are_explained_by_their_sources() {
    let cfg = SyntheticConfig {
        instances: 20,
        seed: 77,
        ..SyntheticConfig::default()
    };
    let suite = generate_suite(&cfg).unwrap();
    let mut hits = 0;
    for inst in suite.iter().filter(|i| i.kind == InstanceKind::Router) {
        let model = inst.model();
        let act = activation_map(&model, &inst.image, inst.planted.layer, inst.feature).unwrap();
        let spec = select_target(&act, TargetPolicy::MaxActivation).unwrap();
        // The activation peaks at the sink, not at any source.
        assert_eq!(spec.token, inst.planted.sink);
        let erf = compute_erf(&model, Method::AttnLrp, &spec, &inst.image, &Default::default(), &Baseline::Zero).unwrap();
        let top = (0..erf.scores.len()).fold(0, |b, p| if erf.scores[p] > erf.scores[b] { p } else { b });
        assert_ne!(Some(top), act.argmax_patch());
        if inst.planted.ground_truth.contains(&top) {
            hits += 1;
        }
    }
    assert!(hits as f64 >= 0.95 * 20.0, "{hits}/20");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn kernelshap_is_efficient_and_seeded(seed in 0u64..1000, budget in 40usize..300) {
        let (w, sae) = toy(seed);
        let model = Model { vit: &w, sae: &sae };
        let img = image(&w.config, seed + 1);
        let target = strongest(&model, &img, 2);
        let mut req = AttributionRequest::new(Method::KernelShap, target, img.clone());
        req.params.shap_samples = budget;
        req.params.seed = seed;
        let a = attribute(&model, &req).unwrap();
        let full = target_value(&model, &img, &target).unwrap();
        let empty = target_value(&model, &zeros_like(&img), &target).unwrap();
        prop_assert!((a.scores.iter().sum::<f64>() - (full - empty)).abs() < 1e-6);
        prop_assert_eq!(a, attribute(&model, &req).unwrap());
    }

    #[test]
    fn enumerated_kernelshap_is_exact_shapley(seed in 0u64..1000) {
        let cfg = ViTConfig { image_size: 8, depth: 1, dim: 16, mlp_dim: 32, heads: 2, seed, ..ViTConfig::default() };
        let w = init_vit(&cfg).unwrap();
        let sae = SaeModel::random(16, 32, seed, DType::F64).unwrap();
        let model = Model { vit: &w, sae: &sae };
        let img = image(&cfg, seed);
        let target = strongest(&model, &img, 1);
        let mut req = AttributionRequest::new(Method::KernelShap, target, img);
        req.params.shap_samples = 14;
        let approx = attribute(&model, &req).unwrap();
        let exact = exact_shapley_map(&model, &req).unwrap();
        for (a, b) in approx.scores.iter().zip(&exact.scores) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn select_target_is_idempotent(seed in 0u64..1000, feature in 0usize..32) {
        let (w, sae) = toy(seed);
        let model = Model { vit: &w, sae: &sae };
        let img = image(&w.config, seed);
        let act = activation_map(&model, &img, 2, feature).unwrap();
        if let Ok(t) = select_target(&act, TargetPolicy::MaxActivation) {
            prop_assert_eq!(select_target(&act, TargetPolicy::Explicit(t.token)).unwrap().token, t.token);
            prop_assert_eq!(select_target(&act, TargetPolicy::MaxActivation).unwrap(), t);
        }
    }
}
