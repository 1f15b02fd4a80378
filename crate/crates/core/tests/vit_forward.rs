use cafe::attribution::{target_value, Model, Target};
use cafe::sae::{feature_activation, SaeModel};
use cafe::vit::{forward, hidden_states, init_vit, input_gradient, ViTConfig, ViTWeights};
use cafe::{DType, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(seed: u64) -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        depth: 2,
        heads: 2,
        dim: 16,
        mlp_dim: 32,
        use_cls_token: true,
        seed,
        ..ViTConfig::default()
    }
}

/// Multiplies every weight by `k` so that tokens actually interact.
fn amplified(cfg: &ViTConfig, k: f64) -> ViTWeights {
    let w = init_vit(cfg).unwrap();
    let named: Vec<(String, Tensor)> = w
        .named_tensors()
        .into_iter()
        .map(|(n, t)| {
            let s = if n.contains("ln") { 1.0 } else { k };
            let data = t.data().iter().map(|v| v * s).collect();
            (n, Tensor::new(t.shape().to_vec(), data, t.dtype()).unwrap())
        })
        .collect();
    ViTWeights::from_named_tensors(cfg, &named).unwrap()
}

fn random_image(cfg: &ViTConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(cfg.image_shape(), DType::F64, |_| rng.random::<f64>())
}

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn vecof(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

/// `x Wᵀ + b` with `W` stored `[out × in]`.
fn affine(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    let (w, b) = (mat(w), vecof(b));
    x.iter()
        .map(|row| {
            w.iter()
                .zip(&b)
                .map(|(wr, bi)| row.iter().zip(wr).map(|(a, c)| a * c).sum::<f64>() + bi)
                .collect()
        })
        .collect()
}

fn norm(x: &Mat, g: &Tensor, b: &Tensor, eps: f64) -> Mat {
    let (g, b) = (vecof(g), vecof(b));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mu) / (var + eps).sqrt() * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x.powi(3))).tanh())
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

/// Token latents of every layer, written out loop by loop.
fn straight_line(w: &ViTWeights, image: &Tensor) -> Vec<Mat> {
    let cfg = &w.config;
    let (ps, c, s) = (cfg.patch_size, cfg.channels, cfg.image_size);
    let g = s / ps;
    let px = |ch: usize, y: usize, x: usize| image.data()[ch * s * s + y * s + x];
    let mut patches = Vec::new();
    for gy in 0..g {
        for gx in 0..g {
            let mut v = Vec::new();
            for ch in 0..c {
                for r in 0..ps {
                    for q in 0..ps {
                        v.push(px(ch, gy * ps + r, gx * ps + q));
                    }
                }
            }
            patches.push(v);
        }
    }
    let mut h = affine(&patches, &w.patch_w, &w.patch_b);
    if let Some(cls) = &w.cls {
        h.insert(0, vecof(cls));
    }
    h = add(&h, &mat(&w.pos));
    let mut layers = vec![h.clone()];
    let (heads, d) = (cfg.heads, cfg.dim);
    let dh = d / heads;
    for b in &w.blocks {
        let a_in = if cfg.layer_norm { norm(&h, &b.ln1_gamma, &b.ln1_beta, cfg.ln_eps) } else { h.clone() };
        let q = affine(&a_in, &b.wq, &b.bq);
        let k = affine(&a_in, &b.wk, &b.bk);
        let v = affine(&a_in, &b.wv, &b.bv);
        let t = h.len();
        let mut cat = vec![vec![0.0; d]; t];
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            for i in 0..t {
                let logits: Vec<f64> = (0..t)
                    .map(|j| cols.clone().map(|e| q[i][e] * k[j][e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = ex.iter().sum();
                for e in cols.clone() {
                    cat[i][e] = (0..t).map(|j| ex[j] / z * v[j][e]).sum();
                }
            }
        }
        let h_mid = add(&h, &affine(&cat, &b.wo, &b.bo));
        let m_in = if cfg.layer_norm { norm(&h_mid, &b.ln2_gamma, &b.ln2_beta, cfg.ln_eps) } else { h_mid.clone() };
        let act: Mat = affine(&m_in, &b.w1, &b.b1)
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        h = add(&h_mid, &affine(&act, &b.w2, &b.b2));
        layers.push(h.clone());
    }
    layers
}

#[test]
fn forward_matches_straight_line_oracle() {
    for (seed, cls, ln) in [(1, true, true), (2, false, true), (3, true, false)] {
        let cfg = ViTConfig {
            use_cls_token: cls,
            layer_norm: ln,
            ..small(seed)
        };
        let w = amplified(&cfg, 20.0);
        let img = random_image(&cfg, seed);
        let got = hidden_states(&w, &img).unwrap();
        let want = straight_line(&w, &img);
        assert_eq!(got.len(), want.len());
        for (l, (g, o)) in got.iter().zip(&want).enumerate() {
            let scale = o.iter().flatten().fold(1.0_f64, |a, v| a.max(v.abs()));
            for (a, b) in g.data().iter().zip(o.iter().flatten()) {
                assert!((a - b).abs() <= 1e-10 * scale, "layer {l}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn default_config_matches_oracle() {
    let cfg = ViTConfig::default();
    let w = init_vit(&cfg).unwrap();
    let img = random_image(&cfg, 9);
    let got = hidden_states(&w, &img).unwrap();
    let want = straight_line(&w, &img);
    let last = cfg.depth;
    for (a, b) in got[last].data().iter().zip(want[last].iter().flatten()) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let cfg = small(4);
    let w = amplified(&cfg, 30.0);
    let ft = forward(&w, &random_image(&cfg, 4)).unwrap();
    for b in &ft.blocks {
        for &p in &b.attn_probs {
            let probs = ft.tape.value(p);
            let (rows, cols) = probs.dims2().unwrap();
            for r in 0..rows {
                let s: f64 = probs.data()[r * cols..(r + 1) * cols].iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn doubling_the_input_doubles_linear_embeddings() {
    let cfg = ViTConfig {
        use_cls_token: false,
        ..small(5)
    };
    let mut w = init_vit(&cfg).unwrap();
    w.patch_b = Tensor::zeros(w.patch_b.shape().to_vec(), DType::F64);
    w.pos = Tensor::zeros(w.pos.shape().to_vec(), DType::F64);
    let x = random_image(&cfg, 5);
    let x2 = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| 2.0 * v).collect(), DType::F64).unwrap();
    let (h, h2) = (&hidden_states(&w, &x).unwrap()[0], &hidden_states(&w, &x2).unwrap()[0]);
    for (a, b) in h.data().iter().zip(h2.data()) {
        assert!((2.0 * a - b).abs() < 1e-15);
    }
}

/// Pixel permutation moving patch `p` to position `perm[p]`.
fn permute_patches(cfg: &ViTConfig, img: &Tensor, perm: &[usize]) -> Tensor {
    let (s, ps, g) = (cfg.image_size, cfg.patch_size, cfg.grid());
    let mut out = img.data().to_vec();
    for (p, &q) in perm.iter().enumerate() {
        for ch in 0..cfg.channels {
            for r in 0..ps {
                for c in 0..ps {
                    let src = ch * s * s + ((p / g) * ps + r) * s + (p % g) * ps + c;
                    let dst = ch * s * s + ((q / g) * ps + r) * s + (q % g) * ps + c;
                    out[dst] = img.data()[src];
                }
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out, DType::F64).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn permutation_equivariance_without_positions(seed in 0u64..1000, perm in Just((0..9usize).collect::<Vec<_>>()).prop_shuffle()) {
        let cfg = ViTConfig { image_size: 12, use_cls_token: false, ..small(seed) };
        let mut w = amplified(&cfg, 20.0);
        w.pos = Tensor::zeros(w.pos.shape().to_vec(), DType::F64);
        let img = random_image(&cfg, seed);
        let h = hidden_states(&w, &img).unwrap();
        let hp = hidden_states(&w, &permute_patches(&cfg, &img, &perm)).unwrap();
        let d = cfg.dim;
        for (a, b) in h.iter().zip(&hp) {
            for (p, &q) in perm.iter().enumerate() {
                for j in 0..d {
                    prop_assert!((a.data()[p * d + j] - b.data()[q * d + j]).abs() < 1e-10);
                }
            }
        }
    }
}

fn strongest(w: &ViTWeights, sae: &SaeModel, img: &Tensor, layer: usize) -> Target {
    let hs = hidden_states(w, img).unwrap();
    let z = sae.encode_batch(&hs[layer]).unwrap();
    let m = sae.m();
    let i = (0..z.numel()).fold(0, |b, i| if z.data()[i] > z.data()[b] { i } else { b });
    Target {
        layer,
        token: i / m,
        feature: i % m,
    }
}

fn fd_check(w: &ViTWeights, sae: &SaeModel, img: &Tensor, target: Target, pixels: &[usize], scale: f64) -> f64 {
    let model = Model { vit: w, sae };
    let mut ft = forward(w, img).unwrap();
    let nodes = feature_activation(sae, &mut ft, target.layer, target.token, target.feature).unwrap();
    let grad = input_gradient(&ft, nodes.z).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for &p in pixels {
        let at = |d: f64| {
            let mut data = img.data().to_vec();
            data[p] += d;
            scale * target_value(&model, &Tensor::new(img.shape().to_vec(), data, DType::F64).unwrap(), &target).unwrap()
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        let a = scale * grad.data()[p];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8));
    }
    worst
}

#[test]
fn input_gradient_matches_central_differences() {
    for seed in 0..4 {
        let cfg = small(seed);
        let w = amplified(&cfg, 20.0);
        let sae = SaeModel::random(cfg.dim, 32, seed, DType::F64).unwrap();
        let img = random_image(&cfg, 100 + seed);
        let target = strongest(&w, &sae, &img, cfg.depth);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels: Vec<usize> = (0..8).map(|_| rng.random_range(0..img.numel())).collect();
        let err = fd_check(&w, &sae, &img, target, &pixels, 1.0);
        assert!(err < 1e-5, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn gradient_is_linear_in_the_target() {
    let cfg = small(7);
    let w = amplified(&cfg, 20.0);
    let sae = SaeModel::random(cfg.dim, 32, 7, DType::F64).unwrap();
    let img = random_image(&cfg, 7);
    let target = strongest(&w, &sae, &img, 1);
    // Doubling the encoder row doubles z_k (ReLU is positively homogeneous).
    let mut sae2 = sae.clone();
    let n = sae.n();
    let mut we = sae2.w_e.data().to_vec();
    we[target.feature * n..(target.feature + 1) * n].iter_mut().for_each(|v| *v *= 2.0);
    sae2.w_e = Tensor::new(sae.w_e.shape().to_vec(), we, DType::F64).unwrap();
    let grad = |s: &SaeModel| {
        let mut ft = forward(&w, &img).unwrap();
        let nodes = feature_activation(s, &mut ft, target.layer, target.token, target.feature).unwrap();
        input_gradient(&ft, nodes.z).unwrap()
    };
    let (g1, g2) = (grad(&sae), grad(&sae2));
    for (a, b) in g1.data().iter().zip(g2.data()) {
        assert!((2.0 * a - b).abs() <= 1e-12 * a.abs().max(1e-12));
    }
}

#[test]
fn constant_target_has_zero_gradient() {
    let cfg = small(8);
    let mut w = amplified(&cfg, 20.0);
    w.patch_w = Tensor::zeros(w.patch_w.shape().to_vec(), DType::F64);
    let sae = SaeModel::random(cfg.dim, 32, 8, DType::F64).unwrap();
    let img = random_image(&cfg, 8);
    let target = strongest(&w, &sae, &img, 2);
    let mut ft = forward(&w, &img).unwrap();
    let nodes = feature_activation(&sae, &mut ft, target.layer, target.token, target.feature).unwrap();
    let g = input_gradient(&ft, nodes.z).unwrap();
    assert!(g.data().iter().all(|v| *v == 0.0));
}
