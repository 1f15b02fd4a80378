use cafe::io::{encode_checkpoint, load_sae, save_sae};
use cafe::sae::{feature_activation, sae_decode, sae_encode, sae_loss, train_sae, SaeModel, SaeTrainConfig};
use cafe::vit::{forward, hidden_states, init_vit, ViTConfig};
use cafe::{DType, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn gaussian(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let d = Normal::new(0.0, 1.0).unwrap();
    Tensor::from_fn(shape, DType::F64, |_| d.sample(rng))
}

fn random_model(n: usize, m: usize, seed: u64) -> SaeModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SaeModel::new(
        gaussian(vec![m, n], &mut rng),
        gaussian(vec![n, m], &mut rng),
        gaussian(vec![n], &mut rng),
        gaussian(vec![n], &mut rng),
        -1.0,
    )
    .unwrap()
}

#[test]
fn encode_and_decode_match_the_formulas() {
    let (n, m) = (6, 11);
    for seed in 0..5 {
        let sae = random_model(n, m, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
        let h: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (we, wd, bd, bh) = (sae.w_e.data(), sae.w_d.data(), sae.b_d.data(), sae.b_h.data());
        let z_oracle: Vec<f64> = (0..m)
            .map(|k| (0..n).map(|j| we[k * n + j] * (h[j] - bd[j])).sum::<f64>().max(0.0))
            .collect();
        let z = sae_encode(&sae, &Tensor::new(vec![n], h.clone(), DType::F64).unwrap()).unwrap();
        for (a, b) in z.data().iter().zip(&z_oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        // Decode as printed: W_d z − b_h.
        let hhat = sae_decode(&sae, &z).unwrap();
        for j in 0..n {
            let want = (0..m).map(|k| wd[j * m + k] * z_oracle[k]).sum::<f64>() - bh[j];
            assert!((hhat.data()[j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn loss_gradients_match_central_differences() {
    let (n, m) = (3, 5);
    let sae = random_model(n, m, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = gaussian(vec![n], &mut rng);
    let lambda = 0.3;
    let (_, g) = sae_loss(&sae, &h, lambda).unwrap();
    let step = 1e-5;
    let params: [(&str, &Tensor, &Tensor); 4] = [
        ("w_e", &sae.w_e, &g.w_e),
        ("w_d", &sae.w_d, &g.w_d),
        ("b_d", &sae.b_d, &g.b_d),
        ("b_h", &sae.b_h, &g.b_h),
    ];
    for (name, p, grad) in params {
        for i in 0..p.numel() {
            let at = |d: f64| {
                let mut q = sae.clone();
                let mut data = p.data().to_vec();
                data[i] += d;
                let t = Tensor::new(p.shape().to_vec(), data, DType::F64).unwrap();
                match name {
                    "w_e" => q.w_e = t,
                    "w_d" => q.w_d = t,
                    "b_d" => q.b_d = t,
                    _ => q.b_h = t,
                }
                sae_loss(&q, &h, lambda).unwrap().0
            };
            let fd = (at(step) - at(-step)) / (2.0 * step);
            let a = grad.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-5, "{name}[{i}]: {a} vs {fd}");
        }
    }
}

#[test]
fn huge_lambda_silences_the_codes() {
    let (n, count) = (8, 2048);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = gaussian(vec![count, n], &mut rng);
    let cfg = SaeTrainConfig {
        m: Some(16),
        lambda: 1e6,
        steps: 400,
        seed: 1,
        ..SaeTrainConfig::default()
    };
    let sae = train_sae(&x, &cfg).unwrap();
    let held_out = gaussian(vec![512, n], &mut rng);
    let z = sae.encode_batch(&held_out).unwrap();
    let l0 = z.data().iter().filter(|v| **v > 0.0).count() as f64 / 512.0;
    assert!(l0 < 0.01 * 16.0, "mean L0 {l0}");
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = gaussian(vec![256, 6], &mut rng);
    let cfg = SaeTrainConfig {
        m: Some(12),
        steps: 60,
        seed: 5,
        ..SaeTrainConfig::default()
    };
    let bytes = |s: &SaeModel| encode_checkpoint(&s.named_tensors(), &serde_json::json!({})).unwrap();
    assert_eq!(bytes(&train_sae(&x, &cfg).unwrap()), bytes(&train_sae(&x, &cfg).unwrap()));
}

#[test]
fn feature_activation_is_the_encoded_latent() {
    let cfg = ViTConfig {
        image_size: 8,
        depth: 2,
        dim: 16,
        mlp_dim: 32,
        ..ViTConfig::default()
    };
    let w = init_vit(&cfg).unwrap();
    let sae = SaeModel::random(16, 32, 2, DType::F64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = Tensor::from_fn(cfg.image_shape(), DType::F64, |_| rng.random::<f64>());
    let hs = hidden_states(&w, &img).unwrap();
    for layer in 0..=2 {
        for token in 0..cfg.num_tokens() {
            let row = Tensor::new(vec![16], hs[layer].data()[token * 16..(token + 1) * 16].to_vec(), DType::F64).unwrap();
            let z = sae_encode(&sae, &row).unwrap();
            let mut ft = forward(&w, &img).unwrap();
            for k in [0, 7, 31] {
                let nodes = feature_activation(&sae, &mut ft, layer, token, k).unwrap();
                assert_eq!(ft.tape.value(nodes.z).item().unwrap(), z.data()[k]);
            }
        }
    }
}

#[test]
fn dead_feature_never_fires() {
    let mut sae = random_model(5, 7, 9);
    let mut we = sae.w_e.data().to_vec();
    we[3 * 5..4 * 5].iter_mut().for_each(|v| *v = 0.0);
    sae.w_e = Tensor::new(vec![7, 5], we, DType::F64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = sae.encode_batch(&gaussian(vec![100, 5], &mut rng)).unwrap();
    assert!((0..100).all(|r| z.data()[r * 7 + 3] == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn codes_are_nonnegative(seed in 0u64..10_000, scale in 0.1f64..10.0) {
        let sae = random_model(4, 9, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let h = Tensor::from_fn(vec![20, 4], DType::F64, |_| rng.random_range(-scale..scale));
        prop_assert!(sae.encode_batch(&h).unwrap().data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn loss_is_nondecreasing_in_lambda(seed in 0u64..10_000, l1 in 0.0f64..5.0, dl in 0.0f64..5.0) {
        let sae = random_model(4, 9, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let h = gaussian(vec![4], &mut rng);
        let a = sae_loss(&sae, &h, l1).unwrap().0;
        let b = sae_loss(&sae, &h, l1 + dl).unwrap().0;
        prop_assert!(b >= a);
    }

    #[test]
    fn checkpoint_save_load_save_is_byte_identical(seed in 0u64..10_000, layer in proptest::option::of(0usize..12)) {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let sae = random_model(3, 7, seed);
        save_sae(&a, &sae, layer).unwrap();
        let (back, l) = load_sae(&a).unwrap();
        prop_assert_eq!(&back, &sae);
        prop_assert_eq!(l, layer);
        save_sae(&b, &back, l).unwrap();
        prop_assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}
