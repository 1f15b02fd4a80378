//! KernelSHAP and an insertion sweep on the global rayon pool against the
//! same work pinned to a one-thread pool. Built without the `parallel`
//! feature both variants run on the calling thread.

use cafe::attribution::{attribute, AttributionRequest, Baseline, Method, Model, Target};
use cafe::eval::{insertion_curve, InsertionOptions};
use cafe::sae::SaeModel;
use cafe::vit::{init_vit, ViTConfig};
use cafe::{DType, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup() -> (cafe::vit::ViTWeights, SaeModel, Tensor) {
    let cfg = ViTConfig {
        image_size: 16,
        depth: 2,
        dim: 32,
        mlp_dim: 64,
        heads: 4,
        ..ViTConfig::default()
    };
    let w = init_vit(&cfg).unwrap();
    let sae = SaeModel::random(32, 64, 1, DType::F64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = Tensor::from_fn(cfg.image_shape(), DType::F64, |_| rng.random_range(0.0..1.0));
    (w, sae, img)
}

fn bench(c: &mut Criterion) {
    let (w, sae, img) = setup();
    let model = Model { vit: &w, sae: &sae };
    let z = sae.encode_batch(&cafe::vit::hidden_states(&w, &img).unwrap()[2]).unwrap();
    let best = (0..z.numel()).fold(0, |b, i| if z.data()[i] > z.data()[b] { i } else { b });
    let target = Target { layer: 2, token: best / sae.m(), feature: best % sae.m() };
    let mut req = AttributionRequest::new(Method::KernelShap, target, img.clone());
    req.params.shap_samples = 256;
    let ranking: Vec<usize> = (0..w.config.num_patches()).collect();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();

    let mut g = c.benchmark_group("kernelshap_256");
    g.sample_size(10);
    g.bench_function("pool", |b| b.iter(|| attribute(&model, &req).unwrap()));
    g.bench_function("one_thread", |b| b.iter(|| single.install(|| attribute(&model, &req).unwrap())));
    g.finish();

    let sweep = || {
        insertion_curve(&model, &target, &img, &ranking, &Baseline::Zero, "b", &InsertionOptions::default()).unwrap()
    };
    let mut g = c.benchmark_group("insertion_sweep");
    g.sample_size(10);
    g.bench_function("pool", |b| b.iter(sweep));
    g.bench_function("one_thread", |b| b.iter(|| single.install(sweep)));
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
