//! Hand-wired ViTs with a known causal path.
//!
//! The residual stream is split into orthonormal directions, each owned by
//! one role:
//!
//! * `v`       the planted feature direction (read by the SAE)
//! * `u`       patch content, the mean pixel of the patch
//! * flags     `all` (every token), `src` (patches in S), `sink` (token t),
//!   `cls`, and `bal`, which tops every token's flag norm up to the same
//!   value so LayerNorm scales barely depend on role
//! * codes     a `dh`-dimensional unit code per token, used by the
//!   near-diagonal heads
//! * scratch   everything else; random embedding, attention and MLP writes
//!   land here and nothing downstream reads it
//!
//! All directions are orthogonal to the all-ones vector, so LayerNorm's mean
//! subtraction is the identity on the stream. When `v` is a coordinate-pair
//! direction `(e_2i - e_2i+1)/√2` every role gets a pair of its own, which
//! keeps per-coordinate relevance from leaking between roles.
//!
//! In the router block one head carries the route. Its queries and keys read
//! only flags: the sink's logits are 0 on S and at most `-MARGIN` elsewhere,
//! every other token's logits are 0 on CLS (content-free) and at most
//! `-MARGIN` elsewhere. Its values read `u` and its output projection writes
//! `strength · v`, so the sink's final latent carries
//! `strength · mean_S(û)·v` where `û` is the LayerNorm-scaled content.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{hidden_states, BlockWeights, ViTConfig, ViTWeights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Attention-logit gap between routed and suppressed tokens.
const MARGIN: f64 = 12.0;
const FLAG_AMP: f64 = 1.0;
const CODE_AMP: f64 = 2.0;
const CONTENT_AMP: f64 = 1.0;
const SCRATCH_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedRouterSpec {
    /// Source patch indices S.
    pub sources: Vec<usize>,
    /// Sink token index t (0 is CLS).
    pub sink: usize,
    /// Unit-norm planted direction v.
    pub direction: Vec<f64>,
    pub head: usize,
    pub strength: f64,
    /// Block hosting the router; `None` means the last block.
    pub layer: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct PlantedModel {
    pub weights: ViTWeights,
    /// Patches that cause the planted activation.
    pub ground_truth: Vec<usize>,
    pub sink: usize,
    pub direction: Vec<f64>,
    /// Latent layer the planted feature is read from (always the last).
    pub layer: usize,
}

/// Measured build-time ablation effects, as fractions of the activation.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub activation: f64,
    /// Drop when every ground-truth patch is blanked.
    pub source_drop: f64,
    /// Largest change when one other patch is blanked.
    pub max_other_change: f64,
    /// Change when the sink's own patch content is perturbed (0 when the sink
    /// is itself the cause).
    pub sink_change: f64,
}

/// `(e_2i - e_2i+1)/√2` in `R^dim`.
pub fn pair_direction(dim: usize, pair: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    let s = std::f64::consts::FRAC_1_SQRT_2;
    v[2 * pair] = s;
    v[2 * pair + 1] = -s;
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthonormal directions orthogonal to `v` and to the all-ones vector,
/// pair directions first.
fn role_basis(v: &[f64]) -> Vec<Vec<f64>> {
    let d = v.len();
    let ones = vec![1.0 / (d as f64).sqrt(); d];
    let mut basis: Vec<Vec<f64>> = vec![ones, v.to_vec()];
    let pair_sum = |i: usize| {
        let mut w = vec![0.0; d];
        w[2 * i] = std::f64::consts::FRAC_1_SQRT_2;
        w[2 * i + 1] = std::f64::consts::FRAC_1_SQRT_2;
        w
    };
    let candidates = (0..d / 2)
        .map(|i| pair_direction(d, i))
        .chain((0..d / 2).map(pair_sum))
        .chain((0..d).map(|i| {
            let mut e = vec![0.0; d];
            e[i] = 1.0;
            e
        }));
    for mut c in candidates {
        for b in &basis {
            let p = dot(&c, b);
            if p != 0.0 {
                c.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = dot(&c, &c).sqrt();
        if n > 1e-6 {
            if (n - 1.0).abs() > 1e-15 {
                c.iter_mut().for_each(|x| *x /= n);
            }
            basis.push(c);
        }
    }
    basis.split_off(2)
}

/// Unit codes in `R^dim` chosen greedily to keep pairwise cosines low.
fn spread_codes(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, f64) {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let draw = |rng: &mut ChaCha8Rng| {
        let mut c: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm = dot(&c, &c).sqrt();
        c.iter_mut().for_each(|x| *x /= norm);
        c
    };
    let mut codes: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut worst: f64 = -1.0;
    for _ in 0..n {
        let mut best = draw(rng);
        let mut best_cos = codes.iter().map(|c| dot(c, &best)).fold(-1.0, f64::max);
        for _ in 0..256 {
            let cand = draw(rng);
            let cos = codes.iter().map(|c| dot(c, &cand)).fold(-1.0, f64::max);
            if cos < best_cos {
                best = cand;
                best_cos = cos;
            }
        }
        worst = worst.max(best_cos);
        codes.push(best);
    }
    (codes, worst)
}

struct Roles {
    u: Vec<f64>,
    all: Vec<f64>,
    src: Vec<f64>,
    sink: Vec<f64>,
    cls: Vec<f64>,
    bal: Vec<f64>,
    codes: Vec<Vec<f64>>,
    scratch: Vec<Vec<f64>>,
}

fn allocate(v: &[f64], dh: usize) -> Result<Roles> {
    let mut b = role_basis(v).into_iter();
    let need = 6 + dh + 1;
    let have = b.len();
    if have < need {
        return Err(Error::Config(format!(
            "dim {} leaves {have} free directions, the planted router needs {need}",
            v.len()
        )));
    }
    let mut next = || b.next().expect("counted above");
    Ok(Roles {
        u: next(),
        all: next(),
        src: next(),
        sink: next(),
        cls: next(),
        bal: next(),
        codes: (0..dh).map(|_| next()).collect(),
        scratch: b.collect(),
    })
}

fn validate(config: &ViTConfig, spec: &PlantedRouterSpec, identity: bool) -> Result<usize> {
    config.validate()?;
    let bad = |m: String| Err(Error::Spec(m));
    if !config.use_cls_token {
        return Err(Error::Config(
            "the planted router parks unrouted queries on the CLS token; enable use_cls_token"
                .into(),
        ));
    }
    if config.depth == 0 {
        return Err(Error::Config("the planted router needs at least one block".into()));
    }
    let (p, t) = (config.num_patches(), config.num_tokens());
    if spec.sink >= t {
        return bad(format!("sink token {} out of range for {t} tokens", spec.sink));
    }
    if identity {
        if !spec.sources.is_empty() {
            return bad("an identity router takes no source set".into());
        }
        if spec.sink == 0 {
            return bad("an identity router needs a patch sink, not CLS".into());
        }
    } else {
        if spec.sources.is_empty() {
            return bad("source set S is empty".into());
        }
        let mut sorted = spec.sources.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != spec.sources.len() {
            return bad("source set S has duplicates".into());
        }
        if let Some(&s) = sorted.iter().find(|&&s| s >= p) {
            return bad(format!("source patch {s} out of range for {p} patches"));
        }
        if let Some(sp) = config.token_patch(spec.sink) {
            if sorted.contains(&sp) {
                return bad(format!("sink token {} lies in S", spec.sink));
            }
        }
    }
    if spec.direction.len() != config.dim {
        return bad(format!(
            "direction has length {}, model dim is {}",
            spec.direction.len(),
            config.dim
        ));
    }
    let norm = dot(&spec.direction, &spec.direction).sqrt();
    if (norm - 1.0).abs() > 1e-9 {
        return bad(format!("direction norm {norm} is not 1"));
    }
    if spec.head >= config.heads {
        return bad(format!("head {} out of range", spec.head));
    }
    if !(spec.strength > 0.0 && spec.strength.is_finite()) {
        return bad(format!("strength {} must be positive", spec.strength));
    }
    let layer = spec.layer.unwrap_or(config.depth - 1);
    if layer >= config.depth {
        return bad(format!("router block {layer} out of range"));
    }
    Ok(layer)
}

fn outer_into(w: &mut [f64], cols: usize, row: usize, dir: &[f64], c: f64) {
    for (j, x) in dir.iter().enumerate() {
        w[row * cols + j] += c * x;
    }
}

fn build(config: &ViTConfig, spec: &PlantedRouterSpec, identity: bool) -> Result<PlantedModel> {
    let layer = validate(config, spec, identity)?;
    let (d, dh, heads) = (config.dim, config.head_dim(), config.heads);
    let (p, tokens) = (config.num_patches(), config.num_tokens());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let roles = allocate(&spec.direction, dh)?;
    let (codes, max_cos) = spread_codes(tokens, dh, &mut rng);
    let scratch_noise = Normal::new(0.0, SCRATCH_STD).expect("finite std");

    let sources: Vec<usize> = if identity {
        vec![config.token_patch(spec.sink).expect("patch sink")]
    } else {
        spec.sources.clone()
    };
    let source_tok: Vec<usize> = spec
        .sources
        .iter()
        .map(|&s| config.patch_token(s))
        .collect();

    // Positional rows carry every flag and code; CLS embedding carries `cls`.
    let mut pos = vec![0.0; tokens * d];
    let mut cls = vec![0.0; d];
    cls.iter_mut()
        .zip(&roles.cls)
        .for_each(|(x, c)| *x += FLAG_AMP * c);
    for tok in 0..tokens {
        let row = &mut pos[tok * d..(tok + 1) * d];
        let mut extra: f64 = 0.0;
        let add = |row: &mut [f64], dir: &[f64], a: f64| {
            row.iter_mut().zip(dir).for_each(|(x, c)| *x += a * c)
        };
        add(row, &roles.all, FLAG_AMP);
        if tok == 0 {
            extra += 1.0;
        }
        if source_tok.contains(&tok) {
            add(row, &roles.src, FLAG_AMP);
            extra += 1.0;
        }
        if tok == spec.sink {
            add(row, &roles.sink, FLAG_AMP);
            extra += 1.0;
        }
        add(row, &roles.bal, FLAG_AMP * (2.0 - extra).max(0.0).sqrt());
        for (i, dir) in roles.codes.iter().enumerate() {
            add(row, dir, CODE_AMP * codes[tok][i]);
        }
    }

    // Patch embedding: mean pixel onto `u`, small random writes to scratch.
    let plen = config.patch_len();
    let mut patch_w = vec![0.0; d * plen];
    for i in 0..plen {
        for (r, ur) in roles.u.iter().enumerate() {
            patch_w[r * plen + i] += CONTENT_AMP / plen as f64 * ur;
        }
        for s in &roles.scratch {
            let c = scratch_noise.sample(&mut rng);
            for (r, sr) in s.iter().enumerate() {
                patch_w[r * plen + i] += c * sr;
            }
        }
    }

    // LayerNorm readout of a unit-amplitude component is √d/‖h‖. Bound ‖h‖²
    // by the flag, code and content budget plus slack for scratch.
    let (a_min, a_max) = if config.layer_norm {
        let base = 3.0 * FLAG_AMP * FLAG_AMP + CODE_AMP * CODE_AMP;
        let lo = base;
        let hi = base + CONTENT_AMP * CONTENT_AMP + 0.5;
        ((d as f64 / hi).sqrt(), (d as f64 / lo).sqrt())
    } else {
        (1.0, 1.0)
    };
    let sqrt_dh = (dh as f64).sqrt();
    // Router: logits = -c² a_q a_k / √dh on suppressed keys.
    let c_route = (MARGIN * sqrt_dh / (a_min * a_min * FLAG_AMP * FLAG_AMP)).sqrt();
    // Near-diagonal heads: self minus best other ≥ α² A² a (a_min - a_max cos)/√dh.
    let diag_gap = a_min - a_max * max_cos;
    if diag_gap <= 0.0 {
        return Err(Error::Config(format!(
            "head_dim {dh} is too small to separate {tokens} position codes"
        )));
    }
    let alpha = (MARGIN * sqrt_dh / (CODE_AMP * CODE_AMP * a_min * diag_gap)).sqrt();

    let dt = config.dtype;
    let mat = |rows: usize, cols: usize, data: Vec<f64>| Tensor::from_fn(vec![rows, cols], dt, |i| data[i]);
    let vec1 = |n: usize, val: f64| Tensor::full(vec![n], val, dt);
    let scratch_write = |rng: &mut ChaCha8Rng, w: &mut [f64], cols: usize, col: usize| {
        for s in &roles.scratch {
            let c = scratch_noise.sample(rng);
            for (r, sr) in s.iter().enumerate() {
                w[r * cols + col] += c * sr;
            }
        }
    };

    let mut blocks = Vec::with_capacity(config.depth);
    for l in 0..config.depth {
        let mut wq = vec![0.0; d * d];
        let mut wk = vec![0.0; d * d];
        let mut wv = vec![0.0; d * d];
        let mut wo = vec![0.0; d * d];
        for h in 0..heads {
            let r0 = h * dh;
            if l == layer && h == spec.head {
                let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>();
                // Row 0: non-sink queries look for CLS.
                outer_into(&mut wq, d, r0, &diff(&roles.all, &roles.sink), c_route);
                outer_into(&mut wk, d, r0, &diff(&roles.cls, &roles.all), c_route);
                // Row 1: the sink looks for S (or for itself).
                outer_into(&mut wq, d, r0 + 1, &roles.sink, c_route);
                let target = if identity { &roles.sink } else { &roles.src };
                outer_into(&mut wk, d, r0 + 1, &diff(target, &roles.all), c_route);
                outer_into(&mut wv, d, r0, &roles.u, 1.0);
                for (r, vr) in spec.direction.iter().enumerate() {
                    wo[r * d + r0] += spec.strength * vr;
                }
            } else {
                for i in 0..dh {
                    outer_into(&mut wq, d, r0 + i, &roles.codes[i], alpha);
                    outer_into(&mut wk, d, r0 + i, &roles.codes[i], alpha);
                    for s in &roles.scratch {
                        let c = scratch_noise.sample(&mut rng);
                        outer_into(&mut wv, d, r0 + i, s, c);
                    }
                    scratch_write(&mut rng, &mut wo, d, r0 + i);
                }
            }
        }
        let m = config.mlp_dim;
        let mut w1 = vec![0.0; m * d];
        for r in 0..m {
            for s in &roles.scratch {
                let c = scratch_noise.sample(&mut rng);
                outer_into(&mut w1, d, r, s, c);
            }
        }
        let mut w2 = vec![0.0; d * m];
        for col in 0..m {
            scratch_write(&mut rng, &mut w2, m, col);
        }
        blocks.push(BlockWeights {
            ln1_gamma: vec1(d, 1.0),
            ln1_beta: vec1(d, 0.0),
            wq: mat(d, d, wq),
            bq: vec1(d, 0.0),
            wk: mat(d, d, wk),
            bk: vec1(d, 0.0),
            wv: mat(d, d, wv),
            bv: vec1(d, 0.0),
            wo: mat(d, d, wo),
            bo: vec1(d, 0.0),
            ln2_gamma: vec1(d, 1.0),
            ln2_beta: vec1(d, 0.0),
            w1: mat(m, d, w1),
            b1: vec1(m, 0.0),
            w2: mat(d, m, w2),
            b2: vec1(d, 0.0),
        });
    }

    let weights = ViTWeights {
        config: config.clone(),
        patch_w: mat(d, plen, patch_w),
        patch_b: vec1(d, 0.0),
        pos: mat(tokens, d, pos),
        cls: Some(mat(1, d, cls)),
        blocks,
    };
    let mut sorted = sources;
    sorted.sort_unstable();
    let model = PlantedModel {
        weights,
        ground_truth: sorted,
        sink: spec.sink,
        direction: spec.direction.clone(),
        layer: config.depth,
    };

    // Build-time ablation oracle on a seeded probe image.
    let mut probe_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0fab_1a7e);
    let probe = Tensor::from_fn(config.image_shape(), dt, |_| probe_rng.random_range(0.2..0.8));
    let _ = p;
    let report = model.ablation(&probe)?;
    report.check(identity)?;
    Ok(model)
}

impl AblationReport {
    /// Errors unless the measured effects meet the construction's guarantees:
    /// blanking S drops ≥ 90%, blanking any other single patch moves ≤ 5%,
    /// perturbing the sink's own content moves ≤ 10%.
    pub fn check(&self, identity: bool) -> Result<()> {
        if !(self.activation > 0.0) {
            return Err(Error::Spec("planted activation does not fire on the probe".into()));
        }
        if self.source_drop < 0.9 {
            return Err(Error::Spec(format!(
                "blanking S only drops the activation by {:.4}",
                self.source_drop
            )));
        }
        if self.max_other_change > 0.05 {
            return Err(Error::Spec(format!(
                "blanking a non-source patch moves the activation by {:.4}",
                self.max_other_change
            )));
        }
        if !identity && self.sink_change > 0.10 {
            return Err(Error::Spec(format!(
                "perturbing the sink moves the activation by {:.4}",
                self.sink_change
            )));
        }
        Ok(())
    }
}

impl PlantedModel {
    /// `max(0, ⟨v, h^(L)_t⟩)`: the planted feature at the sink.
    pub fn activation(&self, image: &Tensor) -> Result<f64> {
        let hs = hidden_states(&self.weights, image)?;
        let h = hs[self.layer].row(self.sink);
        Ok(dot(h, &self.direction).max(0.0))
    }

    /// Runs the three ablation probes on `image`.
    pub fn ablation(&self, image: &Tensor) -> Result<AblationReport> {
        let cfg = &self.weights.config;
        let base = self.activation(image)?;
        let blank = |img: &Tensor, patches: &[usize], f: &dyn Fn(f64) -> f64| -> Tensor {
            let mut data = img.data().to_vec();
            let (ps, size, g) = (cfg.patch_size, cfg.image_size, cfg.grid());
            for &pch in patches {
                let (gy, gx) = (pch / g, pch % g);
                for c in 0..cfg.channels {
                    for r in 0..ps {
                        for s in 0..ps {
                            let i = c * size * size + (gy * ps + r) * size + gx * ps + s;
                            data[i] = f(data[i]);
                        }
                    }
                }
            }
            Tensor::new(img.shape().to_vec(), data, img.dtype()).expect("finite")
        };
        let rel = |x: f64| if base > 0.0 { x / base } else { f64::INFINITY };
        let zero = |_: f64| 0.0;
        let without_s = self.activation(&blank(image, &self.ground_truth, &zero))?;
        let sink_patch = cfg.token_patch(self.sink);
        let mut max_other: f64 = 0.0;
        for pch in 0..cfg.num_patches() {
            if self.ground_truth.contains(&pch) || Some(pch) == sink_patch {
                continue;
            }
            let a = self.activation(&blank(image, &[pch], &zero))?;
            max_other = max_other.max(rel((a - base).abs()));
        }
        let sink_change = match sink_patch {
            Some(sp) if !self.ground_truth.contains(&sp) => {
                let a = self.activation(&blank(image, &[sp], &|x| 1.0 - x))?;
                rel((a - base).abs())
            }
            _ => 0.0,
        };
        Ok(AblationReport {
            activation: base,
            source_drop: rel(base - without_s),
            max_other_change: max_other,
            sink_change,
        })
    }
}

/// Wires a router head that copies the mean content of `spec.sources` into
/// the sink's `v` component. Fails with a spec error if the build-time
/// ablation probes do not confirm the intended causal structure.
pub fn build_planted_router(config: &ViTConfig, spec: &PlantedRouterSpec) -> Result<PlantedModel> {
    build(config, spec, false)
}

/// Same wiring, but the sink attends to itself: a local feature whose cause
/// is the sink's own patch. `spec.sources` must be empty.
pub fn build_identity_router(config: &ViTConfig, spec: &PlantedRouterSpec) -> Result<PlantedModel> {
    build(config, spec, true)
}
