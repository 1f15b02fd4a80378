//! Seeded Adam training with decoder renormalization and dead-feature
//! resampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss_graph, SaeModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeTrainConfig {
    /// Feature count; `None` means `2n`.
    pub m: Option<usize>,
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Ascending prefix sizes ending at `m`; `None` trains the plain loss.
    pub matryoshka_groups: Option<Vec<usize>>,
    pub decoder_bias_sign: f64,
    /// Steps without any activation after which a feature is resampled.
    pub dead_after: usize,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        SaeTrainConfig {
            m: None,
            lambda: 1e-3,
            lr: 1e-2,
            batch_size: 64,
            steps: 5000,
            seed: 0,
            matryoshka_groups: None,
            decoder_bias_sign: -1.0,
            dead_after: 1000,
        }
    }
}

/// `{m/4, m/2, m}`, dropping empty or repeated prefixes.
pub fn default_groups(m: usize) -> Vec<usize> {
    let mut g = vec![m / 4, m / 2, m];
    g.retain(|&x| x > 0);
    g.dedup();
    g
}

impl SaeTrainConfig {
    pub fn validate(&self, n: usize) -> Result<usize> {
        let m = self.m.unwrap_or(2 * n);
        let bad = |s: String| Err(Error::Config(s));
        if m == 0 {
            return bad("m must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("λ must be ≥ 0, got {}", self.lambda));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return bad("learning rate and batch size must be positive".into());
        }
        if self.decoder_bias_sign != 1.0 && self.decoder_bias_sign != -1.0 {
            return bad(format!(
                "decoder_bias_sign must be ±1, got {}",
                self.decoder_bias_sign
            ));
        }
        if let Some(g) = &self.matryoshka_groups {
            if g.is_empty() || g[0] == 0 || g.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("Matryoshka groups {g:?} must be strictly ascending"));
            }
            if *g.last().expect("nonempty") != m {
                return bad(format!("last Matryoshka group must equal m = {m}"));
            }
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub final_loss: f64,
    pub resampled: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, p: &Tensor, g: &Tensor, lr: f64, t: usize) -> Tensor {
        let bc1 = 1.0 - BETA1.powi(t as i32);
        let bc2 = 1.0 - BETA2.powi(t as i32);
        let mut out = p.data().to_vec();
        for (i, (&gi, x)) in g.data().iter().zip(out.iter_mut()).enumerate() {
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * gi;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * gi * gi;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            *x -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
        Tensor::from_fn(p.shape().to_vec(), p.dtype(), |i| out[i])
    }
}

fn normalize_columns(w: &Tensor) -> Tensor {
    let (n, m) = (w.shape()[0], w.shape()[1]);
    let d = w.data();
    let norms: Vec<f64> = (0..m)
        .map(|c| (0..n).map(|r| d[r * m + c].powi(2)).sum::<f64>().sqrt())
        .collect();
    Tensor::from_fn(vec![n, m], w.dtype(), |i| {
        let nc = norms[i % m];
        if nc > 0.0 {
            d[i] / nc
        } else {
            d[i]
        }
    })
}

/// Trains an SAE on the rows of `latents` (`[N × n]`).
pub fn train_sae(latents: &Tensor, cfg: &SaeTrainConfig) -> Result<SaeModel> {
    train_sae_with_report(latents, cfg).map(|(m, _)| m)
}

/// [`train_sae`] plus summary statistics.
pub fn train_sae_with_report(
    latents: &Tensor,
    cfg: &SaeTrainConfig,
) -> Result<(SaeModel, TrainReport)> {
    let (count, n) = latents.dims2()?;
    if count == 0 || n == 0 {
        return Err(Error::Data("empty latent dataset".into()));
    }
    let m = cfg.validate(n)?;
    let dtype = latents.dtype();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut model = SaeModel::random(n, m, rng.random(), dtype)?;
    let data = latents.data();
    let mean: Vec<f64> = (0..n)
        .map(|j| (0..count).map(|i| data[i * n + j]).sum::<f64>() / count as f64)
        .collect();
    model.b_d = Tensor::from_fn(vec![n], dtype, |j| mean[j]);
    model.b_h = Tensor::from_fn(vec![n], dtype, |j| cfg.decoder_bias_sign * mean[j]);
    model.decoder_bias_sign = cfg.decoder_bias_sign;

    let mut opt = [
        Adam::new(m * n),
        Adam::new(n * m),
        Adam::new(n),
        Adam::new(n),
    ];
    let mut idle = vec![0usize; m];
    let mut report = TrainReport::default();
    let groups = cfg.matryoshka_groups.as_deref();
    let bs = cfg.batch_size;
    for step in 1..=cfg.steps {
        let rows: Vec<usize> = (0..bs).map(|_| rng.random_range(0..count)).collect();
        let mut buf = Vec::with_capacity(bs * n);
        for &r in &rows {
            buf.extend_from_slice(&data[r * n..(r + 1) * n]);
        }
        let batch = Tensor::from_raw(vec![bs, n], buf, dtype);
        let g = loss_graph(&model, &batch, cfg.lambda, groups)?;
        let out = g.tape.last().expect("loss");
        report.final_loss = g.tape.value(out).item()?;
        let seed = Tensor::full(vec![1, 1], 1.0, dtype);
        let grads = g.tape.backward(&seed)?;
        let grad = |i: usize| grads.get(g.params[i]).cloned().expect("leaf gradient");
        model.w_e = opt[0].step(&model.w_e, &grad(0), cfg.lr, step);
        model.w_d = normalize_columns(&opt[1].step(&model.w_d, &grad(1), cfg.lr, step));
        model.b_d = opt[2].step(&model.b_d, &grad(2), cfg.lr, step);
        model.b_h = opt[3].step(&model.b_h, &grad(3), cfg.lr, step);

        let z = g.tape.value(g.z);
        for (j, c) in idle.iter_mut().enumerate() {
            if (0..bs).any(|b| z.data()[b * m + j] > 0.0) {
                *c = 0;
            } else {
                *c += 1;
            }
        }
        let dead: Vec<usize> = (0..m).filter(|&j| idle[j] >= cfg.dead_after).collect();
        if !dead.is_empty() {
            resample(&mut model, &mut opt, &batch, g.tape.value(g.hhat), &dead);
            report.resampled += dead.len();
            dead.iter().for_each(|&j| idle[j] = 0);
        }
    }
    Ok((model, report))
}

/// Points each dead feature at the residual of the worst-reconstructed batch
/// sample (taking successive samples when several features are dead).
fn resample(model: &mut SaeModel, opt: &mut [Adam; 4], batch: &Tensor, hhat: &Tensor, dead: &[usize]) {
    let (bs, n) = (batch.shape()[0], batch.shape()[1]);
    let m = model.m();
    let mut err: Vec<(usize, f64)> = (0..bs)
        .map(|b| {
            let e = (0..n)
                .map(|j| (batch.at2(b, j) - hhat.at2(b, j)).powi(2))
                .sum::<f64>();
            (b, e)
        })
        .collect();
    err.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut we = model.w_e.data().to_vec();
    let mut wd = model.w_d.data().to_vec();
    for (i, &j) in dead.iter().enumerate() {
        let b = err[i % bs].0;
        let r: Vec<f64> = (0..n).map(|c| batch.at2(b, c) - hhat.at2(b, c)).collect();
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        for c in 0..n {
            let u = r[c] / norm;
            wd[c * m + j] = u;
            we[j * n + c] = u;
            opt[0].m[j * n + c] = 0.0;
            opt[0].v[j * n + c] = 0.0;
            opt[1].m[c * m + j] = 0.0;
            opt[1].v[c * m + j] = 0.0;
        }
    }
    let dt = model.dtype();
    model.w_e = Tensor::from_fn(vec![m, n], dt, |i| we[i]);
    model.w_d = Tensor::from_fn(vec![n, m], dt, |i| wd[i]);
}
