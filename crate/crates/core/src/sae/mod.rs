//! Sparse autoencoder over token latents.
//!
//! `z = ReLU(W_e (h - b_d))`, `ĥ = W_d z + s·b_h` with `s` the decoder bias
//! sign (default `-1`, i.e. `ĥ = W_d z - b_h`).

mod train;

pub use train::{default_groups, train_sae, train_sae_with_report, SaeTrainConfig, TrainReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops;
use crate::tape::{NodeId, Tape};
use crate::tensor::{DType, Tensor};
use crate::vit::ForwardTape;

#[derive(Clone, Debug, PartialEq)]
pub struct SaeModel {
    /// `[m × n]`
    pub w_e: Tensor,
    /// `[n × m]`
    pub w_d: Tensor,
    /// `[n]`
    pub b_d: Tensor,
    /// `[n]`
    pub b_h: Tensor,
    /// `+1` or `-1`.
    pub decoder_bias_sign: f64,
}

fn as_row(h: &Tensor, n: usize, what: &str) -> Result<Tensor> {
    if h.numel() != n || !(h.ndim() == 1 || (h.ndim() == 2 && h.shape()[0] == 1)) {
        return Err(Error::Dimension(format!(
            "{what} has shape {:?}, expected length {n}",
            h.shape()
        )));
    }
    h.reshape(vec![1, n])
}

fn unit_columns(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut w: Vec<f64> = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    for c in 0..cols {
        let n = (0..rows).map(|r| w[r * cols + c].powi(2)).sum::<f64>().sqrt();
        for r in 0..rows {
            w[r * cols + c] /= n;
        }
    }
    w
}

impl SaeModel {
    pub fn new(w_e: Tensor, w_d: Tensor, b_d: Tensor, b_h: Tensor, sign: f64) -> Result<Self> {
        let (m, n) = w_e.dims2()?;
        let ok = w_d.shape() == [n, m] && b_d.shape() == [n] && b_h.shape() == [n];
        if !ok {
            return Err(Error::Dimension(format!(
                "inconsistent SAE shapes: W_e {:?}, W_d {:?}, b_d {:?}, b_h {:?}",
                w_e.shape(),
                w_d.shape(),
                b_d.shape(),
                b_h.shape()
            )));
        }
        for t in [&w_d, &b_d, &b_h] {
            t.same_dtype(&w_e, "SAE parameters")?;
        }
        if sign != 1.0 && sign != -1.0 {
            return Err(Error::Config(format!("decoder_bias_sign must be ±1, got {sign}")));
        }
        Ok(SaeModel {
            w_e,
            w_d,
            b_d,
            b_h,
            decoder_bias_sign: sign,
        })
    }

    /// Random unit decoder columns, tied encoder, zero biases.
    pub fn random(n: usize, m: usize, seed: u64, dtype: DType) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::Config("SAE dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wd = unit_columns(n, m, &mut rng);
        let w_d = Tensor::from_fn(vec![n, m], dtype, |i| wd[i]);
        let w_e = Tensor::from_fn(vec![m, n], dtype, |i| wd[(i % n) * m + i / n]);
        SaeModel::new(
            w_e,
            w_d,
            Tensor::zeros(vec![n], dtype),
            Tensor::zeros(vec![n], dtype),
            -1.0,
        )
    }

    /// SAE whose feature `k` reads and writes `direction`; the other features
    /// are random unit directions and both biases are zero.
    pub fn planted(direction: &[f64], m: usize, k: usize, seed: u64, dtype: DType) -> Result<Self> {
        let n = direction.len();
        if k >= m {
            return Err(Error::Usage(format!("feature {k} out of range for m = {m}")));
        }
        let mut s = SaeModel::random(n, m, seed, dtype)?;
        let mut we = s.w_e.data().to_vec();
        let mut wd = s.w_d.data().to_vec();
        for (j, &x) in direction.iter().enumerate() {
            we[k * n + j] = x;
            wd[j * m + k] = x;
        }
        s.w_e = Tensor::from_fn(vec![m, n], dtype, |i| we[i]);
        s.w_d = Tensor::from_fn(vec![n, m], dtype, |i| wd[i]);
        Ok(s)
    }

    pub fn n(&self) -> usize {
        self.w_e.shape()[1]
    }

    pub fn m(&self) -> usize {
        self.w_e.shape()[0]
    }

    pub fn dtype(&self) -> DType {
        self.w_e.dtype()
    }

    /// Pre-activations `W_e (h - b_d)` for a batch `[B × n]`.
    pub fn pre_activations(&self, h: &Tensor) -> Result<Tensor> {
        let (_, n) = h.dims2()?;
        if n != self.n() {
            return Err(Error::Dimension(format!(
                "latents have width {n}, SAE expects {}",
                self.n()
            )));
        }
        let x = ops::add_row(h, &self.b_d, -1.0)?;
        ops::matmul_nt(&x, &self.w_e)
    }

    /// Codes for a batch `[B × n]`, shape `[B × m]`.
    pub fn encode_batch(&self, h: &Tensor) -> Result<Tensor> {
        Ok(ops::relu(&self.pre_activations(h)?))
    }

    /// Reconstructions for a batch of codes `[B × m]`.
    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        let r = ops::matmul_nt(z, &self.w_d)?;
        ops::add_row(&r, &self.b_h, self.decoder_bias_sign)
    }

    /// Squared decoder column norms.
    pub fn decoder_norms(&self) -> Vec<f64> {
        let (n, m) = (self.n(), self.m());
        (0..m)
            .map(|c| (0..n).map(|r| self.w_d.data()[r * m + c].powi(2)).sum::<f64>().sqrt())
            .collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        vec![
            ("w_e".into(), self.w_e.clone()),
            ("w_d".into(), self.w_d.clone()),
            ("b_d".into(), self.b_d.clone()),
            ("b_h".into(), self.b_h.clone()),
        ]
    }

    pub fn from_named_tensors(tensors: &[(String, Tensor)], sign: f64) -> Result<Self> {
        let get = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Input(format!("SAE checkpoint lacks `{name}`")))
        };
        SaeModel::new(get("w_e")?, get("w_d")?, get("b_d")?, get("b_h")?, sign)
    }
}

/// `z = ReLU(W_e (h - b_d))` for a single latent vector.
pub fn sae_encode(model: &SaeModel, h: &Tensor) -> Result<Tensor> {
    let row = as_row(h, model.n(), "latent")?;
    model.encode_batch(&row)?.reshape(vec![model.m()])
}

/// `ĥ = W_d z + s·b_h` for a single code vector.
pub fn sae_decode(model: &SaeModel, z: &Tensor) -> Result<Tensor> {
    let row = as_row(z, model.m(), "code")?;
    model.decode_batch(&row)?.reshape(vec![model.n()])
}

/// Parameter gradients of a loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct SaeGrads {
    pub w_e: Tensor,
    pub w_d: Tensor,
    pub b_d: Tensor,
    pub b_h: Tensor,
}

/// Node ids of the loss graph, for callers that want intermediates.
pub(crate) struct LossGraph {
    pub tape: Tape,
    pub params: [NodeId; 4],
    pub z: NodeId,
    pub hhat: NodeId,
}

/// Records the batch loss
/// `(1/B) Σ_b [ recon_b + λ ‖z_b‖₁ ]`, where `recon_b` is `‖h_b - ĥ_b‖²` or,
/// with Matryoshka groups, the mean over groups of the reconstruction error
/// using only features `[0, m_g)`.
pub(crate) fn loss_graph(
    model: &SaeModel,
    h: &Tensor,
    lambda: f64,
    groups: Option<&[usize]>,
) -> Result<LossGraph> {
    let (b, n) = h.dims2()?;
    if n != model.n() {
        return Err(Error::Dimension(format!(
            "latents have width {n}, SAE expects {}",
            model.n()
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("λ must be ≥ 0, got {lambda}")));
    }
    h.same_dtype(&model.w_e, "SAE loss")?;
    let mut t = Tape::new();
    let we = t.input(model.w_e.clone());
    let wd = t.input(model.w_d.clone());
    let bd = t.input(model.b_d.clone());
    let bh = t.input(model.b_h.clone());
    let hn = t.constant(h.clone());
    let x = t.add_row(hn, bd, -1.0)?;
    let pre = t.matmul_nt(x, we)?;
    let z = t.relu(pre)?;
    let sign = model.decoder_bias_sign;
    let recon = |t: &mut Tape, z: NodeId, wd: NodeId| -> Result<(NodeId, NodeId)> {
        let r = t.matmul_nt(z, wd)?;
        let hhat = t.add_row(r, bh, sign)?;
        let diff = t.sub(hn, hhat)?;
        Ok((t.sum_squares(diff)?, hhat))
    };
    let (rec, hhat) = match groups {
        None => recon(&mut t, z, wd)?,
        Some(gs) => {
            let mut acc: Option<NodeId> = None;
            let mut hhat = None;
            for &g in gs {
                let zg = t.slice_cols(z, 0, g)?;
                let wg = t.slice_cols(wd, 0, g)?;
                let (r, hh) = recon(&mut t, zg, wg)?;
                hhat = Some(hh);
                acc = Some(match acc {
                    None => r,
                    Some(a) => t.add(a, r)?,
                });
            }
            let sum = acc.ok_or_else(|| Error::Config("empty Matryoshka group list".into()))?;
            (t.scale(sum, 1.0 / gs.len() as f64)?, hhat.expect("nonempty"))
        }
    };
    let l1 = t.sum_abs(z)?;
    let l1s = t.scale(l1, lambda)?;
    let total = t.add(rec, l1s)?;
    t.scale(total, 1.0 / b as f64)?;
    Ok(LossGraph {
        tape: t,
        params: [we, wd, bd, bh],
        z,
        hhat,
    })
}

fn grads_of(g: &LossGraph) -> Result<(f64, SaeGrads)> {
    let out = g.tape.last().expect("loss recorded");
    let val = g.tape.value(out);
    let seed = Tensor::full(vec![1, 1], 1.0, val.dtype());
    let grads = g.tape.backward(&seed)?;
    let get = |id: NodeId| grads.get(id).cloned().expect("leaf gradient");
    let [we, wd, bd, bh] = g.params;
    Ok((
        val.item()?,
        SaeGrads {
            w_e: get(we),
            w_d: get(wd),
            b_d: get(bd),
            b_h: get(bh),
        },
    ))
}

/// `‖h - ĥ‖² + λ‖z‖₁` and its parameter gradients for one latent vector.
pub fn sae_loss(model: &SaeModel, h: &Tensor, lambda: f64) -> Result<(f64, SaeGrads)> {
    let row = as_row(h, model.n(), "latent")?;
    grads_of(&loss_graph(model, &row, lambda, None)?)
}

/// Batch-mean loss and gradients, optionally with Matryoshka groups.
pub fn sae_batch_loss(
    model: &SaeModel,
    h: &Tensor,
    lambda: f64,
    groups: Option<&[usize]>,
) -> Result<(f64, SaeGrads)> {
    grads_of(&loss_graph(model, h, lambda, groups)?)
}

/// Tape nodes of a feature activation appended to a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct FeatureNodes {
    /// `W_e[k] · (h - b_d)`, shape `[1×1]`.
    pub pre: NodeId,
    /// `z_k`, shape `[1×1]`.
    pub z: NodeId,
}

/// Appends `z_k` of `h^(layer)[token]` to the forward tape.
pub fn feature_activation(
    model: &SaeModel,
    ft: &mut ForwardTape,
    layer: usize,
    token: usize,
    k: usize,
) -> Result<FeatureNodes> {
    let h = ft.hidden_node(layer)?;
    let (tokens, n) = ft.tape.value(h).dims2()?;
    if token >= tokens {
        return Err(Error::Usage(format!("token {token} out of range for {tokens} tokens")));
    }
    if k >= model.m() {
        return Err(Error::Usage(format!("feature {k} out of range for m = {}", model.m())));
    }
    if n != model.n() {
        return Err(Error::Dimension(format!(
            "layer width {n} does not match SAE input {}",
            model.n()
        )));
    }
    model.w_e.same_dtype(ft.tape.value(h), "feature_activation")?;
    let t = &mut ft.tape;
    let row = t.select_row(h, token)?;
    let bd = t.constant(model.b_d.clone());
    let x = t.add_row(row, bd, -1.0)?;
    let wk = Tensor::from_raw(vec![1, n], model.w_e.row(k).to_vec(), model.dtype());
    let w = t.constant(wk);
    let pre = t.matmul_nt(x, w)?;
    let z = t.relu(pre)?;
    Ok(FeatureNodes { pre, z })
}
