//! Small pre-norm vision transformer.
//!
//! Token layout: the optional CLS token is row 0, image patches follow in
//! row-major grid order. `h^(0)` is the embedded input (patch projection, CLS
//! prepended, positional embedding added); block `l` maps `h^(l)` to
//! `h^(l+1)`.

mod planted;

pub use planted::{
    build_identity_router, build_planted_router, pair_direction, AblationReport, PlantedModel,
    PlantedRouterSpec,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{DType, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_dim: usize,
    pub use_cls_token: bool,
    /// When false the blocks skip both LayerNorms (used by audit networks).
    #[serde(default = "default_true")]
    pub layer_norm: bool,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    #[serde(default)]
    pub dtype: DType,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            depth: 6,
            heads: 4,
            dim: 64,
            mlp_dim: 128,
            use_cls_token: true,
            layer_norm: true,
            ln_eps: 1e-5,
            dtype: DType::F64,
            seed: 0,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.patch_size == 0 || self.channels == 0 {
            return bad("image_size, patch_size and channels must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "patch_size {} does not divide image_size {}",
                self.patch_size, self.image_size
            ));
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            ));
        }
        if self.mlp_dim == 0 {
            return bad("mlp_dim must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            return bad(format!("ln_eps must be > 0, got {}", self.ln_eps));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + usize::from(self.use_cls_token)
    }

    /// Token row of patch `p`.
    pub fn patch_token(&self, p: usize) -> usize {
        p + usize::from(self.use_cls_token)
    }

    /// Patch index of token `t`, or `None` for the CLS token.
    pub fn token_patch(&self, t: usize) -> Option<usize> {
        if self.use_cls_token {
            t.checked_sub(1)
        } else {
            Some(t)
        }
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn image_shape(&self) -> Vec<usize> {
        vec![self.channels, self.image_size, self.image_size]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    /// Projections are `[out × in]`.
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTWeights {
    pub config: ViTConfig,
    /// `[d × C·patch²]`
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    /// `[T × d]`
    pub pos: Tensor,
    /// `[1 × d]` when the config uses a CLS token.
    pub cls: Option<Tensor>,
    pub blocks: Vec<BlockWeights>,
}

fn normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64, dtype: DType) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, dtype, |_| dist.sample(rng))
}

/// Draws weights from a `ChaCha8` stream seeded with `config.seed`.
///
/// Projections (patch embedding, Q/K/V/O, both MLP layers) are
/// `N(0, (0.02/√d)²)`, positional and CLS embeddings `N(0, 0.02²)`; biases
/// start at 0, LayerNorm gains at 1. Draw order: patch embedding, positions,
/// CLS, then per block Q, K, V, O, W1, W2.
pub fn init_vit(config: &ViTConfig) -> Result<ViTWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (d, dt) = (config.dim, config.dtype);
    let proj = 0.02 / (d as f64).sqrt();
    let patch_w = normal(&mut rng, vec![d, config.patch_len()], proj, dt);
    let pos = normal(&mut rng, vec![config.num_tokens(), d], 0.02, dt);
    let cls = config
        .use_cls_token
        .then(|| normal(&mut rng, vec![1, d], 0.02, dt));
    let zeros = |n: usize| Tensor::zeros(vec![n], dt);
    let ones = |n: usize| Tensor::full(vec![n], 1.0, dt);
    let mut blocks = Vec::with_capacity(config.depth);
    for _ in 0..config.depth {
        let wq = normal(&mut rng, vec![d, d], proj, dt);
        let wk = normal(&mut rng, vec![d, d], proj, dt);
        let wv = normal(&mut rng, vec![d, d], proj, dt);
        let wo = normal(&mut rng, vec![d, d], proj, dt);
        let w1 = normal(&mut rng, vec![config.mlp_dim, d], proj, dt);
        let w2 = normal(&mut rng, vec![d, config.mlp_dim], proj, dt);
        blocks.push(BlockWeights {
            ln1_gamma: ones(d),
            ln1_beta: zeros(d),
            wq,
            bq: zeros(d),
            wk,
            bk: zeros(d),
            wv,
            bv: zeros(d),
            wo,
            bo: zeros(d),
            ln2_gamma: ones(d),
            ln2_beta: zeros(d),
            w1,
            b1: zeros(config.mlp_dim),
            w2,
            b2: zeros(d),
        });
    }
    Ok(ViTWeights {
        config: config.clone(),
        patch_w,
        patch_b: zeros(d),
        pos,
        cls,
        blocks,
    })
}

const BLOCK_FIELDS: [&str; 16] = [
    "ln1.gamma",
    "ln1.beta",
    "attn.wq",
    "attn.bq",
    "attn.wk",
    "attn.bk",
    "attn.wv",
    "attn.bv",
    "attn.wo",
    "attn.bo",
    "ln2.gamma",
    "ln2.beta",
    "mlp.w1",
    "mlp.b1",
    "mlp.w2",
    "mlp.b2",
];

impl BlockWeights {
    fn fields(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

impl ViTWeights {
    /// All parameters under stable names, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("patch_embed.weight".to_string(), self.patch_w.clone()),
            ("patch_embed.bias".to_string(), self.patch_b.clone()),
            ("pos_embed".to_string(), self.pos.clone()),
        ];
        if let Some(c) = &self.cls {
            out.push(("cls_token".to_string(), c.clone()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_FIELDS.iter().zip(b.fields()) {
                out.push((format!("blocks.{i}.{name}"), t.clone()));
            }
        }
        out
    }

    /// Inverse of [`ViTWeights::named_tensors`]; every expected name must be
    /// present with the shape the config implies.
    pub fn from_named_tensors(config: &ViTConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut w = init_vit(config)?;
        let template = w.named_tensors();
        if tensors.len() != template.len() {
            return Err(Error::Input(format!(
                "expected {} ViT tensors, found {}",
                template.len(),
                tensors.len()
            )));
        }
        let lookup = |name: &str, like: &Tensor| -> Result<Tensor> {
            let t = tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Input(format!("missing tensor `{name}`")))?;
            if t.shape() != like.shape() || t.dtype() != like.dtype() {
                return Err(Error::Input(format!(
                    "tensor `{name}` is {:?}/{}, expected {:?}/{}",
                    t.shape(),
                    t.dtype(),
                    like.shape(),
                    like.dtype()
                )));
            }
            Ok(t.clone())
        };
        w.patch_w = lookup("patch_embed.weight", &w.patch_w)?;
        w.patch_b = lookup("patch_embed.bias", &w.patch_b)?;
        w.pos = lookup("pos_embed", &w.pos)?;
        if let Some(c) = &w.cls {
            w.cls = Some(lookup("cls_token", c)?);
        }
        for (i, b) in w.blocks.iter_mut().enumerate() {
            for (name, slot) in BLOCK_FIELDS.iter().zip(b.fields_mut()) {
                *slot = lookup(&format!("blocks.{i}.{name}"), slot)?;
            }
        }
        Ok(w)
    }
}

/// Splits a `[C×H×W]` image into `[P × C·ps²]` patch rows.
///
/// Patches are enumerated row-major over the grid (top-left first); each row
/// is flattened channel-major, then pixel row, then pixel column.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => {
            return Err(Error::Dimension(format!(
                "patchify expects [C×H×W], got {s:?}"
            )))
        }
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Dimension(format!(
            "patch size {patch} does not divide {h}×{w}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let len = c * patch * patch;
    let src = image.data();
    let mut data = Vec::with_capacity(gh * gw * len);
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..c {
                for r in 0..patch {
                    let base = ch * h * w + (gy * patch + r) * w + gx * patch;
                    data.extend_from_slice(&src[base..base + patch]);
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![gh * gw, len], data, image.dtype()))
}

/// Inverse of [`patchify`] for an image of shape `shape`.
pub fn unpatchify(patches: &Tensor, shape: &[usize], patch: usize) -> Result<Tensor> {
    let (c, h, w) = match shape {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Dimension(format!("bad image shape {s:?}"))),
    };
    let (gh, gw) = (h / patch, w / patch);
    let len = c * patch * patch;
    if patches.shape() != [gh * gw, len] {
        return Err(Error::Dimension(format!(
            "patch matrix {:?} does not fit image {shape:?}",
            patches.shape()
        )));
    }
    let mut data = vec![0.0; c * h * w];
    let src = patches.data();
    let mut k = 0;
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..c {
                for r in 0..patch {
                    let base = ch * h * w + (gy * patch + r) * w + gx * patch;
                    data[base..base + patch].copy_from_slice(&src[k..k + patch]);
                    k += patch;
                }
            }
        }
    }
    Ok(Tensor::from_raw(shape.to_vec(), data, patches.dtype()))
}

/// Per-block node ids recorded during the forward pass.
#[derive(Clone, Debug)]
pub struct BlockRecord {
    pub attn_logits: Vec<NodeId>,
    pub attn_probs: Vec<NodeId>,
    pub values: Vec<NodeId>,
    pub mlp_hidden: NodeId,
}

/// A forward pass together with its tape.
#[derive(Clone, Debug)]
pub struct ForwardTape {
    pub tape: Tape,
    pub image: NodeId,
    /// `h^(0) ..= h^(L)`
    pub hidden: Vec<NodeId>,
    pub blocks: Vec<BlockRecord>,
}

impl ForwardTape {
    pub fn num_layers(&self) -> usize {
        self.hidden.len() - 1
    }

    /// Token latents `h^(layer)` as a `[T×d]` matrix.
    pub fn latents(&self, layer: usize) -> Result<&Tensor> {
        let id = self.hidden.get(layer).ok_or_else(|| {
            Error::Usage(format!(
                "layer {layer} out of range 0..={}",
                self.num_layers()
            ))
        })?;
        Ok(self.tape.value(*id))
    }

    pub fn hidden_node(&self, layer: usize) -> Result<NodeId> {
        self.hidden.get(layer).copied().ok_or_else(|| {
            Error::Usage(format!(
                "layer {layer} out of range 0..={}",
                self.num_layers()
            ))
        })
    }
}

fn check_image(config: &ViTConfig, image: &Tensor) -> Result<()> {
    if image.shape() != config.image_shape().as_slice() {
        return Err(Error::Dimension(format!(
            "image shape {:?} does not match config {:?}",
            image.shape(),
            config.image_shape()
        )));
    }
    if let Some(p) = image.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Input(format!("non-finite pixel at flat index {p}")));
    }
    Ok(())
}

/// Runs the encoder on `image` (`[C×H×W]`), recording every primitive.
pub fn forward(weights: &ViTWeights, image: &Tensor) -> Result<ForwardTape> {
    let cfg = &weights.config;
    check_image(cfg, image)?;
    let mut t = Tape::new();
    let img = t.input(image.to_dtype(cfg.dtype));
    let patches = t.patchify(img, cfg.patch_size)?;
    let pw = t.constant(weights.patch_w.clone());
    let pb = t.constant(weights.patch_b.clone());
    let mut emb = t.linear(patches, pw, Some(pb))?;
    if let Some(cls) = &weights.cls {
        let c = t.constant(cls.clone());
        emb = t.concat_rows(c, emb)?;
    }
    let pos = t.constant(weights.pos.clone());
    let mut h = t.add(emb, pos)?;
    let mut hidden = vec![h];
    let mut records = Vec::with_capacity(weights.blocks.len());
    let (heads, dh) = (cfg.heads, cfg.head_dim());
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    for b in &weights.blocks {
        let c = |t: &mut Tape, x: &Tensor| t.constant(x.clone());
        let a_in = if cfg.layer_norm {
            let (g, be) = (c(&mut t, &b.ln1_gamma), c(&mut t, &b.ln1_beta));
            t.layer_norm(h, g, be, cfg.ln_eps)?
        } else {
            h
        };
        let (wq, bq) = (c(&mut t, &b.wq), c(&mut t, &b.bq));
        let (wk, bk) = (c(&mut t, &b.wk), c(&mut t, &b.bk));
        let (wv, bv) = (c(&mut t, &b.wv), c(&mut t, &b.bv));
        let q = t.linear(a_in, wq, Some(bq))?;
        let k = t.linear(a_in, wk, Some(bk))?;
        let v = t.linear(a_in, wv, Some(bv))?;
        let mut rec = BlockRecord {
            attn_logits: Vec::with_capacity(heads),
            attn_probs: Vec::with_capacity(heads),
            values: Vec::with_capacity(heads),
            mlp_hidden: h,
        };
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = t.slice_cols(q, hd * dh, dh)?;
            let kh = t.slice_cols(k, hd * dh, dh)?;
            let vh = t.slice_cols(v, hd * dh, dh)?;
            let raw = t.matmul_nt(qh, kh)?;
            let logits = t.scale(raw, inv_sqrt)?;
            let probs = t.softmax_rows(logits)?;
            outs.push(t.attn_apply(probs, vh)?);
            rec.attn_logits.push(logits);
            rec.attn_probs.push(probs);
            rec.values.push(vh);
        }
        let cat = t.concat_cols(&outs)?;
        let (wo, bo) = (c(&mut t, &b.wo), c(&mut t, &b.bo));
        let attn = t.linear(cat, wo, Some(bo))?;
        let h_mid = t.add(h, attn)?;
        let m_in = if cfg.layer_norm {
            let (g, be) = (c(&mut t, &b.ln2_gamma), c(&mut t, &b.ln2_beta));
            t.layer_norm(h_mid, g, be, cfg.ln_eps)?
        } else {
            h_mid
        };
        let (w1, b1) = (c(&mut t, &b.w1), c(&mut t, &b.b1));
        let pre = t.linear(m_in, w1, Some(b1))?;
        let act = t.gelu(pre)?;
        rec.mlp_hidden = act;
        let (w2, b2) = (c(&mut t, &b.w2), c(&mut t, &b.b2));
        let mlp = t.linear(act, w2, Some(b2))?;
        h = t.add(h_mid, mlp)?;
        hidden.push(h);
        records.push(rec);
    }
    Ok(ForwardTape {
        tape: t,
        image: img,
        hidden,
        blocks: records,
    })
}

/// Token latents of every layer without keeping the tape around.
pub fn hidden_states(weights: &ViTWeights, image: &Tensor) -> Result<Vec<Tensor>> {
    let ft = forward(weights, image)?;
    Ok(ft.hidden.iter().map(|&id| ft.tape.value(id).clone()).collect())
}

/// `∂target/∂pixels` as a `[C×H×W]` tensor. `target` must be a `[1×1]` node
/// recorded on this tape.
pub fn input_gradient(ft: &ForwardTape, target: NodeId) -> Result<Tensor> {
    if target.index() >= ft.tape.len() {
        return Err(Error::Usage(format!(
            "target node {} is not on this tape",
            target.index()
        )));
    }
    let val = ft.tape.value(target);
    if val.numel() != 1 {
        return Err(Error::Usage(format!(
            "target must be a scalar node, got shape {:?}",
            val.shape()
        )));
    }
    let seed = Tensor::full(val.shape().to_vec(), 1.0, val.dtype());
    let grads = ft.tape.backward_from(target, &seed)?;
    let img = ft.tape.value(ft.image);
    Ok(grads
        .get(ft.image)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(img.shape().to_vec(), img.dtype())))
}
