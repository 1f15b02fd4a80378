//! Attribution backends mapping one SAE activation to per-patch scores.
//!
//! Every backend takes the same [`AttributionRequest`] and returns an
//! [`ErfMap`] with one score per image patch (CLS is never scored).

mod gradient;
mod ig;
mod kernelshap;
mod lrp;
mod shapley;

pub use gradient::attr_gradient;
pub use ig::attr_integrated_gradients;
pub use kernelshap::{attr_kernelshap, kernel_weight};
pub use lrp::attr_attnlrp;
pub use shapley::{exact_shapley, exact_shapley_map, MAX_EXACT_PLAYERS};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sae::{feature_activation, FeatureNodes, SaeModel};
use crate::tensor::Tensor;
use crate::vit::{forward, ForwardTape, ViTConfig, ViTWeights};

/// The encoder and the SAE reading one of its layers.
#[derive(Clone, Copy, Debug)]
pub struct Model<'a> {
    pub vit: &'a ViTWeights,
    pub sae: &'a SaeModel,
}

impl Model<'_> {
    pub fn config(&self) -> &ViTConfig {
        &self.vit.config
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "gradient")]
    Gradient,
    #[serde(rename = "ig")]
    Ig,
    #[serde(rename = "kernelshap")]
    KernelShap,
    #[serde(rename = "attnlrp")]
    AttnLrp,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::AttnLrp,
        Method::Ig,
        Method::KernelShap,
        Method::Gradient,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::Gradient => "gradient",
            Method::Ig => "ig",
            Method::KernelShap => "kernelshap",
            Method::AttnLrp => "attnlrp",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method `{s}` (expected gradient, ig, kernelshap or attnlrp)"
                ))
            })
    }
}

/// What "blank" means for IG paths, KernelSHAP coalitions and insertion.
#[derive(Clone, Debug, PartialEq)]
pub enum Baseline {
    Zero,
    /// A dataset-mean image, supplied by the caller.
    Mean(Tensor),
}

impl Baseline {
    pub fn image(&self, like: &Tensor) -> Result<Tensor> {
        match self {
            Baseline::Zero => Ok(Tensor::zeros(like.shape().to_vec(), like.dtype())),
            Baseline::Mean(m) => {
                if m.shape() != like.shape() {
                    return Err(Error::Dimension(format!(
                        "baseline shape {:?} does not match image {:?}",
                        m.shape(),
                        like.shape()
                    )));
                }
                Ok(m.to_dtype(like.dtype()))
            }
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Baseline::Zero => "zero",
            Baseline::Mean(_) => "dataset-mean",
        }
    }
}

/// Per-patch pooling of pixel attributions (gradient and IG backends).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    /// Signed sum of gradient × input.
    #[default]
    #[serde(rename = "sum")]
    Sum,
    /// Sum of |gradient × input|.
    #[serde(rename = "abs")]
    Abs,
    /// L2 norm of the raw gradient over the patch's pixels.
    #[serde(rename = "gradient-l2")]
    GradientL2,
}

impl FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Pooling::Sum),
            "abs" => Ok(Pooling::Abs),
            "gradient-l2" => Ok(Pooling::GradientL2),
            o => Err(Error::Config(format!("unknown pooling `{o}`"))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Sum => "sum",
            Pooling::Abs => "abs",
            Pooling::GradientL2 => "gradient-l2",
        })
    }
}

/// How relevance crosses the attention product `A · V`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttnRule {
    /// Split between `A` and `V`; the `A` share continues through the softmax.
    #[default]
    #[serde(rename = "attnlrp")]
    AttnLrp,
    /// `A` is a constant; all relevance goes to `V`.
    #[serde(rename = "attn-const")]
    AttnConst,
}

impl FromStr for AttnRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attnlrp" => Ok(AttnRule::AttnLrp),
            "attn-const" => Ok(AttnRule::AttnConst),
            o => Err(Error::Config(format!("unknown attention rule `{o}`"))),
        }
    }
}

impl fmt::Display for AttnRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttnRule::AttnLrp => "attnlrp",
            AttnRule::AttnConst => "attn-const",
        })
    }
}

/// The activation being explained: feature `feature` of the SAE at token
/// `token` of latent layer `layer`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Target {
    pub layer: usize,
    pub token: usize,
    pub feature: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionParams {
    pub ig_steps: usize,
    pub shap_samples: usize,
    pub shap_ridge: f64,
    pub seed: u64,
    /// `None` picks the dtype default (1e-6 for f32, 1e-9 for f64).
    pub lrp_eps: Option<f64>,
    pub attn_rule: AttnRule,
    pub pooling: Pooling,
}

impl Default for AttributionParams {
    fn default() -> Self {
        AttributionParams {
            ig_steps: 128,
            shap_samples: 2048,
            shap_ridge: 1e-6,
            seed: 0,
            lrp_eps: None,
            attn_rule: AttnRule::AttnLrp,
            pooling: Pooling::Sum,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionRequest {
    pub method: Method,
    pub target: Target,
    pub image: Tensor,
    pub baseline: Baseline,
    pub params: AttributionParams,
}

impl AttributionRequest {
    pub fn new(method: Method, target: Target, image: Tensor) -> Self {
        AttributionRequest {
            method,
            target,
            image,
            baseline: Baseline::Zero,
            params: AttributionParams::default(),
        }
    }
}

/// Identifies the `(layer, token, feature, image)` an activation or ERF map
/// belongs to.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TargetDescriptor {
    pub layer: usize,
    pub token: usize,
    pub feature: usize,
    /// First 16 hex digits of the SHA-256 of the image bytes.
    pub image_digest: String,
}

/// Short content hash of an image (its dtype-native little-endian bytes).
pub fn image_digest(image: &Tensor) -> String {
    let mut h = Sha256::new();
    h.update(image.dtype().to_string().as_bytes());
    for d in image.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    h.update(image.to_le_bytes());
    h.finalize()
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Per-patch attribution scores for one target activation.
#[derive(Clone, Debug, PartialEq)]
pub struct ErfMap {
    /// One score per patch, row-major over the grid.
    pub scores: Vec<f64>,
    pub grid: usize,
    pub target: TargetDescriptor,
    pub method: Method,
    pub metadata: BTreeMap<String, String>,
}

impl ErfMap {
    pub fn num_patches(&self) -> usize {
        self.scores.len()
    }

    /// Patch with the largest score (lowest index on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = i;
            }
        }
        best
    }
}

pub(crate) fn check_target(model: &Model, target: &Target) -> Result<()> {
    let cfg = model.config();
    if target.layer > cfg.depth {
        return Err(Error::Usage(format!(
            "layer {} out of range 0..={}",
            target.layer, cfg.depth
        )));
    }
    if target.token >= cfg.num_tokens() {
        return Err(Error::Usage(format!(
            "token {} out of range for {} tokens",
            target.token,
            cfg.num_tokens()
        )));
    }
    if target.feature >= model.sae.m() {
        return Err(Error::Usage(format!(
            "feature {} out of range for m = {}",
            target.feature,
            model.sae.m()
        )));
    }
    if model.sae.n() != cfg.dim {
        return Err(Error::Dimension(format!(
            "SAE input width {} does not match model dim {}",
            model.sae.n(),
            cfg.dim
        )));
    }
    Ok(())
}

/// Forward pass with the target activation appended.
pub fn target_forward(
    model: &Model,
    image: &Tensor,
    target: &Target,
) -> Result<(ForwardTape, FeatureNodes)> {
    check_target(model, target)?;
    let mut ft = forward(model.vit, image)?;
    let nodes = feature_activation(model.sae, &mut ft, target.layer, target.token, target.feature)?;
    Ok((ft, nodes))
}

/// `z_k` of the target on `image`.
pub fn target_value(model: &Model, image: &Tensor, target: &Target) -> Result<f64> {
    let (ft, nodes) = target_forward(model, image, target)?;
    ft.tape.value(nodes.z).item()
}

/// Sums a `[C×H×W]` pixel map over each patch.
pub(crate) fn pool_patches(pixels: &Tensor, cfg: &ViTConfig) -> Vec<f64> {
    let (ps, size, g) = (cfg.patch_size, cfg.image_size, cfg.grid());
    let mut out = vec![0.0; g * g];
    for (p, o) in out.iter_mut().enumerate() {
        let (gy, gx) = (p / g, p % g);
        for c in 0..cfg.channels {
            for r in 0..ps {
                for s in 0..ps {
                    *o += pixels.data()[c * size * size + (gy * ps + r) * size + gx * ps + s];
                }
            }
        }
    }
    out
}

/// Image whose patches in `keep` come from `image` and the rest from `base`.
pub fn composite(image: &Tensor, base: &Tensor, keep: &[bool], cfg: &ViTConfig) -> Tensor {
    let (ps, size, g) = (cfg.patch_size, cfg.image_size, cfg.grid());
    let mut data = base.data().to_vec();
    for (p, &k) in keep.iter().enumerate() {
        if !k {
            continue;
        }
        let (gy, gx) = (p / g, p % g);
        for c in 0..cfg.channels {
            for r in 0..ps {
                let start = c * size * size + (gy * ps + r) * size + gx * ps;
                data[start..start + ps].copy_from_slice(&image.data()[start..start + ps]);
            }
        }
    }
    Tensor::from_raw(image.shape().to_vec(), data, image.dtype())
}

pub(crate) fn new_map(
    model: &Model,
    req: &AttributionRequest,
    scores: Vec<f64>,
    mut metadata: BTreeMap<String, String>,
) -> Result<ErfMap> {
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score at patch {i}")));
    }
    metadata.insert("baseline".into(), req.baseline.id().into());
    metadata.insert("seed".into(), req.params.seed.to_string());
    Ok(ErfMap {
        scores,
        grid: model.config().grid(),
        target: TargetDescriptor {
            layer: req.target.layer,
            token: req.target.token,
            feature: req.target.feature,
            image_digest: image_digest(&req.image.to_dtype(model.config().dtype)),
        },
        method: req.method,
        metadata,
    })
}

/// Runs the backend named in `req.method`.
pub fn attribute(model: &Model, req: &AttributionRequest) -> Result<ErfMap> {
    match req.method {
        Method::Gradient => attr_gradient(model, req),
        Method::Ig => attr_integrated_gradients(model, req),
        Method::KernelShap => attr_kernelshap(model, req),
        Method::AttnLrp => attr_attnlrp(model, req),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    #[test]
    fn method_ids_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.id().parse::<Method>().unwrap(), m);
        }
        assert!(matches!("lime".parse::<Method>(), Err(Error::Config(_))));
    }

    #[test]
    fn digest_depends_on_content() {
        let a = Tensor::zeros(vec![1, 2, 2], DType::F64);
        let b = Tensor::full(vec![1, 2, 2], 0.5, DType::F64);
        assert_ne!(image_digest(&a), image_digest(&b));
        assert_eq!(image_digest(&a).len(), 16);
    }
}
