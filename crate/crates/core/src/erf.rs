//! Activation maps, target selection and ERF assembly.

use serde::{Deserialize, Serialize};

use crate::attribution::{
    attribute, image_digest, AttributionParams, AttributionRequest, Baseline, ErfMap, Method,
    Model, Target, TargetDescriptor,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::hidden_states;

/// `z_k` at every token of one layer for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    pub layer: usize,
    pub feature: usize,
    /// One value per token (CLS first when present).
    pub values: Vec<f64>,
    /// Largest value's token, lowest index on ties.
    pub argmax: usize,
    pub has_cls: bool,
    pub grid: usize,
    pub image_digest: String,
}

impl ActivationMap {
    pub fn descriptor(&self, token: usize) -> TargetDescriptor {
        TargetDescriptor {
            layer: self.layer,
            token,
            feature: self.feature,
            image_digest: self.image_digest.clone(),
        }
    }

    /// Values of the image-patch tokens only.
    pub fn patch_values(&self) -> &[f64] {
        &self.values[usize::from(self.has_cls)..]
    }

    pub fn max(&self) -> f64 {
        self.values[self.argmax]
    }

    /// Patch index of the argmax token, `None` if it is CLS.
    pub fn argmax_patch(&self) -> Option<usize> {
        if self.has_cls {
            self.argmax.checked_sub(1)
        } else {
            Some(self.argmax)
        }
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn activation_map(
    model: &Model,
    image: &Tensor,
    layer: usize,
    feature: usize,
) -> Result<ActivationMap> {
    crate::attribution::check_target(
        model,
        &Target {
            layer,
            token: 0,
            feature,
        },
    )?;
    let hs = hidden_states(model.vit, image)?;
    let z = model.sae.encode_batch(&hs[layer])?;
    let (tokens, m) = z.dims2()?;
    let values: Vec<f64> = (0..tokens).map(|t| z.data()[t * m + feature]).collect();
    Ok(ActivationMap {
        layer,
        feature,
        argmax: argmax(&values),
        values,
        has_cls: model.config().use_cls_token,
        grid: model.config().grid(),
        image_digest: image_digest(&image.to_dtype(model.config().dtype)),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetPolicy {
    MaxActivation,
    Cls,
    Explicit(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub layer: usize,
    pub feature: usize,
    pub token: usize,
    pub policy: TargetPolicy,
}

impl TargetSpec {
    pub fn target(&self) -> Target {
        Target {
            layer: self.layer,
            token: self.token,
            feature: self.feature,
        }
    }
}

/// Picks the token whose activation is explained.
///
/// `MaxActivation` fails with a no-target error when nothing fires; `Cls` and
/// `Explicit` only check that the token exists.
pub fn select_target(map: &ActivationMap, policy: TargetPolicy) -> Result<TargetSpec> {
    let token = match policy {
        TargetPolicy::MaxActivation => {
            if !(map.max() > 0.0) {
                return Err(Error::NoTarget(format!(
                    "feature {} never fires at layer {} on this image",
                    map.feature, map.layer
                )));
            }
            map.argmax
        }
        TargetPolicy::Cls => {
            if !map.has_cls {
                return Err(Error::Usage("model has no CLS token".into()));
            }
            0
        }
        TargetPolicy::Explicit(t) => {
            if t >= map.values.len() {
                return Err(Error::Usage(format!(
                    "token {t} out of range for {} tokens",
                    map.values.len()
                )));
            }
            t
        }
    };
    Ok(TargetSpec {
        layer: map.layer,
        feature: map.feature,
        token,
        policy,
    })
}

/// Runs `method` for `target` on `image`. The map's descriptor matches the
/// activation map of the same `(layer, feature, image)`.
pub fn compute_erf(
    model: &Model,
    method: Method,
    target: &TargetSpec,
    image: &Tensor,
    params: &AttributionParams,
    baseline: &Baseline,
) -> Result<ErfMap> {
    let req = AttributionRequest {
        method,
        target: target.target(),
        image: image.to_dtype(model.config().dtype),
        baseline: baseline.clone(),
        params: params.clone(),
    };
    attribute(model, &req)
}
