//! Gradient backend: pixel gradient of `z_k`, pooled per patch.

use std::collections::BTreeMap;

use super::{new_map, pool_patches, target_forward, AttributionRequest, ErfMap, Model, Pooling};
use crate::error::Result;
use crate::ops;
use crate::vit::input_gradient;

pub fn attr_gradient(model: &Model, req: &AttributionRequest) -> Result<ErfMap> {
    let cfg = model.config();
    let (ft, nodes) = target_forward(model, &req.image, &req.target)?;
    let grad = input_gradient(&ft, nodes.z)?;
    let x = ft.tape.value(ft.image);
    let scores = match req.params.pooling {
        Pooling::Sum => pool_patches(&ops::mul(&grad, x)?, cfg),
        Pooling::Abs => pool_patches(&ops::mul(&grad, x)?.map(f64::abs), cfg),
        Pooling::GradientL2 => pool_patches(&ops::mul(&grad, &grad)?, cfg)
            .into_iter()
            .map(f64::sqrt)
            .collect(),
    };
    let mut meta = BTreeMap::new();
    meta.insert("pooling".into(), req.params.pooling.to_string());
    let z = ft.tape.value(nodes.z).item()?;
    let zero = z == 0.0 && grad.data().iter().all(|&g| g == 0.0);
    meta.insert("zero_target".into(), zero.to_string());
    meta.insert("activation".into(), format!("{z:e}"));
    new_map(model, req, scores, meta)
}
