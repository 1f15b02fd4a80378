//! Integrated Gradients with a trapezoid rule over the straight path.
//!
//! The SAE's ReLU makes the integrand jump where the pre-activation crosses
//! zero. A plain trapezoid over such an interval is only first-order
//! accurate, so intervals whose endpoints disagree on the sign are split at
//! the crossing (located by bisection) and the active piece is integrated
//! with the one-sided gradient at the crossing.

use std::collections::BTreeMap;

use super::{
    new_map, pool_patches, target_forward, target_value, AttributionRequest, ErfMap, Model,
    Pooling,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::ops;
use crate::tensor::Tensor;
use crate::vit::input_gradient;

const BISECT_ITERS: usize = 60;

struct PathPoint {
    pre: f64,
    /// Gradient of the pre-activation (the active-side gradient of `z_k`).
    grad: Tensor,
}

fn lerp(x0: &Tensor, x: &Tensor, alpha: f64) -> Tensor {
    let d: Vec<f64> = x0
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| a + alpha * (b - a))
        .collect();
    Tensor::from_fn(x.shape().to_vec(), x.dtype(), |i| d[i])
}

pub fn attr_integrated_gradients(model: &Model, req: &AttributionRequest) -> Result<ErfMap> {
    let steps = req.params.ig_steps;
    if steps < 2 {
        return Err(Error::Config(format!("IG needs at least 2 steps, got {steps}")));
    }
    if req.params.pooling == Pooling::GradientL2 {
        return Err(Error::Config(
            "gradient-l2 pooling applies to the gradient backend only".into(),
        ));
    }
    let cfg = model.config();
    let x = req.image.to_dtype(cfg.dtype);
    let x0 = req.baseline.image(&x)?;
    let target = req.target;
    let point = |alpha: f64| -> Result<PathPoint> {
        let (ft, nodes) = target_forward(model, &lerp(&x0, &x, alpha), &target)?;
        Ok(PathPoint {
            pre: ft.tape.value(nodes.pre).item()?,
            grad: input_gradient(&ft, nodes.pre)?,
        })
    };
    let pre_at = |alpha: f64| -> Result<f64> {
        let (ft, nodes) = target_forward(model, &lerp(&x0, &x, alpha), &target)?;
        ft.tape.value(nodes.pre).item()
    };
    let alphas: Vec<f64> = (0..=steps).map(|i| i as f64 / steps as f64).collect();
    let pts = exec::try_map(&alphas, |&a| point(a))?;

    let n = x.numel();
    let mut avg = vec![0.0; n];
    let mut add = |w: f64, g: &Tensor| {
        avg.iter_mut().zip(g.data()).for_each(|(a, b)| *a += w * b);
    };
    let mut kinks = 0usize;
    for i in 0..steps {
        let (a0, a1) = (alphas[i], alphas[i + 1]);
        let (p0, p1) = (&pts[i], &pts[i + 1]);
        let (on0, on1) = (p0.pre > 0.0, p1.pre > 0.0);
        match (on0, on1) {
            (true, true) => {
                add(0.5 * (a1 - a0), &p0.grad);
                add(0.5 * (a1 - a0), &p1.grad);
            }
            (false, false) => {}
            _ => {
                kinks += 1;
                // Keep `lo` on the inactive side.
                let (mut lo, mut hi) = if on1 { (a0, a1) } else { (a1, a0) };
                for _ in 0..BISECT_ITERS {
                    let mid = 0.5 * (lo + hi);
                    if mid == lo || mid == hi {
                        break;
                    }
                    if pre_at(mid)? > 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                let star = point(hi)?;
                let (active, len) = if on1 { (p1, a1 - hi) } else { (p0, hi - a0) };
                add(0.5 * len, &star.grad);
                add(0.5 * len, &active.grad);
            }
        }
    }
    let diff = ops::sub(&x, &x0)?;
    let pixel: Vec<f64> = avg.iter().zip(diff.data()).map(|(g, d)| g * d).collect();
    let pixel = Tensor::from_raw(x.shape().to_vec(), pixel, cfg.dtype);
    let scores = match req.params.pooling {
        Pooling::Abs => pool_patches(&pixel.map(f64::abs), cfg),
        _ => pool_patches(&pixel, cfg),
    };
    let z1 = target_value(model, &x, &target)?;
    let z0 = target_value(model, &x0, &target)?;
    let total: f64 = scores.iter().sum();
    let residual = (total - (z1 - z0)).abs();
    let mut meta = BTreeMap::new();
    meta.insert("steps".into(), steps.to_string());
    meta.insert("rule".into(), "trapezoid".into());
    meta.insert("pooling".into(), req.params.pooling.to_string());
    meta.insert("kink_splits".into(), kinks.to_string());
    meta.insert("completeness_residual".into(), format!("{residual:e}"));
    meta.insert(
        "completeness_relative".into(),
        format!("{:e}", residual / (z1 - z0).abs().max(1e-8)),
    );
    new_map(model, req, scores, meta)
}
