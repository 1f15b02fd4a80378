use crate::attribution::{AttributionParams, Baseline, ErfMap, Method, Model};
use crate::erf::{activation_map, compute_erf, select_target, ActivationMap, TargetPolicy};
use crate::error::{Error, Result};
use crate::exec;
use crate::sae::SaeModel;
use crate::tensor::Tensor;
use crate::vit::ViTWeights;

/// Share of positive ERF mass lying outside Chebyshev radius `radius` of the
/// activation argmax.
///
/// A CLS argmax has no position, so all of its ERF mass counts as outside.
/// Maps with no positive mass score 0.
pub fn nonlocality_score(act: &ActivationMap, erf: &ErfMap, radius: usize) -> Result<f64> {
    let d = &erf.target;
    if d.layer != act.layer || d.feature != act.feature || d.image_digest != act.image_digest {
        return Err(Error::Usage(
            "activation map and ERF describe different targets".into(),
        ));
    }
    if erf.grid != act.grid {
        return Err(Error::Dimension(format!(
            "ERF grid {} does not match activation grid {}",
            erf.grid, act.grid
        )));
    }
    let total: f64 = erf.scores.iter().filter(|s| **s > 0.0).sum();
    if total < 1e-12 {
        return Ok(0.0);
    }
    let Some(centre) = act.argmax_patch() else {
        return Ok(1.0);
    };
    let g = erf.grid;
    let (cy, cx) = (centre / g, centre % g);
    let inside: f64 = erf
        .scores
        .iter()
        .enumerate()
        .filter(|(p, s)| **s > 0.0 && (p / g).abs_diff(cy).max((p % g).abs_diff(cx)) <= radius)
        .map(|(_, s)| s)
        .sum();
    Ok((1.0 - inside / total).clamp(0.0, 1.0))
}

/// Median, averaging the middle pair for even lengths. `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[derive(Clone, Debug)]
pub struct ScanOptions {
    /// Features `0..n_features` are scanned per layer.
    pub n_features: usize,
    pub radius: usize,
    pub theta: f64,
    pub method: Method,
    pub params: AttributionParams,
    pub baseline: Baseline,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions {
            n_features: 100,
            radius: 1,
            theta: 0.5,
            method: Method::AttnLrp,
            params: AttributionParams::default(),
            baseline: Baseline::Zero,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureScan {
    pub layer: usize,
    pub feature: usize,
    /// Median score over firing images; `None` if the feature never fired.
    pub sigma: Option<f64>,
    pub flagged: bool,
    pub n_firing_images: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCount {
    pub layer: usize,
    pub scanned: usize,
    pub flagged: usize,
    pub never_fired: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NonlocalityReport {
    pub features: Vec<FeatureScan>,
    pub layers: Vec<LayerCount>,
}

fn scan_feature(
    model: &Model,
    layer: usize,
    feature: usize,
    images: &[Tensor],
    opts: &ScanOptions,
) -> Result<FeatureScan> {
    let mut sigmas = Vec::new();
    for image in images {
        let act = activation_map(model, image, layer, feature)?;
        let spec = match select_target(&act, TargetPolicy::MaxActivation) {
            Ok(s) => s,
            Err(Error::NoTarget(_)) => continue,
            Err(e) => return Err(e),
        };
        let erf = compute_erf(model, opts.method, &spec, image, &opts.params, &opts.baseline)?;
        sigmas.push(nonlocality_score(&act, &erf, opts.radius)?);
    }
    let sigma = median(&sigmas);
    Ok(FeatureScan {
        layer,
        feature,
        sigma,
        flagged: sigma.is_some_and(|s| s > opts.theta),
        n_firing_images: sigmas.len(),
    })
}

/// Scores features `0..N` of every `(layer, sae)` pair over `images`.
pub fn layer_scan(
    vit: &ViTWeights,
    saes: &[(usize, &SaeModel)],
    images: &[Tensor],
    opts: &ScanOptions,
) -> Result<NonlocalityReport> {
    if !(0.0..=1.0).contains(&opts.theta) {
        return Err(Error::Config(format!("θ must lie in [0, 1], got {}", opts.theta)));
    }
    let mut jobs = Vec::new();
    for &(layer, sae) in saes {
        if opts.n_features > sae.m() {
            return Err(Error::Usage(format!(
                "cannot scan {} features of an SAE with m = {}",
                opts.n_features,
                sae.m()
            )));
        }
        jobs.extend((0..opts.n_features).map(|k| (layer, sae, k)));
    }
    let features = exec::try_map(&jobs, |&(layer, sae, k)| {
        scan_feature(&Model { vit, sae }, layer, k, images, opts)
    })?;
    let layers = saes
        .iter()
        .map(|&(layer, _)| {
            let mine = features.iter().filter(|f| f.layer == layer);
            LayerCount {
                layer,
                scanned: opts.n_features,
                flagged: mine.clone().filter(|f| f.flagged).count(),
                never_fired: mine.filter(|f| f.sigma.is_none()).count(),
            }
        })
        .collect();
    Ok(NonlocalityReport { features, layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::TargetDescriptor;
    use std::collections::BTreeMap;

    fn pair(act_values: Vec<f64>, scores: Vec<f64>, grid: usize, cls: bool) -> (ActivationMap, ErfMap) {
        let mut argmax = 0;
        for (i, &v) in act_values.iter().enumerate() {
            if v > act_values[argmax] {
                argmax = i;
            }
        }
        let act = ActivationMap {
            layer: 2,
            feature: 5,
            values: act_values,
            argmax,
            has_cls: cls,
            grid,
            image_digest: "d".into(),
        };
        let erf = ErfMap {
            scores,
            grid,
            target: TargetDescriptor {
                layer: 2,
                token: argmax,
                feature: 5,
                image_digest: "d".into(),
            },
            method: Method::AttnLrp,
            metadata: BTreeMap::new(),
        };
        (act, erf)
    }

    fn onehot(n: usize, i: usize) -> Vec<f64> {
        (0..n).map(|j| if j == i { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn sigma_closed_forms() {
        // 4×4 grid, argmax patch 0.
        let (a, e) = pair(onehot(16, 0), onehot(16, 0), 4, false);
        assert_eq!(nonlocality_score(&a, &e, 1).unwrap(), 0.0);
        let (a, e) = pair(onehot(16, 0), onehot(16, 15), 4, false);
        assert_eq!(nonlocality_score(&a, &e, 1).unwrap(), 1.0);
        let mut s = onehot(16, 5);
        s[15] = 1.0;
        s[3] = -4.0;
        let (a, e) = pair(onehot(16, 0), s, 4, false);
        assert_eq!(nonlocality_score(&a, &e, 1).unwrap(), 0.5);
    }

    #[test]
    fn degenerate_and_cls_cases() {
        let (a, e) = pair(onehot(16, 0), vec![-1.0; 16], 4, false);
        assert_eq!(nonlocality_score(&a, &e, 1).unwrap(), 0.0);
        let (a, e) = pair(onehot(17, 0), onehot(16, 0), 4, true);
        assert_eq!(nonlocality_score(&a, &e, 1).unwrap(), 1.0);
        let (a, mut e) = pair(onehot(16, 0), onehot(16, 0), 4, false);
        e.target.feature = 6;
        assert!(nonlocality_score(&a, &e, 1).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }
}
