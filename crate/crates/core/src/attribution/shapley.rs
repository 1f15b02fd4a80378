//! Exact Shapley values by enumerating every coalition.

use super::kernelshap::binomial;
use super::{composite, new_map, target_value, AttributionRequest, ErfMap, Model};
use crate::error::{Error, Result};
use crate::exec;
use std::collections::BTreeMap;

/// Largest game [`exact_shapley`] will enumerate.
pub const MAX_EXACT_PLAYERS: usize = 12;

/// `φ_i = Σ_{C ∌ i} |C|!(P-|C|-1)!/P! · (v(C ∪ {i}) - v(C))`.
pub fn exact_shapley<F>(players: usize, value: F) -> Result<Vec<f64>>
where
    F: Fn(&[bool]) -> Result<f64> + Sync + Send,
{
    if players > MAX_EXACT_PLAYERS {
        return Err(Error::Usage(format!(
            "exact Shapley refuses {players} players (limit {MAX_EXACT_PLAYERS})"
        )));
    }
    let masks: Vec<u32> = (0..1u32 << players).collect();
    let vals = exec::try_map(&masks, |&m| {
        let c: Vec<bool> = (0..players).map(|i| m >> i & 1 == 1).collect();
        value(&c)
    })?;
    let p = players as f64;
    let weight: Vec<f64> = (0..players)
        .map(|s| 1.0 / (p * binomial(players - 1, s)))
        .collect();
    let mut phi = vec![0.0; players];
    for (i, f) in phi.iter_mut().enumerate() {
        for m in 0..1u32 << players {
            if m >> i & 1 == 1 {
                continue;
            }
            let s = m.count_ones() as usize;
            *f += weight[s] * (vals[(m | 1 << i) as usize] - vals[m as usize]);
        }
    }
    Ok(phi)
}

/// Exact Shapley values of the patch game defined by `req`.
pub fn exact_shapley_map(model: &Model, req: &AttributionRequest) -> Result<ErfMap> {
    let cfg = model.config();
    let x = req.image.to_dtype(cfg.dtype);
    let base = req.baseline.image(&x)?;
    super::check_target(model, &req.target)?;
    let value = |c: &[bool]| target_value(model, &composite(&x, &base, c, cfg), &req.target);
    let scores = exact_shapley(cfg.num_patches(), value)?;
    let mut meta = BTreeMap::new();
    meta.insert("enumerated".into(), "true".into());
    new_map(model, req, scores, meta)
}
