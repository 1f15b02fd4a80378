//! KernelSHAP over image patches.
//!
//! Players are patches; `v(C)` is `z_k` on the image with every patch outside
//! `C` replaced by the baseline. The efficiency constraint
//! `Σ φ = v(full) - v(∅)` is enforced exactly by eliminating the last
//! player, and the remaining coefficients solve a ridge-regularized weighted
//! least-squares problem.
//!
//! When the budget covers every non-trivial coalition they are all
//! enumerated with exact Shapley-kernel weights, which makes the estimate
//! equal to the exact Shapley values. Otherwise coalition sizes are drawn
//! with probability proportional to their total kernel mass and subsets
//! uniformly within a size, each draw weighted equally. Weights are scaled to
//! mean 1 in both cases so the ridge term has the same meaning.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{composite, new_map, target_value, AttributionRequest, ErfMap, Model};
use crate::error::{Error, Result};
use crate::exec;

/// Shapley-kernel weight `(P-1) / (C(P,s) · s · (P-s))` of one coalition of
/// size `s`; zero for the empty and full coalitions.
pub fn kernel_weight(players: usize, s: usize) -> f64 {
    if s == 0 || s >= players {
        return 0.0;
    }
    let p = players as f64;
    (p - 1.0) / (binomial(players, s) * s as f64 * (p - s as f64))
}

pub(crate) fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Coalitions and their regression weights.
fn coalitions(players: usize, budget: usize, seed: u64) -> (Vec<Vec<bool>>, Vec<f64>, bool) {
    let full_count = if players < 63 {
        (1u64 << players).saturating_sub(2)
    } else {
        u64::MAX
    };
    let mut cs = Vec::new();
    let mut ws = Vec::new();
    let enumerated = (budget as u64) >= full_count;
    if enumerated {
        for mask in 1..(1u64 << players) - 1 {
            let c: Vec<bool> = (0..players).map(|i| mask >> i & 1 == 1).collect();
            let s = mask.count_ones() as usize;
            cs.push(c);
            ws.push(kernel_weight(players, s));
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mass: Vec<f64> = (1..players)
            .map(|s| 1.0 / (s as f64 * (players - s) as f64))
            .collect();
        let total: f64 = mass.iter().sum();
        for _ in 0..budget {
            let mut u = rng.random::<f64>() * total;
            let mut s = players - 1;
            for (i, m) in mass.iter().enumerate() {
                if u < *m {
                    s = i + 1;
                    break;
                }
                u -= m;
            }
            let mut c = vec![false; players];
            for i in sample(&mut rng, players, s) {
                c[i] = true;
            }
            cs.push(c);
            ws.push(1.0);
        }
    }
    let mean = ws.iter().sum::<f64>() / ws.len().max(1) as f64;
    ws.iter_mut().for_each(|w| *w /= mean);
    (cs, ws, enumerated)
}

/// KernelSHAP estimate for a game on `players` players.
///
/// `value` is called once for the empty coalition, once for the full one and
/// once per sampled coalition; calls may run in parallel.
pub fn kernel_shap<F>(
    players: usize,
    value: F,
    samples: usize,
    ridge: f64,
    seed: u64,
) -> Result<(Vec<f64>, BTreeMap<String, String>)>
where
    F: Fn(&[bool]) -> Result<f64> + Sync + Send,
{
    if players == 0 {
        return Err(Error::Usage("KernelSHAP needs at least one player".into()));
    }
    if samples < players + 2 {
        return Err(Error::Config(format!(
            "KernelSHAP needs at least P + 2 = {} samples, got {samples}",
            players + 2
        )));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Config(format!("ridge must be ≥ 0, got {ridge}")));
    }
    let (cs, ws, enumerated) = coalitions(players, samples, seed);
    let mut all = vec![vec![false; players], vec![true; players]];
    all.extend(cs.iter().cloned());
    let vals = exec::try_map(&all, |c| value(c))?;
    let (v0, v1) = (vals[0], vals[1]);
    let delta = v1 - v0;
    let mut meta = BTreeMap::new();
    meta.insert("samples".into(), cs.len().to_string());
    meta.insert("ridge".into(), format!("{ridge:e}"));
    meta.insert("enumerated".into(), enumerated.to_string());
    if players == 1 {
        return Ok((vec![delta], meta));
    }
    let k = players - 1;
    let last = players - 1;
    let mut ata = DMatrix::<f64>::zeros(k, k);
    let mut aty = DVector::<f64>::zeros(k);
    let mut row = vec![0.0; k];
    for (c, (&w, &v)) in cs.iter().zip(ws.iter().zip(&vals[2..])) {
        let xl = f64::from(u8::from(c[last]));
        for (j, r) in row.iter_mut().enumerate() {
            *r = f64::from(u8::from(c[j])) - xl;
        }
        let y = v - v0 - xl * delta;
        for i in 0..k {
            if row[i] == 0.0 {
                continue;
            }
            aty[i] += w * row[i] * y;
            for j in 0..k {
                ata[(i, j)] += w * row[i] * row[j];
            }
        }
    }
    for i in 0..k {
        ata[(i, i)] += ridge;
    }
    let chol = ata.cholesky().ok_or_else(|| {
        Error::Numeric("KernelSHAP normal equations are singular after ridge".into())
    })?;
    let phi = chol.solve(&aty);
    let mut out: Vec<f64> = phi.iter().copied().collect();
    let rest: f64 = out.iter().sum();
    out.push(delta - rest);
    if let Some(i) = out.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("KernelSHAP produced a non-finite value at {i}")));
    }
    let eff = (out.iter().sum::<f64>() - delta).abs();
    meta.insert("efficiency_residual".into(), format!("{eff:e}"));
    Ok((out, meta))
}

pub fn attr_kernelshap(model: &Model, req: &AttributionRequest) -> Result<ErfMap> {
    let cfg = model.config();
    let x = req.image.to_dtype(cfg.dtype);
    let base = req.baseline.image(&x)?;
    let target = req.target;
    super::check_target(model, &target)?;
    let value = |c: &[bool]| target_value(model, &composite(&x, &base, c, cfg), &target);
    let (scores, meta) = kernel_shap(
        cfg.num_patches(),
        value,
        req.params.shap_samples,
        req.params.shap_ridge,
        req.params.seed,
    )?;
    new_map(model, req, scores, meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_weight_closed_form() {
        // P = 4, s = 2: 3 / (6 · 2 · 2)
        assert!((kernel_weight(4, 2) - 0.125).abs() < 1e-15);
        assert_eq!(kernel_weight(4, 0), 0.0);
        assert_eq!(kernel_weight(4, 4), 0.0);
    }

    #[test]
    fn additive_game_recovers_weights() {
        let w = [0.3, -1.2, 0.0, 2.5, 0.7, -0.4];
        let v = |c: &[bool]| Ok(c.iter().zip(&w).filter(|(i, _)| **i).map(|(_, x)| x).sum());
        // At the minimum budget the normal equations are barely determined and
        // the ridge bias is of order 1e-6 times their inverse.
        for (budget, tol) in [(8, 1e-4), (20, 1e-6), (62, 1e-6), (500, 1e-6)] {
            let (phi, _) = kernel_shap(6, v, budget, 1e-6, 5).unwrap();
            for (a, b) in phi.iter().zip(&w) {
                assert!((a - b).abs() < tol, "budget {budget}: {phi:?}");
            }
        }
    }

    #[test]
    fn constant_game_gives_zero() {
        let (phi, _) = kernel_shap(5, |_| Ok(3.0), 40, 1e-6, 1).unwrap();
        assert!(phi.iter().all(|p| p.abs() < 1e-8));
    }

    #[test]
    fn efficiency_is_exact() {
        let v = |c: &[bool]| {
            let n = c.iter().filter(|b| **b).count() as f64;
            Ok((n * 0.7).sin() + if c[0] && c[2] { 1.0 } else { 0.0 })
        };
        let (phi, _) = kernel_shap(7, v, 30, 1e-6, 3).unwrap();
        let full = v(&[true; 7]).unwrap() - v(&[false; 7]).unwrap();
        assert!((phi.iter().sum::<f64>() - full).abs() < 1e-12);
    }

    #[test]
    fn budget_below_minimum_is_rejected() {
        assert!(matches!(kernel_shap(5, |_| Ok(0.0), 6, 1e-6, 0), Err(Error::Config(_))));
    }

    #[test]
    fn seeded_draws_are_reproducible() {
        let v = |c: &[bool]| Ok(c.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| (i * i) as f64).product::<f64>());
        let a = kernel_shap(10, v, 100, 1e-6, 42).unwrap();
        let b = kernel_shap(10, v, 100, 1e-6, 42).unwrap();
        assert_eq!(a, b);
    }
}
