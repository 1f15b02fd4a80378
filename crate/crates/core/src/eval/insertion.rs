use crate::attribution::{composite, target_value, Baseline, Model, Target};
use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

/// Below this the full-image activation is treated as zero.
pub const MIN_FULL_ACTIVATION: f64 = 1e-6;

/// Patch indices by descending score, lowest index first on ties.
pub fn rank_patches(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InsertionOptions {
    /// Patches inserted per step; 1 evaluates every prefix.
    pub step: usize,
    /// Start from the original and blank the ranked patches instead.
    pub deletion: bool,
}

impl Default for InsertionOptions {
    fn default() -> Self {
        InsertionOptions {
            step: 1,
            deletion: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InsertionCurve {
    pub ranking_id: String,
    /// Number of ranked patches moved at each point, starting at 0 and ending at P.
    pub steps: Vec<usize>,
    /// `z_k` at each step divided by `z_k` on the full image.
    pub values: Vec<f64>,
    pub full_activation: f64,
    pub deletion: bool,
}

impl InsertionCurve {
    pub fn auc(&self) -> f64 {
        auc(self)
    }

    pub fn endpoint(&self) -> f64 {
        *self.values.last().expect("curve has at least two points")
    }
}

/// Mean of every point after the first.
pub fn auc(curve: &InsertionCurve) -> f64 {
    let tail = &curve.values[1..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

fn check_ranking(ranking: &[usize], patches: usize) -> Result<()> {
    let mut seen = vec![false; patches];
    if ranking.len() != patches {
        return Err(Error::Usage(format!(
            "ranking has {} entries for {patches} patches",
            ranking.len()
        )));
    }
    for &p in ranking {
        if p >= patches || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Usage(format!("ranking is not a permutation (patch {p})")));
        }
    }
    Ok(())
}

/// Inserts (or deletes) patches of `image` in `ranking` order and records the
/// normalized target activation.
pub fn insertion_curve(
    model: &Model,
    target: &Target,
    image: &Tensor,
    ranking: &[usize],
    baseline: &Baseline,
    ranking_id: &str,
    opts: &InsertionOptions,
) -> Result<InsertionCurve> {
    let cfg = model.config();
    let p = cfg.num_patches();
    check_ranking(ranking, p)?;
    if opts.step == 0 {
        return Err(Error::Config("insertion step must be positive".into()));
    }
    let x = image.to_dtype(cfg.dtype);
    let base = baseline.image(&x)?;
    let full = target_value(model, &x, target)?;
    if !(full > MIN_FULL_ACTIVATION) {
        return Err(Error::SkipTarget(format!(
            "full-image activation {full:e} is too small to normalize by"
        )));
    }
    let mut steps: Vec<usize> = (0..p).step_by(opts.step).collect();
    steps.push(p);
    let raw = exec::try_map(&steps, |&i| {
        let moved = &ranking[..i];
        let original = if opts.deletion { i == 0 } else { i == p };
        if original {
            return Ok(full);
        }
        let mut keep = vec![opts.deletion; p];
        for &q in moved {
            keep[q] = !opts.deletion;
        }
        target_value(model, &composite(&x, &base, &keep, cfg), target)
    })?;
    Ok(InsertionCurve {
        ranking_id: ranking_id.to_string(),
        steps,
        values: raw.iter().map(|v| v / full).collect(),
        full_activation: full,
        deletion: opts.deletion,
    })
}
