use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use super::insertion::{insertion_curve, rank_patches, InsertionCurve, InsertionOptions};
use crate::attribution::{AttributionParams, Baseline, Method, Model, Target};
use crate::erf::{activation_map, compute_erf, TargetPolicy, TargetSpec};
use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

/// A way of ordering patches for insertion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Ranker {
    /// Patch tokens by their own `z_k`.
    Activation,
    Erf(Method),
}

impl Ranker {
    pub fn id(self) -> &'static str {
        match self {
            Ranker::Activation => "activation",
            Ranker::Erf(m) => m.id(),
        }
    }
}

impl fmt::Display for Ranker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Ranker {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "activation" {
            Ok(Ranker::Activation)
        } else {
            s.parse().map(Ranker::Erf)
        }
    }
}

/// One target to evaluate.
#[derive(Clone, Debug)]
pub struct EvalCase<'a> {
    pub id: String,
    pub model: Model<'a>,
    pub image: Tensor,
    pub target: Target,
}

#[derive(Clone, Debug)]
pub struct CompareOptions {
    pub params: AttributionParams,
    pub baseline: Baseline,
    pub insertion: InsertionOptions,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            params: AttributionParams::default(),
            baseline: Baseline::Zero,
            insertion: InsertionOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub method: String,
    /// `None` aggregates every layer.
    pub layer: Option<usize>,
    pub mean_auc: f64,
    /// Sample standard deviation (0 for a single target).
    pub sd: f64,
    /// Fraction of targets where this ranking beats the activation ranking,
    /// ties counting one half.
    pub win_rate: f64,
    pub n_targets: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRecord {
    pub target_id: String,
    pub method: String,
    pub step: usize,
    pub r: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkippedTarget {
    pub target_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub curves: Vec<CurveRecord>,
    pub skipped: Vec<SkippedTarget>,
    /// Per evaluated target: `(target id, layer, AUC per ranker)`, rankers in
    /// the order requested.
    pub aucs: Vec<(String, usize, Vec<f64>)>,
}

struct CaseResult {
    aucs: Vec<f64>,
    activation_auc: f64,
    curves: Vec<CurveRecord>,
}

fn evaluate(case: &EvalCase, rankers: &[Ranker], opts: &CompareOptions) -> Result<CaseResult> {
    let t = case.target;
    let spec = TargetSpec {
        layer: t.layer,
        feature: t.feature,
        token: t.token,
        policy: TargetPolicy::Explicit(t.token),
    };
    let run = |r: Ranker| -> Result<InsertionCurve> {
        let ranking = match r {
            Ranker::Activation => {
                let act = activation_map(&case.model, &case.image, t.layer, t.feature)?;
                rank_patches(act.patch_values())
            }
            Ranker::Erf(m) => {
                let erf =
                    compute_erf(&case.model, m, &spec, &case.image, &opts.params, &opts.baseline)?;
                rank_patches(&erf.scores)
            }
        };
        insertion_curve(
            &case.model,
            &t,
            &case.image,
            &ranking,
            &opts.baseline,
            r.id(),
            &opts.insertion,
        )
    };
    let reference = run(Ranker::Activation)?;
    let mut aucs = Vec::with_capacity(rankers.len());
    let mut curves = Vec::new();
    for &r in rankers {
        let curve = if r == Ranker::Activation {
            reference.clone()
        } else {
            run(r)?
        };
        aucs.push(curve.auc());
        curves.extend(curve.steps.iter().zip(&curve.values).map(|(&s, &v)| CurveRecord {
            target_id: case.id.clone(),
            method: r.id().into(),
            step: s,
            r: v,
        }));
    }
    Ok(CaseResult {
        aucs,
        activation_auc: reference.auc(),
        curves,
    })
}

/// Mean and sample standard deviation, summed in sorted order so the result
/// does not depend on target order.
fn summarize(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let mut dev: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
    dev.sort_by(f64::total_cmp);
    (mean, (dev.iter().sum::<f64>() / (n - 1.0)).sqrt())
}

fn win(a: f64, base: f64) -> f64 {
    if a > base {
        1.0
    } else if a == base {
        0.5
    } else {
        0.0
    }
}

/// Insertion AUC of each ranker on each case, aggregated per layer.
///
/// Targets whose full-image activation is too small are skipped and listed;
/// every other error aborts the comparison.
pub fn compare_methods(
    cases: &[EvalCase],
    rankers: &[Ranker],
    opts: &CompareOptions,
) -> Result<Comparison> {
    if cases.is_empty() || rankers.is_empty() {
        return Err(Error::Usage("need at least one target and one method".into()));
    }
    let results = exec::map(cases, |c| evaluate(c, rankers, opts));
    let mut done: Vec<(&EvalCase, CaseResult)> = Vec::new();
    let mut skipped = Vec::new();
    for (case, r) in cases.iter().zip(results) {
        match r {
            Ok(r) => done.push((case, r)),
            Err(Error::SkipTarget(reason)) => skipped.push(SkippedTarget {
                target_id: case.id.clone(),
                reason,
            }),
            Err(e) => return Err(e),
        }
    }
    if done.is_empty() {
        return Err(Error::Data(format!(
            "empty result: all {} targets were skipped",
            cases.len()
        )));
    }
    let layers: BTreeSet<usize> = done.iter().map(|(c, _)| c.target.layer).collect();
    let mut groups: Vec<Option<usize>> = layers.iter().map(|&l| Some(l)).collect();
    if groups.len() > 1 {
        groups.push(None);
    }
    let mut rows = Vec::new();
    for (ri, r) in rankers.iter().enumerate() {
        for &g in &groups {
            let sel: Vec<&CaseResult> = done
                .iter()
                .filter(|(c, _)| g.is_none_or(|l| c.target.layer == l))
                .map(|(_, r)| r)
                .collect();
            let vals: Vec<f64> = sel.iter().map(|r| r.aucs[ri]).collect();
            let (mean_auc, sd) = summarize(&vals);
            let wins: f64 = sel.iter().map(|r| win(r.aucs[ri], r.activation_auc)).sum();
            rows.push(ComparisonRow {
                method: r.id().into(),
                layer: g,
                mean_auc,
                sd,
                win_rate: wins / sel.len() as f64,
                n_targets: sel.len(),
            });
        }
    }
    let aucs = done
        .iter()
        .map(|(c, r)| (c.id.clone(), c.target.layer, r.aucs.clone()))
        .collect();
    let curves = done.into_iter().flat_map(|(_, r)| r.curves).collect();
    Ok(Comparison {
        rows,
        curves,
        skipped,
        aucs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_is_order_free() {
        let a = [0.1, 0.7, 0.30000000000000004, 0.2, 0.9];
        let mut b = a;
        b.reverse();
        assert_eq!(summarize(&a), summarize(&b));
        let (m, s) = summarize(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(summarize(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn ranker_ids_round_trip() {
        for r in [Ranker::Activation, Ranker::Erf(Method::AttnLrp), Ranker::Erf(Method::Ig)] {
            assert_eq!(r.id().parse::<Ranker>().unwrap(), r);
        }
        assert!("occlusion".parse::<Ranker>().is_err());
    }
}
