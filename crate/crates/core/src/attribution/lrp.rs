//! Relevance propagation over the recorded forward tape.
//!
//! Relevance starts as `z_k` at the feature node and walks the tape in
//! reverse, down to the image pixels. Rules, with
//! `c = R / (y + ε·sign(y))` (`sign(0) = +1`):
//!
//! * affine maps (`Linear`, matmuls with one live operand): ε-rule,
//!   `R_x = x ⊙ (c · W)`; bias shares are absorbed
//! * products of two live operands (`Q·Kᵀ`, and `A·V` under `attnlrp`):
//!   ε-rule over the product terms, each term's relevance split evenly
//!   between its two factors
//! * `A·V` under `attn-const`: `A` is a constant, all relevance goes to `V`
//! * additions: proportional split `R_a = a ⊙ c`; shares of constant
//!   operands (positional embeddings, biases) leave the system
//! * softmax: gradient-times-input on `R/(s+ε)`,
//!   `R_x,i = x_i s_i (c_i - Σ_j s_j c_j)`
//! * LayerNorm: affine with frozen per-token statistics,
//!   `R_x,j = (x_j/σ)(γ_j c_j - mean_i(γ_i c_i))`
//! * GELU, ReLU, scaling and pure routing (slices, concatenation,
//!   patchify): relevance passes through unchanged
//!
//! Propagation continues through the patch embedding to the pixels, so the
//! embedding bias, positional and CLS shares leave the system; a patch's
//! score is the total relevance of its pixels.

use std::collections::BTreeMap;

use super::{new_map, target_forward, AttnRule, AttributionRequest, ErfMap, Model};
use crate::error::{Error, Result};
use crate::ops;
use crate::tape::{NodeId, Op, Tape};
use crate::tensor::{DType, Tensor};
use crate::vit::patchify;

fn f64_of(t: &Tensor) -> Tensor {
    t.to_dtype(DType::F64)
}

fn stabilized(y: &Tensor, r: &Tensor, eps: f64) -> Tensor {
    let d: Vec<f64> = y
        .data()
        .iter()
        .zip(r.data())
        .map(|(&y, &r)| {
            let den = if y >= 0.0 { y + eps } else { y - eps };
            r / den
        })
        .collect();
    Tensor::from_raw(y.shape().to_vec(), d, DType::F64)
}

fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ops::mul(&f64_of(a), b)
}

struct Propagator<'a> {
    tape: &'a Tape,
    eps: f64,
    rule: AttnRule,
}

impl Propagator<'_> {
    fn val(&self, id: NodeId) -> Tensor {
        f64_of(self.tape.value(id))
    }

    fn live(&self, id: NodeId) -> bool {
        self.tape.requires_grad(id)
    }

    /// Relevance of `y = a · b` (`nt`: `a · bᵀ`) passed to its live factors.
    fn product(
        &self,
        a: NodeId,
        b: NodeId,
        nt: bool,
        y: &Tensor,
        r: &Tensor,
        out: &mut Vec<(NodeId, Tensor)>,
    ) -> Result<()> {
        let c = stabilized(y, r, self.eps);
        let (la, lb) = (self.live(a), self.live(b));
        let share = if la && lb { 0.5 } else { 1.0 };
        let (va, vb) = (self.val(a), self.val(b));
        if la {
            let back = if nt {
                ops::matmul(&c, &vb)?
            } else {
                ops::matmul_nt(&c, &vb)?
            };
            out.push((a, ops::scale(&ops::mul(&va, &back)?, share)));
        }
        if lb {
            let back = if nt {
                ops::matmul_tn(&c, &va)?
            } else {
                ops::matmul_tn(&va, &c)?
            };
            out.push((b, ops::scale(&ops::mul(&vb, &back)?, share)));
        }
        Ok(())
    }

    fn step(&self, id: NodeId, r: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let node = self.tape.node(id);
        let y = f64_of(&node.value);
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => self.product(*a, *b, false, &y, r, &mut out)?,
            Op::MatMulNt { a, b } => self.product(*a, *b, true, &y, r, &mut out)?,
            Op::AttnApply { probs, v } => match self.rule {
                AttnRule::AttnLrp => self.product(*probs, *v, false, &y, r, &mut out)?,
                AttnRule::AttnConst => {
                    if self.live(*v) {
                        let c = stabilized(&y, r, self.eps);
                        let back = ops::matmul_tn(&self.val(*probs), &c)?;
                        out.push((*v, hadamard(self.tape.value(*v), &back)?));
                    }
                }
            },
            // The bias sits inside `y`, so its share is absorbed.
            Op::Linear { x, w, .. } => self.product(*x, *w, true, &y, r, &mut out)?,
            Op::Add { a, b } | Op::Sub { a, b } => {
                let c = stabilized(&y, r, self.eps);
                let neg = matches!(node.op, Op::Sub { .. });
                if self.live(*a) {
                    out.push((*a, hadamard(self.tape.value(*a), &c)?));
                }
                if self.live(*b) {
                    let rb = hadamard(self.tape.value(*b), &c)?;
                    out.push((*b, if neg { ops::scale(&rb, -1.0) } else { rb }));
                }
            }
            Op::AddRow { x, row, sign } => {
                let c = stabilized(&y, r, self.eps);
                if self.live(*x) {
                    out.push((*x, hadamard(self.tape.value(*x), &c)?));
                }
                if self.live(*row) {
                    let rv = self.val(*row);
                    let s = ops::sum_rows(&c)?.reshape(rv.shape().to_vec())?;
                    out.push((*row, ops::scale(&ops::mul(&rv, &s)?, *sign)));
                }
            }
            Op::Scale { x, .. } | Op::Gelu { x } | Op::Relu { x } => {
                out.push((*x, r.clone()));
            }
            Op::Softmax { x } => {
                let xv = self.val(*x);
                let c = stabilized(&y, r, self.eps);
                let (m, n) = y.dims2()?;
                let mut d = Vec::with_capacity(m * n);
                for i in 0..m {
                    let (s, ci, xi) = (y.row(i), c.row(i), xv.row(i));
                    let dot: f64 = s.iter().zip(ci).map(|(a, b)| a * b).sum();
                    d.extend((0..n).map(|j| xi[j] * s[j] * (ci[j] - dot)));
                }
                out.push((*x, Tensor::from_raw(vec![m, n], d, DType::F64)));
            }
            Op::LayerNorm {
                x, gamma, stats, ..
            } => {
                let xv = self.val(*x);
                let g = self.val(*gamma);
                let c = stabilized(&y, r, self.eps);
                let d = *xv.shape().last().unwrap_or(&1);
                let rows = xv.numel() / d.max(1);
                let mut rx = Vec::with_capacity(xv.numel());
                for i in 0..rows {
                    let ci = &c.data()[i * d..(i + 1) * d];
                    let xi = &xv.data()[i * d..(i + 1) * d];
                    let gc: Vec<f64> = ci.iter().zip(g.data()).map(|(a, b)| a * b).collect();
                    let mean = gc.iter().sum::<f64>() / d as f64;
                    let rstd = stats.rstd[i];
                    rx.extend((0..d).map(|j| xi[j] * rstd * (gc[j] - mean)));
                }
                out.push((*x, Tensor::from_raw(xv.shape().to_vec(), rx, DType::F64)));
            }
            Op::SumSquares { x } | Op::SumAbs { x } => {
                let xv = self.val(*x);
                let part = if matches!(node.op, Op::SumSquares { .. }) {
                    xv.map(|v| v * v)
                } else {
                    xv.map(f64::abs)
                };
                let c = stabilized(&y, r, self.eps).item()?;
                out.push((*x, part.map(|v| v * c)));
            }
            Op::Patchify { .. }
            | Op::ConcatRows { .. }
            | Op::ConcatCols { .. }
            | Op::SliceCols { .. }
            | Op::SelectRow { .. } => {
                out = self.tape.vjp(node, r)?;
            }
        }
        Ok(out.into_iter().filter(|(i, _)| self.live(*i)).collect())
    }

    /// Relevance arriving at `stop`, seeded with `seed` at `from`.
    fn run(&self, from: NodeId, seed: Tensor, stop: NodeId) -> Result<Tensor> {
        let mut rel: Vec<Option<Tensor>> = vec![None; from.index() + 1];
        rel[from.index()] = Some(seed);
        for idx in (stop.index() + 1..=from.index()).rev() {
            let Some(r) = rel[idx].take() else { continue };
            for (input, contrib) in self.step(NodeId(idx), &r)? {
                let slot = &mut rel[input.index()];
                *slot = Some(match slot.take() {
                    Some(acc) => ops::add(&acc, &contrib)?,
                    None => contrib,
                });
            }
        }
        let v = self.tape.value(stop);
        Ok(rel[stop.index()]
            .take()
            .unwrap_or_else(|| Tensor::zeros(v.shape().to_vec(), DType::F64)))
    }
}

pub fn attr_attnlrp(model: &Model, req: &AttributionRequest) -> Result<ErfMap> {
    let cfg = model.config();
    let eps = match req.params.lrp_eps {
        Some(e) if !(e > 0.0 && e.is_finite()) => {
            return Err(Error::Config(format!("LRP ε must be positive, got {e}")))
        }
        Some(e) => e,
        None => cfg.dtype.default_lrp_eps(),
    };
    let (ft, nodes) = target_forward(model, &req.image, &req.target)?;
    let z = ft.tape.value(nodes.z).item()?;
    let prop = Propagator {
        tape: &ft.tape,
        eps,
        rule: req.params.attn_rule,
    };
    let seed = Tensor::from_raw(vec![1, 1], vec![z], DType::F64);
    let r_img = prop.run(nodes.z, seed, ft.image)?;
    let per_patch = patchify(&r_img, cfg.patch_size)?;
    let scores: Vec<f64> = (0..cfg.num_patches())
        .map(|p| per_patch.row(p).iter().sum())
        .collect();
    let total: f64 = scores.iter().sum();
    let mut meta = BTreeMap::new();
    meta.insert("eps".into(), format!("{eps:e}"));
    meta.insert("attn_rule".into(), req.params.attn_rule.to_string());
    meta.insert("activation".into(), format!("{z:e}"));
    meta.insert("relevance_total".into(), format!("{total:e}"));
    meta.insert(
        "conservation_residual".into(),
        format!("{:e}", (total - z).abs() / z.abs().max(1e-300)),
    );
    new_map(model, req, scores, meta)
}
