//! Training objective: binary cross-entropy on logits, DICE on sigmoid
//! probabilities and the text-weighted boundary loss
//!
//! ```text
//! L_tbl = mean_i (w * (grad(M_pre)_i - grad(M_gt)_i))^2,   w = Linear(T_s)
//! ```
//!
//! where `grad` sums the absolute horizontal and vertical differences to the
//! next pixel (zero at the trailing edge) and `T_s` is the mean of the text
//! embeddings over the word tokens.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamBuilder, Session};
use crate::tensor::Real;

pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
    pub tbl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ce: 1.0,
            dice: 0.1,
            tbl: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("loss.ce", self.ce), ("loss.dice", self.dice), ("loss.tbl", self.tbl)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_binary<T: Real>(gt: &[T]) -> Result<()> {
    if let Some(v) = gt.iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::invalid(format!("ground truth value {v} is not 0 or 1")));
    }
    Ok(())
}

fn check_same_shape<T: Real>(s: &Session<'_, T>, op: &'static str, a: Var, n: usize) -> Result<()> {
    let shape = s.g.shape(a);
    if shape.len() != 2 || shape.iter().product::<usize>() != n {
        return Err(Error::shape(op, format!("prediction {shape:?} vs {n} target values")));
    }
    Ok(())
}

/// Mean binary cross-entropy of `[H, W]` logits against a 0/1 target.
pub fn ce_loss<T: Real>(s: &mut Session<'_, T>, logits: Var, gt: &[T]) -> Result<Var> {
    check_same_shape(s, "ce_loss", logits, gt.len())?;
    check_binary(gt)?;
    s.g.bce_with_logits(logits, gt)
}

/// `1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)`.
pub fn dice_loss<T: Real>(s: &mut Session<'_, T>, probs: Var, gt: Var, eps: f64) -> Result<Var> {
    let inter = s.g.mul(probs, gt)?;
    let inter = s.g.sum(inter);
    let num = s.g.affine(inter, T::of(2.0), T::of(eps));
    let sp = s.g.sum(probs);
    let sg = s.g.sum(gt);
    let den = s.g.add(sp, sg)?;
    let den = s.g.affine(den, T::one(), T::of(eps));
    let ratio = s.g.div(num, den)?;
    Ok(s.g.affine(ratio, -T::one(), T::one()))
}

pub fn gradient_map<T: Real>(s: &mut Session<'_, T>, m: Var) -> Result<Var> {
    s.g.gradient_map(m)
}

/// Mean of `(w * (grad_pre - grad_gt))^2`; `w` has one element.
pub fn tbl_loss<T: Real>(s: &mut Session<'_, T>, probs: Var, gt: Var, w: Var) -> Result<Var> {
    if s.g.shape(probs) != s.g.shape(gt) {
        return Err(Error::shape(
            "tbl_loss",
            format!("{:?} vs {:?}", s.g.shape(probs), s.g.shape(gt)),
        ));
    }
    let gp = s.g.gradient_map(probs)?;
    let gg = s.g.gradient_map(gt)?;
    let d = s.g.sub(gp, gg)?;
    let wd = s.g.mul(d, w)?;
    let sq = s.g.mul(wd, wd)?;
    Ok(s.g.mean(sq))
}

/// Sentence weight `w = Linear(T_s)` for the boundary loss.
#[derive(Clone, Debug)]
pub struct SentenceWeight {
    pub linear: Linear,
}

impl SentenceWeight {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, dim: usize) -> Self {
        Self {
            linear: Linear::new(pb, "tbl_weight", dim, 1),
        }
    }

    /// Mean of `T` over the word tokens, dropping the class and end tokens.
    pub fn pool<T: Real>(s: &mut Session<'_, T>, t: Var) -> Result<Var> {
        let n = s.g.shape(t)[0];
        if n < 3 {
            return Err(Error::invalid(format!("text of {n} tokens has no words")));
        }
        let words = s.g.slice_rows(t, 1, n - 2)?;
        Ok(s.g.mean_rows(words))
    }

    /// Scalar weight of shape `[1]`.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, t: Var) -> Result<Var> {
        let ts = Self::pool(s, t)?;
        let w = self.linear.forward(s, ts)?;
        s.g.reshape(w, &[1])
    }
}

/// Loss terms of one sample. Terms are always computed; `total` only
/// includes those with a nonzero weight.
#[derive(Clone, Copy, Debug)]
pub struct LossBundle {
    pub total: Var,
    pub ce: Var,
    pub dice: Var,
    pub tbl: Var,
    pub grad_pre: Var,
    pub grad_gt: Var,
}

pub fn total_loss<T: Real>(
    s: &mut Session<'_, T>,
    logits: Var,
    gt: &[T],
    w: Var,
    weights: LossWeights,
) -> Result<LossBundle> {
    let shape = s.g.shape(logits).to_vec();
    let ce = ce_loss(s, logits, gt)?;
    let probs = s.g.sigmoid(logits);
    let gt_var = s.constant(crate::tensor::Tensor::new(&shape, gt.to_vec())?);
    let dice = dice_loss(s, probs, gt_var, DICE_EPS)?;
    let tbl = tbl_loss(s, probs, gt_var, w)?;
    let grad_pre = s.g.gradient_map(probs)?;
    let grad_gt = s.g.gradient_map(gt_var)?;

    let mut total: Option<Var> = None;
    for (lambda, term) in [(weights.ce, ce), (weights.dice, dice), (weights.tbl, tbl)] {
        if lambda == 0.0 {
            continue;
        }
        let scaled = if lambda == 1.0 {
            term
        } else {
            s.g.scale(term, T::of(lambda))
        };
        total = Some(match total {
            None => scaled,
            Some(acc) => s.g.add(acc, scaled)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => s.g.scale(ce, T::zero()),
    };
    Ok(LossBundle {
        total,
        ce,
        dice,
        tbl,
        grad_pre,
        grad_gt,
    })
}
