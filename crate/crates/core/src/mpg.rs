//! Mask prompt generator: a coarse pseudo-mask from the multimodal class
//! token and the visual patch embeddings.
//!
//! ```text
//! a   = MHCA(V_cls, V)         (skipped without MHCA)
//! g   = proj(V_cls * a)
//! X   = V * g                  (g broadcast over all patches)
//! M_p = generator(X)           D -> D/2 -> 1, reshaped to the patch grid
//! ```

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{bilinear_resize, Attention, Linear, Mlp, ParamBuilder, Session};
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct MaskPromptGenerator {
    pub dim: usize,
    pub grid: (usize, usize),
    pub attn: Attention,
    pub proj: Linear,
    pub generator: Mlp,
}

/// Pseudo-mask logits on the union patch grid.
#[derive(Clone, Copy, Debug)]
pub struct PseudoMask {
    /// `[H_u/p, W_u/p]`
    pub logits: Var,
}

impl MaskPromptGenerator {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, dim: usize, grid: (usize, usize), heads: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(format!("mask generator width {dim} too small")));
        }
        Ok(Self {
            dim,
            grid,
            attn: Attention::new(pb, "attn", dim, dim, dim, heads)?,
            proj: Linear::new(pb, "proj", dim, dim),
            generator: Mlp::with_out(pb, "generator", dim, dim / 2, 1),
        })
    }

    pub fn generate<T: Real>(&self, s: &mut Session<'_, T>, v_cls: Var, v: Var, use_mhca: bool) -> Result<PseudoMask> {
        self.generate_with(s, v_cls, v, use_mhca, None)
    }

    /// `attn_override` replaces the attention output `a` (test hook).
    pub fn generate_with<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        v_cls: Var,
        v: Var,
        use_mhca: bool,
        attn_override: Option<Var>,
    ) -> Result<PseudoMask> {
        let (gh, gw) = self.grid;
        if s.g.shape(v_cls) != [1, self.dim] {
            return Err(Error::invalid(format!(
                "class token must be [1, {}], got {:?}",
                self.dim,
                s.g.shape(v_cls)
            )));
        }
        if s.g.shape(v) != [gh * gw, self.dim] {
            return Err(Error::invalid(format!(
                "visual embeddings {:?} do not form a {gh}x{gw} grid of width {}",
                s.g.shape(v),
                self.dim
            )));
        }
        let cls = if use_mhca {
            let a = match attn_override {
                Some(a) => a,
                None => self.attn.forward(s, v_cls, v)?,
            };
            s.g.mul(v_cls, a)?
        } else {
            v_cls
        };
        let gate = self.proj.forward(s, cls)?;
        let x = s.g.mul(v, gate)?;
        let logits = self.generator.forward(s, x)?;
        Ok(PseudoMask {
            logits: s.g.reshape(logits, &[gh, gw])?,
        })
    }
}

/// Resize pseudo-mask logits to the decoder feature grid.
pub fn resize_prompt<T: Real>(s: &mut Session<'_, T>, m: PseudoMask, h: usize, w: usize) -> Result<Var> {
    if h == 0 || w == 0 {
        return Err(Error::invalid("prompt target extent must be positive"));
    }
    bilinear_resize(&mut s.g, m.logits, h, w)
}
