//! Bidirectional hierarchical fusion between the image encoder stages and
//! the text stream, plus the post-encoding text guidance that produces the
//! text-guided decoding feature.
//!
//! Per layer, with `r = c / 2`:
//!
//! ```text
//! F'   = gelu(down(F_i))                 T'  = text_proj(T_i)
//! F''  = MHCA(F', T') + F'               T'' = MHCA(T', F') + T'
//! T_{i+1} = (1 - a_t) T_i + a_t restore(T'')
//! F''' = F_in + up(F'') + F_i
//! F_out = F''' + MLP(LN(F''')) + a_i gate_up(gelu(gate_down(F''')))
//! ```
//!
//! `Uni` keeps the text stream fixed; `Linear` also skips both attentions.
//! The text stream has a constant working width so it can pass between
//! stages of different widths; each layer's `text_proj` maps it to `r`.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Attention, LayerNorm, Linear, Mlp, ParamBuilder, Session};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionKind {
    Bi,
    Uni,
    Linear,
    Off,
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bi" => Ok(FusionKind::Bi),
            "uni" => Ok(FusionKind::Uni),
            "linear" => Ok(FusionKind::Linear),
            "off" => Ok(FusionKind::Off),
            _ => Err(Error::Config(format!(
                "bhfm.variant must be one of bi, uni, linear, off; got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionKind::Bi => "bi",
            FusionKind::Uni => "uni",
            FusionKind::Linear => "linear",
            FusionKind::Off => "off",
        })
    }
}

/// Which fusion pieces are active. `Off` forces both flags false.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionVariant {
    pub kind: FusionKind,
    /// Post-encoding text guidance.
    pub use_bc: bool,
    /// Per-stage fusion layers.
    pub use_bl: bool,
}

impl FusionVariant {
    pub fn new(kind: FusionKind, use_bc: bool, use_bl: bool) -> Self {
        let on = kind != FusionKind::Off;
        Self {
            kind,
            use_bc: use_bc && on,
            use_bl: use_bl && on,
        }
    }

    pub fn off() -> Self {
        Self::new(FusionKind::Off, false, false)
    }

    pub fn layers_active(&self) -> bool {
        self.use_bl
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionCoeffs {
    pub alpha_t: f64,
    pub alpha_i: f64,
}

impl Default for FusionCoeffs {
    fn default() -> Self {
        Self {
            alpha_t: 0.2,
            alpha_i: 0.5,
        }
    }
}

impl FusionCoeffs {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha_t) {
            return Err(Error::Config(format!(
                "bhfm.alpha_t must lie in [0, 1], got {}",
                self.alpha_t
            )));
        }
        if !(self.alpha_i >= 0.0 && self.alpha_i.is_finite()) {
            return Err(Error::Config(format!(
                "bhfm.alpha_i must be non-negative, got {}",
                self.alpha_i
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BhfmLayer {
    pub c: usize,
    pub r: usize,
    pub text_dim: usize,
    pub down: Linear,
    pub text_proj: Linear,
    /// Image queries, text keys/values.
    pub img_attn: Attention,
    /// Text queries, image keys/values.
    pub txt_attn: Attention,
    pub restore: Linear,
    pub up: Linear,
    pub norm: LayerNorm,
    pub mlp: Mlp,
    pub gate_down: Linear,
    pub gate_up: Linear,
}

impl BhfmLayer {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        c: usize,
        text_dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        if c < 2 || !c.is_multiple_of(2) {
            return Err(Error::Config(format!("fusion width {c} must be even")));
        }
        let r = c / 2;
        let mut s = pb.sub(name);
        Ok(Self {
            c,
            r,
            text_dim,
            down: Linear::new(&mut s, "down", c, r),
            text_proj: Linear::new(&mut s, "text_proj", text_dim, r),
            img_attn: Attention::new(&mut s, "img_attn", r, r, r, heads)?,
            txt_attn: Attention::new(&mut s, "txt_attn", r, r, r, heads)?,
            restore: Linear::new(&mut s, "restore", r, text_dim),
            up: Linear::new(&mut s, "up", r, c),
            norm: LayerNorm::new(&mut s, "norm", c),
            mlp: Mlp::new(&mut s, "mlp", c, c * mlp_ratio),
            gate_down: Linear::new(&mut s, "gate_down", c, r),
            gate_up: Linear::new(&mut s, "gate_up", r, c),
        })
    }

    /// Returns `(F_out, T_{i+1})`. `kind` must not be `Off`.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        f_i: Var,
        t_i: Var,
        f_in: Var,
        coeffs: FusionCoeffs,
        kind: FusionKind,
    ) -> Result<(Var, Var)> {
        if kind == FusionKind::Off {
            return Err(Error::invalid("fusion layer invoked with variant off"));
        }
        let fs = s.g.shape(f_i).to_vec();
        if fs.len() != 2 || fs[1] != self.c || s.g.shape(f_in) != fs.as_slice() {
            return Err(Error::shape(
                "bhfm_layer",
                format!(
                    "F_i {:?} and F_in {:?} must both be [n, {}]",
                    fs,
                    s.g.shape(f_in),
                    self.c
                ),
            ));
        }
        let ts = s.g.shape(t_i);
        if ts.len() != 2 || ts[1] != self.text_dim {
            return Err(Error::shape(
                "bhfm_layer",
                format!("text {:?} must be [n_t, {}]", ts, self.text_dim),
            ));
        }

        let f1 = self.down.forward(s, f_i)?;
        let f1 = s.g.gelu(f1);
        let t1 = self.text_proj.forward(s, t_i)?;

        let f2 = match kind {
            FusionKind::Linear => f1,
            _ => {
                let a = self.img_attn.forward(s, f1, t1)?;
                s.g.add(a, f1)?
            }
        };

        let t_next = if kind == FusionKind::Bi && coeffs.alpha_t != 0.0 {
            let a = self.txt_attn.forward(s, t1, f1)?;
            let t2 = s.g.add(a, t1)?;
            let restored = self.restore.forward(s, t2)?;
            let keep = s.g.scale(t_i, T::of(1.0 - coeffs.alpha_t));
            let add = s.g.scale(restored, T::of(coeffs.alpha_t));
            s.g.add(keep, add)?
        } else {
            t_i
        };

        let up = self.up.forward(s, f2)?;
        let f3 = s.g.add(f_in, up)?;
        let f3 = s.g.add(f3, f_i)?;

        let h = self.norm.forward(s, f3)?;
        let m = self.mlp.forward(s, h)?;
        let mut out = s.g.add(f3, m)?;
        if coeffs.alpha_i != 0.0 {
            let gd = self.gate_down.forward(s, f3)?;
            let gd = s.g.gelu(gd);
            let gu = self.gate_up.forward(s, gd)?;
            let gu = s.g.scale(gu, T::of(coeffs.alpha_i));
            out = s.g.add(out, gu)?;
        }
        Ok((out, t_next))
    }
}

/// `F_en = F * MHCA(F, T)` with image queries and text keys/values.
///
/// The attention output bias starts at one, so the guidance begins close
/// to the identity and learns a multiplicative modulation.
#[derive(Clone, Debug)]
pub struct PostGuidance {
    pub attn: Attention,
}

impl PostGuidance {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        c: usize,
        text_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        let attn = Attention::new(pb, name, c, text_dim, c, heads)?;
        if let Some(b) = attn.o.b {
            pb.fill(b, 1.0);
        }
        Ok(Self { attn })
    }

    pub fn attention<T: Real>(&self, s: &mut Session<'_, T>, f: Var, t: Var) -> Result<Var> {
        self.attn.forward(s, f, t)
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, f: Var, t: Var) -> Result<Var> {
        let a = self.attention(s, f, t)?;
        s.g.mul(f, a)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BhfmConfig {
    pub variant: FusionVariant,
    pub coeffs: FusionCoeffs,
    /// Working width of the text stream between stages.
    pub text_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for BhfmConfig {
    fn default() -> Self {
        Self {
            variant: FusionVariant::new(FusionKind::Bi, true, true),
            coeffs: FusionCoeffs::default(),
            text_dim: 32,
            heads: 2,
            mlp_ratio: 2,
        }
    }
}

/// All fusion parameters: the text input projection, one layer per encoder
/// stage and the post-encoding guidance.
#[derive(Clone, Debug)]
pub struct Bhfm {
    pub cfg: BhfmConfig,
    pub text_in: Linear,
    pub layers: Vec<BhfmLayer>,
    pub guidance: PostGuidance,
}

impl Bhfm {
    /// `stage_widths`: channel width of each encoder stage; `union_dim`:
    /// width of the union text embeddings; `out_dim`: width of `F_n`.
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        cfg: BhfmConfig,
        stage_widths: &[usize],
        union_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        cfg.coeffs.validate()?;
        let text_in = Linear::new(pb, "text_in", union_dim, cfg.text_dim);
        let layers = stage_widths
            .iter()
            .enumerate()
            .map(|(i, &c)| BhfmLayer::new(pb, &format!("layers.{i}"), c, cfg.text_dim, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let guidance = PostGuidance::new(pb, "guidance", out_dim, union_dim, cfg.heads)?;
        Ok(Self {
            cfg,
            text_in,
            layers,
            guidance,
        })
    }

    pub fn text_state<T: Real>(&self, s: &mut Session<'_, T>, t: Var) -> Result<Var> {
        self.text_in.forward(s, t)
    }
}
