//! Prompt encoder and mask decoder.
//!
//! Sparse prompts are the token-MLP image of the class token plus one
//! learned token that starts at zero. The dense prompt is a 1x1 projection
//! of the resized pseudo-mask and is added to the decoding feature.
//!
//! The decoder runs two rounds of token/feature cross-attention, turns the
//! mask token into a small hypernetwork vector and takes per-pixel dot
//! products with an upsampled feature map. Upsampling goes stride 16 -> 8
//! -> 4 -> 1 with bilinear resizes; each step adds a projection of the
//! matching encoder stage (or, at full resolution, of the input pixels).

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Attention, LayerNorm, Linear, Mlp, ParamBuilder, ParamId, Session};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    /// Decoder width `C`.
    pub dim: usize,
    /// Width of the class token.
    pub token_dim: usize,
    pub heads: usize,
    pub rounds: usize,
    pub mlp_ratio: usize,
    /// Width of the per-pixel embedding.
    pub up_dim: usize,
    pub image_size: (usize, usize),
    /// Widths of the stride-4 and stride-8 encoder stages.
    pub skip_widths: (usize, usize),
    /// Fixed multiplier on the mask logits. Values above one let the
    /// per-pixel dot products reach confident logits in fewer steps.
    pub logit_scale: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            token_dim: 32,
            heads: 4,
            rounds: 2,
            mlp_ratio: 2,
            up_dim: 8,
            image_size: (128, 128),
            skip_widths: (16, 32),
            logit_scale: 2.0,
        }
    }
}

impl HeadConfig {
    pub fn grid(&self, stride: usize) -> (usize, usize) {
        (self.image_size.0 / stride, self.image_size.1 / stride)
    }
}

/// Sparse `[k, C]` tokens and optional dense `[(H/16)*(W/16), C]` prompt.
#[derive(Clone, Copy, Debug)]
pub struct PromptBundle {
    pub sparse: Var,
    pub dense: Option<Var>,
}

/// Encoder features consumed by the upsampling path.
#[derive(Clone, Copy, Debug)]
pub struct HighRes {
    /// Stride-4 stage output `[(H/4)*(W/4), c1]`.
    pub s4: Var,
    /// Stride-8 stage output `[(H/8)*(W/8), c2]`.
    pub s8: Var,
    /// Input pixels `[H*W, 3]`.
    pub pixels: Var,
}

#[derive(Clone, Debug)]
pub struct DecoderRound {
    pub norm_t1: LayerNorm,
    pub t2i: Attention,
    pub norm_t2: LayerNorm,
    pub mlp: Mlp,
    pub norm_x: LayerNorm,
    pub i2t: Attention,
}

#[derive(Clone, Debug)]
pub struct MaskHead {
    pub cfg: HeadConfig,
    pub token_mlp: Mlp,
    pub sparse_token: ParamId,
    pub dense_proj: Linear,
    pub mask_token: ParamId,
    pub rounds: Vec<DecoderRound>,
    pub norm_out: LayerNorm,
    pub hyper: Mlp,
    pub up8: Linear,
    pub skip8: Linear,
    pub up4: Linear,
    pub skip4: Linear,
    pub up1: Linear,
    pub pixel: Mlp,
}

impl MaskHead {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: HeadConfig) -> Result<Self> {
        let (h, w) = cfg.image_size;
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "head image size {h}x{w} must be divisible by 16"
            )));
        }
        if cfg.dim < 2 || !cfg.dim.is_multiple_of(2) {
            return Err(Error::Config(format!("head.dim {} must be even", cfg.dim)));
        }
        if !(cfg.logit_scale.is_finite() && cfg.logit_scale > 0.0) {
            return Err(Error::Config(format!(
                "head.logit_scale {} must be positive",
                cfg.logit_scale
            )));
        }
        let c = cfg.dim;
        let half = c / 2;
        let u = cfg.up_dim;
        let rounds = (0..cfg.rounds)
            .map(|i| {
                let mut r = pb.sub(&format!("rounds.{i}"));
                Ok(DecoderRound {
                    norm_t1: LayerNorm::new(&mut r, "norm_t1", c),
                    t2i: Attention::new(&mut r, "t2i", c, c, c, cfg.heads)?,
                    norm_t2: LayerNorm::new(&mut r, "norm_t2", c),
                    mlp: Mlp::new(&mut r, "mlp", c, c * cfg.mlp_ratio),
                    norm_x: LayerNorm::new(&mut r, "norm_x", c),
                    i2t: Attention::new(&mut r, "i2t", c, c, c, cfg.heads)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            token_mlp: Mlp::with_out(pb, "token_mlp", cfg.token_dim, c, c),
            sparse_token: pb.constant("sparse_token", &[1, c], 0.0),
            dense_proj: Linear::new(pb, "dense_proj", 1, c),
            mask_token: pb.uniform("mask_token", &[1, c], 1.0),
            rounds,
            norm_out: LayerNorm::new(pb, "norm_out", c),
            hyper: Mlp::with_out(pb, "hyper", c, c, u),
            up8: Linear::new(pb, "up8", c, half),
            skip8: Linear::new(pb, "skip8", cfg.skip_widths.1, half),
            up4: Linear::new(pb, "up4", half, u),
            skip4: Linear::new(pb, "skip4", cfg.skip_widths.0, u),
            up1: Linear::new(pb, "up1", u, u),
            pixel: Mlp::with_out(pb, "pixel", 3, 2 * u, u),
            cfg,
        })
    }

    /// `dense`: resized pseudo-mask `[H/16, W/16]`, if the generator is on.
    pub fn encode_prompts<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        v_cls: Var,
        dense: Option<Var>,
    ) -> Result<PromptBundle> {
        if s.g.shape(v_cls) != [1, self.cfg.token_dim] {
            return Err(Error::invalid(format!(
                "class token must be [1, {}], got {:?}",
                self.cfg.token_dim,
                s.g.shape(v_cls)
            )));
        }
        let tok = self.token_mlp.forward(s, v_cls)?;
        let learned = s.param(self.sparse_token);
        let sparse = s.g.concat_rows(&[tok, learned])?;
        let dense = match dense {
            None => None,
            Some(m) => {
                let (gh, gw) = self.cfg.grid(16);
                if s.g.shape(m) != [gh, gw] {
                    return Err(Error::invalid(format!(
                        "dense prompt must be [{gh}, {gw}], got {:?}",
                        s.g.shape(m)
                    )));
                }
                let col = s.g.reshape(m, &[gh * gw, 1])?;
                Some(self.dense_proj.forward(s, col)?)
            }
        };
        Ok(PromptBundle { sparse, dense })
    }

    /// Full-resolution mask logits `[H, W]`.
    pub fn decode_mask<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        f_en: Var,
        prompts: PromptBundle,
        hires: HighRes,
    ) -> Result<Var> {
        let c = self.cfg.dim;
        let (h, w) = self.cfg.image_size;
        let (g16h, g16w) = self.cfg.grid(16);
        let (g8h, g8w) = self.cfg.grid(8);
        let (g4h, g4w) = self.cfg.grid(4);
        let expect = |name: &str, got: &[usize], want: [usize; 2]| {
            if got != want {
                Err(Error::invalid(format!("{name} must be {want:?}, got {got:?}")))
            } else {
                Ok(())
            }
        };
        expect("decoding feature", s.g.shape(f_en), [g16h * g16w, c])?;
        let sk = s.g.shape(prompts.sparse);
        if sk.len() != 2 || sk[0] == 0 || sk[1] != c {
            return Err(Error::invalid(format!("sparse prompt must be [k, {c}], got {sk:?}")));
        }
        if let Some(d) = prompts.dense {
            expect("dense prompt", s.g.shape(d), [g16h * g16w, c])?;
        }
        expect(
            "stride-8 feature",
            s.g.shape(hires.s8),
            [g8h * g8w, self.cfg.skip_widths.1],
        )?;
        expect(
            "stride-4 feature",
            s.g.shape(hires.s4),
            [g4h * g4w, self.cfg.skip_widths.0],
        )?;
        expect("pixels", s.g.shape(hires.pixels), [h * w, 3])?;

        let mut x = match prompts.dense {
            Some(d) => s.g.add(f_en, d)?,
            None => f_en,
        };
        let mask_tok = s.param(self.mask_token);
        let mut t = s.g.concat_rows(&[mask_tok, prompts.sparse])?;
        for r in &self.rounds {
            let q = r.norm_t1.forward(s, t)?;
            let a = r.t2i.forward(s, q, x)?;
            t = s.g.add(t, a)?;
            let q = r.norm_t2.forward(s, t)?;
            let m = r.mlp.forward(s, q)?;
            t = s.g.add(t, m)?;
            let q = r.norm_x.forward(s, x)?;
            let a = r.i2t.forward(s, q, t)?;
            x = s.g.add(x, a)?;
        }
        let x = self.norm_out.forward(s, x)?;
        let mt = s.g.slice_rows(t, 0, 1)?;
        let hyper = self.hyper.forward(s, mt)?;

        let u = s.g.resize(x, g16h, g16w, g8h, g8w)?;
        let u = self.up8.forward(s, u)?;
        let k = self.skip8.forward(s, hires.s8)?;
        let u = s.g.add(u, k)?;
        let u = s.g.gelu(u);

        let u = s.g.resize(u, g8h, g8w, g4h, g4w)?;
        let u = self.up4.forward(s, u)?;
        let k = self.skip4.forward(s, hires.s4)?;
        let u = s.g.add(u, k)?;
        let u = s.g.gelu(u);

        let u = s.g.resize(u, g4h, g4w, h, w)?;
        let u = self.up1.forward(s, u)?;
        let k = self.pixel.forward(s, hires.pixels)?;
        let u = s.g.add(u, k)?;
        let u = s.g.gelu(u);

        let logits = s.g.matmul_nt(u, hyper)?;
        let logits = s.g.scale(logits, T::of(self.cfg.logit_scale));
        s.g.reshape(logits, &[h, w])
    }
}
