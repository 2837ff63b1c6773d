//! Small hierarchical image encoder with four stages at strides 4, 8, 16
//! and 16. Each stage optionally hosts a fusion layer that mixes in the
//! text stream before the next stage.
//!
//! Stage 1 embeds `p x p` pixel patches and adds a learned positional
//! table; stages 2 and 3 merge 2x2 neighborhoods; stage 4 keeps the grid
//! and projects only when its width differs. A neck maps the last stage to
//! the output width `C`.

use crate::autodiff::Var;
use crate::bhfm::{Bhfm, FusionKind};
use crate::error::{Error, Result};
use crate::nn::{Block, Linear, ParamBuilder, ParamId, Session};
use crate::tensor::Real;

pub const STAGES: usize = 4;
/// Spatial merge factor entering each stage (stage 1 uses the patch size).
const MERGE: [usize; STAGES] = [1, 2, 2, 1];

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_size: (usize, usize),
    pub patch: usize,
    pub widths: [usize; STAGES],
    pub depths: [usize; STAGES],
    pub heads: [usize; STAGES],
    pub mlp_ratio: usize,
    /// Width `C` of the final feature.
    pub out_dim: usize,
    /// Exclude backbone parameters from optimization.
    pub frozen: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: (128, 128),
            patch: 4,
            widths: [16, 32, 64, 64],
            depths: [1, 1, 1, 1],
            heads: [1, 2, 4, 4],
            mlp_ratio: 2,
            out_dim: 32,
            frozen: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Config(format!("encoder input {h}x{w} must be divisible by 16")));
        }
        if self.patch != 4 {
            return Err(Error::Config(format!(
                "encoder.patch must be 4 for the 4/8/16/16 stride schedule, got {}",
                self.patch
            )));
        }
        for i in 0..STAGES {
            if self.heads[i] == 0 || !self.widths[i].is_multiple_of(self.heads[i]) {
                return Err(Error::Config(format!(
                    "encoder stage {} width {} not divisible by {} heads",
                    i + 1,
                    self.widths[i],
                    self.heads[i]
                )));
            }
        }
        Ok(())
    }

    /// Grid `(h, w)` of each stage.
    pub fn grids(&self) -> [(usize, usize); STAGES] {
        let (h, w) = self.image_size;
        [(h / 4, w / 4), (h / 8, w / 8), (h / 16, w / 16), (h / 16, w / 16)]
    }

    pub fn out_grid(&self) -> (usize, usize) {
        self.grids()[STAGES - 1]
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    /// Patch embedding or merge projection; `None` when the stage keeps
    /// both grid and width.
    pub embed: Option<Linear>,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub cfg: EncoderConfig,
    pub pos: ParamId,
    pub stages: Vec<Stage>,
    pub neck: Linear,
}

/// Stage outputs (after fusion) and the final feature.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    /// `F_1..F_4`, each `[h_i * w_i, c_i]`.
    pub stages: Vec<Var>,
    pub grids: Vec<(usize, usize)>,
    /// Block inputs of each stage.
    pub stage_inputs: Vec<Var>,
    /// `F_n`: `[(H/16) * (W/16), C]`.
    pub f_n: Var,
}

impl ImageEncoder {
    #[allow(clippy::needless_range_loop)]
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let (g1h, g1w) = cfg.grids()[0];
        let pos = pb.uniform("pos", &[g1h * g1w, cfg.widths[0]], 0.02);
        let mut stages = Vec::with_capacity(STAGES);
        for i in 0..STAGES {
            let c = cfg.widths[i];
            let mut sp = pb.sub(&format!("stages.{i}"));
            let embed = if i == 0 {
                Some(Linear::new(&mut sp, "embed", cfg.patch * cfg.patch * 3, c))
            } else {
                let d_in = cfg.widths[i - 1] * MERGE[i] * MERGE[i];
                (MERGE[i] != 1 || d_in != c).then(|| Linear::new(&mut sp, "embed", d_in, c))
            };
            let blocks = (0..cfg.depths[i])
                .map(|b| Block::new(&mut sp, &format!("blocks.{b}"), c, cfg.heads[i], cfg.mlp_ratio))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { embed, blocks });
        }
        let neck = Linear::new(pb, "neck", cfg.widths[STAGES - 1], cfg.out_dim);
        Ok(Self { cfg, pos, stages, neck })
    }

    /// Run the four stages on an `[H, W, 3]` image. With `fusion`, each
    /// stage output passes through its fusion layer together with the text
    /// state, and the evolved text state is returned.
    pub fn encode<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        image: Var,
        fusion: Option<(&Bhfm, Var)>,
    ) -> Result<(FeaturePyramid, Option<Var>)> {
        let (h, w) = self.cfg.image_size;
        if s.g.shape(image) != [h, w, 3] {
            return Err(Error::invalid(format!(
                "image encoder expects a {h}x{w}x3 image, got {:?}",
                s.g.shape(image)
            )));
        }
        let grids = self.cfg.grids();
        let mut text = fusion.map(|(_, t)| t);
        if let Some((bhfm, _)) = fusion {
            if bhfm.cfg.variant.kind == FusionKind::Off {
                return Err(Error::invalid("fusion supplied with variant off"));
            }
            if bhfm.layers.len() != STAGES {
                return Err(Error::invalid("fusion needs one layer per encoder stage"));
            }
        }

        let mut x = s.g.reshape(image, &[h * w, 3])?;
        let (mut gh, mut gw) = (h, w);
        let mut stages = Vec::with_capacity(STAGES);
        let mut inputs = Vec::with_capacity(STAGES);
        for (i, stage) in self.stages.iter().enumerate() {
            let k = if i == 0 { self.cfg.patch } else { MERGE[i] };
            if k != 1 {
                x = s.g.space_to_depth(x, gh, gw, k)?;
                gh /= k;
                gw /= k;
            }
            if let Some(e) = &stage.embed {
                x = e.forward(s, x)?;
            }
            if i == 0 {
                let pos = s.param(self.pos);
                x = s.g.add(x, pos)?;
            }
            debug_assert_eq!((gh, gw), grids[i]);
            let f_in = x;
            for b in &stage.blocks {
                x = b.forward(s, x)?;
            }
            if let (Some((bhfm, _)), Some(t)) = (fusion, text) {
                let cfg = &bhfm.cfg;
                let (f_out, t_next) = bhfm.layers[i].forward(s, x, t, f_in, cfg.coeffs, cfg.variant.kind)?;
                x = f_out;
                text = Some(t_next);
            }
            inputs.push(f_in);
            stages.push(x);
        }
        let f_n = self.neck.forward(s, x)?;
        Ok((
            FeaturePyramid {
                stages,
                grids: grids.to_vec(),
                stage_inputs: inputs,
                f_n,
            },
            text,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bhfm::BhfmConfig;
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            image_size: (32, 32),
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn output_grid_is_stride_16() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng);
            ImageEncoder::new(&mut pb, EncoderConfig::default()).unwrap()
        };
        let mut s = Session::new(&store);
        let img = s.constant(Tensor::full(&[128, 128, 3], 0.3));
        let (p, t) = enc.encode(&mut s, img, None).unwrap();
        assert!(t.is_none());
        assert_eq!(enc.cfg.out_grid(), (8, 8));
        assert_eq!(s.g.shape(p.f_n), &[64, 32]);
        assert_eq!(s.g.shape(p.stages[0]), &[32 * 32, 16]);
        assert_eq!(s.g.shape(p.stages[1]), &[16 * 16, 32]);
        assert!(enc.stages[3].embed.is_none());
    }

    #[test]
    fn rejects_bad_sizes() {
        let cfg = EncoderConfig {
            image_size: (120, 128),
            ..EncoderConfig::default()
        };
        assert!(cfg.validate().is_err());
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng);
            ImageEncoder::new(&mut pb, small()).unwrap()
        };
        let mut s = Session::new(&store);
        let img = s.constant(Tensor::zeros(&[64, 32, 3]));
        assert!(enc.encode(&mut s, img, None).is_err());
    }

    #[test]
    fn fusion_makes_output_text_dependent() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (enc, bhfm) = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng);
            let enc = ImageEncoder::new(&mut pb, small()).unwrap();
            let bhfm = Bhfm::new(&mut pb, BhfmConfig::default(), &enc.cfg.widths, 32, 32).unwrap();
            (enc, bhfm)
        };
        let img: Tensor<f64> = Tensor::from_fn(&[32, 32, 3], |_| rng.gen_range(0.0..1.0));
        let run = |text: &Tensor<f64>, fuse: bool| {
            let mut s = Session::new(&store);
            let i = s.constant(img.clone());
            let t = s.constant(text.clone());
            let (p, _) = enc.encode(&mut s, i, fuse.then_some((&bhfm, t))).unwrap();
            s.g.value(p.f_n).clone()
        };
        let ta = Tensor::from_fn(&[4, 32], |_| rng.gen_range(-1.0..1.0));
        let tb = Tensor::from_fn(&[4, 32], |_| rng.gen_range(-1.0..1.0));
        assert_eq!(run(&ta, false), run(&tb, false));
        assert_ne!(run(&ta, true), run(&tb, true));
    }
}
