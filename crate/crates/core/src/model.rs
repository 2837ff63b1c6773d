//! The full referring-segmentation pipeline: union encoder, hierarchical
//! image encoder with fusion layers, post-encoding guidance, mask prompt
//! generator and prompt encoder / mask decoder.
//!
//! Every component's parameters are always created, in a fixed order, so
//! that configurations differing only in ablation switches start from the
//! same initial weights for the parts they share.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::bhfm::{Bhfm, BhfmConfig};
use crate::data::ReferringSample;
use crate::error::{Error, Result};
use crate::head::{HeadConfig, HighRes, MaskHead};
use crate::image_encoder::{EncoderConfig, ImageEncoder};
use crate::losses::{total_loss, LossBundle, LossWeights, SentenceWeight};
use crate::mpg::{resize_prompt, MaskPromptGenerator};
use crate::nn::{ParamBuilder, ParamGroup, ParamStore, Session};
use crate::tensor::{Real, Tensor};
use crate::union_encoder::{tokenize, TokenSequence, UnionConfig, UnionEncoder, Vocab};

#[derive(Clone, Debug, PartialEq)]
pub struct MpgConfig {
    pub enabled: bool,
    pub use_mhca: bool,
    pub heads: usize,
}

impl Default for MpgConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            use_mhca: true,
            heads: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelConfig {
    pub union: UnionConfig,
    pub encoder: EncoderConfig,
    pub bhfm: BhfmConfig,
    pub mpg: MpgConfig,
    pub head: HeadConfig,
    pub loss: LossWeights,
}

impl ModelConfig {
    /// Fill in the head dimensions implied by the encoders.
    pub fn harmonized(mut self) -> Self {
        self.head.dim = self.encoder.out_dim;
        self.head.token_dim = self.union.dim;
        self.head.image_size = self.encoder.image_size;
        self.head.skip_widths = (self.encoder.widths[0], self.encoder.widths[1]);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.union.validate()?;
        self.encoder.validate()?;
        self.bhfm.coeffs.validate()?;
        self.loss.validate()?;
        let h = self.clone().harmonized().head;
        if h != self.head {
            return Err(Error::Config("head dimensions disagree with the encoders".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore<T>,
    pub union: UnionEncoder,
    pub encoder: ImageEncoder,
    pub bhfm: Bhfm,
    pub mpg: MaskPromptGenerator,
    pub head: MaskHead,
    pub tbl_weight: SentenceWeight,
}

/// One sample prepared for the model.
#[derive(Clone, Debug)]
pub struct ModelInput<T> {
    /// `[H_s, W_s, 3]`
    pub image: Tensor<T>,
    pub tokens: TokenSequence,
    /// `H_s * W_s` values in {0, 1}.
    pub gt: Option<Vec<T>>,
}

/// Handles into the session graph after a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub logits: Var,
    pub pseudo_mask: Option<Var>,
    pub v_cls: Var,
    pub text: Var,
    pub f_en: Var,
    pub text_out: Option<Var>,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let mut cfg = cfg.harmonized();
        cfg.union.vocab_size = vocab.len();
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let union = UnionEncoder::new(&mut pb.sub("union"), cfg.union.clone())?;
        let encoder = ImageEncoder::new(&mut pb.sub("encoder").frozen(cfg.encoder.frozen), cfg.encoder.clone())?;
        let bhfm = Bhfm::new(
            &mut pb.sub("bhfm").group(ParamGroup::Fusion),
            cfg.bhfm.clone(),
            &cfg.encoder.widths,
            cfg.union.dim,
            cfg.encoder.out_dim,
        )?;
        let mpg = MaskPromptGenerator::new(
            &mut pb.sub("mpg").group(ParamGroup::Fusion),
            cfg.union.dim,
            cfg.union.grid(),
            cfg.mpg.heads,
        )?;
        let head = MaskHead::new(&mut pb.sub("head"), cfg.head.clone())?;
        let tbl_weight = SentenceWeight::new(&mut pb.sub("loss"), cfg.union.dim);
        Ok(Self {
            cfg,
            vocab,
            store,
            union,
            encoder,
            bhfm,
            mpg,
            head,
            tbl_weight,
        })
    }

    pub fn prepare(&self, sample: &ReferringSample) -> Result<ModelInput<T>> {
        let (h, w) = self.cfg.encoder.image_size;
        if (sample.height, sample.width) != (h, w) {
            return Err(Error::invalid(format!(
                "sample {} is {}x{}, model expects {h}x{w}",
                sample.id, sample.height, sample.width
            )));
        }
        Ok(ModelInput {
            image: sample.image_tensor(),
            tokens: tokenize(&sample.expression, &self.vocab)?,
            gt: Some(sample.mask_tensor::<T>().into_data()),
        })
    }

    /// Union-encoder copy of the image, bilinearly resized.
    fn union_image(&self, s: &mut Session<'_, T>, image: Var) -> Result<Var> {
        let (h, w) = self.cfg.encoder.image_size;
        let (uh, uw) = self.cfg.union.image_size;
        let flat = s.g.reshape(image, &[h * w, 3])?;
        let r = s.g.resize(flat, h, w, uh, uw)?;
        s.g.reshape(r, &[uh, uw, 3])
    }

    pub fn forward(&self, s: &mut Session<'_, T>, image: Var, tokens: &TokenSequence) -> Result<Forward> {
        let cfg = &self.cfg;
        let (h, w) = cfg.encoder.image_size;
        if s.g.shape(image) != [h, w, 3] {
            return Err(Error::invalid(format!(
                "model expects a {h}x{w}x3 image, got {:?}",
                s.g.shape(image)
            )));
        }
        // Center intensities around zero.
        let image = s.g.affine(image, T::of(2.0), -T::one());
        let img_u = self.union_image(s, image)?;
        let u = self.union.encode(s, img_u, tokens)?;

        let variant = cfg.bhfm.variant;
        let fusion = if variant.use_bl {
            let t0 = self.bhfm.text_state(s, u.t)?;
            Some((&self.bhfm, t0))
        } else {
            None
        };
        let (pyr, text_out) = self.encoder.encode(s, image, fusion)?;
        let f_en = if variant.use_bc {
            self.bhfm.guidance.forward(s, pyr.f_n, u.t)?
        } else {
            pyr.f_n
        };

        let (g16h, g16w) = self.head.cfg.grid(16);
        let (pseudo_mask, dense) = if cfg.mpg.enabled {
            let pm = self.mpg.generate(s, u.v_cls, u.v, cfg.mpg.use_mhca)?;
            let dense = resize_prompt(s, pm, g16h, g16w)?;
            (Some(pm.logits), Some(dense))
        } else {
            (None, None)
        };
        let prompts = self.head.encode_prompts(s, u.v_cls, dense)?;
        let pixels = s.g.reshape(image, &[h * w, 3])?;
        let hires = HighRes {
            s4: pyr.stages[0],
            s8: pyr.stages[1],
            pixels,
        };
        let logits = self.head.decode_mask(s, f_en, prompts, hires)?;
        Ok(Forward {
            logits,
            pseudo_mask,
            v_cls: u.v_cls,
            text: u.t,
            f_en,
            text_out,
        })
    }

    pub fn loss(&self, s: &mut Session<'_, T>, fwd: &Forward, gt: &[T]) -> Result<LossBundle> {
        let w = self.tbl_weight.forward(s, fwd.text)?;
        total_loss(s, fwd.logits, gt, w, self.cfg.loss)
    }

    /// Forward pass plus loss for one prepared sample.
    pub fn run(&self, s: &mut Session<'_, T>, input: &ModelInput<T>) -> Result<(Forward, Option<LossBundle>)> {
        let image = s.constant(input.image.clone());
        let fwd = self.forward(s, image, &input.tokens)?;
        let loss = match &input.gt {
            Some(gt) => Some(self.loss(s, &fwd, gt)?),
            None => None,
        };
        Ok((fwd, loss))
    }

    /// Mask logits `[H, W]` for an image and expression.
    pub fn predict(&self, image: &Tensor<T>, expression: &str) -> Result<Tensor<T>> {
        let tokens = tokenize(expression, &self.vocab)?;
        let mut s = Session::new(&self.store);
        let img = s.constant(image.clone());
        let fwd = self.forward(&mut s, img, &tokens)?;
        Ok(s.g.value(fwd.logits).clone())
    }
}
