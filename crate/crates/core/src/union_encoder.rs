//! Joint image-text encoder producing aligned visual embeddings, text
//! embeddings and a multimodal class token.
//!
//! The image is cut into patches and projected to the embedding width; a
//! learned class token is prepended and learned positional embeddings added.
//! Text ids are embedded and given their own positional table. Both
//! sequences are concatenated and run through pre-norm transformer blocks
//! with full joint self-attention, then split back apart.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::Var;
use crate::data::synth::grammar_words;
use crate::error::{Error, Result};
use crate::nn::{patchify, Block, LayerNorm, Linear, ParamBuilder, ParamId, Session};
use crate::tensor::Real;

pub const CLS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const UNK_ID: usize = 2;
const RESERVED: [&str; 3] = ["[CLS]", "[EOS]", "[UNK]"];

/// Closed word-level vocabulary; ids 0/1/2 are CLS/EOS/UNK.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self {
            tokens: Vec::new(),
            index: BTreeMap::new(),
        };
        for w in RESERVED.iter().copied() {
            v.push(w);
        }
        for w in words {
            v.push(w.as_ref());
        }
        v
    }

    /// Vocabulary of the synthetic expression grammar.
    pub fn builtin() -> Self {
        Self::from_words(grammar_words())
    }

    fn push(&mut self, w: &str) {
        if !self.index.contains_key(w) {
            self.index.insert(w.to_string(), self.tokens.len());
            self.tokens.push(w.to_string());
        }
    }

    /// One token per line; the line number is the id.
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() {
            return Err(Error::invalid("vocabulary needs the three reserved tokens"));
        }
        let mut v = Self {
            tokens: Vec::new(),
            index: BTreeMap::new(),
        };
        for (i, line) in lines.iter().enumerate() {
            let w = line.trim_end_matches('\r');
            if v.index.insert(w.to_string(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {w:?}")));
            }
            v.tokens.push(w.to_string());
        }
        Ok(v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

/// `[CLS, w_1 .. w_L, EOS]`, so `len() == L + 2`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.len() < 3 || ids[0] != CLS_ID || *ids.last().unwrap() != EOS_ID {
            return Err(Error::invalid(format!(
                "token sequence must be [CLS, words.., EOS], got {ids:?}"
            )));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of word tokens `L`.
    pub fn words(&self) -> usize {
        self.ids.len() - 2
    }
}

/// Lowercase, drop punctuation, split on whitespace and look words up.
pub fn tokenize(text: &str, vocab: &Vocab) -> Result<TokenSequence> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    let words: Vec<&str> = cleaned.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::invalid("empty expression"));
    }
    let mut ids = Vec::with_capacity(words.len() + 2);
    ids.push(CLS_ID);
    ids.extend(words.iter().map(|w| vocab.id(w)));
    ids.push(EOS_ID);
    TokenSequence::new(ids)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnionConfig {
    pub image_size: (usize, usize),
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    /// Maximum number of word tokens `L`.
    pub max_text: usize,
}

impl Default for UnionConfig {
    fn default() -> Self {
        Self {
            image_size: (64, 64),
            patch: 8,
            dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            vocab_size: Vocab::builtin().len(),
            max_text: 16,
        }
    }
}

impl UnionConfig {
    /// BEiT-3-Large sized encoder (224 px, patch 16, width 1024). Buildable,
    /// but far too large to train here.
    pub fn full_scale(vocab_size: usize) -> Self {
        Self {
            image_size: (224, 224),
            patch: 16,
            dim: 1024,
            depth: 24,
            heads: 16,
            mlp_ratio: 4,
            vocab_size,
            max_text: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::Config(format!(
                "union patch {} must divide image {h}x{w}",
                self.patch
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "union dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.vocab_size <= UNK_ID {
            return Err(Error::Config("vocabulary too small".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_size.0 / self.patch, self.image_size.1 / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (a, b) = self.grid();
        a * b
    }
}

/// Decomposed encoder output.
#[derive(Clone, Copy, Debug)]
pub struct UnionEmbeddings {
    /// `[1, D]`
    pub v_cls: Var,
    /// `[N_p, D]`
    pub v: Var,
    /// `[N_t, D]`
    pub t: Var,
}

#[derive(Clone, Debug)]
pub struct UnionEncoder {
    pub cfg: UnionConfig,
    pub patch_embed: Linear,
    pub cls_token: ParamId,
    pub v_pos: ParamId,
    pub tok_embed: ParamId,
    pub t_pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl UnionEncoder {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: UnionConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let np = cfg.num_patches();
        let patch_embed = Linear::new(pb, "patch_embed", cfg.patch * cfg.patch * 3, d);
        let cls_token = pb.uniform("cls_token", &[1, d], 0.02);
        let v_pos = pb.uniform("v_pos", &[np + 1, d], 0.02);
        let tok_embed = pb.uniform("tok_embed", &[cfg.vocab_size, d], 1.0);
        let t_pos = pb.uniform("t_pos", &[cfg.max_text + 2, d], 0.02);
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(pb, &format!("blocks.{i}"), d, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(pb, "norm", d);
        Ok(Self {
            cfg,
            patch_embed,
            cls_token,
            v_pos,
            tok_embed,
            t_pos,
            blocks,
            norm,
        })
    }

    /// Encode an `[H_u, W_u, 3]` image and a token sequence jointly.
    pub fn encode<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        image: Var,
        tokens: &TokenSequence,
    ) -> Result<UnionEmbeddings> {
        let (h, w) = self.cfg.image_size;
        if s.g.shape(image) != [h, w, 3] {
            return Err(Error::invalid(format!(
                "union encoder expects a {h}x{w}x3 image, got {:?}",
                s.g.shape(image)
            )));
        }
        if tokens.words() > self.cfg.max_text {
            return Err(Error::invalid(format!(
                "{} words exceed the maximum of {}",
                tokens.words(),
                self.cfg.max_text
            )));
        }
        if let Some(&bad) = tokens.ids().iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary")));
        }
        let np = self.cfg.num_patches();
        let nt = tokens.len();

        let patches = patchify(&mut s.g, image, self.cfg.patch)?;
        let pv = self.patch_embed.forward(s, patches)?;
        let cls = s.param(self.cls_token);
        let v0 = s.g.concat_rows(&[cls, pv])?;
        let vpos = s.param(self.v_pos);
        let v0 = s.g.add(v0, vpos)?;

        let table = s.param(self.tok_embed);
        let t0 = s.g.gather(table, tokens.ids())?;
        let tpos_all = s.param(self.t_pos);
        let tpos = s.g.slice_rows(tpos_all, 0, nt)?;
        let t0 = s.g.add(t0, tpos)?;

        let mut u = s.g.concat_rows(&[v0, t0])?;
        for b in &self.blocks {
            u = b.forward(s, u)?;
        }
        let u = self.norm.forward(s, u)?;
        Ok(UnionEmbeddings {
            v_cls: s.g.slice_rows(u, 0, 1)?,
            v: s.g.slice_rows(u, 1, np)?,
            t: s.g.slice_rows(u, 1 + np, nt)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tokenize_known_words() {
        let vocab = Vocab::builtin();
        let t = tokenize("the gray road", &vocab).unwrap();
        assert_eq!(
            t.ids(),
            &[CLS_ID, vocab.id("the"), vocab.id("gray"), vocab.id("road"), EOS_ID]
        );
        assert_eq!(t.len(), t.words() + 2);
        assert!(t.ids()[1..4].iter().all(|&i| i > UNK_ID));
    }

    #[test]
    fn tokenize_unknown_and_punctuation() {
        let vocab = Vocab::builtin();
        let t = tokenize("Zzxqy road.", &vocab).unwrap();
        assert_eq!(t.ids(), &[CLS_ID, UNK_ID, vocab.id("road"), EOS_ID]);
        assert!(tokenize("", &vocab).is_err());
        assert!(tokenize("  ?! ", &vocab).is_err());
    }

    #[test]
    fn vocab_text_round_trip() {
        let v = Vocab::builtin();
        let back = Vocab::parse(&v.to_text()).unwrap();
        assert_eq!(v, back);
        assert_eq!(back.token(CLS_ID), Some("[CLS]"));
        assert!(Vocab::parse("a\nb\na\n").is_err());
    }

    #[test]
    fn output_shapes() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng);
            UnionEncoder::new(&mut pb, UnionConfig::default()).unwrap()
        };
        let vocab = Vocab::builtin();
        let toks = tokenize("the red tank on the left", &vocab).unwrap();
        assert_eq!(toks.words(), 6);
        let mut s = Session::new(&store);
        let img = s.constant(Tensor::full(&[64, 64, 3], 0.5));
        let out = enc.encode(&mut s, img, &toks).unwrap();
        assert_eq!(s.g.shape(out.v), &[64, 32]);
        assert_eq!(s.g.shape(out.t), &[8, 32]);
        assert_eq!(s.g.shape(out.v_cls), &[1, 32]);

        let wrong = s.constant(Tensor::full(&[32, 64, 3], 0.5));
        assert!(enc.encode(&mut s, wrong, &toks).is_err());
    }

    #[test]
    fn full_scale_config_is_valid() {
        let cfg = UnionConfig::full_scale(250_002);
        cfg.validate().unwrap();
        assert_eq!(cfg.num_patches(), 196);
    }
}
