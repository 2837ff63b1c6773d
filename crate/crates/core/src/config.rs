//! Run configuration as flat `key = value` text with dotted keys.
//!
//! Every key has a default; unknown keys are rejected. Lines starting with
//! `#` are comments. The canonical rendering lists every key in a fixed
//! order and is what the configuration hash is computed from.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::bhfm::{FusionKind, FusionVariant};
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("precision must be f32 or f64, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// AdamW with two learning-rate groups and a late-phase step decay.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    /// Encoders, decoder and loss weighting.
    pub lr: f64,
    /// Fusion layers and the mask prompt generator.
    pub lr_fusion: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of final steps run at the decayed rate.
    pub decay_steps: usize,
    pub decay_factor: f64,
    /// Linear ramp length at the start of training.
    pub warmup_steps: usize,
    /// Global gradient-norm bound; zero disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1.5e-3,
            lr_fusion: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            decay_steps: 50,
            decay_factor: 0.1,
            clip_norm: 0.2,
            warmup_steps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    /// Coordinates sampled per tensor.
    pub coords: usize,
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Floor used when the analytic side runs in f32.
    pub floor_f32: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            coords: 3,
            step: 1e-5,
            floor: 1e-4,
            floor_f32: 1e-3,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub data: SynthConfig,
    /// Vocabulary file; empty means the built-in grammar vocabulary.
    pub vocab: String,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub ablate_steps: usize,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            data: SynthConfig::default(),
            vocab: String::new(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            ablate_steps: 150,
            gradcheck: GradcheckConfig::default(),
        }
    }
}

trait Value: Sized {
    fn parse(key: &str, v: &str) -> Result<Self>;
    fn show(&self) -> String;
}

fn bad(key: &str, v: &str, what: &str) -> Error {
    Error::Config(format!("{key}: cannot parse {v:?} as {what}"))
}

macro_rules! from_str_value {
    ($($t:ty => $what:literal),*) => {$(
        impl Value for $t {
            fn parse(key: &str, v: &str) -> Result<Self> {
                v.parse().map_err(|_| bad(key, v, $what))
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(u64 => "an unsigned integer", usize => "an unsigned integer", bool => "true or false");

impl Value for f64 {
    fn parse(key: &str, v: &str) -> Result<Self> {
        let x: f64 = v.parse().map_err(|_| bad(key, v, "a number"))?;
        if !x.is_finite() {
            return Err(bad(key, v, "a finite number"));
        }
        Ok(x)
    }

    fn show(&self) -> String {
        // Shortest representation that round-trips.
        format!("{self:?}")
    }
}

impl Value for String {
    fn parse(_: &str, v: &str) -> Result<Self> {
        Ok(v.to_string())
    }

    fn show(&self) -> String {
        self.clone()
    }
}

impl Value for [usize; 4] {
    fn parse(key: &str, v: &str) -> Result<Self> {
        let parts = v
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(key, v, "four comma-separated integers"))?;
        parts
            .try_into()
            .map_err(|_| bad(key, v, "four comma-separated integers"))
    }

    fn show(&self) -> String {
        self.map(|x| x.to_string()).join(",")
    }
}

impl Value for FusionKind {
    fn parse(key: &str, v: &str) -> Result<Self> {
        v.parse().map_err(|_| bad(key, v, "one of bi, uni, linear, off"))
    }

    fn show(&self) -> String {
        self.to_string()
    }
}

impl Value for Precision {
    fn parse(key: &str, v: &str) -> Result<Self> {
        v.parse().map_err(|_| bad(key, v, "f32 or f64"))
    }

    fn show(&self) -> String {
        self.to_string()
    }
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+;)*) => {
        pub const KEYS: &[&str] = &[$($key),*];

        fn set_known(&mut self, key: &str, v: &str) -> Result<()> {
            match key {
                $($key => self.$($field).+ = Value::parse(key, v)?,)*
                _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
            }
            Ok(())
        }

        pub fn entries(&self) -> Vec<(&'static str, String)> {
            vec![$(($key, Value::show(&self.$($field).+))),*]
        }
    };
}

impl RunConfig {
    keys! {
        "seed" => seed;
        "precision" => precision;
        "data.canvas" => data.canvas;
        "data.union_size" => data.union_size;
        "data.min_objects" => data.min_objects;
        "data.max_objects" => data.max_objects;
        "data.location_prob" => data.location_prob;
        "data.same_color_prob" => data.same_color_prob;
        "data.same_category_prob" => data.same_category_prob;
        "data.contrast" => data.contrast;
        "data.noise" => data.noise;
        "data.vocab" => vocab;
        "union.patch" => model.union.patch;
        "union.dim" => model.union.dim;
        "union.depth" => model.union.depth;
        "union.heads" => model.union.heads;
        "union.mlp_ratio" => model.union.mlp_ratio;
        "union.max_text" => model.union.max_text;
        "encoder.widths" => model.encoder.widths;
        "encoder.depths" => model.encoder.depths;
        "encoder.heads" => model.encoder.heads;
        "encoder.mlp_ratio" => model.encoder.mlp_ratio;
        "encoder.out_dim" => model.encoder.out_dim;
        "encoder.frozen" => model.encoder.frozen;
        "bhfm.variant" => model.bhfm.variant.kind;
        "bhfm.use_bc" => model.bhfm.variant.use_bc;
        "bhfm.use_bl" => model.bhfm.variant.use_bl;
        "bhfm.alpha_t" => model.bhfm.coeffs.alpha_t;
        "bhfm.alpha_i" => model.bhfm.coeffs.alpha_i;
        "bhfm.text_dim" => model.bhfm.text_dim;
        "bhfm.heads" => model.bhfm.heads;
        "bhfm.mlp_ratio" => model.bhfm.mlp_ratio;
        "mpg.enabled" => model.mpg.enabled;
        "mpg.use_mhca" => model.mpg.use_mhca;
        "mpg.heads" => model.mpg.heads;
        "head.heads" => model.head.heads;
        "head.rounds" => model.head.rounds;
        "head.mlp_ratio" => model.head.mlp_ratio;
        "head.up_dim" => model.head.up_dim;
        "head.logit_scale" => model.head.logit_scale;
        "loss.ce" => model.loss.ce;
        "loss.dice" => model.loss.dice;
        "loss.tbl" => model.loss.tbl;
        "optim.lr" => optim.lr;
        "optim.lr_fusion" => optim.lr_fusion;
        "optim.beta1" => optim.beta1;
        "optim.beta2" => optim.beta2;
        "optim.eps" => optim.eps;
        "optim.weight_decay" => optim.weight_decay;
        "optim.decay_steps" => optim.decay_steps;
        "optim.decay_factor" => optim.decay_factor;
        "optim.clip_norm" => optim.clip_norm;
        "optim.warmup_steps" => optim.warmup_steps;
        "train.steps" => train.steps;
        "train.checkpoint_every" => train.checkpoint_every;
        "ablate.steps" => ablate_steps;
        "gradcheck.coords" => gradcheck.coords;
        "gradcheck.step" => gradcheck.step;
        "gradcheck.floor" => gradcheck.floor;
        "gradcheck.floor_f32" => gradcheck.floor_f32;
        "gradcheck.tolerance" => gradcheck.tolerance;
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_known(key.trim(), value.trim())
    }

    /// Apply a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {pair:?}")))?;
        self.set(k, v)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.set_pair(line).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key in canonical order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Hex SHA-256 of the canonical rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Model configuration with derived sizes filled in.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        let v = m.bhfm.variant;
        m.bhfm.variant = FusionVariant::new(v.kind, v.use_bc, v.use_bl);
        m.union.image_size = (self.data.union_size, self.data.union_size);
        m.encoder.image_size = (self.data.canvas, self.data.canvas);
        m.harmonized()
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr_fusion > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::Config("optim.beta1/beta2 must lie in [0, 1)".into()));
        }
        if o.eps <= 0.0 || o.weight_decay < 0.0 || o.decay_factor < 0.0 || o.clip_norm < 0.0 {
            return Err(Error::Config(
                "optim.eps must be positive; weight_decay, decay_factor and clip_norm non-negative".into(),
            ));
        }
        if self.gradcheck.step <= 0.0 || self.gradcheck.tolerance <= 0.0 {
            return Err(Error::Config("gradcheck step and tolerance must be positive".into()));
        }
        self.model_config().validate()
    }
}
