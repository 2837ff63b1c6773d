//! Central finite-difference checks of every module's gradients.
//!
//! Each module is reduced to a scalar `f = sum(r * out)` with a fixed random
//! projection `r`. For every parameter tensor the module uses, and every
//! differentiable input, a few coordinates are sampled and the analytic
//! derivative is compared with `(f(x + h) - f(x - h)) / 2h` evaluated in
//! f64. The relative error is `|a - n| / max(|a|, |n|, floor)`.
//!
//! In float32 mode the analytic side runs in f32 while the finite
//! differences still run in f64 at the same (f32-representable) point.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Var;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::head::HighRes;
use crate::losses::{ce_loss, dice_loss, tbl_loss, DICE_EPS};
use crate::model::Model;
use crate::nn::Session;
use crate::tensor::{Real, Tensor};
use crate::union_encoder::{tokenize, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Module {
    Union,
    Encoder,
    Mpg,
    Head,
    Ce,
    Dice,
    Tbl,
}

impl Module {
    pub const ALL: [Module; 7] = [
        Module::Union,
        Module::Encoder,
        Module::Mpg,
        Module::Head,
        Module::Ce,
        Module::Dice,
        Module::Tbl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Module::Union => "union_encoder",
            Module::Encoder => "rs_image_encoder",
            Module::Mpg => "mask_prompt_generator",
            Module::Head => "sam2_head",
            Module::Ce => "loss_ce",
            Module::Dice => "loss_dice",
            Module::Tbl => "loss_tbl",
        }
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Module::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<_> = Module::ALL.iter().map(|m| m.name()).collect();
            Error::invalid(format!("unknown module {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub coords: usize,
    pub step: f64,
    pub floor: f64,
    pub floor_f32: f64,
    pub tolerance: f64,
    /// Analytic gradients in f32.
    pub float32: bool,
    /// Deliberately perturb this module's analytic gradients.
    pub corrupt: Option<Module>,
    pub modules: Vec<Module>,
}

impl GradcheckOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            coords: cfg.gradcheck.coords,
            step: cfg.gradcheck.step,
            floor: cfg.gradcheck.floor,
            floor_f32: cfg.gradcheck.floor_f32,
            tolerance: cfg.gradcheck.tolerance,
            float32: false,
            corrupt: None,
            modules: Module::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModuleResult {
    pub module: String,
    pub tensors: usize,
    pub coords: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Name and index of the worst coordinate.
    pub worst: String,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub precision: String,
    pub tolerance: f64,
    pub results: Vec<ModuleResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.pass)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<24} {:>7} {:>12} {:>12}  status",
            "module", "coords", "max_rel", "max_abs"
        )?;
        for r in &self.results {
            writeln!(
                f,
                "{:<24} {:>7} {:>12.3e} {:>12.3e}  {}",
                r.module,
                r.coords,
                r.max_rel_err,
                r.max_abs_err,
                if r.pass { "pass" } else { "FAIL" }
            )?;
        }
        writeln!(
            f,
            "precision {}, tolerance {:e}: {}",
            self.precision,
            self.tolerance,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

/// A small configuration with every component switched on, cheap enough to
/// finite-difference.
pub fn toy_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("data.canvas", "32"),
        ("data.union_size", "32"),
        ("union.dim", "16"),
        ("union.heads", "2"),
        ("union.depth", "1"),
        ("union.mlp_ratio", "2"),
        ("encoder.widths", "8,16,16,16"),
        ("encoder.heads", "1,2,2,2"),
        ("encoder.out_dim", "16"),
        ("bhfm.text_dim", "8"),
        ("mpg.heads", "2"),
        ("head.heads", "2"),
        ("head.up_dim", "4"),
    ] {
        cfg.set(k, v).expect("toy configuration keys exist");
    }
    cfg
}

const EXPRESSION: &str = "the red building on the left";

/// Fixed inputs of one module check, kept in f64.
struct Probe {
    module: Module,
    tokens: TokenSequence,
    gt: Vec<f64>,
    inputs: Vec<Tensor<f64>>,
    proj: Option<Tensor<f64>>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, f32_point: bool) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.gen_range(lo..hi);
        if f32_point {
            v as f32 as f64
        } else {
            v
        }
    })
}

impl Probe {
    fn new<T: Real>(model: &Model<T>, module: Module, rng: &mut ChaCha8Rng, f32_point: bool) -> Result<Self> {
        let c = &model.cfg;
        let tokens = tokenize(EXPRESSION, &model.vocab)?;
        let n_text = tokens.len();
        let (h, w) = c.encoder.image_size;
        let (uh, uw) = c.union.image_size;
        let d = c.union.dim;
        let grids = c.encoder.grids();
        let (g16h, g16w) = model.head.cfg.grid(16);
        let mut u = |shape: &[usize], lo, hi| uniform(rng, shape, lo, hi, f32_point);
        let inputs = match module {
            Module::Union => vec![u(&[uh, uw, 3], 0.0, 1.0)],
            Module::Encoder => vec![u(&[h, w, 3], 0.0, 1.0), u(&[n_text, d], -1.0, 1.0)],
            Module::Mpg => vec![u(&[1, d], -1.0, 1.0), u(&[c.union.num_patches(), d], -1.0, 1.0)],
            Module::Head => vec![
                u(&[g16h * g16w, c.encoder.out_dim], -1.0, 1.0),
                u(&[1, d], -1.0, 1.0),
                u(&[g16h, g16w], -2.0, 2.0),
                u(&[grids[0].0 * grids[0].1, c.encoder.widths[0]], -1.0, 1.0),
                u(&[grids[1].0 * grids[1].1, c.encoder.widths[1]], -1.0, 1.0),
                u(&[h * w, 3], 0.0, 1.0),
            ],
            Module::Ce | Module::Dice => vec![u(&[h, w], -3.0, 3.0)],
            Module::Tbl => vec![u(&[h, w], -3.0, 3.0), u(&[n_text, d], -1.0, 1.0)],
        };
        // Ground truth: an axis-aligned box covering part of the canvas.
        let (y0, y1, x0, x1) = (h / 4, h / 4 + h / 3, w / 3, w / 3 + w / 2);
        let gt = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                f64::from(u8::from((y0..y1).contains(&y) && (x0..x1).contains(&x)))
            })
            .collect();
        Ok(Self {
            module,
            tokens,
            gt,
            inputs,
            proj: None,
        })
    }

    fn flat<T: Real>(s: &mut Session<'_, T>, parts: &[Var]) -> Result<Var> {
        let flat = parts
            .iter()
            .map(|&p| {
                let n = s.g.value(p).numel();
                s.g.reshape(p, &[1, n])
            })
            .collect::<Result<Vec<_>>>()?;
        s.g.concat_cols(&flat)
    }

    /// Module output flattened to `[1, k]`.
    fn output<T: Real>(&self, model: &Model<T>, s: &mut Session<'_, T>, x: &[Var]) -> Result<Var> {
        let cfg = &model.cfg;
        match self.module {
            Module::Union => {
                let e = model.union.encode(s, x[0], &self.tokens)?;
                Self::flat(s, &[e.v_cls, e.v, e.t])
            }
            Module::Encoder => {
                let t0 = model.bhfm.text_state(s, x[1])?;
                let (pyr, text) = model.encoder.encode(s, x[0], Some((&model.bhfm, t0)))?;
                let f_en = model.bhfm.guidance.forward(s, pyr.f_n, x[1])?;
                let mut parts = vec![f_en, pyr.stages[0], pyr.stages[1]];
                parts.extend(text);
                Self::flat(s, &parts)
            }
            Module::Mpg => {
                let pm = model.mpg.generate(s, x[0], x[1], cfg.mpg.use_mhca)?;
                Self::flat(s, &[pm.logits])
            }
            Module::Head => {
                let prompts = model.head.encode_prompts(s, x[1], Some(x[2]))?;
                let hires = HighRes {
                    s4: x[3],
                    s8: x[4],
                    pixels: x[5],
                };
                let logits = model.head.decode_mask(s, x[0], prompts, hires)?;
                Self::flat(s, &[logits])
            }
            Module::Ce => {
                let gt: Vec<T> = self.gt.iter().map(|&v| T::of(v)).collect();
                ce_loss(s, x[0], &gt)
            }
            Module::Dice => {
                let p = s.g.sigmoid(x[0]);
                let gt = s.constant(Tensor::from_f64(s.g.shape(x[0]), &self.gt)?);
                dice_loss(s, p, gt, DICE_EPS)
            }
            Module::Tbl => {
                let p = s.g.sigmoid(x[0]);
                let gt = s.constant(Tensor::from_f64(s.g.shape(x[0]), &self.gt)?);
                let w = model.tbl_weight.forward(s, x[1])?;
                tbl_loss(s, p, gt, w)
            }
        }
    }

    /// Build `f` in a fresh session; returns it with the input leaves.
    fn scalar<T: Real>(&mut self, model: &Model<T>, s: &mut Session<'_, T>) -> Result<(Var, Vec<Var>)> {
        let x: Vec<Var> = self
            .inputs
            .iter()
            .map(|t| s.g.leaf(Tensor::from_f64(t.shape(), t.data()).expect("shape"), true))
            .collect();
        let out = self.output(model, s, &x)?;
        let n = s.g.value(out).numel();
        let proj = self.proj.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x9e37 + n as u64);
            Tensor::from_fn(&[n], |_| rng.gen_range(-1.0..1.0))
        });
        let out = s.g.reshape(out, &[n])?;
        let r = s.constant(Tensor::from_f64(&[n], proj.data())?);
        let prod = s.g.mul(out, r)?;
        Ok((s.g.sum(prod), x))
    }

    fn value(&mut self, model: &Model<f64>) -> Result<f64> {
        let mut s = Session::new(&model.store);
        let (f, _) = self.scalar(model, &mut s)?;
        Ok(s.g.value(f).data()[0])
    }
}

type Grads = (Vec<Option<Vec<f64>>>, Vec<Vec<f64>>);

fn analytic<T: Real>(model: &Model<T>, probe: &mut Probe) -> Result<Grads> {
    let mut s = Session::with_frozen_grads(&model.store);
    let (f, x) = probe.scalar(model, &mut s)?;
    s.g.backward(f)?;
    let params = s.param_grads().into_iter().map(|g| g.map(|t| t.to_f64())).collect();
    let inputs = x
        .iter()
        .map(|&v| {
            s.g.grad(v)
                .map(Tensor::to_f64)
                .unwrap_or_else(|| vec![0.0; s.g.value(v).numel()])
        })
        .collect();
    Ok((params, inputs))
}

struct Tally {
    coords: usize,
    tensors: usize,
    max_rel: f64,
    max_abs: f64,
    worst: String,
}

impl Tally {
    fn record(&mut self, name: &str, k: usize, a: f64, n: f64, floor: f64) {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(floor);
        self.coords += 1;
        self.max_abs = self.max_abs.max(abs);
        if rel.is_nan() || rel > self.max_rel {
            self.max_rel = if rel.is_nan() { f64::INFINITY } else { rel };
            self.worst = format!("{name}[{k}]");
        }
    }
}

fn corrupt(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = *x * 1.05 + 1e-3;
    }
}

fn check_module(
    module: Module,
    reference: &mut Model<f64>,
    f32_model: Option<&Model<f32>>,
    opts: &GradcheckOptions,
    rng: &mut ChaCha8Rng,
) -> Result<ModuleResult> {
    let mut probe = Probe::new(reference, module, rng, f32_model.is_some())?;
    let (mut pg, mut ig) = match f32_model {
        Some(m) => analytic(m, &mut probe)?,
        None => analytic(reference, &mut probe)?,
    };
    if opts.corrupt == Some(module) {
        pg.iter_mut().flatten().for_each(|g| corrupt(g));
        ig.iter_mut().for_each(|g| corrupt(g));
    }
    let h = opts.step;
    let floor = if f32_model.is_some() {
        opts.floor_f32
    } else {
        opts.floor
    };
    let mut tally = Tally {
        coords: 0,
        tensors: 0,
        max_rel: 0.0,
        max_abs: 0.0,
        worst: String::new(),
    };
    let ids: Vec<_> = reference.store.ids().collect();
    for (id, g) in ids.into_iter().zip(&pg) {
        let Some(g) = g else { continue };
        tally.tensors += 1;
        let name = reference.store.entry(id).name.clone();
        let picks = sample(rng, g.len(), opts.coords.min(g.len()));
        for k in picks.iter() {
            let orig = reference.store.get(id).data()[k];
            reference.store.get_mut(id).data_mut()[k] = orig + h;
            let fp = probe.value(reference)?;
            reference.store.get_mut(id).data_mut()[k] = orig - h;
            let fm = probe.value(reference)?;
            reference.store.get_mut(id).data_mut()[k] = orig;
            tally.record(&name, k, g[k], (fp - fm) / (2.0 * h), floor);
        }
    }
    for (i, g) in ig.iter().enumerate() {
        tally.tensors += 1;
        let name = format!("input{i}");
        let picks = sample(rng, g.len(), opts.coords.min(g.len()));
        for k in picks.iter() {
            let orig = probe.inputs[i].data()[k];
            probe.inputs[i].data_mut()[k] = orig + h;
            let fp = probe.value(reference)?;
            probe.inputs[i].data_mut()[k] = orig - h;
            let fm = probe.value(reference)?;
            probe.inputs[i].data_mut()[k] = orig;
            tally.record(&name, k, g[k], (fp - fm) / (2.0 * h), floor);
        }
    }
    Ok(ModuleResult {
        module: module.name().to_string(),
        tensors: tally.tensors,
        coords: tally.coords,
        max_rel_err: tally.max_rel,
        max_abs_err: tally.max_abs,
        pass: tally.coords > 0 && tally.max_rel <= opts.tolerance,
        worst: tally.worst,
    })
}

/// Run the check for every requested module of the model built from `cfg`.
pub fn gradcheck(cfg: &RunConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if !(opts.step > 0.0 && opts.tolerance > 0.0 && opts.floor > 0.0 && opts.floor_f32 > 0.0) || opts.coords == 0 {
        return Err(Error::Config(
            "gradcheck step, tolerance and floor must be positive and coords nonzero".into(),
        ));
    }
    let mut reference = crate::harness::build_model::<f64>(cfg)?;
    let f32_model = if opts.float32 {
        let m = crate::harness::build_model::<f32>(cfg)?;
        // Evaluate finite differences at the f32 point.
        let ids: Vec<_> = m.store.ids().collect();
        for id in ids {
            reference.store.set(
                id,
                Tensor::from_f64(m.store.get(id).shape(), &m.store.get(id).to_f64())?,
            )?;
        }
        Some(m)
    } else {
        None
    };
    let mut results = Vec::new();
    for (i, &module) in opts.modules.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(31).wrapping_add(i as u64));
        results.push(check_module(
            module,
            &mut reference,
            f32_model.as_ref(),
            opts,
            &mut rng,
        )?);
    }
    Ok(GradcheckReport {
        precision: if opts.float32 { "f32" } else { "f64" }.into(),
        tolerance: opts.tolerance,
        results,
    })
}
