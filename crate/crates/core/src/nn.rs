//! Parameter storage and the differentiable building blocks shared by every
//! module: linear, layer norm, MLP, multi-head cross-attention, patchify and
//! bilinear resize.
//!
//! GeLU is the tanh approximation throughout. Attention scales scores by
//! `1/sqrt(head_dim)` before the softmax and has no dropout. Bilinear resize
//! uses the align-corners-false convention with edge clamping.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Encoders, decoder head and loss weighting.
    Backbone,
    /// Fusion layers, post-encoding guidance and the mask prompt generator.
    Fusion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub group: ParamGroup,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry<T>> {
        self.entries.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Replace a parameter's value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::shape(
                "param set",
                format!("{}: {:?} vs {:?}", e.name, e.value.shape(), value.shape()),
            ));
        }
        e.value = value;
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    fn register(&mut self, name: String, value: Tensor<T>, group: ParamGroup, frozen: bool) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            value,
            group,
            frozen,
        });
        ParamId(self.entries.len() - 1)
    }
}

/// Scoped parameter registration with deterministic initialization.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    group: ParamGroup,
    frozen: bool,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
            group: ParamGroup::Backbone,
            frozen: false,
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = self.path(name);
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
            group: self.group,
            frozen: self.frozen,
        }
    }

    pub fn group(mut self, group: ParamGroup) -> Self {
        self.group = group;
        self
    }

    pub fn frozen(mut self, frozen: bool) -> Self {
        self.frozen = frozen;
        self
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..=bound)));
        let path = self.path(name);
        self.store.register(path, t, self.group, self.frozen)
    }

    /// Overwrite an already registered parameter with a constant.
    pub fn fill(&mut self, id: ParamId, v: f64) {
        self.store.get_mut(id).data_mut().fill(T::of(v));
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        let path = self.path(name);
        self.store
            .register(path, Tensor::full(shape, T::of(v)), self.group, self.frozen)
    }
}

/// Binds parameters into a fresh [`Graph`] for one forward/backward pass.
pub struct Session<'s, T: Real> {
    pub g: Graph<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    grad_frozen: bool,
}

impl<'s, T: Real> Session<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            grad_frozen: false,
        }
    }

    /// Frozen parameters receive gradients too (used by gradient checks).
    pub fn with_frozen_grads(store: &'s ParamStore<T>) -> Self {
        Self {
            grad_frozen: true,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = self.store.entry(id);
        let v = self.g.leaf(e.value.clone(), self.grad_frozen || !e.frozen);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.g.constant(t)
    }

    /// Gradients aligned with the store's entries; `None` for parameters
    /// that were not used or are frozen.
    pub fn param_grads(&self) -> Vec<Option<Tensor<T>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.g.grad(v).cloned()))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weight `[d_out, d_in]` ~ U(+-1/sqrt(d_in)), bias zero.
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut s = pb.sub(name);
        let w = s.uniform("weight", &[d_out, d_in], 1.0 / (d_in as f64).sqrt());
        let b = s.constant("bias", &[d_out], 0.0);
        Self {
            w,
            b: Some(b),
            d_in,
            d_out,
        }
    }

    pub fn no_bias<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut s = pb.sub(name);
        let w = s.uniform("weight", &[d_out, d_in], 1.0 / (d_in as f64).sqrt());
        Self {
            w,
            b: None,
            d_in,
            d_out,
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.w);
        let b = self.b.map(|b| s.param(b));
        s.g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize) -> Self {
        let mut s = pb.sub(name);
        let gamma = s.constant("weight", &[dim], 1.0);
        let beta = s.constant("bias", &[dim], 0.0);
        Self { gamma, beta, dim }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        s.g.layer_norm(x, g, b, LN_EPS)
    }
}

/// Two linear layers with a GeLU between them; output width equals input.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize, hidden: usize) -> Self {
        Self::with_out(pb, name, dim, hidden, dim)
    }

    pub fn with_out<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Self {
        let mut s = pb.sub(name);
        Self {
            fc1: Linear::new(&mut s, "fc1", d_in, hidden),
            fc2: Linear::new(&mut s, "fc2", hidden, d_out),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = s.g.gelu(h);
        self.fc2.forward(s, h)
    }
}

/// Multi-head cross-attention. Queries come from one sequence, keys and
/// values from another; the output has the query's width.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl Attention {
    /// `d_q`: query width (also the output width), `d_kv`: key/value input
    /// width, `d_model`: internal width split across `heads`.
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        d_q: usize,
        d_kv: usize,
        d_model: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: width {d_model} not divisible into {heads} heads"
            )));
        }
        let mut s = pb.sub(name);
        Ok(Self {
            q: Linear::new(&mut s, "q", d_q, d_model),
            k: Linear::new(&mut s, "k", d_kv, d_model),
            v: Linear::new(&mut s, "v", d_kv, d_model),
            o: Linear::new(&mut s, "out", d_model, d_q),
            heads,
            head_dim: d_model / heads,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, query: Var, kv: Var) -> Result<Var> {
        let q = self.q.forward(s, query)?;
        let k = self.k.forward(s, kv)?;
        let v = self.v.forward(s, kv)?;
        let scale = T::of(1.0 / (self.head_dim as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                let off = h * self.head_dim;
                (
                    s.g.slice_cols(q, off, self.head_dim)?,
                    s.g.slice_cols(k, off, self.head_dim)?,
                    s.g.slice_cols(v, off, self.head_dim)?,
                )
            };
            let scores = s.g.matmul_nt(qh, kh)?;
            let scores = s.g.scale(scores, scale);
            let attn = s.g.softmax(scores);
            outs.push(s.g.matmul(attn, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            s.g.concat_cols(&outs)?
        };
        self.o.forward(s, merged)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let mut s = pb.sub(name);
        Ok(Self {
            norm1: LayerNorm::new(&mut s, "norm1", dim),
            attn: Attention::new(&mut s, "attn", dim, dim, dim, heads)?,
            norm2: LayerNorm::new(&mut s, "norm2", dim),
            mlp: Mlp::new(&mut s, "mlp", dim, dim * mlp_ratio),
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(s, x)?;
        let a = self.attn.forward(s, h, h)?;
        let x = s.g.add(x, a)?;
        let h = self.norm2.forward(s, x)?;
        let m = self.mlp.forward(s, h)?;
        s.g.add(x, m)
    }
}

/// Split an `[H, W, 3]` image into non-overlapping `p x p` patches,
/// giving `[H*W/p^2, p*p*3]` in row-major block order.
pub fn patchify<T: Real>(g: &mut Graph<T>, image: Var, p: usize) -> Result<Var> {
    let shape = g.shape(image).to_vec();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::invalid(format!("patchify expects [H, W, 3], got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::invalid(format!("patch size {p} does not divide {h}x{w}")));
    }
    let flat = g.reshape(image, &[h * w, 3])?;
    g.space_to_depth(flat, h, w, p)
}

/// Inverse of [`patchify`] on plain tensors.
pub fn unpatchify<T: Real>(patches: &Tensor<T>, h: usize, w: usize, p: usize) -> Result<Tensor<T>> {
    let c = 3;
    if patches.rows() != (h / p) * (w / p) || patches.cols() != p * p * c {
        return Err(Error::shape(
            "unpatchify",
            format!("{:?} for {h}x{w} p={p}", patches.shape()),
        ));
    }
    let bw = w / p;
    let mut out = vec![T::zero(); h * w * c];
    for (k, row) in patches.data().chunks(p * p * c).enumerate() {
        let (bi, bj) = (k / bw, k % bw);
        for r in 0..p {
            for s in 0..p {
                let dst = ((bi * p + r) * w + bj * p + s) * c;
                let src = (r * p + s) * c;
                out[dst..dst + c].copy_from_slice(&row[src..src + c]);
            }
        }
    }
    Tensor::new(&[h, w, c], out)
}

/// Bilinear resize of a single-channel `[h, w]` map to `[oh, ow]`.
pub fn bilinear_resize<T: Real>(g: &mut Graph<T>, m: Var, oh: usize, ow: usize) -> Result<Var> {
    let shape = g.shape(m).to_vec();
    if shape.len() != 2 {
        return Err(Error::invalid(format!("bilinear_resize expects [h, w], got {shape:?}")));
    }
    let flat = g.reshape(m, &[shape[0] * shape[1], 1])?;
    let r = g.resize(flat, shape[0], shape[1], oh, ow)?;
    g.reshape(r, &[oh, ow])
}
