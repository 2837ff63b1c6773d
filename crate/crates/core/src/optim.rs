//! AdamW with decoupled weight decay and per-group learning rates.

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: OptimConfig,
    /// Total planned steps; the last `decay_steps` run at the decayed rate.
    pub total_steps: usize,
    /// Number of updates applied so far.
    pub step: usize,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: OptimConfig, store: &ParamStore<T>, total_steps: usize) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            cfg,
            total_steps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Learning rate of `group` for the update with zero-based index `step`.
    pub fn lr(&self, group: ParamGroup, step: usize) -> f64 {
        let base = match group {
            ParamGroup::Backbone => self.cfg.lr,
            ParamGroup::Fusion => self.cfg.lr_fusion,
        };
        let warm = self.cfg.warmup_steps;
        let ramp = if step < warm {
            (step + 1) as f64 / (warm + 1) as f64
        } else {
            1.0
        };
        if step + self.cfg.decay_steps >= self.total_steps {
            base * self.cfg.decay_factor * ramp
        } else {
            base * ramp
        }
    }

    /// Factor bringing the global norm of trainable gradients within
    /// `clip_norm`.
    pub fn clip_scale(&self, store: &ParamStore<T>, grads: &[Option<Tensor<T>>]) -> f64 {
        if self.cfg.clip_norm <= 0.0 {
            return 1.0;
        }
        let sq: f64 = store
            .entries()
            .iter()
            .zip(grads)
            .filter(|(e, _)| !e.frozen)
            .filter_map(|(_, g)| g.as_ref())
            .flat_map(|g| g.data().iter().map(|x| x.as_f64() * x.as_f64()))
            .sum();
        let norm = sq.sqrt();
        if norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        }
    }

    /// Apply one update. Parameters that are frozen or have no gradient
    /// are left untouched.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::invalid("gradient list does not match the parameter store"));
        }
        let t = (self.step + 1) as i32;
        let b1 = T::of(self.cfg.beta1);
        let b2 = T::of(self.cfg.beta2);
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let eps = T::of(self.cfg.eps);
        let one = T::one();
        let lrs = [
            T::of(self.lr(ParamGroup::Backbone, self.step)),
            T::of(self.lr(ParamGroup::Fusion, self.step)),
        ];
        let wd = T::of(self.cfg.weight_decay);
        let scale = T::of(self.clip_scale(store, grads));
        for (i, (entry, g)) in store.values_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if entry.frozen {
                continue;
            }
            let lr = lrs[(entry.group == ParamGroup::Fusion) as usize];
            let decay = one - lr * wd;
            let p = entry.value.data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k] * scale;
                m[k] = b1 * m[k] + (one - b1) * gk;
                v[k] = b2 * v[k] + (one - b2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] = p[k] * decay - lr * mh / (vh.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}
