//! Binary checkpoints: parameters keyed by path, AdamW moments, step count
//! and the run configuration.
//!
//! Layout: the magic line `RS2CKPT1\n`, a little-endian `u64` header length,
//! a JSON header, then for every parameter in header order its values,
//! first moments and second moments as little-endian `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::AdamW;
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8] = b"RS2CKPT1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub step: usize,
    pub config_hash: String,
    pub dtype: String,
    pub config: String,
    pub params: Vec<TensorInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub values: Vec<Vec<f64>>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn capture<T: Real>(cfg: &RunConfig, store: &ParamStore<T>, opt: &AdamW<T>) -> Self {
        let params = store
            .entries()
            .iter()
            .map(|e| TensorInfo {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
            })
            .collect();
        Self {
            header: Header {
                step: opt.step,
                config_hash: cfg.hash(),
                dtype: T::NAME.to_string(),
                config: cfg.to_text(),
                params,
            },
            values: store.entries().iter().map(|e| e.value.to_f64()).collect(),
            m: opt.m.iter().map(Tensor::to_f64).collect(),
            v: opt.v.iter().map(Tensor::to_f64).collect(),
        }
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::parse(&self.header.config)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for i in 0..self.values.len() {
            for part in [&self.values[i], &self.m[i], &self.v[i]] {
                for x in part.iter() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let rest = bytes.strip_prefix(MAGIC).ok_or("not a checkpoint (bad magic)")?;
        if rest.len() < 8 {
            return Err("truncated header length".into());
        }
        let hlen = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
        let rest = &rest[8..];
        if rest.len() < hlen {
            return Err("truncated header".into());
        }
        let header: Header = serde_json::from_slice(&rest[..hlen]).map_err(|e| format!("bad header: {e}"))?;
        let mut data = rest[hlen..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let total: usize = header
            .params
            .iter()
            .map(|p| 3 * p.shape.iter().product::<usize>())
            .sum();
        if rest.len() - hlen != total * 8 {
            return Err(format!(
                "expected {} data bytes, found {}",
                total * 8,
                rest.len() - hlen
            ));
        }
        let (mut values, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
        for p in &header.params {
            let n: usize = p.shape.iter().product();
            values.push(data.by_ref().take(n).collect());
            m.push(data.by_ref().take(n).collect());
            v.push(data.by_ref().take(n).collect());
        }
        Ok(Self { header, values, m, v })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| Error::format(path, m))
    }

    /// Copy parameters into `store`, checking names and shapes.
    pub fn restore_params<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.header.params.len() != store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameter tensors, model has {}",
                self.header.params.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for ((info, vals), id) in self.header.params.iter().zip(&self.values).zip(ids) {
            let e = store.entry(id);
            if e.name != info.name || e.value.shape() != info.shape.as_slice() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                    info.name,
                    info.shape,
                    e.name,
                    e.value.shape()
                )));
            }
            store.set(id, Tensor::from_f64(&info.shape, vals)?)?;
        }
        Ok(())
    }

    pub fn restore_optimizer<T: Real>(&self, opt: &mut AdamW<T>) -> Result<()> {
        if opt.m.len() != self.m.len() {
            return Err(Error::Config("optimizer state size mismatch".into()));
        }
        for (i, info) in self.header.params.iter().enumerate() {
            opt.m[i] = Tensor::from_f64(&info.shape, &self.m[i])?;
            opt.v[i] = Tensor::from_f64(&info.shape, &self.v[i])?;
        }
        opt.step = self.header.step;
        Ok(())
    }
}
