//! Referring samples, the synthetic scene generator and on-disk datasets.
//!
//! A dataset directory holds `images/<id>.ppm`, `masks/<id>.pgm` (0/255) and
//! `manifest.jsonl` with one `{id, image, mask, expression, seed}` object per
//! line.

pub mod pnm;
pub mod synth;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use synth::{synth_scene, SceneSpec, SynthConfig};

/// One (image, expression, mask) triple. Pixels are stored as bytes so that
/// writing and reading a dataset is exact.
#[derive(Clone, Debug)]
pub struct ReferringSample {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub image: Vec<u8>,
    /// 0 or 1 per pixel.
    pub mask: Vec<u8>,
    pub expression: String,
    pub seed: u64,
    /// Scene description; only present on freshly generated samples.
    pub meta: Option<SceneSpec>,
}

/// Identity ignores `meta`, which is not persisted.
impl PartialEq for ReferringSample {
    fn eq(&self, o: &Self) -> bool {
        self.id == o.id
            && self.width == o.width
            && self.height == o.height
            && self.image == o.image
            && self.mask == o.mask
            && self.expression == o.expression
            && self.seed == o.seed
    }
}

impl ReferringSample {
    /// `[H, W, 3]` with values in `[0, 1]`.
    pub fn image_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height, self.width, 3], |i| T::of(self.image[i] as f64 / 255.0))
    }

    /// `[H, W]` with values in `{0, 1}`.
    pub fn mask_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height, self.width], |i| T::of(self.mask[i] as f64))
    }

    pub fn mask_area(&self) -> usize {
        self.mask.iter().map(|&m| m as usize).sum()
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    image: String,
    mask: String,
    expression: String,
    seed: u64,
}

pub fn sample_id(i: usize) -> String {
    format!("{i:05}")
}

/// Generate `n` samples with seeds `seed0, seed0 + 1, ...`.
pub fn generate(n: usize, seed0: u64, cfg: &SynthConfig) -> Result<Vec<ReferringSample>> {
    (0..n)
        .map(|i| synth_scene(seed0.wrapping_add(i as u64), &sample_id(i), cfg))
        .collect()
}

pub fn write_dataset(samples: &[ReferringSample], dir: &Path) -> Result<()> {
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(&dir.join("images"))?;
    mkdir(&dir.join("masks"))?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = Vec::new();
    for s in samples {
        let line = ManifestLine {
            id: s.id.clone(),
            image: format!("images/{}.ppm", s.id),
            mask: format!("masks/{}.pgm", s.id),
            expression: s.expression.clone(),
            seed: s.seed,
        };
        pnm::write_ppm(&dir.join(&line.image), s.width, s.height, &s.image)?;
        let gray: Vec<u8> = s.mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
        pnm::write_pgm(&dir.join(&line.mask), s.width, s.height, &gray)?;
        serde_json::to_writer(&mut manifest, &line).expect("manifest line serializes");
        manifest.push(b'\n');
    }
    let mut f = std::fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    f.write_all(&manifest).map_err(|e| Error::io(&manifest_path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Vec<ReferringSample>> {
    let manifest_path = dir.join("manifest.jsonl");
    let f = std::fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine =
            serde_json::from_str(&line).map_err(|e| Error::format(&manifest_path, format!("line {}: {e}", i + 1)))?;
        let img_path = dir.join(&m.image);
        let mask_path = dir.join(&m.mask);
        let (w, h, image) = pnm::read_ppm(&img_path)?;
        let (mw, mh, gray) = pnm::read_pgm(&mask_path)?;
        if (mw, mh) != (w, h) {
            return Err(Error::format(
                &mask_path,
                format!("mask is {mw}x{mh} but image is {w}x{h}"),
            ));
        }
        let mask = gray
            .iter()
            .map(|&g| match g {
                0 => Ok(0),
                255 => Ok(1),
                v => Err(Error::format(&mask_path, format!("mask value {v} is not 0 or 255"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        out.push(ReferringSample {
            id: m.id,
            width: w,
            height: h,
            image,
            mask,
            expression: m.expression,
            seed: m.seed,
            meta: None,
        });
    }
    if out.is_empty() {
        return Err(Error::format(&manifest_path, "manifest lists no samples"));
    }
    Ok(out)
}
