//! Referring-segmentation metrics on binary masks: per-sample IoU,
//! precision at IoU thresholds 0.5..0.9 (strict `IoU > t`), mIoU and oIoU,
//! all reported in percent.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Intersection and union pixel counts of one prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Overlap {
    pub inter: u64,
    pub union: u64,
}

impl Overlap {
    pub fn of(pred: &[u8], gt: &[u8]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::invalid(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let mut o = Overlap { inter: 0, union: 0 };
        for (&p, &g) in pred.iter().zip(gt) {
            if p > 1 || g > 1 {
                return Err(Error::invalid(format!("mask value {} is not binary", p.max(g))));
            }
            o.inter += (p & g) as u64;
            o.union += (p | g) as u64;
        }
        Ok(o)
    }

    /// Empty union counts as a perfect match.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.inter as f64 / self.union as f64
        }
    }
}

pub fn iou(pred: &[u8], gt: &[u8]) -> Result<f64> {
    Ok(Overlap::of(pred, gt)?.iou())
}

/// Binarize logits at zero, i.e. probability 0.5.
pub fn binarize<T: crate::tensor::Real>(logits: &[T]) -> Vec<u8> {
    logits.iter().map(|&v| (v > T::zero()) as u8).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "pr@0.5")]
    pub pr50: f64,
    #[serde(rename = "pr@0.6")]
    pub pr60: f64,
    #[serde(rename = "pr@0.7")]
    pub pr70: f64,
    #[serde(rename = "pr@0.8")]
    pub pr80: f64,
    #[serde(rename = "pr@0.9")]
    pub pr90: f64,
    pub miou: f64,
    pub oiou: f64,
    pub n: usize,
}

impl MetricReport {
    /// `(threshold, percentage)` pairs in increasing threshold order.
    pub fn pr(&self) -> [(f64, f64); 5] {
        let v = [self.pr50, self.pr60, self.pr70, self.pr80, self.pr90];
        std::array::from_fn(|i| (THRESHOLDS[i], v[i]))
    }

    pub fn is_monotone(&self) -> bool {
        let p = self.pr();
        p.windows(2).all(|w| w[1].1 <= w[0].1)
    }

    pub const HEADER: [&'static str; 7] = ["Pr@0.5", "Pr@0.6", "Pr@0.7", "Pr@0.8", "Pr@0.9", "oIoU", "mIoU"];

    pub fn row(&self) -> [f64; 7] {
        [
            self.pr50, self.pr60, self.pr70, self.pr80, self.pr90, self.oiou, self.miou,
        ]
    }
}

/// Aligned text table with columns Pr@0.5..Pr@0.9, oIoU, mIoU.
impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for h in Self::HEADER {
            write!(f, "{h:>8}")?;
        }
        writeln!(f)?;
        for v in self.row() {
            write!(f, "{v:>8.2}")?;
        }
        writeln!(f)
    }
}

pub fn evaluate_overlaps(samples: &[Overlap]) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty sample list"));
    }
    let n = samples.len();
    let ious: Vec<f64> = samples.iter().map(Overlap::iou).collect();
    let pr = |t: f64| 100.0 * ious.iter().filter(|&&v| v > t).count() as f64 / n as f64;
    let inter: u64 = samples.iter().map(|o| o.inter).sum();
    let union: u64 = samples.iter().map(|o| o.union).sum();
    let oiou = if union == 0 {
        100.0
    } else {
        100.0 * inter as f64 / union as f64
    };
    Ok(MetricReport {
        pr50: pr(0.5),
        pr60: pr(0.6),
        pr70: pr(0.7),
        pr80: pr(0.8),
        pr90: pr(0.9),
        miou: 100.0 * ious.iter().sum::<f64>() / n as f64,
        oiou,
        n,
    })
}

pub fn evaluate(samples: &[(&[u8], &[u8])]) -> Result<MetricReport> {
    let overlaps = samples
        .iter()
        .map(|(p, g)| Overlap::of(p, g))
        .collect::<Result<Vec<_>>>()?;
    evaluate_overlaps(&overlaps)
}
