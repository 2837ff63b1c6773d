//! Training and evaluation loops.
//!
//! Training uses batch size one. Sample order is a fresh permutation per
//! epoch derived from the run seed and the epoch index, so a run resumed
//! from a checkpoint visits the same samples as an uninterrupted one.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::ReferringSample;
use crate::error::{Error, Result};
use crate::metrics::{binarize, evaluate_overlaps, MetricReport, Overlap};
use crate::model::{Model, ModelInput};
use crate::nn::Session;
use crate::optim::AdamW;
use crate::tensor::Real;
use crate::union_encoder::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub ce: f64,
    pub dice: f64,
    pub tbl: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleResult {
    pub id: String,
    pub overlap: Overlap,
    pub pred: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: MetricReport,
    pub samples: Vec<SampleResult>,
}

impl EvalOutcome {
    /// `id,iou,intersection,union` rows.
    pub fn csv(&self) -> String {
        let mut s = String::from("id,iou,intersection,union\n");
        for r in &self.samples {
            s.push_str(&format!(
                "{},{:.6},{},{}\n",
                r.id,
                r.overlap.iou(),
                r.overlap.inter,
                r.overlap.union
            ));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<LossRecord>,
    pub checkpoint: Checkpoint,
    pub train_eval: EvalOutcome,
}

pub fn load_vocab(cfg: &RunConfig) -> Result<Vocab> {
    if cfg.vocab.is_empty() {
        Ok(Vocab::builtin())
    } else {
        Vocab::load(Path::new(&cfg.vocab))
    }
}

pub fn build_model<T: Real>(cfg: &RunConfig) -> Result<Model<T>> {
    cfg.validate()?;
    Model::new(cfg.model_config(), load_vocab(cfg)?, cfg.seed)
}

/// Index of the sample visited at `step`.
pub fn sample_index(seed: u64, n: usize, step: usize) -> usize {
    let epoch = (step / n) as u64;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f72_6465_7200_0000 ^ epoch);
    order.shuffle(&mut rng);
    order[step % n]
}

pub fn evaluate_model<T: Real>(model: &Model<T>, samples: &[ReferringSample]) -> Result<EvalOutcome> {
    let mut results = Vec::with_capacity(samples.len());
    for smp in samples {
        let mut input = model.prepare(smp)?;
        input.gt = None;
        let mut s = Session::new(&model.store);
        let (fwd, _) = model.run(&mut s, &input)?;
        let pred = binarize(s.g.value(fwd.logits).data());
        let overlap = Overlap::of(&pred, &smp.mask)?;
        results.push(SampleResult {
            id: smp.id.clone(),
            overlap,
            pred,
        });
    }
    let overlaps: Vec<Overlap> = results.iter().map(|r| r.overlap).collect();
    Ok(EvalOutcome {
        report: evaluate_overlaps(&overlaps)?,
        samples: results,
    })
}

fn dump_nonfinite<T: Real>(
    out: Option<&Path>,
    step: usize,
    sample: &ReferringSample,
    rec: &LossRecord,
    model: &Model<T>,
) -> Error {
    let norms: Vec<(String, f64)> = model
        .store
        .entries()
        .iter()
        .map(|e| {
            let n = e.value.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            (e.name.clone(), n)
        })
        .collect();
    let detail = format!(
        "sample {} ({:?}): ce={} dice={} tbl={} total={}",
        sample.id, sample.expression, rec.ce, rec.dice, rec.tbl, rec.total
    );
    if let Some(dir) = out {
        let dump = serde_json::json!({
            "step": step,
            "sample": sample.id,
            "expression": sample.expression,
            "loss": rec,
            "param_norms": norms,
        });
        let path = dir.join("nonfinite_dump.json");
        let _ = std::fs::write(&path, serde_json::to_vec_pretty(&dump).unwrap_or_default());
    }
    Error::NonFinite { step, detail }
}

/// Train on `samples` for `cfg.train.steps` updates. With `out`, the loss
/// log, checkpoints and training-set report are written there.
pub fn train<T: Real>(
    cfg: &RunConfig,
    samples: &[ReferringSample],
    resume: Option<&Checkpoint>,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    let mut model = build_model::<T>(cfg)?;
    let mut opt = AdamW::new(cfg.optim.clone(), &model.store, cfg.train.steps);
    if let Some(ck) = resume {
        if ck.header.config_hash != cfg.hash() {
            return Err(Error::Config(
                "checkpoint was written with a different configuration".into(),
            ));
        }
        ck.restore_params(&mut model.store)?;
        ck.restore_optimizer(&mut opt)?;
    }
    let inputs: Vec<ModelInput<T>> = samples.iter().map(|s| model.prepare(s)).collect::<Result<_>>()?;

    let mut log_file = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("loss.jsonl");
            Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };

    let mut log = Vec::new();
    while opt.step < cfg.train.steps {
        let step = opt.step;
        let idx = sample_index(cfg.seed, samples.len(), step);
        let (rec, grads) = {
            let mut s = Session::new(&model.store);
            let (_, loss) = model.run(&mut s, &inputs[idx])?;
            let loss = loss.expect("training inputs carry ground truth");
            let v = |x| s.g.value(x).data()[0].as_f64();
            let rec = LossRecord {
                step,
                ce: v(loss.ce),
                dice: v(loss.dice),
                tbl: v(loss.tbl),
                total: v(loss.total),
            };
            if ![rec.ce, rec.dice, rec.tbl, rec.total].iter().all(|x| x.is_finite()) {
                return Err(dump_nonfinite(out, step, &samples[idx], &rec, &model));
            }
            s.g.backward(loss.total)?;
            (rec, s.param_grads())
        };
        opt.update(&mut model.store, &grads)?;
        if let Some((f, p)) = log_file.as_mut() {
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(&*p, e))?;
        }
        log.push(rec);
        if let Some(dir) = out {
            let every = cfg.train.checkpoint_every;
            if every > 0 && opt.step % every == 0 && opt.step < cfg.train.steps {
                Checkpoint::capture(cfg, &model.store, &opt)
                    .save(&dir.join(format!("checkpoint_{:06}.bin", opt.step)))?;
            }
        }
    }

    let checkpoint = Checkpoint::capture(cfg, &model.store, &opt);
    let train_eval = evaluate_model(&model, samples)?;
    if let Some(dir) = out {
        checkpoint.save(&dir.join("checkpoint.bin"))?;
        write_report(dir, &train_eval, "train_")?;
        let p = dir.join("config.txt");
        std::fs::write(&p, cfg.to_text()).map_err(|e| Error::io(&p, e))?;
    }
    Ok(TrainOutcome {
        log,
        checkpoint,
        train_eval,
    })
}

/// Write `<prefix>report.json`, `<prefix>report.txt` and
/// `<prefix>per_sample.csv` into `dir`.
pub fn write_report(dir: &Path, e: &EvalOutcome, prefix: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
    let files = [
        (
            format!("{prefix}report.json"),
            serde_json::to_string_pretty(&e.report).expect("report serializes") + "\n",
        ),
        (format!("{prefix}report.txt"), e.report.to_string()),
        (format!("{prefix}per_sample.csv"), e.csv()),
    ];
    for (name, body) in files {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|err| Error::io(&p, err))?;
    }
    Ok(())
}

/// Evaluate a checkpoint. The model is rebuilt from the configuration
/// stored in the checkpoint unless `cfg` is given.
pub fn eval_checkpoint<T: Real>(
    ck: &Checkpoint,
    cfg: Option<&RunConfig>,
    samples: &[ReferringSample],
) -> Result<EvalOutcome> {
    let cfg = match cfg {
        Some(c) => c.clone(),
        None => ck.config()?,
    };
    let mut model = build_model::<T>(&cfg)?;
    ck.restore_params(&mut model.store)?;
    evaluate_model(&model, samples)
}

/// Image with the prediction tinted red and ground-truth pixels outside the
/// prediction tinted green.
pub fn overlay(sample: &ReferringSample, pred: &[u8]) -> Vec<u8> {
    let mut img = sample.image.clone();
    for (i, px) in img.chunks_mut(3).enumerate() {
        let tint = match (pred[i], sample.mask[i]) {
            (1, _) => Some([255u16, 40, 40]),
            (0, 1) => Some([40, 255, 40]),
            _ => None,
        };
        if let Some(t) = tint {
            for c in 0..3 {
                px[c] = ((px[c] as u16 + t[c]) / 2) as u8;
            }
        }
    }
    img
}
