use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use rs2sam::ablate::{ablate, standard_rows};
use rs2sam::checkpoint::Checkpoint;
use rs2sam::config::{Precision, RunConfig};
use rs2sam::data::pnm::write_ppm;
use rs2sam::data::{generate, read_dataset, write_dataset};
use rs2sam::gradcheck::{gradcheck, toy_config, GradcheckOptions, Module};
use rs2sam::harness::{eval_checkpoint, overlay, train, write_report, EvalOutcome};

/// Referring segmentation of synthetic remote-sensing scenes.
#[derive(Parser)]
#[command(name = "rs2sam", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set bhfm.variant=uni`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, default: RunConfig) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => default,
        };
        for pair in &self.set {
            cfg.set_pair(pair)?;
        }
        if verify_mode() {
            cfg.precision = Precision::F64;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and write the loss log, checkpoints and a training-set report.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for report.json, report.txt and per_sample.csv.
        #[arg(long, default_value = "eval")]
        out: PathBuf,
        /// Also write prediction overlays here.
        #[arg(long)]
        overlay: Option<PathBuf>,
        /// Configuration to rebuild the model with instead of the one stored
        /// in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long)]
        tolerance: Option<f64>,
        /// Compute analytic gradients in f32.
        #[arg(long)]
        float32: bool,
        /// Restrict to these modules. Repeatable.
        #[arg(long)]
        module: Vec<String>,
        /// Write the report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Perturb one module's analytic gradients (self-test of the checker).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and evaluate every ablation row.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Evaluation split; defaults to the training data.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn verify_mode() -> bool {
    std::env::var("RS2_VERIFY").is_ok_and(|v| v == "1")
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn finish_eval(e: &EvalOutcome, out: &Path) -> Result<()> {
    write_report(out, e, "")?;
    print!("{}", e.report);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Synth { n, seed, out, cfg } => {
            let cfg = cfg.load(RunConfig::default())?;
            let samples = generate(n, seed, &cfg.data)?;
            write_dataset(&samples, &out)?;
            println!("wrote {} samples to {}", samples.len(), out.display());
        }
        Cmd::Train { data, out, resume, cfg } => {
            let cfg = cfg.load(RunConfig::default())?;
            let samples = read_dataset(&data)?;
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let r = match cfg.precision {
                Precision::F32 => train::<f32>(&cfg, &samples, resume.as_ref(), Some(&out))?,
                Precision::F64 => train::<f64>(&cfg, &samples, resume.as_ref(), Some(&out))?,
            };
            if let Some(last) = r.log.last() {
                println!(
                    "step {} total {:.6} (ce {:.6} dice {:.6} tbl {:.6})",
                    last.step, last.total, last.ce, last.dice, last.tbl
                );
            }
            println!("training set:");
            print!("{}", r.train_eval.report);
        }
        Cmd::Eval {
            checkpoint,
            data,
            out,
            overlay: overlay_dir,
            config,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => ck.config()?,
            };
            let samples = read_dataset(&data)?;
            let precision = if verify_mode() { Precision::F64 } else { cfg.precision };
            let e = match precision {
                Precision::F32 => eval_checkpoint::<f32>(&ck, Some(&cfg), &samples)?,
                Precision::F64 => eval_checkpoint::<f64>(&ck, Some(&cfg), &samples)?,
            };
            finish_eval(&e, &out)?;
            if let Some(dir) = overlay_dir {
                std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                for (s, r) in samples.iter().zip(&e.samples) {
                    let img = overlay(s, &r.pred);
                    write_ppm(&dir.join(format!("{}.ppm", s.id)), s.width, s.height, &img)?;
                }
            }
        }
        Cmd::Gradcheck {
            tolerance,
            float32,
            module,
            json,
            corrupt,
            cfg,
        } => {
            let mut cfg = cfg.load(toy_config())?;
            // Finite differences always run in f64.
            cfg.precision = Precision::F64;
            let mut opts = GradcheckOptions::from_config(&cfg);
            if let Some(t) = tolerance {
                opts.tolerance = t;
            }
            opts.float32 = float32;
            if !module.is_empty() {
                opts.modules = module.iter().map(|m| m.parse()).collect::<Result<Vec<Module>, _>>()?;
            }
            opts.corrupt = corrupt.map(|m| m.parse()).transpose()?;
            let report = gradcheck(&cfg, &opts)?;
            print!("{report}");
            if let Some(p) = json {
                write(&p, serde_json::to_string_pretty(&report)? + "\n")?;
            }
            return Ok(report.passed());
        }
        Cmd::Ablate {
            data,
            eval_data,
            out,
            cfg,
        } => {
            let cfg = cfg.load(RunConfig::default())?;
            let train_set = read_dataset(&data)?;
            let eval_set = match eval_data {
                Some(p) => read_dataset(&p)?,
                None => train_set.clone(),
            };
            let rows = standard_rows();
            let table = match cfg.precision {
                Precision::F32 => ablate::<f32>(&cfg, &rows, &train_set, &eval_set)?,
                Precision::F64 => ablate::<f64>(&cfg, &rows, &train_set, &eval_set)?,
            };
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write(&out.join("ablation.json"), serde_json::to_string_pretty(&table)? + "\n")?;
            write(&out.join("ablation.txt"), table.to_string())?;
            write(&out.join("config.txt"), cfg.to_text())?;
            print!("{table}");
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
