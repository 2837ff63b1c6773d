//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Runs without the libtest harness so the lines always print.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::checks;
use rs2sam::ablate::standard_rows;
use rs2sam::config::RunConfig;
use rs2sam::data::generate;
use rs2sam::gradcheck::{gradcheck, toy_config, GradcheckOptions};
use rs2sam::harness::train;
use rs2sam::metrics::MetricReport;

const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const TRANSCRIPTION_TOL: f64 = 1e-10;
const TRANSCRIPTION_TRIALS: usize = 100;
const OVERFIT_MIOU: f64 = 90.0;
const OVERFIT_STEPS: usize = 300;
const TIME_LIMIT: Duration = Duration::from_secs(600);

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gradient_integrity() -> Outcome {
    let t = Instant::now();
    let cfg = toy_config();
    let mut opts = GradcheckOptions::from_config(&cfg);
    opts.tolerance = GRAD_TOL;
    opts.step = GRAD_STEP;
    let r = gradcheck(&cfg, &opts).expect("gradcheck runs");
    let worst = r.results.iter().map(|m| m.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<_> = r.results.iter().filter(|m| !m.pass).map(|m| m.module.clone()).collect();
    let el = t.elapsed();
    outcome(
        r.passed() && r.results.len() == 7 && el < TIME_LIMIT,
        format!(
            "{} modules, max rel err {worst:.2e} <= {GRAD_TOL:e} (fd step {GRAD_STEP:e}, f64), {:.1}s, failed {failed:?}",
            r.results.len(),
            el.as_secs_f64()
        ),
    )
}

fn transcriptions() -> Outcome {
    let b = common::bhfm_trials(TRANSCRIPTION_TRIALS);
    let m = common::mpg_trials(TRANSCRIPTION_TRIALS);
    let h = common::head_trials(TRANSCRIPTION_TRIALS);
    outcome(
        b.max(m).max(h) <= TRANSCRIPTION_TOL,
        format!(
            "max abs diff over {TRANSCRIPTION_TRIALS} trials: bhfm {b:.1e}, mpg {m:.1e}, decode_mask {h:.1e} (tol {TRANSCRIPTION_TOL:e})"
        ),
    )
}

fn loss_identities() -> Outcome {
    let r = checks::loss_identities(100);
    let eps = rs2sam::losses::DICE_EPS;
    outcome(
        r.tbl_same == 0.0
            && r.tbl_constant == 0.0
            && r.dice_self <= 2.0 * eps
            && r.ce_zero_err <= 1e-12
            && r.total_err <= 1e-12,
        format!(
            "tbl(M,M)={:e}, tbl(const,const)={:e}, dice(gt,gt)={:.1e} <= {:e}, |ce(0)-ln2|={:.1e}, |total-manual|={:.1e}",
            r.tbl_same,
            r.tbl_constant,
            r.dice_self,
            2.0 * eps,
            r.ce_zero_err,
            r.total_err
        ),
    )
}

fn alpha_degeneracy() -> Outcome {
    let (fixed, layers) = checks::alpha_t_text_fixed(3);
    let (analytic, numeric, tensors) = checks::alpha_i_gate_gradient();
    outcome(
        fixed && layers == 4 && analytic == 0.0 && numeric <= 1e-8,
        format!(
            "alpha_t=0 text bitwise fixed through {layers} layers: {fixed}; alpha_i=0 gate grads over {tensors} tensors: analytic {analytic:e}, fd {numeric:.1e} <= 1e-8"
        ),
    )
}

fn metric_oracle() -> Outcome {
    let r = checks::metric_oracle(200);
    outcome(
        r.iou_mismatches == 0 && r.report_mismatches == 0 && r.non_monotone == 0,
        format!(
            "{} pairs: iou mismatches {}, report mismatches {}/{}, non-monotone Pr {}",
            r.pairs, r.iou_mismatches, r.report_mismatches, r.reports, r.non_monotone
        ),
    )
}

fn valid_report(r: &MetricReport, n: usize) -> bool {
    r.n == n && r.is_monotone() && r.row().iter().all(|v| v.is_finite() && (0.0..=100.0).contains(v))
}

fn overfit() -> Outcome {
    let cfg = RunConfig::default();
    let data = generate(16, 7, &cfg.data).expect("synthetic data");
    let t = Instant::now();
    let full = train::<f32>(&cfg, &data, None, None).expect("full pipeline trains");
    let el_full = t.elapsed();

    let mut bare = cfg.clone();
    bare.set("bhfm.variant", "off").unwrap();
    bare.set("mpg.enabled", "false").unwrap();
    let t = Instant::now();
    let plain = train::<f32>(&bare, &data, None, None).expect("plain pipeline trains");
    let el_plain = t.elapsed();

    let miou = full.train_eval.report.miou;
    outcome(
        cfg.train.steps == OVERFIT_STEPS
            && miou >= OVERFIT_MIOU
            && el_full < TIME_LIMIT
            && valid_report(&plain.train_eval.report, 16)
            && el_plain < TIME_LIMIT,
        format!(
            "16 samples 128x128, {OVERFIT_STEPS} steps: full mIoU {miou:.2} >= {OVERFIT_MIOU} in {:.0}s; without BHFM/MPG valid report (mIoU {:.2}) in {:.0}s",
            el_full.as_secs_f64(),
            plain.train_eval.report.miou,
            el_plain.as_secs_f64()
        ),
    )
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rs2sam"));
    c.env_remove("RS2_VERIFY");
    c
}

fn run_ok(mut c: Command) -> String {
    let o = c.output().expect("binary runs");
    assert!(
        o.status.success(),
        "{:?} failed: {}{}",
        c,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn toy_file(dir: &Path, extra: &[(&str, &str)]) -> PathBuf {
    let mut cfg = toy_config();
    for (k, v) in extra {
        cfg.set(k, v).unwrap();
    }
    let p = dir.join("toy.cfg");
    std::fs::write(&p, cfg.to_text()).unwrap();
    p
}

fn ablation_matches_individual_runs() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Long enough that the rows separate.
    let steps = "100";
    let cfg = toy_file(d, &[("ablate.steps", steps)]);
    let data = d.join("data");
    let mut c = bin();
    c.args(["synth", "--n", "4", "--seed", "11", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&data);
    run_ok(c);
    let mut c = bin();
    c.args(["ablate", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(d.join("ab"));
    run_ok(c);
    let table: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("ab/ablation.json")).unwrap()).unwrap();
    let rows = table["rows"].as_array().unwrap();

    let names: Vec<&str> = rows.iter().map(|r| r["name"].as_str().unwrap()).collect();
    let required = [
        "baseline",
        "+L_tbl",
        "+L_tbl+MPG",
        "+L_tbl+BHFM",
        "full",
        "linear",
        "uni",
        "bi",
        "w/o MHCA",
        "w MHCA",
        "w/o BC",
        "w/o BL",
    ];
    let missing: Vec<_> = required.iter().filter(|n| !names.contains(n)).collect();
    let mut distinct: Vec<String> = rows.iter().map(|r| r["report"]["miou"].to_string()).collect();
    distinct.sort();
    distinct.dedup();

    let mut mismatched = Vec::new();
    for (i, spec) in standard_rows().iter().enumerate() {
        let run_dir = d.join(format!("row{i}"));
        let mut c = bin();
        c.args(["train", "--config"])
            .arg(&cfg)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&run_dir);
        for (k, v) in spec.overrides {
            c.arg("--set").arg(format!("{k}={v}"));
        }
        c.arg("--set").arg(format!("train.steps={steps}"));
        run_ok(c);
        let mut c = bin();
        c.arg("eval")
            .arg("--checkpoint")
            .arg(run_dir.join("checkpoint.bin"))
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(run_dir.join("eval"));
        run_ok(c);
        let single: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(run_dir.join("eval/report.json")).unwrap()).unwrap();
        if rows[i]["name"] != spec.name || rows[i]["report"] != single {
            mismatched.push(spec.name);
        }
    }
    outcome(
        missing.is_empty() && mismatched.is_empty() && rows.len() == standard_rows().len(),
        format!(
            "{} rows ({} distinct mIoU values, {steps} steps); missing {missing:?}; cells differing from individual train+eval runs {mismatched:?}",
            rows.len(),
            distinct.len()
        ),
    )
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in std::fs::read_dir(&p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Every command once under RS2_VERIFY=1, writing into `root`; returns the
/// concatenated stdout with `root` masked.
fn verify_session(root: &Path) -> String {
    std::fs::create_dir_all(root).unwrap();
    toy_file(
        root,
        &[
            ("train.steps", "4"),
            ("train.checkpoint_every", "2"),
            ("ablate.steps", "2"),
        ],
    );
    let cmds: Vec<Vec<String>> = vec![
        vec![
            "synth", "--n", "3", "--seed", "5", "--out", "data", "--config", "toy.cfg",
        ],
        vec!["train", "--data", "data", "--out", "run", "--config", "toy.cfg"],
        vec![
            "eval",
            "--checkpoint",
            "run/checkpoint.bin",
            "--data",
            "data",
            "--out",
            "eval",
            "--overlay",
            "ov",
        ],
        vec!["gradcheck", "--json", "gc.json"],
        vec!["ablate", "--data", "data", "--out", "ab", "--config", "toy.cfg"],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(String::from).collect())
    .collect();
    let mut log = String::new();
    for args in cmds {
        let mut c = bin();
        c.current_dir(root).env("RS2_VERIFY", "1").args(&args);
        log.push_str(&run_ok(c));
    }
    log.replace(root.to_str().unwrap(), "<root>")
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out_a = verify_session(&a);
    let out_b = verify_session(&b);
    let (ta, tb) = (tree(&a), tree(&b));
    let differing: Vec<_> = ta
        .keys()
        .chain(tb.keys())
        .filter(|k| ta.get(*k) != tb.get(*k))
        .cloned()
        .collect();
    let checkpoints = ta.keys().filter(|k| k.ends_with(".bin")).count();
    outcome(
        differing.is_empty() && out_a == out_b && checkpoints >= 2,
        format!(
            "synth/train/eval/gradcheck/ablate twice: {} files ({checkpoints} checkpoints) compared, differing {differing:?}, stdout identical {}",
            ta.len(),
            out_a == out_b
        ),
    )
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [Criterion; 8] = [
        ("gradient integrity", gradient_integrity),
        ("transcription oracles", transcriptions),
        ("loss identities", loss_identities),
        ("alpha degeneracy", alpha_degeneracy),
        ("metric oracle", metric_oracle),
        ("overfit", overfit),
        ("ablation", ablation_matches_individual_runs),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = f();
        failed += !o.pass as usize;
        println!(
            "[{}] {}. {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
