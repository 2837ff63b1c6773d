use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rs2sam::gradcheck::toy_config;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rs2sam"));
    c.env_remove("RS2_VERIFY");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed:\n{}", text(&o));
    text(&o)
}

/// Writes the small gradcheck configuration (32x32 scenes) to `dir`.
fn toy_config_file(dir: &Path, extra: &[(&str, &str)]) -> PathBuf {
    let mut cfg = toy_config();
    for (k, v) in extra {
        cfg.set(k, v).unwrap();
    }
    let p = dir.join(format!("toy{}.cfg", extra.len()));
    std::fs::write(&p, cfg.to_text()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy_data(dir: &Path, n: usize) -> PathBuf {
    let cfg = toy_config_file(dir, &[]);
    let out = dir.join("data");
    ok(&[
        "synth",
        "--n",
        &n.to_string(),
        "--seed",
        "3",
        "--out",
        s(&out),
        "--config",
        s(&cfg),
    ]);
    out
}

#[test]
fn synth_writes_pnm_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let msg = ok(&["synth", "--n", "16", "--seed", "7", "--out", s(&a)]);
    assert!(msg.contains("wrote 16 samples"), "{msg}");
    ok(&["synth", "--n", "16", "--seed", "7", "--out", s(&b)]);

    let manifest = std::fs::read_to_string(a.join("manifest.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = manifest.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 16);
    for (i, l) in lines.iter().enumerate() {
        let obj = l.as_object().unwrap();
        let mut keys: Vec<_> = obj.keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["expression", "id", "image", "mask", "seed"]);
        assert_eq!(obj["seed"], 7 + i as u64);
        let img = std::fs::read(a.join(obj["image"].as_str().unwrap())).unwrap();
        assert!(img.starts_with(b"P6\n128 128\n255\n"));
        let mask = std::fs::read(a.join(obj["mask"].as_str().unwrap())).unwrap();
        assert!(mask.starts_with(b"P5\n128 128\n255\n"));
        let body = &mask[mask.len() - 128 * 128..];
        assert!(body.iter().all(|&v| v == 0 || v == 255));
        assert!(body.contains(&255));
        let img_b = std::fs::read(b.join(obj["image"].as_str().unwrap())).unwrap();
        assert_eq!(img, img_b);
    }
    assert_eq!(manifest, std::fs::read_to_string(b.join("manifest.jsonl")).unwrap());
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--n", "1", "--out", s(dir.path()), "--set", "bhfm.varaint=bi"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("bhfm.varaint"), "{}", text(&o));

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "seed = 1\nloss.weird = 2\n").unwrap();
    let o = run(&["synth", "--n", "1", "--out", s(dir.path()), "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("loss.weird"), "{}", text(&o));
}

#[test]
fn exit_codes() {
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    let o = run(&["eval", "--checkpoint", "/nonexistent/ck.bin", "--data", "/nonexistent"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).starts_with("error:"), "{}", text(&o));
}

#[test]
fn train_eval_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_data(dir.path(), 3);
    let cfg = toy_config_file(dir.path(), &[("train.steps", "4")]);
    let out = dir.path().join("run");
    ok(&["train", "--data", s(&data), "--out", s(&out), "--config", s(&cfg)]);

    let log = std::fs::read_to_string(out.join("loss.jsonl")).unwrap();
    let recs: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 4);
    for (i, r) in recs.iter().enumerate() {
        let obj = r.as_object().unwrap();
        let mut keys: Vec<_> = obj.keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["ce", "dice", "step", "tbl", "total"]);
        assert_eq!(obj["step"], i);
        let total = obj["total"].as_f64().unwrap();
        let manual =
            obj["ce"].as_f64().unwrap() + 0.1 * obj["dice"].as_f64().unwrap() + 0.2 * obj["tbl"].as_f64().unwrap();
        assert!((total - manual).abs() < 1e-5 * manual.abs().max(1.0), "{r}");
    }

    let ev = dir.path().join("eval");
    let ov = dir.path().join("overlay");
    ok(&[
        "eval",
        "--checkpoint",
        s(&out.join("checkpoint.bin")),
        "--data",
        s(&data),
        "--out",
        s(&ev),
        "--overlay",
        s(&ov),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    let mut keys: Vec<_> = report.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    assert_eq!(
        keys,
        ["miou", "n", "oiou", "pr@0.5", "pr@0.6", "pr@0.7", "pr@0.8", "pr@0.9"]
    );
    assert_eq!(report["n"], 3);

    let csv = std::fs::read_to_string(ev.join("per_sample.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 1 + 3);
    assert!(rows[0].starts_with("id,"));

    let overlays: Vec<_> = std::fs::read_dir(&ov).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(overlays.len(), 3);
    for p in overlays {
        assert!(
            std::fs::read(&p).unwrap().starts_with(b"P6\n32 32\n255\n"),
            "{}",
            p.display()
        );
    }

    // The training run's own report of the same data agrees with eval.
    let train_report = std::fs::read_to_string(out.join("train_report.json")).unwrap();
    assert_eq!(train_report, std::fs::read_to_string(ev.join("report.json")).unwrap());
}

#[test]
fn resume_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_data(dir.path(), 3);
    let cfg = toy_config_file(dir.path(), &[("train.steps", "6"), ("train.checkpoint_every", "3")]);
    let full = dir.path().join("full");
    let resumed = dir.path().join("resumed");
    ok(&["train", "--data", s(&data), "--out", s(&full), "--config", s(&cfg)]);
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&resumed),
        "--config",
        s(&cfg),
        "--resume",
        s(&full.join("checkpoint_000003.bin")),
    ]);
    let a = std::fs::read(full.join("checkpoint.bin")).unwrap();
    let b = std::fs::read(resumed.join("checkpoint.bin")).unwrap();
    assert!(a == b, "final checkpoints differ");
    let tail: Vec<String> = std::fs::read_to_string(full.join("loss.jsonl"))
        .unwrap()
        .lines()
        .skip(3)
        .map(String::from)
        .collect();
    let resumed_log: Vec<String> = std::fs::read_to_string(resumed.join("loss.jsonl"))
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(tail, resumed_log);

    // A different configuration refuses the checkpoint.
    let other = toy_config_file(
        dir.path(),
        &[("train.steps", "7"), ("train.checkpoint_every", "3"), ("seed", "9")],
    );
    let o = run(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&dir.path().join("x")),
        "--config",
        s(&other),
        "--resume",
        s(&full.join("checkpoint_000003.bin")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("different configuration"), "{}", text(&o));
}

#[test]
fn nonfinite_loss_aborts_with_dump() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_data(dir.path(), 2);
    let cfg = toy_config_file(
        dir.path(),
        &[("train.steps", "5"), ("optim.lr", "1e30"), ("optim.clip_norm", "0")],
    );
    let out = dir.path().join("run");
    let o = run(&["train", "--data", s(&data), "--out", s(&out), "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("non-finite loss"), "{}", text(&o));
    let dump: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("nonfinite_dump.json")).unwrap()).unwrap();
    assert!(dump.get("step").is_some(), "{dump}");
    assert!(!out.join("checkpoint.bin").exists());
}

#[test]
fn gradcheck_detects_corruption_and_precision() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("gc.json");
    let msg = ok(&["gradcheck", "--json", s(&json)]);
    assert!(msg.contains("tolerance 1e-4: pass"), "{msg}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["results"].as_array().unwrap().len(), 7);

    let o = run(&["gradcheck", "--corrupt", "mask_prompt_generator"]);
    assert_eq!(o.status.code(), Some(1));
    let out = text(&o);
    let line = out.lines().find(|l| l.starts_with("mask_prompt_generator")).unwrap();
    assert!(line.ends_with("FAIL"), "{out}");
    let line = out.lines().find(|l| l.starts_with("sam2_head")).unwrap();
    assert!(line.ends_with("pass"), "{out}");

    ok(&["gradcheck", "--float32", "--tolerance", "1e-2"]);
    let o = run(&["gradcheck", "--float32", "--tolerance", "1e-12"]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));

    let o = run(&["gradcheck", "--module", "nonsense"]);
    assert_eq!(o.status.code(), Some(1));
}
