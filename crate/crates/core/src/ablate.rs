//! Component and fusion-variant ablations.
//!
//! Every row is the base configuration plus a few overrides, trained for
//! `ablate.steps` steps and evaluated exactly as a separate `train` + `eval`
//! invocation with the same settings would be. Rows whose effective
//! configurations coincide share one run.

use std::collections::HashMap;
use std::fmt;

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::ReferringSample;
use crate::error::Result;
use crate::harness::{evaluate_model, train};
use crate::metrics::MetricReport;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSpec {
    pub table: &'static str,
    pub name: &'static str,
    pub overrides: &'static [(&'static str, &'static str)],
}

const fn row(
    table: &'static str,
    name: &'static str,
    overrides: &'static [(&'static str, &'static str)],
) -> AblationSpec {
    AblationSpec { table, name, overrides }
}

/// The standard rows: component toggles, fusion variants, MHCA in the
/// prompt generator and the two halves of the fusion module.
pub fn standard_rows() -> Vec<AblationSpec> {
    vec![
        row(
            "components",
            "baseline",
            &[("bhfm.variant", "off"), ("mpg.enabled", "false"), ("loss.tbl", "0")],
        ),
        row(
            "components",
            "+L_tbl",
            &[("bhfm.variant", "off"), ("mpg.enabled", "false")],
        ),
        row("components", "+L_tbl+MPG", &[("bhfm.variant", "off")]),
        row("components", "+L_tbl+BHFM", &[("mpg.enabled", "false")]),
        row("components", "full", &[]),
        row("fusion", "linear", &[("bhfm.variant", "linear")]),
        row("fusion", "uni", &[("bhfm.variant", "uni")]),
        row("fusion", "bi", &[("bhfm.variant", "bi")]),
        row("mhca", "w/o MHCA", &[("mpg.use_mhca", "false")]),
        row("mhca", "w MHCA", &[("mpg.use_mhca", "true")]),
        row("bhfm_parts", "w/o BC", &[("bhfm.use_bc", "false")]),
        row("bhfm_parts", "w/o BL", &[("bhfm.use_bl", "false")]),
        row(
            "bhfm_parts",
            "w BC+BL",
            &[("bhfm.use_bc", "true"), ("bhfm.use_bl", "true")],
        ),
    ]
}

impl AblationSpec {
    /// Configuration of this row: `base` plus the overrides, trained for
    /// `base.ablate_steps` steps.
    pub fn config(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut cfg = base.clone();
        for (k, v) in self.overrides {
            cfg.set(k, v)?;
        }
        cfg.train.steps = base.ablate_steps;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub table: String,
    pub name: String,
    pub overrides: Vec<String>,
    pub config_hash: String,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub steps: usize,
    pub rows: Vec<AblationRow>,
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<12} {:<12}", "table", "row")?;
        for h in MetricReport::HEADER {
            write!(f, " {h:>8}")?;
        }
        writeln!(f)?;
        for r in &self.rows {
            write!(f, "{:<12} {:<12}", r.table, r.name)?;
            for v in r.report.row() {
                write!(f, " {v:>8.2}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Train every row on `train_set` and evaluate on `eval_set`.
pub fn ablate<T: Real>(
    base: &RunConfig,
    rows: &[AblationSpec],
    train_set: &[ReferringSample],
    eval_set: &[ReferringSample],
) -> Result<AblationTable> {
    let mut done: HashMap<String, MetricReport> = HashMap::new();
    let mut out = Vec::with_capacity(rows.len());
    for spec in rows {
        let cfg = spec.config(base)?;
        let hash = cfg.hash();
        let report = match done.get(&hash) {
            Some(r) => r.clone(),
            None => {
                let r = run_row::<T>(&cfg, train_set, eval_set)?;
                done.insert(hash.clone(), r.clone());
                r
            }
        };
        out.push(AblationRow {
            table: spec.table.to_string(),
            name: spec.name.to_string(),
            overrides: spec.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect(),
            config_hash: hash,
            report,
        });
    }
    Ok(AblationTable {
        steps: base.ablate_steps,
        rows: out,
    })
}

fn run_row<T: Real>(
    cfg: &RunConfig,
    train_set: &[ReferringSample],
    eval_set: &[ReferringSample],
) -> Result<MetricReport> {
    let trained = train::<T>(cfg, train_set, None, None)?;
    let mut model = crate::harness::build_model::<T>(cfg)?;
    trained.checkpoint.restore_params(&mut model.store)?;
    Ok(evaluate_model(&model, eval_set)?.report)
}
