//! One-parameter grid sweeps that share the unaffected pipeline prefix.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::stages::{read_report, Stage, Variant};
use super::{run_variant, PipelineConfig, ReportFormat, RunOptions, RunReport};
use crate::backends::Backend;
use crate::metrics::GroupSummary;
use crate::{fsutil, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Alpha,
    Beta,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Beta => "beta",
        }
    }

    /// First stage whose result depends on the parameter.
    fn first_affected(self, rounds: usize) -> Stage {
        match self {
            SweepParam::Alpha => Stage::Amda,
            SweepParam::Beta if rounds >= 2 => Stage::Filter(2),
            SweepParam::Beta => Stage::Eval,
        }
    }

    fn apply(self, cfg: &mut PipelineConfig, value: f64) {
        match self {
            SweepParam::Alpha => cfg.alpha = value,
            SweepParam::Beta => cfg.beta = value,
        }
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepParam::Alpha),
            "beta" => Ok(SweepParam::Beta),
            other => Err(Error::Config(format!("cannot sweep `{other}`; use alpha or beta"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub overall: GroupSummary,
    pub selected_round: usize,
    /// Stages executed for this value, base prefix included.
    pub executed: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// `value,dsc_mean,dsc_std,hd95_mean,hd95_std`, one row per value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("value,dsc_mean,dsc_std,hd95_mean,hd95_std\n");
        for r in &self.rows {
            let o = &r.overall;
            writeln!(
                out,
                "{},{},{},{},{}",
                r.value, o.dsc.mean, o.dsc.std, o.hd95_mm.mean, o.hd95_mm.std
            )
            .expect("string write");
        }
        out
    }
}

/// Runs the pipeline once per value. The stages before the first one the
/// parameter affects run in the base workdir (and are skipped once done);
/// the rest run under `sweep/{param}-{value}/`. Writes
/// `reports/sweep_{param}.csv` and `.json` to the base workdir.
pub fn sweep(
    cfg: &PipelineConfig,
    backend: &dyn Backend,
    param: SweepParam,
    values: &[f64],
) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::Config("no sweep values".into()));
    }
    let from = param.first_affected(cfg.rounds);
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut c = cfg.clone();
        param.apply(&mut c, value);
        // rows are read back from the JSON report
        c.report_format = ReportFormat::Both;
        c.validate()?;
        let root = cfg.workdir.join("sweep").join(format!("{}-{value}", param.name()));
        let variant = Variant {
            root: root.clone(),
            from,
        };
        let report: RunReport = run_variant(&c, backend, Some(variant), &RunOptions::default())?;
        let eval = read_report(&root)?;
        rows.push(SweepRow {
            value,
            overall: eval.metrics.overall.clone(),
            selected_round: eval.selected_round,
            executed: report.executed().into_iter().map(String::from).collect(),
        });
    }
    let report = SweepReport { param, rows };
    let reports = cfg.workdir.join("reports");
    fsutil::write_atomic(
        &reports.join(format!("sweep_{}.csv", param.name())),
        report.to_csv().as_bytes(),
    )?;
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    fsutil::write_atomic(&reports.join(format!("sweep_{}.json", param.name())), &json)?;
    Ok(report)
}
