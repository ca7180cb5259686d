//! Stage runner with per-stage checkpointing.
//!
//! Every stage records the digests of what it read (files plus the config
//! fields it depends on) and of what it wrote in `ledger.json`. A stage whose
//! inputs are unchanged and whose outputs are intact is skipped, so an
//! interrupted run picks up where it stopped.

pub mod config;
pub mod ledger;
pub mod split;
pub mod stages;
pub mod sweep;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{AnalyticSettings, BackendConfig, PipelineConfig, ReportFormat};
pub use ledger::{Ledger, StageRecord, StageStatus};
pub use split::{split_dataset, split_sizes, Split};
pub use stages::{plan, read_report, EvalReport, Stage, ValidationScore, Variant};
pub use sweep::{sweep, SweepParam, SweepReport, SweepRow};

use crate::backends::Backend;
use crate::{Error, Result};
use stages::Env;

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Stage names to consider; all stages when `None`.
    pub stages: Option<Vec<String>>,
    /// Re-execute the considered stages even when their records match.
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageAction {
    Executed,
    Skipped,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub actions: Vec<(String, StageAction)>,
    /// Ledger of the root the last stages wrote into.
    pub ledger: Ledger,
}

impl RunReport {
    pub fn executed(&self) -> Vec<&str> {
        self.actions
            .iter()
            .filter(|(_, a)| *a == StageAction::Executed)
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

/// Parses `--stage` names against the plan; unknown names are config errors.
pub fn parse_stages(names: &[String], rounds: usize) -> Result<Vec<Stage>> {
    let plan = plan(rounds);
    names
        .iter()
        .map(|n| {
            plan.iter()
                .copied()
                .find(|s| s.name() == n.trim())
                .ok_or_else(|| {
                    let known: Vec<String> = plan.iter().map(|s| s.name()).collect();
                    Error::Config(format!("unknown stage `{n}`; stages are {}", known.join(", ")))
                })
        })
        .collect()
}

pub fn run(cfg: &PipelineConfig, backend: &dyn Backend, opts: &RunOptions) -> Result<RunReport> {
    run_variant(cfg, backend, None, opts)
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot build a pool of {jobs} threads: {e}")))
}

pub(crate) fn run_variant(
    cfg: &PipelineConfig,
    backend: &dyn Backend,
    variant: Option<Variant>,
    opts: &RunOptions,
) -> Result<RunReport> {
    cfg.validate()?;
    let env = Env {
        cfg,
        backend,
        plan: plan(cfg.rounds),
        variant,
    };
    if let Some(v) = &env.variant {
        if !env.plan.contains(&v.from) {
            return Err(Error::Config(format!("stage {} is not part of the plan", v.from.name())));
        }
    }
    let selected = match &opts.stages {
        Some(names) => parse_stages(names, cfg.rounds)?,
        None => env.plan.clone(),
    };
    thread_pool(cfg.jobs)?.install(|| execute_plan(&env, &selected, opts.force))
}

fn execute_plan(env: &Env<'_>, selected: &[Stage], force: bool) -> Result<RunReport> {
    let order: Vec<String> = env.plan.iter().map(|s| s.name()).collect();
    let base = env.base().to_path_buf();
    let mut base_ledger = Ledger::load(&base)?;
    let mut variant_ledger = match &env.variant {
        Some(v) => Some(Ledger::load(&v.root)?),
        None => None,
    };
    let mut actions = Vec::new();
    for &stage in env.plan.iter().filter(|s| selected.contains(s)) {
        let name = stage.name();
        let root = env.root_of(stage).to_path_buf();
        let ledger = match &mut variant_ledger {
            Some(l) if root != base => l,
            _ => &mut base_ledger,
        };
        let inputs = env.digest(stage, &env.inputs(stage)?)?;
        let fresh = ledger
            .get(&name)
            .is_some_and(|r| r.inputs == inputs && ledger::outputs_intact(&root, r));
        if fresh && !force {
            log::info!("{name}: up to date");
            actions.push((name, StageAction::Skipped));
            continue;
        }
        ledger.invalidate(std::slice::from_ref(&name));
        ledger.save(&root)?;
        log::info!("{name}: running");
        let start = Instant::now();
        let outs = env.execute(stage)?;
        let outputs = ledger::digest_files(&root, &outs)?;
        let duration_ms = start.elapsed().as_millis() as u64;
        log::info!("{name}: done in {duration_ms} ms, {} outputs", outputs.len());
        ledger.upsert(
            StageRecord {
                name: name.clone(),
                inputs,
                outputs,
                duration_ms,
                status: StageStatus::Completed,
            },
            &order,
        );
        ledger.save(&root)?;
        actions.push((name, StageAction::Executed));
    }
    Ok(RunReport {
        actions,
        ledger: variant_ledger.unwrap_or(base_ledger),
    })
}

/// Reads the ledger of a workdir.
pub fn load_ledger(root: &Path) -> Result<Ledger> {
    Ledger::load(root)
}
