use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backends::{AnalyticBackend, AnalyticConfig, Backend, ExternalBackend};
use crate::labeling::{CamVariant, DEFAULT_NORMAL_PROMPT, DEFAULT_TUMOR_PROMPT};
use crate::volume::DEFAULT_SPACING;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Table,
    #[default]
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Analytic(#[serde(default)] AnalyticSettings),
    External {
        /// Program and arguments of the adapter; it must speak the protocol on stdio.
        command: Vec<String>,
        #[serde(default = "one")]
        connections: usize,
    },
}

/// Analytic backend knobs; text templates follow the pipeline's prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyticSettings {
    pub tau: f64,
    pub smoothing_sigma: f64,
    pub min_floor: f64,
    pub tumor_weight: f64,
    pub support_margin: usize,
    pub global_margin: usize,
}

impl Default for AnalyticSettings {
    fn default() -> Self {
        let d = AnalyticConfig::default();
        Self {
            tau: d.tau,
            smoothing_sigma: d.smoothing_sigma,
            min_floor: d.min_floor,
            tumor_weight: d.tumor_weight,
            support_margin: d.support_margin,
            global_margin: d.global_margin,
        }
    }
}

fn one() -> usize {
    1
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Analytic(AnalyticSettings::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Percent of the most activated brain pixels masked by augmentation and
    /// used as the prompt region.
    pub alpha: f64,
    /// Percentile of agreement scores below which training volumes are dropped.
    pub beta: f64,
    pub rounds: usize,
    pub text_prompts: [String; 2],
    pub backend: BackendConfig,
    pub workdir: PathBuf,
    /// Ground-truth directory for evaluation; defaults to `workdir/gt`.
    pub gt_dir: Option<PathBuf>,
    pub seed: u64,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    /// Used for volumes whose files carry no spacing.
    pub spacing: [f64; 3],
    pub report_format: ReportFormat,
    pub amda_cycles: usize,
    pub cam_variant: CamVariant,
    pub box_padding: usize,
    pub fallback_box: usize,
    /// HD95 when exactly one mask is empty; the volume diagonal if unset.
    pub hd95_penalty_mm: Option<f64>,
    pub jobs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            alpha: 20.0,
            beta: 20.0,
            rounds: 2,
            text_prompts: [DEFAULT_NORMAL_PROMPT.into(), DEFAULT_TUMOR_PROMPT.into()],
            backend: BackendConfig::default(),
            workdir: PathBuf::from("work"),
            gt_dir: None,
            seed: 0,
            split: [0.7, 0.1, 0.2],
            spacing: DEFAULT_SPACING,
            report_format: ReportFormat::Both,
            amda_cycles: 1,
            cam_variant: CamVariant::Literal,
            box_padding: 0,
            fallback_box: 9,
            hd95_penalty_mm: None,
            jobs: 1,
        }
    }
}

impl PipelineConfig {
    /// Reads a JSON config; relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.workdir.is_relative() {
            cfg.workdir = base.join(&cfg.workdir);
        }
        if let Some(gt) = &cfg.gt_dir {
            if gt.is_relative() {
                cfg.gt_dir = Some(base.join(gt));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=100.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 100]", self.alpha));
        }
        if !(0.0..100.0).contains(&self.beta) {
            return bad(format!("beta {} outside [0, 100)", self.beta));
        }
        if self.rounds < 1 {
            return bad("rounds must be at least 1".into());
        }
        if self.amda_cycles < 1 {
            return bad("amda_cycles must be at least 1".into());
        }
        if self.split.iter().any(|&f| !(0.0..=1.0).contains(&f))
            || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad(format!("split {:?} must be fractions summing to 1", self.split));
        }
        if self.split[0] == 0.0 {
            return bad("the training split cannot be empty".into());
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad(format!("spacing {:?} must be positive", self.spacing));
        }
        if self.hd95_penalty_mm.is_some_and(|p| !(p >= 0.0 && p.is_finite())) {
            return bad("hd95_penalty_mm must be a nonnegative number".into());
        }
        if self.fallback_box == 0 {
            return bad("fallback_box must be at least 1".into());
        }
        if let BackendConfig::External { command, connections } = &self.backend {
            if command.is_empty() {
                return bad("external backend needs a command".into());
            }
            if *connections == 0 {
                return bad("external backend needs at least one connection".into());
            }
        }
        Ok(())
    }

    pub fn gt_dir(&self) -> PathBuf {
        self.gt_dir
            .clone()
            .unwrap_or_else(|| self.workdir.join("gt"))
    }

    pub fn build_backend(&self) -> Result<Box<dyn Backend>> {
        match &self.backend {
            BackendConfig::Analytic(s) => Ok(Box::new(AnalyticBackend::new(AnalyticConfig {
                tau: s.tau,
                smoothing_sigma: s.smoothing_sigma,
                min_floor: s.min_floor,
                tumor_weight: s.tumor_weight,
                text_prompts: self.text_prompts.clone(),
                support_margin: s.support_margin,
                global_margin: s.global_margin,
            }))),
            BackendConfig::External {
                command,
                connections,
            } => Ok(Box::new(ExternalBackend::spawn(
                &command[0],
                &command[1..],
                *connections,
            )?)),
        }
    }
}
