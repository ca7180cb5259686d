//! Stage definitions: what each stage reads, what it writes, and how.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{PipelineConfig, ReportFormat};
use super::split::{split_dataset, Split};
use crate::backends::{Backend, BackendError, ClassifierOutput, LabeledImage, ModelBlob, SegmenterSample};
use crate::grid::{Grid2, Grid3, Mask3D};
use crate::labeling::{
    amda_augment, assign_label, clip_probabilities, fuse_and_upsample, layer_cam,
    layer_cam_weighted, CamMap, CamVariant,
};
use crate::metrics::{self, MetricsReport};
use crate::pseudo_label::{
    assemble, resegment_via_prompts, segment_from_cam, PromptOptions, PseudoSource, SliceOrigin,
};
use crate::s3f::{self, PoolEntry, PoolStage, TrainingPool};
use crate::tensor::Tensor;
use crate::volume::{brain_mask, normalize_brain_with, Volume};
use crate::{fsutil, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Labels,
    CamQ0,
    Amda,
    CamQ1,
    Sam,
    /// Segmenter training round `k` (from 1).
    Round(usize),
    /// Re-segmentation and filtering ahead of round `k` (from 2).
    Filter(usize),
    Eval,
}

impl Stage {
    pub fn name(self) -> String {
        match self {
            Stage::Labels => "labels".into(),
            Stage::CamQ0 => "cam_q0".into(),
            Stage::Amda => "amda".into(),
            Stage::CamQ1 => "cam_q1".into(),
            Stage::Sam => "sam".into(),
            Stage::Round(k) => format!("round{k}"),
            Stage::Filter(k) => format!("s3f_r{k}"),
            Stage::Eval => "eval".into(),
        }
    }
}

/// Stages in execution order for `rounds` rounds of segmenter training.
pub fn plan(rounds: usize) -> Vec<Stage> {
    let mut out = vec![
        Stage::Labels,
        Stage::CamQ0,
        Stage::Amda,
        Stage::CamQ1,
        Stage::Sam,
        Stage::Round(1),
    ];
    for k in 2..=rounds {
        out.push(Stage::Filter(k));
        out.push(Stage::Round(k));
    }
    out.push(Stage::Eval);
    out
}

/// Slice labels for one volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeLabels {
    pub volume_id: String,
    pub labels: Vec<u8>,
    pub probs: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelInfo {
    pub source: PseudoSource,
    pub per_slice_origin: Vec<SliceOrigin>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationScore {
    pub round: usize,
    /// Mean Dice of the round's validation predictions against the
    /// validation pseudo-labels; absent with an empty validation split.
    pub val_dsc: Option<f64>,
    pub per_volume: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub selected_round: usize,
    pub val_scores: Vec<ValidationScore>,
    pub metrics: MetricsReport,
}

pub const SPLIT_FILE: &str = "labels/split.json";
pub const REPORT_JSON: &str = "reports/report.json";
pub const REPORT_TABLE: &str = "reports/report.txt";

pub fn input_rel(id: &str) -> String {
    format!("input/{id}.tns")
}

fn labels_rel(id: &str) -> String {
    format!("labels/{id}.json")
}

fn cam_rel(q: usize, id: &str) -> String {
    format!("cams/q{q}/{id}.tns")
}

fn sam_rel(id: &str) -> String {
    format!("pseudo/sam/{id}.tns")
}

fn round_rel(k: usize, id: &str) -> String {
    format!("pseudo/round{k}/{id}.tns")
}

fn reseg_dir(k: usize) -> String {
    if k == 2 {
        "pseudo/reseg".into()
    } else {
        format!("pseudo/reseg_r{k}")
    }
}

fn pool_rel(k: usize) -> String {
    format!("{}/pool.jsonl", reseg_dir(k))
}

fn segmenter_rel(k: usize) -> String {
    format!("models/segmenter_r{k}.bin")
}

fn val_rel(k: usize) -> String {
    format!("models/segmenter_r{k}.val.json")
}

pub fn prediction_rel(id: &str) -> String {
    format!("reports/predictions/{id}.tns")
}

const CLASSIFIER_Q0: &str = "models/classifier_q0.bin";
const CLASSIFIER_Q1: &str = "models/classifier_q1.bin";

#[derive(Clone, Debug)]
pub(crate) enum Producer {
    Input,
    Stage(Stage),
    GroundTruth,
}

#[derive(Clone, Debug)]
pub(crate) enum Dep {
    File { producer: Producer, rel: String },
    Value { key: String, digest: String },
}

fn file(producer: Stage, rel: String) -> Dep {
    Dep::File {
        producer: Producer::Stage(producer),
        rel,
    }
}

fn input(id: &str) -> Dep {
    Dep::File {
        producer: Producer::Input,
        rel: input_rel(id),
    }
}

/// Suffix of the plan that writes into a separate root, reusing the base
/// workdir's artifacts for everything before it.
#[derive(Clone, Debug)]
pub struct Variant {
    pub root: PathBuf,
    pub from: Stage,
}

pub(crate) struct Env<'a> {
    pub cfg: &'a PipelineConfig,
    pub backend: &'a dyn Backend,
    pub plan: Vec<Stage>,
    pub variant: Option<Variant>,
}

/// A loaded input volume with its brain mask and normalized intensities.
struct Prepared {
    brain: Mask3D,
    norm: Volume,
}

impl Prepared {
    fn slices(&self) -> Vec<Grid2<f32>> {
        self.norm.voxels.planes()
    }
}

fn in_stage(stage: Stage, context: impl Into<String>) -> impl FnOnce(BackendError) -> Error {
    move |source| Error::Stage {
        stage: stage.name(),
        context: context.into(),
        source,
    }
}

/// Attaches stage context to backend failures surfaced through other errors.
fn with_context(stage: Stage, context: String, e: Error) -> Error {
    match e {
        Error::Backend(source) => Error::Stage {
            stage: stage.name(),
            context,
            source,
        },
        Error::Stage {
            context: inner,
            source,
            ..
        } => Error::Stage {
            stage: stage.name(),
            context: format!("{context}, {inner}"),
            source,
        },
        other => other,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fsutil::write_atomic(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn save_mask(path: &Path, mask: &Mask3D, id: &str, spacing: [f64; 3]) -> Result<()> {
    Tensor::from_mask3(mask)
        .with_id(id)
        .with_spacing(spacing)
        .save(path)
}

fn load_mask(path: &Path, shape: (usize, usize, usize)) -> Result<Mask3D> {
    let m = Tensor::load(path)?.into_mask3()?;
    if m.shape() != shape {
        return Err(Error::Shape(format!(
            "{}: mask {:?} vs volume {:?}",
            path.display(),
            m.shape(),
            shape
        )));
    }
    Ok(m)
}

/// Seed for one negative slice's random rectangle.
pub fn rectangle_seed(seed: u64, volume_id: &str, slice: usize, cycle: usize) -> u64 {
    let h = Sha256::digest(format!("{seed}/{volume_id}/{slice}/{cycle}").as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

/// Combines the classifier's maps into a slice-sized CAM; a map supplied by
/// the backend is used as is.
pub fn cam_from_output(
    out: &ClassifierOutput,
    variant: CamVariant,
    shape: (usize, usize),
) -> Result<Grid2<f64>> {
    if let Some(cam) = &out.cam {
        if cam.shape() != shape {
            return Err(Error::Shape(format!(
                "backend CAM {:?} vs slice {:?}",
                cam.shape(),
                shape
            )));
        }
        return Ok(cam.map(|&v| v as f64));
    }
    let to64 = |gs: &[Grid2<f32>]| gs.iter().map(|g| g.map(|&v| v as f64)).collect::<Vec<_>>();
    let mut maps = Vec::with_capacity(out.layers.len());
    for layer in &out.layers {
        let grads = to64(&layer.gradients);
        let values = match variant {
            CamVariant::Literal => layer_cam(&grads)?,
            CamVariant::Weighted => {
                let acts = layer.activations.as_ref().ok_or_else(|| {
                    Error::Contract(format!("layer `{}` has no activations", layer.id))
                })?;
                layer_cam_weighted(&grads, &to64(acts))?
            }
        };
        maps.push(CamMap {
            values,
            layer_ids: vec![layer.id.clone()],
        });
    }
    Ok(fuse_and_upsample(&maps, shape)?.values)
}

impl<'a> Env<'a> {
    pub fn base(&self) -> &Path {
        &self.cfg.workdir
    }

    fn index(&self, stage: Stage) -> usize {
        self.plan
            .iter()
            .position(|&s| s == stage)
            .expect("stage is part of the plan")
    }

    /// Workdir a stage writes into.
    pub fn root_of(&self, stage: Stage) -> &Path {
        match &self.variant {
            Some(v) if self.index(stage) >= self.index(v.from) => &v.root,
            _ => self.base(),
        }
    }

    fn path(&self, producer: Stage, rel: &str) -> PathBuf {
        self.root_of(producer).join(rel)
    }

    fn out(&self, stage: Stage, rel: &str) -> PathBuf {
        self.root_of(stage).join(rel)
    }

    /// Ids of the `.tns` files under `input/`, sorted.
    pub fn input_ids(&self) -> Result<Vec<String>> {
        let dir = self.base().join("input");
        let entries = match std::fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let mut ids = Vec::new();
        for entry in entries {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "tns") {
                if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    fn split_for(&self, stage: Stage) -> Result<Split> {
        let path = self.path(Stage::Labels, SPLIT_FILE);
        if !path.exists() {
            return Err(Error::Dependency {
                stage: stage.name(),
                missing: Stage::Labels.name(),
            });
        }
        read_json(&path)
    }

    fn config_digest(&self, stage: Stage) -> Result<Dep> {
        let c = self.cfg;
        let mut v = serde_json::Map::new();
        let mut put = |k: &str, x: serde_json::Value| {
            v.insert(k.to_string(), x);
        };
        put("backend", serde_json::to_value(&c.backend)?);
        put("spacing", serde_json::to_value(c.spacing)?);
        match stage {
            Stage::Labels => {
                put("seed", c.seed.into());
                put("split", serde_json::to_value(c.split)?);
                put("text_prompts", serde_json::to_value(&c.text_prompts)?);
            }
            Stage::CamQ0 | Stage::CamQ1 => {
                put("cam_variant", serde_json::to_value(c.cam_variant)?);
            }
            Stage::Amda => {
                put("cam_variant", serde_json::to_value(c.cam_variant)?);
                put("alpha", c.alpha.into());
                put("seed", c.seed.into());
                put("amda_cycles", c.amda_cycles.into());
            }
            Stage::Sam => {
                put("alpha", c.alpha.into());
                put("box_padding", c.box_padding.into());
                put("fallback_box", c.fallback_box.into());
            }
            Stage::Round(_) => {}
            Stage::Filter(_) => {
                put("beta", c.beta.into());
                put("box_padding", c.box_padding.into());
            }
            Stage::Eval => {
                put("rounds", c.rounds.into());
                put("hd95_penalty_mm", serde_json::to_value(c.hd95_penalty_mm)?);
                put("report_format", serde_json::to_value(c.report_format)?);
            }
        }
        let bytes = serde_json::to_vec(&v)?;
        Ok(Dep::Value {
            key: "config".into(),
            digest: fsutil::sha256_hex(&bytes),
        })
    }

    /// Everything the stage reads. Fails with a dependency error when an
    /// upstream artifact is missing.
    pub(crate) fn inputs(&self, stage: Stage) -> Result<Vec<Dep>> {
        let mut deps = vec![self.config_digest(stage)?];
        if stage == Stage::Labels {
            let ids = self.input_ids()?;
            if ids.is_empty() {
                return Err(Error::Dependency {
                    stage: stage.name(),
                    missing: "input volumes".into(),
                });
            }
            let split = split_dataset(&ids, self.cfg.split, self.cfg.seed)?;
            deps.push(Dep::Value {
                key: "input/ids".into(),
                digest: fsutil::sha256_hex(ids.join("\n").as_bytes()),
            });
            deps.extend(split.development().iter().map(|id| input(id)));
            return Ok(deps);
        }
        let split = self.split_for(stage)?;
        deps.push(file(Stage::Labels, SPLIT_FILE.into()));
        let dev = split.development();
        match stage {
            Stage::Labels => unreachable!("handled above"),
            Stage::CamQ0 => {
                for id in &dev {
                    deps.push(input(id));
                    deps.push(file(Stage::Labels, labels_rel(id)));
                }
            }
            Stage::Amda => {
                for id in &split.train {
                    deps.push(input(id));
                    deps.push(file(Stage::Labels, labels_rel(id)));
                    deps.push(file(Stage::CamQ0, cam_rel(0, id)));
                }
                deps.push(file(Stage::CamQ0, CLASSIFIER_Q0.into()));
            }
            Stage::CamQ1 => {
                for id in &dev {
                    deps.push(input(id));
                    deps.push(file(Stage::Labels, labels_rel(id)));
                }
                deps.push(file(Stage::Amda, CLASSIFIER_Q1.into()));
            }
            Stage::Sam => {
                for id in &dev {
                    deps.push(input(id));
                    deps.push(file(Stage::Labels, labels_rel(id)));
                    deps.push(file(Stage::CamQ1, cam_rel(1, id)));
                }
            }
            Stage::Round(k) => {
                for id in &dev {
                    deps.push(input(id));
                }
                for id in &split.val {
                    deps.push(file(Stage::Sam, sam_rel(id)));
                }
                if k == 1 {
                    for id in &split.train {
                        deps.push(file(Stage::Sam, sam_rel(id)));
                    }
                } else {
                    deps.push(file(Stage::Filter(k), pool_rel(k)));
                    for id in &split.train {
                        deps.push(file(Stage::Round(k - 1), round_rel(k - 1, id)));
                    }
                }
            }
            Stage::Filter(k) => {
                for id in &split.train {
                    deps.push(input(id));
                    deps.push(file(Stage::Round(k - 1), round_rel(k - 1, id)));
                }
            }
            Stage::Eval => {
                for k in 1..=self.cfg.rounds {
                    deps.push(file(Stage::Round(k), segmenter_rel(k)));
                    deps.push(file(Stage::Round(k), val_rel(k)));
                }
                for id in &split.test {
                    deps.push(input(id));
                    deps.push(Dep::File {
                        producer: Producer::GroundTruth,
                        rel: format!("{id}.tns"),
                    });
                }
            }
        }
        Ok(deps)
    }

    /// Digest map of `deps`, keyed by path relative to the producing root.
    pub(crate) fn digest(&self, stage: Stage, deps: &[Dep]) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for dep in deps {
            match dep {
                Dep::Value { key, digest } => {
                    out.insert(key.clone(), digest.clone());
                }
                Dep::File { producer, rel } => {
                    let (path, key, missing) = match producer {
                        Producer::Input => (self.base().join(rel), rel.clone(), "input volumes".to_string()),
                        Producer::Stage(s) => (self.path(*s, rel), rel.clone(), s.name()),
                        Producer::GroundTruth => {
                            (self.cfg.gt_dir().join(rel), format!("gt:{rel}"), "ground truth".to_string())
                        }
                    };
                    let digest = match fsutil::file_digest(&path) {
                        Ok(d) => d,
                        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => {
                            return Err(Error::Dependency {
                                stage: stage.name(),
                                missing: format!("{missing} ({key})"),
                            })
                        }
                        Err(e) => return Err(e),
                    };
                    out.insert(key, digest);
                }
            }
        }
        Ok(out)
    }

    fn load_volume(&self, id: &str) -> Result<Volume> {
        let t = Tensor::load(&self.base().join(input_rel(id)))?;
        let spacing_missing = t.spacing.is_none();
        let mut v = t.into_volume(id)?;
        v.id = id.to_string();
        if spacing_missing {
            v.spacing = self.cfg.spacing;
        }
        Ok(v)
    }

    fn prepare(&self, id: &str) -> Result<Prepared> {
        let raw = self.load_volume(id)?;
        let brain = brain_mask(&raw);
        let norm = normalize_brain_with(&raw, &brain);
        Ok(Prepared { brain, norm })
    }

    fn load_labels(&self, id: &str, depth: usize) -> Result<VolumeLabels> {
        let l: VolumeLabels = read_json(&self.path(Stage::Labels, &labels_rel(id)))?;
        if l.labels.len() != depth {
            return Err(Error::Shape(format!(
                "{id}: {} slice labels for depth {depth}",
                l.labels.len()
            )));
        }
        Ok(l)
    }

    fn load_model(&self, producer: Stage, rel: &str) -> Result<ModelBlob> {
        Ok(ModelBlob(std::fs::read(self.path(producer, rel))?))
    }

    fn load_cam(&self, producer: Stage, rel: &str, shape: (usize, usize, usize)) -> Result<Grid3<f32>> {
        let path = self.path(producer, rel);
        let g = Tensor::load(&path)?.into_grid3()?;
        if g.shape() != shape {
            return Err(Error::Shape(format!(
                "{}: CAM {:?} vs volume {:?}",
                path.display(),
                g.shape(),
                shape
            )));
        }
        Ok(g)
    }

    /// Runs the stage and returns the written paths, relative to its root.
    pub(crate) fn execute(&self, stage: Stage) -> Result<Vec<String>> {
        match stage {
            Stage::Labels => self.run_labels(),
            Stage::CamQ0 => self.run_cam_q0(),
            Stage::Amda => self.run_amda(),
            Stage::CamQ1 => self.run_cam_q1(),
            Stage::Sam => self.run_sam(),
            Stage::Round(k) => self.run_round(k),
            Stage::Filter(k) => self.run_filter(k),
            Stage::Eval => self.run_eval(),
        }
    }

    fn run_labels(&self) -> Result<Vec<String>> {
        let stage = Stage::Labels;
        let ids = self.input_ids()?;
        let split = split_dataset(&ids, self.cfg.split, self.cfg.seed)?;
        let texts = self
            .cfg
            .text_prompts
            .iter()
            .map(|t| {
                self.backend
                    .embed_text(t)
                    .map_err(in_stage(stage, "text prompt"))
            })
            .collect::<Result<Vec<_>>>()?;
        let dev = split.development();
        dev.par_iter()
            .map(|id| {
                let prep = self.prepare(id)?;
                let mut labels = Vec::new();
                let mut probs = Vec::new();
                for (d, slice) in prep.slices().iter().enumerate() {
                    let e = self
                        .backend
                        .embed_image(slice)
                        .map_err(in_stage(stage, format!("volume {id} slice {d}")))?;
                    let p = clip_probabilities(&e, &texts)?;
                    labels.push(assign_label(&p));
                    probs.push(p.probs);
                }
                let rec = VolumeLabels {
                    volume_id: id.clone(),
                    labels,
                    probs,
                };
                write_json(&self.out(stage, &labels_rel(id)), &rec)
            })
            .collect::<Result<Vec<()>>>()?;
        write_json(&self.out(stage, SPLIT_FILE), &split)?;
        let mut outs: Vec<String> = dev.iter().map(|id| labels_rel(id)).collect();
        outs.push(SPLIT_FILE.into());
        Ok(outs)
    }

    fn labeled_slices(&self, ids: &[String]) -> Result<Vec<LabeledImage>> {
        let per_volume = ids
            .par_iter()
            .map(|id| {
                let prep = self.prepare(id)?;
                let labels = self.load_labels(id, prep.norm.shape().0)?;
                Ok(prep
                    .slices()
                    .into_iter()
                    .zip(labels.labels)
                    .map(|(image, label)| LabeledImage { image, label })
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(per_volume.into_iter().flatten().collect())
    }

    /// CAM stack for one volume: positive slices get the classifier's map,
    /// negative ones a zero plane.
    fn volume_cams(&self, stage: Stage, model: &ModelBlob, id: &str, prep: &Prepared, labels: &[u8]) -> Result<Grid3<f32>> {
        let shape = prep.norm.shape();
        let mut cams = Grid3::filled(shape, 0.0f32);
        for (d, slice) in prep.slices().iter().enumerate() {
            if labels[d] != 1 {
                continue;
            }
            let ctx = format!("volume {id} slice {d}");
            let out = self
                .backend
                .classify_with_maps(model, slice)
                .map_err(in_stage(stage, ctx.clone()))?;
            let cam = cam_from_output(&out, self.cfg.cam_variant, (shape.1, shape.2))
                .map_err(|e| with_context(stage, ctx, e))?;
            cams.set_plane(d, &cam.map(|&v| v as f32))?;
        }
        Ok(cams)
    }

    fn write_cams(&self, stage: Stage, q: usize, model: &ModelBlob, ids: &[String]) -> Result<Vec<String>> {
        ids.par_iter()
            .map(|id| {
                let prep = self.prepare(id)?;
                let labels = self.load_labels(id, prep.norm.shape().0)?;
                let cams = self.volume_cams(stage, model, id, &prep, &labels.labels)?;
                let rel = cam_rel(q, id);
                Tensor::from_grid3(&cams).with_id(id).save(&self.out(stage, &rel))?;
                Ok(rel)
            })
            .collect()
    }

    fn run_cam_q0(&self) -> Result<Vec<String>> {
        let stage = Stage::CamQ0;
        let split = self.split_for(stage)?;
        let samples = self.labeled_slices(&split.train)?;
        let model = self
            .backend
            .train_classifier(&samples)
            .map_err(in_stage(stage, "training classifier"))?;
        fsutil::write_atomic(&self.out(stage, CLASSIFIER_Q0), &model.0)?;
        let mut outs = vec![CLASSIFIER_Q0.to_string()];
        outs.extend(self.write_cams(stage, 0, &model, &split.development())?);
        Ok(outs)
    }

    fn run_amda(&self) -> Result<Vec<String>> {
        let stage = Stage::Amda;
        let split = self.split_for(stage)?;
        let mut model = self.load_model(Stage::CamQ0, CLASSIFIER_Q0)?;
        let mut augmented = Vec::new();
        for cycle in 0..self.cfg.amda_cycles {
            augmented = split
                .train
                .par_iter()
                .map(|id| {
                    let prep = self.prepare(id)?;
                    let shape = prep.norm.shape();
                    let labels = self.load_labels(id, shape.0)?.labels;
                    let cams = if cycle == 0 {
                        self.load_cam(Stage::CamQ0, &cam_rel(0, id), shape)?
                    } else {
                        self.volume_cams(stage, &model, id, &prep, &labels)?
                    };
                    let mut pixels = Vec::with_capacity(shape.0);
                    let mut masks = Vec::with_capacity(shape.0);
                    for (d, slice) in prep.slices().iter().enumerate() {
                        let cam = cams.plane(d).map(|&v| v as f64);
                        let aug = amda_augment(
                            slice,
                            &prep.brain.plane(d),
                            labels[d],
                            Some(&cam),
                            self.cfg.alpha,
                            rectangle_seed(self.cfg.seed, id, d, cycle),
                        )?;
                        pixels.push(aug.pixels);
                        masks.push(aug.applied_mask);
                    }
                    Ok((id.clone(), labels, pixels, masks, prep.norm.spacing))
                })
                .collect::<Result<Vec<_>>>()?;
            let samples: Vec<LabeledImage> = augmented
                .iter()
                .flat_map(|(_, labels, pixels, _, _)| {
                    pixels.iter().zip(labels).map(|(p, &l)| LabeledImage {
                        image: p.clone(),
                        label: l,
                    })
                })
                .collect();
            model = self
                .backend
                .train_classifier(&samples)
                .map_err(in_stage(stage, format!("retraining classifier, cycle {cycle}")))?;
        }
        let mut outs = Vec::new();
        for (id, _, pixels, masks, spacing) in &augmented {
            let rel = format!("amda/{id}.tns");
            let vol = Volume::new(id.clone(), Grid3::from_planes(pixels)?, *spacing)?;
            Tensor::from_volume(&vol).save(&self.out(stage, &rel))?;
            let mask_rel = format!("amda/{id}.mask.tns");
            save_mask(&self.out(stage, &mask_rel), &Grid3::from_planes(masks)?, id, *spacing)?;
            outs.push(rel);
            outs.push(mask_rel);
        }
        fsutil::write_atomic(&self.out(stage, CLASSIFIER_Q1), &model.0)?;
        outs.push(CLASSIFIER_Q1.into());
        Ok(outs)
    }

    fn run_cam_q1(&self) -> Result<Vec<String>> {
        let stage = Stage::CamQ1;
        let split = self.split_for(stage)?;
        let model = self.load_model(Stage::Amda, CLASSIFIER_Q1)?;
        self.write_cams(stage, 1, &model, &split.development())
    }

    fn prompt_options(&self) -> PromptOptions {
        PromptOptions {
            padding: self.cfg.box_padding,
            fallback_box: self.cfg.fallback_box,
        }
    }

    fn run_sam(&self) -> Result<Vec<String>> {
        let stage = Stage::Sam;
        let split = self.split_for(stage)?;
        let outs = split
            .development()
            .par_iter()
            .map(|id| {
                let prep = self.prepare(id)?;
                let shape = prep.norm.shape();
                let labels = self.load_labels(id, shape.0)?.labels;
                let cams = self.load_cam(Stage::CamQ1, &cam_rel(1, id), shape)?;
                let slices = prep.slices();
                let positives = (0..shape.0)
                    .filter(|&d| labels[d] == 1)
                    .map(|d| {
                        segment_from_cam(
                            self.backend,
                            &slices[d],
                            &cams.plane(d).map(|&v| v as f64),
                            &prep.brain.plane(d),
                            self.cfg.alpha,
                            self.prompt_options(),
                        )
                        .map_err(|e| with_context(stage, format!("volume {id} slice {d}"), e))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let pl = assemble(shape, &labels, positives, PseudoSource::CamSam)?;
                let rel = sam_rel(id);
                save_mask(&self.out(stage, &rel), &pl.mask, id, prep.norm.spacing)?;
                let info_rel = format!("pseudo/sam/{id}.json");
                write_json(
                    &self.out(stage, &info_rel),
                    &PseudoLabelInfo {
                        source: pl.source,
                        per_slice_origin: pl.per_slice_origin,
                    },
                )?;
                Ok([rel, info_rel])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(outs.into_iter().flatten().collect())
    }

    fn run_round(&self, k: usize) -> Result<Vec<String>> {
        let stage = Stage::Round(k);
        let split = self.split_for(stage)?;
        let pool_ids: Vec<String> = if k == 1 {
            split.train.clone()
        } else {
            s3f::read_manifest(&self.path(Stage::Filter(k), &pool_rel(k)))?
                .into_iter()
                .filter(|r| r.retained)
                .map(|r| r.volume_id)
                .collect()
        };
        let samples = pool_ids
            .par_iter()
            .map(|id| {
                let prep = self.prepare(id)?;
                let label = if k == 1 {
                    load_mask(&self.path(Stage::Sam, &sam_rel(id)), prep.norm.shape())?
                } else {
                    load_mask(&self.path(Stage::Round(k - 1), &round_rel(k - 1, id)), prep.norm.shape())?
                };
                Ok(SegmenterSample {
                    volume: prep.norm,
                    label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = self
            .backend
            .train_segmenter(&samples)
            .map_err(in_stage(stage, format!("training on {} volumes", samples.len())))?;
        drop(samples);
        fsutil::write_atomic(&self.out(stage, &segmenter_rel(k)), &model.0)?;
        let dev = split.development();
        let predicted = dev
            .par_iter()
            .map(|id| {
                let prep = self.prepare(id)?;
                let pred = self
                    .backend
                    .predict_volume(&model, &prep.norm)
                    .map_err(in_stage(stage, format!("volume {id}")))?;
                let rel = round_rel(k, id);
                save_mask(&self.out(stage, &rel), &pred, id, prep.norm.spacing)?;
                let score = if split.val.contains(id) {
                    let reference = load_mask(&self.path(Stage::Sam, &sam_rel(id)), pred.shape())?;
                    Some(metrics::dsc(&pred, &reference)?)
                } else {
                    None
                };
                Ok((id.clone(), rel, score))
            })
            .collect::<Result<Vec<_>>>()?;
        let per_volume: BTreeMap<String, f64> = predicted
            .iter()
            .filter_map(|(id, _, s)| s.map(|s| (id.clone(), s)))
            .collect();
        let val_dsc = (!per_volume.is_empty())
            .then(|| per_volume.values().sum::<f64>() / per_volume.len() as f64);
        write_json(
            &self.out(stage, &val_rel(k)),
            &ValidationScore {
                round: k,
                val_dsc,
                per_volume,
            },
        )?;
        let mut outs = vec![segmenter_rel(k), val_rel(k)];
        outs.extend(predicted.into_iter().map(|(_, rel, _)| rel));
        Ok(outs)
    }

    fn run_filter(&self, k: usize) -> Result<Vec<String>> {
        let stage = Stage::Filter(k);
        let split = self.split_for(stage)?;
        let scored = split
            .train
            .par_iter()
            .map(|id| {
                let prep = self.prepare(id)?;
                let label_ref = round_rel(k - 1, id);
                let s = load_mask(&self.path(Stage::Round(k - 1), &label_ref), prep.norm.shape())?;
                let s_hat = resegment_via_prompts(self.backend, &prep.slices(), &s, self.prompt_options())
                    .map_err(|e| with_context(stage, format!("volume {id}"), e))?;
                let rel = format!("{}/{id}.tns", reseg_dir(k));
                save_mask(&self.out(stage, &rel), &s_hat.mask, id, prep.norm.spacing)?;
                Ok((
                    PoolEntry {
                        volume_id: id.clone(),
                        label_ref,
                        score: Some(s3f::score(&s, &s_hat.mask)?),
                        retained: true,
                    },
                    rel,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let (entries, mut outs): (Vec<_>, Vec<_>) = scored.into_iter().unzip();
        let pool = s3f::filter_pool(&TrainingPool::new(PoolStage::D3, entries), self.cfg.beta)?;
        log::info!(
            "{}: kept {} of {} volumes (threshold {:?})",
            stage.name(),
            pool.retained().count(),
            pool.entries.len(),
            pool.threshold
        );
        pool.write_manifest(&self.out(stage, &pool_rel(k)))?;
        outs.push(pool_rel(k));
        Ok(outs)
    }

    fn run_eval(&self) -> Result<Vec<String>> {
        let stage = Stage::Eval;
        let split = self.split_for(stage)?;
        let val_scores = (1..=self.cfg.rounds)
            .map(|k| read_json::<ValidationScore>(&self.path(Stage::Round(k), &val_rel(k))))
            .collect::<Result<Vec<_>>>()?;
        let selected_round = select_round(&val_scores);
        let model = self.load_model(Stage::Round(selected_round), &segmenter_rel(selected_round))?;
        let results = split
            .test
            .par_iter()
            .map(|id| {
                let prep = self.prepare(id)?;
                let pred = self
                    .backend
                    .predict_volume(&model, &prep.norm)
                    .map_err(in_stage(stage, format!("volume {id}")))?;
                let rel = prediction_rel(id);
                save_mask(&self.out(stage, &rel), &pred, id, prep.norm.spacing)?;
                let gt = load_mask(&self.cfg.gt_dir().join(format!("{id}.tns")), pred.shape())?;
                Ok((id.clone(), rel, pred, gt, prep.norm.spacing))
            })
            .collect::<Result<Vec<_>>>()?;
        let cases: Vec<metrics::EvalCase<'_>> = results
            .iter()
            .map(|(id, _, pred, gt, spacing)| metrics::EvalCase {
                volume_id: id,
                prediction: pred,
                ground_truth: gt,
                spacing: *spacing,
            })
            .collect();
        let report = EvalReport {
            selected_round,
            val_scores,
            metrics: metrics::evaluate(&cases, self.cfg.hd95_penalty_mm)?,
        };
        let mut outs: Vec<String> = results.iter().map(|r| r.1.clone()).collect();
        if matches!(self.cfg.report_format, ReportFormat::Json | ReportFormat::Both) {
            write_json(&self.out(stage, REPORT_JSON), &report)?;
            outs.push(REPORT_JSON.into());
        }
        if matches!(self.cfg.report_format, ReportFormat::Table | ReportFormat::Both) {
            let table = report.metrics.to_table(&format!("round {selected_round}"));
            fsutil::write_atomic(&self.out(stage, REPORT_TABLE), table.as_bytes())?;
            outs.push(REPORT_TABLE.into());
        }
        Ok(outs)
    }
}

/// Round with the best validation score; later rounds win ties, and without
/// validation scores the last round is used.
pub fn select_round(scores: &[ValidationScore]) -> usize {
    let mut best: Option<(f64, usize)> = None;
    for s in scores {
        if let Some(v) = s.val_dsc {
            if best.is_none_or(|(b, _)| v >= b) {
                best = Some((v, s.round));
            }
        }
    }
    best.map(|(_, k)| k)
        .unwrap_or_else(|| scores.last().map_or(1, |s| s.round))
}

pub fn read_report(root: &Path) -> Result<EvalReport> {
    read_json(&root.join(REPORT_JSON))
}
