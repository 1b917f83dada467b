//! Stage functions behind the CLI, plus the sweep and ablation harnesses.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::PipelineConfig;
use crate::datastore::{
    generate_synthetic, load_dataset, read_head_checkpoint, write_dataset, write_head_checkpoint, ClassKind,
    Dataset, HeadCheckpoint, Split,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, EvalReport};
use crate::inference::{detect_images, write_detections_jsonl, Detection, Detector, FusionParams, ScoringMode};
use crate::probe::{concat_heads, train_classifier_head, train_distillation_head, ClassifierHead};
use crate::retrieval::{filter_proposals, retrieve_topk, sample_base_training, sample_pos_neg, PseudoLabelSet};

pub const BASE_HEAD_FILE: &str = "base_head.ovhd";
pub const NOVEL_HEAD_FILE: &str = "novel_head.ovhd";
pub const UNIFIED_HEAD_FILE: &str = "unified_head.ovhd";
pub const PSEUDO_LABELS_FILE: &str = "pseudo_labels.json";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_TABLE_FILE: &str = "report.txt";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

/// Fixed artifact locations under an output directory.
#[derive(Debug, Clone)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn ensure(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))
    }
}

/// Generates the synthetic dataset described by `cfg.synth` into `dir`.
pub fn synthesize(cfg: &PipelineConfig, dir: &Path) -> Result<(Dataset, PathBuf)> {
    let dataset = generate_synthetic(&cfg.synth, cfg.synth_seed())?;
    let manifest = write_dataset(&dataset, dir)?;
    Ok((dataset, manifest))
}

/// Base sigmoid head over annotated base classes plus the distillation projector.
pub fn train_base(dataset: &Dataset, cfg: &PipelineConfig) -> Result<HeadCheckpoint> {
    let base_ids = dataset.class_ids(ClassKind::Base);
    let samples = sample_base_training(dataset, &cfg.base_sampling())?;
    let head = train_classifier_head(dataset, &samples, &base_ids, cfg.focal, &cfg.base_schedule())?;

    let train_images: std::collections::HashSet<u32> = dataset.image_ids(Split::Train).into_iter().collect();
    let distill_indices: Vec<usize> = dataset
        .proposals
        .iter()
        .enumerate()
        .filter(|(_, p)| train_images.contains(&p.image_id))
        .map(|(i, _)| i)
        .collect();
    let projector = train_distillation_head(dataset, &distill_indices, &cfg.distill_schedule())?;
    Ok(HeadCheckpoint {
        head,
        projector: Some(projector),
    })
}

pub fn retrieve(dataset: &Dataset, cfg: &PipelineConfig, k: usize) -> Result<PseudoLabelSet> {
    let filtered = filter_proposals(dataset, cfg.tau);
    retrieve_topk(dataset, &filtered, &dataset.embeddings_of(ClassKind::Novel), k)
}

/// Novel sigmoid head trained on pseudo-label samples.
pub fn probe(dataset: &Dataset, pseudo: &PseudoLabelSet, cfg: &PipelineConfig) -> Result<ClassifierHead> {
    let novel_ids = dataset.class_ids(ClassKind::Novel);
    let samples = sample_pos_neg(dataset, pseudo, &cfg.probe_sampling())?;
    train_classifier_head(dataset, &samples, &novel_ids, cfg.focal, &cfg.probe_schedule())
}

/// Detections over every test image.
pub fn infer(
    dataset: &Dataset,
    head: Option<&ClassifierHead>,
    ckpt: &HeadCheckpoint,
    fusion: &FusionParams,
    mode: ScoringMode,
) -> Result<Vec<Detection>> {
    let projector = ckpt
        .projector
        .as_ref()
        .ok_or_else(|| Error::InvalidDataset("checkpoint lacks a distillation projector".into()))?;
    let detector = Detector::new(dataset, head, projector, &dataset.text_embeddings, fusion, mode)?;
    detect_images(&detector, &dataset.image_ids(Split::Test))
}

pub fn evaluate(dataset: &Dataset, detections: &[Detection], cfg: &PipelineConfig) -> Result<EvalReport> {
    evaluate_dataset(dataset, detections, cfg.eval_iou_threshold)
}

/// Everything `run-all` produced, in memory.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub base: HeadCheckpoint,
    pub novel: ClassifierHead,
    pub unified: HeadCheckpoint,
    pub pseudo: PseudoLabelSet,
    pub detections: Vec<Detection>,
    pub report: EvalReport,
}

/// Loads the configured dataset, or synthesizes one under `<out>/dataset`
/// when no dataset path is configured and none exists yet.
pub fn load_or_synthesize(cfg: &PipelineConfig, layout: &OutputLayout) -> Result<Dataset> {
    let manifest = cfg.manifest_path();
    if cfg.dataset.is_none() && !manifest.exists() {
        let (dataset, _) = synthesize(cfg, &layout.path("dataset"))?;
        return Ok(dataset);
    }
    load_dataset(&manifest)
}

/// All stages in memory, no files written.
pub fn run_stages(dataset: &Dataset, cfg: &PipelineConfig) -> Result<RunOutcome> {
    let base = train_base(dataset, cfg)?;
    let pseudo = retrieve(dataset, cfg, cfg.k)?;
    let novel = probe(dataset, &pseudo, cfg)?;
    let unified = HeadCheckpoint {
        head: concat_heads(&base.head, &novel)?,
        projector: base.projector.clone(),
    };
    let detections = infer(dataset, Some(&unified.head), &unified, &cfg.fusion(), ScoringMode::Fused)?;
    let report = evaluate(dataset, &detections, cfg)?;
    Ok(RunOutcome {
        base,
        novel,
        unified,
        pseudo,
        detections,
        report,
    })
}

pub fn run_all(cfg: &PipelineConfig, layout: &OutputLayout) -> Result<RunOutcome> {
    layout.ensure()?;
    let dataset = load_or_synthesize(cfg, layout)?;
    let outcome = run_stages(&dataset, cfg)?;
    write_head_checkpoint(&layout.path(BASE_HEAD_FILE), &outcome.base)?;
    write_head_checkpoint(
        &layout.path(NOVEL_HEAD_FILE),
        &HeadCheckpoint {
            head: outcome.novel.clone(),
            projector: None,
        },
    )?;
    write_head_checkpoint(&layout.path(UNIFIED_HEAD_FILE), &outcome.unified)?;
    outcome.pseudo.write_json(&layout.path(PSEUDO_LABELS_FILE))?;
    write_detections_jsonl(&layout.path(DETECTIONS_FILE), &outcome.detections)?;
    write_report(&dataset, &outcome.report, layout)?;
    Ok(outcome)
}

pub fn write_report(dataset: &Dataset, report: &EvalReport, layout: &OutputLayout) -> Result<()> {
    report.write_json(&layout.path(REPORT_FILE))?;
    let path = layout.path(REPORT_TABLE_FILE);
    std::fs::write(&path, report.to_table(dataset)).map_err(|e| Error::io(&path, e))
}

pub fn read_checkpoint(layout: &OutputLayout, name: &str) -> Result<HeadCheckpoint> {
    read_head_checkpoint(&layout.path(name))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    K,
    Beta,
}

impl std::str::FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "k" | "K" => Ok(SweepParam::K),
            "beta" => Ok(SweepParam::Beta),
            other => Err(format!("unknown sweep parameter `{other}` (expected `k` or `beta`)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub ap_novel: f64,
    pub ap_base: f64,
    pub ap_all: f64,
}

/// AP per swept value. Base training happens once; a K sweep re-runs
/// retrieval and probing per value, a beta sweep re-runs inference only.
pub fn sweep(dataset: &Dataset, cfg: &PipelineConfig, param: SweepParam, values: &[f64]) -> Result<Vec<SweepRow>> {
    let base = train_base(dataset, cfg)?;
    let row = |value: f64, r: &EvalReport| SweepRow {
        value,
        ap_novel: r.ap_novel,
        ap_base: r.ap_base,
        ap_all: r.ap_all,
    };

    let mut rows = Vec::with_capacity(values.len());
    match param {
        SweepParam::K => {
            for &v in values {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(Error::range("k", format!("{v} is not a positive integer")));
                }
                let pseudo = retrieve(dataset, cfg, v as usize)?;
                let novel = probe(dataset, &pseudo, cfg)?;
                let unified = concat_heads(&base.head, &novel)?;
                let dets = infer(dataset, Some(&unified), &base, &cfg.fusion(), ScoringMode::Fused)?;
                rows.push(row(v, &evaluate(dataset, &dets, cfg)?));
            }
        }
        SweepParam::Beta => {
            let pseudo = retrieve(dataset, cfg, cfg.k)?;
            let novel = probe(dataset, &pseudo, cfg)?;
            let unified = concat_heads(&base.head, &novel)?;
            for &v in values {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::range("beta", format!("{v} not in [0, 1]")));
                }
                let fusion = FusionParams { beta: v, ..cfg.fusion() };
                let dets = infer(dataset, Some(&unified), &base, &fusion, ScoringMode::Fused)?;
                rows.push(row(v, &evaluate(dataset, &dets, cfg)?));
            }
        }
    }
    Ok(rows)
}

pub fn sweep_csv(param: SweepParam, rows: &[SweepRow]) -> String {
    let name = match param {
        SweepParam::K => "k",
        SweepParam::Beta => "beta",
    };
    let mut s = format!("{name},ap_novel,ap_base,ap_all\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", r.value, r.ap_novel, r.ap_base, r.ap_all);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: &'static str,
    pub ap_novel: f64,
    pub ap_base: f64,
    pub ap_all: f64,
}

/// Component ablations on one trained set of heads:
///
/// * `full`: fused scores with objectness
/// * `no_objectness`: fused scores without the objectness factor
/// * `no_retrieval`: base classifier, novel classes scored by distillation only
/// * `similarity_baseline`: every class scored `o * s_dis`
pub fn ablate(dataset: &Dataset, cfg: &PipelineConfig) -> Result<Vec<AblationRow>> {
    let base = train_base(dataset, cfg)?;
    let pseudo = retrieve(dataset, cfg, cfg.k)?;
    let novel = probe(dataset, &pseudo, cfg)?;
    let unified = concat_heads(&base.head, &novel)?;
    let fusion = cfg.fusion();
    let no_obj = FusionParams {
        use_objectness: false,
        ..fusion.clone()
    };

    let variants: [(&'static str, &FusionParams, ScoringMode); 4] = [
        ("full", &fusion, ScoringMode::Fused),
        ("no_objectness", &no_obj, ScoringMode::Fused),
        ("no_retrieval", &fusion, ScoringMode::DistillationNovel),
        ("similarity_baseline", &fusion, ScoringMode::SimilarityOnly),
    ];
    variants
        .into_iter()
        .map(|(variant, f, mode)| {
            let dets = infer(dataset, Some(&unified), &base, f, mode)?;
            let r = evaluate(dataset, &dets, cfg)?;
            Ok(AblationRow {
                variant,
                ap_novel: r.ap_novel,
                ap_base: r.ap_base,
                ap_all: r.ap_all,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,ap_novel,ap_base,ap_all\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", r.variant, r.ap_novel, r.ap_base, r.ap_all);
    }
    s
}
