//! Score computation and per-image detection.
//!
//! * classification score: unified sigmoid head on `f_cls`
//! * distillation score: softmax over all classes of `cos(P f_cls, e_text) / kappa`
//! * fused score: `o * s_cls` for base classes,
//!   `o * s_cls^beta * s_dis^(1 - beta)` for novel classes

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datastore::{ClassEmbedding, ClassKind, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{nms, BoxXYXY};
use crate::probe::{sigmoid_scores, ClassifierHead, DistillationProjector};
use crate::retrieval::{cosine_normalized, normalized};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionParams {
    pub beta: f64,
    pub kappa: f64,
    pub score_threshold: f64,
    pub nms_iou_threshold: f64,
    pub max_detections: usize,
    /// Multiply fused scores by proposal objectness.
    pub use_objectness: bool,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            beta: 0.8,
            kappa: 0.01,
            score_threshold: 0.05,
            nms_iou_threshold: 0.5,
            max_detections: 100,
            use_objectness: true,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::range("beta", format!("{} not in [0, 1]", self.beta)));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::range("kappa", format!("{} must be positive", self.kappa)));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::range("score_threshold", format!("{} not in [0, 1]", self.score_threshold)));
        }
        if !(0.0..=1.0).contains(&self.nms_iou_threshold) {
            return Err(Error::range("nms_iou_threshold", format!("{} not in [0, 1]", self.nms_iou_threshold)));
        }
        if self.max_detections == 0 {
            return Err(Error::range("max_detections", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u32,
    pub class_id: u32,
    #[serde(rename = "box")]
    pub bbox: BoxXYXY,
    pub score: f64,
}

/// Temperature softmax of cosine similarities between `f_dis` and each text
/// embedding. A zero `f_dis` gives uniform scores.
pub fn distillation_scores(f_dis: &[f64], all_text: &[ClassEmbedding], kappa: f64) -> Result<Vec<f64>> {
    let texts = normalized_texts(all_text, f_dis.len())?;
    distillation_scores_normalized(f_dis, &texts, kappa)
}

fn normalized_texts(all_text: &[ClassEmbedding], d_emb: usize) -> Result<Vec<Vec<f64>>> {
    all_text
        .iter()
        .map(|t| {
            if t.e_text.len() != d_emb {
                return Err(Error::dim(format!("text embedding of class {}", t.class_id), d_emb, t.e_text.len()));
            }
            normalized(&t.e_text)
                .ok_or_else(|| Error::InvalidDataset(format!("zero text embedding for class {}", t.class_id)))
        })
        .collect()
}

fn distillation_scores_normalized(f_dis: &[f64], texts: &[Vec<f64>], kappa: f64) -> Result<Vec<f64>> {
    if !(kappa > 0.0) {
        return Err(Error::range("kappa", format!("{kappa} must be positive")));
    }
    let norm = f_dis.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos: Vec<f64> = if norm == 0.0 || !norm.is_finite() {
        vec![0.0; texts.len()]
    } else {
        let unit: Vec<f64> = f_dis.iter().map(|x| x / norm).collect();
        texts.iter().map(|t| cosine_normalized(&unit, t)).collect()
    };
    Ok(softmax(&cos, kappa))
}

fn softmax(values: &[f64], temperature: f64) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `a^b` with `0^0 = 1`.
fn pow0(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        1.0
    } else {
        a.powf(b)
    }
}

pub fn fuse_scores(objectness: f64, s_cls: f64, s_dis: f64, kind: ClassKind, beta: f64) -> f64 {
    match kind {
        ClassKind::Base => objectness * s_cls,
        ClassKind::Novel => objectness * pow0(s_cls, beta) * pow0(s_dis, 1.0 - beta),
    }
}

/// How each class is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoringMode {
    /// Classifier for base classes, fused classifier and distillation for novel.
    Fused,
    /// Classifier for base classes, distillation only for novel.
    DistillationNovel,
    /// Distillation only for every class.
    SimilarityOnly,
}

/// Immutable scoring context shared by every image.
pub struct Detector<'a> {
    dataset: &'a Dataset,
    head: Option<&'a ClassifierHead>,
    projector: &'a DistillationProjector,
    texts: Vec<Vec<f64>>,
    text_ids: Vec<u32>,
    kinds: Vec<ClassKind>,
    /// Column of each text class in `head`, if scored by the classifier.
    head_columns: Vec<Option<usize>>,
    fusion: FusionParams,
    mode: ScoringMode,
}

impl<'a> Detector<'a> {
    pub fn new(
        dataset: &'a Dataset,
        head: Option<&'a ClassifierHead>,
        projector: &'a DistillationProjector,
        all_text: &[ClassEmbedding],
        fusion: &FusionParams,
        mode: ScoringMode,
    ) -> Result<Self> {
        fusion.validate()?;
        if projector.d_cls() != dataset.d_cls {
            return Err(Error::dim("projector d_cls", dataset.d_cls, projector.d_cls()));
        }
        if projector.d_emb() != dataset.d_emb {
            return Err(Error::dim("projector d_emb", dataset.d_emb, projector.d_emb()));
        }
        let texts = normalized_texts(all_text, dataset.d_emb)?;
        let text_ids: Vec<u32> = all_text.iter().map(|t| t.class_id).collect();
        let kinds = text_ids
            .iter()
            .map(|&c| {
                dataset
                    .class_kind(c)
                    .ok_or_else(|| Error::DanglingReference(format!("unknown class {c}")))
            })
            .collect::<Result<Vec<_>>>()?;

        let head_columns = match (mode, head) {
            (ScoringMode::SimilarityOnly, _) => vec![None; text_ids.len()],
            (_, None) => return Err(Error::InvalidConfig("classifier head required".into())),
            (_, Some(h)) => {
                if h.d_cls() != dataset.d_cls {
                    return Err(Error::dim("head d_cls", dataset.d_cls, h.d_cls()));
                }
                text_ids
                    .iter()
                    .zip(&kinds)
                    .map(|(&c, &kind)| {
                        if mode == ScoringMode::DistillationNovel && kind == ClassKind::Novel {
                            return Ok(None);
                        }
                        h.position(c)
                            .map(Some)
                            .ok_or_else(|| Error::DanglingReference(format!("class {c} missing from head")))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };

        Ok(Self {
            dataset,
            head,
            projector,
            texts,
            text_ids,
            kinds,
            head_columns,
            fusion: fusion.clone(),
            mode,
        })
    }

    /// Fused score of every class for one proposal, in text order.
    pub fn proposal_scores(&self, proposal: usize) -> Result<Vec<f64>> {
        let p = &self.dataset.proposals[proposal];
        let f_dis = self.projector.project(&p.f_cls)?;
        let s_dis = distillation_scores_normalized(&f_dis, &self.texts, self.fusion.kappa)?;
        let s_cls = match (self.mode, self.head) {
            (ScoringMode::SimilarityOnly, _) | (_, None) => Vec::new(),
            (_, Some(h)) => sigmoid_scores(h, &p.f_cls)?,
        };
        let o = if self.fusion.use_objectness { p.objectness as f64 } else { 1.0 };

        Ok((0..self.text_ids.len())
            .map(|c| match self.head_columns[c] {
                None => o * s_dis[c],
                Some(col) => fuse_scores(o, s_cls[col], s_dis[c], self.kinds[c], self.fusion.beta),
            })
            .map(|s| s.clamp(0.0, 1.0))
            .collect())
    }

    /// Threshold, class-wise NMS and the per-image cap.
    pub fn detect(&self, image_id: u32, proposals: &[usize]) -> Result<Vec<Detection>> {
        // (proposal, class position, score)
        let mut per_class: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
        for &pi in proposals {
            for (c, s) in self.proposal_scores(pi)?.into_iter().enumerate() {
                if s >= self.fusion.score_threshold && s > 0.0 {
                    per_class.entry(c).or_default().push((pi, s));
                }
            }
        }

        let mut kept: Vec<(usize, usize, f64)> = Vec::new();
        for (c, cands) in per_class {
            let boxes: Vec<(BoxXYXY, f64)> = cands
                .iter()
                .map(|&(pi, s)| (self.dataset.proposals[pi].bbox, s))
                .collect();
            for k in nms(&boxes, self.fusion.nms_iou_threshold) {
                kept.push((cands[k].0, c, cands[k].1));
            }
        }
        kept.sort_by(|a, b| {
            b.2.total_cmp(&a.2)
                .then(a.0.cmp(&b.0))
                .then(self.text_ids[a.1].cmp(&self.text_ids[b.1]))
        });
        kept.truncate(self.fusion.max_detections);

        Ok(kept
            .into_iter()
            .map(|(pi, c, score)| Detection {
                image_id,
                class_id: self.text_ids[c],
                bbox: self.dataset.proposals[pi].bbox,
                score,
            })
            .collect())
    }
}

fn image_proposals(dataset: &Dataset, image_id: u32) -> Vec<usize> {
    dataset
        .proposals
        .iter()
        .enumerate()
        .filter(|(_, p)| p.image_id == image_id)
        .map(|(i, _)| i)
        .collect()
}

/// Detections for one image with the unified head and fused scores.
pub fn detect_image(
    dataset: &Dataset,
    image_id: u32,
    unified_head: &ClassifierHead,
    projector: &DistillationProjector,
    fusion: &FusionParams,
) -> Result<Vec<Detection>> {
    let detector = Detector::new(
        dataset,
        Some(unified_head),
        projector,
        &dataset.text_embeddings,
        fusion,
        ScoringMode::Fused,
    )?;
    detector.detect(image_id, &image_proposals(dataset, image_id))
}

/// Similarity-only baseline: every class scored `o * s_dis`.
pub fn baseline_similarity_detect(
    dataset: &Dataset,
    image_id: u32,
    projector: &DistillationProjector,
    all_text: &[ClassEmbedding],
    fusion: &FusionParams,
) -> Result<Vec<Detection>> {
    let detector = Detector::new(dataset, None, projector, all_text, fusion, ScoringMode::SimilarityOnly)?;
    detector.detect(image_id, &image_proposals(dataset, image_id))
}

/// Runs `detector` over `image_ids` in parallel; output keeps image order.
pub fn detect_images(detector: &Detector<'_>, image_ids: &[u32]) -> Result<Vec<Detection>> {
    use rayon::prelude::*;
    let by_image = detector.dataset.proposals_by_image();
    let empty = Vec::new();
    let per_image: Vec<Result<Vec<Detection>>> = image_ids
        .par_iter()
        .map(|id| detector.detect(*id, by_image.get(id).unwrap_or(&empty)))
        .collect();
    let mut out = Vec::new();
    for r in per_image {
        out.extend(r?);
    }
    Ok(out)
}

/// JSON lines sorted by image id, then descending score.
pub fn write_detections_jsonl(path: &Path, detections: &[Detection]) -> Result<()> {
    let mut sorted = detections.to_vec();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id).then(b.score.total_cmp(&a.score)));
    let mut buf = Vec::new();
    for d in &sorted {
        serde_json::to_writer(&mut buf, d).expect("detection serializes");
        buf.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_detections_jsonl(path: &Path) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.into(),
                detail: format!("line {}: {e}", n + 1),
            })
        })
        .collect()
}
