//! AP at a fixed IoU threshold with greedy one-to-one matching and all-point
//! (precision envelope) interpolation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datastore::{ClassKind, Dataset, GroundTruthBox, Split};
use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::inference::Detection;

/// TP/FP flag per detection, in the given order. Detections must belong to a
/// single class and be sorted by descending score.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruthBox], iou_threshold: f64) -> Vec<bool> {
    let mut by_image: HashMap<u32, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id).or_default().push(i);
    }
    let mut matched = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let Some(candidates) = by_image.get(&d.image_id) else {
                return false;
            };
            let mut best: Option<(f64, usize)> = None;
            for &g in candidates {
                if matched[g] {
                    continue;
                }
                let v = iou(&d.bbox, &gts[g].bbox);
                if v >= iou_threshold && best.map_or(true, |(bv, _)| v > bv) {
                    best = Some((v, g));
                }
            }
            match best {
                Some((_, g)) => {
                    matched[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Area under the precision-recall curve using the monotone precision
/// envelope. Zero when `n_gt == 0`.
pub fn average_precision(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &hit) in flags.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let step = 1.0 / n_gt as f64;
    flags
        .iter()
        .zip(&precision)
        .filter(|(hit, _)| **hit)
        .map(|(_, p)| step * p)
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub gt: BTreeMap<u32, usize>,
    pub detections: BTreeMap<u32, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP of every class with at least one ground-truth box.
    pub per_class: BTreeMap<u32, f64>,
    pub ap_novel: f64,
    pub ap_base: f64,
    pub ap_all: f64,
    pub counts: EvalCounts,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::datastore::write_json(path, self)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        crate::datastore::read_json(path)
    }

    /// Plain-text summary: the three aggregates, then one line per class.
    pub fn to_table(&self, dataset: &Dataset) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>10} {:>10} {:>10}", "AP_novel", "AP_base", "AP");
        let _ = writeln!(
            s,
            "{:>10.1} {:>10.1} {:>10.1}",
            100.0 * self.ap_novel,
            100.0 * self.ap_base,
            100.0 * self.ap_all
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "{:>6} {:<16} {:<6} {:>6} {:>6} {:>8}", "id", "name", "kind", "gt", "dets", "AP50");
        for c in &dataset.classes {
            let kind = match c.split {
                ClassKind::Base => "base",
                ClassKind::Novel => "novel",
            };
            let ap = self
                .per_class
                .get(&c.id)
                .map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
            let _ = writeln!(
                s,
                "{:>6} {:<16} {:<6} {:>6} {:>6} {:>8}",
                c.id,
                c.name,
                kind,
                self.counts.gt.get(&c.id).copied().unwrap_or(0),
                self.counts.detections.get(&c.id).copied().unwrap_or(0),
                ap
            );
        }
        s
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Evaluates detections against the test split.
pub fn evaluate_dataset(dataset: &Dataset, detections: &[Detection], iou_threshold: f64) -> Result<EvalReport> {
    let kinds: HashMap<u32, ClassKind> = dataset.classes.iter().map(|c| (c.id, c.split)).collect();
    for d in detections {
        match dataset.image_split(d.image_id) {
            Some(Split::Test) => {}
            Some(Split::Train) => {
                return Err(Error::DanglingReference(format!(
                    "detection on training image {}",
                    d.image_id
                )))
            }
            None => return Err(Error::DanglingReference(format!("detection on unknown image {}", d.image_id))),
        }
        if !kinds.contains_key(&d.class_id) {
            return Err(Error::DanglingReference(format!("detection of unknown class {}", d.class_id)));
        }
    }

    let gts = dataset.ground_truth(Split::Test);
    let mut per_class = BTreeMap::new();
    let mut gt_counts = BTreeMap::new();
    let mut det_counts = BTreeMap::new();
    let (mut novel, mut base) = (Vec::new(), Vec::new());

    for class in &dataset.classes {
        let class_gts: Vec<GroundTruthBox> = gts.iter().filter(|g| g.class_id == class.id).cloned().collect();
        let mut class_dets: Vec<Detection> = detections.iter().filter(|d| d.class_id == class.id).copied().collect();
        class_dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.image_id.cmp(&b.image_id)));
        gt_counts.insert(class.id, class_gts.len());
        det_counts.insert(class.id, class_dets.len());
        if class_gts.is_empty() {
            continue;
        }
        let flags = match_detections(&class_dets, &class_gts, iou_threshold);
        let ap = average_precision(&flags, class_gts.len());
        per_class.insert(class.id, ap);
        match class.split {
            ClassKind::Novel => novel.push(ap),
            ClassKind::Base => base.push(ap),
        }
    }

    let all: Vec<f64> = per_class.values().copied().collect();
    Ok(EvalReport {
        per_class,
        ap_novel: mean(&novel),
        ap_base: mean(&base),
        ap_all: mean(&all),
        counts: EvalCounts {
            gt: gt_counts,
            detections: det_counts,
        },
    })
}
