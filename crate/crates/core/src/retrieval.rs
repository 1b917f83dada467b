//! Objectness filtering, exact top-K cosine retrieval of pseudo ground truth,
//! and IoU-based positive/negative sampling for the novel probe.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datastore::{ClassEmbedding, ClassKind, Dataset, Split};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoxXYXY};
use crate::probe::{Target, TrainSample};
use crate::seed::mix64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub class_id: u32,
    pub proposal_index: usize,
    pub similarity: f64,
}

/// Retrieved (proposal, class) pairs, grouped by class in query order and
/// sorted by similarity descending within each class.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PseudoLabelSet {
    pub entries: Vec<PseudoLabel>,
}

impl PseudoLabelSet {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn for_class(&self, class_id: u32) -> impl Iterator<Item = &PseudoLabel> {
        self.entries.iter().filter(move |e| e.class_id == class_id)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::datastore::write_json(path, self)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        crate::datastore::read_json(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub iou_positive_threshold: f64,
    pub samples_per_image: usize,
    pub positive_fraction: f64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            iou_positive_threshold: 0.5,
            samples_per_image: 512,
            positive_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_positive_threshold > 0.0 && self.iou_positive_threshold < 1.0) {
            return Err(Error::range(
                "iou_positive_threshold",
                format!("{} not in (0, 1)", self.iou_positive_threshold),
            ));
        }
        if self.samples_per_image == 0 {
            return Err(Error::range("samples_per_image", "must be positive"));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction <= 1.0) {
            return Err(Error::range(
                "positive_fraction",
                format!("{} not in (0, 1]", self.positive_fraction),
            ));
        }
        Ok(())
    }
}

/// Training-split proposals with objectness strictly above `tau`, ascending.
/// The comparison happens at the stored (f32) precision.
pub fn filter_proposals(dataset: &Dataset, tau: f64) -> Vec<usize> {
    let tau = tau as f32;
    let train: std::collections::HashSet<u32> = dataset.image_ids(Split::Train).into_iter().collect();
    dataset
        .proposals
        .iter()
        .enumerate()
        .filter(|(_, p)| train.contains(&p.image_id) && p.objectness > tau)
        .map(|(i, _)| i)
        .collect()
}

/// L2-normalized copy in f64; `None` for a zero vector.
pub fn normalized(v: &[f32]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|&x| x as f64 / norm).collect())
}

/// Cosine similarity of two already-normalized vectors.
pub fn cosine_normalized(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Descending similarity, then ascending proposal index. Similarities are
/// finite, and `-0.0` ties with `0.0`.
fn rank(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// Exact top-`k` proposals from `filtered` for each class in `queries`.
pub fn retrieve_topk(
    dataset: &Dataset,
    filtered: &[usize],
    queries: &[ClassEmbedding],
    k: usize,
) -> Result<PseudoLabelSet> {
    if k == 0 {
        return Err(Error::range("k", "must be at least 1"));
    }
    let mut pool = Vec::with_capacity(filtered.len());
    for &i in filtered {
        let p = dataset
            .proposals
            .get(i)
            .ok_or_else(|| Error::DanglingReference(format!("filtered index {i} out of range")))?;
        if p.e_img.len() != dataset.d_emb {
            return Err(Error::dim("e_img", dataset.d_emb, p.e_img.len()));
        }
        pool.push((i, normalized(&p.e_img)));
    }
    let mut texts = Vec::with_capacity(queries.len());
    for q in queries {
        if q.e_text.len() != dataset.d_emb {
            return Err(Error::dim(format!("text embedding of class {}", q.class_id), dataset.d_emb, q.e_text.len()));
        }
        let t = normalized(&q.e_text)
            .ok_or_else(|| Error::InvalidDataset(format!("zero text embedding for class {}", q.class_id)))?;
        texts.push((q.class_id, t));
    }

    let per_class: Vec<Vec<PseudoLabel>> = texts
        .par_iter()
        .map(|(class_id, text)| {
            let mut scored: Vec<(f64, usize)> = pool
                .iter()
                .map(|(i, e)| (e.as_deref().map_or(-1.0, |e| cosine_normalized(text, e)), *i))
                .collect();
            if k < scored.len() {
                scored.select_nth_unstable_by(k - 1, rank);
                scored.truncate(k);
            }
            scored.sort_unstable_by(rank);
            scored
                .into_iter()
                .map(|(similarity, proposal_index)| PseudoLabel {
                    class_id: *class_id,
                    proposal_index,
                    similarity,
                })
                .collect()
        })
        .collect();

    Ok(PseudoLabelSet {
        entries: per_class.into_iter().flatten().collect(),
    })
}

/// Labels every training proposal against per-image reference boxes and
/// subsamples each image. Reference boxes are `(box, class_id)` keyed by image.
pub fn assign_and_sample(
    dataset: &Dataset,
    references: &BTreeMap<u32, Vec<(BoxXYXY, u32)>>,
    config: &SamplingConfig,
) -> Result<Vec<TrainSample>> {
    config.validate()?;
    let by_image = dataset.proposals_by_image();
    let images: Vec<(&u32, &Vec<(BoxXYXY, u32)>)> = references.iter().collect();

    let per_image: Vec<Vec<TrainSample>> = images
        .par_iter()
        .map(|(&image_id, refs)| {
            let Some(indices) = by_image.get(&image_id) else {
                return Vec::new();
            };
            let mut positives = Vec::new();
            let mut negatives = Vec::new();
            for &pi in indices {
                let pbox = &dataset.proposals[pi].bbox;
                let mut best: Option<(f64, u32)> = None;
                for (rbox, class_id) in refs.iter() {
                    let v = iou(pbox, rbox);
                    if v <= config.iou_positive_threshold {
                        continue;
                    }
                    best = match best {
                        Some((bv, bc)) if bv > v || (bv == v && bc <= *class_id) => Some((bv, bc)),
                        _ => Some((v, *class_id)),
                    };
                }
                match best {
                    Some((_, c)) => positives.push(TrainSample {
                        proposal: pi,
                        target: Target::Class(c),
                    }),
                    None => negatives.push(TrainSample {
                        proposal: pi,
                        target: Target::Negative,
                    }),
                }
            }

            let pos_cap = (config.samples_per_image as f64 * config.positive_fraction).floor() as usize;
            let n_pos = positives.len().min(pos_cap);
            let n_neg = negatives.len().min(config.samples_per_image - n_pos);
            let mut rng = ChaCha8Rng::seed_from_u64(mix64(config.seed ^ mix64(image_id as u64)));
            let mut chosen = subsample(&mut rng, positives, n_pos);
            chosen.extend(subsample(&mut rng, negatives, n_neg));
            chosen.sort_by_key(|s| s.proposal);
            chosen
        })
        .collect();
    Ok(per_image.into_iter().flatten().collect())
}

fn subsample(rng: &mut ChaCha8Rng, items: Vec<TrainSample>, amount: usize) -> Vec<TrainSample> {
    if amount >= items.len() {
        return items;
    }
    let mut picked = rand::seq::index::sample(rng, items.len(), amount).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| items[i]).collect()
}

/// Positive/negative samples around pseudo ground truth. Only training images
/// holding at least one pseudo box contribute.
pub fn sample_pos_neg(
    dataset: &Dataset,
    pseudo: &PseudoLabelSet,
    config: &SamplingConfig,
) -> Result<Vec<TrainSample>> {
    if pseudo.is_empty() {
        return Err(Error::EmptyPseudoLabelSet);
    }
    let mut refs: BTreeMap<u32, Vec<(BoxXYXY, u32)>> = BTreeMap::new();
    for e in &pseudo.entries {
        let p = dataset
            .proposals
            .get(e.proposal_index)
            .ok_or_else(|| Error::DanglingReference(format!("pseudo label references proposal {}", e.proposal_index)))?;
        refs.entry(p.image_id).or_default().push((p.bbox, e.class_id));
    }
    assign_and_sample(dataset, &refs, config)
}

/// Positive/negative samples around annotated base-class boxes of the
/// training split.
pub fn sample_base_training(dataset: &Dataset, config: &SamplingConfig) -> Result<Vec<TrainSample>> {
    let mut refs: BTreeMap<u32, Vec<(BoxXYXY, u32)>> = BTreeMap::new();
    for g in dataset.ground_truth(Split::Train) {
        if dataset.class_kind(g.class_id) == Some(ClassKind::Base) {
            refs.entry(g.image_id).or_default().push((g.bbox, g.class_id));
        }
    }
    assign_and_sample(dataset, &refs, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{generate_synthetic_with_truth, SynthConfig};
    use crate::testutil::{bx, unit, Fixture};
    use proptest::prelude::*;

    fn with_objectness(values: &[f32]) -> Dataset {
        let mut fx = Fixture::new(2, 2).class(0, ClassKind::Novel, unit(2, 0)).image(1, Split::Train);
        for &o in values {
            fx = fx.proposal(1, bx(0.0, 0.0, 10.0, 10.0), o, unit(2, 0), unit(2, 0));
        }
        fx.build()
    }

    fn pool(embeddings: &[Vec<f32>], texts: &[Vec<f32>]) -> (Dataset, Vec<ClassEmbedding>) {
        let d = texts[0].len();
        let mut fx = Fixture::new(1, d).image(1, Split::Train);
        for (c, t) in texts.iter().enumerate() {
            fx = fx.class(c as u32, ClassKind::Novel, t.clone());
        }
        for e in embeddings {
            fx = fx.proposal(1, bx(0.0, 0.0, 1.0, 1.0), 1.0, vec![0.0], e.clone());
        }
        let ds = fx.build();
        let queries = ds.text_embeddings.clone();
        (ds, queries)
    }

    /// Full sort of every (similarity, index) pair with the stated tie rule.
    fn brute_force(ds: &Dataset, filtered: &[usize], q: &ClassEmbedding, k: usize) -> Vec<(usize, f64)> {
        let t = normalized(&q.e_text).unwrap();
        let mut all: Vec<(usize, f64)> = filtered
            .iter()
            .map(|&i| {
                let s = match normalized(&ds.proposals[i].e_img) {
                    Some(e) => t.iter().zip(&e).map(|(a, b)| a * b).sum(),
                    None => -1.0,
                };
                (i, s)
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn filter_is_strict() {
        let ds = with_objectness(&[0.59, 0.60, 0.61]);
        assert_eq!(filter_proposals(&ds, 0.6), vec![2]);
    }

    #[test]
    fn filter_at_zero_keeps_positive_objectness() {
        let ds = with_objectness(&[0.0, 0.2, 1.0, 0.0]);
        assert_eq!(filter_proposals(&ds, 0.0), vec![1, 2]);
    }

    #[test]
    fn filter_on_empty_table() {
        assert!(filter_proposals(&with_objectness(&[]), 0.6).is_empty());
    }

    #[test]
    fn filter_skips_test_images() {
        let ds = Fixture::new(1, 1)
            .class(0, ClassKind::Novel, vec![1.0])
            .image(1, Split::Test)
            .image(2, Split::Train)
            .proposal(1, bx(0.0, 0.0, 1.0, 1.0), 0.9, vec![0.0], vec![1.0])
            .proposal(2, bx(0.0, 0.0, 1.0, 1.0), 0.9, vec![0.0], vec![1.0])
            .build();
        assert_eq!(filter_proposals(&ds, 0.5), vec![1]);
    }

    #[test]
    fn parallel_embedding_is_retrieved() {
        let (ds, q) = pool(&[vec![2.0, 0.0], vec![0.0, 3.0]], &[vec![0.0, 1.0]]);
        let out = retrieve_topk(&ds, &[0, 1], &q, 1).unwrap();
        assert_eq!(out.entries.len(), 1);
        assert_eq!(out.entries[0].proposal_index, 1);
        assert!((out.entries[0].similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let (ds, q) = pool(&[vec![0.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]], &[vec![1.0, 1.0]]);
        let out = retrieve_topk(&ds, &[0, 1, 2], &q, 1).unwrap();
        assert_eq!(out.entries[0].proposal_index, 1);
    }

    #[test]
    fn zero_embedding_ranks_last() {
        let (ds, q) = pool(&[vec![0.0, 0.0], vec![-1.0, 0.0]], &[vec![1.0, 0.0]]);
        let out = retrieve_topk(&ds, &[0, 1], &q, 2).unwrap();
        let order: Vec<usize> = out.entries.iter().map(|e| e.proposal_index).collect();
        assert_eq!(order, vec![0, 1]);
        assert_eq!(out.entries[0].similarity, -1.0);
        // -1 ties with the antiparallel vector; lower index wins.
    }

    #[test]
    fn k_zero_and_bad_dimension_rejected() {
        let (ds, q) = pool(&[vec![1.0, 0.0]], &[vec![1.0, 0.0]]);
        assert!(matches!(retrieve_topk(&ds, &[0], &q, 0), Err(Error::Range { .. })));
        let bad = vec![ClassEmbedding {
            class_id: 0,
            name: "x".into(),
            e_text: vec![1.0, 0.0, 0.0],
        }];
        assert!(matches!(retrieve_topk(&ds, &[0], &bad, 1), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn thousand_vectors_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gauss = |rng: &mut ChaCha8Rng| -> Vec<f32> {
            (0..8).map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)).collect()
        };
        let emb: Vec<Vec<f32>> = (0..1000).map(|_| gauss(&mut rng)).collect();
        let texts: Vec<Vec<f32>> = (0..3).map(|_| gauss(&mut rng)).collect();
        let (ds, q) = pool(&emb, &texts);
        let filtered: Vec<usize> = (0..1000).collect();
        let out = retrieve_topk(&ds, &filtered, &q, 100).unwrap();
        for c in &q {
            let got: Vec<(usize, f64)> = out.for_class(c.class_id).map(|e| (e.proposal_index, e.similarity)).collect();
            assert_eq!(got, brute_force(&ds, &filtered, c, 100));
        }
    }

    proptest! {
        #[test]
        fn matches_brute_force_with_ties(
            emb in prop::collection::vec(prop::collection::vec(-2i8..=2, 3), 0..40),
            texts in prop::collection::vec(prop::collection::vec(-2i8..=2, 3).prop_filter("nonzero", |v| v.iter().any(|&x| x != 0)), 1..4),
            k in 1usize..50,
        ) {
            let emb: Vec<Vec<f32>> = emb.iter().map(|v| v.iter().map(|&x| x as f32).collect()).collect();
            let texts: Vec<Vec<f32>> = texts.iter().map(|v| v.iter().map(|&x| x as f32).collect()).collect();
            let (ds, q) = pool(&emb, &texts);
            let filtered: Vec<usize> = (0..emb.len()).filter(|i| i % 3 != 1).collect();
            let out = retrieve_topk(&ds, &filtered, &q, k).unwrap();
            for c in &q {
                let got: Vec<(usize, f64)> = out.for_class(c.class_id).map(|e| (e.proposal_index, e.similarity)).collect();
                prop_assert_eq!(got.len(), k.min(filtered.len()));
                prop_assert_eq!(got, brute_force(&ds, &filtered, c, k));
            }
        }

        #[test]
        fn raising_tau_never_adds(obj in prop::collection::vec(0.0f32..=1.0, 0..30), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let ds = with_objectness(&obj);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let low = filter_proposals(&ds, lo);
            for i in filter_proposals(&ds, hi) {
                prop_assert!(low.contains(&i));
            }
        }
    }

    fn sampling_fixture(proposals: &[BoxXYXY]) -> Dataset {
        let mut fx = Fixture::new(1, 1)
            .class(3, ClassKind::Novel, vec![1.0])
            .class(5, ClassKind::Novel, vec![1.0])
            .image(1, Split::Train);
        for b in proposals {
            fx = fx.proposal(1, *b, 1.0, vec![0.0], vec![1.0]);
        }
        fx.build()
    }

    fn label(ds: &Dataset, pseudo: Vec<PseudoLabel>) -> Vec<TrainSample> {
        sample_pos_neg(ds, &PseudoLabelSet { entries: pseudo }, &SamplingConfig::default()).unwrap()
    }

    fn pl(class_id: u32, proposal_index: usize) -> PseudoLabel {
        PseudoLabel {
            class_id,
            proposal_index,
            similarity: 1.0,
        }
    }

    #[test]
    fn iou_threshold_is_strict() {
        let ds = sampling_fixture(&[bx(0.0, 0.0, 10.0, 10.0), bx(0.0, 0.0, 10.0, 6.0), bx(0.0, 0.0, 10.0, 5.0)]);
        let samples = label(&ds, vec![pl(3, 0)]);
        assert_eq!(
            samples,
            vec![
                TrainSample { proposal: 0, target: Target::Class(3) },
                TrainSample { proposal: 1, target: Target::Class(3) },
                TrainSample { proposal: 2, target: Target::Negative },
            ]
        );
    }

    #[test]
    fn highest_iou_wins_then_lower_class() {
        let ds = sampling_fixture(&[
            bx(0.0, 0.0, 10.0, 10.0),
            bx(0.0, 0.0, 10.0, 8.0),
            bx(0.0, 2.0, 10.0, 10.0),
            bx(0.0, 1.0, 10.0, 9.0),
        ]);
        // Proposal 3 overlaps both pseudo boxes equally (IoU 7/9).
        let samples = label(&ds, vec![pl(5, 1), pl(3, 2)]);
        let targets: Vec<Target> = samples.iter().map(|s| s.target).collect();
        assert_eq!(targets[1], Target::Class(5));
        assert_eq!(targets[2], Target::Class(3));
        assert_eq!(targets[3], Target::Class(3));
        // Proposal 0: IoU 0.8 to both, so the lower class id wins.
        assert_eq!(targets[0], Target::Class(3));
    }

    #[test]
    fn subsampling_counts() {
        let mut boxes = vec![bx(0.0, 0.0, 10.0, 10.0); 10];
        for i in 0..600 {
            let x = 20.0 + (i % 30) as f32 * 2.0;
            let y = 20.0 + (i / 30) as f32 * 2.0;
            boxes.push(bx(x, y, x + 1.0, y + 1.0));
        }
        let ds = sampling_fixture(&boxes);
        let samples = label(&ds, vec![pl(3, 0)]);
        let pos = samples.iter().filter(|s| s.target != Target::Negative).count();
        let neg = samples.len() - pos;
        assert_eq!((pos, neg), (10, 502));
        assert_eq!(samples, label(&ds, vec![pl(3, 0)]));
    }

    #[test]
    fn positive_cap_applies() {
        let mut boxes = vec![bx(0.0, 0.0, 10.0, 10.0); 200];
        boxes.push(bx(50.0, 50.0, 60.0, 60.0));
        let ds = sampling_fixture(&boxes);
        let samples = label(&ds, vec![pl(3, 0)]);
        let pos = samples.iter().filter(|s| s.target != Target::Negative).count();
        assert_eq!((pos, samples.len()), (128, 129));
    }

    #[test]
    fn empty_pseudo_set_rejected() {
        let ds = sampling_fixture(&[bx(0.0, 0.0, 1.0, 1.0)]);
        let err = sample_pos_neg(&ds, &PseudoLabelSet::default(), &SamplingConfig::default());
        assert!(matches!(err, Err(Error::EmptyPseudoLabelSet)));
    }

    #[test]
    fn retrieval_precision_on_synthetic_data() {
        let (ds, truth) = generate_synthetic_with_truth(&SynthConfig::default(), 0).unwrap();
        let filtered = filter_proposals(&ds, 0.6);
        let novel = ds.embeddings_of(ClassKind::Novel);
        let set = retrieve_topk(&ds, &filtered, &novel, 100).unwrap();
        for q in &novel {
            let hits: Vec<_> = set.for_class(q.class_id).collect();
            assert_eq!(hits.len(), 100);
            let correct = hits
                .iter()
                .filter(|e| truth.source_class[e.proposal_index] == Some(q.class_id))
                .count();
            assert!(correct as f64 / hits.len() as f64 >= 0.9, "class {}: {correct}/100", q.class_id);
        }
    }
}
