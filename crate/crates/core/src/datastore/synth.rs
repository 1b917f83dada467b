//! Seeded synthetic detection data.
//!
//! Every class owns two random unit prototypes in the classification-feature
//! space (an appearance one and a semantic one) and one in the embedding
//! space. A proposal drawn around an object of class `c` with IoU `q` to it
//! gets
//!
//! * `f_cls = scale * (m * proto_cls[c] + (1 - m) * proto_bg + semantic_strength * proto_sem[c]
//!   + sigma_cls * noise)` with `m = clamp(q + feature_quality_noise * noise)`:
//!   poorly localized crops drift toward the background appearance while
//!   keeping their class semantics,
//! * `e_img = proto_emb[c] + sigma_emb * noise`: the embedding ignores box quality,
//! * `objectness = clamp(offset + slope * q + objectness_noise * noise)`.
//!
//! Low-quality proposals can be blind spots: with `feature_blind_fraction`
//! their `f_cls` is built from a quality drawn from the high band (a part of
//! the object that still looks like the whole object), and with
//! `objectness_blind_fraction` their objectness is (a confident but poorly
//! fitted box). Each score alone therefore misses some bad boxes.
//!
//! Training images annotate base-class objects only; novel objects are
//! present but unlabeled. Test images annotate every object.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ClassEmbedding, ClassInfo, ClassKind, Dataset, GroundTruthBox, ImageInfo, ProposalRecord, Split};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoxXYXY};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_base: usize,
    pub n_novel: usize,
    pub train_images: usize,
    pub test_images: usize,
    pub objects_per_image: usize,
    pub proposals_per_object: usize,
    pub background_proposals_per_image: usize,
    pub d_cls: usize,
    pub d_emb: usize,
    pub sigma_cls: f64,
    pub sigma_emb: f64,
    /// Fraction of each object's proposals drawn with IoU in the low band.
    pub low_quality_fraction: f64,
    /// Weight of the quality-independent semantic direction in `f_cls`.
    pub semantic_strength: f64,
    /// Noise on the quality coefficient seen by `f_cls`.
    pub feature_quality_noise: f64,
    /// Share of low-quality proposals whose `f_cls` looks well localized.
    pub feature_blind_fraction: f64,
    /// Share of low-quality proposals whose objectness looks well localized.
    pub objectness_blind_fraction: f64,
    pub objectness_offset: f64,
    pub objectness_slope: f64,
    pub objectness_noise: f64,
    pub feature_scale: f64,
    pub image_width: u32,
    pub image_height: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_base: 5,
            n_novel: 3,
            train_images: 200,
            test_images: 100,
            objects_per_image: 3,
            proposals_per_object: 10,
            background_proposals_per_image: 4,
            d_cls: 32,
            d_emb: 16,
            sigma_cls: 0.05,
            sigma_emb: 0.05,
            low_quality_fraction: 0.3,
            semantic_strength: 0.75,
            feature_quality_noise: 0.05,
            feature_blind_fraction: 0.5,
            objectness_blind_fraction: 0.5,
            objectness_offset: 0.1,
            objectness_slope: 0.85,
            objectness_noise: 0.08,
            feature_scale: 4.0,
            image_width: 640,
            image_height: 480,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_base", self.n_base),
            ("n_novel", self.n_novel),
            ("train_images", self.train_images),
            ("test_images", self.test_images),
            ("objects_per_image", self.objects_per_image),
            ("proposals_per_object", self.proposals_per_object),
            ("d_cls", self.d_cls),
            ("d_emb", self.d_emb),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("synth.{name} must be positive")));
            }
        }
        let reals = [
            ("sigma_cls", self.sigma_cls),
            ("sigma_emb", self.sigma_emb),
            ("objectness_slope", self.objectness_slope),
            ("feature_quality_noise", self.feature_quality_noise),
            ("objectness_noise", self.objectness_noise),
            ("semantic_strength", self.semantic_strength),
        ];
        for (name, v) in reals {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("synth.{name} must be >= 0")));
            }
        }
        if !(self.feature_scale > 0.0 && self.feature_scale.is_finite()) {
            return Err(Error::InvalidConfig("synth.feature_scale must be positive".into()));
        }
        let blind = [
            ("feature_blind_fraction", self.feature_blind_fraction),
            ("objectness_blind_fraction", self.objectness_blind_fraction),
        ];
        for (name, v) in blind {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("synth.{name} must be in [0, 1]")));
            }
        }
        if self.feature_blind_fraction + self.objectness_blind_fraction > 1.0 {
            return Err(Error::InvalidConfig(
                "synth.feature_blind_fraction + synth.objectness_blind_fraction must not exceed 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.low_quality_fraction) {
            return Err(Error::InvalidConfig("synth.low_quality_fraction must be in [0, 1)".into()));
        }
        if self.image_width < 64 || self.image_height < 64 {
            return Err(Error::InvalidConfig("synth image size must be at least 64x64".into()));
        }
        Ok(())
    }
}

/// Generator-side facts about each proposal, indexed like `Dataset::proposals`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    /// Class of the object the proposal was drawn around; `None` for background.
    pub source_class: Vec<Option<u32>>,
    /// IoU of the proposal to its source object (0 for background).
    pub quality: Vec<f64>,
    /// Index of the source object within `objects` (or `None`).
    pub source_object: Vec<Option<usize>>,
    /// Every placed object, annotated or not.
    pub objects: Vec<GroundTruthBox>,
}

const HIGH_BAND: (f64, f64) = (0.7, 0.95);
const LOW_BAND: (f64, f64) = (0.15, 0.45);

pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    generate_synthetic_with_truth(config, seed).map(|(d, _)| d)
}

pub fn generate_synthetic_with_truth(config: &SynthConfig, seed: u64) -> Result<(Dataset, SynthTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_classes = config.n_base + config.n_novel;

    let classes: Vec<ClassInfo> = (0..n_classes)
        .map(|c| {
            let (split, name) = if c < config.n_base {
                (ClassKind::Base, format!("base_{c}"))
            } else {
                (ClassKind::Novel, format!("novel_{}", c - config.n_base))
            };
            ClassInfo { id: c as u32, name, split }
        })
        .collect();

    // Last feature prototype is the background direction.
    let proto_cls: Vec<Vec<f64>> = (0..=n_classes).map(|_| unit_vector(&mut rng, config.d_cls)).collect();
    let proto_emb: Vec<Vec<f64>> = (0..n_classes).map(|_| unit_vector(&mut rng, config.d_emb)).collect();
    let proto_sem: Vec<Vec<f64>> = (0..n_classes).map(|_| unit_vector(&mut rng, config.d_cls)).collect();

    let text_embeddings: Vec<ClassEmbedding> = classes
        .iter()
        .map(|c| ClassEmbedding {
            class_id: c.id,
            name: c.name.clone(),
            e_text: noisy(&mut rng, &proto_emb[c.id as usize], 1.0, config.sigma_emb),
        })
        .collect();

    let mut images = Vec::new();
    let mut proposals = Vec::new();
    let mut annotations = Vec::new();
    let mut truth = SynthTruth {
        source_class: Vec::new(),
        quality: Vec::new(),
        source_object: Vec::new(),
        objects: Vec::new(),
    };

    let n_images = config.train_images + config.test_images;
    let n_low = ((config.low_quality_fraction * config.proposals_per_object as f64).round() as usize)
        .min(config.proposals_per_object - 1);
    let (w, h) = (config.image_width as f64, config.image_height as f64);

    for image_idx in 0..n_images {
        let image_id = image_idx as u32;
        let split = if image_idx < config.train_images { Split::Train } else { Split::Test };
        images.push(ImageInfo {
            id: image_id,
            width: config.image_width,
            height: config.image_height,
            split,
        });

        let mut objects: Vec<(BoxXYXY, u32)> = Vec::new();
        for _ in 0..config.objects_per_image {
            let class_id = rng.gen_range(0..n_classes) as u32;
            let mut placed = random_box(&mut rng, w, h);
            for _ in 0..50 {
                if objects.iter().all(|(o, _)| iou(o, &placed) < 0.05) {
                    break;
                }
                placed = random_box(&mut rng, w, h);
            }
            objects.push((placed, class_id));
        }

        for (bbox, class_id) in &objects {
            let object_idx = truth.objects.len();
            let gt = GroundTruthBox {
                image_id,
                class_id: *class_id,
                bbox: *bbox,
            };
            truth.objects.push(gt.clone());
            if split == Split::Test || classes[*class_id as usize].split == ClassKind::Base {
                annotations.push(gt);
            }

            for k in 0..config.proposals_per_object {
                let low = k >= config.proposals_per_object - n_low;
                let band = if low { LOW_BAND } else { HIGH_BAND };
                let pbox = jittered_box(&mut rng, bbox, band, w, h);
                let q = iou(&pbox, bbox);
                // A low-quality box may look well localized to one of the two signals.
                let (feature_q, objectness_q) = if low {
                    let u: f64 = rng.gen();
                    let phantom = rng.gen_range(HIGH_BAND.0..HIGH_BAND.1);
                    if u < config.feature_blind_fraction {
                        (phantom, q)
                    } else if u < config.feature_blind_fraction + config.objectness_blind_fraction {
                        (q, phantom)
                    } else {
                        (q, q)
                    }
                } else {
                    (q, q)
                };
                let zq: f64 = rng.sample(StandardNormal);
                let mix = (feature_q + config.feature_quality_noise * zq).clamp(0.0, 1.0);
                let c = *class_id as usize;
                let base: Vec<f64> = (0..config.d_cls)
                    .map(|j| {
                        mix * proto_cls[c][j]
                            + (1.0 - mix) * proto_cls[n_classes][j]
                            + config.semantic_strength * proto_sem[c][j]
                    })
                    .collect();
                let f_cls = noisy(&mut rng, &base, config.feature_scale, config.sigma_cls);
                let e_img = noisy(&mut rng, &proto_emb[*class_id as usize], 1.0, config.sigma_emb);
                let z: f64 = rng.sample(StandardNormal);
                let objectness = (config.objectness_offset
                    + config.objectness_slope * objectness_q
                    + config.objectness_noise * z)
                    .clamp(0.0, 1.0) as f32;
                proposals.push(ProposalRecord {
                    image_id,
                    bbox: pbox,
                    objectness,
                    f_cls,
                    e_img,
                });
                truth.source_class.push(Some(*class_id));
                truth.quality.push(q);
                truth.source_object.push(Some(object_idx));
            }
        }

        for _ in 0..config.background_proposals_per_image {
            let mut pbox = random_box(&mut rng, w, h);
            for _ in 0..50 {
                if objects.iter().all(|(o, _)| iou(o, &pbox) < 0.1) {
                    break;
                }
                pbox = random_box(&mut rng, w, h);
            }
            let f_cls = noisy(&mut rng, &proto_cls[n_classes], config.feature_scale, config.sigma_cls);
            let direction = unit_vector(&mut rng, config.d_emb);
            let e_img = noisy(&mut rng, &direction, 1.0, config.sigma_emb);
            let z: f64 = rng.sample(StandardNormal);
            let objectness = (0.1 + config.objectness_noise * z).clamp(0.0, 1.0) as f32;
            proposals.push(ProposalRecord {
                image_id,
                bbox: pbox,
                objectness,
                f_cls,
                e_img,
            });
            truth.source_class.push(None);
            truth.quality.push(0.0);
            truth.source_object.push(None);
        }
    }

    let dataset = Dataset {
        d_cls: config.d_cls,
        d_emb: config.d_emb,
        classes,
        text_embeddings,
        images,
        proposals,
        annotations,
    };
    dataset.validate()?;
    Ok((dataset, truth))
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `scale * (mean + sigma * N(0, I))`, rounded to f32.
fn noisy(rng: &mut ChaCha8Rng, mean: &[f64], scale: f64, sigma: f64) -> Vec<f32> {
    mean.iter()
        .map(|m| {
            let z: f64 = rng.sample(StandardNormal);
            (scale * (m + sigma * z)) as f32
        })
        .collect()
}

fn snap(v: f64) -> f32 {
    // Quarter-pixel grid keeps coordinates exact in f32.
    ((v * 4.0).round() / 4.0) as f32
}

fn make_box(x1: f64, y1: f64, x2: f64, y2: f64, w: f64, h: f64) -> Option<BoxXYXY> {
    let (x1, x2) = (snap(x1.clamp(0.0, w)), snap(x2.clamp(0.0, w)));
    let (y1, y2) = (snap(y1.clamp(0.0, h)), snap(y2.clamp(0.0, h)));
    if x2 - x1 < 2.0 || y2 - y1 < 2.0 {
        return None;
    }
    BoxXYXY::new(x1, y1, x2, y2).ok()
}

fn random_box(rng: &mut ChaCha8Rng, w: f64, h: f64) -> BoxXYXY {
    let max_side = (w.min(h) * 0.4).max(8.0);
    let min_side = (max_side * 0.3).max(4.0);
    let bw = rng.gen_range(min_side..max_side);
    let bh = rng.gen_range(min_side..max_side);
    let x1 = rng.gen_range(0.0..w - bw);
    let y1 = rng.gen_range(0.0..h - bh);
    make_box(x1, y1, x1 + bw, y1 + bh, w, h).expect("box inside image")
}

/// Perturbs `gt` until its IoU with `gt` falls inside `band`.
fn jittered_box(rng: &mut ChaCha8Rng, gt: &BoxXYXY, band: (f64, f64), w: f64, h: f64) -> BoxXYXY {
    let (bw, bh) = (gt.width(), gt.height());
    let spread = if band.0 >= 0.5 { 0.08 } else { 0.45 };
    for _ in 0..500 {
        let d: [f64; 4] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal) * spread);
        let cand = make_box(
            gt.x1() as f64 + d[0] * bw,
            gt.y1() as f64 + d[1] * bh,
            gt.x2() as f64 + d[2] * bw,
            gt.y2() as f64 + d[3] * bh,
            w,
            h,
        );
        if let Some(b) = cand {
            let q = iou(&b, gt);
            if q >= band.0 && q <= band.1 {
                return b;
            }
        }
    }
    // Centered shrink: a box scaled by s inside the original has IoU s^2.
    let s = ((band.0 + band.1) / 2.0).sqrt();
    let (cx, cy) = ((gt.x1() as f64 + gt.x2() as f64) / 2.0, (gt.y1() as f64 + gt.y2() as f64) / 2.0);
    make_box(cx - s * bw / 2.0, cy - s * bh / 2.0, cx + s * bw / 2.0, cy + s * bh / 2.0, w, h).unwrap_or(*gt)
}
