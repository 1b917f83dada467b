//! Dataset model, on-disk formats and the synthetic generator.

mod format;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxXYXY;

pub use format::{
    load_dataset, read_head_checkpoint, write_dataset, write_head_checkpoint,
    write_text_embeddings, HeadCheckpoint, Manifest, ManifestFiles, ANNOTATIONS_FILE,
    FORMAT_VERSION, MANIFEST_FILE, PROPOSALS_FILE, TEXT_EMBEDDINGS_FILE,
};
pub(crate) use format::{read_json, write_json};
pub use synth::{generate_synthetic, generate_synthetic_with_truth, SynthConfig, SynthTruth};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassKind {
    Base,
    Novel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
    pub split: ClassKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbedding {
    pub class_id: u32,
    pub name: String,
    pub e_text: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u32,
    pub width: u32,
    pub height: u32,
    pub split: Split,
}

/// One region proposal with its frozen features.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalRecord {
    pub image_id: u32,
    pub bbox: BoxXYXY,
    pub objectness: f32,
    /// Penultimate classification feature, length `d_cls`.
    pub f_cls: Vec<f32>,
    /// Image-crop embedding, length `d_emb`. Stored unnormalized.
    pub e_img: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBox {
    pub image_id: u32,
    pub class_id: u32,
    pub bbox: BoxXYXY,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub d_cls: usize,
    pub d_emb: usize,
    pub classes: Vec<ClassInfo>,
    /// One entry per class, same order as `classes`.
    pub text_embeddings: Vec<ClassEmbedding>,
    pub images: Vec<ImageInfo>,
    pub proposals: Vec<ProposalRecord>,
    pub annotations: Vec<GroundTruthBox>,
}

impl Dataset {
    pub fn class_ids(&self, kind: ClassKind) -> Vec<u32> {
        self.classes
            .iter()
            .filter(|c| c.split == kind)
            .map(|c| c.id)
            .collect()
    }

    pub fn class_kind(&self, class_id: u32) -> Option<ClassKind> {
        self.classes.iter().find(|c| c.id == class_id).map(|c| c.split)
    }

    pub fn embeddings_of(&self, kind: ClassKind) -> Vec<ClassEmbedding> {
        self.text_embeddings
            .iter()
            .filter(|e| self.class_kind(e.class_id) == Some(kind))
            .cloned()
            .collect()
    }

    pub fn image_ids(&self, split: Split) -> Vec<u32> {
        self.images
            .iter()
            .filter(|i| i.split == split)
            .map(|i| i.id)
            .collect()
    }

    pub fn image_split(&self, image_id: u32) -> Option<Split> {
        self.images.iter().find(|i| i.id == image_id).map(|i| i.split)
    }

    pub fn ground_truth(&self, split: Split) -> Vec<GroundTruthBox> {
        let ids: BTreeSet<u32> = self.image_ids(split).into_iter().collect();
        self.annotations
            .iter()
            .filter(|g| ids.contains(&g.image_id))
            .cloned()
            .collect()
    }

    /// Proposal indices grouped by image id, ascending within each image.
    pub fn proposals_by_image(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, p) in self.proposals.iter().enumerate() {
            map.entry(p.image_id).or_default().push(i);
        }
        map
    }

    /// Checks dimensions, referential integrity and the class partition.
    pub fn validate(&self) -> Result<()> {
        if self.d_cls == 0 || self.d_emb == 0 {
            return Err(Error::InvalidDataset("d_cls and d_emb must be positive".into()));
        }

        let mut kinds: HashMap<u32, ClassKind> = HashMap::new();
        for c in &self.classes {
            if let Some(prev) = kinds.insert(c.id, c.split) {
                return Err(if prev != c.split {
                    Error::InvalidDataset(format!(
                        "class {} declared both base and novel",
                        c.id
                    ))
                } else {
                    Error::InvalidDataset(format!("duplicate class id {}", c.id))
                });
            }
        }

        if self.text_embeddings.len() != self.classes.len() {
            return Err(Error::InvalidDataset(format!(
                "{} text embeddings for {} classes",
                self.text_embeddings.len(),
                self.classes.len()
            )));
        }
        for (c, e) in self.classes.iter().zip(&self.text_embeddings) {
            if c.id != e.class_id {
                return Err(Error::DanglingReference(format!(
                    "text embedding for class {} where class {} expected",
                    e.class_id, c.id
                )));
            }
            if e.e_text.len() != self.d_emb {
                return Err(Error::dim(
                    format!("text embedding of class {}", c.id),
                    self.d_emb,
                    e.e_text.len(),
                ));
            }
            check_finite(&e.e_text, "text embedding")?;
            if e.e_text.iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidDataset(format!(
                    "text embedding of class {} is zero",
                    c.id
                )));
            }
        }

        let mut splits: HashMap<u32, Split> = HashMap::new();
        for img in &self.images {
            if splits.insert(img.id, img.split).is_some() {
                return Err(Error::InvalidDataset(format!("duplicate image id {}", img.id)));
            }
        }

        for (i, p) in self.proposals.iter().enumerate() {
            if !splits.contains_key(&p.image_id) {
                return Err(Error::DanglingReference(format!(
                    "proposal {i} references unknown image {}",
                    p.image_id
                )));
            }
            if p.f_cls.len() != self.d_cls {
                return Err(Error::dim(format!("f_cls of proposal {i}"), self.d_cls, p.f_cls.len()));
            }
            if p.e_img.len() != self.d_emb {
                return Err(Error::dim(format!("e_img of proposal {i}"), self.d_emb, p.e_img.len()));
            }
            if !(0.0..=1.0).contains(&p.objectness) {
                return Err(Error::InvalidDataset(format!(
                    "objectness {} of proposal {i} outside [0, 1]",
                    p.objectness
                )));
            }
            check_finite(&p.f_cls, "f_cls")?;
            check_finite(&p.e_img, "e_img")?;
        }

        for g in &self.annotations {
            let split = splits.get(&g.image_id).ok_or_else(|| {
                Error::DanglingReference(format!("annotation references unknown image {}", g.image_id))
            })?;
            let kind = kinds.get(&g.class_id).ok_or_else(|| {
                Error::DanglingReference(format!("annotation references unknown class {}", g.class_id))
            })?;
            if *split == Split::Train && *kind == ClassKind::Novel {
                return Err(Error::InvalidDataset(format!(
                    "novel class {} annotated in training image {}",
                    g.class_id, g.image_id
                )));
            }
        }
        Ok(())
    }
}

fn check_finite(v: &[f32], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidDataset(format!("non-finite value in {what}")))
    }
}
