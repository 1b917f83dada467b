//! Hand-built fixtures for unit tests.

use crate::datastore::{ClassEmbedding, ClassInfo, ClassKind, Dataset, GroundTruthBox, ImageInfo, ProposalRecord, Split};
use crate::geometry::BoxXYXY;

pub fn bx(x1: f32, y1: f32, x2: f32, y2: f32) -> BoxXYXY {
    BoxXYXY::new(x1, y1, x2, y2).unwrap()
}

pub struct Fixture {
    pub ds: Dataset,
}

impl Fixture {
    pub fn new(d_cls: usize, d_emb: usize) -> Self {
        Self {
            ds: Dataset {
                d_cls,
                d_emb,
                classes: Vec::new(),
                text_embeddings: Vec::new(),
                images: Vec::new(),
                proposals: Vec::new(),
                annotations: Vec::new(),
            },
        }
    }

    pub fn class(mut self, id: u32, split: ClassKind, e_text: Vec<f32>) -> Self {
        let name = format!("c{id}");
        self.ds.classes.push(ClassInfo {
            id,
            name: name.clone(),
            split,
        });
        self.ds.text_embeddings.push(ClassEmbedding {
            class_id: id,
            name,
            e_text,
        });
        self
    }

    pub fn image(mut self, id: u32, split: Split) -> Self {
        self.ds.images.push(ImageInfo {
            id,
            width: 100,
            height: 100,
            split,
        });
        self
    }

    pub fn proposal(mut self, image_id: u32, bbox: BoxXYXY, objectness: f32, f_cls: Vec<f32>, e_img: Vec<f32>) -> Self {
        self.ds.proposals.push(ProposalRecord {
            image_id,
            bbox,
            objectness,
            f_cls,
            e_img,
        });
        self
    }

    pub fn gt(mut self, image_id: u32, class_id: u32, bbox: BoxXYXY) -> Self {
        self.ds.annotations.push(GroundTruthBox {
            image_id,
            class_id,
            bbox,
        });
        self
    }

    pub fn build(self) -> Dataset {
        self.ds
    }
}

/// One-hot vector of length `n`.
pub fn unit(n: usize, i: usize) -> Vec<f32> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}
