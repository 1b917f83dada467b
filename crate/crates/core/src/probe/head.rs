use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear sigmoid classifier: one weight row and one bias per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    class_ids: Vec<u32>,
    d_cls: usize,
    /// Row-major, `class_ids.len() x d_cls`.
    weights: Vec<f32>,
    biases: Vec<f32>,
}

impl ClassifierHead {
    pub fn new(class_ids: Vec<u32>, d_cls: usize, weights: Vec<f32>, biases: Vec<f32>) -> Result<Self> {
        let n = class_ids.len();
        if weights.len() != n * d_cls {
            return Err(Error::dim("head weights", n * d_cls, weights.len()));
        }
        if biases.len() != n {
            return Err(Error::dim("head biases", n, biases.len()));
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("non-finite head parameter".into()));
        }
        let mut seen = class_ids.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidDataset("duplicate class id in head".into()));
        }
        Ok(Self {
            class_ids,
            d_cls,
            weights,
            biases,
        })
    }

    pub fn zeros(class_ids: Vec<u32>, d_cls: usize) -> Self {
        let n = class_ids.len();
        Self {
            class_ids,
            d_cls,
            weights: vec![0.0; n * d_cls],
            biases: vec![0.0; n],
        }
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn d_cls(&self) -> usize {
        self.d_cls
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn biases(&self) -> &[f32] {
        &self.biases
    }

    pub fn row(&self, class_idx: usize) -> &[f32] {
        &self.weights[class_idx * self.d_cls..(class_idx + 1) * self.d_cls]
    }

    pub fn position(&self, class_id: u32) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }

    /// Raw per-class logits `W f + b`.
    pub fn logits(&self, f: &[f32]) -> Result<Vec<f64>> {
        if f.len() != self.d_cls {
            return Err(Error::dim("classification feature", self.d_cls, f.len()));
        }
        Ok((0..self.num_classes())
            .map(|c| dot(self.row(c), f) + self.biases[c] as f64)
            .collect())
    }
}

/// Per-class logistic probabilities. Each class is scored independently.
pub fn sigmoid_scores(head: &ClassifierHead, f: &[f32]) -> Result<Vec<f64>> {
    Ok(head.logits(f)?.into_iter().map(sigmoid).collect())
}

/// Stacks `base` rows over `novel` rows.
pub fn concat_heads(base: &ClassifierHead, novel: &ClassifierHead) -> Result<ClassifierHead> {
    if base.d_cls != novel.d_cls {
        return Err(Error::dim("head feature dimension", base.d_cls, novel.d_cls));
    }
    let overlap: Vec<u32> = novel
        .class_ids
        .iter()
        .copied()
        .filter(|c| base.class_ids.contains(c))
        .collect();
    if !overlap.is_empty() {
        return Err(Error::OverlappingClassIds(overlap));
    }
    let mut class_ids = base.class_ids.clone();
    class_ids.extend_from_slice(&novel.class_ids);
    let mut weights = base.weights.clone();
    weights.extend_from_slice(&novel.weights);
    let mut biases = base.biases.clone();
    biases.extend_from_slice(&novel.biases);
    Ok(ClassifierHead {
        class_ids,
        d_cls: base.d_cls,
        weights,
        biases,
    })
}

/// Linear map from classification features to the embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillationProjector {
    d_cls: usize,
    d_emb: usize,
    /// Row-major, `d_emb x d_cls`.
    weights: Vec<f32>,
    biases: Vec<f32>,
}

impl DistillationProjector {
    pub fn new(d_cls: usize, d_emb: usize, weights: Vec<f32>, biases: Vec<f32>) -> Result<Self> {
        if weights.len() != d_emb * d_cls {
            return Err(Error::dim("projector weights", d_emb * d_cls, weights.len()));
        }
        if biases.len() != d_emb {
            return Err(Error::dim("projector biases", d_emb, biases.len()));
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("non-finite projector parameter".into()));
        }
        Ok(Self {
            d_cls,
            d_emb,
            weights,
            biases,
        })
    }

    pub fn d_cls(&self) -> usize {
        self.d_cls
    }

    pub fn d_emb(&self) -> usize {
        self.d_emb
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn biases(&self) -> &[f32] {
        &self.biases
    }

    pub fn project(&self, f: &[f32]) -> Result<Vec<f64>> {
        if f.len() != self.d_cls {
            return Err(Error::dim("classification feature", self.d_cls, f.len()));
        }
        Ok((0..self.d_emb)
            .map(|r| dot(&self.weights[r * self.d_cls..(r + 1) * self.d_cls], f) + self.biases[r] as f64)
            .collect())
    }
}

pub(crate) fn dot(w: &[f32], f: &[f32]) -> f64 {
    w.iter().zip(f).map(|(&a, &b)| a as f64 * b as f64).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
