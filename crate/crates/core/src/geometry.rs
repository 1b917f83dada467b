//! Axis-aligned box arithmetic: area, IoU and greedy non-maximum suppression.
//!
//! Areas use the continuous convention `(x2 - x1) * (y2 - y1)`; there is no
//! `+1` pixel inclusivity. Coordinates are stored as `f32` (the on-disk
//! precision) and all arithmetic is carried out in `f64`.

use serde::{Deserialize, Serialize};

/// Box in corner convention: `(x1, y1)` top-left, `(x2, y2)` bottom-right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f32; 4]", into = "[f32; 4]")]
pub struct BoxXYXY {
    x1: f32,
    y1: f32,
    x2: f32,
    y2: f32,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid box [{x1}, {y1}, {x2}, {y2}]: coordinates must be finite with x1 <= x2 and y1 <= y2")]
pub struct InvalidBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BoxXYXY {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Result<Self, InvalidBox> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x1 > x2 || y1 > y2 {
            return Err(InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f32 {
        self.x1
    }
    pub fn y1(&self) -> f32 {
        self.y1
    }
    pub fn x2(&self) -> f32 {
        self.x2
    }
    pub fn y2(&self) -> f32 {
        self.y2
    }

    pub fn to_array(&self) -> [f32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 as f64 - self.x1 as f64
    }

    pub fn height(&self) -> f64 {
        self.y2 as f64 - self.y1 as f64
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &BoxXYXY) -> f64 {
        let w = (self.x2.min(other.x2) as f64 - self.x1.max(other.x1) as f64).max(0.0);
        let h = (self.y2.min(other.y2) as f64 - self.y1.max(other.y1) as f64).max(0.0);
        w * h
    }
}

impl TryFrom<[f32; 4]> for BoxXYXY {
    type Error = InvalidBox;

    fn try_from(v: [f32; 4]) -> Result<Self, Self::Error> {
        BoxXYXY::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoxXYXY> for [f32; 4] {
    fn from(b: BoxXYXY) -> Self {
        b.to_array()
    }
}

/// Intersection over union. Zero when the union is empty.
pub fn iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy NMS. Candidates are visited by descending score (equal scores: lower
/// input index first); a candidate is dropped when its IoU with an already kept
/// box exceeds `iou_threshold`. Returns kept indices in visiting order.
pub fn nms(candidates: &[(BoxXYXY, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&i, &j| {
        candidates[j]
            .1
            .total_cmp(&candidates[i].1)
            .then_with(|| i.cmp(&j))
    });

    let mut kept: Vec<usize> = Vec::new();
    for idx in order {
        let b = &candidates[idx].0;
        if kept
            .iter()
            .all(|&k| iou(&candidates[k].0, b) <= iou_threshold)
        {
            kept.push(idx);
        }
    }
    kept
}
