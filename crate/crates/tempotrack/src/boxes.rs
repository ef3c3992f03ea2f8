//! Axis-aligned box geometry shared by the model head, losses and metrics.

use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum BoxError {
    #[error("degenerate box: w={w}, h={h}")]
    Degenerate { w: f64, h: f64 },
}

/// Center-size box. Units depend on context: normalized search-region
/// coordinates inside the model, pixels at the dataset/metrics boundary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    /// From top-left corner + size (the on-disk ground-truth convention).
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox {
            cx: x + w / 2.0,
            cy: y + h / 2.0,
            w,
            h,
        }
    }

    pub fn to_xywh(&self) -> (f64, f64, f64, f64) {
        (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)
    }

    pub fn validate(&self) -> Result<(), BoxError> {
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(BoxError::Degenerate { w: self.w, h: self.h });
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn left(&self) -> f64 {
        self.cx - self.w / 2.0
    }
    pub fn right(&self) -> f64 {
        self.cx + self.w / 2.0
    }
    pub fn top(&self) -> f64 {
        self.cy - self.h / 2.0
    }
    pub fn bottom(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        let dx = self.cx - other.cx;
        let dy = self.cy - other.cy;
        (dx * dx + dy * dy).sqrt()
    }
}

pub fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.left().max(b.left())).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.top().max(b.top())).max(0.0);
    iw * ih
}

// areas derived from the same corner arithmetic as the intersection, so
// identical boxes score exactly 1
fn extent_area(b: &BBox) -> f64 {
    (b.right() - b.left()) * (b.bottom() - b.top())
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = extent_area(a) + extent_area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: IoU minus the normalized hull gap. Range (-1, 1].
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = extent_area(a) + extent_area(b) - inter;
    let hull_w = a.right().max(b.right()) - a.left().min(b.left());
    let hull_h = a.bottom().max(b.bottom()) - a.top().min(b.top());
    let hull = hull_w * hull_h;
    let iou = inter / union;
    iou - (hull - union) / hull
}
