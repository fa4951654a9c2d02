//! Normalized center-size boxes, overlap measures and the box regression loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("inverted corners: ({x0}, {y0}) .. ({x1}, {y1})")]
    InvertedCorners { x0: f64, y0: f64, x1: f64, y1: f64 },
    #[error("invalid box [{cx}, {cy}, {w}, {h}]: center must lie in [0,1] and size must be non-negative")]
    InvalidBox { cx: f64, cy: f64, w: f64, h: f64 },
}

/// Axis-aligned rectangle in corner form. Coordinates are unrestricted, so
/// this also serves pixel-space computations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corners {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Corners {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GeometryError> {
        if !(x1 >= x0 && y1 >= y0) {
            return Err(GeometryError::InvertedCorners { x0, y0, x1, y1 });
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn intersection_area(&self, other: &Corners) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    /// Smallest rectangle enclosing both.
    pub fn hull(&self, other: &Corners) -> Corners {
        Corners {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    pub fn iou(&self, other: &Corners) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn giou(&self, other: &Corners) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        let hull = self.hull(other).area();
        let iou = if union <= 0.0 { 0.0 } else { inter / union };
        if hull <= 0.0 {
            iou
        } else {
            iou - (hull - union) / hull
        }
    }
}

/// Box in normalized center-size form: `cx, cy` in `[0,1]`, `w, h >= 0`,
/// all relative to the image extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        let ok = (0.0..=1.0).contains(&cx)
            && (0.0..=1.0).contains(&cy)
            && w >= 0.0
            && h >= 0.0
            && w.is_finite()
            && h.is_finite();
        if !ok {
            return Err(GeometryError::InvalidBox { cx, cy, w, h });
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn to_corners(&self) -> Corners {
        Corners {
            x0: self.cx - self.w / 2.0,
            y0: self.cy - self.h / 2.0,
            x1: self.cx + self.w / 2.0,
            y1: self.cy + self.h / 2.0,
        }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GeometryError> {
        let c = Corners::new(x0, y0, x1, y1)?;
        Self::new(
            (c.x0 + c.x1) / 2.0,
            (c.y0 + c.y1) / 2.0,
            c.x1 - c.x0,
            c.y1 - c.y0,
        )
    }

    /// Like [`BBox::from_corners`] but clamps every corner into `[0,1]` first.
    pub fn from_corners_clipped(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GeometryError> {
        Corners::new(x0, y0, x1, y1)?;
        let c = |v: f64| v.clamp(0.0, 1.0);
        Self::from_corners(c(x0), c(y0), c(x1), c(y1))
    }

    /// The same box with corners clamped to the unit square.
    pub fn clipped(&self) -> BBox {
        let c = self.to_corners();
        Self::from_corners_clipped(c.x0, c.y0, c.x1, c.y1).expect("valid box clips to a valid box")
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Pixel rectangle `(x0, y0, x1, y1)` (exclusive end) covered by the box
    /// in a `width x height` image, rounded to the nearest pixel edge and
    /// clamped to the image.
    pub fn pixel_rect(&self, width: u32, height: u32) -> (u32, u32, u32, u32) {
        let c = self.to_corners();
        let fx = |v: f64| (v * width as f64).round().clamp(0.0, width as f64) as u32;
        let fy = |v: f64| (v * height as f64).round().clamp(0.0, height as f64) as u32;
        (fx(c.x0), fy(c.y0), fx(c.x1), fy(c.y1))
    }

    /// Box covering an exact pixel rectangle.
    pub fn from_pixel_rect(
        x0: u32,
        y0: u32,
        x1: u32,
        y1: u32,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        Self::from_corners(
            x0 as f64 / width as f64,
            y0 as f64 / height as f64,
            x1 as f64 / width as f64,
            y1 as f64 / height as f64,
        )
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.to_corners().iou(&b.to_corners())
}

pub fn giou(a: &BBox, b: &BBox) -> f64 {
    a.to_corners().giou(&b.to_corners())
}

/// Internal weights of the box loss. Combined with the outer box-loss
/// multiplier of 5 these give the usual 5:2 L1:GIoU balance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxLossWeights {
    pub l1: f64,
    pub giou: f64,
}

impl Default for BoxLossWeights {
    fn default() -> Self {
        Self { l1: 1.0, giou: 0.4 }
    }
}

/// `l1 * sum|pred - gt| + giou * (1 - giou(pred, gt))` over center-size coordinates.
pub fn box_loss(pred: &BBox, gt: &BBox, weights: BoxLossWeights) -> f64 {
    let l1: f64 = pred
        .to_array()
        .iter()
        .zip(gt.to_array())
        .map(|(a, b)| (a - b).abs())
        .sum();
    weights.l1 * l1 + weights.giou * (1.0 - giou(pred, gt))
}
