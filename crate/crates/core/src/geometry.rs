//! Axis-aligned pixel boxes, clipping, and overlap ratios.
//!
//! Boxes are `[x1, y1, x2, y2]` in integer pixels with the origin at the
//! top-left corner, `x` growing right and `y` growing down. A valid box has
//! strictly positive width and height.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::GeometryError;

/// Image size in pixels. Both sides are at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyImage { width, height });
        }
        Ok(Self { width, height })
    }

    /// The whole-image box `[0, 0, W, H]`.
    pub fn full_box(&self) -> BBox {
        BBox {
            x1: 0,
            y1: 0,
            x2: i64::from(self.width),
            y2: i64::from(self.height),
        }
    }
}

/// An axis-aligned box with `x1 < x2` and `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BBox {
    x1: i64,
    y1: i64,
    x2: i64,
    y2: i64,
}

impl BBox {
    pub fn new(x1: i64, y1: i64, x2: i64, y2: i64) -> Result<Self, GeometryError> {
        if x1 >= x2 || y1 >= y2 {
            return Err(GeometryError::Degenerate([x1, y1, x2, y2]));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> i64 {
        self.x1
    }
    pub fn y1(&self) -> i64 {
        self.y1
    }
    pub fn x2(&self) -> i64 {
        self.x2
    }
    pub fn y2(&self) -> i64 {
        self.y2
    }

    pub fn width(&self) -> i64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> i64 {
        self.y2 - self.y1
    }

    pub fn to_array(&self) -> [i64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Vertical center in pixels.
    pub fn center_y(&self) -> f64 {
        (self.y1 + self.y2) as f64 / 2.0
    }

    /// Whether the box lies inside `[0, W] x [0, H]`.
    pub fn within(&self, dims: ImageDims) -> bool {
        self.x1 >= 0 && self.y1 >= 0 && self.x2 <= i64::from(dims.width) && self.y2 <= i64::from(dims.height)
    }

    /// Smallest box containing both.
    pub fn union_hull(&self, other: &BBox) -> BBox {
        BBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    /// Area of the overlap, zero when disjoint or touching.
    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0 || h <= 0 {
            0
        } else {
            (w as u64) * (h as u64)
        }
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{},{},{}]", self.x1, self.y1, self.x2, self.y2)
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[i64; 4]>::deserialize(deserializer)?;
        BBox::new(x1, y1, x2, y2).map_err(serde::de::Error::custom)
    }
}

/// Round half up (toward +inf on exact halves).
pub(crate) fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

/// Round each coordinate, clamp into `[0, W] x [0, H]`, and drop the box when
/// the result has non-positive width or height.
pub fn clip_box(raw: [f64; 4], dims: ImageDims) -> Result<Option<BBox>, GeometryError> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite(raw));
    }
    let w = f64::from(dims.width);
    let h = f64::from(dims.height);
    let x1 = round_half_up(raw[0]).clamp(0.0, w) as i64;
    let y1 = round_half_up(raw[1]).clamp(0.0, h) as i64;
    let x2 = round_half_up(raw[2]).clamp(0.0, w) as i64;
    let y2 = round_half_up(raw[3]).clamp(0.0, h) as i64;
    Ok(BBox::new(x1, y1, x2, y2).ok())
}

pub fn area(b: &BBox) -> u64 {
    (b.width() as u64) * (b.height() as u64)
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    let union = area(a) + area(b) - inter;
    inter as f64 / union as f64
}

/// Fraction of `inner` covered by `region`.
pub fn coverage(inner: &BBox, region: &BBox) -> f64 {
    inner.intersection_area(region) as f64 / area(inner) as f64
}

/// Tally of boxes discarded while ingesting records.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipTally {
    pub kept: usize,
    pub clipped: usize,
    pub dropped: usize,
}

impl ClipTally {
    /// Clip `raw`, updating the tally. Non-finite input counts as dropped.
    pub fn ingest(&mut self, raw: [f64; 4], dims: ImageDims) -> Option<BBox> {
        match clip_box(raw, dims) {
            Ok(Some(b)) => {
                self.kept += 1;
                let same = b.to_array().iter().zip(raw.iter()).all(|(&c, &r)| c as f64 == r);
                if !same {
                    self.clipped += 1;
                }
                Some(b)
            }
            _ => {
                self.dropped += 1;
                None
            }
        }
    }
}
