use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

/// A transcript paired with its box.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroundedSpan {
    pub text: String,
    pub bbox: BBox,
}

impl GroundedSpan {
    pub fn new(text: impl Into<String>, bbox: BBox) -> Self {
        Self {
            text: text.into(),
            bbox,
        }
    }
}

pub fn boxes_of(spans: &[GroundedSpan]) -> Vec<BBox> {
    spans.iter().map(|s| s.bbox).collect()
}
