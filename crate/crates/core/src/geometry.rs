use serde::{Deserialize, Serialize};

use crate::mask::Bitmask;

/// Bounding box in image-normalized coordinates: center plus extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxGeometry {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxGeometry {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoxGeometry { cx, cy, w, h }
    }

    /// Geometry of the pixel bounding box of `mask`; `None` for an empty mask.
    pub fn from_mask(mask: &Bitmask) -> Option<Self> {
        let (x0, y0, x1, y1) = mask.bbox()?;
        let (iw, ih) = (mask.width() as f64, mask.height() as f64);
        let bw = (x1 - x0 + 1) as f64;
        let bh = (y1 - y0 + 1) as f64;
        Some(BoxGeometry {
            cx: (x0 as f64 + bw / 2.0) / iw,
            cy: (y0 as f64 + bh / 2.0) / ih,
            w: bw / iw,
            h: bh / ih,
        })
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }
}
