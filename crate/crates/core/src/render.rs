//! Depth-ordered rendering of the active set into a panoptic raster.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::mask::Bitmask;
use crate::proposal::{ClassId, GtScene, Scene, SegmentId};
use crate::state::AnnotationState;

/// Per-pixel `(segment, class)` raster. Uncovered pixels carry
/// [`SegmentId::VOID`] and no class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanopticMap {
    pub width: u32,
    pub height: u32,
    pub segment_ids: Vec<SegmentId>,
    pub class_ids: Vec<Option<ClassId>>,
}

/// One non-empty segment of a panoptic map.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMask {
    pub id: SegmentId,
    pub label: ClassId,
    pub mask: Bitmask,
}

impl PanopticMap {
    pub fn void(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        PanopticMap {
            width,
            height,
            segment_ids: vec![SegmentId::VOID; n],
            class_ids: vec![None; n],
        }
    }

    pub fn len(&self) -> usize {
        self.segment_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment_ids.is_empty()
    }

    pub fn non_void_count(&self) -> usize {
        self.segment_ids.iter().filter(|s| !s.is_void()).count()
    }

    /// Paints disjoint labeled masks; later masks overwrite earlier ones.
    pub fn from_segments(width: u32, height: u32, segments: &[LabeledMask]) -> Self {
        let mut map = PanopticMap::void(width, height);
        for seg in segments {
            for idx in seg.mask.ones() {
                map.segment_ids[idx] = seg.id;
                map.class_ids[idx] = Some(seg.label);
            }
        }
        map
    }

    /// Splits the raster back into segments ordered by id. Each segment takes
    /// the class of its first pixel.
    pub fn segments(&self) -> Vec<LabeledMask> {
        let mut out: BTreeMap<SegmentId, LabeledMask> = BTreeMap::new();
        for (idx, (&sid, &cls)) in self.segment_ids.iter().zip(&self.class_ids).enumerate() {
            let Some(cls) = cls else { continue };
            if sid.is_void() {
                continue;
            }
            out.entry(sid)
                .or_insert_with(|| LabeledMask {
                    id: sid,
                    label: cls,
                    mask: Bitmask::new(self.width, self.height),
                })
                .mask
                .set(idx, true);
        }
        out.into_values().collect()
    }
}

/// Per-pixel first-hit scan over the active set, front to back.
pub fn render_panoptic(scene: &Scene, state: &AnnotationState) -> Result<PanopticMap> {
    let mut map = PanopticMap::void(scene.width(), scene.height());
    let masks = state
        .active
        .iter()
        .map(|e| scene.mask(e.segment_id))
        .collect::<Result<Vec<_>>>()?;
    for idx in 0..map.len() {
        for (entry, mask) in state.active.iter().zip(&masks) {
            if mask.get(idx) {
                map.segment_ids[idx] = entry.segment_id;
                map.class_ids[idx] = Some(entry.current_label);
                break;
            }
        }
    }
    Ok(map)
}

/// Visible pixels of every active entry, in active-set order.
pub fn visible_masks(scene: &Scene, state: &AnnotationState) -> Result<Vec<Bitmask>> {
    let mut covered = Bitmask::new(scene.width(), scene.height());
    let mut out = Vec::with_capacity(state.len());
    for e in &state.active {
        let m = scene.mask(e.segment_id)?;
        let visible = m.andnot(&covered);
        covered.or_assign(m);
        out.push(visible);
    }
    Ok(out)
}

/// The visible parts of the active set as labeled segments, skipping entries
/// that are fully occluded.
pub fn visible_segments(scene: &Scene, state: &AnnotationState) -> Result<Vec<LabeledMask>> {
    Ok(visible_masks(scene, state)?
        .into_iter()
        .zip(&state.active)
        .filter(|(m, _)| !m.is_empty())
        .map(|(mask, e)| LabeledMask {
            id: e.segment_id,
            label: e.current_label,
            mask,
        })
        .collect())
}

/// Fraction of the entry's mask not hidden by entries in front of it.
pub fn visible_fraction(entry_index: usize, scene: &Scene, state: &AnnotationState) -> Result<f64> {
    let entry = &state.active[entry_index];
    let mask = scene.mask(entry.segment_id)?;
    let mut covered = Bitmask::new(scene.width(), scene.height());
    for e in &state.active[..entry_index] {
        covered.or_assign(scene.mask(e.segment_id)?);
    }
    let area = mask.count();
    if area == 0 {
        return Ok(0.0);
    }
    Ok(mask.andnot_count(&covered) as f64 / area as f64)
}

pub fn gt_segments(gt: &GtScene) -> Vec<LabeledMask> {
    gt.gt
        .segments
        .iter()
        .zip(&gt.masks)
        .map(|(s, m)| LabeledMask {
            id: s.id,
            label: s.label,
            mask: m.clone(),
        })
        .collect()
}

pub fn render_gt(gt: &GtScene) -> PanopticMap {
    PanopticMap::from_segments(gt.gt.width, gt.gt.height, &gt_segments(gt))
}
