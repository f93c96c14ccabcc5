//! Proposal pools, ground truth, and the decoded per-image [`Scene`] the
//! engine works on.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::context::features::{local_score_pool, PoolingPredicate};
use crate::error::{Error, Result};
use crate::geometry::BoxGeometry;
use crate::mask::{Bitmask, SegmentMask};

/// Segment identifier, unique within an image. Zero is reserved for VOID.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SegmentId(pub u32);

impl SegmentId {
    pub const VOID: SegmentId = SegmentId(0);

    pub fn is_void(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for SegmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Index into the class catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl ClassId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub name: String,
    pub isthing: bool,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSegment {
    pub id: SegmentId,
    pub mask: SegmentMask,
    pub geometry: BoxGeometry,
    pub logits: Vec<f64>,
    pub proposed_label: ClassId,
    pub detector_score: f64,
}

impl ProposalSegment {
    /// Builds a proposal, deriving geometry from the mask bounding box and the
    /// proposed label from the logits.
    pub fn new(id: SegmentId, mask: SegmentMask, logits: Vec<f64>, detector_score: f64) -> Result<Self> {
        if id.is_void() {
            return Err(Error::InvalidData("segment id 0 is reserved for VOID".into()));
        }
        if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("segment {id}: logits must be finite and nonempty")));
        }
        let bits = mask.decode()?;
        let geometry = BoxGeometry::from_mask(&bits)
            .ok_or_else(|| Error::InvalidData(format!("segment {id} has an empty mask")))?;
        let proposed_label = ClassId(argmax(&logits) as u32);
        Ok(ProposalSegment {
            id,
            mask,
            geometry,
            logits,
            proposed_label,
            detector_score,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub classes: Vec<ClassInfo>,
    pub segments: Vec<ProposalSegment>,
}

impl ProposalSet {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for seg in &self.segments {
            if !seen.insert(seg.id) {
                return Err(Error::InvalidData(format!("duplicate segment id {}", seg.id)));
            }
            if seg.mask.width != self.width || seg.mask.height != self.height {
                return Err(Error::DimensionMismatch {
                    left_w: seg.mask.width,
                    left_h: seg.mask.height,
                    right_w: self.width,
                    right_h: self.height,
                });
            }
            if seg.logits.len() != self.classes.len() {
                return Err(Error::LengthMismatch {
                    expected: self.classes.len(),
                    got: seg.logits.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtSegment {
    pub id: SegmentId,
    pub mask: SegmentMask,
    pub label: ClassId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub classes: Vec<ClassInfo>,
    pub segments: Vec<GtSegment>,
}

/// A proposal set with decoded masks and pooled scores, ready for the engine.
#[derive(Debug, Clone)]
pub struct Scene {
    pub proposals: ProposalSet,
    pub masks: Vec<Bitmask>,
    pub areas: Vec<u64>,
    /// Locally pooled logits, one row per segment.
    pub pooled: Vec<Vec<f64>>,
    pub predicate: PoolingPredicate,
    index: BTreeMap<SegmentId, usize>,
}

impl Scene {
    pub fn new(proposals: ProposalSet, predicate: PoolingPredicate) -> Result<Self> {
        proposals.validate()?;
        let masks = proposals
            .segments
            .iter()
            .map(|s| s.mask.decode())
            .collect::<Result<Vec<_>>>()?;
        let areas = masks.iter().map(Bitmask::count).collect();
        let pooled = local_score_pool(&proposals, &masks, predicate);
        let index = proposals
            .segments
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id, i))
            .collect();
        Ok(Scene {
            proposals,
            masks,
            areas,
            pooled,
            predicate,
            index,
        })
    }

    pub fn width(&self) -> u32 {
        self.proposals.width
    }

    pub fn height(&self) -> u32 {
        self.proposals.height
    }

    pub fn num_classes(&self) -> usize {
        self.proposals.num_classes()
    }

    pub fn len(&self) -> usize {
        self.proposals.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.segments.is_empty()
    }

    pub fn index_of(&self, id: SegmentId) -> Result<usize> {
        self.index.get(&id).copied().ok_or(Error::UnknownSegment(id))
    }

    pub fn contains(&self, id: SegmentId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn segment(&self, id: SegmentId) -> Result<&ProposalSegment> {
        Ok(&self.proposals.segments[self.index_of(id)?])
    }

    pub fn mask(&self, id: SegmentId) -> Result<&Bitmask> {
        Ok(&self.masks[self.index_of(id)?])
    }
}

/// Ground truth with decoded masks.
#[derive(Debug, Clone)]
pub struct GtScene {
    pub gt: GroundTruth,
    pub masks: Vec<Bitmask>,
    pub areas: Vec<u64>,
}

impl GtScene {
    pub fn new(gt: GroundTruth) -> Result<Self> {
        let masks = gt
            .segments
            .iter()
            .map(|s| {
                if s.mask.width != gt.width || s.mask.height != gt.height {
                    return Err(Error::DimensionMismatch {
                        left_w: s.mask.width,
                        left_h: s.mask.height,
                        right_w: gt.width,
                        right_h: gt.height,
                    });
                }
                s.mask.decode()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut covered = Bitmask::new(gt.width, gt.height);
        for (seg, m) in gt.segments.iter().zip(&masks) {
            if covered.and_count(m) > 0 {
                return Err(Error::InvalidData(format!(
                    "ground-truth segment {} overlaps another segment",
                    seg.id
                )));
            }
            covered.or_assign(m);
        }
        let areas = masks.iter().map(Bitmask::count).collect();
        Ok(GtScene { gt, masks, areas })
    }

    pub fn labels(&self) -> Vec<ClassId> {
        self.gt.segments.iter().map(|s| s.label).collect()
    }

    pub fn len(&self) -> usize {
        self.gt.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.segments.is_empty()
    }
}
