//! Inputs of the context model: per-proposal and per-fixed-segment feature
//! vectors, relative geometry, and local score pooling.

use serde::{Deserialize, Serialize};

use crate::geometry::BoxGeometry;
use crate::mask::Bitmask;
use crate::proposal::{ClassId, ProposalSet, Scene, SegmentId};
use crate::state::AnnotationState;

pub const GEOMETRY_DIM: usize = 4;
pub const RELATIVE_DIM: usize = 10;
const LOG_EPS: f64 = 1e-6;

/// Which neighbours a segment pools class scores from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingPredicate {
    /// Other segments with IoU < 0.5.
    #[default]
    BelowHalf,
    /// Other segments with IoU >= 0.5.
    AtLeastHalf,
}

impl PoolingPredicate {
    pub fn admits(self, iou: f64) -> bool {
        match self {
            PoolingPredicate::BelowHalf => iou < 0.5,
            PoolingPredicate::AtLeastHalf => iou >= 0.5,
        }
    }
}

/// `ŝ[i][c] = max(s[i][c], max s[j][c])` over the other segments `j` whose
/// proposed label is `c` and whose IoU with `i` passes `predicate`.
pub fn local_score_pool(proposals: &ProposalSet, masks: &[Bitmask], predicate: PoolingPredicate) -> Vec<Vec<f64>> {
    let segs = &proposals.segments;
    let areas: Vec<u64> = masks.iter().map(Bitmask::count).collect();
    let mut pooled: Vec<Vec<f64>> = segs.iter().map(|s| s.logits.clone()).collect();
    for i in 0..segs.len() {
        for j in 0..segs.len() {
            if i == j {
                continue;
            }
            let c = segs[j].proposed_label.index();
            let s = segs[j].logits[c];
            if s <= pooled[i][c] {
                continue;
            }
            let inter = masks[i].and_count(&masks[j]);
            let union = areas[i] + areas[j] - inter;
            let iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
            if predicate.admits(iou) {
                pooled[i][c] = s;
            }
        }
    }
    pooled
}

fn guarded_log(x: f64) -> f64 {
    x.abs().max(LOG_EPS).ln()
}

fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Relative geometry of a proposal `p` with respect to a fixed segment `f`:
/// `[Δ, log|Δ̂|, log(w_p/w_f), log(h_p/h_f), sign(Δ)log|Δ|, sign(Δ)log|Δ̂|]`
/// where `Δ` is the center offset and `Δ̂` is `Δ` divided by the size of `f`.
pub fn relative_geometry(f: &BoxGeometry, p: &BoxGeometry) -> [f64; RELATIVE_DIM] {
    let dx = p.cx - f.cx;
    let dy = p.cy - f.cy;
    let nx = dx / f.w;
    let ny = dy / f.h;
    [
        dx,
        dy,
        guarded_log(nx),
        guarded_log(ny),
        (p.w / f.w).ln(),
        (p.h / f.h).ln(),
        signum0(dx) * guarded_log(dx),
        signum0(dy) * guarded_log(dy),
        signum0(dx) * guarded_log(nx),
        signum0(dy) * guarded_log(ny),
    ]
}

/// `x_p = [g_p, ŝ_p]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalFeature {
    pub geometry: BoxGeometry,
    pub scores: Vec<f64>,
}

impl ProposalFeature {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.geometry.to_array().to_vec();
        v.extend_from_slice(&self.scores);
        v
    }

    pub fn max_score(&self) -> f64 {
        self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `x_fix = [c_f, g_f, ŝ_f]`, with the class given by the annotator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedFeature {
    pub class: ClassId,
    pub geometry: BoxGeometry,
    pub scores: Vec<f64>,
}

impl FixedFeature {
    pub fn one_hot(&self, num_classes: usize) -> Vec<f64> {
        let mut v = vec![0.0; num_classes];
        v[self.class.index()] = 1.0;
        v
    }

    /// Total order over the exact bit patterns, used to canonicalize sets.
    pub(crate) fn bit_key(&self) -> Vec<u64> {
        let mut key = vec![self.class.0 as u64];
        key.extend(self.geometry.to_array().iter().map(|v| v.to_bits()));
        key.extend(self.scores.iter().map(|v| v.to_bits()));
        key
    }
}

pub fn proposal_feature(scene: &Scene, idx: usize) -> ProposalFeature {
    ProposalFeature {
        geometry: scene.proposals.segments[idx].geometry,
        scores: scene.pooled[idx].clone(),
    }
}

pub fn fixed_feature(scene: &Scene, idx: usize, class: ClassId) -> FixedFeature {
    FixedFeature {
        class,
        geometry: scene.proposals.segments[idx].geometry,
        scores: scene.pooled[idx].clone(),
    }
}

/// Features of the current fixed set, in fixed-set order.
pub fn fixed_features(scene: &Scene, state: &AnnotationState) -> Vec<FixedFeature> {
    state
        .fixed
        .iter()
        .filter_map(|&id: &SegmentId| {
            let idx = scene.index_of(id).ok()?;
            let label = state.label_of(id)?;
            Some(fixed_feature(scene, idx, label))
        })
        .collect()
}
