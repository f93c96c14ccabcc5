//! JSON views of sessions: per-segment RLE overlays, label shortlists, and
//! candidate lists.

use coanno_core::context::features::{fixed_features, proposal_feature};
use coanno_core::context::EnsembleModels;
use coanno_core::mask::SegmentMask;
use coanno_core::nn::loss::softmax;
use coanno_core::proposal::{ClassId, ClassInfo, Scene, SegmentId};
use coanno_core::render::visible_masks;
use coanno_core::state::{Action, AnnotationState};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::session::{CheckpointRefs, Session, SessionOptions};

pub const SHORTLIST_LEN: usize = 5;
pub const DEFAULT_CANDIDATES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: ClassId,
    pub prob: f64,
}

/// One active segment as the client draws it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentOverlay {
    pub segment_id: SegmentId,
    pub label: ClassId,
    pub depth_rank: usize,
    pub fixed: bool,
    pub pending: bool,
    /// Pixels not hidden by entries in front, run-length encoded.
    pub visible: SegmentMask,
    pub shortlist: Vec<LabelScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub width: u32,
    pub height: u32,
    pub annotator_actions: usize,
    pub segments: Vec<SegmentOverlay>,
    /// The engine state itself; equal snapshots mean equal states.
    pub state: AnnotationState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionDescriptor {
    pub session_id: String,
    pub image_id: String,
    pub options: SessionOptions,
    pub checkpoints: CheckpointRefs,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub classes: Vec<ClassInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session: SessionDescriptor,
    pub state: StateSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionResponse {
    pub applied: Action,
    pub reaction: Vec<Action>,
    pub session: SessionDescriptor,
    pub state: StateSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub segment_id: SegmentId,
    pub proposed_label: ClassId,
    /// The label an Add posted for this candidate should carry.
    pub suggested_label: ClassId,
    pub detector_score: f64,
    pub mask: SegmentMask,
}

/// Label distribution for one proposal: the relabel head given the current
/// fixed set when loaded, the softmax of the pooled logits otherwise.
fn label_probs(scene: &Scene, idx: usize, state: &AnnotationState, relabel: Option<&EnsembleModels>) -> Result<Vec<f64>> {
    Ok(match relabel {
        Some(r) => {
            let x_fix = fixed_features(scene, state);
            r.select_model(x_fix.len()).relabel_probs(&proposal_feature(scene, idx), &x_fix)?
        }
        None => softmax(&scene.pooled[idx]),
    })
}

pub fn shortlist(probs: &[f64], len: usize) -> Vec<LabelScore> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.into_iter().take(len).map(|i| LabelScore { label: ClassId(i as u32), prob: probs[i] }).collect()
}

pub fn snapshot(scene: &Scene, state: &AnnotationState, relabel: Option<&EnsembleModels>, turns: usize) -> Result<StateSnapshot> {
    let visible = visible_masks(scene, state)?;
    let mut segments = Vec::with_capacity(state.len());
    for (entry, mask) in state.active.iter().zip(&visible) {
        let probs = label_probs(scene, scene.index_of(entry.segment_id)?, state, relabel)?;
        segments.push(SegmentOverlay {
            segment_id: entry.segment_id,
            label: entry.current_label,
            depth_rank: entry.depth_rank,
            fixed: state.is_fixed(entry.segment_id),
            pending: state.pending_fix == Some(entry.segment_id),
            visible: mask.encode(),
            shortlist: shortlist(&probs, SHORTLIST_LEN),
        });
    }
    Ok(StateSnapshot {
        width: scene.width(),
        height: scene.height(),
        annotator_actions: turns,
        segments,
        state: state.clone(),
    })
}

pub fn descriptor(session: &Session, scene: &Scene) -> SessionDescriptor {
    SessionDescriptor {
        session_id: session.id.clone(),
        image_id: session.image_id.clone(),
        options: session.options,
        checkpoints: session.checkpoints.clone(),
        created_ms: session.created_ms,
        updated_ms: session.updated_ms,
        classes: scene.proposals.classes.clone(),
    }
}

/// Inactive proposals covering pixel `(x, y)`, highest detector score first
/// (ties to the lower id), at most `limit`.
pub fn candidates(
    scene: &Scene,
    state: &AnnotationState,
    relabel: Option<&EnsembleModels>,
    x: u32,
    y: u32,
    limit: usize,
) -> Result<Vec<Candidate>> {
    let mut hits: Vec<usize> = (0..scene.len())
        .filter(|&i| scene.masks[i].get_xy(x, y) && !state.is_active(scene.proposals.segments[i].id))
        .collect();
    let segs = &scene.proposals.segments;
    hits.sort_by(|&a, &b| segs[b].detector_score.total_cmp(&segs[a].detector_score).then(segs[a].id.cmp(&segs[b].id)));
    hits.truncate(limit);
    hits.into_iter()
        .map(|i| {
            let seg = &segs[i];
            let suggested_label = match relabel {
                Some(_) => shortlist(&label_probs(scene, i, state, relabel)?, 1)[0].label,
                None => seg.proposed_label,
            };
            Ok(Candidate {
                segment_id: seg.id,
                proposed_label: seg.proposed_label,
                suggested_label,
                detector_score: seg.detector_score,
                mask: seg.mask.clone(),
            })
        })
        .collect()
}
