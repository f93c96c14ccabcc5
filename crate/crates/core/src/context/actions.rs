//! Turning context-model outputs into assistant actions.

use std::cmp::Ordering;

use super::ensemble::EnsembleModels;
use super::features::{fixed_features, proposal_feature, FixedFeature};
use crate::error::Result;
use crate::proposal::{argmax, ClassId, Scene, SegmentId};
use crate::state::{Action, ActionKind, AnnotationState};

/// Relabel-head argmax for a proposal given the fixed set.
pub fn predicted_label(scene: &Scene, idx: usize, x_fix: &[FixedFeature], relabel: &EnsembleModels) -> Result<ClassId> {
    let model = relabel.select_model(x_fix.len());
    let probs = model.relabel_probs(&proposal_feature(scene, idx), x_fix)?;
    Ok(ClassId(argmax(&probs) as u32))
}

/// One change-label action per active entry whose predicted label differs
/// from its current one. Fixed entries and the pending annotator addition are
/// never targeted.
pub fn generate_change_label_actions(
    scene: &Scene,
    state: &AnnotationState,
    relabel: &EnsembleModels,
) -> Result<Vec<Action>> {
    let x_fix = fixed_features(scene, state);
    let mut out = Vec::new();
    for entry in &state.active {
        let id = entry.segment_id;
        if state.is_fixed(id) || state.pending_fix == Some(id) {
            continue;
        }
        let label = predicted_label(scene, scene.index_of(id)?, &x_fix, relabel)?;
        if label != entry.current_label {
            out.push(Action::assistant(ActionKind::ChangeLabel { segment_id: id, new_label: label }));
        }
    }
    Ok(out)
}

/// A scored add candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AddCandidate {
    pub action: Action,
    pub prob: f64,
}

/// Add actions for inactive proposals with presence probability above `tau`,
/// most probable first (ties to the lower id), at most `max_adds`. Each added
/// segment takes the relabel head's prediction as its label.
pub fn generate_add_actions(
    scene: &Scene,
    state: &AnnotationState,
    add: &EnsembleModels,
    relabel: &EnsembleModels,
    tau: f64,
    max_adds: usize,
    exclude: &dyn Fn(SegmentId) -> bool,
) -> Result<Vec<AddCandidate>> {
    let x_fix = fixed_features(scene, state);
    let model = add.select_model(x_fix.len());
    let mut scored: Vec<(f64, usize)> = Vec::new();
    for (idx, seg) in scene.proposals.segments.iter().enumerate() {
        if state.is_active(seg.id) || exclude(seg.id) {
            continue;
        }
        let p = model.add_prob(&proposal_feature(scene, idx), &x_fix)?;
        if p > tau {
            scored.push((p, idx));
        }
    }
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then_with(|| scene.proposals.segments[a.1].id.cmp(&scene.proposals.segments[b.1].id))
    });
    scored.truncate(max_adds);
    scored
        .into_iter()
        .map(|(prob, idx)| {
            let label = predicted_label(scene, idx, &x_fix, relabel)?;
            let action = Action::assistant(ActionKind::Add { segment_id: scene.proposals.segments[idx].id, label });
            Ok(AddCandidate { action, prob })
        })
        .collect()
}
