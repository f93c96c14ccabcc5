//! Final annotations of assistant-free simulated episodes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{run_episode, Systems};
use crate::error::Result;
use crate::io::SceneData;
use crate::metrics::OverlapTable;
use crate::proposal::{ClassId, GtScene, Scene, SegmentId};
use crate::render::visible_segments;
use crate::state::AnnotationState;

/// The segments of one converged annotation, front to back, with their
/// correct labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub image_id: String,
    pub segments: Vec<(SegmentId, ClassId)>,
}

/// Active entries whose visible region is a true positive against `gt`.
pub fn matched_entries(scene: &Scene, gt: &GtScene, state: &AnnotationState) -> Result<Vec<(SegmentId, ClassId)>> {
    let vis = visible_segments(scene, state)?;
    let pred: Vec<_> = vis.iter().map(|s| (s.label, &s.mask)).collect();
    let gts: Vec<_> = gt.gt.segments.iter().map(|s| s.label).zip(gt.masks.iter()).collect();
    let table = OverlapTable::build(&pred, &gts);
    Ok(vis
        .iter()
        .enumerate()
        .filter(|(p, s)| (0..gts.len()).any(|g| gts[g].0 == s.label && table.iou(*p, g) > 0.5))
        .map(|(_, s)| (s.id, s.label))
        .collect())
}

pub fn episode_log(data: &SceneData, budget: usize) -> Result<EpisodeLog> {
    let t = run_episode(&data.scene, &data.gt, &Systems::baseline(), budget)?;
    Ok(EpisodeLog {
        image_id: data.scene.proposals.image_id.clone(),
        segments: matched_entries(&data.scene, &data.gt, &t.final_state)?,
    })
}

/// One log per scene, in input order.
pub fn generate_episode_logs(data: &[SceneData], budget: usize) -> Result<Vec<EpisodeLog>> {
    data.par_iter().map(|d| episode_log(d, budget)).collect()
}
