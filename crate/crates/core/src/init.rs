//! Building the initial active set: the greedy composer and the learned
//! initialization assistant.

use std::cmp::Ordering;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Bitmask;
use crate::nn::{check_version, Activation, DenseNet, Parameters, CHECKPOINT_VERSION};
use crate::proposal::{Scene, SegmentId};
use crate::state::AnnotationState;

pub const DEFAULT_VISIBILITY_THRESHOLD: f64 = 0.5;
pub const DEFAULT_STOP_THRESHOLD: f64 = 0.0;
pub const DEFAULT_IA_WIDTHS: [usize; 4] = [64, 64, 32, 1];

/// Proposal indices by descending detector score, ties to the lower id.
fn by_score(scene: &Scene) -> Vec<usize> {
    let segs = &scene.proposals.segments;
    let mut order: Vec<usize> = (0..segs.len()).collect();
    order.sort_by(|&a, &b| {
        segs[b]
            .detector_score
            .partial_cmp(&segs[a].detector_score)
            .unwrap_or(Ordering::Equal)
            .then(segs[a].id.cmp(&segs[b].id))
    });
    order
}

/// Places proposals in descending score order, each behind everything placed
/// so far, when at least `visibility_threshold` of it is still visible.
pub fn greedy_compose(scene: &Scene, visibility_threshold: f64) -> AnnotationState {
    let mut state = AnnotationState::new();
    let mut covered = Bitmask::new(scene.width(), scene.height());
    for idx in by_score(scene) {
        let area = scene.areas[idx];
        if area == 0 {
            continue;
        }
        let visible = scene.masks[idx].andnot_count(&covered) as f64 / area as f64;
        if visible >= visibility_threshold {
            let seg = &scene.proposals.segments[idx];
            state.push_back(seg.id, seg.proposed_label);
            covered.or_assign(&scene.masks[idx]);
        }
    }
    state
}

pub fn class_bits_width(num_classes: usize) -> usize {
    let needed = (usize::BITS - num_classes.saturating_sub(1).leading_zeros()) as usize;
    needed.max(8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IaFeature {
    /// Binary code of the proposed class, most significant bit first.
    pub class_bits: Vec<f64>,
    pub score: f64,
    pub free_fraction: f64,
}

impl IaFeature {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.class_bits.clone();
        v.push(self.score);
        v.push(self.free_fraction);
        v
    }
}

/// Features of proposal `idx` against `covered`, the union of active masks.
pub fn ia_features(scene: &Scene, idx: usize, covered: &Bitmask, bits: usize) -> IaFeature {
    let seg = &scene.proposals.segments[idx];
    let class = seg.proposed_label.0 as u64;
    let class_bits = (0..bits)
        .map(|b| ((class >> (bits - 1 - b)) & 1) as f64)
        .collect();
    let area = scene.areas[idx];
    let free_fraction = if area == 0 {
        0.0
    } else {
        scene.masks[idx].andnot_count(covered) as f64 / area as f64
    };
    IaFeature {
        class_bits,
        score: seg.detector_score,
        free_fraction,
    }
}

pub fn active_union(scene: &Scene, state: &AnnotationState) -> Result<Bitmask> {
    let mut covered = Bitmask::new(scene.width(), scene.height());
    for e in &state.active {
        covered.or_assign(scene.mask(e.segment_id)?);
    }
    Ok(covered)
}

/// Scores add candidates for the initialization loop.
pub trait IaScorer {
    fn score(&self, feature: &IaFeature) -> f64;
    fn stop_threshold(&self) -> f64;
    fn class_bits(&self) -> usize;
}

/// A candidate ranked by the initialization assistant.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedCandidate {
    pub index: usize,
    pub id: SegmentId,
    pub score: f64,
    pub feature: IaFeature,
}

/// The best-scoring inactive proposal, ties to the lower id.
pub fn ia_top_candidate(scene: &Scene, state: &AnnotationState, scorer: &dyn IaScorer) -> Result<Option<RankedCandidate>> {
    let covered = active_union(scene, state)?;
    let mut best: Option<RankedCandidate> = None;
    for (idx, seg) in scene.proposals.segments.iter().enumerate() {
        if state.is_active(seg.id) {
            continue;
        }
        let feature = ia_features(scene, idx, &covered, scorer.class_bits());
        let score = scorer.score(&feature);
        let better = match &best {
            None => true,
            Some(b) => score > b.score || (score == b.score && seg.id < b.id),
        };
        if better {
            best = Some(RankedCandidate { index: idx, id: seg.id, score, feature });
        }
    }
    Ok(best)
}

/// Repeatedly adds the top candidate behind the current entries while its
/// score exceeds the stop threshold. Returns the state and every accepted
/// candidate in order.
pub fn ia_compose_trace(scene: &Scene, scorer: &dyn IaScorer) -> Result<(AnnotationState, Vec<RankedCandidate>)> {
    let mut state = AnnotationState::new();
    let mut accepted = Vec::new();
    while let Some(top) = ia_top_candidate(scene, &state, scorer)? {
        if top.score <= scorer.stop_threshold() {
            break;
        }
        let label = scene.proposals.segments[top.index].proposed_label;
        state.push_back(top.id, label);
        accepted.push(top);
    }
    Ok((state, accepted))
}

pub fn ia_compose(scene: &Scene, scorer: &dyn IaScorer) -> Result<AnnotationState> {
    Ok(ia_compose_trace(scene, scorer)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IaModel {
    pub net: DenseNet,
    pub stop_threshold: f64,
    pub class_bits: usize,
}

#[derive(Serialize, Deserialize)]
struct IaCheckpoint {
    version: u32,
    #[serde(flatten)]
    model: IaModel,
}

impl IaModel {
    /// A 4-layer net over `[class bits, score, free fraction]`.
    pub fn new<R: Rng>(num_classes: usize, widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() != 4 || widths[3] != 1 || widths.contains(&0) {
            return Err(Error::Config("the initialization net needs four layers ending in width 1".into()));
        }
        let class_bits = class_bits_width(num_classes);
        let mut dims = vec![class_bits + 2];
        dims.extend_from_slice(widths);
        Ok(IaModel {
            net: DenseNet::new(&dims, Activation::Identity, rng),
            stop_threshold: DEFAULT_STOP_THRESHOLD,
            class_bits,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.net.layers.len() != 4 || self.net.output_dim() != 1 || self.net.input_dim() != self.class_bits + 2 {
            return Err(Error::InvalidData("initialization net has the wrong shape".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = IaCheckpoint { version: CHECKPOINT_VERSION, model: self.clone() };
        std::fs::write(path, serde_json::to_string(&ckpt).expect("model serializes")).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::MalformedRecord(format!("{}: {e}", path.display())))?;
        check_version(&value)?;
        let ckpt: IaCheckpoint =
            serde_json::from_value(value).map_err(|e| Error::MalformedRecord(format!("{}: {e}", path.display())))?;
        ckpt.model.validate()?;
        Ok(ckpt.model)
    }
}

impl Parameters for IaModel {
    fn param_slices(&self) -> Vec<&[f64]> {
        self.net.param_slices()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.net.param_slices_mut()
    }
}

impl IaScorer for IaModel {
    fn score(&self, feature: &IaFeature) -> f64 {
        self.net.forward(&feature.to_vec()).expect("feature width matches the net")[0]
    }

    fn stop_threshold(&self) -> f64 {
        self.stop_threshold
    }

    fn class_bits(&self) -> usize {
        self.class_bits
    }
}
