//! Panoptic quality, mIoU over ground-truth regions, and greedy
//! proposal-to-ground-truth matching.
//!
//! PQ follows the usual panoptic convention: a predicted and a ground-truth
//! segment match when they share a class and their IoU is strictly above 0.5.
//! Per-class PQ/SQ/RQ are averaged over every class that appears in either
//! the prediction or the ground truth. With no classes at all (two empty
//! maps) every score is 1.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Bitmask;
use crate::proposal::{ClassId, GtScene, Scene, SegmentId};
use crate::render::{LabeledMask, PanopticMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPq {
    pub class: ClassId,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub iou_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PqBreakdown {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub per_class: Vec<ClassPq>,
}

/// Pairwise overlap statistics between disjoint predicted and ground-truth
/// segments; everything PQ needs.
#[derive(Debug, Clone, Default)]
pub struct OverlapTable {
    pub pred_labels: Vec<ClassId>,
    pub pred_areas: Vec<u64>,
    pub gt_labels: Vec<ClassId>,
    pub gt_areas: Vec<u64>,
    /// Row-major `pred x gt` intersection counts.
    pub inter: Vec<u64>,
}

impl OverlapTable {
    pub fn build(pred: &[(ClassId, &Bitmask)], gt: &[(ClassId, &Bitmask)]) -> Self {
        let mut inter = Vec::with_capacity(pred.len() * gt.len());
        for (_, p) in pred {
            for (_, g) in gt {
                inter.push(p.and_count(g));
            }
        }
        OverlapTable {
            pred_labels: pred.iter().map(|(l, _)| *l).collect(),
            pred_areas: pred.iter().map(|(_, m)| m.count()).collect(),
            gt_labels: gt.iter().map(|(l, _)| *l).collect(),
            gt_areas: gt.iter().map(|(_, m)| m.count()).collect(),
            inter,
        }
    }

    pub fn iou(&self, p: usize, g: usize) -> f64 {
        let i = self.inter[p * self.gt_labels.len() + g];
        if i == 0 {
            return 0.0;
        }
        let union = self.pred_areas[p] + self.gt_areas[g] - i;
        i as f64 / union as f64
    }

    /// PQ breakdown; `labels` optionally overrides the predicted labels.
    pub fn pq_with_labels(&self, labels: &[ClassId]) -> PqBreakdown {
        let ng = self.gt_labels.len();
        let mut gt_matched = vec![false; ng];
        let mut stats: BTreeMap<ClassId, ClassPq> = BTreeMap::new();
        let blank = |class| ClassPq {
            class,
            pq: 0.0,
            sq: 0.0,
            rq: 0.0,
            tp: 0,
            fp: 0,
            fn_: 0,
            iou_sum: 0.0,
        };
        for (p, &label) in labels.iter().enumerate() {
            let mut matched = None;
            for g in 0..ng {
                if self.gt_labels[g] == label && !gt_matched[g] {
                    let iou = self.iou(p, g);
                    if iou > 0.5 {
                        matched = Some((g, iou));
                        break;
                    }
                }
            }
            let entry = stats.entry(label).or_insert_with(|| blank(label));
            match matched {
                Some((g, iou)) => {
                    gt_matched[g] = true;
                    entry.tp += 1;
                    entry.iou_sum += iou;
                }
                None => entry.fp += 1,
            }
        }
        for g in 0..ng {
            if !gt_matched[g] {
                let label = self.gt_labels[g];
                stats.entry(label).or_insert_with(|| blank(label)).fn_ += 1;
            }
        }
        finish(stats)
    }

    pub fn pq(&self) -> PqBreakdown {
        self.pq_with_labels(&self.pred_labels)
    }
}

fn finish(stats: BTreeMap<ClassId, ClassPq>) -> PqBreakdown {
    let mut per_class: Vec<ClassPq> = stats.into_values().collect();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let (mut pq, mut sq, mut rq) = (0.0, 0.0, 0.0);
    for c in &mut per_class {
        let denom = c.tp as f64 + 0.5 * c.fp as f64 + 0.5 * c.fn_ as f64;
        c.pq = c.iou_sum / denom;
        c.sq = if c.tp > 0 { c.iou_sum / c.tp as f64 } else { 0.0 };
        c.rq = c.tp as f64 / denom;
        tp += c.tp;
        fp += c.fp;
        fn_ += c.fn_;
        pq += c.pq;
        sq += c.sq;
        rq += c.rq;
    }
    let n = per_class.len();
    if n == 0 {
        return PqBreakdown {
            pq: 1.0,
            sq: 1.0,
            rq: 1.0,
            tp,
            fp,
            fn_,
            per_class,
        };
    }
    let n = n as f64;
    PqBreakdown {
        pq: pq / n,
        sq: sq / n,
        rq: rq / n,
        tp,
        fp,
        fn_,
        per_class,
    }
}

fn check_dims(pred: &PanopticMap, gt: &PanopticMap) -> Result<()> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::DimensionMismatch {
            left_w: pred.width,
            left_h: pred.height,
            right_w: gt.width,
            right_h: gt.height,
        });
    }
    Ok(())
}

pub fn pq_of_segments(pred: &[LabeledMask], gt: &[LabeledMask]) -> PqBreakdown {
    let p: Vec<_> = pred.iter().map(|s| (s.label, &s.mask)).collect();
    let g: Vec<_> = gt.iter().map(|s| (s.label, &s.mask)).collect();
    OverlapTable::build(&p, &g).pq()
}

pub fn panoptic_quality(pred: &PanopticMap, gt: &PanopticMap) -> Result<PqBreakdown> {
    check_dims(pred, gt)?;
    Ok(pq_of_segments(&pred.segments(), &gt.segments()))
}

/// Mean over ground-truth segments of the best IoU achieved by any predicted
/// segment, regardless of label.
pub fn mean_iou_over_gt(pred: &PanopticMap, gt: &PanopticMap) -> Result<f64> {
    check_dims(pred, gt)?;
    miou_of_segments(&pred.segments(), &gt.segments())
}

pub fn miou_of_segments(pred: &[LabeledMask], gt: &[LabeledMask]) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::UndefinedMetric("mIoU needs at least one ground-truth segment"));
    }
    let mut total = 0.0;
    for g in gt {
        let best = pred
            .iter()
            .map(|p| p.mask.iou(&g.mask))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        total += best;
    }
    Ok(total / gt.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalMatch {
    pub proposal_id: SegmentId,
    pub gt_id: SegmentId,
    pub iou: f64,
}

/// Repeatedly commits the globally best remaining `(proposal, gt)` pair.
/// Ties go to the lower proposal id, then the lower gt id.
pub fn greedy_match_proposals(scene: &Scene, gt: &GtScene) -> Vec<ProposalMatch> {
    let mut pairs = Vec::new();
    for (seg, pm) in scene.proposals.segments.iter().zip(&scene.masks) {
        for (gseg, gm) in gt.gt.segments.iter().zip(&gt.masks) {
            let inter = pm.and_count(gm);
            if inter == 0 {
                continue;
            }
            let union = pm.count() + gm.count() - inter;
            pairs.push(ProposalMatch {
                proposal_id: seg.id,
                gt_id: gseg.id,
                iou: inter as f64 / union as f64,
            });
        }
    }
    pairs.sort_by(|a, b| {
        b.iou
            .partial_cmp(&a.iou)
            .unwrap_or(Ordering::Equal)
            .then(a.proposal_id.cmp(&b.proposal_id))
            .then(a.gt_id.cmp(&b.gt_id))
    });
    let mut used_p = std::collections::BTreeSet::new();
    let mut used_g = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for m in pairs {
        if used_g.len() == gt.len() {
            break;
        }
        if used_p.contains(&m.proposal_id) || used_g.contains(&m.gt_id) {
            continue;
        }
        used_p.insert(m.proposal_id);
        used_g.insert(m.gt_id);
        out.push(m);
    }
    out
}
