//! Simulated annotator: picks the single action that raises PQ the most.
//!
//! It behaves like the annotator the fixed-set rules assume: label changes
//! only target segments whose visible region matches a ground-truth segment,
//! and always set that segment's true label; additions only use proposals
//! that match a ground-truth segment, again with the true label.

use crate::error::Result;
use crate::mask::Bitmask;
use crate::metrics::OverlapTable;
use crate::proposal::{ClassId, GtScene, Scene};
use crate::state::{ActionKind, AnnotationState};

pub const PQ_EPS: f64 = 1e-9;

/// Ground truth plus per-proposal geometric matches, reused across steps.
#[derive(Debug, Clone)]
pub struct Oracle<'a> {
    pub scene: &'a Scene,
    pub gt: &'a GtScene,
    /// For each proposal, the label of the gt segment its full mask matches
    /// with IoU > 0.5.
    pub add_label: Vec<Option<ClassId>>,
}

/// Visible masks of `order` (front to back), with their entry positions.
fn visible(scene: &Scene, order: &[(usize, ClassId)]) -> Vec<(ClassId, Bitmask)> {
    let mut covered = Bitmask::new(scene.width(), scene.height());
    let mut out = Vec::with_capacity(order.len());
    for &(idx, label) in order {
        let m = &scene.masks[idx];
        let v = m.andnot(&covered);
        covered.or_assign(m);
        out.push((label, v));
    }
    out
}

impl<'a> Oracle<'a> {
    pub fn new(scene: &'a Scene, gt: &'a GtScene) -> Self {
        let add_label = scene
            .masks
            .iter()
            .zip(&scene.areas)
            .map(|(m, &area)| {
                gt.masks.iter().zip(&gt.areas).zip(&gt.gt.segments).find_map(|((g, &ga), seg)| {
                    let inter = m.and_count(g);
                    let iou = inter as f64 / (area + ga - inter) as f64;
                    (iou > 0.5).then_some(seg.label)
                })
            })
            .collect();
        Oracle { scene, gt, add_label }
    }

    fn gt_pairs(&self) -> Vec<(ClassId, &Bitmask)> {
        self.gt.gt.segments.iter().map(|s| s.label).zip(self.gt.masks.iter()).collect()
    }

    fn table(&self, vis: &[(ClassId, Bitmask)]) -> (OverlapTable, Vec<usize>) {
        let kept: Vec<usize> = (0..vis.len()).filter(|&i| !vis[i].1.is_empty()).collect();
        let pred: Vec<(ClassId, &Bitmask)> = kept.iter().map(|&i| (vis[i].0, &vis[i].1)).collect();
        (OverlapTable::build(&pred, &self.gt_pairs()), kept)
    }

    fn pq_of_order(&self, order: &[(usize, ClassId)]) -> f64 {
        self.table(&visible(self.scene, order)).0.pq().pq
    }

    fn order_of(&self, state: &AnnotationState) -> Result<Vec<(usize, ClassId)>> {
        state
            .active
            .iter()
            .map(|e| Ok((self.scene.index_of(e.segment_id)?, e.current_label)))
            .collect()
    }

    pub fn pq(&self, state: &AnnotationState) -> Result<f64> {
        Ok(self.pq_of_order(&self.order_of(state)?))
    }

    /// Best single action and the PQ it reaches, or `None` when nothing
    /// improves PQ by more than [`PQ_EPS`].
    pub fn best_action(&self, state: &AnnotationState) -> Result<Option<(ActionKind, f64)>> {
        let order = self.order_of(state)?;
        let vis = visible(self.scene, &order);
        let (table, kept) = self.table(&vis);
        let current = table.pq().pq;
        let mut best: Option<(ActionKind, f64)> = None;
        let mut consider = |kind: ActionKind, pq: f64| {
            // candidates arrive in tie-break order, so only strict gains replace
            if best.as_ref().is_none_or(|(_, b)| pq > *b) {
                best = Some((kind, pq));
            }
        };

        // change label, reusing the overlap table
        let ng = self.gt.len();
        let mut label_moves = Vec::new();
        for (row, &pos) in kept.iter().enumerate() {
            let entry = &state.active[pos];
            if let Some(g) = (0..ng).find(|&g| table.iou(row, g) > 0.5) {
                let truth = self.gt.gt.segments[g].label;
                if truth != entry.current_label {
                    let mut labels = table.pred_labels.clone();
                    labels[row] = truth;
                    label_moves.push((entry.segment_id, truth, table.pq_with_labels(&labels).pq));
                }
            }
        }
        label_moves.sort_by_key(|m| m.0);
        for (id, label, pq) in label_moves {
            consider(ActionKind::ChangeLabel { segment_id: id, new_label: label }, pq);
        }

        // add at the front
        let mut adds = Vec::new();
        for (idx, seg) in self.scene.proposals.segments.iter().enumerate() {
            let Some(label) = self.add_label[idx] else { continue };
            if state.is_active(seg.id) {
                continue;
            }
            let mut o = Vec::with_capacity(order.len() + 1);
            o.push((idx, label));
            o.extend_from_slice(&order);
            adds.push((seg.id, label, self.pq_of_order(&o)));
        }
        adds.sort_by_key(|a| a.0);
        for (id, label, pq) in adds {
            consider(ActionKind::Add { segment_id: id, label }, pq);
        }

        let mut by_id: Vec<usize> = (0..order.len()).collect();
        by_id.sort_by_key(|&p| state.active[p].segment_id);
        for &pos in &by_id {
            let mut o = order.clone();
            o.remove(pos);
            consider(ActionKind::Remove { segment_id: state.active[pos].segment_id }, self.pq_of_order(&o));
        }
        let last = order.len().saturating_sub(1);
        for &pos in &by_id {
            let id = state.active[pos].segment_id;
            for rank in [0, last] {
                if rank == pos {
                    continue;
                }
                let mut o = order.clone();
                let item = o.remove(pos);
                o.insert(rank, item);
                consider(ActionKind::ChangeDepth { segment_id: id, new_rank: rank }, self.pq_of_order(&o));
            }
        }
        Ok(best.filter(|(_, pq)| *pq > current + PQ_EPS))
    }
}
