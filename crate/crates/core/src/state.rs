//! Annotation state: the depth-ordered active set, the fixed set, and the
//! action log.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::proposal::{ClassId, Scene, SegmentId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Author {
    Annotator,
    Assistant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionKind {
    Add { segment_id: SegmentId, label: ClassId },
    Remove { segment_id: SegmentId },
    ChangeLabel { segment_id: SegmentId, new_label: ClassId },
    ChangeDepth { segment_id: SegmentId, new_rank: usize },
}

impl ActionKind {
    pub fn segment_id(&self) -> SegmentId {
        match *self {
            ActionKind::Add { segment_id, .. }
            | ActionKind::Remove { segment_id }
            | ActionKind::ChangeLabel { segment_id, .. }
            | ActionKind::ChangeDepth { segment_id, .. } => segment_id,
        }
    }

    /// Lower is preferred when the simulated annotator breaks ties.
    pub fn priority(&self) -> u8 {
        match self {
            ActionKind::ChangeLabel { .. } => 0,
            ActionKind::Add { .. } => 1,
            ActionKind::Remove { .. } => 2,
            ActionKind::ChangeDepth { .. } => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub author: Author,
    #[serde(flatten)]
    pub kind: ActionKind,
}

impl Action {
    pub fn annotator(kind: ActionKind) -> Self {
        Action {
            author: Author::Annotator,
            kind,
        }
    }

    pub fn assistant(kind: ActionKind) -> Self {
        Action {
            author: Author::Assistant,
            kind,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveEntry {
    pub segment_id: SegmentId,
    pub current_label: ClassId,
    pub depth_rank: usize,
}

/// Mutable state of one annotation session. `active` is kept front to back,
/// so an entry's `depth_rank` equals its position.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationState {
    pub active: Vec<ActiveEntry>,
    pub fixed: BTreeSet<SegmentId>,
    pub pending_fix: Option<SegmentId>,
    pub turn_log: Vec<Action>,
}

impl AnnotationState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn position(&self, id: SegmentId) -> Option<usize> {
        self.active.iter().position(|e| e.segment_id == id)
    }

    pub fn is_active(&self, id: SegmentId) -> bool {
        self.position(id).is_some()
    }

    pub fn is_fixed(&self, id: SegmentId) -> bool {
        self.fixed.contains(&id)
    }

    pub fn entry(&self, id: SegmentId) -> Option<&ActiveEntry> {
        self.active.iter().find(|e| e.segment_id == id)
    }

    pub fn label_of(&self, id: SegmentId) -> Option<ClassId> {
        self.entry(id).map(|e| e.current_label)
    }

    pub fn active_ids(&self) -> BTreeSet<SegmentId> {
        self.active.iter().map(|e| e.segment_id).collect()
    }

    /// Appends an entry behind all current entries.
    pub fn push_back(&mut self, segment_id: SegmentId, label: ClassId) {
        let depth_rank = self.active.len();
        self.active.push(ActiveEntry {
            segment_id,
            current_label: label,
            depth_rank,
        });
    }

    pub fn insert_at(&mut self, rank: usize, segment_id: SegmentId, label: ClassId) {
        let rank = rank.min(self.active.len());
        self.active.insert(
            rank,
            ActiveEntry {
                segment_id,
                current_label: label,
                depth_rank: rank,
            },
        );
        self.renumber();
    }

    pub fn remove(&mut self, id: SegmentId) -> Option<ActiveEntry> {
        let pos = self.position(id)?;
        let entry = self.active.remove(pos);
        self.renumber();
        Some(entry)
    }

    /// Moves an entry to `new_rank`, clamped to the back of the list.
    pub fn move_to(&mut self, id: SegmentId, new_rank: usize) -> bool {
        let Some(pos) = self.position(id) else {
            return false;
        };
        let entry = self.active.remove(pos);
        let rank = new_rank.min(self.active.len());
        self.active.insert(rank, entry);
        self.renumber();
        true
    }

    pub fn set_label(&mut self, id: SegmentId, label: ClassId) -> bool {
        match self.active.iter_mut().find(|e| e.segment_id == id) {
            Some(e) => {
                e.current_label = label;
                true
            }
            None => false,
        }
    }

    fn renumber(&mut self) {
        for (i, e) in self.active.iter_mut().enumerate() {
            e.depth_rank = i;
        }
    }

    /// Segments whose most recent annotator action was a removal.
    pub fn rejected_by_annotator(&self) -> BTreeSet<SegmentId> {
        let mut rejected = BTreeSet::new();
        for action in self.turn_log.iter().filter(|a| a.author == Author::Annotator) {
            let id = action.kind.segment_id();
            match action.kind {
                ActionKind::Remove { .. } => {
                    rejected.insert(id);
                }
                ActionKind::Add { .. } => {
                    rejected.remove(&id);
                }
                _ => {}
            }
        }
        rejected
    }

    /// Checks the structural invariants against the scene the state refers to.
    pub fn check_invariants(&self, scene: &Scene) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, e) in self.active.iter().enumerate() {
            if e.depth_rank != i {
                return Err(Error::InvalidData(format!(
                    "entry {} has depth rank {} at position {i}",
                    e.segment_id, e.depth_rank
                )));
            }
            if !scene.contains(e.segment_id) {
                return Err(Error::UnknownSegment(e.segment_id));
            }
            if !seen.insert(e.segment_id) {
                return Err(Error::InvalidData(format!("segment {} active twice", e.segment_id)));
            }
            if e.current_label.index() >= scene.num_classes() {
                return Err(Error::InvalidData(format!("label {} out of range", e.current_label)));
            }
        }
        if let Some(id) = self.fixed.iter().find(|id| !seen.contains(id)) {
            return Err(Error::InvalidData(format!("fixed segment {id} is not active")));
        }
        if let Some(p) = self.pending_fix {
            if self.fixed.contains(&p) || !seen.contains(&p) {
                return Err(Error::InvalidData(format!("pending segment {p} is fixed or inactive")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_json_shape() {
        let a = Action::annotator(ActionKind::ChangeLabel {
            segment_id: SegmentId(3),
            new_label: ClassId(5),
        });
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(
            json,
            r#"{"author":"annotator","kind":"change_label","segment_id":3,"new_label":5}"#
        );
        let back: Action = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn reorder_keeps_ranks_consistent() {
        let mut s = AnnotationState::new();
        for i in 1..=4 {
            s.push_back(SegmentId(i), ClassId(0));
        }
        s.move_to(SegmentId(4), 0);
        s.insert_at(1, SegmentId(9), ClassId(1));
        s.remove(SegmentId(2));
        let ids: Vec<u32> = s.active.iter().map(|e| e.segment_id.0).collect();
        assert_eq!(ids, vec![4, 9, 1, 3]);
        assert!(s.active.iter().enumerate().all(|(i, e)| e.depth_rank == i));
    }

    #[test]
    fn rejected_tracks_latest_annotator_action() {
        let mut s = AnnotationState::new();
        let remove = |id| Action::annotator(ActionKind::Remove { segment_id: SegmentId(id) });
        s.turn_log.push(remove(1));
        s.turn_log.push(remove(2));
        s.turn_log.push(Action::annotator(ActionKind::Add {
            segment_id: SegmentId(2),
            label: ClassId(0),
        }));
        assert_eq!(s.rejected_by_annotator(), [SegmentId(1)].into_iter().collect());
    }
}
