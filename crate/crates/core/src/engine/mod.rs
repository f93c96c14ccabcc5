//! The collaborative environment: action semantics, the assistant turn, and
//! simulated episodes.

pub mod oracle;

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::context::actions::{generate_add_actions, generate_change_label_actions};
use crate::context::ensemble::EnsembleModels;
use crate::context::features::PoolingPredicate;
use crate::error::{Error, Result};
use crate::init::{greedy_compose, ia_compose, IaModel, DEFAULT_VISIBILITY_THRESHOLD};
use crate::proposal::{GtScene, Scene};
use crate::state::{Action, ActionKind, AnnotationState, Author};

pub use oracle::{Oracle, PQ_EPS};

pub const DEFAULT_TAU: f64 = 0.9;
pub const DEFAULT_MAX_ADDS: usize = 10;

fn check_label(scene: &Scene, label: crate::proposal::ClassId) -> Result<()> {
    if label.index() >= scene.num_classes() {
        return Err(Error::InvalidAction(format!("label {label} is not in the class catalog")));
    }
    Ok(())
}

/// Checks that `kind` is legal for `state`.
pub fn validate_action(scene: &Scene, state: &AnnotationState, kind: &ActionKind) -> Result<()> {
    let id = kind.segment_id();
    if !scene.contains(id) {
        return Err(Error::InvalidAction(format!("segment {id} is not in the proposal set")));
    }
    let active = state.is_active(id);
    match *kind {
        ActionKind::Add { label, .. } => {
            if active {
                return Err(Error::InvalidAction(format!("segment {id} is already active")));
            }
            check_label(scene, label)?;
        }
        ActionKind::ChangeLabel { new_label, .. } => {
            if !active {
                return Err(Error::InvalidAction(format!("segment {id} is not active")));
            }
            check_label(scene, new_label)?;
        }
        ActionKind::Remove { .. } => {
            if !active {
                return Err(Error::InvalidAction(format!("segment {id} is not active")));
            }
        }
        ActionKind::ChangeDepth { new_rank, .. } => {
            if !active {
                return Err(Error::InvalidAction(format!("segment {id} is not active")));
            }
            if new_rank >= state.len() {
                return Err(Error::InvalidAction(format!(
                    "rank {new_rank} is outside 0..{}",
                    state.len()
                )));
            }
        }
    }
    Ok(())
}

/// Applies one annotator action together with the fixed-set bookkeeping.
///
/// A segment the annotator added becomes fixed with their next action; a
/// relabeled segment is fixed at once; a removed segment leaves the fixed set.
/// Additions go in front of every active entry.
pub fn apply_annotator_action(scene: &Scene, state: &mut AnnotationState, kind: ActionKind) -> Result<()> {
    validate_action(scene, state, &kind)?;
    let id = kind.segment_id();
    if let Some(p) = state.pending_fix.take() {
        let removed_now = matches!(kind, ActionKind::Remove { .. }) && id == p;
        if !removed_now && state.is_active(p) {
            state.fixed.insert(p);
        }
    }
    match kind {
        ActionKind::Add { label, .. } => {
            state.insert_at(0, id, label);
            state.pending_fix = Some(id);
        }
        ActionKind::Remove { .. } => {
            state.remove(id);
            state.fixed.remove(&id);
        }
        ActionKind::ChangeLabel { new_label, .. } => {
            state.set_label(id, new_label);
            state.fixed.insert(id);
        }
        ActionKind::ChangeDepth { new_rank, .. } => {
            state.move_to(id, new_rank);
        }
    }
    state.turn_log.push(Action::annotator(kind));
    Ok(())
}

/// Applies an action taken by the assistant. Fixed segments are off limits.
pub fn apply_assistant_action(scene: &Scene, state: &mut AnnotationState, kind: ActionKind) -> Result<()> {
    validate_action(scene, state, &kind)?;
    let id = kind.segment_id();
    if state.is_fixed(id) {
        return Err(Error::InvalidAction(format!("segment {id} is fixed")));
    }
    match kind {
        ActionKind::Add { label, .. } => state.push_back(id, label),
        ActionKind::ChangeLabel { new_label, .. } => {
            state.set_label(id, new_label);
        }
        ActionKind::Remove { .. } | ActionKind::ChangeDepth { .. } => {
            return Err(Error::InvalidAction("the assistant only relabels and adds".into()));
        }
    }
    state.turn_log.push(Action::assistant(kind));
    Ok(())
}

/// Re-applies a logged action, dispatching on its author.
pub fn apply_action(scene: &Scene, state: &mut AnnotationState, action: Action) -> Result<()> {
    match action.author {
        Author::Annotator => apply_annotator_action(scene, state, action.kind),
        Author::Assistant => apply_assistant_action(scene, state, action.kind),
    }
}

/// The relabel and add ensembles of the collaborative assistant.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextAssistant {
    pub relabel: EnsembleModels,
    pub add: EnsembleModels,
    pub predicate: PoolingPredicate,
}

impl ContextAssistant {
    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        self.relabel.save(&dir.join("relabel"), self.predicate)?;
        self.add.save(&dir.join("add"), self.predicate)
    }

    pub fn load(dir: &std::path::Path, predicate: PoolingPredicate) -> Result<Self> {
        let relabel = EnsembleModels::load(&dir.join("relabel"), predicate)?;
        let add = EnsembleModels::load(&dir.join("add"), predicate)?;
        if relabel.head_kind != crate::context::HeadKind::Relabel || add.head_kind != crate::context::HeadKind::Add {
            return Err(Error::InvalidData("assistant directory holds the wrong head kinds".into()));
        }
        if relabel.num_classes() != add.num_classes() {
            return Err(Error::InvalidData("relabel and add ensembles disagree on the class count".into()));
        }
        Ok(ContextAssistant { relabel, add, predicate })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssistantConfig {
    pub relabel: bool,
    pub add: bool,
    pub tau: f64,
    pub max_adds: usize,
    /// Wall-clock budget after which remaining additions are dropped. The
    /// relabel pass always completes.
    #[serde(skip)]
    pub time_budget: Option<Duration>,
}

impl Default for AssistantConfig {
    fn default() -> Self {
        AssistantConfig {
            relabel: true,
            add: true,
            tau: DEFAULT_TAU,
            max_adds: DEFAULT_MAX_ADDS,
            time_budget: None,
        }
    }
}

/// One assistant turn: a single relabel pass over non-fixed entries, then,
/// once something is fixed, additions of inactive proposals the annotator has
/// not removed. Returns the applied actions.
pub fn apply_assistant_turn(
    scene: &Scene,
    state: &mut AnnotationState,
    ca: &ContextAssistant,
    cfg: &AssistantConfig,
) -> Result<Vec<Action>> {
    let start = Instant::now();
    let mut applied = Vec::new();
    if cfg.relabel {
        for action in generate_change_label_actions(scene, state, &ca.relabel)? {
            apply_assistant_action(scene, state, action.kind)?;
            applied.push(action);
        }
    }
    if cfg.add && !state.fixed.is_empty() {
        let rejected = state.rejected_by_annotator();
        let exclude = |id| rejected.contains(&id);
        let adds = generate_add_actions(scene, state, &ca.add, &ca.relabel, cfg.tau, cfg.max_adds, &exclude)?;
        for cand in adds {
            if cfg.time_budget.is_some_and(|b| start.elapsed() > b) {
                break;
            }
            apply_assistant_action(scene, state, cand.action.kind)?;
            applied.push(cand.action);
        }
    }
    Ok(applied)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initializer {
    Greedy,
    Assistant,
}

/// Which systems take part in an episode.
#[derive(Debug, Clone, Copy)]
pub struct Systems<'a> {
    pub ia: Option<&'a IaModel>,
    pub ca: Option<&'a ContextAssistant>,
    pub assistant: AssistantConfig,
    pub visibility_threshold: f64,
}

impl<'a> Systems<'a> {
    /// Fluid-annotation baseline: greedy initialization and no assistant.
    pub fn baseline() -> Self {
        Systems {
            ia: None,
            ca: None,
            assistant: AssistantConfig::default(),
            visibility_threshold: DEFAULT_VISIBILITY_THRESHOLD,
        }
    }

    pub fn initial_state(&self, scene: &Scene) -> Result<AnnotationState> {
        match self.ia {
            Some(ia) => ia_compose(scene, ia),
            None => Ok(greedy_compose(scene, self.visibility_threshold)),
        }
    }

    fn assistant_active(&self) -> bool {
        self.ca.is_some() && (self.assistant.relabel || self.assistant.add)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actor {
    Init,
    Annotator,
    Assistant,
}

/// One line of an episode transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub turn: usize,
    pub author: Actor,
    pub action: Option<ActionKind>,
    pub pq: f64,
    pub fixed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTranscript {
    pub image_id: String,
    pub initial: AnnotationState,
    pub records: Vec<TranscriptRecord>,
    /// PQ after `n` annotator actions (and the assistant's reaction), for
    /// `n = 0..=budget`; the last value carries forward once the annotator
    /// stops.
    pub curve: Vec<f64>,
    pub annotator_actions: usize,
    pub final_state: AnnotationState,
}

impl EpisodeTranscript {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Called after every assistant turn with the states before and after it.
pub type TurnObserver<'o> = dyn FnMut(&AnnotationState, &AnnotationState, &[Action]) + 'o;

pub fn run_episode(scene: &Scene, gt: &GtScene, systems: &Systems, budget: usize) -> Result<EpisodeTranscript> {
    run_episode_observed(scene, gt, systems, budget, &mut |_, _, _| {})
}

/// Initializes, then alternates one simulated annotator action with one
/// assistant turn until the budget is spent or no action helps.
pub fn run_episode_observed(
    scene: &Scene,
    gt: &GtScene,
    systems: &Systems,
    budget: usize,
    observer: &mut TurnObserver<'_>,
) -> Result<EpisodeTranscript> {
    let oracle = Oracle::new(scene, gt);
    let mut state = systems.initial_state(scene)?;
    let initial = state.clone();
    let mut pq = oracle.pq(&state)?;
    let mut records = vec![TranscriptRecord { turn: 0, author: Actor::Init, action: None, pq, fixed: 0 }];
    let mut curve = vec![pq];
    let mut turn = 0;
    while turn < budget {
        let Some((kind, _)) = oracle.best_action(&state)? else { break };
        turn += 1;
        apply_annotator_action(scene, &mut state, kind)?;
        pq = oracle.pq(&state)?;
        records.push(TranscriptRecord {
            turn,
            author: Actor::Annotator,
            action: Some(kind),
            pq,
            fixed: state.fixed.len(),
        });
        if let (true, Some(ca)) = (systems.assistant_active(), systems.ca) {
            let before = state.clone();
            let actions = apply_assistant_turn(scene, &mut state, ca, &systems.assistant)?;
            // per-action PQ, replayed from the pre-turn state
            let mut replay = before.clone();
            for a in &actions {
                apply_assistant_action(scene, &mut replay, a.kind)?;
                records.push(TranscriptRecord {
                    turn,
                    author: Actor::Assistant,
                    action: Some(a.kind),
                    pq: oracle.pq(&replay)?,
                    fixed: replay.fixed.len(),
                });
            }
            observer(&before, &state, &actions);
            pq = oracle.pq(&state)?;
        }
        curve.push(pq);
    }
    let annotator_actions = turn;
    while curve.len() < budget + 1 {
        curve.push(pq);
    }
    Ok(EpisodeTranscript {
        image_id: scene.proposals.image_id.clone(),
        initial,
        records,
        curve,
        annotator_actions,
        final_state: state,
    })
}

/// Pointwise mean of equal-length curves.
pub fn mean_curve(curves: &[Vec<f64>]) -> Vec<f64> {
    let Some(len) = curves.iter().map(Vec::len).min() else { return Vec::new() };
    (0..len)
        .map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64)
        .collect()
}

/// Interpolated number of actions at which `curve` first reaches `target`.
pub fn actions_to_reach(curve: &[f64], target: f64) -> Option<f64> {
    let first = curve.iter().position(|&v| v >= target)?;
    if first == 0 {
        return Some(0.0);
    }
    let (a, b) = (curve[first - 1], curve[first]);
    Some((first - 1) as f64 + (target - a) / (b - a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Bitmask;
    use crate::proposal::{ClassId, ClassInfo, GroundTruth, GtSegment, ProposalSegment, ProposalSet, SegmentId};

    /// Proposals `(mask, label, score)` and gt `(mask, label)` on a 4x4 grid.
    fn world(props: Vec<(Bitmask, usize, f64)>, gt: Vec<(Bitmask, usize)>) -> (Scene, GtScene) {
        let classes: Vec<ClassInfo> = (0..3).map(|i| ClassInfo { name: format!("c{i}"), isthing: false }).collect();
        let segments = props
            .into_iter()
            .enumerate()
            .map(|(i, (m, label, score))| {
                let mut logits = vec![0.0; 3];
                logits[label] = 2.0;
                ProposalSegment::new(SegmentId(i as u32 + 1), m.encode(), logits, score).unwrap()
            })
            .collect();
        let set = ProposalSet { image_id: "w".into(), width: 4, height: 4, classes: classes.clone(), segments };
        let gt = GroundTruth {
            image_id: "w".into(),
            width: 4,
            height: 4,
            classes,
            segments: gt
                .into_iter()
                .enumerate()
                .map(|(i, (m, l))| GtSegment { id: SegmentId(i as u32 + 1), mask: m.encode(), label: ClassId(l as u32) })
                .collect(),
        };
        (Scene::new(set, PoolingPredicate::BelowHalf).unwrap(), GtScene::new(gt).unwrap())
    }

    fn left() -> Bitmask {
        Bitmask::rect(4, 4, 0, 0, 2, 4)
    }

    fn right() -> Bitmask {
        Bitmask::rect(4, 4, 2, 0, 4, 4)
    }

    #[test]
    fn change_label_fixes_immediately() {
        let (scene, _) = world(vec![(left(), 0, 0.9)], vec![(left(), 1)]);
        let mut st = greedy_compose(&scene, 0.5);
        apply_annotator_action(&scene, &mut st, ActionKind::ChangeLabel { segment_id: SegmentId(1), new_label: ClassId(2) }).unwrap();
        assert!(st.is_fixed(SegmentId(1)));
        assert_eq!(st.label_of(SegmentId(1)), Some(ClassId(2)));
    }

    #[test]
    fn add_is_fixed_after_next_action() {
        let (scene, _) = world(vec![(left(), 0, 0.9), (right(), 1, 0.8)], vec![]);
        let mut st = AnnotationState::new();
        apply_annotator_action(&scene, &mut st, ActionKind::Add { segment_id: SegmentId(1), label: ClassId(0) }).unwrap();
        assert!(!st.is_fixed(SegmentId(1)));
        assert_eq!(st.pending_fix, Some(SegmentId(1)));
        apply_annotator_action(&scene, &mut st, ActionKind::Add { segment_id: SegmentId(2), label: ClassId(1) }).unwrap();
        assert!(st.is_fixed(SegmentId(1)));
        assert_eq!(st.pending_fix, Some(SegmentId(2)));
        // additions go to the front
        assert_eq!(st.active[0].segment_id, SegmentId(2));
        st.check_invariants(&scene).unwrap();
    }

    #[test]
    fn remove_unfixes_and_rejects() {
        let (scene, _) = world(vec![(left(), 0, 0.9), (right(), 1, 0.8)], vec![]);
        let mut st = greedy_compose(&scene, 0.5);
        apply_annotator_action(&scene, &mut st, ActionKind::ChangeLabel { segment_id: SegmentId(2), new_label: ClassId(0) }).unwrap();
        apply_annotator_action(&scene, &mut st, ActionKind::Remove { segment_id: SegmentId(2) }).unwrap();
        assert!(!st.is_active(SegmentId(2)) && !st.is_fixed(SegmentId(2)));
        apply_annotator_action(&scene, &mut st, ActionKind::Remove { segment_id: SegmentId(1) }).unwrap();
        assert!(st.is_empty() && st.fixed.is_empty());
    }

    #[test]
    fn removing_the_pending_addition_never_fixes_it() {
        let (scene, _) = world(vec![(left(), 0, 0.9)], vec![]);
        let mut st = AnnotationState::new();
        apply_annotator_action(&scene, &mut st, ActionKind::Add { segment_id: SegmentId(1), label: ClassId(0) }).unwrap();
        apply_annotator_action(&scene, &mut st, ActionKind::Remove { segment_id: SegmentId(1) }).unwrap();
        assert!(st.fixed.is_empty() && st.pending_fix.is_none());
    }

    #[test]
    fn invalid_actions_are_rejected() {
        let (scene, _) = world(vec![(left(), 0, 0.9), (right(), 1, 0.8)], vec![]);
        let mut st = greedy_compose(&scene, 0.5);
        let bad = [
            ActionKind::Add { segment_id: SegmentId(1), label: ClassId(0) },
            ActionKind::Remove { segment_id: SegmentId(9) },
            ActionKind::ChangeLabel { segment_id: SegmentId(1), new_label: ClassId(7) },
            ActionKind::ChangeDepth { segment_id: SegmentId(1), new_rank: 2 },
        ];
        for kind in bad {
            assert!(matches!(apply_annotator_action(&scene, &mut st, kind), Err(Error::InvalidAction(_))), "{kind:?}");
        }
        assert!(st.turn_log.is_empty());
        st.fixed.insert(SegmentId(1));
        let touch = ActionKind::ChangeLabel { segment_id: SegmentId(1), new_label: ClassId(2) };
        assert!(apply_assistant_action(&scene, &mut st, touch).is_err());
    }

    #[test]
    fn oracle_fixes_wrong_label() {
        let (scene, gt) = world(vec![(Bitmask::full(4, 4), 0, 0.9)], vec![(Bitmask::full(4, 4), 2)]);
        let st = greedy_compose(&scene, 0.5);
        let oracle = Oracle::new(&scene, &gt);
        let (kind, pq) = oracle.best_action(&st).unwrap().unwrap();
        assert_eq!(kind, ActionKind::ChangeLabel { segment_id: SegmentId(1), new_label: ClassId(2) });
        assert_eq!(pq, 1.0);
        let mut done = st.clone();
        done.set_label(SegmentId(1), ClassId(2));
        assert!(oracle.best_action(&done).unwrap().is_none());
    }

    #[test]
    fn oracle_adds_exact_match() {
        let (scene, gt) = world(vec![(left(), 1, 0.9)], vec![(left(), 1)]);
        let oracle = Oracle::new(&scene, &gt);
        let (kind, _) = oracle.best_action(&AnnotationState::new()).unwrap().unwrap();
        assert_eq!(kind, ActionKind::Add { segment_id: SegmentId(1), label: ClassId(1) });
    }

    #[test]
    fn oracle_removes_and_reorders() {
        // a full-image distractor in front hides the correct half segments
        let (scene, gt) = world(
            vec![(Bitmask::full(4, 4), 0, 0.95), (left(), 1, 0.5), (right(), 1, 0.4)],
            vec![(left(), 1), (right(), 1)],
        );
        let mut st = AnnotationState::new();
        for i in 1..=3 {
            st.push_back(SegmentId(i), ClassId(if i == 1 { 0 } else { 1 }));
        }
        let oracle = Oracle::new(&scene, &gt);
        let (kind, pq) = oracle.best_action(&st).unwrap().unwrap();
        // removal and moving behind both reach PQ 1; removal has priority
        assert_eq!(kind, ActionKind::Remove { segment_id: SegmentId(1) });
        assert_eq!(pq, 1.0);
    }

    #[test]
    fn baseline_episode_is_monotone_and_budgeted() {
        let (scene, gt) = world(
            vec![(Bitmask::full(4, 4), 0, 0.95), (left(), 1, 0.5), (right(), 2, 0.4)],
            vec![(left(), 1), (right(), 2)],
        );
        let t = run_episode(&scene, &gt, &Systems::baseline(), 5).unwrap();
        assert_eq!(t.curve.len(), 6);
        assert!(t.curve.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(*t.curve.last().unwrap(), 1.0);
        assert!(t.annotator_actions <= 5);
        let zero = run_episode(&scene, &gt, &Systems::baseline(), 0).unwrap();
        assert_eq!(zero.records.len(), 1);
        assert_eq!(zero.curve, vec![zero.records[0].pq]);
        assert_eq!(run_episode(&scene, &gt, &Systems::baseline(), 5).unwrap(), t);
    }

    #[test]
    fn interpolated_actions_to_target() {
        assert_eq!(actions_to_reach(&[0.2, 0.4, 0.8], 0.6), Some(1.5));
        assert_eq!(actions_to_reach(&[0.7], 0.6), Some(0.0));
        assert_eq!(actions_to_reach(&[0.1, 0.2], 0.6), None);
        assert_eq!(mean_curve(&[vec![0.0, 1.0], vec![1.0, 1.0]]), vec![0.5, 1.0]);
    }
}
