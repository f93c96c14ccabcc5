//! Sessions and their append-only action logs.
//!
//! A log is JSONL: one `create` record carrying the initial state, then one
//! record per annotator turn or undo. Replaying the records through the engine
//! rebuilds the session exactly, so the log is the only persisted state.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use coanno_core::engine::{apply_action, Initializer, DEFAULT_MAX_ADDS, DEFAULT_TAU};
use coanno_core::proposal::Scene;
use coanno_core::state::{Action, AnnotationState};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

pub const LOG_VERSION: u32 = 1;

/// Options a client may set when opening a session. A missing initializer
/// means the initialization assistant when one is loaded, greedy otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionOptions {
    pub initializer: Option<Initializer>,
    pub relabel: bool,
    pub add: bool,
    pub tau: f64,
    pub max_adds: usize,
}

impl Default for SessionOptions {
    fn default() -> Self {
        SessionOptions { initializer: None, relabel: true, add: true, tau: DEFAULT_TAU, max_adds: DEFAULT_MAX_ADDS }
    }
}

impl SessionOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(ServiceError::Malformed(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        Ok(())
    }
}

/// Where the models a session was opened with came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRefs {
    pub context: Option<String>,
    pub initialization: Option<String>,
}

/// One annotator action and the assistant reaction that followed it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub annotator: Action,
    pub reaction: Vec<Action>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    Create {
        version: u32,
        session_id: String,
        image_id: String,
        options: SessionOptions,
        checkpoints: CheckpointRefs,
        at_ms: u64,
        initial: AnnotationState,
    },
    Turn {
        at_ms: u64,
        #[serde(flatten)]
        turn: Turn,
    },
    Undo {
        at_ms: u64,
    },
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub image_id: String,
    pub options: SessionOptions,
    pub checkpoints: CheckpointRefs,
    pub created_ms: u64,
    pub updated_ms: u64,
    pub initial: AnnotationState,
    pub state: AnnotationState,
    pub turns: Vec<Turn>,
    log: Option<(PathBuf, File)>,
}

/// Re-applies `turns` to `initial`.
pub fn rebuild(scene: &Scene, initial: &AnnotationState, turns: &[Turn]) -> Result<AnnotationState> {
    let mut state = initial.clone();
    for turn in turns {
        for &action in std::iter::once(&turn.annotator).chain(&turn.reaction) {
            apply_action(scene, &mut state, action).map_err(ServiceError::from_action)?;
        }
    }
    Ok(state)
}

impl Session {
    /// Opens a new session and, when `log_path` is given, starts its log.
    pub fn create(
        id: String,
        image_id: String,
        options: SessionOptions,
        checkpoints: CheckpointRefs,
        initial: AnnotationState,
        log_path: Option<PathBuf>,
    ) -> Result<Self> {
        let at_ms = now_ms();
        let mut session = Session {
            id,
            image_id,
            options,
            checkpoints,
            created_ms: at_ms,
            updated_ms: at_ms,
            state: initial.clone(),
            initial,
            turns: Vec::new(),
            log: None,
        };
        if let Some(path) = log_path {
            let file = OpenOptions::new()
                .create_new(true)
                .append(true)
                .open(&path)
                .map_err(|e| ServiceError::io(&path, e))?;
            session.log = Some((path, file));
            session.append(&session.create_record())?;
        }
        Ok(session)
    }

    fn create_record(&self) -> LogRecord {
        LogRecord::Create {
            version: LOG_VERSION,
            session_id: self.id.clone(),
            image_id: self.image_id.clone(),
            options: self.options,
            checkpoints: self.checkpoints.clone(),
            at_ms: self.created_ms,
            initial: self.initial.clone(),
        }
    }

    fn append(&mut self, record: &LogRecord) -> Result<()> {
        let Some((path, file)) = self.log.as_mut() else {
            return Ok(());
        };
        let mut line = serde_json::to_string(record).expect("log record serializes");
        line.push('\n');
        file.write_all(line.as_bytes()).map_err(|e| ServiceError::io(path, e))?;
        file.flush().map_err(|e| ServiceError::io(path, e))
    }

    /// Records a completed turn. The state only advances once the log line is
    /// written.
    pub fn commit_turn(&mut self, turn: Turn, state: AnnotationState) -> Result<()> {
        let at_ms = now_ms();
        self.append(&LogRecord::Turn { at_ms, turn: turn.clone() })?;
        self.turns.push(turn);
        self.state = state;
        self.updated_ms = at_ms;
        Ok(())
    }

    /// Drops the last turn and rebuilds the state without it.
    pub fn undo(&mut self, scene: &Scene) -> Result<()> {
        if self.turns.is_empty() {
            return Err(ServiceError::Conflict("nothing to undo".into()));
        }
        let state = rebuild(scene, &self.initial, &self.turns[..self.turns.len() - 1])?;
        let at_ms = now_ms();
        self.append(&LogRecord::Undo { at_ms })?;
        self.turns.pop();
        self.state = state;
        self.updated_ms = at_ms;
        Ok(())
    }

    /// Rebuilds a session from its log and keeps appending to it. `scene_of`
    /// resolves the logged image id. A final line cut short by a crash is
    /// dropped; any other unreadable line is an error.
    pub fn replay<'a>(path: &Path, scene_of: &dyn Fn(&str) -> Option<&'a Scene>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ServiceError::io(path, e))?;
        let complete = text.ends_with('\n');
        let lines: Vec<&str> = text.lines().collect();
        let malformed = |i: usize, e: &dyn std::fmt::Display| {
            ServiceError::Core(coanno_core::Error::MalformedRecord(format!("{} line {}: {e}", path.display(), i + 1)))
        };
        let mut records = Vec::with_capacity(lines.len());
        let mut torn = false;
        for (i, line) in lines.iter().enumerate() {
            match serde_json::from_str::<LogRecord>(line) {
                Ok(r) => records.push(r),
                Err(e) if i + 1 == lines.len() && !complete => {
                    log::warn!("{}: dropping truncated final record: {e}", path.display());
                    torn = true;
                }
                Err(e) => return Err(malformed(i, &e)),
            }
        }
        let mut iter = records.into_iter();
        let Some(LogRecord::Create { version, session_id, image_id, options, checkpoints, at_ms, initial }) = iter.next()
        else {
            return Err(malformed(0, &"log does not start with a create record"));
        };
        if version != LOG_VERSION {
            return Err(ServiceError::Core(coanno_core::Error::Version { found: version, expected: LOG_VERSION }));
        }
        let scene = scene_of(&image_id)
            .ok_or_else(|| ServiceError::NotFound(format!("{}: unknown image {image_id:?}", path.display())))?;
        initial.check_invariants(scene)?;
        let mut turns: Vec<Turn> = Vec::new();
        let mut updated_ms = at_ms;
        for record in iter {
            match record {
                LogRecord::Turn { at_ms, turn } => {
                    turns.push(turn);
                    updated_ms = at_ms;
                }
                LogRecord::Undo { at_ms } => {
                    turns.pop();
                    updated_ms = at_ms;
                }
                LogRecord::Create { .. } => return Err(malformed(0, &"second create record")),
            }
        }
        let state = rebuild(scene, &initial, &turns)?;
        let file = OpenOptions::new().append(true).open(path).map_err(|e| ServiceError::io(path, e))?;
        if torn {
            let keep = text.rfind('\n').map_or(0, |i| i + 1);
            file.set_len(keep as u64).map_err(|e| ServiceError::io(path, e))?;
        } else if !complete && !text.is_empty() {
            (&file).write_all(b"\n").map_err(|e| ServiceError::io(path, e))?;
        }
        Ok(Session {
            id: session_id,
            image_id,
            options,
            checkpoints,
            created_ms: at_ms,
            updated_ms,
            initial,
            state,
            turns,
            log: Some((path.to_path_buf(), file)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use coanno_core::proposal::{ClassId, SegmentId};
    use coanno_core::state::ActionKind;

    #[test]
    fn turn_records_flatten_the_turn() {
        let record = LogRecord::Turn {
            at_ms: 7,
            turn: Turn {
                annotator: Action::annotator(ActionKind::Remove { segment_id: SegmentId(2) }),
                reaction: vec![Action::assistant(ActionKind::ChangeLabel { segment_id: SegmentId(4), new_label: ClassId(1) })],
            },
        };
        let json = serde_json::to_string(&record).unwrap();
        assert_eq!(
            json,
            r#"{"event":"turn","at_ms":7,"annotator":{"author":"annotator","kind":"remove","segment_id":2},"reaction":[{"author":"assistant","kind":"change_label","segment_id":4,"new_label":1}]}"#
        );
        assert_eq!(serde_json::from_str::<LogRecord>(&json).unwrap(), record);
    }

    #[test]
    fn options_reject_unknown_fields_and_fill_defaults() {
        let opts: SessionOptions = serde_json::from_str(r#"{"add":false}"#).unwrap();
        assert_eq!(opts, SessionOptions { add: false, ..Default::default() });
        assert!(serde_json::from_str::<SessionOptions>(r#"{"tua":0.5}"#).is_err());
    }
}
