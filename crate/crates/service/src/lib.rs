//! Session-oriented HTTP API over the annotation engine.
//!
//! Each session owns one image and one [`AnnotationState`]. Posting an
//! annotator action applies it, runs one assistant turn, appends both to the
//! session log, and returns the reaction so a client can highlight it.

pub mod error;
pub mod image;
pub mod routes;
pub mod session;
pub mod snapshot;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use coanno_core::engine::{apply_annotator_action, apply_assistant_turn, AssistantConfig, ContextAssistant, Initializer};
use coanno_core::init::{greedy_compose, ia_compose, IaModel, DEFAULT_VISIBILITY_THRESHOLD};
use coanno_core::io::SceneData;
use coanno_core::state::{Action, AnnotationState, Author};
use tokio::sync::Mutex;

pub use error::{Result, ServiceError};
pub use routes::router;
pub use session::{CheckpointRefs, LogRecord, Session, SessionOptions, Turn};
pub use snapshot::{ActionResponse, Candidate, SessionDescriptor, SessionView, StateSnapshot};

pub const DEFAULT_TURN_BUDGET: Duration = Duration::from_millis(200);

/// Models the server was started with and where they were loaded from.
#[derive(Debug, Clone, Default)]
pub struct Models {
    pub context: Option<ContextAssistant>,
    pub initialization: Option<IaModel>,
    pub refs: CheckpointRefs,
}

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    /// Directory for session logs; `None` keeps sessions in memory only.
    pub sessions_dir: Option<PathBuf>,
    /// Directory searched for display images before falling back to a
    /// rendering of the ground truth.
    pub images_dir: Option<PathBuf>,
    /// Wall-clock budget for assistant additions per turn; `None` is unbounded.
    pub turn_budget: Option<Duration>,
}

pub struct Service {
    scenes: Vec<SceneData>,
    index: HashMap<String, usize>,
    models: Models,
    config: ServiceConfig,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

fn session_number(id: &str) -> Option<u64> {
    id.strip_prefix('s')?.parse().ok()
}

impl Service {
    /// Builds the service and replays every log found in the sessions
    /// directory.
    pub fn new(scenes: Vec<SceneData>, models: Models, config: ServiceConfig) -> Result<Self> {
        let index = scenes.iter().enumerate().map(|(i, s)| (s.scene.proposals.image_id.clone(), i)).collect();
        let service = Service {
            scenes,
            index,
            models,
            config,
            sessions: RwLock::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
        };
        service.restore()?;
        Ok(service)
    }

    fn restore(&self) -> Result<()> {
        let Some(dir) = &self.config.sessions_dir else {
            return Ok(());
        };
        std::fs::create_dir_all(dir).map_err(|e| ServiceError::io(dir, e))?;
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| ServiceError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        let mut sessions = self.sessions.write().expect("session table lock");
        let mut max_id = 0;
        for path in paths {
            let session = Session::replay(&path, &|id| self.index.get(id).map(|&i| &self.scenes[i].scene))?;
            if session.checkpoints != self.models.refs {
                log::warn!("session {} was opened with other checkpoints: {:?}", session.id, session.checkpoints);
            }
            max_id = max_id.max(session_number(&session.id).unwrap_or(0));
            sessions.insert(session.id.clone(), Arc::new(Mutex::new(session)));
        }
        self.next_id.store(max_id + 1, Ordering::SeqCst);
        log::info!("restored {} sessions", sessions.len());
        Ok(())
    }

    pub fn models(&self) -> &Models {
        &self.models
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.scenes.iter().map(|s| s.scene.proposals.image_id.as_str())
    }

    pub fn scene_data(&self, image_id: &str) -> Result<&SceneData> {
        self.index
            .get(image_id)
            .map(|&i| &self.scenes[i])
            .ok_or_else(|| ServiceError::NotFound(format!("unknown image {image_id:?}")))
    }

    pub fn images_dir(&self) -> Option<&std::path::Path> {
        self.config.images_dir.as_deref()
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.sessions.read().expect("session table lock").keys().cloned().collect()
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>> {
        self.sessions
            .read()
            .expect("session table lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("unknown session {id:?}")))
    }

    fn relabel(&self) -> Option<&coanno_core::context::EnsembleModels> {
        self.models.context.as_ref().map(|c| &c.relabel)
    }

    fn view(&self, session: &Session) -> Result<SessionView> {
        let scene = &self.scene_data(&session.image_id)?.scene;
        Ok(SessionView {
            session: snapshot::descriptor(session, scene),
            state: snapshot::snapshot(scene, &session.state, self.relabel(), session.turns.len())?,
        })
    }

    pub fn initial_state(&self, image_id: &str, initializer: Initializer) -> Result<AnnotationState> {
        let scene = &self.scene_data(image_id)?.scene;
        match initializer {
            Initializer::Greedy => Ok(greedy_compose(scene, DEFAULT_VISIBILITY_THRESHOLD)),
            Initializer::Assistant => {
                let ia = self
                    .models
                    .initialization
                    .as_ref()
                    .ok_or_else(|| ServiceError::Conflict("no initialization assistant is loaded".into()))?;
                Ok(ia_compose(scene, ia)?)
            }
        }
    }

    pub async fn create_session(&self, image_id: &str, mut options: SessionOptions) -> Result<SessionView> {
        options.validate()?;
        let initializer = options.initializer.unwrap_or(match self.models.initialization {
            Some(_) => Initializer::Assistant,
            None => Initializer::Greedy,
        });
        options.initializer = Some(initializer);
        let initial = self.initial_state(image_id, initializer)?;
        let id = format!("s{:06}", self.next_id.fetch_add(1, Ordering::SeqCst));
        let log_path = self.config.sessions_dir.as_ref().map(|d| d.join(format!("{id}.jsonl")));
        let session = Session::create(id.clone(), image_id.to_string(), options, self.models.refs.clone(), initial, log_path)?;
        let view = self.view(&session)?;
        self.sessions.write().expect("session table lock").insert(id, Arc::new(Mutex::new(session)));
        Ok(view)
    }

    pub async fn get_state(&self, id: &str) -> Result<SessionView> {
        let handle = self.session(id)?;
        let session = handle.lock().await;
        self.view(&session)
    }

    /// Applies one annotator action followed by one assistant turn.
    pub async fn post_action(&self, id: &str, action: Action) -> Result<ActionResponse> {
        if action.author != Author::Annotator {
            return Err(ServiceError::Malformed("only annotator actions may be posted".into()));
        }
        let handle = self.session(id)?;
        let mut session = handle.lock().await;
        let scene = &self.scene_data(&session.image_id)?.scene;
        let mut state = session.state.clone();
        apply_annotator_action(scene, &mut state, action.kind).map_err(ServiceError::from_action)?;
        let reaction = match &self.models.context {
            Some(ca) if session.options.relabel || session.options.add => {
                let cfg = AssistantConfig {
                    relabel: session.options.relabel,
                    add: session.options.add,
                    tau: session.options.tau,
                    max_adds: session.options.max_adds,
                    time_budget: self.config.turn_budget,
                };
                apply_assistant_turn(scene, &mut state, ca, &cfg)?
            }
            _ => Vec::new(),
        };
        session.commit_turn(Turn { annotator: action, reaction: reaction.clone() }, state)?;
        let view = self.view(&session)?;
        Ok(ActionResponse { applied: action, reaction, session: view.session, state: view.state })
    }

    pub async fn undo(&self, id: &str) -> Result<SessionView> {
        let handle = self.session(id)?;
        let mut session = handle.lock().await;
        let scene = &self.scene_data(&session.image_id)?.scene;
        session.undo(scene)?;
        self.view(&session)
    }

    pub async fn candidates(&self, id: &str, x: u32, y: u32, limit: usize) -> Result<Vec<Candidate>> {
        let handle = self.session(id)?;
        let session = handle.lock().await;
        let scene = &self.scene_data(&session.image_id)?.scene;
        if x >= scene.width() || y >= scene.height() {
            return Err(ServiceError::Malformed(format!(
                "pixel ({x}, {y}) lies outside the {}x{} image",
                scene.width(),
                scene.height()
            )));
        }
        snapshot::candidates(scene, &session.state, self.relabel(), x, y, limit)
    }

    /// The logged turns of a session, oldest first.
    pub async fn turns(&self, id: &str) -> Result<(AnnotationState, Vec<Turn>)> {
        let handle = self.session(id)?;
        let session = handle.lock().await;
        Ok((session.initial.clone(), session.turns.clone()))
    }
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(service: Arc<Service>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service)).await
}
