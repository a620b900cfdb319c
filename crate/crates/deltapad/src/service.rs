//! Session service: the one code path for human and synthetic sessions.
//! Each session is mutated under its own lock, persisted after every change,
//! and stimuli are handed to the device loop.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex};

use deltapad_core::config::DeviceModel;
use deltapad_core::experiment::{analyze, summarize, AnalysisReport, EngineError, Session, SessionResult, SessionSpec, Trial};
use deltapad_core::patterns::{contact_point_position, stretch_path, Mode, PatternId, PatternLayout, Stimulus};
use deltapad_core::render::Renderer;
use deltapad_core::Pose;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use crate::device::{DeviceError, DeviceHandle, PlaybackReport, StreamEvent, TrialEvent, TrialEventKind};
use crate::store::{SessionStore, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("session {0} not found")]
    NotFound(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("{message}")]
    BadRequest { code: &'static str, message: String },
    #[error("the stimulus for session {0} is still playing")]
    StimulusInProgress(String),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error("render: {0}")]
    Render(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "SessionNotFound",
            ServiceError::Engine(e) => e.code(),
            ServiceError::BadRequest { code, .. } => code,
            ServiceError::StimulusInProgress(_) => "StimulusInProgress",
            ServiceError::Device(_) => "DeviceError",
            ServiceError::Render(_) => "RenderError",
            ServiceError::Store(_) => "StorageError",
        }
    }

    /// HTTP status for the error.
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::NotFound(_) => 404,
            ServiceError::Engine(e) => match e {
                EngineError::ResponsePending { .. } | EngineError::SessionComplete | EngineError::IncompleteSession(_) => 409,
                EngineError::Empty => 404,
                _ => 422,
            },
            ServiceError::BadRequest { .. } => 422,
            ServiceError::StimulusInProgress(_) => 409,
            ServiceError::Device(_) => 502,
            ServiceError::Render(_) | ServiceError::Store(_) => 500,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub mode: Mode,
    pub subject_id: String,
    /// Drawn at random when absent.
    #[serde(default)]
    pub rng_seed: Option<u64>,
    #[serde(default)]
    pub repetitions: Option<u32>,
    #[serde(default)]
    pub training: bool,
    #[serde(default)]
    pub force_scale: Option<f64>,
    /// Pattern labels; all patterns of the mode when absent.
    #[serde(default)]
    pub pattern_set: Option<Vec<String>>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseRequest {
    pub trial: usize,
    pub answer: String,
    pub confidence: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub mode: Mode,
    pub subject_id: String,
    pub created_at: u64,
    pub trials: usize,
    pub answered: usize,
    pub complete: bool,
}

impl SessionSummary {
    fn of(s: &Session) -> Self {
        Self {
            id: s.id.clone(),
            mode: s.mode(),
            subject_id: s.spec.subject_id.clone(),
            created_at: s.created_at,
            trials: s.trials.len(),
            answered: s.answered(),
            complete: s.is_complete(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Presented {
    pub session_id: String,
    pub trial: usize,
    pub stimulus: Stimulus,
    pub playback: PlaybackReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Responded {
    pub session_id: String,
    pub trial: Trial,
    pub answered: usize,
    pub remaining: usize,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternEntry {
    pub label: String,
    pub index: usize,
    /// Contact point, for contact patterns.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub position: Option<Pose>,
    /// Stroke start and end, for stretch patterns.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start: Option<Pose>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub end: Option<Pose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternCatalog {
    pub mode: Mode,
    pub layout: PatternLayout,
    pub patterns: Vec<PatternEntry>,
}

pub fn pattern_catalog(mode: Mode, layout: &PatternLayout) -> PatternCatalog {
    let patterns = mode
        .patterns()
        .into_iter()
        .map(|p| {
            let mut e = PatternEntry { label: p.label().into(), index: p.index(), position: None, start: None, end: None };
            match p {
                PatternId::Contact(c) => e.position = Some(contact_point_position(c, layout)),
                PatternId::Stretch(d) => {
                    if let Ok((s, t)) = stretch_path(d, layout) {
                        e.start = Some(s);
                        e.end = Some(t);
                    }
                }
            }
            e
        })
        .collect();
    PatternCatalog { mode, layout: *layout, patterns }
}

pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

/// Milliseconds since the Unix epoch.
pub fn system_clock() -> Clock {
    Arc::new(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    })
}

pub struct Service {
    model: DeviceModel,
    renderer: Renderer,
    store: SessionStore,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    playing: Arc<Mutex<HashSet<String>>>,
    device: DeviceHandle,
    events: broadcast::Sender<StreamEvent>,
    clock: Clock,
}

/// Clears the playing flag however presentation ends.
struct PlayingGuard {
    set: Arc<Mutex<HashSet<String>>>,
    id: String,
}

impl Drop for PlayingGuard {
    fn drop(&mut self) {
        self.set.lock().unwrap().remove(&self.id);
    }
}

impl Service {
    /// Build the service and load every persisted session.
    pub fn new(
        model: DeviceModel,
        store: SessionStore,
        device: DeviceHandle,
        events: broadcast::Sender<StreamEvent>,
        clock: Clock,
    ) -> Result<Self, ServiceError> {
        let sessions = store
            .load_all()?
            .into_iter()
            .map(|s| (s.id.clone(), Arc::new(Mutex::new(s))))
            .collect();
        Ok(Self {
            renderer: Renderer::new(&model),
            model,
            store,
            sessions: Mutex::new(sessions),
            playing: Arc::new(Mutex::new(HashSet::new())),
            device,
            events,
            clock,
        })
    }

    pub fn model(&self) -> &DeviceModel {
        &self.model
    }

    pub fn device(&self) -> &DeviceHandle {
        &self.device
    }

    pub fn subscribe(&self) -> broadcast::Receiver<StreamEvent> {
        self.events.subscribe()
    }

    fn emit(&self, session_id: &str, trial: usize, event: TrialEventKind, detail: Option<String>) {
        let _ = self.events.send(StreamEvent::Trial(TrialEvent { session_id: session_id.into(), trial, event, detail }));
    }

    fn cell(&self, id: &str) -> Result<Arc<Mutex<Session>>, ServiceError> {
        self.sessions.lock().unwrap().get(id).cloned().ok_or_else(|| ServiceError::NotFound(id.into()))
    }

    pub fn create_session(&self, req: CreateSession) -> Result<Session, ServiceError> {
        let mut spec = SessionSpec::new(req.mode, req.subject_id, req.rng_seed.unwrap_or_else(rand::random));
        if let Some(r) = req.repetitions {
            spec.repetitions = r;
        }
        spec.training = req.training;
        if let Some(f) = req.force_scale {
            spec.force_scale = f;
        }
        if let Some(labels) = req.pattern_set {
            spec.pattern_set = labels
                .iter()
                .map(|l| {
                    req.mode.parse_pattern(l).map_err(|e| ServiceError::BadRequest { code: "UnknownPattern", message: e.to_string() })
                })
                .collect::<Result<_, _>>()?;
        }
        let id = uuid::Uuid::new_v4().simple().to_string();
        let session = Session::new(id.clone(), spec, (self.clock)())?;
        self.store.save(&session)?;
        self.sessions.lock().unwrap().insert(id, Arc::new(Mutex::new(session.clone())));
        Ok(session)
    }

    pub fn session(&self, id: &str) -> Result<Session, ServiceError> {
        Ok(self.cell(id)?.lock().unwrap().clone())
    }

    pub fn list(&self) -> Vec<SessionSummary> {
        let cells: Vec<_> = self.sessions.lock().unwrap().values().cloned().collect();
        let mut out: Vec<SessionSummary> = cells.iter().map(|c| SessionSummary::of(&c.lock().unwrap())).collect();
        out.sort_by(|a, b| (a.created_at, &a.id).cmp(&(b.created_at, &b.id)));
        out
    }

    /// Advance to the next trial, play its stimulus and return once the
    /// device has finished.
    pub async fn present(&self, id: &str) -> Result<Presented, ServiceError> {
        let cell = self.cell(id)?;
        let (trial, stimulus, trajectory, guard) = {
            let mut s = cell.lock().unwrap();
            if self.playing.lock().unwrap().contains(id) {
                return Err(ServiceError::StimulusInProgress(id.into()));
            }
            let mut next = s.clone();
            let (i, stim) = next.next_stimulus(&self.model.layout, self.model.render.default_force, (self.clock)())?;
            let traj = self.renderer.render(&stim).map_err(|e| ServiceError::Render(e.to_string()))?;
            self.store.save(&next)?;
            *s = next;
            self.playing.lock().unwrap().insert(id.to_string());
            (i, stim, traj, PlayingGuard { set: self.playing.clone(), id: id.to_string() })
        };
        self.emit(id, trial, TrialEventKind::Presented, None);
        let result = self.device.play(trajectory).await;
        drop(guard);
        match result {
            Ok(playback) => {
                self.emit(id, trial, TrialEventKind::StimulusComplete, None);
                Ok(Presented { session_id: id.into(), trial, stimulus, playback })
            }
            Err(e) => {
                self.emit(id, trial, TrialEventKind::StimulusFailed, Some(e.to_string()));
                Err(e.into())
            }
        }
    }

    pub fn respond(&self, id: &str, req: ResponseRequest) -> Result<Responded, ServiceError> {
        let cell = self.cell(id)?;
        let mut s = cell.lock().unwrap();
        if self.playing.lock().unwrap().contains(id) {
            return Err(ServiceError::StimulusInProgress(id.into()));
        }
        let mode = s.mode();
        let other = match mode {
            Mode::Contact => Mode::Stretch,
            Mode::Stretch => Mode::Contact,
        };
        // a label from the other study reaches the engine, which names the mismatch
        let answer = mode.parse_pattern(&req.answer).or_else(|_| other.parse_pattern(&req.answer)).map_err(|_| {
            ServiceError::BadRequest { code: "UnknownPattern", message: format!("unknown pattern {:?}", req.answer) }
        })?;
        let mut next = s.clone();
        let trial = next.record_response(req.trial, answer, req.confidence, (self.clock)())?.clone();
        self.store.save(&next)?;
        *s = next;
        let complete = s.is_complete();
        self.emit(id, req.trial, TrialEventKind::Responded, None);
        if complete {
            self.emit(id, req.trial, TrialEventKind::SessionComplete, None);
        }
        Ok(Responded {
            session_id: id.into(),
            trial,
            answered: s.answered(),
            remaining: s.trials.len() - s.answered(),
            complete,
        })
    }

    pub fn report(&self, id: &str) -> Result<SessionResult, ServiceError> {
        Ok(self.cell(id)?.lock().unwrap().result()?)
    }

    /// Pooled analysis over every complete, non-training session of `mode`.
    pub fn analysis(&self, mode: Mode, alpha: f64) -> Result<AnalysisReport, ServiceError> {
        let cells: Vec<_> = self.sessions.lock().unwrap().values().cloned().collect();
        let sessions: Vec<Session> = cells
            .iter()
            .map(|c| c.lock().unwrap().clone())
            .filter(|s| s.mode() == mode && !s.spec.training && s.is_complete())
            .collect();
        let agg = summarize(&sessions)?;
        Ok(analyze(agg, alpha)?)
    }

    pub fn catalog(&self, mode: Mode) -> PatternCatalog {
        pattern_catalog(mode, &self.model.layout)
    }

    pub fn shutdown(&self) {
        self.device.shutdown();
    }
}
