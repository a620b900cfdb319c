//! Discrimination-study sessions: trial order, the present/respond state
//! machine, and pooled summaries for the rank tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::patterns::{Mode, PatternId, PatternLayout, Stimulus};
use crate::responder::{SyntheticResponder, CONFIDENCE_MAX, CONFIDENCE_MIN};
use crate::stats::{self, kruskal_wallis, pairwise_mann_whitney, PairwiseComparison, StatsError, TestResult};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("trial {trial} is waiting for a response")]
    ResponsePending { trial: usize },
    #[error("all trials have been presented")]
    SessionComplete,
    #[error("trial {got} is not the pending trial ({expected:?})")]
    WrongTrial { expected: Option<usize>, got: usize },
    #[error("confidence {0} outside 1..5")]
    InvalidConfidence(i64),
    #[error("trial {0} already has a response")]
    AlreadyAnswered(usize),
    #[error("pattern {pattern} does not belong to a {mode} session")]
    WrongMode { pattern: String, mode: Mode },
    #[error("training sessions do not record responses")]
    TrainingSession,
    #[error("invalid session spec: {0}")]
    InvalidSpec(String),
    #[error("sessions mix contact and stretch modes")]
    MixedModes,
    #[error("session {0} is incomplete")]
    IncompleteSession(String),
    #[error("no sessions to summarize")]
    Empty,
    #[error(transparent)]
    Stats(#[from] StatsError),
}

impl EngineError {
    /// Stable machine-readable name.
    pub fn code(&self) -> &'static str {
        match self {
            EngineError::ResponsePending { .. } => "ResponsePending",
            EngineError::SessionComplete => "SessionComplete",
            EngineError::WrongTrial { .. } => "WrongTrial",
            EngineError::InvalidConfidence(_) => "InvalidConfidence",
            EngineError::AlreadyAnswered(_) => "AlreadyAnswered",
            EngineError::WrongMode { .. } => "WrongMode",
            EngineError::TrainingSession => "TrainingSession",
            EngineError::InvalidSpec(_) => "InvalidSpec",
            EngineError::MixedModes => "MixedModes",
            EngineError::IncompleteSession(_) => "IncompleteSession",
            EngineError::Empty => "Empty",
            EngineError::Stats(_) => "Stats",
        }
    }
}

pub const DEFAULT_REPETITIONS: u32 = 5;

fn default_repetitions() -> u32 {
    DEFAULT_REPETITIONS
}

fn default_force_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub mode: Mode,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    /// Catalogue order; empty means the full set for the mode.
    #[serde(default)]
    pub pattern_set: Vec<PatternId>,
    pub subject_id: String,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub training: bool,
    /// Per-subject multiplier on the stimulus force.
    #[serde(default = "default_force_scale")]
    pub force_scale: f64,
}

impl SessionSpec {
    pub fn new(mode: Mode, subject_id: impl Into<String>, rng_seed: u64) -> Self {
        Self {
            mode,
            repetitions: DEFAULT_REPETITIONS,
            pattern_set: mode.patterns(),
            subject_id: subject_id.into(),
            rng_seed,
            training: false,
            force_scale: 1.0,
        }
    }

    /// Fill defaults and check invariants.
    pub fn normalized(mut self) -> Result<Self, EngineError> {
        if self.pattern_set.is_empty() {
            self.pattern_set = self.mode.patterns();
        }
        if self.repetitions < 1 {
            return Err(EngineError::InvalidSpec("repetitions must be at least 1".into()));
        }
        if let Some(p) = self.pattern_set.iter().find(|p| p.mode() != self.mode) {
            return Err(EngineError::InvalidSpec(format!("pattern {p} does not match mode {}", self.mode)));
        }
        let mut sorted = self.pattern_set.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.pattern_set.len() || sorted.len() != self.mode.pattern_count() {
            return Err(EngineError::InvalidSpec(format!(
                "pattern set must list each of the {} {} patterns once",
                self.mode.pattern_count(),
                self.mode
            )));
        }
        if !(self.force_scale > 0.0) || !self.force_scale.is_finite() {
            return Err(EngineError::InvalidSpec(format!("force_scale {} must be positive", self.force_scale)));
        }
        Ok(self)
    }

    pub fn trial_count(&self) -> usize {
        if self.training {
            self.pattern_set.len()
        } else {
            self.pattern_set.len() * self.repetitions as usize
        }
    }
}

/// Trial order: a seeded shuffle of the full multiset, or the catalogue order
/// once through for training.
pub fn build_sequence(spec: &SessionSpec) -> Vec<PatternId> {
    if spec.training {
        return spec.pattern_set.clone();
    }
    let mut seq: Vec<PatternId> = (0..spec.repetitions).flat_map(|_| spec.pattern_set.iter().copied()).collect();
    seq.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.rng_seed));
    seq
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub true_pattern: PatternId,
    /// ms
    pub presented_at: Option<u64>,
    pub response: Option<PatternId>,
    pub confidence: Option<u8>,
    /// ms
    pub response_at: Option<u64>,
}

impl Trial {
    pub fn answered(&self) -> bool {
        self.response.is_some()
    }

    pub fn correct(&self) -> Option<bool> {
        self.response.map(|r| r == self.true_pattern)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub spec: SessionSpec,
    pub created_at: u64,
    pub trials: Vec<Trial>,
    /// Next trial to present.
    pub cursor: usize,
    /// Presented trial awaiting its response.
    pub pending: Option<usize>,
}

impl Session {
    pub fn new(id: impl Into<String>, spec: SessionSpec, now: u64) -> Result<Self, EngineError> {
        let spec = spec.normalized()?;
        let trials = build_sequence(&spec)
            .into_iter()
            .enumerate()
            .map(|(index, true_pattern)| Trial {
                index,
                true_pattern,
                presented_at: None,
                response: None,
                confidence: None,
                response_at: None,
            })
            .collect();
        Ok(Self { id: id.into(), spec, created_at: now, trials, cursor: 0, pending: None })
    }

    pub fn mode(&self) -> Mode {
        self.spec.mode
    }

    pub fn is_complete(&self) -> bool {
        if self.spec.training {
            self.cursor == self.trials.len()
        } else {
            self.trials.iter().all(Trial::answered)
        }
    }

    pub fn answered(&self) -> usize {
        self.trials.iter().filter(|t| t.answered()).count()
    }

    /// Present the next trial. `base_force` is scaled by the session's
    /// calibration multiplier.
    pub fn next_stimulus(&mut self, layout: &PatternLayout, base_force: f64, now: u64) -> Result<(usize, Stimulus), EngineError> {
        if let Some(trial) = self.pending {
            return Err(EngineError::ResponsePending { trial });
        }
        if self.cursor >= self.trials.len() {
            return Err(EngineError::SessionComplete);
        }
        let i = self.cursor;
        let stim = self.trials[i]
            .true_pattern
            .stimulus(layout, base_force * self.spec.force_scale)
            .map_err(|e| EngineError::InvalidSpec(e.to_string()))?;
        self.trials[i].presented_at = Some(now);
        self.cursor += 1;
        if !self.spec.training {
            self.pending = Some(i);
        }
        Ok((i, stim))
    }

    pub fn record_response(&mut self, trial: usize, answer: PatternId, confidence: i64, now: u64) -> Result<&Trial, EngineError> {
        if self.spec.training {
            return Err(EngineError::TrainingSession);
        }
        if !(CONFIDENCE_MIN as i64..=CONFIDENCE_MAX as i64).contains(&confidence) {
            return Err(EngineError::InvalidConfidence(confidence));
        }
        if answer.mode() != self.spec.mode {
            return Err(EngineError::WrongMode { pattern: answer.label().into(), mode: self.spec.mode });
        }
        if self.trials.get(trial).is_some_and(Trial::answered) {
            return Err(EngineError::AlreadyAnswered(trial));
        }
        if self.pending != Some(trial) {
            return Err(EngineError::WrongTrial { expected: self.pending, got: trial });
        }
        let t = &mut self.trials[trial];
        t.response = Some(answer);
        t.confidence = Some(confidence as u8);
        t.response_at = Some(now);
        self.pending = None;
        Ok(&self.trials[trial])
    }

    pub fn result(&self) -> Result<SessionResult, EngineError> {
        if !self.is_complete() || self.spec.training {
            return Err(EngineError::IncompleteSession(self.id.clone()));
        }
        let mut confusion = ConfusionMatrix::new(self.spec.mode);
        for t in &self.trials {
            confusion.add(t.true_pattern, t.response.unwrap());
        }
        let confidences: Vec<f64> = self.trials.iter().filter_map(|t| t.confidence).map(f64::from).collect();
        let rates = confusion.diagonal_rates();
        Ok(SessionResult {
            session_id: self.id.clone(),
            spec: self.spec.clone(),
            trials: self.trials.clone(),
            per_pattern_rate: labelled(self.spec.mode, &rates),
            mean_rate: stats::mean(&rates).unwrap_or(0.0),
            mean_confidence: stats::mean(&confidences).unwrap_or(0.0),
            confusion,
        })
    }

    pub fn write_trials_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "index,true_pattern,response,confidence,correct,presented_at,response_at")?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        for t in &self.trials {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                t.index,
                t.true_pattern,
                opt(t.response.map(|r| r.to_string())),
                opt(t.confidence.map(|c| c.to_string())),
                opt(t.correct().map(|c| c.to_string())),
                opt(t.presented_at.map(|v| v.to_string())),
                opt(t.response_at.map(|v| v.to_string())),
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternRate {
    pub pattern: String,
    pub rate: f64,
}

fn labelled(mode: Mode, rates: &[f64]) -> Vec<PatternRate> {
    mode.patterns()
        .iter()
        .zip(rates)
        .map(|(p, &rate)| PatternRate { pattern: p.label().into(), rate })
        .collect()
}

/// Counts of presented (rows) against answered (columns) patterns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub mode: Mode,
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u32>>,
}

impl ConfusionMatrix {
    pub fn new(mode: Mode) -> Self {
        let n = mode.pattern_count();
        Self {
            mode,
            labels: mode.patterns().iter().map(|p| p.label().to_string()).collect(),
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn add(&mut self, truth: PatternId, answer: PatternId) {
        self.counts[truth.index()][answer.index()] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn total(&self) -> u32 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u32> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|r| {
                let s: u32 = r.iter().sum();
                r.iter().map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 }).collect()
            })
            .collect()
    }

    pub fn diagonal_rates(&self) -> Vec<f64> {
        self.row_normalized().iter().enumerate().map(|(i, r)| r[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub session_id: String,
    pub spec: SessionSpec,
    pub trials: Vec<Trial>,
    pub per_pattern_rate: Vec<PatternRate>,
    pub mean_rate: f64,
    pub mean_confidence: f64,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRates {
    pub subject_id: String,
    pub session_id: String,
    /// Catalogue order.
    pub rates: Vec<f64>,
    pub mean_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mode: Mode,
    pub sessions: usize,
    pub per_pattern_rate: Vec<PatternRate>,
    pub mean_rate: f64,
    pub mean_confidence: f64,
    pub confusion: ConfusionMatrix,
    pub per_subject: Vec<SubjectRates>,
}

impl Aggregate {
    /// Per-pattern samples across subjects, the groups for the rank tests.
    pub fn groups(&self) -> Vec<Vec<f64>> {
        let n = self.mode.pattern_count();
        (0..n).map(|j| self.per_subject.iter().map(|s| s.rates[j]).collect()).collect()
    }

    pub fn labels(&self) -> Vec<String> {
        self.confusion.labels.clone()
    }
}

/// Pool complete sessions of one mode.
pub fn summarize(sessions: &[Session]) -> Result<Aggregate, EngineError> {
    let first = sessions.first().ok_or(EngineError::Empty)?;
    let mode = first.mode();
    if sessions.iter().any(|s| s.mode() != mode) {
        return Err(EngineError::MixedModes);
    }
    let results = sessions.iter().map(Session::result).collect::<Result<Vec<_>, _>>()?;
    let mut confusion = ConfusionMatrix::new(mode);
    let mut confidence_sum = 0.0;
    let mut confidence_n = 0usize;
    let mut per_subject = Vec::with_capacity(results.len());
    for r in &results {
        confusion.merge(&r.confusion);
        for c in r.trials.iter().filter_map(|t| t.confidence) {
            confidence_sum += c as f64;
            confidence_n += 1;
        }
        per_subject.push(SubjectRates {
            subject_id: r.spec.subject_id.clone(),
            session_id: r.session_id.clone(),
            rates: r.confusion.diagonal_rates(),
            mean_confidence: r.mean_confidence,
        });
    }
    per_subject.sort_by(|a, b| (&a.subject_id, &a.session_id).cmp(&(&b.subject_id, &b.session_id)));
    let rates = confusion.diagonal_rates();
    Ok(Aggregate {
        mode,
        sessions: results.len(),
        per_pattern_rate: labelled(mode, &rates),
        mean_rate: stats::mean(&rates).unwrap_or(0.0),
        mean_confidence: if confidence_n == 0 { 0.0 } else { confidence_sum / confidence_n as f64 },
        confusion,
        per_subject,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub aggregate: Aggregate,
    /// Kruskal-Wallis across patterns on per-subject rates.
    pub omnibus: TestResult,
    /// Mann-Whitney U for every pattern pair.
    pub pairwise: Vec<PairwiseComparison>,
    pub alpha: f64,
    /// Always "none": pairwise p-values are uncorrected.
    pub multiple_comparison_correction: String,
    pub confusion_normalized: Vec<Vec<f64>>,
}

pub fn analyze(aggregate: Aggregate, alpha: f64) -> Result<AnalysisReport, EngineError> {
    let groups = aggregate.groups();
    let omnibus = kruskal_wallis(&groups)?;
    let pairwise = pairwise_mann_whitney(&aggregate.labels(), &groups, alpha)?;
    let confusion_normalized = aggregate.confusion.row_normalized();
    Ok(AnalysisReport {
        aggregate,
        omnibus,
        pairwise,
        alpha,
        multiple_comparison_correction: "none".into(),
        confusion_normalized,
    })
}

/// Answer every trial of `session` with `responder`, as a participant drawn
/// from the responder's population. Timestamps advance 2 s per trial.
pub fn run_synthetic<R: Rng + ?Sized>(
    session: &mut Session,
    responder: &SyntheticResponder,
    layout: &PatternLayout,
    rng: &mut R,
    start: u64,
) -> Result<(), EngineError> {
    let subject = responder.subject(rng);
    let mut now = start;
    loop {
        let (i, _) = match session.next_stimulus(layout, 1.0, now) {
            Ok(x) => x,
            Err(EngineError::SessionComplete) => return Ok(()),
            Err(e) => return Err(e),
        };
        if session.spec.training {
            now += 2000;
            continue;
        }
        let r = subject
            .respond(session.trials[i].true_pattern, rng)
            .map_err(|e| EngineError::InvalidSpec(e.to_string()))?;
        session.record_response(i, r.answer, r.confidence as i64, now + 1500)?;
        now += 2000;
    }
}

/// A synthetic cohort: `subjects` complete sessions, all derived from `seed`.
pub fn simulate_cohort(
    mode: Mode,
    subjects: usize,
    seed: u64,
    responder: &SyntheticResponder,
    layout: &PatternLayout,
) -> Result<Vec<Session>, EngineError> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    (0..subjects)
        .map(|i| {
            let session_seed: u64 = master.random();
            let spec = SessionSpec::new(mode, format!("S{:02}", i + 1), session_seed);
            let mut s = Session::new(format!("{seed}-{i}"), spec, 0)?;
            let mut rng = ChaCha8Rng::seed_from_u64(session_seed);
            rng.set_stream(1);
            run_synthetic(&mut s, responder, layout, &mut rng, 0)?;
            Ok(s)
        })
        .collect()
}
