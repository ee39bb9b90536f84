//! Step-level feedback: automatic (silver) process and outcome labels, a
//! durable store for human (gold) feedback, and the conversion of feedback
//! into `(state, target, reward)` training triples.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{StepRecord, Trajectory};
use crate::fsm::{BranchToken, Module, Payload};
use crate::jsonl;
use crate::kb::{KnowledgeBase, PassageRef, Retriever};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubQa {
    pub q: String,
    pub a: String,
}

/// Gold final answer, sub-queries with answers, and evidence passages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAnnotation {
    pub question_id: String,
    #[serde(default)]
    pub question: String,
    pub answer: String,
    #[serde(default)]
    pub sub_queries: Vec<SubQa>,
    pub evidence: Vec<PassageRef>,
}

impl GoldAnnotation {
    pub fn evidence_docs(&self) -> HashSet<&str> {
        self.evidence.iter().map(|e| e.doc_id.as_str()).collect()
    }

    /// `Ê ⊆ E` by passage identity.
    pub fn evidence_covered_by(&self, collected: &[PassageRef]) -> bool {
        let have: HashSet<_> = collected.iter().collect();
        self.evidence.iter().all(|e| have.contains(e))
    }

    /// Every evidence reference must resolve in `kb`.
    pub fn check_against(&self, kb: &KnowledgeBase) -> Result<(), FeedbackError> {
        for e in &self.evidence {
            if kb.passage(e).is_none() {
                return Err(FeedbackError::UnresolvedGold {
                    question_id: self.question_id.clone(),
                    passage: e.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Gold annotations keyed by question id.
#[derive(Debug, Clone, Default)]
pub struct GoldStore {
    by_id: BTreeMap<String, GoldAnnotation>,
}

impl GoldStore {
    pub fn new(golds: impl IntoIterator<Item = GoldAnnotation>) -> Self {
        Self {
            by_id: golds
                .into_iter()
                .map(|g| (g.question_id.clone(), g))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, jsonl::JsonlError> {
        Ok(Self::new(jsonl::read::<GoldAnnotation>(path)?))
    }

    pub fn get(&self, question_id: &str) -> Option<&GoldAnnotation> {
        self.by_id.get(question_id)
    }

    /// Annotations in question-id order.
    pub fn iter(&self) -> impl Iterator<Item = &GoldAnnotation> {
        self.by_id.values()
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "refinement", rename_all = "lowercase")]
pub enum Feedback {
    Right,
    Wrong,
    Refine(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Right,
    Wrong,
    Refine,
}

impl Feedback {
    pub fn from_verdict(verdict: Verdict, refinement: Option<&str>) -> Result<Self, FeedbackError> {
        match verdict {
            Verdict::Right => Ok(Feedback::Right),
            Verdict::Wrong => Ok(Feedback::Wrong),
            Verdict::Refine => match refinement.map(str::trim) {
                Some(t) if !t.is_empty() => Ok(Feedback::Refine(t.to_string())),
                _ => Err(FeedbackError::EmptyRefinement),
            },
        }
    }
}

/// Feedback-refined `(state, target, reward)` triple for one LLM step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledStep {
    pub module: Module,
    #[serde(rename = "input")]
    pub input_render: String,
    pub target: String,
    pub reward: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
}

#[derive(Debug, Error, PartialEq)]
pub enum FeedbackError {
    #[error("module {0} has no feedback rule")]
    NoRule(Module),
    #[error("gold evidence {passage} of question {question_id} is not in the knowledge base")]
    UnresolvedGold {
        question_id: String,
        passage: PassageRef,
    },
    #[error("refinement text must be non-empty")]
    EmptyRefinement,
    #[error("step record is inconsistent: {0}")]
    BadStep(String),
}

/// Right → `(y, 1)`, Wrong → `(y, 0)`, Refine(t) → `(t, 1)`.
pub fn convert(y: &str, f: &Feedback) -> (String, u8) {
    match f {
        Feedback::Right => (y.to_string(), 1),
        Feedback::Wrong => (y.to_string(), 0),
        Feedback::Refine(t) => (t.clone(), 1),
    }
}

fn labeled(t: &Trajectory, k: usize, step: &StepRecord, f: &Feedback) -> LabeledStep {
    let (target, reward) = convert(&step.output.raw, f);
    LabeledStep {
        module: step.module,
        input_render: step.input_render.clone(),
        target,
        reward,
        trajectory_id: Some(t.trajectory_id.clone()),
        step: Some(k),
    }
}

fn right_if(cond: bool) -> Feedback {
    if cond {
        Feedback::Right
    } else {
        Feedback::Wrong
    }
}

/// Automatic process feedback for one LLM step, from gold annotations.
///
/// `retriever` must carry the same `max_docs` the agent ran with; it backs
/// the Decompose/`[Next]` document-overlap check.
pub fn silver_process_feedback(
    step: &StepRecord,
    gold: &GoldAnnotation,
    kb: &KnowledgeBase,
    retriever: &Retriever,
) -> Result<Feedback, FeedbackError> {
    let ctx = &step.context;
    let gold_set: HashSet<&PassageRef> = gold.evidence.iter().collect();
    match (step.module, step.output.token) {
        (Module::Decompose, BranchToken::Next) => {
            let q = step
                .output
                .sub_query()
                .ok_or_else(|| FeedbackError::BadStep("[Next] without sub-query".into()))?;
            let (session, _) = retriever.search_doc(kb, q);
            let docs = gold.evidence_docs();
            let overlap = session.doc_ids().any(|d| docs.contains(d));
            Ok(right_if(overlap))
        }
        (Module::Decompose, BranchToken::Finish) => {
            Ok(right_if(gold.evidence_covered_by(&ctx.evidence)))
        }
        (Module::Judge, y @ (BranchToken::Relevant | BranchToken::Irrelevant)) => {
            let d = ctx
                .snippet
                .as_ref()
                .ok_or_else(|| FeedbackError::BadStep("Judge step without snippet".into()))?;
            let label = if gold.evidence_docs().contains(d.doc_id.as_str()) {
                BranchToken::Relevant
            } else {
                BranchToken::Irrelevant
            };
            Ok(if label == y {
                Feedback::Right
            } else {
                Feedback::Refine(label.tag().to_string())
            })
        }
        (Module::Answer, BranchToken::Answerable) => match &step.output.payload {
            Payload::Answer { evidence, .. } => Ok(right_if(gold_set.contains(evidence))),
            _ => Err(FeedbackError::BadStep(
                "[Answerable] without evidence".into(),
            )),
        },
        (Module::Answer, BranchToken::Unanswerable) => {
            Ok(right_if(ctx.passages.iter().all(|p| !gold_set.contains(p))))
        }
        (Module::Complete, _) => {
            if gold.evidence_covered_by(&ctx.evidence) {
                if step.output.raw.trim() == gold.answer.trim() {
                    Ok(Feedback::Right)
                } else {
                    Ok(Feedback::Refine(gold.answer.clone()))
                }
            } else {
                Ok(Feedback::Wrong)
            }
        }
        (m, _) => Err(FeedbackError::NoRule(m)),
    }
}

/// Silver process feedback and conversion for every LLM step.
pub fn label_process(
    t: &Trajectory,
    gold: &GoldAnnotation,
    kb: &KnowledgeBase,
    retriever: &Retriever,
) -> Result<Vec<LabeledStep>, FeedbackError> {
    t.llm_steps()
        .map(|(k, s)| {
            let f = silver_process_feedback(s, gold, kb, retriever)?;
            Ok(labeled(t, k, s, &f))
        })
        .collect()
}

/// Outcome-feedback labels. The outcome counts as correct when every gold
/// evidence passage was collected.
pub fn silver_outcome_feedback(t: &Trajectory, gold: &GoldAnnotation) -> Vec<LabeledStep> {
    let success = gold.evidence_covered_by(&t.evidence);
    t.llm_steps()
        .map(|(k, s)| {
            let y = s.output.raw.clone();
            let (target, reward) = match s.module {
                Module::Decompose | Module::Answer => (y, u8::from(success)),
                Module::Judge if success => (y, 1),
                Module::Judge => {
                    let flipped = s
                        .output
                        .token
                        .opposite()
                        .map(|t| t.tag().to_string())
                        .unwrap_or(y);
                    (flipped, 1)
                }
                Module::Complete if success => (gold.answer.clone(), 1),
                _ => (y, 0),
            };
            LabeledStep {
                module: s.module,
                input_render: s.input_render.clone(),
                target,
                reward,
                trajectory_id: Some(t.trajectory_id.clone()),
                step: Some(k),
            }
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown trajectory {0:?}")]
    NotFound(String),
    #[error("trajectory {id:?} has no step {step}")]
    StepNotFound { id: String, step: usize },
    #[error("step {step} of {id:?} is a tool step and takes no feedback")]
    ToolStep { id: String, step: usize },
    #[error("trajectory {0:?} is already finalized")]
    Finalized(String),
    #[error("trajectory {id:?} has unannotated steps {pending:?}")]
    Pending { id: String, pending: Vec<usize> },
    #[error(transparent)]
    Invalid(#[from] FeedbackError),
    #[error("feedback store io: {0}")]
    Io(#[from] std::io::Error),
    #[error("feedback store log: {0}")]
    Log(#[from] jsonl::JsonlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueueStatus {
    Pending,
    Finalized,
    Skipped,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueueEntry {
    pub iteration: usize,
    pub trajectory: Trajectory,
    pub feedback: BTreeMap<usize, Feedback>,
    pub status: QueueStatus,
}

impl QueueEntry {
    pub fn pending_steps(&self) -> Vec<usize> {
        self.trajectory
            .llm_steps()
            .map(|(k, _)| k)
            .filter(|k| !self.feedback.contains_key(k))
            .collect()
    }

    pub fn summary(&self) -> QueueSummary {
        let total = self.trajectory.llm_steps().count();
        QueueSummary {
            trajectory_id: self.trajectory.trajectory_id.clone(),
            question_id: self.trajectory.question_id.clone(),
            question: self.trajectory.question.clone(),
            iteration: self.iteration,
            annotated: total - self.pending_steps().len(),
            total,
            status: self.status,
        }
    }

    /// Converted labels; `None` while any LLM step lacks feedback.
    pub fn labels(&self) -> Option<Vec<LabeledStep>> {
        let t = &self.trajectory;
        t.llm_steps()
            .map(|(k, s)| Some(labeled(t, k, s, self.feedback.get(&k)?)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueSummary {
    pub trajectory_id: String,
    pub question_id: String,
    pub question: String,
    pub iteration: usize,
    pub annotated: usize,
    pub total: usize,
    pub status: QueueStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub trajectory_id: String,
    pub step: usize,
    pub previous: Feedback,
    pub replaced_by: Feedback,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
enum Event {
    Enqueue {
        iteration: usize,
        trajectory: Box<Trajectory>,
    },
    Feedback {
        trajectory_id: String,
        step: usize,
        feedback: Feedback,
    },
    Finalize {
        trajectory_id: String,
    },
    Skip {
        trajectory_id: String,
    },
}

#[derive(Default)]
struct StoreState {
    entries: BTreeMap<String, QueueEntry>,
    audit: Vec<AuditEntry>,
    log: Option<File>,
    /// Bytes of the log already applied.
    offset: u64,
}

impl StoreState {
    fn apply(&mut self, ev: Event) {
        match ev {
            Event::Enqueue {
                iteration,
                trajectory,
            } => {
                self.entries.insert(
                    trajectory.trajectory_id.clone(),
                    QueueEntry {
                        iteration,
                        trajectory: *trajectory,
                        feedback: BTreeMap::new(),
                        status: QueueStatus::Pending,
                    },
                );
            }
            Event::Feedback {
                trajectory_id,
                step,
                feedback,
            } => {
                if let Some(e) = self.entries.get_mut(&trajectory_id) {
                    if let Some(previous) = e.feedback.insert(step, feedback.clone()) {
                        self.audit.push(AuditEntry {
                            trajectory_id,
                            step,
                            previous,
                            replaced_by: feedback,
                        });
                    }
                }
            }
            Event::Finalize { trajectory_id } => {
                if let Some(e) = self.entries.get_mut(&trajectory_id) {
                    e.status = QueueStatus::Finalized;
                }
            }
            Event::Skip { trajectory_id } => {
                if let Some(e) = self.entries.get_mut(&trajectory_id) {
                    e.status = QueueStatus::Skipped;
                }
            }
        }
    }

    /// Applies complete lines appended to the log since the last read,
    /// including those written by other processes.
    fn catch_up(&mut self) -> Result<(), StoreError> {
        let Some(log) = self.log.as_mut() else {
            return Ok(());
        };
        if log.metadata()?.len() == self.offset {
            return Ok(());
        }
        let mut tail = Vec::new();
        log.seek(SeekFrom::Start(self.offset))?;
        log.read_to_end(&mut tail)?;
        let complete = tail.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        for ev in jsonl::parse::<Event, _>(&tail[..complete], "queue.jsonl")? {
            self.apply(ev);
        }
        self.offset += complete as u64;
        Ok(())
    }

    /// Appends to the log and syncs before applying in memory. The log is
    /// held under an exclusive lock so concurrent writers never interleave.
    fn commit(&mut self, ev: Event) -> Result<(), StoreError> {
        if let Some(log) = self.log.as_ref() {
            log.lock()?;
            let written = self.catch_up().and_then(|()| {
                let log = self.log.as_mut().expect("log present");
                let mut line = serde_json::to_string(&ev).expect("serializable");
                line.push('\n');
                log.write_all(line.as_bytes())?;
                log.flush()?;
                log.sync_data()?;
                Ok(line.len() as u64)
            });
            let log = self.log.as_ref().expect("log present");
            log.unlock()?;
            self.offset += written?;
        }
        self.apply(ev);
        Ok(())
    }

    fn entry(&self, id: &str) -> Result<&QueueEntry, StoreError> {
        self.entries
            .get(id)
            .ok_or_else(|| StoreError::NotFound(id.to_string()))
    }
}

/// Queue of trajectories awaiting human feedback, backed by an append-only
/// event log and rebuilt from it on open.
pub struct FeedbackStore {
    path: Option<PathBuf>,
    state: Mutex<StoreState>,
}

impl FeedbackStore {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            state: Mutex::new(StoreState::default()),
        }
    }

    /// Opens (or creates) `dir/queue.jsonl` and replays it. Several
    /// processes may hold the same store open.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("queue.jsonl");
        let log = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)?;
        log.lock()?;
        let mut text = String::new();
        let read = (&log)
            .read_to_string(&mut text)
            .map_err(StoreError::from)
            .and_then(|_| {
                // A crash mid-append can leave one unterminated line; drop it.
                if !text.ends_with('\n') {
                    let keep = text.rfind('\n').map_or(0, |i| i + 1);
                    text.truncate(keep);
                    log.set_len(keep as u64)?;
                }
                Ok(())
            });
        log.unlock()?;
        read?;
        let mut state = StoreState::default();
        for ev in jsonl::parse::<Event, _>(text.as_bytes(), &path.display().to_string())? {
            state.apply(ev);
        }
        state.offset = text.len() as u64;
        state.log = Some(log);
        Ok(Self {
            path: Some(path),
            state: Mutex::new(state),
        })
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, StoreState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Locked state with other writers' events applied.
    fn fresh(&self) -> Result<std::sync::MutexGuard<'_, StoreState>, StoreError> {
        let mut st = self.lock();
        st.catch_up()?;
        Ok(st)
    }

    /// Adds (or replaces a still-pending) trajectory.
    pub fn enqueue(&self, trajectory: Trajectory, iteration: usize) -> Result<(), StoreError> {
        let mut st = self.fresh()?;
        if let Some(e) = st.entries.get(&trajectory.trajectory_id) {
            if e.status == QueueStatus::Finalized {
                return Err(StoreError::Finalized(trajectory.trajectory_id));
            }
        }
        st.commit(Event::Enqueue {
            iteration,
            trajectory: Box::new(trajectory),
        })
    }

    /// Records feedback for an LLM step. Re-submission overwrites and leaves
    /// an audit entry.
    pub fn submit(
        &self,
        trajectory_id: &str,
        step: usize,
        verdict: Verdict,
        refinement: Option<&str>,
    ) -> Result<Feedback, StoreError> {
        let mut st = self.fresh()?;
        let e = st.entry(trajectory_id)?;
        let record = e
            .trajectory
            .steps
            .get(step)
            .ok_or_else(|| StoreError::StepNotFound {
                id: trajectory_id.to_string(),
                step,
            })?;
        if !record.is_llm() {
            return Err(StoreError::ToolStep {
                id: trajectory_id.to_string(),
                step,
            });
        }
        if e.status != QueueStatus::Pending {
            return Err(StoreError::Finalized(trajectory_id.to_string()));
        }
        let feedback = Feedback::from_verdict(verdict, refinement)?;
        st.commit(Event::Feedback {
            trajectory_id: trajectory_id.to_string(),
            step,
            feedback: feedback.clone(),
        })?;
        Ok(feedback)
    }

    /// Releases a fully annotated trajectory to export.
    pub fn finalize(&self, trajectory_id: &str) -> Result<(), StoreError> {
        let mut st = self.fresh()?;
        let e = st.entry(trajectory_id)?;
        match e.status {
            QueueStatus::Finalized => return Ok(()),
            QueueStatus::Skipped => return Err(StoreError::Finalized(trajectory_id.to_string())),
            QueueStatus::Pending => {}
        }
        let pending = e.pending_steps();
        if !pending.is_empty() {
            return Err(StoreError::Pending {
                id: trajectory_id.to_string(),
                pending,
            });
        }
        st.commit(Event::Finalize {
            trajectory_id: trajectory_id.to_string(),
        })
    }

    /// Withholds a trajectory from export without annotating it.
    pub fn skip(&self, trajectory_id: &str) -> Result<(), StoreError> {
        let mut st = self.fresh()?;
        st.entry(trajectory_id)?;
        st.commit(Event::Skip {
            trajectory_id: trajectory_id.to_string(),
        })
    }

    pub fn get(&self, trajectory_id: &str) -> Result<QueueEntry, StoreError> {
        self.fresh()?.entry(trajectory_id).cloned()
    }

    /// Applies events other processes appended since the last read or write.
    /// The listing and export methods below see the state as of that point.
    pub fn refresh(&self) -> Result<(), StoreError> {
        self.fresh().map(drop)
    }

    pub fn list(&self, status: Option<QueueStatus>) -> Vec<QueueSummary> {
        self.lock()
            .entries
            .values()
            .filter(|e| status.is_none_or(|s| e.status == s))
            .map(QueueEntry::summary)
            .collect()
    }

    pub fn audit(&self) -> Vec<AuditEntry> {
        self.lock().audit.clone()
    }

    /// Labels of finalized trajectories, optionally restricted to one iteration,
    /// in trajectory-id then step order.
    pub fn export(&self, iteration: Option<usize>) -> Vec<LabeledStep> {
        self.lock()
            .entries
            .values()
            .filter(|e| e.status == QueueStatus::Finalized)
            .filter(|e| iteration.is_none_or(|i| e.iteration == i))
            .filter_map(QueueEntry::labels)
            .flatten()
            .collect()
    }
}
