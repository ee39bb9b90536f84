//! Exploration, feedback collection and export over adaptation iterations.
//!
//! Training is external: after each iteration's export an [`ExploitHook`]
//! runs and may hand back a new backend for the next iteration.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Agent, AgentConfig, Trajectory};
use crate::backend::LlmBackend;
use crate::feedback::{
    label_process, silver_outcome_feedback, FeedbackError, FeedbackStore, GoldStore, LabeledStep,
    QueueStatus, StoreError,
};
use crate::jsonl::{self, JsonlError};
use crate::kb::KnowledgeBase;
use crate::parallel;
use crate::prompt::PromptTemplateSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FeedbackMode {
    SilverProcess,
    SilverOutcome,
    Human,
}

impl std::str::FromStr for FeedbackMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "silver_process" => Ok(FeedbackMode::SilverProcess),
            "silver_outcome" => Ok(FeedbackMode::SilverOutcome),
            "human" => Ok(FeedbackMode::Human),
            other => Err(format!("unknown feedback mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    /// Questions explored per iteration.
    pub exploration_steps: usize,
    pub iterations: usize,
    pub feedback_mode: FeedbackMode,
    pub export_dir: PathBuf,
    /// Re-explore the first `exploration_steps` questions every iteration
    /// instead of advancing through the pool.
    pub same_questions: bool,
}

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("exploration_steps and iterations must both be at least 1")]
    InvalidConfig,
    #[error("no questions to explore")]
    NoQuestions,
    #[error("human feedback mode needs a feedback store")]
    NoStore,
    #[error("labeling trajectory {trajectory_id:?}: {source}")]
    Label {
        trajectory_id: String,
        #[source]
        source: FeedbackError,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Export(#[from] JsonlError),
    #[error("exploit hook failed at iteration {iteration}: {message}")]
    Hook { iteration: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub question_id: String,
    pub question: String,
}

/// Runs up to `limit` questions; returns the trajectories and how many the
/// pool fell short of `limit`.
pub fn explore(
    agent: &Agent<'_>,
    questions: &[Question],
    limit: usize,
) -> (Vec<Trajectory>, usize) {
    let take = limit.min(questions.len());
    let runs = parallel::map(&questions[..take], |q| {
        agent.run(&q.question_id, &q.question)
    });
    (runs, limit - take)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Collected {
    pub labeled: Vec<LabeledStep>,
    /// Trajectories excluded because the run failed.
    pub failed: Vec<String>,
    /// Trajectories excluded for lack of a gold annotation (silver modes).
    pub missing_gold: Vec<String>,
    /// Trajectories still awaiting human feedback.
    pub pending: Vec<String>,
}

/// Labels a batch. Human mode enqueues ok trajectories not yet queued and
/// returns labels only for this iteration's finalized trajectories.
pub fn collect(
    batch: &[Trajectory],
    mode: FeedbackMode,
    gold: &GoldStore,
    kb: &KnowledgeBase,
    agent_config: &AgentConfig,
    store: Option<&FeedbackStore>,
    iteration: usize,
) -> Result<Collected, AdaptError> {
    let retriever = crate::kb::Retriever::lexical(agent_config.max_docs, agent_config.top_psg);
    let mut out = Collected::default();
    for t in batch {
        if !t.is_ok() {
            out.failed.push(t.trajectory_id.clone());
            continue;
        }
        match mode {
            FeedbackMode::SilverProcess | FeedbackMode::SilverOutcome => {
                let Some(g) = gold.get(&t.question_id) else {
                    out.missing_gold.push(t.trajectory_id.clone());
                    continue;
                };
                let labels = if mode == FeedbackMode::SilverProcess {
                    label_process(t, g, kb, &retriever).map_err(|source| AdaptError::Label {
                        trajectory_id: t.trajectory_id.clone(),
                        source,
                    })?
                } else {
                    silver_outcome_feedback(t, g)
                };
                out.labeled.extend(labels);
            }
            FeedbackMode::Human => {
                let store = store.ok_or(AdaptError::NoStore)?;
                let entry = match store.get(&t.trajectory_id) {
                    Ok(e) => e,
                    Err(StoreError::NotFound(_)) => {
                        store.enqueue(t.clone(), iteration)?;
                        store.get(&t.trajectory_id)?
                    }
                    Err(e) => return Err(e.into()),
                };
                match (entry.status, entry.labels()) {
                    (QueueStatus::Finalized, Some(labels)) => out.labeled.extend(labels),
                    (QueueStatus::Skipped, _) => {}
                    _ => out.pending.push(t.trajectory_id.clone()),
                }
            }
        }
    }
    Ok(out)
}

/// External exploitation step.
pub trait ExploitHook {
    /// Called after iteration `iteration` (1-based) wrote `export`. A returned
    /// backend replaces the current one.
    fn exploit(
        &mut self,
        export: &Path,
        iteration: usize,
    ) -> Result<Option<Arc<dyn LlmBackend>>, String>;
}

pub struct NoopHook;

impl ExploitHook for NoopHook {
    fn exploit(&mut self, _: &Path, _: usize) -> Result<Option<Arc<dyn LlmBackend>>, String> {
        Ok(None)
    }
}

/// Runs `program args... <export path> <iteration>` and requires exit 0.
pub struct CommandHook {
    pub program: String,
    pub args: Vec<String>,
}

impl ExploitHook for CommandHook {
    fn exploit(
        &mut self,
        export: &Path,
        iteration: usize,
    ) -> Result<Option<Arc<dyn LlmBackend>>, String> {
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(export)
            .arg(iteration.to_string())
            .status()
            .map_err(|e| format!("spawning {}: {e}", self.program))?;
        if status.success() {
            Ok(None)
        } else {
            Err(format!("{} exited with {status}", self.program))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub question_ids: Vec<String>,
    pub shortfall: usize,
    pub trajectories: usize,
    pub failed: usize,
    pub missing_gold: usize,
    pub pending: usize,
    pub labeled: usize,
    pub export: PathBuf,
    pub trajectory_file: PathBuf,
}

pub fn export_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("adapt-iter{iteration}.jsonl"))
}

pub fn trajectory_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("adapt-iter{iteration}.trajectories.jsonl"))
}

/// Everything an adaptation run needs besides the backend and hook.
pub struct Adaptation<'a> {
    pub config: AdaptationConfig,
    pub agent_config: AgentConfig,
    pub kb: &'a KnowledgeBase,
    pub templates: &'a PromptTemplateSet,
    pub gold: &'a GoldStore,
    pub store: Option<&'a FeedbackStore>,
}

impl Adaptation<'_> {
    fn batch<'q>(&self, questions: &'q [Question], iteration: usize) -> &'q [Question] {
        let t = self.config.exploration_steps;
        if self.config.same_questions {
            return questions;
        }
        let start = ((iteration - 1) * t).min(questions.len());
        &questions[start..]
    }

    /// Explore, collect and export for each iteration. Trajectory ids carry
    /// an `@iter{i}` tag so iterations never collide.
    pub fn run(
        &self,
        questions: &[Question],
        backend: Arc<dyn LlmBackend>,
        hook: &mut dyn ExploitHook,
    ) -> Result<Vec<IterationReport>, AdaptError> {
        let cfg = &self.config;
        if cfg.exploration_steps == 0 || cfg.iterations == 0 {
            return Err(AdaptError::InvalidConfig);
        }
        if questions.is_empty() {
            return Err(AdaptError::NoQuestions);
        }
        if cfg.feedback_mode == FeedbackMode::Human && self.store.is_none() {
            return Err(AdaptError::NoStore);
        }
        let mut backend = backend;
        let mut reports = Vec::with_capacity(cfg.iterations);
        for iteration in 1..=cfg.iterations {
            let agent = Agent::new(self.kb, backend.as_ref(), self.templates, self.agent_config);
            let pool = self.batch(questions, iteration);
            let (mut trajectories, shortfall) = explore(&agent, pool, cfg.exploration_steps);
            for t in &mut trajectories {
                t.trajectory_id = format!("{}@iter{iteration}", t.question_id);
            }
            let collected = collect(
                &trajectories,
                cfg.feedback_mode,
                self.gold,
                self.kb,
                &self.agent_config,
                self.store,
                iteration,
            )?;
            let export = export_path(&cfg.export_dir, iteration);
            let trajectory_file = trajectory_path(&cfg.export_dir, iteration);
            jsonl::write(&export, &collected.labeled)?;
            jsonl::write(&trajectory_file, &trajectories)?;
            reports.push(IterationReport {
                iteration,
                question_ids: trajectories.iter().map(|t| t.question_id.clone()).collect(),
                shortfall,
                trajectories: trajectories.len(),
                failed: collected.failed.len(),
                missing_gold: collected.missing_gold.len(),
                pending: collected.pending.len(),
                labeled: collected.labeled.len(),
                export: export.clone(),
                trajectory_file,
            });
            if let Some(next) = hook
                .exploit(&export, iteration)
                .map_err(|message| AdaptError::Hook { iteration, message })?
            {
                backend = next;
            }
        }
        Ok(reports)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names() {
        assert_eq!(
            "silver-process".parse::<FeedbackMode>().unwrap(),
            FeedbackMode::SilverProcess
        );
        assert_eq!(
            "HUMAN".parse::<FeedbackMode>().unwrap(),
            FeedbackMode::Human
        );
        assert!("gold".parse::<FeedbackMode>().is_err());
        assert_eq!(
            serde_json::to_string(&FeedbackMode::SilverOutcome).unwrap(),
            "\"SILVER_OUTCOME\""
        );
    }

    #[test]
    fn export_names() {
        assert_eq!(
            export_path(Path::new("out"), 3),
            PathBuf::from("out/adapt-iter3.jsonl")
        );
    }

    #[test]
    fn failing_hook_reports_iteration() {
        let mut hook = CommandHook {
            program: "false".into(),
            args: vec![],
        };
        assert!(hook.exploit(Path::new("x"), 1).is_err());
        let mut ok = CommandHook {
            program: "true".into(),
            args: vec![],
        };
        assert!(ok.exploit(Path::new("x"), 1).unwrap().is_none());
    }
}
