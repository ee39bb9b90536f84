//! The agent loop: drives the state machine from the decomposition state to
//! the terminal state, calling retrieval tools and LLM modules and keeping a
//! step-by-step trajectory.

use serde::{Deserialize, Serialize};

use crate::backend::LlmBackend;
use crate::fsm::{
    parse_output, transition, AgentContext, BranchToken, Module, ModuleOutput, Payload, StateId,
};
use crate::kb::{KnowledgeBase, PassageRef, Retriever, DEFAULT_MAX_DOCS, DEFAULT_TOP_PSG};
use crate::prompt::{build_prompt, PromptTemplateSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub subquery_cap: usize,
    pub max_docs: usize,
    pub top_psg: usize,
    /// Re-invocations of an LLM call whose output fails to parse.
    pub parse_retries: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            subquery_cap: 2,
            max_docs: DEFAULT_MAX_DOCS,
            top_psg: DEFAULT_TOP_PSG,
            parse_retries: 1,
        }
    }
}

impl AgentConfig {
    /// Upper bound on step records of any run.
    pub fn step_bound(&self) -> usize {
        2 + self.subquery_cap * (2 + 4 * self.max_docs)
    }

    /// Upper bound on LLM calls of any run, retries excluded.
    pub fn llm_call_bound(&self) -> usize {
        1 + self.subquery_cap * (1 + 2 * self.max_docs) + 1
    }
}

/// Context visible to the module at a step, by passage identity.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepContext {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sub_query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snippet: Option<PassageRef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub passages: Vec<PassageRef>,
    /// Evidence collected before this step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub evidence: Vec<PassageRef>,
}

impl StepContext {
    fn capture(ctx: &AgentContext) -> Self {
        Self {
            sub_query: ctx.sub_query.clone(),
            snippet: ctx.snippet.as_ref().map(|p| p.reference()),
            passages: ctx
                .passages
                .iter()
                .flatten()
                .map(|p| p.reference())
                .collect(),
            evidence: ctx.evidence.iter().map(|p| p.reference()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub state: StateId,
    pub module: Module,
    /// Exact text sent to the backend for LLM steps; the query for tool steps.
    pub input_render: String,
    #[serde(flatten)]
    pub output: ModuleOutput,
    pub context: StepContext,
    #[serde(default = "one")]
    pub attempts: usize,
}

fn one() -> usize {
    1
}

impl StepRecord {
    pub fn is_llm(&self) -> bool {
        self.module.is_llm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    #[default]
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    /// Index the failing step would have had.
    pub step: usize,
    pub state: StateId,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub steps: usize,
    pub llm_steps: usize,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub trajectory_id: String,
    pub question_id: String,
    pub question: String,
    pub subquery_cap: usize,
    pub steps: Vec<StepRecord>,
    pub final_answer: String,
    pub evidence: Vec<PassageRef>,
    pub stats: TrajectoryStats,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<Failure>,
}

impl Trajectory {
    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok
    }

    pub fn llm_steps(&self) -> impl Iterator<Item = (usize, &StepRecord)> {
        self.steps.iter().enumerate().filter(|(_, s)| s.is_llm())
    }
}

/// Counts tokens for step/token accounting.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Whitespace-separated words.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokens;

impl TokenCounter for WhitespaceTokens {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

/// Steps count every record; tokens sum prompt and output of LLM records.
pub fn trajectory_stats(t: &Trajectory, tokens: &dyn TokenCounter) -> TrajectoryStats {
    let mut stats = TrajectoryStats {
        steps: t.steps.len(),
        ..Default::default()
    };
    for s in t.steps.iter().filter(|s| s.is_llm()) {
        stats.llm_steps += 1;
        stats.tokens += tokens.count(&s.input_render) + tokens.count(&s.output.raw);
    }
    stats
}

/// One agent bound to a knowledge base, backend and prompt set.
pub struct Agent<'a> {
    pub kb: &'a KnowledgeBase,
    pub backend: &'a dyn LlmBackend,
    pub templates: &'a PromptTemplateSet,
    pub retriever: Retriever,
    pub config: AgentConfig,
}

impl<'a> Agent<'a> {
    pub fn new(
        kb: &'a KnowledgeBase,
        backend: &'a dyn LlmBackend,
        templates: &'a PromptTemplateSet,
        config: AgentConfig,
    ) -> Self {
        Self {
            kb,
            backend,
            templates,
            retriever: Retriever::lexical(config.max_docs, config.top_psg),
            config,
        }
    }

    pub fn with_retriever(mut self, retriever: Retriever) -> Self {
        self.retriever = retriever;
        self
    }

    /// Runs one question to completion. Failures are reported in the
    /// trajectory status rather than as an error.
    pub fn run(&self, question_id: &str, question: &str) -> Trajectory {
        let mut ctx = AgentContext::new(question, self.config.subquery_cap.max(1));
        let mut steps: Vec<StepRecord> = Vec::new();
        let mut state = StateId::S0Decompose;
        let mut failure = None;
        let bound = self.config.step_bound();

        while state != StateId::Final {
            if steps.len() >= bound {
                failure = Some(Failure {
                    step: steps.len(),
                    state,
                    reason: format!("step bound {bound} exceeded"),
                });
                break;
            }
            let module = state.module().expect("non-terminal state has a module");
            let context = StepContext::capture(&ctx);
            let step = match self.execute(module, &mut ctx) {
                Ok((input_render, output, attempts)) => StepRecord {
                    state,
                    module,
                    input_render,
                    output,
                    context,
                    attempts,
                },
                Err(reason) => {
                    failure = Some(Failure {
                        step: steps.len(),
                        state,
                        reason,
                    });
                    break;
                }
            };
            match transition(state, &step.output, &mut ctx) {
                Ok(next) => {
                    steps.push(step);
                    state = next;
                }
                Err(e) => {
                    failure = Some(Failure {
                        step: steps.len(),
                        state,
                        reason: e.to_string(),
                    });
                    break;
                }
            }
        }

        let final_answer = match steps.last().map(|s| &s.output.payload) {
            Some(Payload::FinalAnswer { final_answer }) if failure.is_none() => {
                final_answer.clone()
            }
            _ => String::new(),
        };
        let mut t = Trajectory {
            trajectory_id: question_id.to_string(),
            question_id: question_id.to_string(),
            question: question.to_string(),
            subquery_cap: ctx.subquery_cap,
            steps,
            final_answer,
            evidence: ctx.evidence.iter().map(|p| p.reference()).collect(),
            stats: TrajectoryStats::default(),
            status: if failure.is_some() {
                RunStatus::Failed
            } else {
                RunStatus::Ok
            },
            failure,
        };
        t.stats = trajectory_stats(&t, &WhitespaceTokens);
        t
    }

    fn execute(
        &self,
        module: Module,
        ctx: &mut AgentContext,
    ) -> Result<(String, ModuleOutput, usize), String> {
        let missing = |what: &str| format!("{module} reached without {what}");
        match module {
            Module::SearchDoc => {
                let q = ctx
                    .sub_query
                    .clone()
                    .ok_or_else(|| missing("a sub-query"))?;
                let (session, top) = self.retriever.search_doc(self.kb, &q);
                ctx.session = Some(session);
                Ok((q, ModuleOutput::snippet(top), 1))
            }
            Module::NextDoc => {
                let q = ctx.sub_query.clone().unwrap_or_default();
                let session = ctx
                    .session
                    .as_mut()
                    .ok_or_else(|| missing("a document session"))?;
                let out = match session.next_doc() {
                    Some(p) => ModuleOutput::snippet(p),
                    None => ModuleOutput::exhausted(),
                };
                Ok((q, out, 1))
            }
            Module::SearchPsg => {
                let q = ctx
                    .sub_query
                    .clone()
                    .ok_or_else(|| missing("a sub-query"))?;
                let d = ctx.snippet.as_ref().ok_or_else(|| missing("a snippet"))?;
                let ps = self
                    .retriever
                    .search_psg(self.kb, &q, &d.doc_id)
                    .map_err(|e| e.to_string())?;
                Ok((q, ModuleOutput::passages(ps), 1))
            }
            llm => {
                let prompt = build_prompt(llm, ctx, self.templates).map_err(|e| e.to_string())?;
                let presented = ctx.passages.as_deref();
                let mut attempts = 0;
                loop {
                    attempts += 1;
                    let raw = self
                        .backend
                        .complete(llm, &prompt)
                        .map_err(|e| format!("backend error: {e}"))?;
                    match parse_output(llm, &raw, presented) {
                        Ok(out) => return Ok((prompt, out, attempts)),
                        Err(e) if attempts > self.config.parse_retries => {
                            return Err(format!("parse error after {attempts} attempts: {e}"))
                        }
                        Err(_) => {}
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("step {step}: {message}")]
pub struct ValidationError {
    pub step: usize,
    pub message: String,
}

/// Replays the recorded outputs through the transition function and checks
/// that every record sits at the state the previous output led to. With
/// `templates`, also checks that every LLM input equals the prompt rebuilt
/// from the replayed context. Completed runs must end in the terminal state
/// with exactly one Complete record, last among LLM records.
pub fn validate_trajectory(
    t: &Trajectory,
    templates: Option<&PromptTemplateSet>,
) -> Result<(), ValidationError> {
    let err = |step: usize, message: String| ValidationError { step, message };
    let mut ctx = AgentContext::new(t.question.clone(), t.subquery_cap.max(1));
    let mut state = StateId::S0Decompose;
    for (i, s) in t.steps.iter().enumerate() {
        if s.state != state {
            return Err(err(
                i,
                format!("recorded {} but expected {}", s.state, state),
            ));
        }
        if Some(s.module) != state.module() {
            return Err(err(
                i,
                format!("module {} does not run at {}", s.module, state),
            ));
        }
        if s.context != StepContext::capture(&ctx) {
            return Err(err(
                i,
                "recorded context differs from replayed context".into(),
            ));
        }
        if let Some(tpl) = templates.filter(|_| s.is_llm()) {
            let rebuilt = build_prompt(s.module, &ctx, tpl).map_err(|e| err(i, e.to_string()))?;
            if rebuilt != s.input_render {
                return Err(err(
                    i,
                    "input_render differs from the rebuilt prompt".into(),
                ));
            }
        }
        if s.module == Module::SearchDoc || s.module == Module::NextDoc {
            // NextDoc depends on the session only through the recorded snippet.
            ctx.session = None;
        }
        state = transition(state, &s.output, &mut ctx).map_err(|e| err(i, e.to_string()))?;
    }
    if t.status == RunStatus::Failed {
        return Ok(());
    }
    if state != StateId::Final {
        return Err(err(t.steps.len(), format!("ok run ends at {state}")));
    }
    let llm: Vec<_> = t.steps.iter().filter(|s| s.is_llm()).collect();
    let completes = llm.iter().filter(|s| s.module == Module::Complete).count();
    if completes != 1 || llm.last().map(|s| s.module) != Some(Module::Complete) {
        return Err(err(
            t.steps.len(),
            "Complete must occur once, as the last LLM step".into(),
        ));
    }
    let evidence: Vec<_> = ctx.evidence.iter().map(|p| p.reference()).collect();
    if evidence != t.evidence {
        return Err(err(
            t.steps.len(),
            "collected evidence differs from replay".into(),
        ));
    }
    if t.steps
        .iter()
        .any(|s| s.output.token != BranchToken::None && !s.is_llm())
    {
        return Err(err(0, "tool step carries a branch token".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendError, FnBackend};
    use crate::kb::DocRecord;
    use crate::prompt::PromptMode;

    fn kb() -> KnowledgeBase {
        KnowledgeBase::from_records(vec![
            DocRecord {
                doc_id: "A".into(),
                title: "Alpha".into(),
                passages: vec!["alpha one".into(), "alpha two".into()],
            },
            DocRecord {
                doc_id: "B".into(),
                title: "Beta".into(),
                passages: vec!["beta one".into()],
            },
        ])
        .unwrap()
    }

    #[test]
    fn immediate_finish_is_the_shortest_path() {
        let kb = kb();
        let tpl = PromptTemplateSet::hotpotqa(PromptMode::ZeroShot);
        let backend = FnBackend(|m: Module, _: &str| {
            Ok(match m {
                Module::Decompose => "[Finish]".to_string(),
                _ => "yes".to_string(),
            })
        });
        let agent = Agent::new(&kb, &backend, &tpl, AgentConfig::default());
        let t = agent.run("q1", "Is alpha beta?");
        assert!(t.is_ok());
        let modules: Vec<_> = t.steps.iter().map(|s| s.module).collect();
        assert_eq!(modules, vec![Module::Decompose, Module::Complete]);
        assert!(t.evidence.is_empty());
        assert_eq!(t.final_answer, "yes");
        assert_eq!(trajectory_stats(&t, &WhitespaceTokens).steps, 2);
        validate_trajectory(&t, Some(&tpl)).unwrap();
    }

    #[test]
    fn unparseable_output_is_retried_once_then_fails() {
        let kb = kb();
        let tpl = PromptTemplateSet::hotpotqa(PromptMode::ZeroShot);
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let backend = FnBackend(|_: Module, _: &str| {
            calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Ok("garbage".to_string())
        });
        let agent = Agent::new(&kb, &backend, &tpl, AgentConfig::default());
        let t = agent.run("q1", "Q");
        assert_eq!(t.status, RunStatus::Failed);
        assert_eq!(calls.load(std::sync::atomic::Ordering::SeqCst), 2);
        let f = t.failure.as_ref().unwrap();
        assert_eq!(f.step, 0);
        assert_eq!(f.state, StateId::S0Decompose);
        validate_trajectory(&t, None).unwrap();
    }

    #[test]
    fn backend_error_names_the_step() {
        let kb = kb();
        let tpl = PromptTemplateSet::hotpotqa(PromptMode::ZeroShot);
        let backend = FnBackend(|m: Module, _: &str| match m {
            Module::Decompose => Ok("[Next] alpha".to_string()),
            _ => Err(BackendError::Transport("refused".into())),
        });
        let t = Agent::new(&kb, &backend, &tpl, AgentConfig::default()).run("q", "Q");
        assert_eq!(t.status, RunStatus::Failed);
        let f = t.failure.unwrap();
        assert_eq!(f.step, 2);
        assert_eq!(f.state, StateId::S2RelevanceJudgment);
        assert!(f.reason.contains("refused"));
    }

    #[test]
    fn all_irrelevant_exhausts_and_records_no_answer() {
        let kb = kb();
        let tpl = PromptTemplateSet::hotpotqa(PromptMode::ZeroShot);
        let backend = FnBackend(|m: Module, _: &str| {
            Ok(match m {
                Module::Decompose => "[Next] alpha".to_string(),
                Module::Judge => "[Irrelevant]".to_string(),
                _ => "unknown".to_string(),
            })
        });
        let cfg = AgentConfig {
            subquery_cap: 1,
            ..Default::default()
        };
        let t = Agent::new(&kb, &backend, &tpl, cfg).run("q", "Q");
        assert!(t.is_ok(), "{:?}", t.failure);
        let modules: Vec<_> = t.steps.iter().map(|s| s.module).collect();
        assert_eq!(
            modules,
            vec![
                Module::Decompose,
                Module::SearchDoc,
                Module::Judge,
                Module::NextDoc,
                Module::Judge,
                Module::NextDoc,
                Module::Complete
            ]
        );
        // best snippet for "alpha" is A#0, appended on exhaustion
        assert_eq!(t.evidence, vec![PassageRef::new("A", 0)]);
        let complete = t.steps.last().unwrap();
        assert!(complete
            .input_render
            .contains("[1] (title: Alpha) alpha one"));
        validate_trajectory(&t, Some(&tpl)).unwrap();
        assert!(t.steps.len() <= cfg.step_bound());
    }

    #[test]
    fn trajectory_json_round_trips_and_validates() {
        let kb = kb();
        let tpl = PromptTemplateSet::hotpotqa(PromptMode::FewShot);
        let backend = FnBackend(|m: Module, _: &str| {
            Ok(match m {
                Module::Decompose => "[Next] beta".to_string(),
                Module::Judge => "[Relevant]".to_string(),
                Module::Answer => "[Answerable] Answer: one; Relevant Passage ID: [1]".to_string(),
                Module::Complete => "one".to_string(),
                _ => unreachable!(),
            })
        });
        let t = Agent::new(&kb, &backend, &tpl, AgentConfig::default()).run("q", "Q");
        assert!(t.is_ok());
        let json = serde_json::to_string(&t).unwrap();
        let back: Trajectory = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
        validate_trajectory(&back, Some(&tpl)).unwrap();

        let mut broken = back.clone();
        broken.steps[2].state = StateId::S3NextDoc;
        assert!(validate_trajectory(&broken, None).is_err());
        let mut wrong_prompt = back;
        wrong_prompt.steps[0].input_render.push(' ');
        assert!(validate_trajectory(&wrong_prompt, Some(&tpl)).is_err());
    }
}
