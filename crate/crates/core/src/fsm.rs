//! States, branch tokens, module output parsing and the transition function.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{DocSession, Passage, PassageRef};

/// Sentinel answer stored in the history when a sub-query runs out of documents.
pub const NO_ANSWER: &str = "No Answer";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StateId {
    S0Decompose,
    S1DocRetrieval,
    S2RelevanceJudgment,
    S3NextDoc,
    S4PassageRetrieval,
    S5AnswerExtraction,
    S6TaskCompletion,
    Final,
}

impl StateId {
    pub const ALL: [StateId; 8] = [
        StateId::S0Decompose,
        StateId::S1DocRetrieval,
        StateId::S2RelevanceJudgment,
        StateId::S3NextDoc,
        StateId::S4PassageRetrieval,
        StateId::S5AnswerExtraction,
        StateId::S6TaskCompletion,
        StateId::Final,
    ];

    /// Module triggered at this state; `None` for the terminal state.
    pub fn module(self) -> Option<Module> {
        Some(match self {
            StateId::S0Decompose => Module::Decompose,
            StateId::S1DocRetrieval => Module::SearchDoc,
            StateId::S2RelevanceJudgment => Module::Judge,
            StateId::S3NextDoc => Module::NextDoc,
            StateId::S4PassageRetrieval => Module::SearchPsg,
            StateId::S5AnswerExtraction => Module::Answer,
            StateId::S6TaskCompletion => Module::Complete,
            StateId::Final => return None,
        })
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StateId::S0Decompose => "S0_DECOMPOSE",
            StateId::S1DocRetrieval => "S1_DOC_RETRIEVAL",
            StateId::S2RelevanceJudgment => "S2_RELEVANCE_JUDGMENT",
            StateId::S3NextDoc => "S3_NEXT_DOC",
            StateId::S4PassageRetrieval => "S4_PASSAGE_RETRIEVAL",
            StateId::S5AnswerExtraction => "S5_ANSWER_EXTRACTION",
            StateId::S6TaskCompletion => "S6_TASK_COMPLETION",
            StateId::Final => "FINAL",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Module {
    Decompose,
    SearchDoc,
    Judge,
    NextDoc,
    SearchPsg,
    Answer,
    Complete,
}

impl Module {
    pub const LLM: [Module; 4] = [
        Module::Decompose,
        Module::Judge,
        Module::Answer,
        Module::Complete,
    ];

    pub fn is_llm(self) -> bool {
        matches!(
            self,
            Module::Decompose | Module::Judge | Module::Answer | Module::Complete
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Module::Decompose => "Decompose",
            Module::SearchDoc => "SearchDoc",
            Module::Judge => "Judge",
            Module::NextDoc => "NextDoc",
            Module::SearchPsg => "SearchPsg",
            Module::Answer => "Answer",
            Module::Complete => "Complete",
        }
    }

    pub fn parse(name: &str) -> Option<Module> {
        [
            Module::Decompose,
            Module::SearchDoc,
            Module::Judge,
            Module::NextDoc,
            Module::SearchPsg,
            Module::Answer,
            Module::Complete,
        ]
        .into_iter()
        .find(|m| m.name().eq_ignore_ascii_case(name))
    }

    /// Branch tokens an LLM module may lead with.
    pub fn tokens(self) -> &'static [BranchToken] {
        match self {
            Module::Decompose => &[BranchToken::Next, BranchToken::Finish],
            Module::Judge => &[BranchToken::Relevant, BranchToken::Irrelevant],
            Module::Answer => &[BranchToken::Answerable, BranchToken::Unanswerable],
            _ => &[],
        }
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BranchToken {
    Next,
    Finish,
    Relevant,
    Irrelevant,
    Answerable,
    Unanswerable,
    None,
}

impl BranchToken {
    pub const BRANCHING: [BranchToken; 6] = [
        BranchToken::Next,
        BranchToken::Finish,
        BranchToken::Relevant,
        BranchToken::Irrelevant,
        BranchToken::Answerable,
        BranchToken::Unanswerable,
    ];

    /// Exact bracket form; empty for `None`.
    pub fn tag(self) -> &'static str {
        match self {
            BranchToken::Next => "[Next]",
            BranchToken::Finish => "[Finish]",
            BranchToken::Relevant => "[Relevant]",
            BranchToken::Irrelevant => "[Irrelevant]",
            BranchToken::Answerable => "[Answerable]",
            BranchToken::Unanswerable => "[Unanswerable]",
            BranchToken::None => "",
        }
    }

    /// Case-sensitive match of a leading tag.
    pub fn leading(text: &str) -> Option<BranchToken> {
        Self::BRANCHING
            .into_iter()
            .find(|t| text.starts_with(t.tag()))
    }

    /// `[Relevant]` ↔ `[Irrelevant]`; other tokens have no opposite.
    pub fn opposite(self) -> Option<BranchToken> {
        match self {
            BranchToken::Relevant => Some(BranchToken::Irrelevant),
            BranchToken::Irrelevant => Some(BranchToken::Relevant),
            _ => None,
        }
    }
}

impl fmt::Display for BranchToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BranchToken::None => f.write_str("NONE"),
            t => f.write_str(t.tag()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Empty,
    SubQuery {
        sub_query: String,
    },
    Answer {
        answer: String,
        /// 1-based position in the presented passage list.
        evidence_id: usize,
        evidence: PassageRef,
    },
    FinalAnswer {
        final_answer: String,
    },
    Snippet {
        snippet: Passage,
    },
    Passages {
        passages: Vec<Passage>,
    },
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleOutput {
    #[serde(rename = "raw_output")]
    pub raw: String,
    pub token: BranchToken,
    pub payload: Payload,
}

impl ModuleOutput {
    pub fn snippet(p: Passage) -> Self {
        Self {
            raw: crate::prompt::render_snippet(&p),
            token: BranchToken::None,
            payload: Payload::Snippet { snippet: p },
        }
    }

    pub fn exhausted() -> Self {
        Self {
            raw: "None".into(),
            token: BranchToken::None,
            payload: Payload::Exhausted,
        }
    }

    pub fn passages(ps: Vec<Passage>) -> Self {
        Self {
            raw: crate::prompt::render_passages(&ps),
            token: BranchToken::None,
            payload: Payload::Passages { passages: ps },
        }
    }

    pub fn sub_query(&self) -> Option<&str> {
        match &self.payload {
            Payload::SubQuery { sub_query } => Some(sub_query),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("{module} output is empty")]
    Empty { module: Module },
    #[error("{module} output has no recognized branch token: {raw:?}")]
    MissingToken { module: Module, raw: String },
    #[error("{module} output leads with {token}, which that module cannot emit")]
    WrongToken { module: Module, token: BranchToken },
    #[error("[Next] without a sub-query")]
    EmptySubQuery,
    #[error(
        "[Answerable] output is not of the form \"Answer: <a>; Relevant Passage ID: [<k>]\": {0:?}"
    )]
    MalformedAnswer(String),
    #[error("cited passage id [{cited}] is outside 1..={available}")]
    EvidenceOutOfRange { cited: usize, available: usize },
    #[error("{0} is a tool module and has no text output to parse")]
    NotLlm(Module),
}

/// Parses raw LLM text for `module`. Answer outputs resolve the cited
/// passage id against `presented`.
pub fn parse_output(
    module: Module,
    raw: &str,
    presented: Option<&[Passage]>,
) -> Result<ModuleOutput, ParseError> {
    let text = raw.trim();
    if text.is_empty() {
        return Err(ParseError::Empty { module });
    }
    if module == Module::Complete {
        return Ok(ModuleOutput {
            raw: raw.to_string(),
            token: BranchToken::None,
            payload: Payload::FinalAnswer {
                final_answer: text.to_string(),
            },
        });
    }
    if !module.is_llm() {
        return Err(ParseError::NotLlm(module));
    }
    let token = BranchToken::leading(text).ok_or_else(|| ParseError::MissingToken {
        module,
        raw: raw.to_string(),
    })?;
    if !module.tokens().contains(&token) {
        return Err(ParseError::WrongToken { module, token });
    }
    let rest = text[token.tag().len()..].trim();
    let payload = match token {
        BranchToken::Next => {
            if rest.is_empty() {
                return Err(ParseError::EmptySubQuery);
            }
            Payload::SubQuery {
                sub_query: rest.to_string(),
            }
        }
        BranchToken::Answerable => {
            let (answer, k) = parse_answer_body(rest)
                .ok_or_else(|| ParseError::MalformedAnswer(raw.to_string()))?;
            let available = presented.map_or(0, <[Passage]>::len);
            if k == 0 || k > available {
                return Err(ParseError::EvidenceOutOfRange {
                    cited: k,
                    available,
                });
            }
            let evidence = presented.expect("checked above")[k - 1].reference();
            Payload::Answer {
                answer,
                evidence_id: k,
                evidence,
            }
        }
        _ => Payload::Empty,
    };
    Ok(ModuleOutput {
        raw: raw.to_string(),
        token,
        payload,
    })
}

fn parse_answer_body(rest: &str) -> Option<(String, usize)> {
    let body = rest.strip_prefix("Answer:")?;
    let (answer, tail) = body.rsplit_once(';')?;
    let tail = tail.trim().strip_prefix("Relevant Passage ID:")?.trim();
    let k = tail
        .strip_prefix('[')?
        .strip_suffix(']')?
        .trim()
        .parse()
        .ok()?;
    let answer = answer.trim();
    if answer.is_empty() {
        return None;
    }
    Some((answer.to_string(), k))
}

/// The live variables of one agent run.
#[derive(Debug, Clone, Default)]
pub struct AgentContext {
    /// Main question.
    pub question: String,
    /// Solved sub-queries and their answers.
    pub history: Vec<(String, String)>,
    /// Evidence collected so far.
    pub evidence: Vec<Passage>,
    /// Current sub-query.
    pub sub_query: Option<String>,
    /// Snippets seen for the current sub-query.
    pub seen: Vec<Passage>,
    /// Current snippet (always the last of `seen`).
    pub snippet: Option<Passage>,
    pub passages: Option<Vec<Passage>>,
    pub session: Option<DocSession>,
    pub subquery_cap: usize,
}

impl AgentContext {
    pub fn new(question: impl Into<String>, subquery_cap: usize) -> Self {
        Self {
            question: question.into(),
            subquery_cap,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("no transition from {state} on {token} ({condition})")]
    Unwired {
        state: StateId,
        token: BranchToken,
        condition: &'static str,
    },
    #[error("{0} is terminal")]
    Terminal(StateId),
    #[error("state {state} requires {what} in context")]
    MissingContext { state: StateId, what: &'static str },
    #[error("cited evidence {0} is not among the presented passages")]
    UnresolvedEvidence(PassageRef),
}

fn payload_condition(p: &Payload) -> &'static str {
    match p {
        Payload::Empty => "empty",
        Payload::SubQuery { .. } => "sub_query",
        Payload::Answer { .. } => "answer",
        Payload::FinalAnswer { .. } => "final_answer",
        Payload::Snippet { .. } => "snippet",
        Payload::Passages { .. } => "passages",
        Payload::Exhausted => "exhausted",
    }
}

/// Applies the module output's side effects to `ctx` and returns the next
/// state. Any transition into `S0Decompose` is redirected to
/// `S6TaskCompletion` once the history holds `subquery_cap` entries.
pub fn transition(
    state: StateId,
    output: &ModuleOutput,
    ctx: &mut AgentContext,
) -> Result<StateId, ProtocolError> {
    use BranchToken as T;
    use StateId as S;

    let unwired = || ProtocolError::Unwired {
        state,
        token: output.token,
        condition: payload_condition(&output.payload),
    };

    let next = match (state, output.token, &output.payload) {
        (S::Final, ..) => return Err(ProtocolError::Terminal(state)),
        (S::S0Decompose, T::Next, Payload::SubQuery { sub_query }) => {
            ctx.sub_query = Some(sub_query.clone());
            ctx.seen.clear();
            ctx.snippet = None;
            ctx.passages = None;
            ctx.session = None;
            S::S1DocRetrieval
        }
        (S::S0Decompose, T::Finish, Payload::Empty) => S::S6TaskCompletion,
        (S::S1DocRetrieval, T::None, Payload::Snippet { snippet }) => {
            ctx.seen = vec![snippet.clone()];
            ctx.snippet = Some(snippet.clone());
            S::S2RelevanceJudgment
        }
        (S::S2RelevanceJudgment, T::Irrelevant, Payload::Empty) => S::S3NextDoc,
        (S::S2RelevanceJudgment, T::Relevant, Payload::Empty) => S::S4PassageRetrieval,
        (S::S3NextDoc, T::None, Payload::Snippet { snippet }) => {
            ctx.seen.push(snippet.clone());
            ctx.snippet = Some(snippet.clone());
            S::S2RelevanceJudgment
        }
        (S::S3NextDoc, T::None, Payload::Exhausted) => {
            let q = ctx.sub_query.take().ok_or(ProtocolError::MissingContext {
                state,
                what: "sub-query",
            })?;
            let first = ctx
                .seen
                .first()
                .cloned()
                .ok_or(ProtocolError::MissingContext {
                    state,
                    what: "retrieved snippets",
                })?;
            ctx.history.push((q, NO_ANSWER.to_string()));
            ctx.evidence.push(first);
            S::S0Decompose
        }
        (S::S4PassageRetrieval, T::None, Payload::Passages { passages }) => {
            ctx.passages = Some(passages.clone());
            S::S5AnswerExtraction
        }
        (S::S5AnswerExtraction, T::Unanswerable, Payload::Empty) => S::S3NextDoc,
        (
            S::S5AnswerExtraction,
            T::Answerable,
            Payload::Answer {
                answer, evidence, ..
            },
        ) => {
            let e = ctx
                .passages
                .as_deref()
                .unwrap_or_default()
                .iter()
                .find(|p| p.is(evidence))
                .cloned()
                .ok_or_else(|| ProtocolError::UnresolvedEvidence(evidence.clone()))?;
            let q = ctx.sub_query.take().ok_or(ProtocolError::MissingContext {
                state,
                what: "sub-query",
            })?;
            ctx.history.push((q, answer.clone()));
            ctx.evidence.push(e);
            S::S0Decompose
        }
        (S::S6TaskCompletion, T::None, Payload::FinalAnswer { .. }) => S::Final,
        _ => return Err(unwired()),
    };

    if next == S::S0Decompose && ctx.history.len() >= ctx.subquery_cap {
        return Ok(S::S6TaskCompletion);
    }
    Ok(next)
}
