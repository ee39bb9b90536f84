//! Finite-state-machine knowledge agent.
//!
//! The agent answers a question by decomposing it into sub-queries, retrieving
//! and judging documents, extracting answers with cited evidence, and finally
//! completing an answer from the collected evidence. Every step is recorded so
//! it can be annotated with process or outcome feedback and exported as
//! training data.
//!
//! Modules:
//! - [`kb`]: knowledge base and the `search_doc` / `next_doc` / `search_psg` tools
//! - [`fsm`]: states, branch tokens, output parsing, transition function
//! - [`agent`]: the run loop, trajectories, validation and step/token stats
//! - [`prompt`] and [`backend`]: prompt templates and LLM backends
//! - [`feedback`]: silver process/outcome feedback, human feedback store, conversion
//! - [`warmup`]: warm-up dataset construction, balanced sampling, objective evaluators
//! - [`adapt`]: exploration / feedback collection / export iterations
//! - [`metrics`]: EM, F1, yes/no accuracy, evidence recall, module and feedback accuracy
//! - [`synth`]: synthetic corpora and an oracle backend for tests and benchmarks

pub mod adapt;
pub mod agent;
pub mod backend;
pub mod feedback;
pub mod fsm;
pub mod jsonl;
pub mod kb;
pub mod metrics;
pub mod parallel;
pub mod prompt;
pub mod synth;
pub mod warmup;

pub use agent::{Agent, AgentConfig, StepRecord, Trajectory};
pub use fsm::{BranchToken, Module, StateId};
pub use kb::{KnowledgeBase, Passage, PassageRef, Retriever};
