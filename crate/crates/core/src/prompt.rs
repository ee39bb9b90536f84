//! Prompt templates and rendering of the agent state into module prompts.
//!
//! The rendered prompt doubles as the state serialization stored in
//! trajectories and training exports, so rendering is pure and byte-stable.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsm::{AgentContext, Module};
use crate::kb::Passage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    /// In-context examples included; for off-the-shelf models.
    FewShot,
    /// Examples removed; for fine-tuned models.
    #[default]
    ZeroShot,
}

impl std::str::FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "few-shot" => Ok(PromptMode::FewShot),
            "zero-shot" => Ok(PromptMode::ZeroShot),
            other => Err(format!("unknown prompt mode {other:?}")),
        }
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("{module} prompt needs slot {slot} but the context has no value for it")]
    MissingSlot { module: Module, slot: &'static str },
    #[error("no template for module {0}")]
    NoTemplate(Module),
    #[error("unknown template style {0:?}")]
    UnknownStyle(String),
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub body: String,
    pub examples: String,
}

#[derive(Debug, Clone)]
pub struct PromptTemplateSet {
    pub style: String,
    pub mode: PromptMode,
    templates: BTreeMap<Module, Template>,
}

const SLOT_EXAMPLES: &str = "{EXAMPLES}";

macro_rules! builtin {
    ($style:literal, $file:literal) => {
        include_str!(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/templates/",
            $style,
            "/",
            $file
        ))
    };
}

fn hotpot_builtin() -> BTreeMap<Module, Template> {
    let mk = |body: &str, examples: &str| Template {
        body: body.trim_end().to_string(),
        examples: examples.to_string(),
    };
    BTreeMap::from([
        (
            Module::Decompose,
            mk(
                builtin!("hotpotqa", "decompose.txt"),
                builtin!("hotpotqa", "decompose.examples.txt"),
            ),
        ),
        (
            Module::Judge,
            mk(
                builtin!("hotpotqa", "judge.txt"),
                builtin!("hotpotqa", "judge.examples.txt"),
            ),
        ),
        (
            Module::Answer,
            mk(
                builtin!("hotpotqa", "answer.txt"),
                builtin!("hotpotqa", "answer.examples.txt"),
            ),
        ),
        (
            Module::Complete,
            mk(
                builtin!("hotpotqa", "complete.txt"),
                builtin!("hotpotqa", "complete.examples.txt"),
            ),
        ),
    ])
}

impl PromptTemplateSet {
    /// Shipped templates. `hotpotqa` is the reference wording; `pubmedqa` and
    /// `qasper` override only the Complete prompt.
    pub fn builtin(style: &str, mode: PromptMode) -> Result<Self, PromptError> {
        let mut templates = hotpot_builtin();
        let complete_override = match style {
            "hotpotqa" => None,
            "pubmedqa" => Some(builtin!("pubmedqa", "complete.txt")),
            "qasper" => Some(builtin!("qasper", "complete.txt")),
            other => return Err(PromptError::UnknownStyle(other.to_string())),
        };
        if let Some(body) = complete_override {
            let t = templates.get_mut(&Module::Complete).expect("builtin");
            t.body = body.trim_end().to_string();
        }
        Ok(Self {
            style: style.to_string(),
            mode,
            templates,
        })
    }

    pub fn hotpotqa(mode: PromptMode) -> Self {
        Self::builtin("hotpotqa", mode).expect("builtin style")
    }

    /// Loads `<module>.txt` / `<module>.examples.txt` from `dir`, falling back
    /// to the builtin reference template for any file that is absent.
    pub fn from_dir(dir: &Path, mode: PromptMode) -> Result<Self, PromptError> {
        let mut templates = hotpot_builtin();
        for module in Module::LLM {
            let stem = module.name().to_ascii_lowercase();
            let t = templates.get_mut(&module).expect("builtin");
            let body = dir.join(format!("{stem}.txt"));
            if body.exists() {
                t.body = read(&body)?.trim_end().to_string();
            }
            let examples = dir.join(format!("{stem}.examples.txt"));
            if examples.exists() {
                t.examples = read(&examples)?;
            }
        }
        Ok(Self {
            style: dir.display().to_string(),
            mode,
            templates,
        })
    }

    pub fn with_mode(mut self, mode: PromptMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn template(&self, module: Module) -> Option<&Template> {
        self.templates.get(&module)
    }
}

fn read(path: &Path) -> Result<String, PromptError> {
    std::fs::read_to_string(path).map_err(|source| PromptError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// `"1. Q: <q> A: <a>"` lines; empty string for an empty history.
pub fn render_history(history: &[(String, String)]) -> String {
    let mut out = String::new();
    for (i, (q, a)) in history.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = write!(out, "{}. Q: {} A: {}", i + 1, q, a);
    }
    out
}

/// `"(title: <title>) <text>"`.
pub fn render_snippet(p: &Passage) -> String {
    format!("(title: {}) {}", p.title, p.text)
}

/// `"[k] (title: <title>) <text>"` lines with 1-based `k`.
pub fn render_passages(ps: &[Passage]) -> String {
    let mut out = String::new();
    for (i, p) in ps.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = write!(out, "[{}] {}", i + 1, render_snippet(p));
    }
    out
}

/// The `{H}` slot: omitted entirely for an empty history.
fn history_block(history: &[(String, String)]) -> String {
    if history.is_empty() {
        String::new()
    } else {
        format!("\n\nSolved Sub-Queries:\n{}", render_history(history))
    }
}

/// Fills the module's template from `ctx`.
pub fn build_prompt(
    module: Module,
    ctx: &AgentContext,
    templates: &PromptTemplateSet,
) -> Result<String, PromptError> {
    let t = templates
        .template(module)
        .ok_or(PromptError::NoTemplate(module))?;
    let missing = |slot| PromptError::MissingSlot { module, slot };

    let mut out = String::with_capacity(t.body.len() + 256);
    let mut rest = t.body.as_str();
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        let Some(end) = tail.find('}') else {
            out.push_str(tail);
            rest = "";
            break;
        };
        let slot = &tail[..=end];
        match slot {
            SLOT_EXAMPLES => {
                if templates.mode == PromptMode::FewShot {
                    out.push_str(&t.examples);
                }
            }
            "{Q}" => out.push_str(&ctx.question),
            "{H}" => out.push_str(&history_block(&ctx.history)),
            "{q}" => out.push_str(ctx.sub_query.as_deref().ok_or_else(|| missing("q"))?),
            "{d}" => out.push_str(&render_snippet(
                ctx.snippet.as_ref().ok_or_else(|| missing("d"))?,
            )),
            "{P}" => out.push_str(&render_passages(
                ctx.passages.as_deref().ok_or_else(|| missing("P"))?,
            )),
            "{E}" => out.push_str(&render_passages(&ctx.evidence)),
            other => out.push_str(other),
        }
        rest = &tail[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}
