//! Layered settings: built-in defaults, then an optional TOML file, then flags.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::Value;

use fsmqa_core::adapt::FeedbackMode;
use fsmqa_core::prompt::PromptMode;
use fsmqa_core::warmup::ModuleWeights;
use fsmqa_core::{AgentConfig, Module};

pub const DEFAULTS: &str = include_str!("../defaults.toml");

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub seed: u64,
    #[serde(default)]
    pub backend: Option<String>,
    pub agent: AgentSection,
    pub caps: BTreeMap<String, usize>,
    pub prompts: PromptSection,
    pub decoding: DecodingSection,
    pub weights: BTreeMap<String, f64>,
    pub adapt: AdaptSection,
    pub serve: ServeSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSection {
    #[serde(default)]
    pub max_subqueries: Option<usize>,
    pub max_docs: usize,
    pub top_psg: usize,
    pub parse_retries: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSection {
    pub style: String,
    pub mode: PromptMode,
    /// Directory of template files replacing the built-in ones.
    #[serde(default)]
    pub templates: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodingSection {
    pub temperature: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptSection {
    pub iterations: usize,
    pub feedback_mode: FeedbackMode,
    pub same_questions: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeSection {
    pub addr: String,
    pub token_env: String,
}

/// Recursively overlays `top` onto `base`; tables merge, everything else replaces.
fn overlay(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl Settings {
    pub fn load(config: Option<&Path>) -> Result<Self> {
        let mut merged: Value = DEFAULTS.parse().context("built-in defaults")?;
        if let Some(path) = config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let user: Value = text
                .parse()
                .with_context(|| format!("parsing config {}", path.display()))?;
            overlay(&mut merged, user);
        }
        let settings: Settings = merged.try_into().with_context(|| match config {
            Some(p) => format!("invalid config {}", p.display()),
            None => "invalid built-in defaults".to_string(),
        })?;
        settings.check()?;
        Ok(settings)
    }

    fn check(&self) -> Result<()> {
        for name in self.weights.keys() {
            if Module::parse(name).is_none() {
                bail!("weights: unknown module {name:?}");
            }
        }
        if self.agent.max_docs == 0 || self.agent.top_psg == 0 {
            bail!("agent.max_docs and agent.top_psg must be at least 1");
        }
        Ok(())
    }

    pub fn subquery_cap(&self) -> Result<usize> {
        match self.agent.max_subqueries {
            Some(n) => Ok(n),
            None => self
                .caps
                .get(&self.prompts.style)
                .copied()
                .with_context(|| {
                    format!(
                        "no sub-query cap for style {:?}; set agent.max_subqueries",
                        self.prompts.style
                    )
                }),
        }
    }

    pub fn agent_config(&self) -> Result<AgentConfig> {
        let cap = self.subquery_cap()?;
        if cap == 0 {
            bail!("the sub-query cap must be at least 1");
        }
        Ok(AgentConfig {
            subquery_cap: cap,
            max_docs: self.agent.max_docs,
            top_psg: self.agent.top_psg,
            parse_retries: self.agent.parse_retries,
        })
    }

    pub fn module_weights(&self) -> ModuleWeights {
        self.weights
            .iter()
            .fold(ModuleWeights::default(), |w, (name, v)| {
                w.with(Module::parse(name).expect("checked on load"), *v)
            })
    }
}
