//! Synthetic corpora with planted gold evidence, and an oracle backend that
//! answers every module from the gold annotations. Used by tests, benches
//! and demos.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapt::Question;
use crate::agent::{Agent, AgentConfig};
use crate::backend::{prompt_hash, BackendError, FixtureEntry, LlmBackend, MatchKind};
use crate::feedback::{GoldAnnotation, SubQa};
use crate::fsm::{BranchToken, Module};
use crate::kb::{DocRecord, KnowledgeBase, Passage, PassageRef};
use crate::prompt::PromptTemplateSet;

const ATTRIBUTES: [&str; 8] = [
    "birthplace",
    "founder",
    "capital",
    "author",
    "color",
    "height",
    "river",
    "anthem",
];

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub questions: usize,
    pub min_hops: usize,
    pub max_hops: usize,
    /// Documents per question, inclusive bounds. The lower bound is raised
    /// to the hop count plus one distractor when needed.
    pub min_docs: usize,
    pub max_docs: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            questions: 20,
            min_hops: 1,
            max_hops: 3,
            min_docs: 3,
            max_docs: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub kb: KnowledgeBase,
    pub gold: Vec<GoldAnnotation>,
    pub questions: Vec<Question>,
    /// Documents generated for each question, in question order.
    pub docs_per_question: Vec<usize>,
}

/// Hop `j` of question `i` asks about the entity `e{i}h{j}`. Its gold
/// document holds the only passage containing every sub-query token, plus
/// weaker passages about the same entity. Decoy documents repeat the
/// sub-query verbatim so they tie with the gold passage and sort before it;
/// distractors share only the function words.
pub fn generate(cfg: &SynthConfig) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();
    let mut gold = Vec::new();
    let mut questions = Vec::new();
    let mut docs_per_question = Vec::new();

    for i in 0..cfg.questions {
        let hops = rng.random_range(cfg.min_hops..=cfg.max_hops);
        let floor = cfg.min_docs.max(hops + 1);
        let n_docs = rng.random_range(floor..=cfg.max_docs.max(floor));
        let mut sub_queries = Vec::new();
        let mut evidence = Vec::new();
        let mut entities = Vec::new();
        let mut docs = 0;

        for j in 0..hops {
            let entity = format!("e{i}h{j}");
            let attr = ATTRIBUTES[rng.random_range(0..ATTRIBUTES.len())];
            let answer = format!("v{i}h{j}");
            let q = format!("What is the {attr} of {entity}?");
            let extra = rng.random_range(1..=2);
            let mut passages = vec![format!("The {attr} of {entity} is {answer}.")];
            for k in 0..extra {
                passages.push(format!(
                    "{entity} appears in archive record {k} of {attr} lists."
                ));
            }
            passages.shuffle(&mut rng);
            let index = passages
                .iter()
                .position(|p| p.contains(&answer))
                .expect("gold passage planted");
            let doc_id = format!("g{i:03}h{j}");
            records.push(DocRecord {
                doc_id: doc_id.clone(),
                title: format!("Entity {entity}"),
                passages,
            });
            docs += 1;
            evidence.push(PassageRef::new(doc_id, index));
            sub_queries.push(SubQa { q, a: answer });
            entities.push((entity, attr));
        }

        let mut k = 0;
        while docs < n_docs {
            let (entity, attr) = &entities[k % entities.len()];
            let decoy = k < entities.len() && rng.random_bool(0.5);
            let (doc_id, text) = if decoy {
                (
                    format!("d{i:03}x{k}"),
                    format!("What is the {attr} of {entity}? Nobody recorded it."),
                )
            } else {
                (
                    format!("n{i:03}x{k}"),
                    format!("The {attr} of a different place is not known."),
                )
            };
            records.push(DocRecord {
                doc_id,
                title: format!("Other {i} {k}"),
                passages: vec![text],
            });
            docs += 1;
            k += 1;
        }

        let names: Vec<_> = entities.iter().map(|(e, _)| e.as_str()).collect();
        let question = format!("How are {} connected in question {i}?", names.join(" and "));
        let question_id = format!("q{i:03}");
        gold.push(GoldAnnotation {
            question_id: question_id.clone(),
            question: question.clone(),
            answer: format!("link {i}"),
            sub_queries,
            evidence,
        });
        questions.push(Question {
            question_id,
            question,
        });
        docs_per_question.push(docs);
    }

    SynthCorpus {
        kb: KnowledgeBase::from_records(records).expect("generated records are valid"),
        gold,
        questions,
        docs_per_question,
    }
}

/// Emits the gold module output for any prompt rendered from the
/// reference templates for a question in its gold set.
pub struct OracleBackend {
    by_question: HashMap<String, (GoldAnnotation, Vec<Passage>)>,
}

impl OracleBackend {
    pub fn new(kb: &KnowledgeBase, gold: &[GoldAnnotation]) -> Self {
        let by_question = gold
            .iter()
            .map(|g| {
                let ev = g
                    .evidence
                    .iter()
                    .map(|r| kb.passage(r).expect("gold resolves").clone())
                    .collect();
                (g.question.clone(), (g.clone(), ev))
            })
            .collect();
        Self { by_question }
    }

    fn lookup(
        &self,
        module: Module,
        prompt: &str,
        label: &str,
    ) -> Result<&(GoldAnnotation, Vec<Passage>), BackendError> {
        let q = last_field(prompt, label).unwrap_or_default();
        self.by_question
            .get(q)
            .ok_or_else(|| BackendError::FixtureGap {
                module,
                hash: prompt_hash(prompt),
            })
    }
}

/// Value of the last `label` line in the prompt.
fn last_field<'p>(prompt: &'p str, label: &str) -> Option<&'p str> {
    prompt
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix(label))
        .map(str::trim)
}

/// Task region of a prompt: everything after the few-shot block, if any.
fn task(prompt: &str) -> &str {
    prompt
        .rsplit_once("====Examples End====")
        .map_or(prompt, |(_, t)| t)
}

impl LlmBackend for OracleBackend {
    fn complete(&self, module: Module, prompt: &str) -> Result<String, BackendError> {
        let text = task(prompt);
        if module == Module::Complete {
            let (g, _) = self.lookup(module, text, "Question: ")?;
            return Ok(g.answer.clone());
        }
        let (g, ev) = self.lookup(module, text, "Main Question: ")?;
        let hop = |text: &str| {
            let q = last_field(text, "Next Sub-Query: ").unwrap_or_default();
            g.sub_queries.iter().position(|s| s.q == q)
        };
        Ok(match module {
            Module::Decompose => {
                let solved = text.split_once("Solved Sub-Queries:").map_or(0, |(_, h)| {
                    h.lines().filter(|l| l.contains(". Q: ")).count()
                });
                match g.sub_queries.get(solved) {
                    Some(s) => format!("{} {}", BranchToken::Next.tag(), s.q),
                    None => BranchToken::Finish.tag().to_string(),
                }
            }
            Module::Judge => {
                let snippet = last_field(text, "Document Snippet: ").unwrap_or_default();
                let relevant = hop(text).is_some_and(|j| {
                    let d = &ev[j];
                    snippet.starts_with(&format!("(title: {})", d.title))
                });
                if relevant {
                    BranchToken::Relevant.tag().to_string()
                } else {
                    BranchToken::Irrelevant.tag().to_string()
                }
            }
            Module::Answer => {
                let found = hop(text).and_then(|j| {
                    let body = text.split_once("Passages: ")?.1;
                    let want = format!("(title: {}) {}", ev[j].title, ev[j].text);
                    body.lines()
                        .position(|l| l.split_once("] ").is_some_and(|(_, rest)| rest == want))
                        .map(|k| (j, k + 1))
                });
                match found {
                    Some((j, k)) => format!(
                        "{} Answer: {}; Relevant Passage ID: [{k}]",
                        BranchToken::Answerable.tag(),
                        g.sub_queries[j].a
                    ),
                    None => BranchToken::Unanswerable.tag().to_string(),
                }
            }
            _ => unreachable!("tool modules never reach a backend"),
        })
    }
}

/// Runs the oracle over `questions` and returns every LLM call it served
/// as hash-matched fixture entries, sorted by module then hash.
pub fn oracle_fixtures(
    kb: &KnowledgeBase,
    gold: &[GoldAnnotation],
    questions: &[Question],
    templates: &PromptTemplateSet,
    config: AgentConfig,
) -> Vec<FixtureEntry> {
    let oracle = OracleBackend::new(kb, gold);
    let recording = Recorder {
        inner: oracle,
        calls: Mutex::new(BTreeMap::new()),
    };
    let agent = Agent::new(kb, &recording, templates, config);
    for q in questions {
        agent.run(&q.question_id, &q.question);
    }
    recording
        .calls
        .into_inner()
        .expect("recorder lock")
        .into_iter()
        .map(|((module, hash), output)| FixtureEntry {
            module: module.name().to_string(),
            match_kind: MatchKind::Hash,
            input: hash,
            output,
        })
        .collect()
}

struct Recorder {
    inner: OracleBackend,
    calls: Mutex<BTreeMap<(Module, String), String>>,
}

impl LlmBackend for Recorder {
    fn complete(&self, module: Module, prompt: &str) -> Result<String, BackendError> {
        let out = self.inner.complete(module, prompt)?;
        self.calls
            .lock()
            .expect("recorder lock")
            .insert((module, prompt_hash(prompt)), out.clone());
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let cfg = SynthConfig::default();
        let a = generate(&cfg);
        let b = generate(&cfg);
        assert_eq!(a.gold, b.gold);
        assert_eq!(a.kb.to_records(), b.kb.to_records());
        assert!(a.docs_per_question.iter().all(|n| (3..=8).contains(n)));
        for g in &a.gold {
            g.check_against(&a.kb).unwrap();
            assert_eq!(g.sub_queries.len(), g.evidence.len());
        }
    }
}
