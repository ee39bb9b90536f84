//! Warm-up training data built from gold-annotated questions, balanced
//! sampling by `(module, class)` quota, and evaluators for the supervised
//! and adaptation objectives over externally supplied log-probabilities.

use std::collections::{BTreeMap, HashMap};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::feedback::{GoldAnnotation, LabeledStep};
use crate::fsm::{AgentContext, BranchToken, Module};
use crate::kb::{KnowledgeBase, Passage, Retriever};
use crate::parallel;
use crate::prompt::{build_prompt, PromptError, PromptTemplateSet};

#[derive(Debug, Error)]
pub enum WarmupError {
    #[error("question {0:?}: sub-queries and evidence must be aligned and non-empty")]
    Misaligned(String),
    #[error("question {question_id:?}: evidence {passage} not in the knowledge base")]
    Unresolved {
        question_id: String,
        passage: String,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("no log-probability for batch element {0}")]
    MissingLogprob(usize),
    #[error("beta must be non-negative, got {0}")]
    NegativeBeta(f64),
    #[error("quota: {0}")]
    Quota(String),
}

/// A gold annotation whose `J` sub-queries align with `J` evidence passages.
#[derive(Debug, Clone)]
pub struct AnnotatedQuestion {
    pub gold: GoldAnnotation,
    evidence: Vec<Passage>,
}

impl AnnotatedQuestion {
    pub fn new(gold: GoldAnnotation, kb: &KnowledgeBase) -> Result<Self, WarmupError> {
        let j = gold.sub_queries.len();
        if j == 0 || j != gold.evidence.len() {
            return Err(WarmupError::Misaligned(gold.question_id));
        }
        let evidence = gold
            .evidence
            .iter()
            .map(|r| {
                kb.passage(r)
                    .cloned()
                    .ok_or_else(|| WarmupError::Unresolved {
                        question_id: gold.question_id.clone(),
                        passage: r.to_string(),
                    })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { gold, evidence })
    }

    pub fn hops(&self) -> usize {
        self.evidence.len()
    }

    fn history_before(&self, j: usize) -> Vec<(String, String)> {
        self.gold.sub_queries[..j]
            .iter()
            .map(|s| (s.q.clone(), s.a.clone()))
            .collect()
    }
}

/// Branch class of an example target, used as the quota cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExampleClass {
    Next,
    Finish,
    Relevant,
    Irrelevant,
    Answerable,
    Unanswerable,
    Final,
}

impl ExampleClass {
    pub fn of(module: Module, target: &str) -> Self {
        if module == Module::Complete {
            return ExampleClass::Final;
        }
        match BranchToken::leading(target.trim()) {
            Some(BranchToken::Next) => ExampleClass::Next,
            Some(BranchToken::Finish) => ExampleClass::Finish,
            Some(BranchToken::Relevant) => ExampleClass::Relevant,
            Some(BranchToken::Irrelevant) => ExampleClass::Irrelevant,
            Some(BranchToken::Answerable) => ExampleClass::Answerable,
            Some(BranchToken::Unanswerable) => ExampleClass::Unanswerable,
            _ => ExampleClass::Final,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub module: Module,
    #[serde(rename = "input")]
    pub input_render: String,
    pub target: String,
    pub reward: u8,
    pub weight: f64,
}

impl TrainingExample {
    pub fn class(&self) -> ExampleClass {
        ExampleClass::of(self.module, &self.target)
    }
}

/// Per-module loss weights; modules not listed weigh 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModuleWeights(pub BTreeMap<Module, f64>);

impl ModuleWeights {
    pub fn get(&self, m: Module) -> f64 {
        self.0.get(&m).copied().unwrap_or(1.0)
    }

    pub fn with(mut self, m: Module, w: f64) -> Self {
        self.0.insert(m, w);
        self
    }
}

/// Scenario omissions encountered while building.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildReport {
    pub questions: usize,
    pub examples: usize,
    /// Judge: every retrieved snippet comes from a gold document.
    pub judge_irrelevant_skipped: usize,
    /// Judge: the gold document has no other passages near the top.
    pub judge_same_doc_empty: usize,
    /// Answer: no passage set without the gold passage.
    pub answer_unanswerable_skipped: usize,
}

impl BuildReport {
    fn merge(&mut self, other: &BuildReport) {
        self.questions += other.questions;
        self.examples += other.examples;
        self.judge_irrelevant_skipped += other.judge_irrelevant_skipped;
        self.judge_same_doc_empty += other.judge_same_doc_empty;
        self.answer_unanswerable_skipped += other.answer_unanswerable_skipped;
    }
}

/// Derives a per-question RNG so builds are independent of question order.
fn question_rng(seed: u64, salt: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(format!("{seed}:{salt}").as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(bytes))
}

pub struct WarmupBuilder<'a> {
    pub kb: &'a KnowledgeBase,
    pub retriever: Retriever,
    pub templates: &'a PromptTemplateSet,
    pub weights: ModuleWeights,
    pub seed: u64,
}

impl<'a> WarmupBuilder<'a> {
    pub fn new(kb: &'a KnowledgeBase, templates: &'a PromptTemplateSet, seed: u64) -> Self {
        Self {
            kb,
            retriever: Retriever::default(),
            templates,
            weights: ModuleWeights::default(),
            seed,
        }
    }

    fn example(
        &self,
        module: Module,
        ctx: &AgentContext,
        target: String,
    ) -> Result<TrainingExample, WarmupError> {
        Ok(TrainingExample {
            module,
            input_render: build_prompt(module, ctx, self.templates)?,
            target,
            reward: 1,
            weight: self.weights.get(module),
        })
    }

    fn context(&self, aq: &AnnotatedQuestion, j: usize) -> AgentContext {
        let mut ctx = AgentContext::new(aq.gold.question.clone(), aq.hops() + 1);
        ctx.history = aq.history_before(j);
        if j < aq.hops() {
            ctx.sub_query = Some(aq.gold.sub_queries[j].q.clone());
        }
        ctx
    }

    /// `J` `[Next]` examples over growing history prefixes plus one `[Finish]`.
    pub fn build_decompose(
        &self,
        aq: &AnnotatedQuestion,
    ) -> Result<Vec<TrainingExample>, WarmupError> {
        let mut out = Vec::with_capacity(aq.hops() + 1);
        for j in 0..=aq.hops() {
            let mut ctx = self.context(aq, j);
            ctx.sub_query = None;
            let target = match aq.gold.sub_queries.get(j) {
                Some(sq) => format!("{} {}", BranchToken::Next.tag(), sq.q),
                None => BranchToken::Finish.tag().to_string(),
            };
            out.push(self.example(Module::Decompose, &ctx, target)?);
        }
        Ok(out)
    }

    /// Passages of the gold document near the top for `q̂_j`, minus `ê_j`.
    fn same_doc_negatives(&self, aq: &AnnotatedQuestion, j: usize) -> Vec<Passage> {
        let gold = &aq.evidence[j];
        let q = &aq.gold.sub_queries[j].q;
        self.retriever
            .search_psg(self.kb, q, &gold.doc_id)
            .expect("gold document resolved at construction")
            .into_iter()
            .filter(|p| p != gold)
            .collect()
    }

    /// Per sub-query: the gold passage (relevant), the best snippet from a
    /// document holding no gold evidence of the question (irrelevant), and
    /// other top passages of the gold document (relevant).
    pub fn build_judge(
        &self,
        aq: &AnnotatedQuestion,
        report: &mut BuildReport,
    ) -> Result<Vec<TrainingExample>, WarmupError> {
        let relevant = BranchToken::Relevant.tag().to_string();
        let irrelevant = BranchToken::Irrelevant.tag().to_string();
        let mut out = Vec::new();
        for j in 0..aq.hops() {
            let gold = &aq.evidence[j];
            let mut ctx = self.context(aq, j);

            ctx.snippet = Some(gold.clone());
            out.push(self.example(Module::Judge, &ctx, relevant.clone())?);

            let (session, _) = self
                .retriever
                .search_doc(self.kb, &aq.gold.sub_queries[j].q);
            let gold_docs = aq.gold.evidence_docs();
            let other = session
                .ranked
                .iter()
                .find(|s| !gold_docs.contains(s.passage.doc_id.as_str()));
            match other {
                Some(other) => {
                    ctx.snippet = Some(other.passage.clone());
                    out.push(self.example(Module::Judge, &ctx, irrelevant.clone())?);
                }
                None => report.judge_irrelevant_skipped += 1,
            }

            let negatives = self.same_doc_negatives(aq, j);
            if negatives.is_empty() {
                report.judge_same_doc_empty += 1;
            }
            for p in negatives {
                ctx.snippet = Some(p);
                out.push(self.example(Module::Judge, &ctx, relevant.clone())?);
            }
        }
        Ok(out)
    }

    /// Per sub-query: the gold-free passage set (unanswerable) and the same
    /// set with one random member replaced by the gold passage (answerable,
    /// citing its 1-based position). Both are presented in random order.
    pub fn build_answer(
        &self,
        aq: &AnnotatedQuestion,
        report: &mut BuildReport,
    ) -> Result<Vec<TrainingExample>, WarmupError> {
        let mut rng = question_rng(self.seed, &format!("answer:{}", aq.gold.question_id));
        let mut out = Vec::new();
        for j in 0..aq.hops() {
            let gold = &aq.evidence[j];
            let negatives = self.same_doc_negatives(aq, j);
            let mut ctx = self.context(aq, j);

            if negatives.is_empty() {
                report.answer_unanswerable_skipped += 1;
            } else {
                let mut p = negatives.clone();
                p.shuffle(&mut rng);
                ctx.passages = Some(p);
                out.push(self.example(
                    Module::Answer,
                    &ctx,
                    BranchToken::Unanswerable.tag().to_string(),
                )?);
            }

            let mut p = negatives;
            if p.is_empty() {
                p.push(gold.clone());
            } else {
                let slot = rng.random_range(0..p.len());
                p[slot] = gold.clone();
            }
            p.shuffle(&mut rng);
            let k = p.iter().position(|x| x == gold).expect("gold inserted") + 1;
            ctx.passages = Some(p);
            let target = format!(
                "{} Answer: {}; Relevant Passage ID: [{}]",
                BranchToken::Answerable.tag(),
                aq.gold.sub_queries[j].a,
                k
            );
            out.push(self.example(Module::Answer, &ctx, target)?);
        }
        Ok(out)
    }

    /// Question plus gold evidence in gold order; target is the gold answer.
    pub fn build_complete(&self, aq: &AnnotatedQuestion) -> Result<TrainingExample, WarmupError> {
        let mut ctx = AgentContext::new(aq.gold.question.clone(), aq.hops() + 1);
        ctx.evidence = aq.evidence.clone();
        self.example(Module::Complete, &ctx, aq.gold.answer.clone())
    }

    pub fn build_question(
        &self,
        aq: &AnnotatedQuestion,
    ) -> Result<(Vec<TrainingExample>, BuildReport), WarmupError> {
        let mut report = BuildReport {
            questions: 1,
            ..Default::default()
        };
        let mut out = self.build_decompose(aq)?;
        out.extend(self.build_judge(aq, &mut report)?);
        out.extend(self.build_answer(aq, &mut report)?);
        out.push(self.build_complete(aq)?);
        report.examples = out.len();
        Ok((out, report))
    }

    /// Builds every question (in parallel when enabled), concatenated in input order.
    pub fn build_all(
        &self,
        questions: &[AnnotatedQuestion],
    ) -> Result<(Vec<TrainingExample>, BuildReport), WarmupError> {
        let per_question = parallel::map(questions, |aq| self.build_question(aq));
        self.merge(per_question)
    }

    pub fn build_all_sequential(
        &self,
        questions: &[AnnotatedQuestion],
    ) -> Result<(Vec<TrainingExample>, BuildReport), WarmupError> {
        let per_question = parallel::map_sequential(questions, |aq| self.build_question(aq));
        self.merge(per_question)
    }

    fn merge(
        &self,
        parts: Vec<Result<(Vec<TrainingExample>, BuildReport), WarmupError>>,
    ) -> Result<(Vec<TrainingExample>, BuildReport), WarmupError> {
        let mut all = Vec::new();
        let mut report = BuildReport::default();
        for part in parts {
            let (ex, r) = part?;
            all.extend(ex);
            report.merge(&r);
        }
        Ok((all, report))
    }
}

/// Target sample counts per `(module, class)` cell. Cells without a quota
/// keep every available example.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuotaConfig(pub BTreeMap<(Module, ExampleClass), usize>);

impl QuotaConfig {
    pub fn with(mut self, module: Module, class: ExampleClass, n: usize) -> Self {
        self.0.insert((module, class), n);
        self
    }

    /// `{"Decompose": {"next": 3500, "finish": 500}, "Complete": {"final": 3000}, ...}`
    pub fn from_json(text: &str) -> Result<Self, WarmupError> {
        let raw: BTreeMap<String, BTreeMap<String, usize>> =
            serde_json::from_str(text).map_err(|e| WarmupError::Quota(e.to_string()))?;
        let mut q = QuotaConfig::default();
        for (m, cells) in raw {
            let module = Module::parse(&m)
                .filter(|m| m.is_llm())
                .ok_or_else(|| WarmupError::Quota(format!("unknown module {m:?}")))?;
            for (c, n) in cells {
                let class = ExampleClass::parse(&c)
                    .ok_or_else(|| WarmupError::Quota(format!("unknown class {c:?}")))?;
                q.0.insert((module, class), n);
            }
        }
        Ok(q)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellReport {
    pub module: Module,
    pub class: ExampleClass,
    pub available: usize,
    pub quota: Option<usize>,
    pub selected: usize,
    pub shortfall: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampledDataset {
    /// Indices into the input pool, ascending.
    pub ids: Vec<usize>,
    pub examples: Vec<TrainingExample>,
    pub cells: Vec<CellReport>,
}

/// Uniform sampling without replacement within each cell, capped at what is
/// available. Deterministic for a fixed seed.
pub fn sample_balanced(
    examples: &[TrainingExample],
    quota: &QuotaConfig,
    seed: u64,
) -> SampledDataset {
    let mut cells: BTreeMap<(Module, ExampleClass), Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        cells.entry((e.module, e.class())).or_default().push(i);
    }
    for key in quota.0.keys() {
        cells.entry(*key).or_default();
    }
    let mut ids = Vec::new();
    let mut reports = Vec::new();
    for ((module, class), pool) in cells {
        let want = quota.0.get(&(module, class)).copied();
        let take = want.map_or(pool.len(), |w| w.min(pool.len()));
        let mut rng = question_rng(seed, &format!("cell:{module}:{class:?}"));
        let chosen = if take == pool.len() {
            pool.clone()
        } else {
            index::sample(&mut rng, pool.len(), take)
                .into_iter()
                .map(|k| pool[k])
                .collect()
        };
        ids.extend(chosen);
        reports.push(CellReport {
            module,
            class,
            available: pool.len(),
            quota: want,
            selected: take,
            shortfall: want.map_or(0, |w| w.saturating_sub(pool.len())),
        });
    }
    ids.sort_unstable();
    SampledDataset {
        examples: ids.iter().map(|&i| examples[i].clone()).collect(),
        ids,
        cells: reports,
    }
}

/// `−mean(λ_m · log π(ŷ|ŝ))` over the batch; `logprob` is keyed by batch index.
pub fn lm_loss(
    batch: &[TrainingExample],
    logprob: &HashMap<usize, f64>,
    weights: &ModuleWeights,
) -> Result<f64, WarmupError> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (i, e) in batch.iter().enumerate() {
        let lp = logprob.get(&i).ok_or(WarmupError::MissingLogprob(i))?;
        sum += weights.get(e.module) * lp;
    }
    Ok(-sum / batch.len() as f64)
}

/// `−mean(λ_m · [o − β·(log π_θ(ỹ|s) − log π_ref(ỹ|s))])` over the batch.
pub fn kto_objective(
    batch: &[LabeledStep],
    logpi: &HashMap<usize, f64>,
    logref: &HashMap<usize, f64>,
    beta: f64,
    weights: &ModuleWeights,
) -> Result<f64, WarmupError> {
    kto_objective_with(batch, logpi, logref, beta, weights, |_| 0.0)
}

/// [`kto_objective`] plus an additive regularization term over the batch.
pub fn kto_objective_with(
    batch: &[LabeledStep],
    logpi: &HashMap<usize, f64>,
    logref: &HashMap<usize, f64>,
    beta: f64,
    weights: &ModuleWeights,
    regularizer: impl Fn(&[LabeledStep]) -> f64,
) -> Result<f64, WarmupError> {
    if beta < 0.0 {
        return Err(WarmupError::NegativeBeta(beta));
    }
    if batch.is_empty() {
        return Ok(regularizer(batch));
    }
    let mut sum = 0.0;
    for (k, s) in batch.iter().enumerate() {
        let pi = logpi.get(&k).ok_or(WarmupError::MissingLogprob(k))?;
        let r = logref.get(&k).ok_or(WarmupError::MissingLogprob(k))?;
        sum += weights.get(s.module) * (f64::from(s.reward) - beta * (pi - r));
    }
    Ok(-sum / batch.len() as f64 + regularizer(batch))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(module: Module, target: &str) -> TrainingExample {
        TrainingExample {
            module,
            input_render: "s".into(),
            target: target.into(),
            reward: 1,
            weight: 1.0,
        }
    }

    fn step(reward: u8) -> LabeledStep {
        LabeledStep {
            module: Module::Judge,
            input_render: "s".into(),
            target: "y".into(),
            reward,
            trajectory_id: None,
            step: None,
        }
    }

    fn idx(vals: &[f64]) -> HashMap<usize, f64> {
        vals.iter().copied().enumerate().collect()
    }

    #[test]
    fn lm_loss_examples() {
        let w = ModuleWeights::default();
        let one = vec![ex(Module::Judge, "[Relevant]")];
        assert_eq!(lm_loss(&one, &idx(&[-2.0]), &w).unwrap(), 2.0);
        let two = vec![
            ex(Module::Judge, "[Relevant]"),
            ex(Module::Answer, "[Unanswerable]"),
        ];
        assert_eq!(lm_loss(&two, &idx(&[-1.0, -3.0]), &w).unwrap(), 2.0);
        let dec = vec![ex(Module::Decompose, "[Finish]")];
        let w2 = ModuleWeights::default().with(Module::Decompose, 2.0);
        assert_eq!(lm_loss(&dec, &idx(&[-1.5]), &w2).unwrap(), 3.0);
        assert!(matches!(
            lm_loss(&two, &idx(&[-1.0]), &w),
            Err(WarmupError::MissingLogprob(1))
        ));
    }

    #[test]
    fn kto_examples() {
        let w = ModuleWeights::default();
        let all_pos = vec![step(1), step(1)];
        assert_eq!(
            kto_objective(&all_pos, &idx(&[-1.0, -2.0]), &idx(&[-5.0, 0.0]), 0.0, &w).unwrap(),
            -1.0
        );
        assert_eq!(
            kto_objective(&[step(1)], &idx(&[-3.0]), &idx(&[-3.0]), 0.1, &w).unwrap(),
            -1.0
        );
        let v = kto_objective(&[step(0)], &idx(&[-3.0]), &idx(&[-1.0]), 0.1, &w).unwrap();
        assert!((v - -0.2).abs() < 1e-12, "{v}");
        assert!(kto_objective(&[step(0)], &idx(&[0.0]), &idx(&[0.0]), -1.0, &w).is_err());
        let reg = kto_objective_with(&[step(1)], &idx(&[0.0]), &idx(&[0.0]), 0.1, &w, |b| {
            0.5 * b.len() as f64
        })
        .unwrap();
        assert_eq!(reg, -0.5);
    }

    #[test]
    fn quota_json_and_classes() {
        let q = QuotaConfig::from_json(
            r#"{"Decompose": {"next": 3500, "finish": 500}, "complete": {"final": 3}}"#,
        )
        .unwrap();
        assert_eq!(
            q.0.get(&(Module::Decompose, ExampleClass::Next)),
            Some(&3500)
        );
        assert_eq!(q.0.get(&(Module::Complete, ExampleClass::Final)), Some(&3));
        assert!(QuotaConfig::from_json(r#"{"SearchDoc": {"next": 1}}"#).is_err());
        assert!(QuotaConfig::from_json(r#"{"Judge": {"maybe": 1}}"#).is_err());
        assert_eq!(
            ExampleClass::of(
                Module::Answer,
                "[Answerable] Answer: a; Relevant Passage ID: [1]"
            ),
            ExampleClass::Answerable
        );
    }

    #[test]
    fn sampling_caps_and_is_deterministic() {
        let pool: Vec<_> = (0..50)
            .map(|i| ex(Module::Decompose, &format!("[Next] q{i}")))
            .chain((0..5).map(|_| ex(Module::Decompose, "[Finish]")))
            .collect();
        let quota = QuotaConfig::default()
            .with(Module::Decompose, ExampleClass::Next, 20)
            .with(Module::Decompose, ExampleClass::Finish, 8);
        let a = sample_balanced(&pool, &quota, 3);
        let b = sample_balanced(&pool, &quota, 3);
        assert_eq!(a.ids, b.ids);
        assert_eq!(a.examples.len(), 25);
        let finish = a
            .cells
            .iter()
            .find(|c| c.class == ExampleClass::Finish)
            .unwrap();
        assert_eq!(
            (finish.available, finish.selected, finish.shortfall),
            (5, 5, 3)
        );
        let c = sample_balanced(&pool, &quota, 4);
        assert_ne!(a.ids, c.ids);
    }
}
