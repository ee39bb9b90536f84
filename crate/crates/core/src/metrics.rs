//! Answer, evidence, module and feedback metrics, and the evaluation report.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::Trajectory;
use crate::feedback::{convert, Feedback, GoldStore};
use crate::fsm::Module;
use crate::kb::PassageRef;
use crate::parallel;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("recall is undefined for an empty gold evidence set")]
    EmptyGold,
    #[error("silver and gold feedback lists differ in length ({silver} vs {gold})")]
    LengthMismatch { silver: usize, gold: usize },
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
}

/// Lowercases, drops punctuation and the articles a/an/the, collapses whitespace.
pub fn normalize(s: &str) -> String {
    let lowered: String = s
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn em(pred: &str, gold: &str) -> f64 {
    f64::from(u8::from(normalize(pred) == normalize(gold)))
}

/// Token-multiset F1 after normalization; 0 when either side is empty
/// unless both are.
pub fn f1(pred: &str, gold: &str) -> f64 {
    let p = normalize(pred);
    let g = normalize(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() || gt.is_empty() {
        return f64::from(u8::from(pt.is_empty() && gt.is_empty()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pt.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// 1 when both normalize to the same member of {yes, no}.
pub fn acc_yesno(pred: &str, gold: &str) -> f64 {
    let p = normalize(pred);
    f64::from(u8::from(
        matches!(p.as_str(), "yes" | "no") && p == normalize(gold),
    ))
}

/// Fraction of gold passages present in the collected evidence.
pub fn recall(collected: &[PassageRef], gold: &[PassageRef]) -> Result<f64, MetricError> {
    let gold: HashSet<&PassageRef> = gold.iter().collect();
    if gold.is_empty() {
        return Err(MetricError::EmptyGold);
    }
    let have: HashSet<&PassageRef> = collected.iter().collect();
    Ok(gold.iter().filter(|g| have.contains(*g)).count() as f64 / gold.len() as f64)
}

/// An LLM step output with its human feedback.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgedStep {
    pub module: Module,
    pub output: String,
    pub feedback: Feedback,
}

/// Whether the output stands under the feedback: right, or refined to itself.
pub fn step_correct(output: &str, f: &Feedback) -> bool {
    match f {
        Feedback::Right => true,
        Feedback::Wrong => false,
        Feedback::Refine(t) => t == output,
    }
}

/// Per-module share of steps whose output stands under human feedback.
pub fn module_accuracy(steps: &[JudgedStep]) -> BTreeMap<Module, f64> {
    let mut tally: BTreeMap<Module, (usize, usize)> = BTreeMap::new();
    for s in steps {
        let e = tally.entry(s.module).or_default();
        e.0 += usize::from(step_correct(&s.output, &s.feedback));
        e.1 += 1;
    }
    tally
        .into_iter()
        .map(|(m, (ok, n))| (m, ok as f64 / n as f64))
        .collect()
}

/// Share of steps where silver and gold feedback yield the same `(target, reward)`.
/// `outputs` holds each step's original output.
pub fn feedback_accuracy(
    outputs: &[String],
    silver: &[Feedback],
    gold: &[Feedback],
) -> Result<f64, MetricError> {
    if silver.len() != gold.len() || outputs.len() != gold.len() {
        return Err(MetricError::LengthMismatch {
            silver: silver.len(),
            gold: gold.len(),
        });
    }
    if gold.is_empty() {
        return Ok(1.0);
    }
    let agree = outputs
        .iter()
        .zip(silver.iter().zip(gold))
        .filter(|(y, (s, g))| convert(y, s) == convert(y, g))
        .count();
    Ok(agree as f64 / gold.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Em,
    F1,
    Acc,
    Recall,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Em, Metric::F1, Metric::Acc, Metric::Recall];

    /// Comma-separated list such as `em,f1,recall`.
    pub fn parse_list(s: &str) -> Result<Vec<Metric>, MetricError> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let m = match part.to_ascii_lowercase().as_str() {
                "em" => Metric::Em,
                "f1" => Metric::F1,
                "acc" => Metric::Acc,
                "recall" => Metric::Recall,
                _ => return Err(MetricError::UnknownMetric(part.to_string())),
            };
            if !out.contains(&m) {
                out.push(m);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionScore {
    pub question_id: String,
    pub ok: bool,
    pub scores: BTreeMap<Metric, f64>,
    pub steps: usize,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub questions: Vec<QuestionScore>,
    /// Means over scored questions.
    pub aggregate: BTreeMap<Metric, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub module_accuracy: BTreeMap<Module, f64>,
    pub mean_steps: f64,
    pub mean_tokens: f64,
    pub failed_runs: usize,
    /// Trajectories whose question has no gold annotation.
    pub unmatched: Vec<String>,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = self
            .aggregate
            .iter()
            .map(|(m, v)| (format!("{m:?}").to_lowercase(), format!("{v:.4}")))
            .collect();
        for (m, v) in &self.module_accuracy {
            rows.push((format!("acc[{m}]"), format!("{v:.4}")));
        }
        rows.push(("questions".into(), self.questions.len().to_string()));
        rows.push(("failed".into(), self.failed_runs.to_string()));
        rows.push(("steps/q".into(), format!("{:.2}", self.mean_steps)));
        rows.push(("tokens/q".into(), format!("{:.1}", self.mean_tokens)));
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v:>10}");
        }
        out
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Scores trajectories against gold. Failed runs score with their (empty)
/// answer and collected evidence. `judged` optionally supplies human-judged
/// steps for module accuracy.
pub fn evaluate(
    trajectories: &[Trajectory],
    gold: &GoldStore,
    metrics: &[Metric],
    judged: &[JudgedStep],
) -> Result<EvalReport, MetricError> {
    let scored = parallel::map(
        trajectories,
        |t| -> Result<Option<QuestionScore>, MetricError> {
            let Some(g) = gold.get(&t.question_id) else {
                return Ok(None);
            };
            let mut scores = BTreeMap::new();
            for m in metrics {
                let v = match m {
                    Metric::Em => em(&t.final_answer, &g.answer),
                    Metric::F1 => f1(&t.final_answer, &g.answer),
                    Metric::Acc => acc_yesno(&t.final_answer, &g.answer),
                    Metric::Recall => recall(&t.evidence, &g.evidence)?,
                };
                scores.insert(*m, v);
            }
            Ok(Some(QuestionScore {
                question_id: t.question_id.clone(),
                ok: t.is_ok(),
                scores,
                steps: t.stats.steps,
                tokens: t.stats.tokens,
            }))
        },
    );
    let mut questions = Vec::new();
    let mut unmatched = Vec::new();
    for (t, s) in trajectories.iter().zip(scored) {
        match s? {
            Some(q) => questions.push(q),
            None => unmatched.push(t.question_id.clone()),
        }
    }
    let aggregate = metrics
        .iter()
        .map(|m| (*m, mean(questions.iter().map(|q| q.scores[m]))))
        .collect();
    Ok(EvalReport {
        aggregate,
        module_accuracy: module_accuracy(judged),
        mean_steps: mean(questions.iter().map(|q| q.steps as f64)),
        mean_tokens: mean(questions.iter().map(|q| q.tokens as f64)),
        failed_runs: questions.iter().filter(|q| !q.ok).count(),
        questions,
        unmatched,
    })
}
