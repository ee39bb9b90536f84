use std::collections::HashMap;

use proptest::prelude::*;

use fsmqa_core::agent::validate_trajectory;
use fsmqa_core::backend::FnBackend;
use fsmqa_core::feedback::{convert, Feedback, GoldAnnotation, LabeledStep, SubQa};
use fsmqa_core::fsm::AgentContext;
use fsmqa_core::kb::DocRecord;
use fsmqa_core::metrics::{em, f1, feedback_accuracy, module_accuracy, recall, JudgedStep};
use fsmqa_core::prompt::{build_prompt, PromptMode, PromptTemplateSet};
use fsmqa_core::warmup::{
    kto_objective, lm_loss, AnnotatedQuestion, ModuleWeights, TrainingExample, WarmupBuilder,
};
use fsmqa_core::{Agent, AgentConfig, KnowledgeBase, Module, Passage, PassageRef};

const LLM: [Module; 4] = [
    Module::Decompose,
    Module::Judge,
    Module::Answer,
    Module::Complete,
];

fn words() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop::sample::select(vec!["the", "a", "Paris", "river", "blue,", "x", "42", "Of"]),
        0..6,
    )
    .prop_map(|w| w.join(" "))
}

fn module() -> impl Strategy<Value = Module> {
    prop::sample::select(LLM.to_vec())
}

fn feedback() -> impl Strategy<Value = Feedback> {
    prop_oneof![
        Just(Feedback::Right),
        Just(Feedback::Wrong),
        "[a-z ]{1,6}".prop_map(Feedback::Refine),
    ]
}

fn refs() -> impl Strategy<Value = Vec<PassageRef>> {
    prop::collection::vec((0..4usize, 0..3usize), 0..8).prop_map(|v| {
        v.into_iter()
            .map(|(d, i)| PassageRef::new(format!("d{d}"), i))
            .collect()
    })
}

fn small_kb() -> KnowledgeBase {
    let records: Vec<DocRecord> = (0..4)
        .map(|d| DocRecord {
            doc_id: format!("d{d}"),
            title: format!("Doc {d}"),
            passages: (0..3)
                .map(|i| format!("passage {i} of doc {d} about river {}", d * i))
                .collect(),
        })
        .collect();
    KnowledgeBase::from_records(records).unwrap()
}

fn labeled(modules: &[Module], rewards: &[u8]) -> Vec<LabeledStep> {
    modules
        .iter()
        .zip(rewards)
        .map(|(m, r)| LabeledStep {
            module: *m,
            input_render: String::new(),
            target: String::new(),
            reward: *r,
            trajectory_id: None,
            step: None,
        })
        .collect()
}

fn by_index(v: &[f64]) -> HashMap<usize, f64> {
    v.iter().copied().enumerate().collect()
}

proptest! {
    #[test]
    fn f1_of_self_is_one(s in words()) {
        prop_assert_eq!(f1(&s, &s), 1.0);
    }

    #[test]
    fn exact_match_implies_full_f1(a in words(), b in words()) {
        if em(&a, &b) == 1.0 {
            prop_assert_eq!(f1(&a, &b), 1.0);
        }
        prop_assert!((0.0..=1.0).contains(&f1(&a, &b)));
    }

    #[test]
    fn f1_is_symmetric(a in words(), b in words()) {
        prop_assert!((f1(&a, &b) - f1(&b, &a)).abs() < 1e-12);
    }

    #[test]
    fn recall_grows_with_collection(mut got in refs(), extra in refs(), gold in refs()) {
        prop_assume!(!gold.is_empty());
        let before = recall(&got, &gold).unwrap();
        got.extend(extra);
        prop_assert!(recall(&got, &gold).unwrap() >= before);
        prop_assert!(recall(&got, &gold).unwrap() <= 1.0);
        prop_assert_eq!(recall(&gold, &gold).unwrap(), 1.0);
    }

    #[test]
    fn accuracies_ignore_step_order(
        steps in prop::collection::vec((module(), "[a-z ]{0,6}", feedback()), 1..20),
        silver in prop::collection::vec(feedback(), 20),
        seed in any::<u64>(),
    ) {
        let judged: Vec<_> = steps
            .iter()
            .map(|(m, o, f)| JudgedStep { module: *m, output: o.clone(), feedback: f.clone() })
            .collect();
        let mut order: Vec<usize> = (0..judged.len()).collect();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let shuffled: Vec<_> = order.iter().map(|&i| judged[i].clone()).collect();
        prop_assert_eq!(module_accuracy(&judged), module_accuracy(&shuffled));

        let outputs: Vec<String> = judged.iter().map(|j| j.output.clone()).collect();
        let gold: Vec<Feedback> = judged.iter().map(|j| j.feedback.clone()).collect();
        let silver = &silver[..gold.len()];
        let pick = |v: &[String]| order.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
        let pickf = |v: &[Feedback]| order.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
        let a = feedback_accuracy(&outputs, silver, &gold).unwrap();
        let b = feedback_accuracy(&pick(&outputs), &pickf(silver), &pickf(&gold)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn convert_rewards_zero_only_for_wrong(y in "[a-z ]{0,8}", f in feedback()) {
        let (target, o) = convert(&y, &f);
        prop_assert_eq!(o == 0, f == Feedback::Wrong);
        match &f {
            Feedback::Refine(t) => prop_assert_eq!(&target, t),
            _ => prop_assert_eq!(&target, &y),
        }
    }

    #[test]
    fn objectives_are_permutation_invariant(
        rows in prop::collection::vec((module(), 0u8..=1, -5.0f64..0.0, -5.0f64..0.0), 1..30),
        beta in 0.0f64..2.0,
        rot in 0usize..30,
    ) {
        let weights = ModuleWeights::default().with(Module::Judge, 0.5).with(Module::Answer, 2.0);
        let split = |rows: &[(Module, u8, f64, f64)]| {
            let ms: Vec<_> = rows.iter().map(|r| r.0).collect();
            let os: Vec<_> = rows.iter().map(|r| r.1).collect();
            (labeled(&ms, &os), by_index(&rows.iter().map(|r| r.2).collect::<Vec<_>>()), by_index(&rows.iter().map(|r| r.3).collect::<Vec<_>>()))
        };
        let mut rotated = rows.clone();
        rotated.rotate_left(rot % rows.len());
        let (b1, pi1, ref1) = split(&rows);
        let (b2, pi2, ref2) = split(&rotated);
        let k1 = kto_objective(&b1, &pi1, &ref1, beta, &weights).unwrap();
        let k2 = kto_objective(&b2, &pi2, &ref2, beta, &weights).unwrap();
        prop_assert!((k1 - k2).abs() < 1e-9);

        let ex = |rows: &[(Module, u8, f64, f64)]| -> Vec<TrainingExample> {
            rows.iter()
                .map(|r| TrainingExample { module: r.0, input_render: String::new(), target: String::new(), reward: 1, weight: 1.0 })
                .collect()
        };
        let l1 = lm_loss(&ex(&rows), &pi1, &weights).unwrap();
        let l2 = lm_loss(&ex(&rotated), &pi2, &weights).unwrap();
        prop_assert!((l1 - l2).abs() < 1e-9);
    }

    #[test]
    fn lm_loss_is_linear_in_logprobs(
        lps in prop::collection::vec(-5.0f64..0.0, 1..20),
        c in 0.1f64..4.0,
    ) {
        let batch: Vec<_> = lps
            .iter()
            .map(|_| TrainingExample { module: Module::Decompose, input_render: String::new(), target: String::new(), reward: 1, weight: 1.0 })
            .collect();
        let w = ModuleWeights::default();
        let base = lm_loss(&batch, &by_index(&lps), &w).unwrap();
        let scaled: Vec<f64> = lps.iter().map(|x| x * c).collect();
        prop_assert!((lm_loss(&batch, &by_index(&scaled), &w).unwrap() - c * base).abs() < 1e-9);
        let mean = lps.iter().sum::<f64>() / lps.len() as f64;
        prop_assert!((base + mean).abs() < 1e-9);
    }

    #[test]
    fn decompose_examples_are_hops_plus_one(hops in 1usize..4, seed in any::<u64>()) {
        let kb = small_kb();
        let gold = GoldAnnotation {
            question_id: "q".into(),
            question: "How are these linked?".into(),
            answer: "somehow".into(),
            sub_queries: (0..hops).map(|j| SubQa { q: format!("What is river {j}?"), a: format!("r{j}") }).collect(),
            evidence: (0..hops).map(|j| PassageRef::new(format!("d{j}"), j % 3)).collect(),
        };
        let tpl = PromptTemplateSet::hotpotqa(PromptMode::ZeroShot);
        let aq = AnnotatedQuestion::new(gold, &kb).unwrap();
        let ex = WarmupBuilder::new(&kb, &tpl, seed).build_decompose(&aq).unwrap();
        prop_assert_eq!(ex.len(), hops + 1);
        prop_assert_eq!(ex.last().unwrap().target.as_str(), "[Finish]");
    }

    #[test]
    fn prompts_depend_only_on_context(
        question in "[A-Za-z ?]{1,30}",
        history in prop::collection::vec(("[a-z ]{1,10}", "[a-z]{1,5}"), 0..3),
        sub in "[a-z ]{1,12}",
        module in module(),
    ) {
        let kb = small_kb();
        let p: Passage = kb.passage(&PassageRef::new("d1", 1)).unwrap().clone();
        let ctx = AgentContext {
            question,
            history,
            evidence: vec![p.clone()],
            sub_query: Some(sub),
            seen: vec![p.clone()],
            snippet: Some(p.clone()),
            passages: Some(vec![p]),
            ..Default::default()
        };
        let tpl = PromptTemplateSet::hotpotqa(PromptMode::FewShot);
        let a = build_prompt(module, &ctx, &tpl).unwrap();
        let b = build_prompt(module, &ctx.clone(), &tpl.clone()).unwrap();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn random_outputs_always_terminate_within_bounds(
        outputs in prop::collection::vec(prop::sample::select(vec![
            "[Next] river",
            "[Next] passage of doc",
            "[Finish]",
            "[Relevant]",
            "[Irrelevant]",
            "[Answerable] Answer: x; Relevant Passage ID: [1]",
            "[Answerable] Answer: y; Relevant Passage ID: [9]",
            "[Unanswerable]",
            "garbage",
            "yes",
        ]), 1..40),
        cap in 1usize..4,
        max_docs in 1usize..4,
    ) {
        let kb = small_kb();
        let tpl = PromptTemplateSet::hotpotqa(PromptMode::ZeroShot);
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let backend = FnBackend(|_: Module, _: &str| {
            let i = calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            Ok(outputs[i % outputs.len()].to_string())
        });
        let config = AgentConfig { subquery_cap: cap, max_docs, ..Default::default() };
        let agent = Agent::new(&kb, &backend, &tpl, config);
        let t = agent.run("q", "Which river?");
        prop_assert!(t.steps.len() <= config.step_bound());
        let llm_steps = t.steps.iter().filter(|s| s.is_llm()).count();
        prop_assert!(llm_steps <= config.llm_call_bound());
        let attempts: usize = t.steps.iter().filter(|s| s.is_llm()).map(|s| s.attempts).sum();
        let failed_attempts = if t.is_ok() { 0 } else { 1 + config.parse_retries };
        prop_assert_eq!(calls.load(std::sync::atomic::Ordering::Relaxed), attempts + failed_attempts);
        if t.is_ok() {
            prop_assert!(validate_trajectory(&t, Some(&tpl)).is_ok());
        }
    }
}
