use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use fsmqa_core::prompt::{PromptMode, PromptTemplateSet};
use fsmqa_core::synth::{self, SynthConfig};
use fsmqa_core::{jsonl, AgentConfig};

const EPOCH: &str = "1700000000";

/// A synthetic corpus on disk with oracle-recorded fixtures matching the
/// built-in defaults.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(questions: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let corpus = synth::generate(&SynthConfig {
            questions,
            seed: 3,
            ..Default::default()
        });
        jsonl::write(&dir.path().join("kb.jsonl"), &corpus.kb.to_records()).unwrap();
        jsonl::write(&dir.path().join("questions.jsonl"), &corpus.questions).unwrap();
        jsonl::write(&dir.path().join("gold.jsonl"), &corpus.gold).unwrap();
        let config = AgentConfig {
            subquery_cap: 2,
            max_docs: 10,
            top_psg: 3,
            parse_retries: 1,
        };
        let fixtures = synth::oracle_fixtures(
            &corpus.kb,
            &corpus.gold,
            &corpus.questions,
            &PromptTemplateSet::hotpotqa(PromptMode::ZeroShot),
            config,
        );
        jsonl::write(&dir.path().join("fixtures.jsonl"), &fixtures).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn fsmqa(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_fsmqa"))
            .args(args)
            .current_dir(self.dir.path())
            .env("SOURCE_DATE_EPOCH", EPOCH)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.fsmqa(args);
        assert!(
            out.status.success(),
            "fsmqa {args:?} failed:\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn read(&self, name: &str) -> Vec<u8> {
        std::fs::read(self.path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
    }

    fn json(&self, name: &str) -> Value {
        serde_json::from_slice(&self.read(name)).unwrap()
    }
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const RUN: &[&str] = &[
    "run",
    "--kb",
    "kb.jsonl",
    "--questions",
    "questions.jsonl",
    "--backend",
    "scripted:fixtures.jsonl",
    "--max-subqueries",
    "2",
    "--out",
    "t.jsonl",
];

#[test]
fn run_repeats_byte_identically() {
    let fx = Fixture::new(12);
    let mut seen = Vec::new();
    for _ in 0..3 {
        fx.ok(RUN);
        seen.push((fx.read("t.jsonl"), fx.read("t.jsonl.manifest.json")));
    }
    assert!(seen.iter().all(|s| s == &seen[0]));

    let lines: Vec<Value> = String::from_utf8(seen[0].0.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 12);
    assert!(lines.iter().all(|t| t["status"] == "ok"));

    let m = fx.json("t.jsonl.manifest.json");
    assert_eq!(m["command"], "run");
    assert_eq!(m["config"]["agent"]["subquery_cap"], 2);
    assert_eq!(m["config"]["retriever"]["top_psg"], 3);
    assert_eq!(m["config"]["backend"], "scripted:fixtures.jsonl");
    assert_eq!(m["started_at"], 1_700_000_000u64);
    let inputs: Vec<&str> = m["inputs"].as_array().unwrap().iter().map(|i| i["path"].as_str().unwrap()).collect();
    assert_eq!(inputs, ["kb.jsonl", "questions.jsonl", "fixtures.jsonl"]);
    assert_eq!(m["outputs"][0]["path"], "t.jsonl");
}

#[test]
fn replay_reproduces_the_recorded_output() {
    let fx = Fixture::new(6);
    fx.ok(RUN);
    let first = fx.read("t.jsonl");
    std::fs::remove_file(fx.path("t.jsonl")).unwrap();
    fx.ok(&["replay", "t.jsonl.manifest.json"]);
    assert_eq!(fx.read("t.jsonl"), first);
}

#[test]
fn warmup_build_repeats_and_respects_quota() {
    let fx = Fixture::new(10);
    std::fs::write(
        fx.path("quota.json"),
        r#"{"Decompose": {"next": 5, "finish": 3}, "Judge": {"irrelevant": 4}}"#,
    )
    .unwrap();
    let args = [
        "warmup-build",
        "--gold",
        "gold.jsonl",
        "--kb",
        "kb.jsonl",
        "--quota",
        "quota.json",
        "--seed",
        "7",
        "--out",
        "ds.jsonl",
    ];
    let mut seen = Vec::new();
    for _ in 0..3 {
        fx.ok(&args);
        seen.push((
            fx.read("ds.jsonl"),
            fx.read("ds.jsonl.report.json"),
            fx.read("ds.jsonl.manifest.json"),
        ));
    }
    assert!(seen.iter().all(|s| s == &seen[0]));

    let report = fx.json("ds.jsonl.report.json");
    assert_eq!(report["build"]["questions"], 10);
    assert_eq!(report["sampled"], true);
    let cell = |m: &str, c: &str| {
        report["cells"]
            .as_array()
            .unwrap()
            .iter()
            .find(|x| x["module"] == m && x["class"] == c)
            .cloned()
            .unwrap()
    };
    assert_eq!(cell("Decompose", "next")["selected"], 5);
    assert_eq!(cell("Decompose", "finish")["selected"], 3);
    assert_eq!(cell("Judge", "irrelevant")["selected"], 4);
    assert_eq!(fx.json("ds.jsonl.manifest.json")["config"]["seed"], 7);

    fx.ok(&[
        "warmup-build", "--gold", "gold.jsonl", "--kb", "kb.jsonl", "--seed", "8", "--out", "ds8.jsonl",
    ]);
    let r8 = fx.json("ds8.jsonl.report.json");
    assert_eq!(r8["sampled"], false);
    assert_eq!(r8["examples_written"], r8["build"]["examples"]);
}

#[test]
fn adapt_repeats_byte_identically() {
    let fx = Fixture::new(8);
    let hook = fx.path("hook.sh");
    std::fs::write(&hook, "#!/bin/sh\necho \"$1 $2\" >> hook.log\n").unwrap();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(&hook, std::fs::Permissions::from_mode(0o755)).unwrap();
    }
    let hook_cmd = hook.display().to_string();
    let args = [
        "adapt",
        "--kb",
        "kb.jsonl",
        "--questions",
        "questions.jsonl",
        "--gold",
        "gold.jsonl",
        "--backend",
        "scripted:fixtures.jsonl",
        "--export-dir",
        "exp",
        "--exploration-steps",
        "4",
        "--iterations",
        "2",
        "--exploit-cmd",
        &hook_cmd,
    ];
    let files = [
        "exp/adapt-iter1.jsonl",
        "exp/adapt-iter2.jsonl",
        "exp/adapt-iter1.trajectories.jsonl",
        "exp/adapt-iter2.trajectories.jsonl",
        "exp/adapt.report.json",
        "exp/adapt.manifest.json",
    ];
    let mut seen = Vec::new();
    for _ in 0..3 {
        let _ = std::fs::remove_dir_all(fx.path("exp"));
        fx.ok(&args);
        seen.push(files.map(|f| fx.read(f)));
    }
    assert!(seen.iter().all(|s| s == &seen[0]));

    let report = fx.json("exp/adapt.report.json");
    assert_eq!(report[0]["question_ids"].as_array().unwrap().len(), 4);
    assert_eq!(report[1]["question_ids"][0], "q004");
    assert!(report[0]["labeled"].as_u64().unwrap() > 0);
    let log = String::from_utf8(fx.read("hook.log")).unwrap();
    let calls: Vec<&str> = log.lines().collect();
    assert_eq!(calls.len(), 6);
    assert_eq!(calls[..2], ["exp/adapt-iter1.jsonl 1", "exp/adapt-iter2.jsonl 2"]);
}

#[test]
fn failing_exploit_hook_stops_adaptation() {
    let fx = Fixture::new(3);
    let out = fx.fsmqa(&[
        "adapt", "--kb", "kb.jsonl", "--questions", "questions.jsonl", "--gold", "gold.jsonl", "--backend",
        "scripted:fixtures.jsonl", "--export-dir", "exp", "--exploit-cmd", "false",
    ]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.starts_with("fsmqa adapt:"), "{err}");
    assert!(err.contains("false"), "{err}");
}

#[test]
fn eval_reports_requested_metrics() {
    let fx = Fixture::new(10);
    fx.ok(RUN);
    fx.ok(&[
        "eval", "--trajectories", "t.jsonl", "--gold", "gold.jsonl", "--metric", "em,f1,recall", "--out", "r.json",
    ]);
    let r = fx.json("r.json");
    assert_eq!(r["aggregate"]["em"], 1.0);
    assert_eq!(r["aggregate"]["f1"], 1.0);
    let recall = r["aggregate"]["recall"].as_f64().unwrap();
    assert!(recall > 0.0 && recall <= 1.0);
    assert_eq!(r["questions"].as_array().unwrap().len(), 10);
    assert_eq!(fx.json("r.json.manifest.json")["command"], "eval");

    let stdout = fx.ok(&["eval", "--trajectories", "t.jsonl", "--gold", "gold.jsonl", "--metric", "em"]).stdout;
    let printed: Value = serde_json::from_slice(&stdout).unwrap();
    assert!(printed["aggregate"].get("f1").is_none());
}

#[test]
fn ingest_normalizes_and_rejects_bad_input() {
    let fx = Fixture::new(4);
    fx.ok(&["ingest", "--kb", "kb.jsonl", "--out", "kb2.jsonl"]);
    assert_eq!(fx.read("kb2.jsonl"), fx.read("kb.jsonl"));

    std::fs::write(fx.path("bad.jsonl"), "{\"doc_id\": \"a\", \"title\": \"A\", \"passages\": []}\n").unwrap();
    let out = fx.fsmqa(&["ingest", "--kb", "bad.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("fsmqa ingest: loading knowledge base bad.jsonl"), "{}", stderr(&out));
}

#[test]
fn flags_override_config_override_defaults() {
    let fx = Fixture::new(2);
    std::fs::write(
        fx.path("c.toml"),
        "seed = 9\n[agent]\nmax_docs = 4\ntop_psg = 2\n[prompts]\nstyle = \"pubmedqa\"\n",
    )
    .unwrap();
    fx.ok(&["ingest", "--kb", "kb.jsonl", "--out", "k.jsonl", "--config", "c.toml", "--top-psg", "1"]);
    let cfg = &fx.json("k.jsonl.manifest.json")["config"];
    assert_eq!(cfg["agent"]["max_docs"], 4);
    assert_eq!(cfg["agent"]["top_psg"], 1);
    assert_eq!(cfg["agent"]["subquery_cap"], 1);
    assert_eq!(cfg["agent"]["parse_retries"], 1);
    assert_eq!(cfg["seed"], 9);
    assert_eq!(cfg["prompt_style"], "pubmedqa");
}

#[test]
fn usage_and_stage_errors_exit_nonzero() {
    let fx = Fixture::new(1);
    let out = fx.fsmqa(&["run", "--kb", "kb.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--questions"));

    let out = fx.fsmqa(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    let out = fx.fsmqa(&["run", "--kb", "nope.jsonl", "--questions", "questions.jsonl", "--out", "t.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("fsmqa run: opening knowledge base nope.jsonl"), "{}", stderr(&out));

    let out = fx.fsmqa(&[
        "run", "--kb", "kb.jsonl", "--questions", "questions.jsonl", "--out", "t.jsonl", "--backend", "magic:x",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("unknown backend kind \"magic\""), "{}", stderr(&out));

    let out = fx.fsmqa(&["run", "--kb", "kb.jsonl", "--questions", "questions.jsonl", "--out", "t.jsonl"]);
    assert!(stderr(&out).contains("no backend configured"), "{}", stderr(&out));

    let out = fx.fsmqa(&["eval", "--trajectories", "kb.jsonl", "--gold", "gold.jsonl"]);
    assert!(stderr(&out).starts_with("fsmqa eval: loading trajectories kb.jsonl"), "{}", stderr(&out));

    let out = fx.fsmqa(&["eval", "--trajectories", "kb.jsonl", "--gold", "gold.jsonl", "--metric", "bleu"]);
    assert!(stderr(&out).contains("parsing --metric"), "{}", stderr(&out));
}

#[test]
fn oracle_backend_matches_recorded_fixtures() {
    let fx = Fixture::new(5);
    fx.ok(RUN);
    fx.ok(&[
        "run", "--kb", "kb.jsonl", "--questions", "questions.jsonl", "--backend", "oracle:gold.jsonl", "--out",
        "o.jsonl",
    ]);
    assert_eq!(fx.read("o.jsonl"), fx.read("t.jsonl"));
}

#[test]
fn human_mode_exports_only_finalized_trajectories() {
    use fsmqa_core::feedback::{FeedbackStore, Verdict};

    let fx = Fixture::new(3);
    let args = [
        "adapt", "--kb", "kb.jsonl", "--questions", "questions.jsonl", "--backend", "scripted:fixtures.jsonl",
        "--export-dir", "exp", "--feedback-mode", "human", "--store", "queue",
    ];
    fx.ok(&args);
    let report = fx.json("exp/adapt.report.json");
    assert_eq!(report[0]["pending"], 3);
    assert_eq!(report[0]["labeled"], 0);
    assert!(fx.read("exp/adapt-iter1.jsonl").is_empty());

    let store = FeedbackStore::open(&fx.path("queue")).unwrap();
    let entry = store.get("q000@iter1").unwrap();
    let steps: Vec<usize> = entry.trajectory.llm_steps().map(|(k, _)| k).collect();
    for &k in &steps {
        store.submit("q000@iter1", k, Verdict::Right, None).unwrap();
    }
    store.finalize("q000@iter1").unwrap();
    drop(store);

    fx.ok(&args);
    let report = fx.json("exp/adapt.report.json");
    assert_eq!(report[0]["pending"], 2);
    assert_eq!(report[0]["labeled"], steps.len());
    let export = String::from_utf8(fx.read("exp/adapt-iter1.jsonl")).unwrap();
    assert_eq!(export.lines().count(), steps.len());
    assert!(export.lines().all(|l| l.contains("\"trajectory_id\":\"q000@iter1\"")));

    let out = fx.fsmqa(&[
        "adapt", "--kb", "kb.jsonl", "--questions", "questions.jsonl", "--backend", "scripted:fixtures.jsonl",
        "--export-dir", "exp", "--feedback-mode", "human",
    ]);
    assert!(stderr(&out).contains("--store is required"), "{}", stderr(&out));
}
