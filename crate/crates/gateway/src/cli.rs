//! Command-line entry points for every pipeline stage.

use std::collections::HashSet;
use std::fs::File;
use std::io::BufReader;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fsmqa_core::adapt::{
    Adaptation, AdaptationConfig, CommandHook, ExploitHook, FeedbackMode, IterationReport,
    NoopHook, Question,
};
use fsmqa_core::backend::{HttpBackend, HttpConfig, LlmBackend, ScriptedBackend};
use fsmqa_core::feedback::{FeedbackStore, GoldAnnotation, GoldStore, QueueStatus};
use fsmqa_core::metrics::{evaluate, JudgedStep, Metric};
use fsmqa_core::prompt::{PromptMode, PromptTemplateSet};
use fsmqa_core::synth::OracleBackend;
use fsmqa_core::warmup::{
    sample_balanced, AnnotatedQuestion, BuildReport, CellReport, QuotaConfig, WarmupBuilder,
};
use fsmqa_core::{jsonl, parallel, Agent, KnowledgeBase, Retriever, Trajectory};

use crate::config::Settings;
use crate::manifest::{self, ConfigSnapshot, FileRef, RetrieverSnapshot, RunManifest};

#[derive(Debug, Parser)]
#[command(
    name = "fsmqa",
    version,
    about = "State-machine QA agent: runs, warm-up data, adaptation, evaluation, feedback service"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML file overriding the built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub max_subqueries: Option<usize>,
    #[arg(long, global = true)]
    pub max_docs: Option<usize>,
    #[arg(long, global = true)]
    pub top_psg: Option<usize>,
    /// `scripted:<fixtures.jsonl>`, `http:<config.json>` or `oracle:<gold.jsonl>`.
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// Built-in prompt style: hotpotqa, pubmedqa or qasper.
    #[arg(long, global = true)]
    pub style: Option<String>,
    #[arg(long, global = true, value_enum)]
    pub prompt_mode: Option<ModeArg>,
    /// Directory of prompt template files.
    #[arg(long, global = true)]
    pub templates: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    FewShot,
    ZeroShot,
}

impl From<ModeArg> for PromptMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::FewShot => PromptMode::FewShot,
            ModeArg::ZeroShot => PromptMode::ZeroShot,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a knowledge base and write it back normalized.
    Ingest {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Answer a question stream and write one trajectory per question.
    Run {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build warm-up training examples from gold annotations.
    WarmupBuild {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        /// Per (module, class) target counts, JSON.
        #[arg(long)]
        quota: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Explore, collect feedback and export labeled steps, per iteration.
    Adapt {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        questions: PathBuf,
        /// Required for the silver feedback modes.
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        export_dir: PathBuf,
        /// Questions per iteration; defaults to the whole pool.
        #[arg(long)]
        exploration_steps: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        feedback_mode: Option<FeedbackMode>,
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        same_questions: Option<bool>,
        /// Program run after each export with the export path and iteration.
        #[arg(long)]
        exploit_cmd: Option<String>,
        /// Feedback store directory, for human mode.
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Score trajectories against gold annotations.
    Eval {
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, default_value = "em,f1,recall")]
        metric: String,
        /// Feedback store whose finalized judgments give module accuracy.
        #[arg(long)]
        feedback_store: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the feedback queue over HTTP.
    Serve {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        addr: Option<String>,
        /// Environment variable holding the shared API token.
        #[arg(long)]
        token_env: Option<String>,
        /// Trajectory files to enqueue before serving.
        #[arg(long)]
        enqueue: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        iteration: usize,
    },
    /// Re-run the command recorded in a manifest.
    Replay { manifest: PathBuf },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Run { .. } => "run",
            Command::WarmupBuild { .. } => "warmup-build",
            Command::Adapt { .. } => "adapt",
            Command::Eval { .. } => "eval",
            Command::Serve { .. } => "serve",
            Command::Replay { .. } => "replay",
        }
    }
}

impl Common {
    pub fn settings(&self) -> Result<Settings> {
        let mut s = Settings::load(self.config.as_deref())?;
        if let Some(v) = self.seed {
            s.seed = v;
        }
        if let Some(v) = self.max_subqueries {
            s.agent.max_subqueries = Some(v);
        }
        if let Some(v) = self.max_docs {
            s.agent.max_docs = v;
        }
        if let Some(v) = self.top_psg {
            s.agent.top_psg = v;
        }
        if let Some(v) = &self.backend {
            s.backend = Some(v.clone());
        }
        if let Some(v) = &self.style {
            s.prompts.style = v.clone();
        }
        if let Some(v) = self.prompt_mode {
            s.prompts.mode = v.into();
        }
        if let Some(v) = &self.templates {
            s.prompts.templates = Some(v.clone());
        }
        Ok(s)
    }
}

/// Everything a command needs from the merged settings, plus manifest bookkeeping.
struct Ctx {
    settings: Settings,
    args: Vec<String>,
    command: &'static str,
    started_at: u64,
}

impl Ctx {
    fn templates(&self) -> Result<PromptTemplateSet> {
        let p = &self.settings.prompts;
        match &p.templates {
            Some(dir) => PromptTemplateSet::from_dir(Path::new(dir), p.mode)
                .with_context(|| format!("loading templates from {dir}")),
            None => {
                PromptTemplateSet::builtin(&p.style, p.mode).context("loading built-in templates")
            }
        }
    }

    fn backend(&self, kb: &KnowledgeBase) -> Result<Arc<dyn LlmBackend>> {
        let choice = self.settings.backend.as_deref().context(
            "no backend configured; pass --backend scripted:<file>, http:<file> or oracle:<gold>",
        )?;
        load_backend(choice, kb, self.settings.decoding.temperature)
    }

    fn manifest(&self, inputs: &[&Path], outputs: &[&Path]) -> Result<RunManifest> {
        let agent = self.settings.agent_config()?;
        Ok(RunManifest {
            tool: "fsmqa".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.into(),
            args: self.args.clone(),
            config: ConfigSnapshot {
                agent,
                retriever: RetrieverSnapshot {
                    scorer: "lexical".into(),
                    max_docs: agent.max_docs,
                    top_psg: agent.top_psg,
                },
                backend: self.settings.backend.clone(),
                seed: self.settings.seed,
                prompt_style: self.settings.prompts.style.clone(),
                prompt_mode: self.settings.prompts.mode,
                templates: self.settings.prompts.templates.clone(),
                settings: serde_json::to_value(&self.settings).expect("serializable"),
            },
            inputs: inputs
                .iter()
                .map(|p| FileRef::of(p))
                .collect::<Result<_>>()?,
            outputs: outputs
                .iter()
                .map(|p| FileRef::of(p))
                .collect::<Result<_>>()?,
            started_at: self.started_at,
            finished_at: manifest::now(),
        })
    }
}

pub fn load_backend(
    choice: &str,
    kb: &KnowledgeBase,
    temperature: f64,
) -> Result<Arc<dyn LlmBackend>> {
    let (kind, path) = choice
        .split_once(':')
        .with_context(|| format!("backend {choice:?} is not of the form <kind>:<path>"))?;
    let path = Path::new(path);
    match kind {
        "scripted" => {
            let file =
                File::open(path).with_context(|| format!("opening fixtures {}", path.display()))?;
            let b = ScriptedBackend::from_jsonl(BufReader::new(file))
                .with_context(|| format!("reading fixtures {}", path.display()))?;
            Ok(Arc::new(b))
        }
        "http" => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let raw: serde_json::Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            let pinned = raw.get("temperature").is_some();
            let mut cfg: HttpConfig = serde_json::from_value(raw)
                .with_context(|| format!("invalid HTTP backend config {}", path.display()))?;
            if !pinned {
                cfg.temperature = temperature;
            }
            Ok(Arc::new(HttpBackend::new(cfg)))
        }
        "oracle" => {
            let gold = GoldStore::load(path)
                .with_context(|| format!("loading gold {}", path.display()))?;
            let golds: Vec<_> = gold.iter().cloned().collect();
            for g in &golds {
                g.check_against(kb)?;
            }
            Ok(Arc::new(OracleBackend::new(kb, &golds)))
        }
        other => bail!("unknown backend kind {other:?}; expected scripted, http or oracle"),
    }
}

fn load_kb(path: &Path) -> Result<KnowledgeBase> {
    let file =
        File::open(path).with_context(|| format!("opening knowledge base {}", path.display()))?;
    KnowledgeBase::ingest(BufReader::new(file))
        .with_context(|| format!("loading knowledge base {}", path.display()))
}

fn load_questions(path: &Path) -> Result<Vec<Question>> {
    let qs: Vec<Question> =
        jsonl::read(path).with_context(|| format!("loading questions {}", path.display()))?;
    let mut seen = HashSet::new();
    for q in &qs {
        if !seen.insert(q.question_id.as_str()) {
            bail!(
                "duplicate question_id {:?} in {}",
                q.question_id,
                path.display()
            );
        }
    }
    Ok(qs)
}

fn load_gold(path: &Path) -> Result<GoldStore> {
    GoldStore::load(path).with_context(|| format!("loading gold {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Serialize)]
struct WarmupReport<'a> {
    build: &'a BuildReport,
    examples_written: usize,
    sampled: bool,
    cells: &'a [CellReport],
}

/// Parses `args` (without the program name) and runs the command.
pub fn run(args: Vec<String>) -> Result<()> {
    let cli =
        Cli::try_parse_from(std::iter::once("fsmqa".to_string()).chain(args.iter().cloned()))?;
    execute(cli, args)
}

pub fn execute(cli: Cli, args: Vec<String>) -> Result<()> {
    if let Command::Replay { manifest } = &cli.command {
        let m = RunManifest::read(manifest)?;
        if m.args.first().map(String::as_str) == Some("replay") {
            bail!("manifest {} records a replay", manifest.display());
        }
        return run(m.args);
    }
    let settings = cli.common.settings().context("loading settings")?;
    let ctx = Ctx {
        settings,
        args,
        command: cli.command.name(),
        started_at: manifest::now(),
    };
    match cli.command {
        Command::Ingest { kb, out } => ingest(&ctx, &kb, out.as_deref()),
        Command::Run { kb, questions, out } => run_questions(&ctx, &kb, &questions, &out),
        Command::WarmupBuild {
            gold,
            kb,
            quota,
            out,
            report,
        } => warmup_build(&ctx, &gold, &kb, quota.as_deref(), &out, report),
        Command::Adapt {
            kb,
            questions,
            gold,
            export_dir,
            exploration_steps,
            iterations,
            feedback_mode,
            same_questions,
            exploit_cmd,
            store,
        } => {
            let a = &ctx.settings.adapt;
            let opts = AdaptOpts {
                exploration_steps,
                iterations: iterations.unwrap_or(a.iterations),
                feedback_mode: feedback_mode.unwrap_or(a.feedback_mode),
                same_questions: same_questions.unwrap_or(a.same_questions),
                exploit_cmd,
                store,
            };
            adapt(&ctx, &kb, &questions, gold.as_deref(), &export_dir, opts)
        }
        Command::Eval {
            trajectories,
            gold,
            metric,
            feedback_store,
            out,
        } => eval(
            &ctx,
            &trajectories,
            &gold,
            &metric,
            feedback_store.as_deref(),
            out.as_deref(),
        ),
        Command::Serve {
            store,
            addr,
            token_env,
            enqueue,
            iteration,
        } => serve(&ctx, &store, addr, token_env, &enqueue, iteration),
        Command::Replay { .. } => unreachable!("handled above"),
    }
}

fn ingest(ctx: &Ctx, kb_path: &Path, out: Option<&Path>) -> Result<()> {
    let kb = load_kb(kb_path)?;
    eprintln!(
        "{}: {} documents, {} passages",
        kb_path.display(),
        kb.num_documents(),
        kb.num_passages()
    );
    if let Some(out) = out {
        jsonl::write(out, &kb.to_records())
            .with_context(|| format!("writing {}", out.display()))?;
        ctx.manifest(&[kb_path], &[out])?
            .write(&manifest::sidecar(out))?;
    }
    Ok(())
}

fn run_questions(ctx: &Ctx, kb_path: &Path, questions_path: &Path, out: &Path) -> Result<()> {
    let kb = load_kb(kb_path)?;
    let questions = load_questions(questions_path)?;
    let templates = ctx.templates()?;
    let backend = ctx.backend(&kb)?;
    let agent = Agent::new(
        &kb,
        backend.as_ref(),
        &templates,
        ctx.settings.agent_config()?,
    );
    let runs: Vec<Trajectory> =
        parallel::map(&questions, |q| agent.run(&q.question_id, &q.question));
    jsonl::write(out, &runs).with_context(|| format!("writing trajectories {}", out.display()))?;
    let failed = runs.iter().filter(|t| !t.is_ok()).count();
    eprintln!(
        "{} trajectories ({failed} failed) -> {}",
        runs.len(),
        out.display()
    );
    let mut inputs = vec![kb_path, questions_path];
    let fixture = backend_file(&ctx.settings);
    if let Some(p) = &fixture {
        inputs.push(p);
    }
    ctx.manifest(&inputs, &[out])?
        .write(&manifest::sidecar(out))
}

/// The file a backend choice points at, for manifest hashing.
fn backend_file(s: &Settings) -> Option<PathBuf> {
    s.backend
        .as_deref()
        .and_then(|b| b.split_once(':'))
        .map(|(_, p)| PathBuf::from(p))
        .filter(|p| p.is_file())
}

fn warmup_build(
    ctx: &Ctx,
    gold_path: &Path,
    kb_path: &Path,
    quota_path: Option<&Path>,
    out: &Path,
    report: Option<PathBuf>,
) -> Result<()> {
    let kb = load_kb(kb_path)?;
    let gold: Vec<GoldAnnotation> =
        jsonl::read(gold_path).with_context(|| format!("loading gold {}", gold_path.display()))?;
    let annotated = gold
        .into_iter()
        .map(|g| AnnotatedQuestion::new(g, &kb))
        .collect::<Result<Vec<_>, _>>()
        .context("checking gold annotations against the knowledge base")?;
    let templates = ctx.templates()?;
    let agent = ctx.settings.agent_config()?;
    let mut builder = WarmupBuilder::new(&kb, &templates, ctx.settings.seed);
    builder.retriever = Retriever::lexical(agent.max_docs, agent.top_psg);
    builder.weights = ctx.settings.module_weights();
    let (examples, build) = builder.build_all(&annotated).context("building examples")?;

    let (written, cells, sampled) = match quota_path {
        Some(q) => {
            let text = std::fs::read_to_string(q)
                .with_context(|| format!("reading quota {}", q.display()))?;
            let quota = QuotaConfig::from_json(&text)
                .with_context(|| format!("parsing quota {}", q.display()))?;
            let ds = sample_balanced(&examples, &quota, ctx.settings.seed);
            (ds.examples, ds.cells, true)
        }
        None => (examples, Vec::new(), false),
    };
    jsonl::write(out, &written).with_context(|| format!("writing dataset {}", out.display()))?;
    let report = report.unwrap_or_else(|| with_suffix(out, ".report.json"));
    write_json(
        &report,
        &WarmupReport {
            build: &build,
            examples_written: written.len(),
            sampled,
            cells: &cells,
        },
    )?;
    eprintln!(
        "{} questions, {} examples built, {} written -> {}",
        build.questions,
        build.examples,
        written.len(),
        out.display()
    );
    let mut inputs = vec![gold_path, kb_path];
    inputs.extend(quota_path);
    ctx.manifest(&inputs, &[out, &report])?
        .write(&manifest::sidecar(out))
}

struct AdaptOpts {
    exploration_steps: Option<usize>,
    iterations: usize,
    feedback_mode: FeedbackMode,
    same_questions: bool,
    exploit_cmd: Option<String>,
    store: Option<PathBuf>,
}

fn adapt(
    ctx: &Ctx,
    kb_path: &Path,
    questions_path: &Path,
    gold_path: Option<&Path>,
    export_dir: &Path,
    opts: AdaptOpts,
) -> Result<()> {
    let kb = load_kb(kb_path)?;
    let questions = load_questions(questions_path)?;
    let gold = match (gold_path, opts.feedback_mode) {
        (Some(p), _) => load_gold(p)?,
        (None, FeedbackMode::Human) => GoldStore::new(Vec::new()),
        (None, mode) => bail!("--gold is required for feedback mode {mode:?}"),
    };
    let store = match (&opts.store, opts.feedback_mode) {
        (Some(dir), _) => Some(
            FeedbackStore::open(dir)
                .with_context(|| format!("opening feedback store {}", dir.display()))?,
        ),
        (None, FeedbackMode::Human) => bail!("--store is required for human feedback"),
        (None, _) => None,
    };
    let templates = ctx.templates()?;
    let backend = ctx.backend(&kb)?;
    std::fs::create_dir_all(export_dir)
        .with_context(|| format!("creating {}", export_dir.display()))?;
    let adaptation = Adaptation {
        config: AdaptationConfig {
            exploration_steps: opts.exploration_steps.unwrap_or(questions.len()),
            iterations: opts.iterations,
            feedback_mode: opts.feedback_mode,
            export_dir: export_dir.to_path_buf(),
            same_questions: opts.same_questions,
        },
        agent_config: ctx.settings.agent_config()?,
        kb: &kb,
        templates: &templates,
        gold: &gold,
        store: store.as_ref(),
    };
    let mut hook: Box<dyn ExploitHook> = match &opts.exploit_cmd {
        Some(cmd) => {
            let mut parts = cmd.split_whitespace().map(String::from);
            let program = parts.next().context("--exploit-cmd is empty")?;
            Box::new(CommandHook {
                program,
                args: parts.collect(),
            })
        }
        None => Box::new(NoopHook),
    };
    let reports: Vec<IterationReport> = adaptation
        .run(&questions, backend, hook.as_mut())
        .context("adaptation loop")?;
    for r in &reports {
        eprintln!(
            "iteration {}: {} trajectories, {} failed, {} pending, {} labeled steps -> {}",
            r.iteration,
            r.trajectories,
            r.failed,
            r.pending,
            r.labeled,
            r.export.display()
        );
    }
    let report_path = export_dir.join("adapt.report.json");
    write_json(&report_path, &reports)?;
    let mut outputs: Vec<&Path> = Vec::new();
    for r in &reports {
        outputs.push(&r.export);
        outputs.push(&r.trajectory_file);
    }
    outputs.push(&report_path);
    let mut inputs = vec![kb_path, questions_path];
    inputs.extend(gold_path);
    ctx.manifest(&inputs, &outputs)?
        .write(&export_dir.join("adapt.manifest.json"))
}

fn judged_steps(store: &FeedbackStore, ids: &HashSet<&str>) -> Result<Vec<JudgedStep>> {
    let mut out = Vec::new();
    for summary in store.list(Some(QueueStatus::Finalized)) {
        if !ids.contains(summary.trajectory_id.as_str()) {
            continue;
        }
        let entry = store.get(&summary.trajectory_id)?;
        for (k, step) in entry.trajectory.llm_steps() {
            if let Some(f) = entry.feedback.get(&k) {
                out.push(JudgedStep {
                    module: step.module,
                    output: step.output.raw.clone(),
                    feedback: f.clone(),
                });
            }
        }
    }
    Ok(out)
}

fn eval(
    ctx: &Ctx,
    traj_path: &Path,
    gold_path: &Path,
    metric: &str,
    feedback_store: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let metrics = Metric::parse_list(metric).context("parsing --metric")?;
    let trajectories: Vec<Trajectory> = jsonl::read(traj_path)
        .with_context(|| format!("loading trajectories {}", traj_path.display()))?;
    let gold = load_gold(gold_path)?;
    let judged = match feedback_store {
        Some(dir) => {
            let store = FeedbackStore::open(dir)
                .with_context(|| format!("opening feedback store {}", dir.display()))?;
            let ids = trajectories
                .iter()
                .map(|t| t.trajectory_id.as_str())
                .collect();
            judged_steps(&store, &ids)?
        }
        None => Vec::new(),
    };
    let report = evaluate(&trajectories, &gold, &metrics, &judged).context("scoring")?;
    eprint!("{}", report.to_table());
    match out {
        Some(path) => {
            write_json(path, &report)?;
            let log = feedback_store.map(|d| d.join("queue.jsonl"));
            let mut inputs = vec![traj_path, gold_path];
            inputs.extend(log.as_deref());
            ctx.manifest(&inputs, &[path])?
                .write(&manifest::sidecar(path))
        }
        None => {
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("serializable")
            );
            Ok(())
        }
    }
}

fn serve(
    ctx: &Ctx,
    store_dir: &Path,
    addr: Option<String>,
    token_env: Option<String>,
    enqueue: &[PathBuf],
    iteration: usize,
) -> Result<()> {
    let store = FeedbackStore::open(store_dir)
        .with_context(|| format!("opening feedback store {}", store_dir.display()))?;
    for path in enqueue {
        let ts: Vec<Trajectory> = jsonl::read(path)
            .with_context(|| format!("loading trajectories {}", path.display()))?;
        let mut added = 0;
        for t in ts.into_iter().filter(Trajectory::is_ok) {
            if store.get(&t.trajectory_id).is_ok() {
                continue;
            }
            store.enqueue(t, iteration)?;
            added += 1;
        }
        eprintln!("enqueued {added} trajectories from {}", path.display());
    }
    let addr: SocketAddr = addr
        .unwrap_or_else(|| ctx.settings.serve.addr.clone())
        .parse()
        .context("parsing --addr")?;
    let token_var = token_env.unwrap_or_else(|| ctx.settings.serve.token_env.clone());
    let token = std::env::var(&token_var).ok().filter(|t| !t.is_empty());
    let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        eprintln!(
            "serving {} on http://{} ({})",
            store_dir.display(),
            listener.local_addr()?,
            if token.is_some() {
                "token required"
            } else {
                "no token"
            }
        );
        let app = crate::api::router(Arc::new(store), token);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .context("serving")
    })
}
