//! `raise` command-line entry points.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::agent::{run_agent, AgentConfig};
use crate::backend::CompletionBackend;
use crate::catalog::attach_database;
use crate::config::{build_backend, BackendSpec, Config, ConfigError};
use crate::evaluation::{
    evaluate_candidates, render_summary, scaling_csv, stratified_sample, summarize, sweep_depths, DatabaseResolver,
    EvalRecord,
};
use crate::generation::{build_generation_prompt, fan_out_candidates, refine_sql, Generator};
use crate::model::{AgentKind, Difficulty, ExplorationTrace, Question, Termination};
use crate::prompts::Prompts;
use crate::protocol::extract_final_sql;
use crate::store::{
    ingest_bird_layout, json_line, read_manifest_file, stratum_counts, CandidateRecord, Dataset, EvalLine,
    RunManifest, StoreError, TraceStore, FORMAT_VERSION,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "raise", version, about = "Agentic text-to-SQL exploration, generation and evaluation")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run store directory (overrides the configured one).
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the stratified question sample as a questions file.
    Sample(SampleArgs),
    /// Phase one: run the exploration agent and store traces.
    Explore(ExploreArgs),
    /// Phase two: build prompts from stored traces and store SQL candidates.
    Generate(GenerateArgs),
    /// Score stored candidates (execution accuracy, Best-of-N).
    Eval(EvalArgs),
    /// Sweep exploration depth for both agent kinds, with and without refinement.
    Scaling(ScalingArgs),
    /// Answer one question against one database.
    Ask(AskArgs),
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    /// Backend name from the configuration.
    #[arg(long)]
    pub backend: Option<String>,
    /// Replay this tape file as the selected backend.
    #[arg(long)]
    pub tape: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExploreArgs {
    #[arg(long)]
    pub run_id: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub agent: Option<AgentKind>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Re-execute with the configuration and sample of an existing manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub run_id: String,
    /// Operations from each trace to include in the prompt.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub rounds: Option<u32>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub agent: Option<AgentKind>,
    /// Generate with this single backend instead of the configured set.
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run_id: String,
    /// Largest N in the Best-of-N table (defaults to the configured rounds).
    #[arg(long)]
    pub best_of: Option<u32>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub agent: Option<AgentKind>,
}

#[derive(Debug, Args)]
pub struct ScalingArgs {
    #[arg(long)]
    pub run_id: String,
    /// Depths to sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Generation backend for the sweep.
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct AskArgs {
    #[arg(long)]
    pub db: PathBuf,
    /// Directory of per-table documentation files.
    #[arg(long)]
    pub docs: Option<PathBuf>,
    #[arg(long)]
    pub question: String,
    #[arg(long, default_value = "")]
    pub evidence: String,
    #[arg(long)]
    pub agent: Option<AgentKind>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NoManifest(_) | StoreError::Version { .. } => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CmdResult = Result<i32, Failure>;

struct Io<'a> {
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

macro_rules! say {
    ($w:expr, $($arg:tt)*) => {{
        let _ = writeln!($w, $($arg)*);
    }};
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    dispatch_to(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn dispatch_to<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{text}");
            } else {
                let _ = write!(out, "{text}");
            }
            return code;
        }
    };
    let mut io = Io { out, err };
    let result = match &cli.command {
        Command::Sample(a) => cmd_sample(&cli, a, &mut io),
        Command::Explore(a) => cmd_explore(&cli, a, &mut io),
        Command::Generate(a) => cmd_generate(&cli, a, &mut io),
        Command::Eval(a) => cmd_eval(&cli, a, &mut io),
        Command::Scaling(a) => cmd_scaling(&cli, a, &mut io),
        Command::Ask(a) => cmd_ask(&cli, a, &mut io),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Config(msg)) => {
            say!(io.err, "error: {msg}");
            EXIT_CONFIG
        }
        Err(Failure::Runtime(msg)) => {
            say!(io.err, "error: {msg}");
            EXIT_PARTIAL
        }
    }
}

fn file_config(cli: &Cli) -> Result<Option<Config>, Failure> {
    cli.config.as_deref().map(Config::load).transpose().map_err(Failure::from)
}

fn load_prompts(cfg: &Config) -> Result<Prompts, Failure> {
    match &cfg.prompts_dir {
        Some(dir) => Prompts::load(dir).map_err(|e| Failure::Config(format!("prompts {}: {e}", dir.display()))),
        None => Ok(Prompts::default()),
    }
}

fn ingest(cfg: &Config) -> Result<Dataset, Failure> {
    let root = cfg
        .dataset
        .as_deref()
        .ok_or_else(|| Failure::Config("no dataset configured (set `dataset` or pass --dataset)".into()))?;
    ingest_bird_layout(root).map_err(|e| Failure::Config(e.to_string()))
}

/// Registers `--tape` as a scripted backend and returns the selected name.
fn select_backend(cfg: &mut Config, args: &BackendArgs) -> Result<Option<String>, Failure> {
    let name = match (&args.backend, &args.tape) {
        (None, None) => return Ok(None),
        (Some(name), _) => name.clone(),
        (None, Some(_)) => "scripted".to_string(),
    };
    if let Some(tape) = &args.tape {
        let tape = std::path::absolute(tape).unwrap_or_else(|_| tape.clone());
        cfg.backends.insert(name.clone(), BackendSpec::Scripted { tape });
    } else if !cfg.backends.contains_key(&name) {
        return Err(Failure::Config(format!("undefined backend `{name}`")));
    }
    Ok(Some(name))
}

fn backend_for(cfg: &Config, name: &str) -> Result<Box<dyn CompletionBackend>, Failure> {
    if name.is_empty() {
        return Err(Failure::Config("no backend selected for this role".into()));
    }
    Ok(build_backend(name, cfg.backend_spec(name)?)?)
}

struct RunContext {
    cfg: Config,
    store: TraceStore,
    manifest: RunManifest,
    dataset: Dataset,
    questions: Vec<Question>,
}

/// Opens an existing run, or creates it from `--manifest` / `--config` when
/// `create` is set. `adjust` edits the configuration before it is snapshot.
fn open_run(
    cli: &Cli,
    run_id: &str,
    create: Option<(&Option<PathBuf>, &Option<PathBuf>)>,
    adjust: &dyn Fn(&mut Config) -> Result<(), Failure>,
    io: &mut Io<'_>,
) -> Result<RunContext, Failure> {
    let file_cfg = file_config(cli)?;
    let source = match create.and_then(|(manifest, _)| manifest.as_deref()) {
        Some(path) => Some(read_manifest_file(path)?),
        None => None,
    };
    let root = cli
        .store
        .clone()
        .or_else(|| file_cfg.as_ref().map(|c| c.store.clone()))
        .or_else(|| source.as_ref().map(|m| m.config.store.clone()))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let store = TraceStore::open(&root)?;

    let (cfg, mut manifest, dataset) = if store.has_manifest(run_id) {
        let manifest = store.read_manifest(run_id)?;
        let mut cfg = manifest.config.clone();
        adjust(&mut cfg)?;
        let dataset = ingest(&cfg)?;
        let now = dataset.fingerprint().map_err(|e| Failure::Config(e.to_string()))?;
        if now.databases != manifest.dataset.databases {
            say!(io.err, "warning: database files differ from those recorded in the manifest");
        }
        (cfg, manifest, dataset)
    } else {
        let Some((_, dataset_override)) = create else {
            return Err(Failure::Config(format!("run {run_id} has no manifest in {}", root.display())));
        };
        let mut cfg = match (&source, file_cfg) {
            (Some(m), _) => m.config.clone(),
            (None, Some(c)) => c,
            (None, None) => return Err(Failure::Config("no configuration: pass --config or --manifest".into())),
        };
        if let Some(d) = dataset_override {
            cfg.dataset = Some(std::path::absolute(d).unwrap_or_else(|_| d.clone()));
        }
        cfg.store = std::path::absolute(&root).unwrap_or(root.clone());
        adjust(&mut cfg)?;
        let cfg = cfg.with_derived_seeds();
        cfg.validate()?;
        let dataset = ingest(&cfg)?;
        let fingerprint = dataset.fingerprint().map_err(|e| Failure::Config(e.to_string()))?;
        let sample: Vec<String> = match &source {
            Some(m) => m.sample.clone(),
            None => stratified_sample(&dataset.questions, cfg.sample_fraction, cfg.seed)
                .into_iter()
                .map(|q| q.id)
                .collect(),
        };
        let manifest = RunManifest::new(run_id, cfg.clone(), fingerprint, sample);
        store.write_manifest(&manifest)?;
        (cfg, manifest, dataset)
    };
    store.touch_manifest(&mut manifest)?;

    let mut questions = Vec::new();
    for id in &manifest.sample {
        match dataset.question(id) {
            Some(q) => questions.push(q.clone()),
            None => say!(io.err, "warning: sampled question {id} is not in the dataset"),
        }
    }
    Ok(RunContext {
        cfg,
        store,
        manifest,
        dataset,
        questions,
    })
}

enum Status {
    Done,
    Skipped,
    Failed(String),
}

fn map_questions<T, F>(workers: usize, questions: &[Question], f: F) -> Result<Vec<T>, Failure>
where
    T: Send,
    F: Fn(&Question) -> T + Sync + Send,
{
    if workers <= 1 {
        return Ok(questions.iter().map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Failure::Runtime(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| questions.par_iter().map(f).collect()))
}

fn report(io: &mut Io<'_>, verb: &str, questions: &[Question], statuses: &[Status]) -> i32 {
    let mut done = 0;
    let mut skipped = 0;
    let mut failed = 0;
    for (q, s) in questions.iter().zip(statuses) {
        match s {
            Status::Done => done += 1,
            Status::Skipped => skipped += 1,
            Status::Failed(msg) => {
                failed += 1;
                say!(io.err, "question {}: {msg}", q.id);
            }
        }
    }
    say!(io.out, "{verb} {done}, skipped {skipped}, failed {failed}");
    if failed > 0 {
        EXIT_PARTIAL
    } else {
        EXIT_OK
    }
}

fn agent_config(cfg: &Config, kind: AgentKind) -> AgentConfig {
    AgentConfig {
        agent_kind: kind,
        ..cfg.agent.clone()
    }
}

fn explore_one(
    ctx: &RunContext,
    q: &Question,
    agent: &AgentConfig,
    backend: &dyn CompletionBackend,
    prompts: &Prompts,
    force: bool,
) -> (Status, Option<ExplorationTrace>) {
    if !force && ctx.store.has_trace(&ctx.manifest.run_id, agent.agent_kind, &q.id) {
        return (Status::Skipped, None);
    }
    let db = match ctx.dataset.open(&q.db_id) {
        Ok(db) => db,
        Err(e) => return (Status::Failed(e.to_string()), None),
    };
    let trace = run_agent(q, &db, agent, backend, prompts);
    if let Err(e) = ctx.store.write_trace(&ctx.manifest, &trace, force) {
        return match e {
            StoreError::Exists(_) => (Status::Skipped, None),
            other => (Status::Failed(other.to_string()), Some(trace)),
        };
    }
    let status = match (&trace.termination, &trace.backend_error) {
        (Termination::BackendError, Some(msg)) => Status::Failed(format!("backend error: {msg}")),
        (Termination::BackendError, None) => Status::Failed("backend error".into()),
        _ => Status::Done,
    };
    (status, Some(trace))
}

fn cmd_sample(cli: &Cli, a: &SampleArgs, io: &mut Io<'_>) -> CmdResult {
    let mut cfg = file_config(cli)?.unwrap_or_default();
    if let Some(d) = &a.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(f) = a.fraction {
        cfg.sample_fraction = f;
    }
    cfg.validate()?;
    let dataset = ingest(&cfg)?;
    let sample = stratified_sample(&dataset.questions, cfg.sample_fraction, cfg.seed);
    let records: Vec<serde_json::Value> = sample.iter().map(question_record).collect();
    let text = serde_json::to_string_pretty(&records).expect("questions serialize") + "\n";
    match &a.out {
        Some(path) => {
            crate::store::write_atomic(path, text.as_bytes(), true)?;
            let counts: Vec<String> = stratum_counts(&sample)
                .into_iter()
                .map(|(d, n)| format!("{d} {n}"))
                .collect();
            say!(io.out, "sampled {} questions (seed {}): {}", sample.len(), cfg.seed, counts.join(", "));
        }
        None => {
            let _ = io.out.write_all(text.as_bytes());
        }
    }
    Ok(EXIT_OK)
}

/// A question in the benchmark's questions-file shape.
pub fn question_record(q: &Question) -> serde_json::Value {
    let id = q
        .id
        .parse::<i64>()
        .map(serde_json::Value::from)
        .unwrap_or_else(|_| serde_json::Value::from(q.id.clone()));
    let mut obj = serde_json::Map::new();
    obj.insert("question_id".into(), id);
    obj.insert("db_id".into(), q.db_id.clone().into());
    obj.insert("question".into(), q.text.clone().into());
    obj.insert("evidence".into(), q.evidence.clone().into());
    if let Some(sql) = &q.gold_sql {
        obj.insert("SQL".into(), sql.clone().into());
    }
    if q.difficulty != Difficulty::Unknown {
        obj.insert("difficulty".into(), q.difficulty.as_str().into());
    }
    serde_json::Value::Object(obj)
}

fn cmd_explore(cli: &Cli, a: &ExploreArgs, io: &mut Io<'_>) -> CmdResult {
    let adjust = |cfg: &mut Config| -> Result<(), Failure> {
        if let Some(s) = a.seed {
            cfg.seed = s;
        }
        if let Some(w) = a.workers {
            cfg.workers = w;
        }
        if let Some(name) = select_backend(cfg, &a.backend)? {
            cfg.roles.explorer = name;
        }
        Ok(())
    };
    let ctx = open_run(cli, &a.run_id, Some((&a.manifest, &a.dataset)), &adjust, io)?;
    let kind = a.agent.unwrap_or(ctx.cfg.agent.agent_kind);
    let agent = agent_config(&ctx.cfg, kind);
    agent.validate().map_err(Failure::Config)?;
    let prompts = load_prompts(&ctx.cfg)?;
    let backend = backend_for(&ctx.cfg, &ctx.cfg.roles.explorer)?;
    let statuses = map_questions(ctx.cfg.workers, &ctx.questions, |q| {
        explore_one(&ctx, q, &agent, backend.as_ref(), &prompts, a.force).0
    })?;
    Ok(report(io, "explored", &ctx.questions, &statuses))
}

fn cmd_generate(cli: &Cli, a: &GenerateArgs, io: &mut Io<'_>) -> CmdResult {
    let adjust = |cfg: &mut Config| -> Result<(), Failure> {
        if let Some(k) = a.k {
            cfg.k = k;
        }
        if let Some(r) = a.rounds {
            cfg.rounds = r;
        }
        if let Some(w) = a.workers {
            cfg.workers = w;
        }
        if let Some(name) = select_backend(cfg, &a.backend)? {
            cfg.roles.postprocess.retain(|n| *n == name);
            cfg.roles.generators = vec![name];
        }
        Ok(())
    };
    let ctx = open_run(cli, &a.run_id, None, &adjust, io)?;
    let cfg = &ctx.cfg;
    if cfg.rounds == 0 {
        return Err(Failure::Config("rounds must be at least 1".into()));
    }
    if cfg.roles.generators.is_empty() {
        return Err(Failure::Config("no generator backends configured".into()));
    }
    let kind = a.agent.unwrap_or(cfg.agent.agent_kind);
    let prompts = load_prompts(cfg)?;
    let backends: Vec<(String, Box<dyn CompletionBackend>)> = cfg
        .roles
        .generators
        .iter()
        .map(|n| backend_for(cfg, n).map(|b| (n.clone(), b)))
        .collect::<Result<_, _>>()?;
    let postprocessor = cfg.roles.postprocessor.as_deref().map(|n| backend_for(cfg, n)).transpose()?;
    let generators: Vec<Generator<'_>> = backends
        .iter()
        .map(|(name, b)| Generator {
            backend: b.as_ref(),
            postprocessor: cfg
                .roles
                .postprocess
                .contains(name)
                .then(|| postprocessor.as_deref().unwrap_or(b.as_ref())),
        })
        .collect();
    let run_id = &ctx.manifest.run_id;
    let statuses = map_questions(cfg.workers, &ctx.questions, |q| {
        if !a.force && ctx.store.candidates_path(run_id, kind, &q.id).is_file() {
            return Status::Skipped;
        }
        let trace = match ctx.store.read_trace(run_id, kind, &q.id) {
            Ok(Some(t)) => t,
            Ok(None) => return Status::Failed(format!("no {kind} trace stored")),
            Err(e) => return Status::Failed(e.to_string()),
        };
        let db = match ctx.dataset.open(&q.db_id) {
            Ok(db) => db,
            Err(e) => return Status::Failed(e.to_string()),
        };
        let prompt = build_generation_prompt(q, &trace, cfg.k);
        let candidates = fan_out_candidates(&prompt, &generators, cfg.rounds, &db, &prompts, &cfg.generation);
        let record = CandidateRecord {
            format_version: FORMAT_VERSION,
            run_id: run_id.clone(),
            question_id: q.id.clone(),
            agent_kind: kind,
            k: cfg.k,
            rounds: cfg.rounds,
            candidates,
        };
        match ctx.store.write_candidates(&record, a.force) {
            Ok(_) => Status::Done,
            Err(StoreError::Exists(_)) => Status::Skipped,
            Err(e) => Status::Failed(e.to_string()),
        }
    })?;
    Ok(report(io, "generated", &ctx.questions, &statuses))
}

fn cmd_eval(cli: &Cli, a: &EvalArgs, io: &mut Io<'_>) -> CmdResult {
    let adjust = |cfg: &mut Config| -> Result<(), Failure> {
        if let Some(w) = a.workers {
            cfg.workers = w;
        }
        Ok(())
    };
    let ctx = open_run(cli, &a.run_id, None, &adjust, io)?;
    let kind = a.agent.unwrap_or(ctx.cfg.agent.agent_kind);
    let best_of = a.best_of.unwrap_or(ctx.cfg.rounds).max(1);
    let run_id = &ctx.manifest.run_id;
    let timeout = ctx.cfg.generation.limits.timeout;
    let results = map_questions(ctx.cfg.workers, &ctx.questions, |q| -> Result<EvalRecord, String> {
        if q.gold_sql.is_none() {
            return Err("no gold SQL".into());
        }
        let record = ctx
            .store
            .read_candidates(run_id, kind, &q.id)
            .map_err(|e| e.to_string())?
            .ok_or_else(|| "no candidates stored".to_string())?;
        let db = ctx.dataset.open(&q.db_id).map_err(|e| e.to_string())?;
        Ok(evaluate_candidates(q, &record.candidates, &db, timeout))
    })?;
    let mut records = Vec::new();
    let mut failed = 0;
    for (q, r) in ctx.questions.iter().zip(results) {
        match r {
            Ok(rec) => records.push(rec),
            Err(msg) => {
                failed += 1;
                say!(io.err, "question {}: {msg}", q.id);
            }
        }
    }
    let mut lines = Vec::new();
    for record in &records {
        lines.extend(json_line(&EvalLine {
            format_version: FORMAT_VERSION,
            run_id: run_id.clone(),
            agent_kind: kind,
            record: record.clone(),
        }));
    }
    ctx.store.write_artifact(run_id, "eval.jsonl", &lines)?;
    let summary = summarize(&records, best_of);
    let summary_json = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    ctx.store.write_artifact(run_id, "eval_summary.json", summary_json.as_bytes())?;
    let _ = io.out.write_all(render_summary(&summary).as_bytes());
    Ok(if failed > 0 { EXIT_PARTIAL } else { EXIT_OK })
}

fn cmd_scaling(cli: &Cli, a: &ScalingArgs, io: &mut Io<'_>) -> CmdResult {
    let adjust = |cfg: &mut Config| -> Result<(), Failure> {
        if let Some(s) = a.seed {
            cfg.seed = s;
        }
        if let Some(w) = a.workers {
            cfg.workers = w;
        }
        if !a.k.is_empty() {
            cfg.ks = a.k.clone();
        }
        if let Some(name) = select_backend(cfg, &a.backend)? {
            cfg.roles.generators = vec![name];
        }
        Ok(())
    };
    let ctx = open_run(cli, &a.run_id, Some((&a.manifest, &a.dataset)), &adjust, io)?;
    let cfg = &ctx.cfg;
    let generator_name = cfg
        .roles
        .generators
        .first()
        .ok_or_else(|| Failure::Config("no generator backend configured".into()))?;
    let generator = backend_for(cfg, generator_name)?;
    let prompts = load_prompts(cfg)?;
    let run_id = &ctx.manifest.run_id;

    let mut explorer: Option<Box<dyn CompletionBackend>> = None;
    let mut traces: BTreeMap<AgentKind, HashMap<String, ExplorationTrace>> = BTreeMap::new();
    let mut failed = 0;
    for kind in [AgentKind::Interaction, AgentKind::Static] {
        let agent = agent_config(cfg, kind);
        let mut found = HashMap::new();
        for q in &ctx.questions {
            let stored = if a.force { None } else { ctx.store.read_trace(run_id, kind, &q.id)? };
            let trace = match stored {
                Some(t) => Some(t),
                None => {
                    if explorer.is_none() {
                        explorer = Some(backend_for(cfg, &cfg.roles.explorer)?);
                    }
                    let backend = explorer.as_deref().expect("explorer built");
                    let (status, trace) = explore_one(&ctx, q, &agent, backend, &prompts, true);
                    if let Status::Failed(msg) = status {
                        failed += 1;
                        say!(io.err, "question {} ({kind}): {msg}", q.id);
                    }
                    trace
                }
            };
            if let Some(t) = trace {
                found.insert(q.id.clone(), t);
            }
        }
        traces.insert(kind, found);
    }

    let points = sweep_depths(
        &ctx.questions,
        &traces,
        &ctx.dataset,
        &cfg.ks,
        &[false, true],
        generator.as_ref(),
        &prompts,
        &cfg.generation,
    );
    let csv = scaling_csv(&points);
    ctx.store.write_artifact(run_id, "scaling.csv", csv.as_bytes())?;
    let _ = io.out.write_all(csv.as_bytes());
    Ok(if failed > 0 { EXIT_PARTIAL } else { EXIT_OK })
}

/// Text the model produced after the last tool result.
fn final_segment(transcript: &str) -> &str {
    match transcript.rfind("</result>") {
        Some(i) => &transcript[i + "</result>".len()..],
        None => transcript,
    }
}

fn cmd_ask(cli: &Cli, a: &AskArgs, io: &mut Io<'_>) -> CmdResult {
    let mut cfg = file_config(cli)?.unwrap_or_default();
    if let Some(name) = select_backend(&mut cfg, &a.backend)? {
        cfg.roles.explorer = name.clone();
        cfg.roles.generators = vec![name];
    }
    let cfg = cfg.with_derived_seeds();
    let agent = agent_config(&cfg, a.agent.unwrap_or(AgentKind::Interaction));
    agent.validate().map_err(Failure::Config)?;
    let prompts = load_prompts(&cfg)?;
    let backend = backend_for(&cfg, &cfg.roles.explorer)?;
    let db_id = a
        .db
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "db".into());
    let db = attach_database(&db_id, &a.db, a.docs.as_deref()).map_err(|e| Failure::Config(e.to_string()))?;
    let question = Question {
        id: "ask".into(),
        db_id,
        text: a.question.clone(),
        evidence: a.evidence.clone(),
        gold_sql: None,
        difficulty: Difficulty::Unknown,
    };
    let trace = run_agent(&question, &db, &agent, backend.as_ref(), &prompts);
    if let Some(msg) = &trace.backend_error {
        say!(io.err, "warning: backend error during exploration: {msg}");
    }
    let sql = match extract_final_sql(final_segment(&trace.raw_transcript)) {
        Some(sql) => sql,
        None => {
            let generator = match cfg.roles.generators.first() {
                Some(name) if *name != cfg.roles.explorer => backend_for(&cfg, name)?,
                _ => backend,
            };
            let prompt = build_generation_prompt(&question, &trace, trace.operations.len());
            let outcome = refine_sql(&prompt, generator.as_ref(), &db, &prompts, &cfg.generation, 1);
            outcome.final_candidate.sql
        }
    };
    if sql.trim().is_empty() {
        say!(io.err, "no SQL produced");
        return Ok(EXIT_PARTIAL);
    }
    let result = db.run_query(&sql, &cfg.agent.limits);
    say!(io.out, "{sql}\n");
    say!(io.out, "{}", result.text);
    Ok(if result.error.is_some() { EXIT_PARTIAL } else { EXIT_OK })
}
