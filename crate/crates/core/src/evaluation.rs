//! Execution accuracy, Best-of-N coverage, stratified sampling and the
//! exploration-depth sweep.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;
use std::time::Duration;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{run_agent, AgentConfig};
use crate::backend::CompletionBackend;
use crate::catalog::{AttachError, Database, DbCatalog, QueryError};
use crate::generation::{build_generation_prompt, refine_sql, GenerationOptions};
use crate::model::{AgentKind, CellValue, Difficulty, ExplorationTrace, Question, SqlCandidate};
use crate::prompts::Prompts;

/// Rows beyond this make a result unusable for scoring.
pub const EVAL_ROW_CEILING: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultSet {
    pub column_count: usize,
    pub rows: Vec<Vec<CellValue>>,
}

pub fn execute_for_eval(sql: &str, db: &Database, timeout: Duration) -> Result<ResultSet, QueryError> {
    let out = db.query(sql, timeout, EVAL_ROW_CEILING, Some(EVAL_ROW_CEILING))?;
    Ok(ResultSet {
        column_count: out.columns.len(),
        rows: out.rows,
    })
}

/// Same column count and the same set of rows. Duplicate rows collapse and
/// row order is ignored; column order within a row matters.
pub fn execution_match(pred: &ResultSet, gold: &ResultSet) -> bool {
    if pred.column_count != gold.column_count {
        return false;
    }
    let p: HashSet<&Vec<CellValue>> = pred.rows.iter().collect();
    let g: HashSet<&Vec<CellValue>> = gold.rows.iter().collect();
    p == g
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateFlag {
    pub backend_id: String,
    pub round: u32,
    pub postprocessed: bool,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question_id: String,
    pub stratum: Difficulty,
    pub candidates: Vec<CandidateFlag>,
    pub first_correct_round: Option<u32>,
}

impl EvalRecord {
    pub fn new(question_id: String, stratum: Difficulty, candidates: Vec<CandidateFlag>) -> Self {
        let first_correct_round = candidates.iter().filter(|c| c.matched).map(|c| c.round).min();
        Self {
            question_id,
            stratum,
            candidates,
            first_correct_round,
        }
    }
}

/// Fraction of questions with a correct candidate within the first `n` rounds.
pub fn best_of_n(records: &[EvalRecord], n: u32) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let solved = records
        .iter()
        .filter(|r| r.first_correct_round.is_some_and(|round| round <= n))
        .count();
    solved as f64 / records.len() as f64
}

pub fn best_of_n_curve(records: &[EvalRecord], max_n: u32) -> Vec<(u32, f64)> {
    (1..=max_n).map(|n| (n, best_of_n(records, n))).collect()
}

/// Scores candidates against the gold result. A gold query that fails makes
/// every candidate incorrect.
pub fn evaluate_candidates(
    question: &Question,
    candidates: &[SqlCandidate],
    db: &Database,
    timeout: Duration,
) -> EvalRecord {
    let gold = question
        .gold_sql
        .as_deref()
        .map(|sql| execute_for_eval(sql, db, timeout));
    if let Some(Err(e)) = &gold {
        warn!("question {}: gold query failed: {e}", question.id);
    }
    let flags = candidates
        .iter()
        .map(|c| CandidateFlag {
            backend_id: c.backend_id.clone(),
            round: c.round,
            postprocessed: c.postprocessed,
            matched: match &gold {
                Some(Ok(gold)) => candidate_matches(&c.sql, gold, db, timeout),
                _ => false,
            },
        })
        .collect();
    EvalRecord::new(question.id.clone(), question.difficulty, flags)
}

pub fn candidate_matches(sql: &str, gold: &ResultSet, db: &Database, timeout: Duration) -> bool {
    if sql.trim().is_empty() {
        return false;
    }
    execute_for_eval(sql, db, timeout).is_ok_and(|pred| execution_match(&pred, gold))
}

/// Largest-remainder allocation of `round(fraction * total)` items over
/// strata of the given sizes. Ties go to the larger stratum, then the earlier.
pub fn allocate_largest_remainder(sizes: &[usize], fraction: f64) -> Vec<usize> {
    const EPS: f64 = 1e-9;
    let total: usize = sizes.iter().sum();
    let target = ((fraction * total as f64) + EPS).round() as usize;
    let quotas: Vec<f64> = sizes.iter().map(|&n| fraction * n as f64).collect();
    let mut alloc: Vec<usize> = quotas
        .iter()
        .zip(sizes)
        .map(|(q, &n)| ((q + EPS).floor() as usize).min(n))
        .collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - alloc[a] as f64;
        let rb = quotas[b] - alloc[b] as f64;
        rb.partial_cmp(&ra)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(sizes[b].cmp(&sizes[a]))
            .then(a.cmp(&b))
    });
    let mut remaining = target.saturating_sub(alloc.iter().sum());
    for &i in order.iter().cycle().take(order.len() * 2) {
        if remaining == 0 {
            break;
        }
        if alloc[i] < sizes[i] {
            alloc[i] += 1;
            remaining -= 1;
        }
    }
    alloc
}

/// Seeded stratified sample by difficulty. Output keeps dataset order.
pub fn stratified_sample(questions: &[Question], fraction: f64, seed: u64) -> Vec<Question> {
    if questions.is_empty() {
        return Vec::new();
    }
    let strata: Vec<Vec<usize>> = Difficulty::ALL
        .iter()
        .map(|d| {
            questions
                .iter()
                .enumerate()
                .filter(|(_, q)| q.difficulty == *d)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    let sizes: Vec<usize> = strata.iter().map(Vec::len).collect();
    let alloc = allocate_largest_remainder(&sizes, fraction.clamp(0.0, 1.0));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = Vec::new();
    for (members, &count) in strata.iter().zip(&alloc) {
        let picks = rand::seq::index::sample(&mut rng, members.len(), count);
        chosen.extend(picks.iter().map(|i| members[i]));
    }
    chosen.sort_unstable();
    chosen.into_iter().map(|i| questions[i].clone()).collect()
}

/// Opens a fresh connection for a database id.
pub trait DatabaseResolver: Sync {
    fn open(&self, db_id: &str) -> Result<Database, AttachError>;
}

impl DatabaseResolver for HashMap<String, Arc<DbCatalog>> {
    fn open(&self, db_id: &str) -> Result<Database, AttachError> {
        match self.get(db_id) {
            Some(catalog) => catalog.connect(),
            None => Err(AttachError::Io {
                path: db_id.into(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "unknown database id"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub k: usize,
    pub agent_kind: AgentKind,
    pub refinement_enabled: bool,
    pub execution_accuracy: f64,
    pub correct: usize,
    pub evaluated: usize,
}

/// Runs the agent once per question. Questions whose database cannot be
/// opened get no trace.
pub fn collect_traces(
    questions: &[Question],
    resolver: &dyn DatabaseResolver,
    cfg: &AgentConfig,
    backend: &dyn CompletionBackend,
    prompts: &Prompts,
) -> HashMap<String, ExplorationTrace> {
    let mut traces = HashMap::new();
    for q in questions {
        match resolver.open(&q.db_id) {
            Ok(db) => {
                traces.insert(q.id.clone(), run_agent(q, &db, cfg, backend, prompts));
            }
            Err(e) => warn!("question {}: {e}", q.id),
        }
    }
    traces
}

/// Generates at each depth from fixed traces and scores the result.
///
/// Questions without a trace or without gold SQL are left out of the
/// denominator; generation failures count as incorrect.
pub fn sweep_depths(
    questions: &[Question],
    traces: &BTreeMap<AgentKind, HashMap<String, ExplorationTrace>>,
    resolver: &dyn DatabaseResolver,
    ks: &[usize],
    refinement: &[bool],
    backend: &dyn CompletionBackend,
    prompts: &Prompts,
    opts: &GenerationOptions,
) -> Vec<ScalingPoint> {
    let mut points = Vec::new();
    let mut gold_cache: HashMap<String, Option<ResultSet>> = HashMap::new();
    for (&kind, kind_traces) in traces {
        for &refine in refinement {
            let opts = GenerationOptions {
                max_retries: if refine { opts.max_retries } else { 0 },
                ..opts.clone()
            };
            for &k in ks {
                let mut correct = 0;
                let mut evaluated = 0;
                for q in questions {
                    let (Some(trace), Some(gold_sql)) = (kind_traces.get(&q.id), q.gold_sql.as_deref()) else {
                        continue;
                    };
                    let db = match resolver.open(&q.db_id) {
                        Ok(db) => db,
                        Err(e) => {
                            warn!("question {}: {e}", q.id);
                            continue;
                        }
                    };
                    evaluated += 1;
                    let gold = gold_cache
                        .entry(q.id.clone())
                        .or_insert_with(|| execute_for_eval(gold_sql, &db, opts.limits.timeout).ok());
                    let prompt = build_generation_prompt(q, trace, k);
                    let outcome = refine_sql(&prompt, backend, &db, prompts, &opts, 1);
                    if let Some(gold) = gold {
                        if candidate_matches(&outcome.final_candidate.sql, gold, &db, opts.limits.timeout) {
                            correct += 1;
                        }
                    }
                }
                points.push(ScalingPoint {
                    k,
                    agent_kind: kind,
                    refinement_enabled: refine,
                    execution_accuracy: if evaluated == 0 { 0.0 } else { correct as f64 / evaluated as f64 },
                    correct,
                    evaluated,
                });
            }
        }
    }
    points
}

/// Explores once per agent configuration, then sweeps depth and refinement
/// over the same traces.
#[allow(clippy::too_many_arguments)]
pub fn run_scaling_experiment(
    questions: &[Question],
    resolver: &dyn DatabaseResolver,
    agent_cfgs: &[AgentConfig],
    explorer: &dyn CompletionBackend,
    ks: &[usize],
    refinement: &[bool],
    generator: &dyn CompletionBackend,
    prompts: &Prompts,
    opts: &GenerationOptions,
) -> Vec<ScalingPoint> {
    let traces: BTreeMap<AgentKind, HashMap<String, ExplorationTrace>> = agent_cfgs
        .iter()
        .map(|cfg| (cfg.agent_kind, collect_traces(questions, resolver, cfg, explorer, prompts)))
        .collect();
    sweep_depths(questions, &traces, resolver, ks, refinement, generator, prompts, opts)
}

pub fn scaling_csv(points: &[ScalingPoint]) -> String {
    let mut out = String::from("agent_kind,refinement,k,execution_accuracy,correct,evaluated\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{:.6},{},{}\n",
            p.agent_kind,
            if p.refinement_enabled { "on" } else { "off" },
            p.k,
            p.execution_accuracy,
            p.correct,
            p.evaluated
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigAccuracy {
    pub backend_id: String,
    pub postprocessed: bool,
    pub execution_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub questions: usize,
    /// Round-1 accuracy of each backend (and its post-processed variant).
    pub per_config: Vec<ConfigAccuracy>,
    pub best_of_n: Vec<(u32, f64)>,
}

pub fn summarize(records: &[EvalRecord], max_n: u32) -> EvalSummary {
    let mut configs: BTreeMap<(String, bool), usize> = BTreeMap::new();
    for r in records {
        for c in r.candidates.iter().filter(|c| c.round == 1) {
            configs.entry((c.backend_id.clone(), c.postprocessed)).or_insert(0);
        }
    }
    for r in records {
        let mut seen = HashSet::new();
        for c in r.candidates.iter().filter(|c| c.round == 1 && c.matched) {
            let key = (c.backend_id.clone(), c.postprocessed);
            if seen.insert(key.clone()) {
                *configs.get_mut(&key).expect("registered") += 1;
            }
        }
    }
    let n = records.len().max(1) as f64;
    EvalSummary {
        questions: records.len(),
        per_config: configs
            .into_iter()
            .map(|((backend_id, postprocessed), hits)| ConfigAccuracy {
                backend_id,
                postprocessed,
                execution_accuracy: hits as f64 / n,
            })
            .collect(),
        best_of_n: best_of_n_curve(records, max_n),
    }
}

pub fn render_summary(summary: &EvalSummary) -> String {
    let mut out = format!("questions evaluated: {}\n\n", summary.questions);
    out.push_str("configuration                     EX (round 1)\n");
    for c in &summary.per_config {
        let name = if c.postprocessed {
            format!("{} +columns", c.backend_id)
        } else {
            c.backend_id.clone()
        };
        out.push_str(&format!("{name:<32}  {:>6.1}%\n", c.execution_accuracy * 100.0));
    }
    out.push_str("\nN   Best-of-N\n");
    for (n, v) in &summary.best_of_n {
        out.push_str(&format!("{n:<3} {:>6.1}%\n", v * 100.0));
    }
    out
}
