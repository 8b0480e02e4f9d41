//! Second phase: turn an exploration trace into SQL candidates.
//!
//! The generation prompt holds the first `k` operations of a trace (never the
//! agent's own answer). Each backend generates and refines independently, and
//! designated backends also get a column-selection rewrite of their answer.

use std::ops::Range;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{CompletionBackend, CompletionRequest, Finish, Message};
use crate::catalog::{Database, ExecLimits};
use crate::model::{ExecOutcome, ExplorationTrace, OperationRecord, Question, SqlCandidate};
use crate::prompts::{self, Prompts};
use crate::protocol::extract_final_sql;

/// Retries after the first attempt.
pub const MAX_RETRIES: usize = 5;

pub const NO_SQL: &str = "no SQL produced";
pub const ZERO_ROWS: &str = "query returned zero rows";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackEntry {
    pub sql: String,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationPrompt {
    pub question: String,
    pub evidence: String,
    pub operations_included: Vec<OperationRecord>,
    pub refinement_feedback: Vec<FeedbackEntry>,
}

pub fn build_generation_prompt(question: &Question, trace: &ExplorationTrace, k: usize) -> GenerationPrompt {
    GenerationPrompt {
        question: question.text.clone(),
        evidence: question.evidence.clone(),
        operations_included: trace.operations.iter().take(k).cloned().collect(),
        refinement_feedback: Vec::new(),
    }
}

impl GenerationPrompt {
    pub fn render_operations(&self) -> String {
        if self.operations_included.is_empty() {
            return "(no commands)".to_string();
        }
        let mut out = String::new();
        for (i, op) in self.operations_included.iter().enumerate() {
            out.push_str(&format!(
                "Command {}: {}\nResult:\n{}\n\n",
                i + 1,
                op.call.render_call(),
                op.rendered_result
            ));
        }
        out.trim_end().to_string()
    }

    pub fn render_feedback(&self) -> String {
        if self.refinement_feedback.is_empty() {
            return String::new();
        }
        let mut out = String::from("\nPrevious attempts did not work:\n");
        for (i, f) in self.refinement_feedback.iter().enumerate() {
            let sql = if f.sql.is_empty() { "(none)" } else { f.sql.as_str() };
            out.push_str(&format!("Attempt {}:\n```sql\n{sql}\n```\nProblem: {}\n\n", i + 1, f.note));
        }
        out
    }

    fn evidence_text(&self) -> &str {
        if self.evidence.trim().is_empty() { "(none)" } else { &self.evidence }
    }

    pub fn render(&self, template: &str) -> String {
        prompts::render(template, &[
            ("question", self.question.as_str()),
            ("evidence", self.evidence_text()),
            ("operations", self.render_operations().as_str()),
            ("feedback", self.render_feedback().as_str()),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationOptions {
    pub max_tokens: u32,
    pub temperature: f32,
    pub seed: Option<u64>,
    pub limits: ExecLimits,
    /// Retries after the first attempt; zero disables refinement.
    pub max_retries: usize,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            max_tokens: 4096,
            temperature: 0.0,
            seed: None,
            limits: ExecLimits::default(),
            max_retries: MAX_RETRIES,
        }
    }
}

impl GenerationOptions {
    fn request(&self, text: String, round: u32) -> CompletionRequest {
        CompletionRequest {
            messages: vec![Message::user(text)],
            prefill: None,
            stop_sequences: Vec::new(),
            max_tokens: self.max_tokens,
            temperature: self.temperature,
            seed: self.seed.map(|s| s.wrapping_add(u64::from(round))),
        }
    }
}

pub fn execution_outcome(db: &Database, sql: &str, limits: &ExecLimits) -> ExecOutcome {
    match db.query(sql, limits.timeout, 0, None) {
        Ok(rows) if rows.total_rows == 0 => ExecOutcome::Empty,
        Ok(rows) => ExecOutcome::Ok { rows: rows.total_rows },
        Err(e) => ExecOutcome::Error { message: e.to_string() },
    }
}

pub fn generate_sql(
    prompt: &GenerationPrompt,
    backend: &dyn CompletionBackend,
    db: &Database,
    prompts: &Prompts,
    opts: &GenerationOptions,
    round: u32,
) -> SqlCandidate {
    let req = opts.request(prompt.render(&prompts.final_generation), round);
    let chunk = backend.complete(&req);
    let backend_id = backend.id().name.clone();
    let (sql, exec_outcome) = match chunk.finish {
        Finish::Error(message) => (String::new(), ExecOutcome::Error { message }),
        _ => match extract_final_sql(&chunk.text) {
            Some(sql) => {
                let outcome = execution_outcome(db, &sql, &opts.limits);
                (sql, outcome)
            }
            None => (String::new(), ExecOutcome::Error { message: NO_SQL.into() }),
        },
    };
    SqlCandidate {
        sql,
        backend_id,
        round,
        postprocessed: false,
        exec_outcome,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementOutcome {
    pub final_candidate: SqlCandidate,
    pub attempts: usize,
    pub succeeded: bool,
    pub feedback: Vec<FeedbackEntry>,
}

/// Generates, and regenerates with the accumulated failures appended, until
/// a query returns at least one row or the retries run out.
pub fn refine_sql(
    prompt: &GenerationPrompt,
    backend: &dyn CompletionBackend,
    db: &Database,
    prompts: &Prompts,
    opts: &GenerationOptions,
    round: u32,
) -> RefinementOutcome {
    let mut working = prompt.clone();
    let mut attempts = 0;
    loop {
        attempts += 1;
        let candidate = generate_sql(&working, backend, db, prompts, opts, round);
        let note = match &candidate.exec_outcome {
            ExecOutcome::Ok { .. } => {
                return RefinementOutcome {
                    final_candidate: candidate,
                    attempts,
                    succeeded: true,
                    feedback: working.refinement_feedback,
                }
            }
            ExecOutcome::Empty => ZERO_ROWS.to_string(),
            ExecOutcome::Error { message } => message.clone(),
        };
        if attempts > opts.max_retries {
            return RefinementOutcome {
                final_candidate: candidate,
                attempts,
                succeeded: false,
                feedback: working.refinement_feedback,
            };
        }
        working.refinement_feedback.push(FeedbackEntry {
            sql: candidate.sql.clone(),
            note,
        });
    }
}

/// One generating backend in a fan-out.
pub struct Generator<'a> {
    pub backend: &'a dyn CompletionBackend,
    /// Backend asked for the column list of this generator's answer; when
    /// set, a column-rewritten variant is emitted as well.
    pub postprocessor: Option<&'a dyn CompletionBackend>,
}

/// Runs every generator once per round. Produces
/// `rounds * (generators + postprocessing generators)` candidates.
pub fn fan_out_candidates(
    prompt: &GenerationPrompt,
    generators: &[Generator<'_>],
    rounds: u32,
    db: &Database,
    prompts: &Prompts,
    opts: &GenerationOptions,
) -> Vec<SqlCandidate> {
    let mut out = Vec::new();
    for round in 1..=rounds {
        for g in generators {
            let refined = refine_sql(prompt, g.backend, db, prompts, opts, round);
            let candidate = refined.final_candidate;
            if let Some(pp) = g.postprocessor {
                let variant = postprocess_columns(&candidate, prompt, pp, db, prompts, opts);
                out.push(candidate);
                out.push(variant);
            } else {
                out.push(candidate);
            }
        }
    }
    out
}

/// Asks `backend` which columns the answer should have, then splices them
/// into the candidate's outermost select-list. Falls back to the unchanged
/// candidate on any failure.
pub fn postprocess_columns(
    candidate: &SqlCandidate,
    prompt: &GenerationPrompt,
    backend: &dyn CompletionBackend,
    db: &Database,
    prompts: &Prompts,
    opts: &GenerationOptions,
) -> SqlCandidate {
    if let Err(e) = locate_select_list(&candidate.sql) {
        warn!("column post-processing skipped: {e}");
        return candidate.clone();
    }
    let text = prompts::render(&prompts.column_postprocess, &[
        ("question", prompt.question.as_str()),
        ("evidence", prompt.evidence_text()),
        ("operations", prompt.render_operations().as_str()),
        ("feedback", prompt.render_feedback().as_str()),
        ("candidate_sql", candidate.sql.as_str()),
    ]);
    let chunk = backend.complete(&opts.request(text, candidate.round));
    if let Finish::Error(msg) = &chunk.finish {
        warn!("column post-processing skipped: backend error: {msg}");
        return candidate.clone();
    }
    let Some(columns) = parse_column_list(&chunk.text) else {
        warn!("column post-processing skipped: unparseable reply");
        return candidate.clone();
    };
    match rewrite_select_list(&candidate.sql, &columns) {
        Ok(sql) => SqlCandidate {
            exec_outcome: execution_outcome(db, &sql, &opts.limits),
            sql,
            backend_id: candidate.backend_id.clone(),
            round: candidate.round,
            postprocessed: true,
        },
        Err(e) => {
            warn!("column post-processing skipped: {e}");
            candidate.clone()
        }
    }
}

/// Reads a JSON array of strings from a model reply.
pub fn parse_column_list(reply: &str) -> Option<Vec<String>> {
    let start = reply.find('[')?;
    let end = reply.rfind(']')?;
    if end <= start {
        return None;
    }
    let columns: Vec<String> = serde_json::from_str(&reply[start..=end]).ok()?;
    let columns: Vec<String> = columns
        .into_iter()
        .map(|c| c.trim().to_string())
        .filter(|c| !c.is_empty())
        .collect();
    (!columns.is_empty()).then_some(columns)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LocateError {
    #[error("not a SELECT statement")]
    NotSelect,
    #[error("top-level compound SELECT has more than one select-list")]
    Compound,
    #[error("empty select-list")]
    EmptyList,
    #[error("unbalanced parentheses or quotes")]
    Unbalanced,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Word {
    upper: String,
    start: usize,
    end: usize,
    depth: usize,
}

/// Splits SQL into keyword-like words with their parenthesis depth, skipping
/// string literals, quoted identifiers and comments.
fn words(sql: &str) -> Result<Vec<Word>, LocateError> {
    let bytes = sql.as_bytes();
    let mut out = Vec::new();
    let mut depth: usize = 0;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match b {
            b'\'' | b'"' | b'`' => {
                let close = b;
                i += 1;
                loop {
                    if i >= bytes.len() {
                        return Err(LocateError::Unbalanced);
                    }
                    if bytes[i] == close {
                        // Doubled quote is an escaped quote.
                        if bytes.get(i + 1) == Some(&close) {
                            i += 2;
                            continue;
                        }
                        break;
                    }
                    i += 1;
                }
                i += 1;
            }
            b'[' => {
                let close = sql[i..].find(']').ok_or(LocateError::Unbalanced)?;
                i += close + 1;
            }
            b'-' if bytes.get(i + 1) == Some(&b'-') => {
                i = sql[i..].find('\n').map_or(bytes.len(), |n| i + n + 1);
            }
            b'/' if bytes.get(i + 1) == Some(&b'*') => {
                i = sql[i + 2..].find("*/").map_or(bytes.len(), |n| i + 2 + n + 2);
            }
            b'(' => {
                depth += 1;
                i += 1;
            }
            b')' => {
                depth = depth.checked_sub(1).ok_or(LocateError::Unbalanced)?;
                i += 1;
            }
            _ if b.is_ascii_alphabetic() || b == b'_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] == b'$') {
                    i += 1;
                }
                out.push(Word {
                    upper: sql[start..i].to_ascii_uppercase(),
                    start,
                    end: i,
                    depth,
                });
            }
            _ => i += 1,
        }
    }
    if depth != 0 {
        return Err(LocateError::Unbalanced);
    }
    Ok(out)
}

/// Outer parentheses wrapping the whole statement, if any.
fn wrapping_parens(sql: &str) -> Option<Range<usize>> {
    let trimmed_start = sql.len() - sql.trim_start().len();
    let body = sql.trim_end().trim_end_matches(';').trim_end();
    if !sql[trimmed_start..].starts_with('(') || !body.ends_with(')') {
        return None;
    }
    let inner = trimmed_start + 1..body.len() - 1;
    // The opening paren must close at the very end.
    let mut depth = 0i64;
    let mut in_quote: Option<u8> = None;
    for (i, &b) in sql.as_bytes()[trimmed_start..body.len()].iter().enumerate() {
        match in_quote {
            Some(q) if b == q => in_quote = None,
            Some(_) => {}
            None => match b {
                b'\'' | b'"' | b'`' => in_quote = Some(b),
                b'(' => depth += 1,
                b')' => {
                    depth -= 1;
                    if depth == 0 && trimmed_start + i != body.len() - 1 {
                        return None;
                    }
                }
                _ => {}
            },
        }
    }
    Some(inner)
}

const LIST_TERMINATORS: [&str; 10] = [
    "FROM", "WHERE", "GROUP", "HAVING", "ORDER", "LIMIT", "UNION", "INTERSECT", "EXCEPT", "WINDOW",
];

/// Byte range of the outermost statement's select-list expressions.
pub fn locate_select_list(sql: &str) -> Result<Range<usize>, LocateError> {
    if let Some(inner) = wrapping_parens(sql) {
        let r = locate_select_list(&sql[inner.clone()])?;
        return Ok(r.start + inner.start..r.end + inner.start);
    }
    let ws = words(sql)?;
    // CTE bodies sit inside parentheses, so any depth-0 set operator
    // belongs to the main statement.
    if ws
        .iter()
        .any(|w| w.depth == 0 && matches!(w.upper.as_str(), "UNION" | "INTERSECT" | "EXCEPT"))
    {
        return Err(LocateError::Compound);
    }
    let select_idx = ws
        .iter()
        .position(|w| w.depth == 0 && w.upper == "SELECT")
        .ok_or(LocateError::NotSelect)?;
    let mut list_start = ws[select_idx].end;
    let mut next = select_idx + 1;
    if let Some(w) = ws.get(next) {
        if w.depth == 0 && matches!(w.upper.as_str(), "DISTINCT" | "ALL") {
            list_start = w.end;
            next += 1;
        }
    }
    let list_end = ws[next..]
        .iter()
        .find(|w| w.depth == 0 && LIST_TERMINATORS.contains(&w.upper.as_str()))
        .map(|w| w.start)
        .unwrap_or_else(|| sql.trim_end().trim_end_matches(';').len());
    let region = &sql[list_start..list_end.max(list_start)];
    let lead = region.len() - region.trim_start().len();
    let trimmed = region.trim();
    if trimmed.is_empty() {
        return Err(LocateError::EmptyList);
    }
    let start = list_start + lead;
    Ok(start..start + trimmed.len())
}

/// Replaces the outermost select-list with `columns`; every other byte of
/// the statement is kept.
pub fn rewrite_select_list(sql: &str, columns: &[String]) -> Result<String, LocateError> {
    if columns.is_empty() {
        return Err(LocateError::EmptyList);
    }
    let range = locate_select_list(sql)?;
    Ok(format!("{}{}{}", &sql[..range.start], columns.join(", "), &sql[range.end..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list(sql: &str) -> &str {
        &sql[locate_select_list(sql).unwrap()]
    }

    #[test]
    fn simple_rewrite() {
        assert_eq!(
            rewrite_select_list("SELECT name, id FROM owner", &["id".into()]).unwrap(),
            "SELECT id FROM owner"
        );
    }

    #[test]
    fn subqueries_untouched() {
        let sql = "SELECT a, b FROM t WHERE x IN (SELECT y FROM u) AND z = (SELECT max(z) FROM t)";
        let out = rewrite_select_list(sql, &["b".into()]).unwrap();
        assert_eq!(out, "SELECT b FROM t WHERE x IN (SELECT y FROM u) AND z = (SELECT max(z) FROM t)");
        assert_eq!(list("SELECT (SELECT 1 FROM u) AS one, a FROM t"), "(SELECT 1 FROM u) AS one, a");
    }

    #[test]
    fn leading_with_and_distinct() {
        let sql = "WITH c AS (SELECT id FROM owner) SELECT DISTINCT T1.name, count(*) FROM c JOIN owner T1";
        assert_eq!(list(sql), "T1.name, count(*)");
        let sql = "with recursive r(n) as (select 1 union all select n+1 from r) select n from r limit 3";
        assert_eq!(list(sql), "n");
    }

    #[test]
    fn quoted_keywords_and_functions() {
        assert_eq!(list("SELECT \"from\", 'FROM x', CAST(a AS REAL) FROM t"), "\"from\", 'FROM x', CAST(a AS REAL)");
        assert_eq!(list("SELECT 1"), "1");
        assert_eq!(list("SELECT 1;"), "1");
        assert_eq!(list("-- note FROM\nSELECT a /* FROM */ FROM t"), "a /* FROM */");
    }

    #[test]
    fn wrapped_statement() {
        let sql = "(SELECT a, b FROM t)";
        assert_eq!(rewrite_select_list(sql, &["b".into(), "a".into()]).unwrap(), "(SELECT b, a FROM t)");
    }

    #[test]
    fn refusals() {
        assert_eq!(locate_select_list("UPDATE t SET a = 1"), Err(LocateError::NotSelect));
        assert_eq!(locate_select_list("SELECT a FROM t UNION SELECT b FROM u"), Err(LocateError::Compound));
        assert_eq!(locate_select_list("(SELECT a FROM t) UNION (SELECT b FROM u)"), Err(LocateError::Compound));
        assert_eq!(locate_select_list("SELECT a FROM t WHERE (b = 1"), Err(LocateError::Unbalanced));
        assert_eq!(locate_select_list("SELECT FROM t"), Err(LocateError::EmptyList));
    }

    #[test]
    fn column_list_parsing() {
        assert_eq!(parse_column_list("```json\n[\"id\", \"T1.name\"]\n```"), Some(vec!["id".into(), "T1.name".into()]));
        assert_eq!(parse_column_list("I think id"), None);
        assert_eq!(parse_column_list("[]"), None);
    }
}
