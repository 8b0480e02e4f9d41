//! Python bindings. Values cross the boundary as plain Python objects:
//! tool calls and traces are dicts, result cells are None/int/float/str.

use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Duration;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use raise_core::agent::{self, AgentConfig, BudgetState, ChunkBoundary, ControlAction};
use raise_core::backend::{ScriptedBackend, TapeEntry};
use raise_core::catalog::{self, ExecLimits};
use raise_core::evaluation::{self, CandidateFlag, EvalRecord, ResultSet};
use raise_core::generation;
use raise_core::model::{self, AgentKind, CellValue, Difficulty, Question, ToolCall};
use raise_core::prompts::Prompts;
use raise_core::protocol::{self, ParseOutcome};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn cell_to_py<'py>(py: Python<'py>, c: &CellValue) -> PyResult<Bound<'py, PyAny>> {
    Ok(match c {
        CellValue::Null => py.None().into_bound(py),
        CellValue::Integer(i) => i.into_pyobject(py)?.into_any(),
        CellValue::Real(r) => r.into_pyobject(py)?.into_any(),
        CellValue::Text(s) | CellValue::Blob(s) => s.into_pyobject(py)?.into_any(),
    })
}

fn cell_from_py(obj: &Bound<'_, PyAny>) -> PyResult<CellValue> {
    if obj.is_none() {
        Ok(CellValue::Null)
    } else if obj.is_instance_of::<pyo3::types::PyBool>() {
        Ok(CellValue::Integer(obj.extract::<bool>()? as i64))
    } else if let Ok(i) = obj.extract::<i64>() {
        Ok(CellValue::Integer(i))
    } else if let Ok(f) = obj.extract::<f64>() {
        Ok(CellValue::Real(model::round_real(f)))
    } else {
        Ok(CellValue::Text(obj.extract::<String>()?))
    }
}

fn result_set(rows: &Bound<'_, PyAny>, column_count: Option<usize>) -> PyResult<ResultSet> {
    let rows: Vec<Vec<CellValue>> = rows
        .try_iter()?
        .map(|row| row?.try_iter()?.map(|c| cell_from_py(&c?)).collect())
        .collect::<PyResult<_>>()?;
    let column_count = match column_count {
        Some(n) => n,
        None => rows.first().map_or(0, Vec::len),
    };
    if rows.iter().any(|r| r.len() != column_count) {
        return Err(PyValueError::new_err("rows must all have column_count cells"));
    }
    Ok(ResultSet { column_count, rows })
}

fn agent_kind(name: &str) -> PyResult<AgentKind> {
    match name.to_ascii_lowercase().as_str() {
        "interaction" => Ok(AgentKind::Interaction),
        "static" => Ok(AgentKind::Static),
        other => Err(PyValueError::new_err(format!("unknown agent kind {other:?}"))),
    }
}

/// Parses the text between `[RUN]` and `[EXECUTE]` into a tool-call dict.
#[pyfunction]
fn parse_invocation<'py>(py: Python<'py>, raw: &str) -> PyResult<Bound<'py, PyAny>> {
    match protocol::parse_invocation(raw) {
        ParseOutcome::Ok(call) => to_py(py, &call),
        ParseOutcome::Malformed { reason, .. } => Err(PyValueError::new_err(reason)),
    }
}

#[pyfunction]
fn render_invocation(call: &Bound<'_, PyAny>) -> PyResult<String> {
    Ok(protocol::render_invocation(&from_py::<ToolCall>(call)?))
}

/// First complete invocation as `(inner, end)`: the call text between the
/// tags and the byte offset just past `[EXECUTE]`. None when there is none.
#[pyfunction]
fn scan_stream(text: &str) -> Option<(String, usize)> {
    protocol::scan_stream(text).map(|s| (text[s.inner].to_string(), s.end))
}

#[pyfunction]
fn extract_final_sql(text: &str) -> Option<String> {
    protocol::extract_final_sql(text)
}

#[pyfunction]
fn rewrite_select_list(sql: &str, columns: Vec<String>) -> PyResult<String> {
    generation::rewrite_select_list(sql, &columns).map_err(value_err)
}

#[pyfunction]
fn round_real(x: f64) -> f64 {
    model::round_real(x)
}

/// Set comparison of two row lists with equal column counts.
#[pyfunction]
#[pyo3(signature = (pred, gold, column_count=None))]
fn execution_match(pred: &Bound<'_, PyAny>, gold: &Bound<'_, PyAny>, column_count: Option<usize>) -> PyResult<bool> {
    let a = result_set(pred, column_count)?;
    let b = result_set(gold, column_count)?;
    Ok(evaluation::execution_match(&a, &b))
}

/// Control decision at a chunk boundary: "none", "nudge" or "terminate".
#[pyfunction]
#[pyo3(signature = (tokens_total, tokens_since_last_tool, tool_call=false, finished=false, nudge_armed=true,
                    no_tool_token_cap=1400, total_token_cap=10000))]
fn apply_control(
    tokens_total: u64,
    tokens_since_last_tool: u64,
    tool_call: bool,
    finished: bool,
    nudge_armed: bool,
    no_tool_token_cap: u64,
    total_token_cap: u64,
) -> &'static str {
    let budget = BudgetState {
        tokens_total,
        tokens_since_last_tool,
        nudge_armed,
        ..BudgetState::default()
    };
    let cfg = AgentConfig {
        no_tool_token_cap,
        total_token_cap,
        ..AgentConfig::default()
    };
    match agent::apply_control(&budget, &cfg, ChunkBoundary { tool_call, finished }) {
        ControlAction::None => "none",
        ControlAction::InjectNudge => "nudge",
        ControlAction::InjectTerminator => "terminate",
    }
}

/// Fraction of questions solved within `n` rounds. Each entry is the first
/// correct round of a question, or None.
#[pyfunction]
fn best_of_n(first_correct_rounds: Vec<Option<u32>>, n: u32) -> f64 {
    let records: Vec<EvalRecord> = first_correct_rounds
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let candidates = r
                .map(|round| CandidateFlag {
                    backend_id: String::new(),
                    round,
                    postprocessed: false,
                    matched: true,
                })
                .into_iter()
                .collect();
            EvalRecord::new(i.to_string(), Difficulty::Unknown, candidates)
        })
        .collect();
    evaluation::best_of_n(&records, n)
}

/// Stratified sample over `(id, difficulty)` pairs; returns ids in input order.
#[pyfunction]
fn stratified_sample(items: Vec<(String, String)>, fraction: f64, seed: u64) -> PyResult<Vec<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(PyValueError::new_err("fraction must be in (0, 1]"));
    }
    let questions: Vec<Question> = items
        .into_iter()
        .map(|(id, difficulty)| Question {
            id,
            db_id: String::new(),
            text: String::new(),
            evidence: String::new(),
            gold_sql: None,
            difficulty: Difficulty::from_label(&difficulty),
        })
        .collect();
    Ok(evaluation::stratified_sample(&questions, fraction, seed)
        .into_iter()
        .map(|q| q.id)
        .collect())
}

/// A read-only SQLite database with the exploration tools.
#[pyclass(name = "Database")]
struct PyDatabase {
    inner: Mutex<catalog::Database>,
    limits: ExecLimits,
}

impl PyDatabase {
    fn with<R>(&self, f: impl FnOnce(&catalog::Database) -> R) -> PyResult<R> {
        let db = self.inner.lock().map_err(|_| PyRuntimeError::new_err("database lock poisoned"))?;
        Ok(f(&db))
    }
}

// Soft tool failures come back as text, exactly as the agent sees them.
fn rendered(r: catalog::RenderedResult) -> PyResult<String> {
    Ok(r.text)
}

#[pymethods]
impl PyDatabase {
    #[new]
    #[pyo3(signature = (path, db_id=None, docs_dir=None, timeout_secs=30.0))]
    fn new(path: PathBuf, db_id: Option<String>, docs_dir: Option<PathBuf>, timeout_secs: f64) -> PyResult<Self> {
        let id = db_id.unwrap_or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
        let db = catalog::attach_database(&id, &path, docs_dir.as_deref()).map_err(value_err)?;
        Ok(Self {
            inner: Mutex::new(db),
            limits: ExecLimits {
                timeout: Duration::from_secs_f64(timeout_secs),
                ..ExecLimits::default()
            },
        })
    }

    #[getter]
    fn db_id(&self) -> PyResult<String> {
        self.with(|db| db.catalog().db_id.clone())
    }

    fn read_table_names(&self) -> PyResult<String> {
        rendered(self.with(|db| db.read_table_names())?)
    }

    fn read_table_columns(&self, table: &str) -> PyResult<String> {
        rendered(self.with(|db| db.read_table_columns(table))?)
    }

    fn read_columns_documentation(&self, columns: Vec<String>) -> PyResult<String> {
        rendered(self.with(|db| db.read_columns_documentation(&columns))?)
    }

    fn run_query(&self, sql: &str) -> PyResult<String> {
        rendered(self.with(|db| db.run_query(sql, &self.limits))?)
    }

    /// Parses and executes one invocation; returns the text the agent would see.
    fn execute(&self, raw: &str) -> PyResult<String> {
        match protocol::parse_invocation(raw) {
            ParseOutcome::Ok(call) => Ok(self.with(|db| db.execute(&call, &self.limits))?.text),
            ParseOutcome::Malformed { reason, .. } => Err(PyValueError::new_err(reason)),
        }
    }

    /// Rows as lists of Python values, for use with `execution_match`.
    fn query<'py>(&self, py: Python<'py>, sql: &str) -> PyResult<Bound<'py, PyList>> {
        let rows = self
            .with(|db| evaluation::execute_for_eval(sql, db, self.limits.timeout))?
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        let out = PyList::empty(py);
        for row in &rows.rows {
            let cells = row.iter().map(|c| cell_to_py(py, c)).collect::<PyResult<Vec<_>>>()?;
            out.append(PyList::new(py, cells)?)?;
        }
        Ok(out)
    }

    /// Runs the exploration agent against a scripted tape of model replies and
    /// returns the trace as a dict.
    #[pyo3(signature = (question, tape, evidence="", agent_kind="interaction"))]
    fn explore<'py>(
        &self,
        py: Python<'py>,
        question: &str,
        tape: Vec<String>,
        evidence: &str,
        agent_kind: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let cfg = AgentConfig {
            agent_kind: self::agent_kind(agent_kind)?,
            limits: self.limits.clone(),
            ..AgentConfig::default()
        };
        let db_id = self.db_id()?;
        let q = Question {
            id: "q".into(),
            db_id,
            text: question.into(),
            evidence: evidence.into(),
            gold_sql: None,
            difficulty: Difficulty::Unknown,
        };
        let backend = ScriptedBackend::new("python", tape.into_iter().map(TapeEntry::text).collect());
        let trace = self.with(|db| agent::run_agent(&q, db, &cfg, &backend, &Prompts::default()))?;
        Ok(to_py(py, &trace)?.cast_into::<PyDict>()?)
    }
}

#[pymodule]
fn raise_sql(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDatabase>()?;
    m.add_function(wrap_pyfunction!(parse_invocation, m)?)?;
    m.add_function(wrap_pyfunction!(render_invocation, m)?)?;
    m.add_function(wrap_pyfunction!(scan_stream, m)?)?;
    m.add_function(wrap_pyfunction!(extract_final_sql, m)?)?;
    m.add_function(wrap_pyfunction!(rewrite_select_list, m)?)?;
    m.add_function(wrap_pyfunction!(round_real, m)?)?;
    m.add_function(wrap_pyfunction!(execution_match, m)?)?;
    m.add_function(wrap_pyfunction!(apply_control, m)?)?;
    m.add_function(wrap_pyfunction!(best_of_n, m)?)?;
    m.add_function(wrap_pyfunction!(stratified_sample, m)?)?;
    Ok(())
}
