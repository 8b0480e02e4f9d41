//! Domain types shared across the pipeline, and the cell canonicalization
//! that every result comparison and rendering goes through.

use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Number of decimal places reals are rounded to before comparison.
pub const REAL_DECIMALS: u32 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Simple,
    Moderate,
    Challenging,
    Unknown,
}

impl Difficulty {
    pub const ALL: [Difficulty; 4] = [
        Difficulty::Simple,
        Difficulty::Moderate,
        Difficulty::Challenging,
        Difficulty::Unknown,
    ];

    /// Parses a dataset label. Anything unrecognized maps to `Unknown`.
    pub fn from_label(label: &str) -> Self {
        match label.trim().to_ascii_lowercase().as_str() {
            "simple" | "easy" => Difficulty::Simple,
            "moderate" | "medium" => Difficulty::Moderate,
            "challenging" | "hard" | "extra" => Difficulty::Challenging,
            _ => Difficulty::Unknown,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Simple => "simple",
            Difficulty::Moderate => "moderate",
            Difficulty::Challenging => "challenging",
            Difficulty::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub db_id: String,
    pub text: String,
    #[serde(default)]
    pub evidence: String,
    #[serde(default)]
    pub gold_sql: Option<String>,
    pub difficulty: Difficulty,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RecordError {
    #[error("malformed question record: missing field `{0}`")]
    MissingField(&'static str),
    #[error("malformed question record: expected an object")]
    NotAnObject,
}

/// Builds a [`Question`] from one record of a benchmark questions file.
///
/// `index` is used as the identifier when the record carries no
/// `question_id`.
pub fn parse_question_record(
    raw: &serde_json::Value,
    index: usize,
) -> Result<Question, RecordError> {
    let obj = raw.as_object().ok_or(RecordError::NotAnObject)?;
    let text_field = |key: &str| -> Option<String> {
        obj.get(key).and_then(|v| match v {
            serde_json::Value::String(s) => Some(s.clone()),
            serde_json::Value::Number(n) => Some(n.to_string()),
            _ => None,
        })
    };

    let db_id = text_field("db_id")
        .filter(|s| !s.trim().is_empty())
        .ok_or(RecordError::MissingField("db_id"))?;
    let text = text_field("question")
        .filter(|s| !s.trim().is_empty())
        .ok_or(RecordError::MissingField("question"))?;
    let id = text_field("question_id")
        .or_else(|| text_field("id"))
        .unwrap_or_else(|| index.to_string());
    let gold_sql = text_field("SQL")
        .or_else(|| text_field("sql"))
        .or_else(|| text_field("query"))
        .filter(|s| !s.trim().is_empty());

    Ok(Question {
        id,
        db_id,
        text,
        evidence: text_field("evidence").unwrap_or_default(),
        gold_sql,
        difficulty: text_field("difficulty")
            .map(|d| Difficulty::from_label(&d))
            .unwrap_or(Difficulty::Unknown),
    })
}

/// The four tools the exploration agent can invoke.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "tool", rename_all = "snake_case")]
pub enum ToolCall {
    ReadTableNames,
    ReadTableColumns { table: String },
    ReadColumnsDocumentation { columns: Vec<String> },
    RunQuery { sql: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolName {
    ReadTableNames,
    ReadTableColumns,
    ReadColumnsDocumentation,
    RunQuery,
}

impl ToolName {
    pub const ALL: [ToolName; 4] = [
        ToolName::ReadTableNames,
        ToolName::ReadTableColumns,
        ToolName::ReadColumnsDocumentation,
        ToolName::RunQuery,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ToolName::ReadTableNames => "read_table_names",
            ToolName::ReadTableColumns => "read_table_columns",
            ToolName::ReadColumnsDocumentation => "read_columns_documentation",
            ToolName::RunQuery => "run_query",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(name))
    }

    /// Signature line shown to the model in the tool list.
    pub fn signature(self) -> &'static str {
        match self {
            ToolName::ReadTableNames => "read_table_names()",
            ToolName::ReadTableColumns => "read_table_columns(table_name: str)",
            ToolName::ReadColumnsDocumentation => {
                "read_columns_documentation(column_names: list[str])"
            }
            ToolName::RunQuery => "run_query(sql: str)",
        }
    }
}

impl fmt::Display for ToolName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl ToolCall {
    pub fn name(&self) -> ToolName {
        match self {
            ToolCall::ReadTableNames => ToolName::ReadTableNames,
            ToolCall::ReadTableColumns { .. } => ToolName::ReadTableColumns,
            ToolCall::ReadColumnsDocumentation { .. } => ToolName::ReadColumnsDocumentation,
            ToolCall::RunQuery { .. } => ToolName::RunQuery,
        }
    }

    /// Call expression without tags, e.g. `read_table_columns(pet)`.
    pub fn render_call(&self) -> String {
        match self {
            ToolCall::ReadTableNames => "read_table_names()".to_string(),
            ToolCall::ReadTableColumns { table } => format!("read_table_columns({table})"),
            ToolCall::ReadColumnsDocumentation { columns } => {
                let items: Vec<String> = columns.iter().map(|c| format!("\"{c}\"")).collect();
                format!("read_columns_documentation([{}])", items.join(", "))
            }
            ToolCall::RunQuery { sql } => format!("run_query({sql})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationRecord {
    pub index: usize,
    pub call: ToolCall,
    /// Text shown to the model. On failure this carries the error rendering.
    pub rendered_result: String,
    pub row_count: Option<u64>,
    pub error: Option<String>,
    pub truncated: bool,
}

impl OperationRecord {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Interaction,
    Static,
}

impl AgentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Interaction => "interaction",
            AgentKind::Static => "static",
        }
    }

    pub fn tools(self) -> &'static [ToolName] {
        match self {
            AgentKind::Interaction => &ToolName::ALL,
            AgentKind::Static => &ToolName::ALL[..3],
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AgentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "interaction" => Ok(AgentKind::Interaction),
            "static" => Ok(AgentKind::Static),
            other => Err(format!("unknown agent kind `{other}` (expected interaction or static)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Natural,
    ForcedBudget,
    /// The operation cap was reached and the final answer was forced.
    MaxOperations,
    BackendError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplorationTrace {
    pub question_id: String,
    pub agent_kind: AgentKind,
    pub operations: Vec<OperationRecord>,
    pub raw_transcript: String,
    pub tokens_generated: u64,
    pub termination: Termination,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum ExecOutcome {
    Ok { rows: u64 },
    Empty,
    Error { message: String },
}

impl ExecOutcome {
    pub fn is_nonempty_ok(&self) -> bool {
        matches!(self, ExecOutcome::Ok { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqlCandidate {
    pub sql: String,
    pub backend_id: String,
    pub round: u32,
    pub postprocessed: bool,
    pub exec_outcome: ExecOutcome,
}

/// A canonicalized database cell.
///
/// Equality follows tuple semantics: NULL equals NULL, and an integral real
/// equals the integer with the same value.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "lowercase")]
pub enum CellValue {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(String),
}

/// A cell as read from the engine, before canonicalization.
#[derive(Debug, Clone, PartialEq)]
pub enum RawCell<'a> {
    Null,
    Integer(i64),
    Real(f64),
    Text(&'a [u8]),
    Blob(&'a [u8]),
}

impl<'a> From<rusqlite::types::ValueRef<'a>> for RawCell<'a> {
    fn from(v: rusqlite::types::ValueRef<'a>) -> Self {
        use rusqlite::types::ValueRef;
        match v {
            ValueRef::Null => RawCell::Null,
            ValueRef::Integer(i) => RawCell::Integer(i),
            ValueRef::Real(r) => RawCell::Real(r),
            ValueRef::Text(t) => RawCell::Text(t),
            ValueRef::Blob(b) => RawCell::Blob(b),
        }
    }
}

pub fn canonicalize_value(v: RawCell<'_>) -> CellValue {
    match v {
        RawCell::Null => CellValue::Null,
        RawCell::Integer(i) => CellValue::Integer(i),
        RawCell::Real(r) => CellValue::Real(round_real(r)),
        RawCell::Text(t) => CellValue::Text(String::from_utf8_lossy(t).into_owned()),
        RawCell::Blob(b) => CellValue::Blob(blob_digest(b)),
    }
}

impl CellValue {
    /// Re-applies canonicalization to an already-built value.
    pub fn canonical(self) -> CellValue {
        match self {
            CellValue::Real(r) => CellValue::Real(round_real(r)),
            other => other,
        }
    }

    pub fn integral_value(&self) -> Option<i64> {
        match *self {
            CellValue::Integer(i) => Some(i),
            CellValue::Real(r) if r.fract() == 0.0 && r >= -(2f64.powi(63)) && r < 2f64.powi(63) => {
                Some(r as i64)
            }
            _ => None,
        }
    }
}

impl PartialEq for CellValue {
    fn eq(&self, other: &Self) -> bool {
        use CellValue::*;
        match (self, other) {
            (Null, Null) => true,
            (Text(a), Text(b)) => a == b,
            (Blob(a), Blob(b)) => a == b,
            (Real(a), Real(b)) => real_key(*a) == real_key(*b),
            (Integer(_), Real(_)) | (Real(_), Integer(_)) | (Integer(_), Integer(_)) => {
                match (self.integral_value(), other.integral_value()) {
                    (Some(a), Some(b)) => a == b,
                    _ => false,
                }
            }
            _ => false,
        }
    }
}

impl Eq for CellValue {}

impl Hash for CellValue {
    fn hash<H: Hasher>(&self, state: &mut H) {
        if let Some(i) = self.integral_value() {
            0u8.hash(state);
            i.hash(state);
            return;
        }
        match self {
            CellValue::Null => 1u8.hash(state),
            CellValue::Real(r) => {
                2u8.hash(state);
                real_key(*r).hash(state);
            }
            CellValue::Text(t) => {
                3u8.hash(state);
                t.hash(state);
            }
            CellValue::Blob(b) => {
                4u8.hash(state);
                b.hash(state);
            }
            CellValue::Integer(_) => unreachable!("integers are integral"),
        }
    }
}

impl fmt::Display for CellValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellValue::Null => f.write_str("NULL"),
            CellValue::Integer(i) => write!(f, "{i}"),
            CellValue::Real(r) => write!(f, "{r:?}"),
            CellValue::Text(t) => f.write_str(t),
            CellValue::Blob(d) => write!(f, "<blob sha256:{}>", &d[..16.min(d.len())]),
        }
    }
}

fn real_key(r: f64) -> u64 {
    if r.is_nan() {
        f64::NAN.to_bits()
    } else if r == 0.0 {
        0.0f64.to_bits()
    } else {
        r.to_bits()
    }
}

pub fn blob_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Rounds half-to-even at [`REAL_DECIMALS`] places, operating on the
/// shortest decimal representation of `x` so that decimal ties are real ties.
pub fn round_real(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    if x == 0.0 {
        return 0.0;
    }
    // `{:e}` yields the shortest round-tripping digits, e.g. "-3.0000004e0".
    let sci = format!("{:e}", x.abs());
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i64 = exp.parse().expect("exponent");
    let digits: Vec<u8> = mantissa.bytes().filter(u8::is_ascii_digit).map(|b| b - b'0').collect();

    // value = digits * 10^(exp - (len - 1))
    let frac_digits = digits.len() as i64 - 1 - exp;
    let scale = REAL_DECIMALS as i64;
    if frac_digits <= scale {
        return x;
    }
    let drop = (frac_digits - scale) as usize;
    let (kept, dropped): (&[u8], &[u8]) = if drop >= digits.len() {
        (&[], &digits[..])
    } else {
        digits.split_at(digits.len() - drop)
    };
    // Dropped digits beyond the available ones are implicit leading zeros.
    let leading_zeros = drop.saturating_sub(digits.len());
    let first = if leading_zeros > 0 { 0 } else { dropped.first().copied().unwrap_or(0) };
    let rest_nonzero = if leading_zeros > 0 {
        dropped.iter().any(|&d| d != 0)
    } else {
        dropped.iter().skip(1).any(|&d| d != 0)
    };
    let last_kept_odd = kept.last().is_some_and(|d| d % 2 == 1);
    let round_up = first > 5 || (first == 5 && (rest_nonzero || last_kept_odd));

    let mut units: Vec<u8> = kept.to_vec();
    if round_up {
        let mut i = units.len();
        loop {
            if i == 0 {
                units.insert(0, 1);
                break;
            }
            i -= 1;
            if units[i] == 9 {
                units[i] = 0;
            } else {
                units[i] += 1;
                break;
            }
        }
    }
    if units.is_empty() || units.iter().all(|&d| d == 0) {
        return 0.0;
    }
    let text: String = units.iter().map(|d| char::from(b'0' + d)).collect();
    let magnitude: f64 = format!("{text}e-{scale}").parse().expect("decimal literal");
    if x.is_sign_negative() {
        -magnitude
    } else {
        magnitude
    }
}
