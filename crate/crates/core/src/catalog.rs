//! Attached databases, their documentation catalogs, and the four
//! exploration tools.
//!
//! A [`DbCatalog`] is immutable metadata and may be shared between workers.
//! A [`Database`] owns one read-only connection and must stay on one worker;
//! call [`DbCatalog::connect`] to get another connection for another worker.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::warn;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{canonicalize_value, CellValue, OperationRecord, RawCell, ToolCall};

/// Header bytes of every SQLite 3 database file.
const SQLITE_MAGIC: &[u8; 16] = b"SQLite format 3\0";

#[derive(Debug, Error)]
pub enum AttachError {
    #[error("cannot read database {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not an SQLite 3 database")]
    NotADatabase { path: PathBuf },
    #[error("cannot open database {path}: {source}")]
    Sqlite {
        path: PathBuf,
        #[source]
        source: rusqlite::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecLimits {
    /// Data rows shown to the model.
    pub row_cap: usize,
    /// Characters per rendered cell.
    pub cell_width: usize,
    #[serde(with = "secs")]
    pub timeout: Duration,
}

impl Default for ExecLimits {
    fn default() -> Self {
        Self {
            row_cap: 20,
            cell_width: 80,
            timeout: Duration::from_secs(30),
        }
    }
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnInfo {
    pub name: String,
    pub declared_type: String,
    pub is_primary_key: bool,
    /// `table.column` targets.
    pub foreign_keys: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DocEntry {
    pub original_column_name: String,
    pub human_column_name: String,
    pub description: String,
    pub data_format: String,
    pub value_description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocRecord {
    pub table: String,
    pub column: String,
    pub entry: DocEntry,
    /// The documented column does not exist in the schema.
    pub dangling: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableInfo {
    pub name: String,
    pub columns: Vec<ColumnInfo>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DbCatalog {
    pub db_id: String,
    pub path: PathBuf,
    pub tables: Vec<TableInfo>,
    /// Keyed by lowercase `table.column`.
    pub docs: HashMap<String, DocRecord>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedResult {
    pub text: String,
    pub row_count: u64,
    pub truncated: bool,
    /// Set when the tool failed softly; `text` carries the message.
    pub error: Option<String>,
}

impl RenderedResult {
    fn ok(text: String, row_count: u64, truncated: bool) -> Self {
        Self {
            text,
            row_count,
            truncated,
            error: None,
        }
    }

    fn soft_error(message: String) -> Self {
        Self {
            text: message.clone(),
            row_count: 0,
            truncated: false,
            error: Some(message),
        }
    }
}

impl DbCatalog {
    pub fn table(&self, name: &str) -> Option<&TableInfo> {
        self.tables.iter().find(|t| t.name.eq_ignore_ascii_case(name))
    }

    pub fn table_names(&self) -> impl Iterator<Item = &str> {
        self.tables.iter().map(|t| t.name.as_str())
    }

    /// Opens another read-only connection on the same file.
    pub fn connect(self: &Arc<Self>) -> Result<Database, AttachError> {
        let conn = open_read_only(&self.path)?;
        Ok(Database {
            catalog: Arc::clone(self),
            conn,
        })
    }

    pub fn doc(&self, qualified: &str) -> Option<&DocRecord> {
        self.docs.get(&qualified.trim().to_ascii_lowercase())
    }
}

/// One read-only connection plus the shared catalog.
pub struct Database {
    catalog: Arc<DbCatalog>,
    conn: Connection,
}

impl std::fmt::Debug for Database {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Database")
            .field("db_id", &self.catalog.db_id)
            .field("path", &self.catalog.path)
            .finish()
    }
}

fn open_read_only(path: &Path) -> Result<Connection, AttachError> {
    let mut header = [0u8; 16];
    {
        use std::io::Read;
        let mut file = std::fs::File::open(path).map_err(|source| AttachError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let n = file.read(&mut header).map_err(|source| AttachError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if n < header.len() || &header != SQLITE_MAGIC {
            return Err(AttachError::NotADatabase {
                path: path.to_path_buf(),
            });
        }
    }
    let sqlite_err = |source| AttachError::Sqlite {
        path: path.to_path_buf(),
        source,
    };
    let conn = Connection::open_with_flags(
        path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )
    .map_err(sqlite_err)?;
    conn.pragma_update(None, "query_only", true).map_err(sqlite_err)?;
    Ok(conn)
}

/// Opens `path` read-only and introspects its schema. Documentation is loaded
/// from `docs_dir` (one CSV per table) when given.
pub fn attach_database(
    db_id: &str,
    path: &Path,
    docs_dir: Option<&Path>,
) -> Result<Database, AttachError> {
    let conn = open_read_only(path)?;
    let tables = introspect(&conn).map_err(|source| AttachError::Sqlite {
        path: path.to_path_buf(),
        source,
    })?;
    let mut catalog = DbCatalog {
        db_id: db_id.to_string(),
        path: path.to_path_buf(),
        tables,
        docs: HashMap::new(),
        warnings: Vec::new(),
    };
    if let Some(dir) = docs_dir {
        load_docs(&mut catalog, dir);
    }
    Ok(Database {
        catalog: Arc::new(catalog),
        conn,
    })
}

fn introspect(conn: &Connection) -> rusqlite::Result<Vec<TableInfo>> {
    let names: Vec<String> = conn
        .prepare(
            "SELECT name FROM sqlite_master \
             WHERE type = 'table' AND name NOT LIKE 'sqlite\\_%' ESCAPE '\\' ORDER BY rowid",
        )?
        .query_map([], |r| r.get(0))?
        .collect::<Result<_, _>>()?;

    let mut tables = Vec::with_capacity(names.len());
    for name in names {
        let mut columns: Vec<ColumnInfo> = conn
            .prepare("SELECT name, type, pk FROM pragma_table_info(?1) ORDER BY cid")?
            .query_map([&name], |r| {
                Ok(ColumnInfo {
                    name: r.get(0)?,
                    declared_type: r.get::<_, Option<String>>(1)?.unwrap_or_default(),
                    is_primary_key: r.get::<_, i64>(2)? > 0,
                    foreign_keys: Vec::new(),
                })
            })?
            .collect::<Result<_, _>>()?;

        let fks: Vec<(String, String, Option<String>)> = conn
            .prepare(
                "SELECT \"from\", \"table\", \"to\" FROM pragma_foreign_key_list(?1) ORDER BY id, seq",
            )?
            .query_map([&name], |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)))?
            .collect::<Result<_, _>>()?;
        for (from, target_table, to) in fks {
            let to = match to {
                Some(to) => to,
                // Implicit reference to the target's primary key.
                None => conn
                    .query_row(
                        "SELECT name FROM pragma_table_info(?1) WHERE pk > 0 ORDER BY pk LIMIT 1",
                        [&target_table],
                        |r| r.get(0),
                    )
                    .unwrap_or_else(|_| "rowid".to_string()),
            };
            if let Some(col) = columns.iter_mut().find(|c| c.name.eq_ignore_ascii_case(&from)) {
                col.foreign_keys.push(format!("{target_table}.{to}"));
            }
        }
        tables.push(TableInfo { name, columns });
    }
    Ok(tables)
}

fn load_docs(catalog: &mut DbCatalog, dir: &Path) {
    let entries = match std::fs::read_dir(dir) {
        Ok(entries) => entries,
        Err(e) => {
            let msg = format!("documentation directory {} unreadable: {e}", dir.display());
            warn!("{msg}");
            catalog.warnings.push(msg);
            return;
        }
    };
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .is_some_and(|ext| ext.eq_ignore_ascii_case("csv"))
        })
        .collect();
    files.sort();

    for file in files {
        let stem = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let table = catalog
            .table(&stem)
            .map(|t| t.name.clone())
            .unwrap_or_else(|| stem.clone());
        let bytes = match std::fs::read(&file) {
            Ok(b) => b,
            Err(e) => {
                let msg = format!("skipping {}: {e}", file.display());
                warn!("{msg}");
                catalog.warnings.push(msg);
                continue;
            }
        };
        let text = String::from_utf8_lossy(&bytes);
        let text = text.trim_start_matches('\u{feff}');
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .from_reader(text.as_bytes());

        let header: Vec<String> = match reader.headers() {
            Ok(h) => h.iter().map(|s| s.trim().to_ascii_lowercase()).collect(),
            Err(e) => {
                let msg = format!("skipping {}: bad header: {e}", file.display());
                warn!("{msg}");
                catalog.warnings.push(msg);
                continue;
            }
        };
        let col = |name: &str| header.iter().position(|h| h == name);
        let (Some(orig_idx), human_idx, desc_idx, fmt_idx, val_idx) = (
            col("original_column_name"),
            col("column_name"),
            col("column_description"),
            col("data_format"),
            col("value_description"),
        ) else {
            let msg = format!("skipping {}: no original_column_name column", file.display());
            warn!("{msg}");
            catalog.warnings.push(msg);
            continue;
        };

        for (line, record) in reader.records().enumerate() {
            let record = match record {
                Ok(r) => r,
                Err(e) => {
                    let msg = format!("{}: skipping row {}: {e}", file.display(), line + 2);
                    warn!("{msg}");
                    catalog.warnings.push(msg);
                    continue;
                }
            };
            let field = |idx: Option<usize>| {
                idx.and_then(|i| record.get(i))
                    .map(|s| s.trim().to_string())
                    .unwrap_or_default()
            };
            let original = field(Some(orig_idx));
            if original.is_empty() {
                let msg = format!("{}: skipping row {}: empty column name", file.display(), line + 2);
                warn!("{msg}");
                catalog.warnings.push(msg);
                continue;
            }
            let schema_col = catalog
                .table(&table)
                .and_then(|t| t.columns.iter().find(|c| c.name.eq_ignore_ascii_case(&original)));
            let dangling = schema_col.is_none();
            let column = schema_col.map(|c| c.name.clone()).unwrap_or_else(|| original.clone());
            let key = format!("{table}.{column}").to_ascii_lowercase();
            catalog.docs.insert(
                key,
                DocRecord {
                    table: table.clone(),
                    column,
                    entry: DocEntry {
                        original_column_name: original,
                        human_column_name: field(human_idx),
                        description: field(desc_idx),
                        data_format: field(fmt_idx),
                        value_description: field(val_idx),
                    },
                    dangling,
                },
            );
        }
    }
}

/// Why a sandboxed statement did not produce rows.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueryError {
    #[error("read-only: statement rejected")]
    Rejected,
    #[error("query timed out after {}s", .0.as_secs_f64())]
    Timeout(Duration),
    #[error("result exceeds {0} rows")]
    TooManyRows(usize),
    #[error("{0}")]
    Sql(String),
}

/// Rows materialized from a sandboxed statement.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRows {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<CellValue>>,
    /// Rows produced in total; may exceed `rows.len()` when only a prefix is kept.
    pub total_rows: u64,
}

/// First keyword of a statement after leading whitespace, comments and
/// opening parentheses.
fn leading_keyword(sql: &str) -> String {
    let mut rest = sql;
    loop {
        let trimmed = rest.trim_start();
        if let Some(after) = trimmed.strip_prefix("--") {
            rest = after.split_once('\n').map(|(_, r)| r).unwrap_or("");
        } else if let Some(after) = trimmed.strip_prefix("/*") {
            rest = after.split_once("*/").map(|(_, r)| r).unwrap_or("");
        } else if let Some(after) = trimmed.strip_prefix('(') {
            rest = after;
        } else {
            rest = trimmed;
            break;
        }
    }
    rest.chars()
        .take_while(|c| c.is_ascii_alphabetic())
        .collect::<String>()
        .to_ascii_uppercase()
}

impl Database {
    pub fn catalog(&self) -> &Arc<DbCatalog> {
        &self.catalog
    }

    /// Runs one read-only statement. At most `keep` rows are materialized;
    /// with `ceiling` set, producing more than `ceiling` rows is an error.
    pub fn query(
        &self,
        sql: &str,
        timeout: Duration,
        keep: usize,
        ceiling: Option<usize>,
    ) -> Result<QueryRows, QueryError> {
        if !matches!(leading_keyword(sql).as_str(), "SELECT" | "WITH") {
            return Err(QueryError::Rejected);
        }
        let mut stmt = match self.conn.prepare(sql) {
            Ok(stmt) => stmt,
            Err(rusqlite::Error::MultipleStatement) => return Err(QueryError::Rejected),
            Err(e) => return Err(QueryError::Sql(sqlite_message(&e))),
        };
        if !stmt.readonly() {
            return Err(QueryError::Rejected);
        }
        let columns: Vec<String> = stmt.column_names().into_iter().map(String::from).collect();
        let ncols = columns.len();

        let deadline = Instant::now() + timeout;
        self.conn
            .progress_handler(1000, Some(move || Instant::now() >= deadline));
        let result = (|| {
            let mut rows = Vec::new();
            let mut total: u64 = 0;
            let mut cursor = stmt.query([])?;
            while let Some(row) = cursor.next()? {
                total += 1;
                if let Some(max) = ceiling {
                    if total as usize > max {
                        return Ok(Err(QueryError::TooManyRows(max)));
                    }
                }
                if rows.len() < keep {
                    let mut cells = Vec::with_capacity(ncols);
                    for i in 0..ncols {
                        cells.push(canonicalize_value(RawCell::from(row.get_ref(i)?)));
                    }
                    rows.push(cells);
                }
            }
            Ok(Ok(QueryRows {
                columns: columns.clone(),
                rows,
                total_rows: total,
            }))
        })();
        self.conn.progress_handler(0, None::<fn() -> bool>);

        match result {
            Ok(inner) => inner,
            Err(rusqlite::Error::SqliteFailure(e, _))
                if e.code == rusqlite::ErrorCode::OperationInterrupted =>
            {
                Err(QueryError::Timeout(timeout))
            }
            Err(e) => Err(QueryError::Sql(sqlite_message(&e))),
        }
    }

    pub fn read_table_names(&self) -> RenderedResult {
        if self.catalog.tables.is_empty() {
            return RenderedResult::ok("(no tables)".into(), 0, false);
        }
        let names: Vec<&str> = self.catalog.table_names().collect();
        RenderedResult::ok(names.join("\n"), names.len() as u64, false)
    }

    pub fn read_table_columns(&self, table: &str) -> RenderedResult {
        let Some(info) = self.catalog.table(table.trim()) else {
            let available: Vec<&str> = self.catalog.table_names().collect();
            return RenderedResult::soft_error(format!(
                "table not found: {}; available: {}",
                table.trim(),
                available.join(", ")
            ));
        };
        let mut out = String::new();
        for (i, col) in info.columns.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let ty = if col.declared_type.is_empty() { "ANY" } else { &col.declared_type };
            let _ = write!(out, "{} {ty}", col.name);
            if col.is_primary_key {
                out.push_str(" PRIMARY KEY");
            }
            for fk in &col.foreign_keys {
                let _ = write!(out, " REFERENCES {fk}");
            }
        }
        RenderedResult::ok(out, info.columns.len() as u64, false)
    }

    pub fn read_columns_documentation(&self, names: &[String]) -> RenderedResult {
        if names.is_empty() {
            return RenderedResult::ok("(no columns requested)".into(), 0, false);
        }
        let mut lines = Vec::with_capacity(names.len());
        for name in names {
            let name = name.trim();
            let records: Vec<&DocRecord> = if name.contains('.') {
                self.catalog.doc(name).into_iter().collect()
            } else {
                let mut found: Vec<&DocRecord> = self
                    .catalog
                    .docs
                    .values()
                    .filter(|d| d.column.eq_ignore_ascii_case(name))
                    .collect();
                found.sort_by(|a, b| a.table.cmp(&b.table));
                found
            };
            if records.is_empty() {
                lines.push(format!("{name}: no documentation"));
            }
            for rec in records {
                lines.push(render_doc(rec));
            }
        }
        RenderedResult::ok(lines.join("\n"), names.len() as u64, false)
    }

    pub fn run_query(&self, sql: &str, limits: &ExecLimits) -> RenderedResult {
        match self.query(sql, limits.timeout, limits.row_cap, None) {
            Ok(rows) => render_table(&rows, limits),
            Err(e) => RenderedResult::soft_error(e.to_string()),
        }
    }

    /// Executes a parsed tool call.
    pub fn execute(&self, call: &ToolCall, limits: &ExecLimits) -> RenderedResult {
        match call {
            ToolCall::ReadTableNames => self.read_table_names(),
            ToolCall::ReadTableColumns { table } => self.read_table_columns(table),
            ToolCall::ReadColumnsDocumentation { columns } => {
                self.read_columns_documentation(columns)
            }
            ToolCall::RunQuery { sql } => self.run_query(sql, limits),
        }
    }

    pub fn execute_record(&self, index: usize, call: ToolCall, limits: &ExecLimits) -> OperationRecord {
        let result = self.execute(&call, limits);
        OperationRecord {
            index,
            call,
            rendered_result: result.text,
            row_count: result.error.is_none().then_some(result.row_count),
            error: result.error,
            truncated: result.truncated,
        }
    }
}

fn sqlite_message(e: &rusqlite::Error) -> String {
    match e {
        rusqlite::Error::SqliteFailure(_, Some(msg)) => msg.clone(),
        rusqlite::Error::SqlInputError { msg, .. } => msg.clone(),
        other => other.to_string(),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn render_doc(rec: &DocRecord) -> String {
    let e = &rec.entry;
    let mut line = format!("{}.{}:", rec.table, rec.column);
    let mut parts = Vec::new();
    if !e.description.is_empty() {
        parts.push(one_line(&e.description));
    }
    if !e.human_column_name.is_empty() && !e.human_column_name.eq_ignore_ascii_case(&rec.column) {
        parts.push(format!("column name: {}", one_line(&e.human_column_name)));
    }
    if !e.data_format.is_empty() {
        parts.push(format!("format: {}", one_line(&e.data_format)));
    }
    if !e.value_description.is_empty() {
        parts.push(format!("values: {}", one_line(&e.value_description)));
    }
    if parts.is_empty() {
        parts.push("(empty documentation)".into());
    }
    line.push(' ');
    line.push_str(&parts.join(" | "));
    line
}

fn clip(s: &str, width: usize) -> String {
    if s.chars().count() <= width {
        return s.to_string();
    }
    if width <= 3 {
        return s.chars().take(width).collect();
    }
    let mut out: String = s.chars().take(width - 3).collect();
    out.push_str("...");
    out
}

fn render_cell(v: &CellValue, width: usize) -> String {
    let text = match v {
        CellValue::Text(t) => t.replace(['\n', '\r', '\t'], " "),
        other => other.to_string(),
    };
    clip(&text, width)
}

/// Renders rows as an aligned text table with a header line. Rows beyond the
/// cap are summarized in a footer.
pub fn render_table(rows: &QueryRows, limits: &ExecLimits) -> RenderedResult {
    let header: Vec<String> = rows.columns.iter().map(|c| clip(&one_line(c), limits.cell_width)).collect();
    let shown: Vec<Vec<String>> = rows
        .rows
        .iter()
        .take(limits.row_cap)
        .map(|r| r.iter().map(|c| render_cell(c, limits.cell_width)).collect())
        .collect();

    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in &shown {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let fmt_row = |cells: &[String]| -> String {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}", w = *w))
            .collect::<Vec<_>>()
            .join(" | ")
            .trim_end()
            .to_string()
    };

    let mut lines = vec![fmt_row(&header)];
    lines.push(
        widths
            .iter()
            .map(|w| "-".repeat((*w).max(1)))
            .collect::<Vec<_>>()
            .join("-+-"),
    );
    for row in &shown {
        lines.push(fmt_row(row));
    }
    let hidden = rows.total_rows.saturating_sub(shown.len() as u64);
    if rows.total_rows == 0 {
        lines.push("(0 rows)".into());
    } else if hidden > 0 {
        lines.push(format!("... ({hidden} more rows)"));
    }
    RenderedResult::ok(lines.join("\n"), rows.total_rows, hidden > 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path) -> PathBuf {
        let path = dir.join("pets.sqlite");
        let conn = Connection::open(&path).unwrap();
        conn.execute_batch(
            "CREATE TABLE owner (id INTEGER PRIMARY KEY, name TEXT);
             CREATE TABLE pet (id INTEGER PRIMARY KEY, owner_id INTEGER REFERENCES owner(id), species TEXT);
             INSERT INTO owner VALUES (1, 'Ann'), (2, 'Bob');
             INSERT INTO pet VALUES (1, 1, 'cat'), (2, 1, 'dog'), (3, 2, 'cat');",
        )
        .unwrap();
        path
    }

    fn attach(dir: &Path) -> Database {
        attach_database("pets", &fixture(dir), None).unwrap()
    }

    #[test]
    fn table_names_in_declaration_order() {
        let dir = tempfile::tempdir().unwrap();
        let db = attach(dir.path());
        let r = db.read_table_names();
        assert_eq!(r.text, "owner\npet");
        assert_eq!(r.row_count, 2);
        assert!(db.catalog().docs.is_empty());
    }

    #[test]
    fn columns_case_insensitive_with_keys() {
        let dir = tempfile::tempdir().unwrap();
        let db = attach(dir.path());
        let lower = db.read_table_columns("pet");
        assert_eq!(
            lower.text,
            "id INTEGER PRIMARY KEY\nowner_id INTEGER REFERENCES owner.id\nspecies TEXT"
        );
        assert_eq!(db.read_table_columns("PET"), lower);
        let miss = db.read_table_columns("ghost");
        assert_eq!(miss.text, "table not found: ghost; available: owner, pet");
        assert!(miss.error.is_some());
    }

    #[test]
    fn empty_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.sqlite");
        std::fs::write(&path, b"").unwrap();
        assert!(matches!(
            attach_database("empty", &path, None),
            Err(AttachError::NotADatabase { .. })
        ));
        assert!(matches!(
            attach_database("missing", &dir.path().join("nope.sqlite"), None),
            Err(AttachError::Io { .. })
        ));
    }

    #[test]
    fn database_without_tables() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("none.sqlite");
        let conn = Connection::open(&path).unwrap();
        conn.execute_batch("CREATE TABLE t(x); DROP TABLE t;").unwrap();
        drop(conn);
        let db = attach_database("none", &path, None).unwrap();
        let r = db.read_table_names();
        assert_eq!((r.text.as_str(), r.row_count), ("(no tables)", 0));
    }

    #[test]
    fn query_rendering_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let db = attach(dir.path());
        let limits = ExecLimits::default();
        let r = db.run_query("SELECT count(*) FROM pet", &limits);
        assert_eq!(r.text, "count(*)\n--------\n3");
        assert_eq!(r.row_count, 1);

        let capped = ExecLimits { row_cap: 2, ..limits };
        let r = db.run_query("SELECT id, species FROM pet ORDER BY id", &capped);
        assert_eq!(r.text, "id | species\n---+--------\n1  | cat\n2  | dog\n... (1 more rows)");
        assert!(r.truncated);
        assert_eq!(r.row_count, 3);

        let r = db.run_query("SELECT * FROM pet WHERE id > 10", &limits);
        assert!(r.text.ends_with("(0 rows)"));
        assert_eq!(r.row_count, 0);
    }

    #[test]
    fn writes_and_pragmas_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let db = attach(dir.path());
        let limits = ExecLimits::default();
        for sql in [
            "DELETE FROM pet",
            "PRAGMA journal_mode=WAL",
            "SELECT 1; DELETE FROM pet",
            "WITH x AS (SELECT 1) DELETE FROM pet",
            "ATTACH DATABASE 'x.db' AS x",
            "/* hi */ UPDATE pet SET species = 'x'",
        ] {
            let r = db.run_query(sql, &limits);
            assert_eq!(r.text, "read-only: statement rejected", "{sql}");
            assert!(r.error.is_some());
        }
        assert_eq!(db.run_query("SELECT count(*) FROM pet;", &limits).row_count, 1);
    }

    #[test]
    fn sql_errors_are_soft() {
        let dir = tempfile::tempdir().unwrap();
        let db = attach(dir.path());
        let r = db.run_query("SELECT nope FROM pet", &ExecLimits::default());
        assert_eq!(r.error.as_deref(), Some("no such column: nope"));
    }

    #[test]
    fn timeouts_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let db = attach(dir.path());
        let limits = ExecLimits {
            timeout: Duration::from_millis(50),
            ..ExecLimits::default()
        };
        let r = db.run_query(
            "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c) SELECT count(*) FROM c",
            &limits,
        );
        assert_eq!(r.text, "query timed out after 0.05s");
    }

    #[test]
    fn long_cells_are_clipped() {
        let dir = tempfile::tempdir().unwrap();
        let db = attach(dir.path());
        let r = db.run_query("SELECT printf('%.200c', 'x') AS s", &ExecLimits::default());
        let cell = r.text.lines().nth(2).unwrap();
        assert_eq!(cell.chars().count(), 80);
        assert!(cell.ends_with("..."));
    }

    #[test]
    fn documentation_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let path = fixture(dir.path());
        let docs = dir.path().join("database_description");
        std::fs::create_dir(&docs).unwrap();
        std::fs::write(
            docs.join("pet.csv"),
            b"original_column_name,column_name,column_description,data_format,value_description\n\
              species,species,animal species of the pet,text,\n\
              colour,,\xff legacy column,text,\n",
        )
        .unwrap();
        let db = attach_database("pets", &path, Some(&docs)).unwrap();
        let r = db.read_columns_documentation(&["pet.species".into()]);
        assert_eq!(r.text, "pet.species: animal species of the pet | format: text");

        let r = db.read_columns_documentation(&["pet.species".into(), "ghost.x".into()]);
        let lines: Vec<&str> = r.text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1], "ghost.x: no documentation");

        assert_eq!(db.read_columns_documentation(&[]).text, "(no columns requested)");
        let colour = db.catalog().doc("PET.colour").unwrap();
        assert!(colour.dangling);
        assert!(colour.entry.description.starts_with('\u{fffd}'));
    }

    #[test]
    fn unreadable_docs_dir_is_a_warning() {
        let dir = tempfile::tempdir().unwrap();
        let path = fixture(dir.path());
        let db = attach_database("pets", &path, Some(&dir.path().join("missing"))).unwrap();
        assert!(db.catalog().docs.is_empty());
        assert_eq!(db.catalog().warnings.len(), 1);
    }
}
