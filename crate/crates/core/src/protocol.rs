//! The `[RUN] tool(args) [EXECUTE]` invocation protocol and final-answer
//! extraction.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::model::{ToolCall, ToolName};

pub const RUN_TAG: &str = "[RUN]";
pub const EXECUTE_TAG: &str = "[EXECUTE]";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScanEvent {
    TextChunk(String),
    Invocation { span: Range<usize>, raw: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParseOutcome {
    Ok(ToolCall),
    Malformed { reason: String, raw: String },
}

/// A located invocation in accumulated model output. Offsets are byte offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvocationSpan {
    /// Trimmed call text between the tags.
    pub inner: Range<usize>,
    /// End of the `[EXECUTE]` tag.
    pub end: usize,
}

/// Canonical tagged form of a call.
pub fn render_invocation(call: &ToolCall) -> String {
    format!("{RUN_TAG} {} {EXECUTE_TAG}", call.render_call())
}

/// Finds the first complete invocation in `text`.
///
/// The span runs from the last `[RUN]` before the first `[EXECUTE]` up to
/// that `[EXECUTE]`. Without a `[RUN]` it starts at the nearest preceding
/// tool name, or at the start of the line holding the tag.
pub fn scan_stream(text: &str) -> Option<InvocationSpan> {
    let exec_at = text.find(EXECUTE_TAG)?;
    let before = &text[..exec_at];
    let start = match before.rfind(RUN_TAG) {
        Some(run_at) => run_at + RUN_TAG.len(),
        None => {
            let lower = before.to_ascii_lowercase();
            ToolName::ALL
                .iter()
                .filter_map(|t| lower.rfind(t.as_str()))
                .max()
                .unwrap_or_else(|| before.rfind('\n').map_or(0, |i| i + 1))
        }
    };
    let inner = trim_range(text, start..exec_at);
    Some(InvocationSpan {
        inner,
        end: exec_at + EXECUTE_TAG.len(),
    })
}

fn trim_range(text: &str, range: Range<usize>) -> Range<usize> {
    let slice = &text[range.clone()];
    let lead = slice.len() - slice.trim_start().len();
    let trail = slice.len() - slice.trim_end().len();
    let start = range.start + lead;
    let end = (range.end - trail).max(start);
    start..end
}

/// Splits a complete text into prose and invocations, in order.
pub fn scan_events(text: &str) -> Vec<ScanEvent> {
    let mut events = Vec::new();
    let mut offset = 0;
    while let Some(span) = scan_stream(&text[offset..]) {
        let inner = (span.inner.start + offset)..(span.inner.end + offset);
        let end = span.end + offset;
        // Prose up to the opening tag (or the call itself when untagged).
        let head = text[offset..inner.start].trim_end();
        let head = head.strip_suffix(RUN_TAG).map_or(head, str::trim_end);
        if !head.is_empty() {
            events.push(ScanEvent::TextChunk(head.to_string()));
        }
        events.push(ScanEvent::Invocation {
            raw: text[inner.clone()].to_string(),
            span: inner,
        });
        offset = end;
    }
    if offset < text.len() {
        events.push(ScanEvent::TextChunk(text[offset..].to_string()));
    }
    events
}

fn malformed(reason: impl Into<String>, raw: &str) -> ParseOutcome {
    ParseOutcome::Malformed {
        reason: reason.into(),
        raw: raw.to_string(),
    }
}

fn strip_fences(s: &str) -> &str {
    let t = s.trim();
    if let Some(body) = t.strip_prefix("```") {
        // Drop an optional language label on the opening fence line.
        let body = match body.find('\n') {
            Some(nl) if body[..nl].trim().chars().all(|c| c.is_ascii_alphanumeric()) => &body[nl + 1..],
            _ => body,
        };
        return body.strip_suffix("```").unwrap_or(body).trim();
    }
    t
}

/// Removes one pair of matching outer quotes, but only when the quote
/// character does not also occur inside (so `'a' || 'b'` is left alone).
fn strip_quotes(s: &str) -> &str {
    let t = s.trim();
    for q in ["\"\"\"", "'''"] {
        if t.len() >= 6 && t.starts_with(q) && t.ends_with(q) {
            return t[3..t.len() - 3].trim();
        }
    }
    for q in ['"', '\'', '`'] {
        if t.len() >= 2 && t.starts_with(q) && t.ends_with(q) && !t[1..t.len() - 1].contains(q) {
            return t[1..t.len() - 1].trim();
        }
    }
    t
}

fn strip_keyword_arg<'a>(s: &'a str, names: &[&str]) -> &'a str {
    let t = s.trim_start();
    for name in names {
        if t.get(..name.len()).is_some_and(|head| head.eq_ignore_ascii_case(name)) {
            let rest = t[name.len()..].trim_start();
            if let Some(rest) = rest.strip_prefix('=').or_else(|| rest.strip_prefix(':')) {
                return rest.trim_start();
            }
        }
    }
    t
}

fn split_list(body: &str) -> Vec<String> {
    let mut items = Vec::new();
    let mut current = String::new();
    let mut quote: Option<char> = None;
    for c in body.chars() {
        match quote {
            Some(q) if c == q => {
                quote = None;
                current.push(c);
            }
            Some(_) => current.push(c),
            None if c == '"' || c == '\'' => {
                quote = Some(c);
                current.push(c);
            }
            None if c == ',' => items.push(std::mem::take(&mut current)),
            None => current.push(c),
        }
    }
    items.push(current);
    items
        .iter()
        .map(|item| strip_quotes(item).to_string())
        .filter(|item| !item.is_empty())
        .collect()
}

/// Parses the text inside an invocation span.
pub fn parse_invocation(raw: &str) -> ParseOutcome {
    let text = strip_fences(raw).trim_matches(|c: char| c.is_whitespace() || c == '`');
    let name_len = text
        .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .unwrap_or(text.len());
    let name = &text[..name_len];
    let Some(tool) = ToolName::from_name(name) else {
        let shown = if name.is_empty() {
            text.chars().take(40).collect::<String>()
        } else {
            name.to_string()
        };
        return malformed(format!("unknown tool {shown}"), raw);
    };
    let rest = text[name_len..].trim();

    // Argument text: from the first "(" to the last ")".
    let args = if rest.is_empty() {
        None
    } else if let Some(body) = rest.strip_prefix('(') {
        match body.rfind(')') {
            Some(close) => Some(&body[..close]),
            None => return malformed(format!("missing closing parenthesis for {tool}"), raw),
        }
    } else {
        return malformed(format!("expected '(' after {tool}"), raw);
    };

    match tool {
        ToolName::ReadTableNames => match args.map(str::trim) {
            None | Some("") => ParseOutcome::Ok(ToolCall::ReadTableNames),
            Some(_) => malformed("read_table_names takes no arguments", raw),
        },
        ToolName::ReadTableColumns => {
            let table = args
                .map(|a| strip_quotes(strip_keyword_arg(a, &["table_name", "table"])))
                .unwrap_or("");
            if table.is_empty() {
                malformed("missing table name", raw)
            } else {
                ParseOutcome::Ok(ToolCall::ReadTableColumns {
                    table: table.to_string(),
                })
            }
        }
        ToolName::ReadColumnsDocumentation => {
            let body = args
                .map(|a| strip_keyword_arg(a, &["column_names", "columns"]).trim())
                .unwrap_or("");
            let body = body
                .strip_prefix('[')
                .and_then(|b| b.strip_suffix(']'))
                .unwrap_or(body);
            ParseOutcome::Ok(ToolCall::ReadColumnsDocumentation {
                columns: split_list(body),
            })
        }
        ToolName::RunQuery => {
            let sql = args
                .map(|a| strip_quotes(strip_fences(strip_keyword_arg(a, &["sql", "query"]))))
                .unwrap_or("");
            if sql.is_empty() {
                malformed("empty query", raw)
            } else {
                ParseOutcome::Ok(ToolCall::RunQuery {
                    sql: sql.to_string(),
                })
            }
        }
    }
}

/// Pulls the final SQL out of a reply: the last ```sql fence, else the last
/// fence of any label, else the last bare statement starting with SELECT or
/// WITH.
pub fn extract_final_sql(transcript: &str) -> Option<String> {
    let fences = fenced_blocks(transcript);
    let pick = fences
        .iter()
        .rev()
        .find(|(label, _)| label.eq_ignore_ascii_case("sql"))
        .or_else(|| fences.last())
        .map(|(_, body)| body.trim().to_string())
        .filter(|s| !s.is_empty());
    pick.or_else(|| last_bare_statement(transcript))
}

fn fenced_blocks(text: &str) -> Vec<(String, String)> {
    let mut blocks = Vec::new();
    let mut open: Option<(String, Vec<&str>)> = None;
    for line in text.lines() {
        let trimmed = line.trim_start();
        match open.as_mut() {
            None => {
                if let Some(label) = trimmed.strip_prefix("```") {
                    let label = label.trim();
                    // Single-line fence: ```SELECT 1```
                    if let Some(body) = label.strip_suffix("```") {
                        blocks.push((String::new(), body.to_string()));
                    } else {
                        open = Some((label.to_string(), Vec::new()));
                    }
                }
            }
            Some((_, body)) => {
                if trimmed.trim_end() == "```" || trimmed.starts_with("```") {
                    let (label, body) = open.take().expect("open fence");
                    blocks.push((label, body.join("\n")));
                } else {
                    body.push(line);
                }
            }
        }
    }
    blocks
}

fn starts_with_keyword(line: &str) -> bool {
    let word: String = line
        .trim_start()
        .chars()
        .take_while(|c| c.is_ascii_alphabetic())
        .collect();
    word.eq_ignore_ascii_case("select") || word.eq_ignore_ascii_case("with")
}

fn last_bare_statement(text: &str) -> Option<String> {
    let mut found = None;
    let mut current: Option<Vec<&str>> = None;
    let lines: Vec<&str> = text.lines().collect();
    let finish = |stmt: Vec<&str>, found: &mut Option<String>| {
        let s = stmt.join("\n").trim().to_string();
        if !s.is_empty() {
            *found = Some(s);
        }
    };
    for line in lines {
        match current.as_mut() {
            None => {
                if starts_with_keyword(line) {
                    if let Some(semi) = line.find(';') {
                        finish(vec![&line[..semi]], &mut found);
                    } else {
                        current = Some(vec![line]);
                    }
                }
            }
            Some(stmt) => {
                if line.trim().is_empty() {
                    finish(current.take().expect("statement"), &mut found);
                } else if let Some(semi) = line.find(';') {
                    stmt.push(&line[..semi]);
                    finish(current.take().expect("statement"), &mut found);
                } else {
                    stmt.push(line);
                }
            }
        }
    }
    if let Some(stmt) = current {
        finish(stmt, &mut found);
    }
    found
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inner(text: &str) -> Option<&str> {
        scan_stream(text).map(|s| &text[s.inner])
    }

    #[test]
    fn scan_finds_tagged_call() {
        let t = "…I will check. [RUN] read_table_names() [EXECUTE]";
        assert_eq!(inner(t), Some("read_table_names()"));
        assert_eq!(inner("thinking about joins…"), None);
        let t = "[RUN] run_query(SELECT 1) [EXECUTE] trailing text";
        let span = scan_stream(t).unwrap();
        assert_eq!(&t[span.inner], "run_query(SELECT 1)");
        assert_eq!(&t[..span.end], "[RUN] run_query(SELECT 1) [EXECUTE]");
    }

    #[test]
    fn scan_without_run_tag() {
        let t = "let me look\nok read_table_columns(pet) [EXECUTE]";
        assert_eq!(inner(t), Some("read_table_columns(pet)"));
        let t = "first line\nsomething odd [EXECUTE]";
        assert_eq!(inner(t), Some("something odd"));
        let t = "[RUN] a [RUN] run_query(SELECT 2) [EXECUTE]";
        assert_eq!(inner(t), Some("run_query(SELECT 2)"));
    }

    #[test]
    fn scan_events_split() {
        let t = "hmm [RUN] read_table_names() [EXECUTE] and then";
        let ev = scan_events(t);
        assert_eq!(ev.len(), 3);
        assert_eq!(ev[0], ScanEvent::TextChunk("hmm".into()));
        assert!(matches!(&ev[1], ScanEvent::Invocation { raw, .. } if raw == "read_table_names()"));
        assert_eq!(ev[2], ScanEvent::TextChunk(" and then".into()));
    }

    #[test]
    fn parse_nested_parens() {
        assert_eq!(
            parse_invocation("run_query(SELECT round(avg(age),2) FROM pet)"),
            ParseOutcome::Ok(ToolCall::RunQuery {
                sql: "SELECT round(avg(age),2) FROM pet".into()
            })
        );
    }

    #[test]
    fn parse_list_args() {
        assert_eq!(
            parse_invocation("read_columns_documentation([\"pet.species\", 'owner.name'])"),
            ParseOutcome::Ok(ToolCall::ReadColumnsDocumentation {
                columns: vec!["pet.species".into(), "owner.name".into()]
            })
        );
        assert_eq!(
            parse_invocation("read_columns_documentation(column_names=[pet.species])"),
            ParseOutcome::Ok(ToolCall::ReadColumnsDocumentation {
                columns: vec!["pet.species".into()]
            })
        );
    }

    #[test]
    fn parse_unknown_tool() {
        assert_eq!(
            parse_invocation("drop_table(pet)"),
            ParseOutcome::Malformed {
                reason: "unknown tool drop_table".into(),
                raw: "drop_table(pet)".into()
            }
        );
    }

    #[test]
    fn parse_zero_arg_forms() {
        for raw in ["read_table_names", "read_table_names()", "READ_TABLE_NAMES( )"] {
            assert_eq!(parse_invocation(raw), ParseOutcome::Ok(ToolCall::ReadTableNames), "{raw}");
        }
        assert!(matches!(
            parse_invocation("read_table_names(pet)"),
            ParseOutcome::Malformed { .. }
        ));
    }

    #[test]
    fn parse_query_wrappers() {
        let want = ParseOutcome::Ok(ToolCall::RunQuery {
            sql: "SELECT name FROM owner WHERE name = 'Ann'".into(),
        });
        assert_eq!(
            parse_invocation("run_query(\"SELECT name FROM owner WHERE name = 'Ann'\")"),
            want
        );
        assert_eq!(
            parse_invocation("run_query(```sql\nSELECT name FROM owner WHERE name = 'Ann'\n```)"),
            want
        );
        assert_eq!(
            parse_invocation("run_query(sql=\"\"\"SELECT name FROM owner WHERE name = 'Ann'\"\"\")"),
            want
        );
        assert_eq!(
            parse_invocation("run_query('a' || 'b')"),
            ParseOutcome::Ok(ToolCall::RunQuery { sql: "'a' || 'b'".into() })
        );
        assert_eq!(
            parse_invocation("run_query(  )"),
            ParseOutcome::Malformed {
                reason: "empty query".into(),
                raw: "run_query(  )".into()
            }
        );
    }

    #[test]
    fn parse_table_arg() {
        assert_eq!(
            parse_invocation("read_table_columns(table_name=\"pet\")"),
            ParseOutcome::Ok(ToolCall::ReadTableColumns { table: "pet".into() })
        );
        assert!(matches!(
            parse_invocation("read_table_columns()"),
            ParseOutcome::Malformed { .. }
        ));
    }

    #[test]
    fn final_sql_extraction() {
        assert_eq!(
            extract_final_sql("…answer:\n```sql\nSELECT 1\n```").as_deref(),
            Some("SELECT 1")
        );
        let two = "```sql\nSELECT 1\n```\nbetter:\n```sql\nSELECT 2\n```\n";
        assert_eq!(extract_final_sql(two).as_deref(), Some("SELECT 2"));
        assert_eq!(extract_final_sql("no query here"), None);
        let mixed = "```sql\nSELECT 1\n```\n```\nSELECT 3\n```";
        assert_eq!(extract_final_sql(mixed).as_deref(), Some("SELECT 1"));
        let unlabeled = "```\nSELECT 3\n```";
        assert_eq!(extract_final_sql(unlabeled).as_deref(), Some("SELECT 3"));
        let bare = "So the query is\nSELECT a\nFROM t\nWHERE x IN (\nSELECT y FROM u);\nDone.";
        assert_eq!(
            extract_final_sql(bare).as_deref(),
            Some("SELECT a\nFROM t\nWHERE x IN (\nSELECT y FROM u)")
        );
    }
}
