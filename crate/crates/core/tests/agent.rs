mod common;

use std::sync::Mutex;

use raise_core::agent::{run_agent, AgentConfig, NUDGE_TEXT, REASONING_PREFIX, RUN_QUERY_UNAVAILABLE, TERMINATE_TEXT};
use raise_core::backend::{
    BackendId, CompletionBackend, CompletionChunk, CompletionRequest, Finish, ScriptedBackend, TapeEntry,
};
use raise_core::catalog::{attach_database, Database};
use raise_core::model::{AgentKind, Difficulty, Question, Termination, ToolCall};
use raise_core::prompts::Prompts;

/// Replies with fixed text and an exact token count.
struct Counted {
    id: BackendId,
    replies: Mutex<Vec<(String, u64, Finish)>>,
    requests: Mutex<Vec<CompletionRequest>>,
}

impl Counted {
    fn new(replies: Vec<(&str, u64, Finish)>) -> Self {
        let mut replies: Vec<_> = replies.into_iter().map(|(t, n, f)| (t.to_string(), n, f)).collect();
        replies.reverse();
        Self {
            id: BackendId {
                name: "counted".into(),
                profile: "test".into(),
            },
            replies: Mutex::new(replies),
            requests: Mutex::new(Vec::new()),
        }
    }

    fn calls(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

impl CompletionBackend for Counted {
    fn id(&self) -> &BackendId {
        &self.id
    }

    fn complete(&self, req: &CompletionRequest) -> CompletionChunk {
        self.requests.lock().unwrap().push(req.clone());
        match self.replies.lock().unwrap().pop() {
            Some((text, token_count, finish)) => CompletionChunk {
                text,
                token_count,
                finish,
            },
            None => CompletionChunk::error("out of replies"),
        }
    }
}

fn stop() -> Finish {
    Finish::StopSequence("[EXECUTE]".into())
}

fn pets() -> (tempfile::TempDir, Database) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pets.sqlite");
    common::pets_db(&path);
    let db = attach_database("pets", &path, None).unwrap();
    (dir, db)
}

fn question() -> Question {
    Question {
        id: "q1".into(),
        db_id: "pets".into(),
        text: "How many dogs are there?".into(),
        evidence: String::new(),
        gold_sql: None,
        difficulty: Difficulty::Simple,
    }
}

fn cfg(kind: AgentKind) -> AgentConfig {
    AgentConfig {
        agent_kind: kind,
        ..AgentConfig::default()
    }
}

#[test]
fn scripted_interaction_run() {
    let (_dir, db) = pets();
    let backend = ScriptedBackend::from_texts(
        "s",
        [
            "Tables first. [RUN] read_table_names() [EXECUTE]",
            "[RUN] READ_TABLE_COLUMNS(table_name='pet') [EXECUTE]",
            "[RUN] run_query(SELECT COUNT(*) FROM pet WHERE species = 'dog') [EXECUTE]",
            "Two dogs.\n```sql\nSELECT COUNT(*) FROM pet WHERE species = 'dog'\n```",
        ],
    );
    let trace = run_agent(&question(), &db, &cfg(AgentKind::Interaction), &backend, &Prompts::default());
    assert_eq!(trace.termination, Termination::Natural);
    assert_eq!(trace.operations.len(), 3);
    assert_eq!(trace.operations[1].call, ToolCall::ReadTableColumns { table: "pet".into() });
    assert!(trace.operations[0].rendered_result.contains("owner"));
    assert!(trace.operations[2].rendered_result.contains('2'));
    assert!(trace.raw_transcript.starts_with(REASONING_PREFIX));
    assert!(trace.raw_transcript.contains("<result>"));
    assert_eq!(backend.remaining(), 0);
}

#[test]
fn every_turn_is_prefilled_with_the_transcript() {
    let (_dir, db) = pets();
    let backend = Counted::new(vec![
        ("[RUN] read_table_names() [EXECUTE]", 5, stop()),
        ("done", 1, Finish::Natural),
    ]);
    run_agent(&question(), &db, &cfg(AgentKind::Interaction), &backend, &Prompts::default());
    let reqs = backend.requests.lock().unwrap();
    assert_eq!(reqs[0].prefill.as_deref(), Some(REASONING_PREFIX));
    assert!(reqs[1].prefill.as_deref().unwrap().contains("</result>"));
    assert!(reqs.iter().all(|r| r.stop_sequences == ["[EXECUTE]"]));
}

#[test]
fn static_agent_never_records_run_query() {
    let (_dir, db) = pets();
    for i in 0..100 {
        let sql = format!("SELECT {i} FROM pet");
        let backend = ScriptedBackend::from_texts(
            "s",
            [
                format!("[RUN] run_query({sql}) [EXECUTE]"),
                "[RUN] read_table_names() [EXECUTE]".to_string(),
                format!("[RUN] Run_Query(sql=\"{sql}\") [EXECUTE]"),
                format!("```sql\n{sql}\n```"),
            ],
        );
        let trace = run_agent(&question(), &db, &cfg(AgentKind::Static), &backend, &Prompts::default());
        assert_eq!(trace.operations.len(), 1);
        assert!(trace.operations.iter().all(|o| !matches!(o.call, ToolCall::RunQuery { .. })));
        assert_eq!(trace.raw_transcript.matches(RUN_QUERY_UNAVAILABLE).count(), 2);
    }
}

#[test]
fn nudge_after_long_silence() {
    let (_dir, db) = pets();
    let backend = Counted::new(vec![
        ("thinking", 1000, Finish::Length),
        ("still thinking", 401, Finish::Length),
        ("more thinking", 300, Finish::Length),
        ("[RUN] read_table_names() [EXECUTE]", 10, stop()),
        ("answer", 5, Finish::Natural),
    ]);
    let trace = run_agent(&question(), &db, &cfg(AgentKind::Interaction), &backend, &Prompts::default());
    assert_eq!(trace.raw_transcript.matches(NUDGE_TEXT).count(), 1);
    let nudge_at = trace.raw_transcript.find(NUDGE_TEXT).unwrap();
    assert!(trace.raw_transcript[..nudge_at].ends_with("still thinking\n"));
    assert_eq!(trace.termination, Termination::Natural);
    assert_eq!(trace.tokens_generated, 1716);
}

#[test]
fn terminator_forces_final_answer() {
    let (_dir, db) = pets();
    let mut replies = Vec::new();
    for _ in 0..5 {
        replies.push(("[RUN] read_table_names() [EXECUTE]", 2100, stop()));
    }
    replies.push(("[RUN] read_table_names() [EXECUTE] and SQL", 300, Finish::Natural));
    let backend = Counted::new(replies);
    let trace = run_agent(&question(), &db, &cfg(AgentKind::Interaction), &backend, &Prompts::default());
    assert_eq!(trace.termination, Termination::ForcedBudget);
    // The fifth call crosses the cap and is not executed; the final
    // completion's call is never executed either.
    assert_eq!(trace.operations.len(), 4);
    assert_eq!(backend.calls(), 6);
    assert_eq!(trace.raw_transcript.matches(TERMINATE_TEXT).count(), 1);
    let reqs = backend.requests.lock().unwrap();
    assert!(reqs[5].stop_sequences.is_empty());
    assert!(reqs[5].prefill.as_deref().unwrap().ends_with(TERMINATE_TEXT));
    assert_eq!(reqs[4].max_tokens, 1601);
}

#[test]
fn operation_cap_ends_the_run() {
    let (_dir, db) = pets();
    let mut replies = vec![("[RUN] read_table_names() [EXECUTE]", 3, stop()); 3];
    replies.push(("final", 1, Finish::Natural));
    let backend = Counted::new(replies);
    let config = AgentConfig {
        max_operations: 3,
        ..cfg(AgentKind::Interaction)
    };
    let trace = run_agent(&question(), &db, &config, &backend, &Prompts::default());
    assert_eq!(trace.operations.len(), 3);
    assert_eq!(trace.termination, Termination::MaxOperations);
    assert!(trace.raw_transcript.ends_with("\nfinal"));
}

#[test]
fn malformed_calls_get_feedback_and_errors_are_recorded() {
    let (_dir, db) = pets();
    let backend = ScriptedBackend::from_texts(
        "s",
        [
            "[RUN] drop_everything() [EXECUTE]",
            "[RUN] run_query(DELETE FROM pet) [EXECUTE]",
            "[RUN] read_table_columns(ghost) [EXECUTE]",
            "ok",
        ],
    );
    let trace = run_agent(&question(), &db, &cfg(AgentKind::Interaction), &backend, &Prompts::default());
    assert!(trace.raw_transcript.contains("could not parse command: unknown tool drop_everything"));
    assert_eq!(trace.operations.len(), 2);
    assert!(trace.operations.iter().all(|o| o.error.is_some()));
    assert!(trace.operations[1].rendered_result.contains("available: owner, pet"));
}

#[test]
fn backend_failure_keeps_partial_trace() {
    let (_dir, db) = pets();
    let backend = ScriptedBackend::new(
        "s",
        vec![TapeEntry::text("[RUN] read_table_names() [EXECUTE]"), TapeEntry::failure("503 upstream")],
    );
    let trace = run_agent(&question(), &db, &cfg(AgentKind::Interaction), &backend, &Prompts::default());
    assert_eq!(trace.termination, Termination::BackendError);
    assert_eq!(trace.backend_error.as_deref(), Some("503 upstream"));
    assert_eq!(trace.operations.len(), 1);
}

#[test]
fn untagged_invocation_is_recovered() {
    let (_dir, db) = pets();
    let backend = Counted::new(vec![
        ("Let me look [RUN] read_table_names()", 4, Finish::Natural),
        ("done", 1, Finish::Natural),
    ]);
    let trace = run_agent(&question(), &db, &cfg(AgentKind::Interaction), &backend, &Prompts::default());
    assert_eq!(trace.operations.len(), 1);
    assert_eq!(trace.termination, Termination::Natural);
}
