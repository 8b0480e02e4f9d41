//! The exploration loop: generate until `[EXECUTE]`, run the tool, append the
//! result, resume. Token budgets steer the model toward tools and force a
//! final answer.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::backend::{CompletionBackend, CompletionRequest, Finish, Message};
use crate::catalog::{Database, ExecLimits};
use crate::model::{AgentKind, ExplorationTrace, Question, Termination, ToolCall, ToolName};
use crate::prompts::{self, Prompts};
use crate::protocol::{parse_invocation, scan_stream, ParseOutcome, EXECUTE_TAG, RUN_TAG};

pub const REASONING_PREFIX: &str = "Before thinking about the solution, I will have a deep understanding of the data and not make any assumptions about it.";
pub const NUDGE_TEXT: &str = "Wait, I am thinking for too long without interacting with the database. I can run queries and see the results with the command [RUN] run_query(...) [EXECUTE]";
pub const TERMINATE_TEXT: &str = "I am thinking for too long. I will generate my final solution now.";

/// Tool reply for a static agent that tries to run a query.
pub const RUN_QUERY_UNAVAILABLE: &str = "run_query is not available";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub agent_kind: AgentKind,
    pub no_tool_token_cap: u64,
    pub total_token_cap: u64,
    pub max_operations: usize,
    pub reasoning_prefix: String,
    pub nudge_text: String,
    pub terminate_text: String,
    /// Per-turn generation limit.
    pub turn_max_tokens: u32,
    /// Limit for the forced final completion.
    pub final_max_tokens: u32,
    pub temperature: f32,
    pub seed: Option<u64>,
    pub limits: ExecLimits,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            agent_kind: AgentKind::Interaction,
            no_tool_token_cap: 1400,
            total_token_cap: 10_000,
            max_operations: 40,
            reasoning_prefix: REASONING_PREFIX.into(),
            nudge_text: NUDGE_TEXT.into(),
            terminate_text: TERMINATE_TEXT.into(),
            turn_max_tokens: 2048,
            final_max_tokens: 4096,
            temperature: 0.6,
            seed: None,
            limits: ExecLimits::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.no_tool_token_cap == 0 || self.no_tool_token_cap >= self.total_token_cap {
            return Err(format!(
                "token caps must satisfy 0 < no_tool_token_cap ({}) < total_token_cap ({})",
                self.no_tool_token_cap, self.total_token_cap
            ));
        }
        if self.turn_max_tokens == 0 || self.final_max_tokens == 0 {
            return Err("turn_max_tokens and final_max_tokens must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetState {
    pub tokens_total: u64,
    pub tokens_since_last_tool: u64,
    pub nudges_issued: u32,
    pub terminated: bool,
    /// Cleared by a nudge, set again when a tool result arrives.
    pub nudge_armed: bool,
}

impl Default for BudgetState {
    fn default() -> Self {
        Self {
            tokens_total: 0,
            tokens_since_last_tool: 0,
            nudges_issued: 0,
            terminated: false,
            nudge_armed: true,
        }
    }
}

impl BudgetState {
    pub fn record_tokens(&mut self, n: u64) {
        self.tokens_total += n;
        self.tokens_since_last_tool += n;
    }

    pub fn tool_result_appended(&mut self) {
        self.tokens_since_last_tool = 0;
        self.nudge_armed = true;
    }

    /// Updates the state for an action that was taken.
    pub fn apply(&mut self, action: ControlAction) {
        match action {
            ControlAction::None => {}
            ControlAction::InjectNudge => {
                self.nudges_issued += 1;
                self.nudge_armed = false;
            }
            ControlAction::InjectTerminator => self.terminated = true,
        }
    }
}

/// What happened at a completion boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ChunkBoundary {
    /// The chunk ended in a tool invocation.
    pub tool_call: bool,
    /// The model stopped on its own.
    pub finished: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlAction {
    None,
    InjectNudge,
    InjectTerminator,
}

/// Decides the control action at a chunk boundary, after the chunk's tokens
/// were recorded. The terminator wins when both caps are exceeded.
pub fn apply_control(budget: &BudgetState, cfg: &AgentConfig, event: ChunkBoundary) -> ControlAction {
    if budget.terminated || event.finished {
        return ControlAction::None;
    }
    if budget.tokens_total > cfg.total_token_cap {
        return ControlAction::InjectTerminator;
    }
    if !event.tool_call && budget.nudge_armed && budget.tokens_since_last_tool > cfg.no_tool_token_cap {
        return ControlAction::InjectNudge;
    }
    ControlAction::None
}

pub fn tool_list(kind: AgentKind) -> String {
    kind.tools()
        .iter()
        .map(|t| format!("- {}", t.signature()))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn agent_messages(question: &Question, kind: AgentKind, prompts: &Prompts) -> Vec<Message> {
    let template = match kind {
        AgentKind::Interaction => &prompts.interaction_agent,
        AgentKind::Static => &prompts.static_agent,
    };
    let evidence = if question.evidence.trim().is_empty() { "(none)" } else { question.evidence.as_str() };
    let text = prompts::render(template, &[
        ("question", question.text.as_str()),
        ("evidence", evidence),
        ("tool_list", tool_list(kind).as_str()),
    ]);
    vec![Message::user(text)]
}

/// Wraps a tool reply the way it is appended to the transcript.
pub fn format_tool_result(text: &str) -> String {
    format!("\n<result>\n{text}\n</result>\n")
}

/// Providers that strip the stop string report a natural finish; recover a
/// call left dangling after the last `[RUN]`.
fn untagged_call(turn: &str) -> Option<&str> {
    let at = turn.rfind(RUN_TAG)?;
    let rest = turn[at + RUN_TAG.len()..].trim();
    if rest.contains(EXECUTE_TAG) || rest.is_empty() {
        return None;
    }
    let looks_like_call = rest.ends_with(')') || ToolName::from_name(rest).is_some();
    (looks_like_call && matches!(parse_invocation(rest), ParseOutcome::Ok(_))).then_some(rest)
}

/// Runs one question through the exploration agent.
pub fn run_agent(
    question: &Question,
    db: &Database,
    cfg: &AgentConfig,
    backend: &dyn CompletionBackend,
    prompts: &Prompts,
) -> ExplorationTrace {
    let messages = agent_messages(question, cfg.agent_kind, prompts);
    let mut transcript = cfg.reasoning_prefix.clone();
    let mut budget = BudgetState::default();
    let mut operations = Vec::new();
    let mut backend_error = None;

    let termination = loop {
        if operations.len() >= cfg.max_operations {
            debug!("{}: operation cap {} reached", question.id, cfg.max_operations);
            transcript.push('\n');
            transcript.push_str(&cfg.terminate_text);
            budget.terminated = true;
            break final_completion(&messages, &mut transcript, &mut budget, cfg, backend, &mut backend_error)
                .unwrap_or(Termination::MaxOperations);
        }

        let remaining = (cfg.total_token_cap + 1).saturating_sub(budget.tokens_total).max(1);
        let req = CompletionRequest {
            messages: messages.clone(),
            prefill: Some(transcript.clone()),
            stop_sequences: vec![EXECUTE_TAG.to_string()],
            max_tokens: remaining.min(u64::from(cfg.turn_max_tokens)) as u32,
            temperature: cfg.temperature,
            seed: cfg.seed,
        };
        let chunk = backend.complete(&req);
        if let Finish::Error(msg) = &chunk.finish {
            backend_error = Some(msg.clone());
            break Termination::BackendError;
        }
        let turn_start = transcript.len();
        transcript.push_str(&chunk.text);
        budget.record_tokens(chunk.token_count);

        let call_text: Option<String> = match &chunk.finish {
            Finish::StopSequence(_) => {
                scan_stream(&transcript[turn_start..]).map(|span| {
                    let turn = &transcript[turn_start..];
                    turn[span.inner].to_string()
                })
            }
            Finish::Natural => {
                let raw = untagged_call(&transcript[turn_start..]).map(str::to_string);
                if raw.is_some() {
                    transcript.push(' ');
                    transcript.push_str(EXECUTE_TAG);
                }
                raw
            }
            _ => None,
        };
        let finished = chunk.finish == Finish::Natural && call_text.is_none();
        let action = apply_control(&budget, cfg, ChunkBoundary {
            tool_call: call_text.is_some(),
            finished,
        });
        budget.apply(action);

        if action == ControlAction::InjectTerminator {
            transcript.push('\n');
            transcript.push_str(&cfg.terminate_text);
            break final_completion(&messages, &mut transcript, &mut budget, cfg, backend, &mut backend_error)
                .unwrap_or(Termination::ForcedBudget);
        }

        if let Some(raw) = call_text {
            let reply = match parse_invocation(&raw) {
                ParseOutcome::Ok(ToolCall::RunQuery { .. }) if cfg.agent_kind == AgentKind::Static => {
                    RUN_QUERY_UNAVAILABLE.to_string()
                }
                ParseOutcome::Ok(call) => {
                    let record = db.execute_record(operations.len(), call, &cfg.limits);
                    let text = record.rendered_result.clone();
                    operations.push(record);
                    budget.tool_result_appended();
                    text
                }
                ParseOutcome::Malformed { reason, .. } => format!("could not parse command: {reason}"),
            };
            transcript.push_str(&format_tool_result(&reply));
            continue;
        }

        if action == ControlAction::InjectNudge {
            transcript.push('\n');
            transcript.push_str(&cfg.nudge_text);
            continue;
        }

        if finished {
            break Termination::Natural;
        }
    };

    ExplorationTrace {
        question_id: question.id.clone(),
        agent_kind: cfg.agent_kind,
        operations,
        raw_transcript: transcript,
        tokens_generated: budget.tokens_total,
        termination,
        backend_error,
    }
}

/// The single completion requested after the terminator. Returns
/// `Some(BackendError)` when it fails.
fn final_completion(
    messages: &[Message],
    transcript: &mut String,
    budget: &mut BudgetState,
    cfg: &AgentConfig,
    backend: &dyn CompletionBackend,
    backend_error: &mut Option<String>,
) -> Option<Termination> {
    let req = CompletionRequest {
        messages: messages.to_vec(),
        prefill: Some(transcript.clone()),
        stop_sequences: Vec::new(),
        max_tokens: cfg.final_max_tokens,
        temperature: cfg.temperature,
        seed: cfg.seed,
    };
    let chunk = backend.complete(&req);
    if let Finish::Error(msg) = chunk.finish {
        *backend_error = Some(msg);
        return Some(Termination::BackendError);
    }
    transcript.push('\n');
    transcript.push_str(&chunk.text);
    budget.record_tokens(chunk.token_count);
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_examples() {
        let cfg = AgentConfig::default();
        let b = BudgetState { tokens_since_last_tool: 1500, tokens_total: 3000, ..Default::default() };
        assert_eq!(apply_control(&b, &cfg, ChunkBoundary::default()), ControlAction::InjectNudge);
        let b = BudgetState { tokens_since_last_tool: 10_050, tokens_total: 10_050, ..Default::default() };
        assert_eq!(apply_control(&b, &cfg, ChunkBoundary::default()), ControlAction::InjectTerminator);
        let b = BudgetState { tokens_since_last_tool: 100, tokens_total: 100, ..Default::default() };
        assert_eq!(apply_control(&b, &cfg, ChunkBoundary::default()), ControlAction::None);
    }

    #[test]
    fn exact_caps_do_not_fire() {
        let cfg = AgentConfig::default();
        let b = BudgetState { tokens_since_last_tool: 1400, tokens_total: 10_000, ..Default::default() };
        assert_eq!(apply_control(&b, &cfg, ChunkBoundary::default()), ControlAction::None);
    }

    #[test]
    fn nudge_rearms_after_tool() {
        let cfg = AgentConfig::default();
        let mut b = BudgetState::default();
        b.record_tokens(1500);
        let a = apply_control(&b, &cfg, ChunkBoundary::default());
        assert_eq!(a, ControlAction::InjectNudge);
        b.apply(a);
        b.record_tokens(10);
        assert_eq!(apply_control(&b, &cfg, ChunkBoundary::default()), ControlAction::None);
        b.tool_result_appended();
        b.record_tokens(1401);
        assert_eq!(apply_control(&b, &cfg, ChunkBoundary::default()), ControlAction::InjectNudge);
    }

    #[test]
    fn tool_call_or_finish_suppresses_nudge() {
        let cfg = AgentConfig::default();
        let b = BudgetState { tokens_since_last_tool: 2000, tokens_total: 2000, ..Default::default() };
        let with_call = ChunkBoundary { tool_call: true, finished: false };
        assert_eq!(apply_control(&b, &cfg, with_call), ControlAction::None);
        let done = ChunkBoundary { tool_call: false, finished: true };
        assert_eq!(apply_control(&b, &cfg, done), ControlAction::None);
    }

    #[test]
    fn config_validation() {
        assert!(AgentConfig::default().validate().is_ok());
        let bad = AgentConfig { no_tool_token_cap: 20_000, ..AgentConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn untagged_call_recovery() {
        assert_eq!(untagged_call("ok [RUN] run_query(SELECT 1)"), Some("run_query(SELECT 1)"));
        assert_eq!(untagged_call("ok [RUN] read_table_names"), Some("read_table_names"));
        assert_eq!(untagged_call("so [RUN] tags are used like this."), None);
        assert_eq!(untagged_call("no tags at all"), None);
    }
}
