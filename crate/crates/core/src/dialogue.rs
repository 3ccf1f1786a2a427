//! The reasoner/verifier dialogue: context building, the turn loop with
//! retrieval and feedback injection, and final-answer generation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gateway::{check_result, fnv1a, generate_with_retry, ChatMessage, GenerationBackend, GenerationRequest};
use crate::grpo::{GroupRollout, GrpoError};
use crate::prompts::{question_line, FINAL_PROMPT, REASONER_PROMPT, TRAJECTORY_PREFIX, VERIFIER_PROMPT};
use crate::protocol::{
    extract_answer, parse_generation, render_segment, render_tag, validate_step, AgentRole, ParseOptions, Segment,
    SegmentKind, StepVerdict,
};
use crate::retrieval::{Document, RetrievalError, RetrievalEvent, Retriever};
use crate::reward::{score_trace, RewardConfig};

/// One agent turn, as reassembled in the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub turn: usize,
    pub agent: AgentRole,
    pub segments: Vec<Segment>,
}

impl Step {
    fn segment(&self, kind: SegmentKind) -> Option<&Segment> {
        self.segments.iter().find(|s| s.kind == kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answered,
    MaxTurns,
    ProtocolError,
    BackendFailure,
}

/// What ended a trace early. `agent` is the offender for protocol errors and
/// the agent whose call failed for backend failures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Incident {
    pub agent: Option<AgentRole>,
    pub turn: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub query_id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub steps: Vec<Step>,
    pub retrievals: Vec<RetrievalEvent>,
    pub reasoner_answer: Option<String>,
    pub verifier_answer: Option<String>,
    pub final_answer: Option<String>,
    pub termination: Termination,
    #[serde(default)]
    pub incident: Option<Incident>,
    #[serde(default)]
    pub seed: u64,
}

impl Trace {
    pub fn new(query_id: impl Into<String>, question: impl Into<String>, gold_answers: Vec<String>) -> Self {
        Self {
            query_id: query_id.into(),
            question: question.into(),
            gold_answers,
            steps: Vec::new(),
            retrievals: Vec::new(),
            reasoner_answer: None,
            verifier_answer: None,
            final_answer: None,
            termination: Termination::MaxTurns,
            incident: None,
            seed: 0,
        }
    }

    pub fn steps_of(&self, agent: AgentRole) -> impl Iterator<Item = &Step> {
        self.steps.iter().filter(move |s| s.agent == agent)
    }

    /// Checks that steps alternate reasoner, verifier, ... and that both
    /// steps of turn `t` carry `turn == t`.
    pub fn check_alternation(&self) -> Result<(), DialogueError> {
        for (i, step) in self.steps.iter().enumerate() {
            let agent = if i % 2 == 0 {
                AgentRole::Reasoner
            } else {
                AgentRole::Verifier
            };
            if step.agent != agent || step.turn != i / 2 {
                return Err(DialogueError::InconsistentPrefix(format!(
                    "step {i} is {} turn {}, expected {agent} turn {}",
                    step.agent,
                    step.turn,
                    i / 2
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DialogueError {
    #[error("inconsistent trace prefix: {0}")]
    InconsistentPrefix(String),
}

/// Whose context to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextRole {
    Reasoner,
    Verifier,
    FinalGenerator,
}

fn render_step(step: &Step) -> String {
    step.segments.iter().map(render_segment).collect::<Vec<_>>().join("\n")
}

/// Information block for a search turn.
pub fn render_search_information(think: &str, query: &str, docs: &[Document]) -> String {
    let mut out = format!("Reasoning: {think}\nQuery: {query}");
    for d in docs {
        out.push('\n');
        out.push_str(&d.render());
    }
    out
}

/// Information block for the turn in which the reasoner answers.
pub fn render_answer_information(think: &str, answer: &str) -> String {
    format!("Reasoning: {think}\n{}", render_tag(SegmentKind::Answer, answer))
}

/// Builds the chat messages for the next call. `pending_information` is the
/// verifier's current information block, rendered into its context as an
/// `<information>` element.
pub fn build_context(
    trace: &Trace,
    role: ContextRole,
    pending_information: Option<&str>,
) -> Result<Vec<ChatMessage>, DialogueError> {
    trace.check_alternation()?;
    let mut user = question_line(&trace.question);
    let (system, user) = match role {
        ContextRole::Reasoner => {
            for step in trace.steps_of(AgentRole::Reasoner) {
                user.push('\n');
                user.push_str(&render_step(step));
            }
            (REASONER_PROMPT, user)
        }
        ContextRole::Verifier => {
            for step in trace.steps_of(AgentRole::Verifier) {
                user.push('\n');
                user.push_str(&render_step(step));
            }
            if let Some(info) = pending_information {
                user.push('\n');
                user.push_str(&render_tag(SegmentKind::Information, info));
            }
            (VERIFIER_PROMPT, user)
        }
        ContextRole::FinalGenerator => {
            let trajectory = trace.steps.iter().map(render_step).collect::<Vec<_>>().join("\n");
            (FINAL_PROMPT, format!("{TRAJECTORY_PREFIX}{trajectory}\n\n{user}"))
        }
    };
    Ok(vec![ChatMessage::system(system), ChatMessage::user(user)])
}

/// The answer in a final-generator reply: the content of its last
/// `<final_answer>` or `<answer>` element, else the whole trimmed text.
pub fn extract_final_answer(text: &str) -> String {
    for kind in [SegmentKind::FinalAnswer, SegmentKind::Answer] {
        let open = format!("<{}>", kind.tag());
        let close = format!("</{}>", kind.tag());
        if let Some(start) = text.rfind(&open).map(|i| i + open.len()) {
            if let Some(len) = text[start..].find(&close) {
                return text[start..start + len].trim().to_string();
            }
        }
    }
    text.trim().to_string()
}

/// The backends one dialogue talks to. The final generator shares the
/// reasoner's backend.
pub struct Backends<'a> {
    pub reasoner: &'a dyn GenerationBackend,
    pub verifier: &'a dyn GenerationBackend,
    pub retriever: &'a dyn Retriever,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSettings {
    pub max_tokens: u32,
    pub temperature: f64,
    pub top_logprobs_k: usize,
    pub stop_sequences: Vec<String>,
    /// Extra attempts after a transient backend failure.
    pub retries: u32,
    /// Reject untagged text in agent turns.
    pub strict: bool,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            max_tokens: 512,
            temperature: 1.0,
            top_logprobs_k: 5,
            stop_sequences: Vec::new(),
            retries: 2,
            strict: false,
        }
    }
}

/// Seed for an example, derived from a run seed and the query id.
pub fn example_seed(run_seed: u64, query_id: &str) -> u64 {
    fnv1a(&[&run_seed.to_le_bytes(), query_id.as_bytes()])
}

pub struct DialogueRunner<'a> {
    pub backends: Backends<'a>,
    pub reward: RewardConfig,
    pub generation: GenerationSettings,
}

enum Stop {
    Protocol(AgentRole, String),
    Backend(Option<AgentRole>, String),
}

impl<'a> DialogueRunner<'a> {
    pub fn new(backends: Backends<'a>, reward: RewardConfig, generation: GenerationSettings) -> Self {
        Self {
            backends,
            reward,
            generation,
        }
    }

    fn call(
        &self,
        backend: &dyn GenerationBackend,
        messages: Vec<ChatMessage>,
        seed: u64,
    ) -> Result<crate::gateway::GenerationResult, String> {
        let request = GenerationRequest {
            messages,
            max_tokens: self.generation.max_tokens,
            temperature: self.generation.temperature,
            top_logprobs_k: self.generation.top_logprobs_k,
            stop_sequences: self.generation.stop_sequences.clone(),
            seed: Some(seed),
        };
        let result = generate_with_retry(backend, &request, self.generation.retries).map_err(|e| e.to_string())?;
        check_result(&result, request.top_logprobs_k).map_err(|e| e.to_string())?;
        Ok(result)
    }

    fn agent_turn(&self, trace: &Trace, role: AgentRole, information: Option<&str>) -> Result<Vec<Segment>, Stop> {
        let (backend, ctx_role) = match role {
            AgentRole::Reasoner => (self.backends.reasoner, ContextRole::Reasoner),
            AgentRole::Verifier => (self.backends.verifier, ContextRole::Verifier),
        };
        let messages = build_context(trace, ctx_role, information).map_err(|e| Stop::Backend(None, e.to_string()))?;
        let out = self
            .call(backend, messages, trace.seed)
            .map_err(|e| Stop::Backend(Some(role), e))?;
        let opts = ParseOptions {
            strict: self.generation.strict,
        };
        parse_generation(&out.text, &out.tokens, role, &opts).map_err(|e| Stop::Protocol(role, e.to_string()))
    }

    /// Runs one dialogue to completion. Failures end the trace; they are
    /// recorded in `termination` and `incident`, never returned.
    pub fn run_dialogue(&self, query_id: &str, question: &str, golds: &[String], seed: u64) -> Trace {
        let mut trace = Trace::new(query_id, question, golds.to_vec());
        trace.seed = seed;
        let mut turn = 0;
        let outcome = self.drive(&mut trace, &mut turn);
        match outcome {
            Ok(termination) => trace.termination = termination,
            Err(Stop::Protocol(agent, message)) => {
                trace.termination = Termination::ProtocolError;
                trace.incident = Some(Incident {
                    agent: Some(agent),
                    turn,
                    message,
                });
            }
            Err(Stop::Backend(agent, message)) => {
                trace.termination = Termination::BackendFailure;
                trace.incident = Some(Incident { agent, turn, message });
            }
        }
        trace
    }

    fn drive(&self, trace: &mut Trace, turn_out: &mut usize) -> Result<Termination, Stop> {
        for turn in 0..self.reward.max_turns {
            *turn_out = turn;
            let mut segments = self.agent_turn(trace, AgentRole::Reasoner, None)?;
            let carried = if turn > 0 && segments.first().is_some_and(|s| s.kind == SegmentKind::Verify) {
                Some(segments.remove(0))
            } else {
                None
            };
            let verdict = validate_step(&segments, AgentRole::Reasoner, false);
            if let StepVerdict::Malformed(reason) = verdict {
                return Err(Stop::Protocol(AgentRole::Reasoner, reason));
            }
            if let Some(verify) = carried {
                let previous = trace
                    .steps
                    .iter_mut()
                    .rev()
                    .find(|s| s.agent == AgentRole::Reasoner)
                    .expect("turn > 0 has a reasoner step");
                previous.segments.push(verify);
            }
            let step = Step {
                turn,
                agent: AgentRole::Reasoner,
                segments,
            };
            let think = step
                .segment(SegmentKind::Think)
                .map(|s| s.text.clone())
                .unwrap_or_default();

            if verdict == StepVerdict::CompleteFinal {
                let answer = extract_answer(&step.segments, AgentRole::Reasoner)
                    .map_err(|e| Stop::Protocol(AgentRole::Reasoner, e.to_string()))?;
                let info = render_answer_information(&think, answer.as_deref().unwrap_or_default());
                trace.reasoner_answer = answer;
                trace.steps.push(step);
                return self.finish(trace, turn, &info);
            }

            let query = step
                .segment(SegmentKind::Search)
                .map(|s| s.text.clone())
                .unwrap_or_default();
            let documents = match self.backends.retriever.retrieve(&query, self.reward.top_k) {
                Ok(docs) => docs,
                Err(RetrievalError::EmptyQuery) => {
                    return Err(Stop::Protocol(AgentRole::Reasoner, "empty search query".into()))
                }
                Err(e) => return Err(Stop::Backend(None, e.to_string())),
            };
            let info = render_search_information(&think, &query, &documents);
            trace.steps.push(step);
            trace.retrievals.push(RetrievalEvent { turn, query, documents });

            let reply = self.agent_turn(trace, AgentRole::Verifier, Some(&info))?;
            if let StepVerdict::Malformed(reason) = validate_step(&reply, AgentRole::Verifier, false) {
                return Err(Stop::Protocol(AgentRole::Verifier, reason));
            }
            let response = reply
                .iter()
                .find(|s| s.kind == SegmentKind::Response)
                .map(|s| s.text.clone())
                .unwrap_or_default();
            let mut segments = vec![Segment::environment(SegmentKind::Information, info)];
            segments.extend(reply);
            trace.steps.push(Step {
                turn,
                agent: AgentRole::Verifier,
                segments,
            });
            let reasoner_step = trace.steps.len() - 2;
            trace.steps[reasoner_step]
                .segments
                .push(Segment::environment(SegmentKind::Feedback, response));
        }
        Ok(Termination::MaxTurns)
    }

    fn finish(&self, trace: &mut Trace, turn: usize, info: &str) -> Result<Termination, Stop> {
        let reply = self.agent_turn(trace, AgentRole::Verifier, Some(info))?;
        if let StepVerdict::Malformed(reason) = validate_step(&reply, AgentRole::Verifier, true) {
            return Err(Stop::Protocol(AgentRole::Verifier, reason));
        }
        trace.verifier_answer = extract_answer(&reply, AgentRole::Verifier)
            .map_err(|e| Stop::Protocol(AgentRole::Verifier, e.to_string()))?;
        let mut segments = vec![Segment::environment(SegmentKind::Information, info)];
        segments.extend(reply);
        trace.steps.push(Step {
            turn,
            agent: AgentRole::Verifier,
            segments,
        });

        let messages =
            build_context(trace, ContextRole::FinalGenerator, None).map_err(|e| Stop::Backend(None, e.to_string()))?;
        let out = self
            .call(self.backends.reasoner, messages, trace.seed)
            .map_err(|e| Stop::Backend(Some(AgentRole::Reasoner), format!("final generation: {e}")))?;
        trace.final_answer = Some(extract_final_answer(&out.text));
        Ok(Termination::Answered)
    }

    /// Runs `group_size` dialogues with seeds `base_seed + i`, scores them and
    /// normalizes rewards within the group. Traces keep seed order.
    pub fn run_group(
        &self,
        query_id: &str,
        question: &str,
        golds: &[String],
        group_size: usize,
        base_seed: u64,
    ) -> Result<GroupRollout, GrpoError> {
        if group_size < 2 {
            return Err(GrpoError::GroupTooSmall(group_size));
        }
        let traces: Vec<Trace> = (0..group_size as u64)
            .into_par_iter()
            .map(|i| self.run_dialogue(query_id, question, golds, base_seed.wrapping_add(i)))
            .collect();
        let breakdowns = traces.iter().map(|t| score_trace(t, &self.reward)).collect();
        GroupRollout::from_scored(query_id, traces, breakdowns)
    }
}
