//! Runs a communication graph as a multi-agent pipeline.
//!
//! Scheduling follows a deterministic topological order; within each of the
//! K refinement rounds an agent fires only after all of its in-neighbors
//! have responded. Prompts are assembled byte-deterministically from the
//! query and in-neighbor responses; the trace records every invocation with
//! token counts. Isolated nodes are skipped and excluded from aggregation.

mod backend;

pub use backend::{
    AgentBackend, BackendError, BackendResponse, GenerationSettings, HttpBackend, MockAgentMode,
    MockBackend,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{topological_sort, AgentSpec, CommGraph, CycleError};
use crate::query::QueryContext;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error(transparent)]
    Cycle(#[from] CycleError),
    #[error("graph has {expected} agents but {got} backends were supplied")]
    BackendArity { expected: usize, got: usize },
    #[error("no active agents to execute")]
    NoActiveAgents,
    #[error("missing response from in-neighbor {neighbor} of agent {agent} in round {round}")]
    MissingNeighborResponse {
        agent: usize,
        neighbor: usize,
        round: usize,
    },
    #[error("backend for agent {agent} failed in round {round}: {source}")]
    BackendFailed {
        agent: usize,
        round: usize,
        source: BackendError,
    },
    #[error("aggregation over an empty response set")]
    EmptyResponses,
    #[error("rounds must be >= 1")]
    ZeroRounds,
}

/// Topological schedule plus per-node depth levels. Nodes sharing a depth
/// are eligible to run concurrently.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub order: Vec<usize>,
    pub depth: Vec<usize>,
}

impl Schedule {
    /// Position of each node in the execution order.
    pub fn position(&self, node: usize) -> usize {
        self.order
            .iter()
            .position(|&v| v == node)
            .expect("node is scheduled")
    }
}

/// Deterministic schedule: topological order with depth(v) = 1 + max depth
/// over in-neighbors (0 for sources).
pub fn plan_schedule(g: &CommGraph) -> Result<Schedule, CycleError> {
    let order = topological_sort(g)?;
    let mut depth = vec![0usize; g.n()];
    for &v in &order {
        depth[v] = g
            .in_neighbors(v)
            .into_iter()
            .map(|u| depth[u] + 1)
            .max()
            .unwrap_or(0);
    }
    Ok(Schedule { order, depth })
}

/// Assembles the system and user prompts for one agent invocation.
///
/// The system prompt carries the role and accumulated state. The user prompt
/// is exactly the query when the agent has no in-neighbor responses;
/// otherwise each response follows under a source-role header, in schedule
/// order. Byte-deterministic by construction.
pub fn assemble_prompt(
    agent: &AgentSpec,
    q: &QueryContext,
    neighbor_responses: &[(String, String)],
    round: usize,
) -> (String, String) {
    let mut system = format!("You are the {} agent (round {round}).", agent.role.label);
    if !agent.state.is_empty() {
        system.push_str("\nState: ");
        system.push_str(&agent.state);
    }
    let mut user = q.text.clone();
    for (role, response) in neighbor_responses {
        user.push_str("\n\n[from ");
        user.push_str(role);
        user.push_str("]\n");
        user.push_str(response);
    }
    (system, user)
}

/// Final-solution strategies over last-round responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    MajorityVote,
    Consolidate,
    LastAgent,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::MajorityVote => "majority_vote",
            Aggregation::Consolidate => "consolidate",
            Aggregation::LastAgent => "last_agent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "majority_vote" => Some(Aggregation::MajorityVote),
            "consolidate" => Some(Aggregation::Consolidate),
            "last_agent" => Some(Aggregation::LastAgent),
            _ => None,
        }
    }
}

/// Answer normalization for majority voting: trim, casefold, strip trailing
/// ASCII punctuation.
pub fn normalize_answer(s: &str) -> String {
    s.trim()
        .trim_end_matches(|c: char| c.is_ascii_punctuation())
        .trim_end()
        .to_lowercase()
}

/// One backend invocation in the trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvocationRecord {
    pub round: usize,
    pub agent: usize,
    pub system_prompt: String,
    pub user_prompt: String,
    pub response: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub invocation_index: usize,
}

/// Complete record of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub schedule: Schedule,
    pub rounds: usize,
    pub aggregation: Aggregation,
    pub records: Vec<InvocationRecord>,
    pub solution: String,
}

impl ExecutionTrace {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

/// Options for the execution loop.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExecOptions {
    /// Round k > 1 consumes round k-1 responses instead of same-round ones.
    pub stale_neighbors: bool,
}

/// Token totals with a per-agent breakdown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTotals {
    pub prompt: u64,
    pub completion: u64,
    pub per_agent: BTreeMap<usize, (u64, u64)>,
}

/// Sums token counts over a trace. Pure; totals are additive by
/// construction.
pub fn account_tokens(trace: &ExecutionTrace) -> TokenTotals {
    let mut totals = TokenTotals {
        prompt: 0,
        completion: 0,
        per_agent: BTreeMap::new(),
    };
    for r in &trace.records {
        totals.prompt += r.prompt_tokens;
        totals.completion += r.completion_tokens;
        let e = totals.per_agent.entry(r.agent).or_insert((0, 0));
        e.0 += r.prompt_tokens;
        e.1 += r.completion_tokens;
    }
    totals
}

/// Runs `rounds` refinement rounds of the pipeline and aggregates the final
/// round's responses into a solution.
pub fn execute(
    g: &CommGraph,
    q: &QueryContext,
    backends: &mut [Box<dyn AgentBackend>],
    rounds: usize,
    aggregation: Aggregation,
    opts: ExecOptions,
) -> Result<ExecutionTrace, ExecError> {
    if rounds == 0 {
        return Err(ExecError::ZeroRounds);
    }
    if backends.len() != g.n() {
        return Err(ExecError::BackendArity {
            expected: g.n(),
            got: backends.len(),
        });
    }
    let schedule = plan_schedule(g)?;
    let active: Vec<usize> = schedule
        .order
        .iter()
        .copied()
        .filter(|&v| !g.is_isolated(v))
        .collect();
    if active.is_empty() {
        return Err(ExecError::NoActiveAgents);
    }

    let mut records: Vec<InvocationRecord> = Vec::new();
    // responses[round - 1][agent] -> response text
    let mut responses: Vec<BTreeMap<usize, String>> = vec![BTreeMap::new(); rounds];
    let mut invocation_index = 0usize;

    for round in 1..=rounds {
        for &agent in &active {
            let mut neighbor_responses = Vec::new();
            let mut in_nbrs = g.in_neighbors(agent);
            // Present in-neighbor responses in schedule order.
            in_nbrs.sort_by_key(|&u| schedule.position(u));
            let source_round = if opts.stale_neighbors {
                round.checked_sub(2).map(|r| r + 1) // round - 1, 1-indexed
            } else {
                Some(round)
            };
            if let Some(src) = source_round {
                for u in in_nbrs {
                    match responses[src - 1].get(&u) {
                        Some(text) => neighbor_responses
                            .push((g.agent(u).role.label.clone(), text.clone())),
                        None => {
                            return Err(ExecError::MissingNeighborResponse {
                                agent,
                                neighbor: u,
                                round,
                            })
                        }
                    }
                }
            }
            let (system_prompt, user_prompt) =
                assemble_prompt(g.agent(agent), q, &neighbor_responses, round);
            let result = backends[agent]
                .invoke(&system_prompt, &user_prompt)
                .map_err(|source| ExecError::BackendFailed {
                    agent,
                    round,
                    source,
                })?;
            responses[round - 1].insert(agent, result.text.clone());
            records.push(InvocationRecord {
                round,
                agent,
                system_prompt,
                user_prompt,
                response: result.text,
                prompt_tokens: result.prompt_tokens,
                completion_tokens: result.completion_tokens,
                invocation_index,
            });
            invocation_index += 1;
        }
    }

    let final_responses: Vec<(usize, String)> = active
        .iter()
        .map(|&v| (v, responses[rounds - 1][&v].clone()))
        .collect();
    let solution = aggregate_internal(
        g,
        q,
        backends,
        aggregation,
        &final_responses,
        &mut records,
        &mut invocation_index,
    )?;

    Ok(ExecutionTrace {
        schedule,
        rounds,
        aggregation,
        records,
        solution,
    })
}

/// Aggregates final-round responses (schedule order) into one solution.
/// For `Consolidate` this is pure text concatenation; use [`execute`] when a
/// decider invocation should be recorded.
pub fn aggregate(
    responses: &[(usize, String)],
    strategy: Aggregation,
) -> Result<String, ExecError> {
    if responses.is_empty() {
        return Err(ExecError::EmptyResponses);
    }
    match strategy {
        Aggregation::MajorityVote => Ok(majority_vote(responses)),
        Aggregation::LastAgent => Ok(responses.last().expect("nonempty").1.clone()),
        Aggregation::Consolidate => Ok(responses
            .iter()
            .map(|(_, r)| r.as_str())
            .collect::<Vec<_>>()
            .join("\n")),
    }
}

fn majority_vote(responses: &[(usize, String)]) -> String {
    // Count normalized answers; ties break on earliest schedule position,
    // which is the first occurrence in the (schedule-ordered) slice.
    let mut counts: Vec<(String, usize, usize)> = Vec::new(); // (answer, count, first_pos)
    for (pos, (_, text)) in responses.iter().enumerate() {
        let norm = normalize_answer(text);
        match counts.iter_mut().find(|(a, _, _)| *a == norm) {
            Some(entry) => entry.1 += 1,
            None => counts.push((norm, 1, pos)),
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2)))
        .expect("nonempty responses")
        .0
}

fn aggregate_internal(
    g: &CommGraph,
    q: &QueryContext,
    backends: &mut [Box<dyn AgentBackend>],
    strategy: Aggregation,
    final_responses: &[(usize, String)],
    records: &mut Vec<InvocationRecord>,
    invocation_index: &mut usize,
) -> Result<String, ExecError> {
    if final_responses.is_empty() {
        return Err(ExecError::EmptyResponses);
    }
    match strategy {
        Aggregation::MajorityVote | Aggregation::LastAgent => {
            aggregate(final_responses, strategy)
        }
        Aggregation::Consolidate => {
            // A designated decider consumes every final response: the first
            // scheduled agent labelled Decider, else the last scheduled one.
            let decider = final_responses
                .iter()
                .map(|&(v, _)| v)
                .find(|&v| g.agent(v).role.label == "Decider")
                .unwrap_or_else(|| final_responses.last().expect("nonempty").0);
            let neighbor_responses: Vec<(String, String)> = final_responses
                .iter()
                .map(|(v, r)| (g.agent(*v).role.label.clone(), r.clone()))
                .collect();
            let (system_prompt, user_prompt) =
                assemble_prompt(g.agent(decider), q, &neighbor_responses, 0);
            let result = backends[decider]
                .invoke(&system_prompt, &user_prompt)
                .map_err(|source| ExecError::BackendFailed {
                    agent: decider,
                    round: 0,
                    source,
                })?;
            records.push(InvocationRecord {
                round: 0,
                agent: decider,
                system_prompt,
                user_prompt,
                response: result.text.clone(),
                prompt_tokens: result.prompt_tokens,
                completion_tokens: result.completion_tokens,
                invocation_index: *invocation_index,
            });
            *invocation_index += 1;
            Ok(result.text)
        }
    }
}

/// Builds one echo-mock backend per agent.
pub fn echo_backends(g: &CommGraph) -> Vec<Box<dyn AgentBackend>> {
    (0..g.n())
        .map(|_| Box::new(MockBackend::echo()) as Box<dyn AgentBackend>)
        .collect()
}

/// Builds scripted mocks answering `truth`, then flips `liar_count` of them
/// (lowest agent index first, skipping Decider roles) into liars. Returns
/// the flipped agent indices alongside the backends.
pub fn scripted_backends_with_liars(
    g: &CommGraph,
    truth: &str,
    liar_count: usize,
) -> (Vec<Box<dyn AgentBackend>>, Vec<usize>) {
    let mut mocks: Vec<MockBackend> = (0..g.n()).map(|_| MockBackend::scripted(truth)).collect();
    let mut flipped = Vec::new();
    for v in 0..g.n() {
        if flipped.len() == liar_count {
            break;
        }
        if g.agent(v).role.label != "Decider" {
            mocks[v].make_liar();
            flipped.push(v);
        }
    }
    (
        mocks
            .into_iter()
            .map(|m| Box::new(m) as Box<dyn AgentBackend>)
            .collect(),
        flipped,
    )
}
