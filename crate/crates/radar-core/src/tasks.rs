//! Deterministic, LLM-free utility oracles and task-suite generation.
//!
//! A synthetic task asks for a set of roles to be present and a directed
//! route between two of them. Utility rewards role coverage and route
//! presence over the active subgraph, so isolated agents contribute nothing;
//! cost is a structural proxy for token spend.

use std::collections::BTreeMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{CommGraph, RoleId, RoleVocabulary};
use crate::query::{fallback_embedding, QueryContext};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("cost normalizer must be positive, got {0}")]
    BadNormalizer(f64),
    #[error("task suite needs at least 1 task")]
    EmptySuite,
    #[error("vocabulary too small: difficulty needs {needed} roles, vocabulary has {have}")]
    VocabularyTooSmall { needed: usize, have: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Hard,
}

impl Difficulty {
    /// Number of required roles: easy tasks ask for 2, hard for 4.
    pub fn required_role_count(self) -> usize {
        match self {
            Difficulty::Easy => 2,
            Difficulty::Hard => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        }
    }
}

/// One synthetic benchmark task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub task_id: String,
    pub query: String,
    pub required_roles: Vec<RoleId>,
    pub required_path: (RoleId, RoleId),
    pub difficulty: Difficulty,
}

impl SyntheticTask {
    pub fn query_context(&self, dim: usize) -> QueryContext {
        QueryContext {
            text: self.query.clone(),
            embedding: fallback_embedding(&self.query, dim),
            task_id: self.task_id.clone(),
        }
    }
}

/// Utility in [0, 1]: half for covering the required role multiset with
/// active agents, half for a directed route from a source-role agent to a
/// sink-role agent. Graphs with no edges score 0.
pub fn synthetic_utility(g: &CommGraph, task: &SyntheticTask) -> f64 {
    let active = g.active_nodes();
    if active.is_empty() {
        return 0.0;
    }
    // Multiset coverage over active agents.
    let mut have: BTreeMap<usize, usize> = BTreeMap::new();
    for &v in &active {
        *have.entry(g.agent(v).role.index).or_default() += 1;
    }
    let mut need: BTreeMap<usize, usize> = BTreeMap::new();
    for r in &task.required_roles {
        *need.entry(r.index).or_default() += 1;
    }
    let matched: usize = need
        .iter()
        .map(|(role, &count)| count.min(have.get(role).copied().unwrap_or(0)))
        .sum();
    let coverage = matched as f64 / task.required_roles.len() as f64;

    let (src, sink) = (&task.required_path.0, &task.required_path.1);
    let path = active.iter().any(|&a| {
        g.agent(a).role.index == src.index
            && reachable_from(g, a)
                .into_iter()
                .any(|b| g.agent(b).role.index == sink.index)
    });
    0.5 * coverage + 0.5 * if path { 1.0 } else { 0.0 }
}

/// Nodes reachable from `start` by following zero or more directed edges.
fn reachable_from(g: &CommGraph, start: usize) -> Vec<usize> {
    let mut seen = vec![false; g.n()];
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(v) = stack.pop() {
        for u in g.out_neighbors(v) {
            if !seen[u] {
                seen[u] = true;
                stack.push(u);
            }
        }
    }
    (0..g.n()).filter(|&v| seen[v]).collect()
}

/// Structural communication-cost proxy: `(|E| + active nodes) / normalizer`.
pub fn synthetic_cost(g: &CommGraph, normalizer: f64) -> Result<f64, TaskError> {
    if normalizer <= 0.0 {
        return Err(TaskError::BadNormalizer(normalizer));
    }
    Ok((g.edge_count() + g.active_nodes().len()) as f64 / normalizer)
}

/// The optimization objective: `-u + alpha * c` (lower is better).
pub fn objective(utility: f64, cost: f64, alpha: f64) -> f64 {
    -utility + alpha * cost
}

/// Deterministic task suite. The first `round(n * easy_fraction)` tasks are
/// easy, the rest hard. Query text is templated from the sampled roles so the
/// fallback embedder separates tasks.
pub fn generate_task_suite(
    n: usize,
    easy_fraction: f64,
    vocab: &RoleVocabulary,
    seed: u64,
) -> Result<Vec<SyntheticTask>, TaskError> {
    if n == 0 {
        return Err(TaskError::EmptySuite);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n_easy = (n as f64 * easy_fraction).round() as usize;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let difficulty = if i < n_easy {
            Difficulty::Easy
        } else {
            Difficulty::Hard
        };
        out.push(generate_task(i, difficulty, vocab, &mut rng)?);
    }
    Ok(out)
}

fn generate_task(
    index: usize,
    difficulty: Difficulty,
    vocab: &RoleVocabulary,
    rng: &mut ChaCha12Rng,
) -> Result<SyntheticTask, TaskError> {
    let needed = difficulty.required_role_count();
    if vocab.len() < 2 {
        return Err(TaskError::VocabularyTooSmall {
            needed: 2,
            have: vocab.len(),
        });
    }
    // The route endpoints are distinct; remaining requirements sample with
    // replacement, so hard tasks may demand several agents of one role.
    let src_pick = rng.random_range(0..vocab.len());
    let mut sink_pick = rng.random_range(0..vocab.len());
    while sink_pick == src_pick {
        sink_pick = rng.random_range(0..vocab.len());
    }
    let mut picked = vec![src_pick, sink_pick];
    for _ in 2..needed {
        picked.push(rng.random_range(0..vocab.len()));
    }
    let required_roles: Vec<RoleId> = picked
        .iter()
        .map(|&i| vocab.role(i).expect("index within vocabulary"))
        .collect();
    let src = required_roles[0].clone();
    let sink = required_roles[1].clone();
    let labels: Vec<&str> = required_roles.iter().map(|r| r.label.as_str()).collect();
    let task_id = format!("task-{index:03}");
    let query = format!(
        "[{}] Coordinate specialists {} on assignment {index:03}; route findings from {} to {}.",
        difficulty.name(),
        labels.join(", "),
        src.label,
        sink.label,
    );
    Ok(SyntheticTask {
        task_id,
        query,
        required_roles,
        required_path: (src, sink),
        difficulty,
    })
}

pub fn suite_to_json(tasks: &[SyntheticTask]) -> String {
    serde_json::to_string_pretty(tasks).expect("task suite serializes")
}

pub fn suite_from_json(s: &str) -> Result<Vec<SyntheticTask>, serde_json::Error> {
    serde_json::from_str(s)
}
