//! Directed communication graphs over role-labelled agents.
//!
//! Provides the graph representation shared by every other module, plus the
//! structural machinery the pipeline relies on: deterministic topological
//! sorting, effective-size redundancy metrics for directed ego networks,
//! baseline topology families, greedy cycle projection, summary statistics,
//! and the JSON topology document format.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, BTreeMap};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default edge probability for the `random` baseline family.
pub const DEFAULT_RANDOM_EDGE_PROB: f64 = 0.3;

/// Errors raised by graph construction and graph-level operations.
#[derive(Debug, Error)]
pub enum GraphError {
    #[error("node index {index} out of range for graph with {n} nodes")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("beta {0} outside [0, 1]")]
    BetaOutOfRange(f64),
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("topology family requires at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("duplicate agent id {0}")]
    DuplicateAgentId(usize),
    #[error("agent id {id} out of range for {n} agents")]
    AgentIdOutOfRange { id: usize, n: usize },
    #[error("unknown role label {0:?}")]
    UnknownRole(String),
    #[error("duplicate role label {0:?}")]
    DuplicateRole(String),
    #[error("malformed topology document: {0}")]
    Malformed(String),
    #[error(transparent)]
    Cycle(#[from] CycleError),
}

/// A directed cycle witness returned when no topological order exists.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("graph contains a cycle: {}", format_cycle(cycle))]
pub struct CycleError {
    /// Node indices along one witness cycle, in edge order. The edge from the
    /// last entry back to the first closes the cycle.
    pub cycle: Vec<usize>,
}

fn format_cycle(cycle: &[usize]) -> String {
    let mut s = String::new();
    for v in cycle {
        s.push_str(&v.to_string());
        s.push_str(" -> ");
    }
    if let Some(first) = cycle.first() {
        s.push_str(&first.to_string());
    }
    s
}

/// Neighborhood direction selector for ego-network metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    In,
    Out,
}

/// A functional role drawn from a [`RoleVocabulary`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleId {
    pub index: usize,
    pub label: String,
}

/// Ordered set of unique role labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleVocabulary {
    labels: Vec<String>,
}

impl RoleVocabulary {
    pub fn new<I, S>(labels: I) -> Result<Self, GraphError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(GraphError::DuplicateRole(l.clone()));
            }
        }
        Ok(Self { labels })
    }

    /// The stock five-role vocabulary used by the baseline topologies.
    pub fn default_roles() -> Self {
        Self::new(["Solver", "Critic", "Verifier", "Planner", "Decider"])
            .expect("default labels are unique")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn role(&self, index: usize) -> Option<RoleId> {
        self.labels.get(index).map(|label| RoleId {
            index,
            label: label.clone(),
        })
    }

    pub fn by_label(&self, label: &str) -> Option<RoleId> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|index| RoleId {
                index,
                label: label.to_string(),
            })
    }
}

/// One agent: an LLM backend binding, a role, accumulated state, and tool ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: usize,
    pub base: String,
    pub role: RoleId,
    pub state: String,
    pub plugins: Vec<String>,
}

impl AgentSpec {
    pub fn new(id: usize, role: RoleId) -> Self {
        Self {
            id,
            base: "mock".to_string(),
            role,
            state: String::new(),
            plugins: Vec::new(),
        }
    }
}

/// A directed communication graph: dense boolean adjacency plus agent specs.
///
/// `adjacency[from * n + to]` is true when `from` sends messages to `to`.
/// Self-loops are rejected at every mutation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommGraph {
    n: usize,
    adjacency: Vec<bool>,
    agents: Vec<AgentSpec>,
}

impl CommGraph {
    pub fn new(agents: Vec<AgentSpec>) -> Result<Self, GraphError> {
        let n = agents.len();
        let mut seen = vec![false; n];
        for a in &agents {
            if a.id >= n {
                return Err(GraphError::AgentIdOutOfRange { id: a.id, n });
            }
            if seen[a.id] {
                return Err(GraphError::DuplicateAgentId(a.id));
            }
            seen[a.id] = true;
        }
        Ok(Self {
            n,
            adjacency: vec![false; n * n],
            agents,
        })
    }

    /// Convenience constructor assigning `roles[i]` to agent `i`.
    pub fn from_roles(roles: Vec<RoleId>) -> Self {
        let agents = roles
            .into_iter()
            .enumerate()
            .map(|(id, role)| AgentSpec::new(id, role))
            .collect();
        Self::new(agents).expect("ids are sequential")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn agents(&self) -> &[AgentSpec] {
        &self.agents
    }

    pub fn agent(&self, i: usize) -> &AgentSpec {
        &self.agents[i]
    }

    pub fn set_role(&mut self, i: usize, role: RoleId) {
        self.agents[i].role = role;
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        from < self.n && to < self.n && self.adjacency[from * self.n + to]
    }

    pub fn set_edge(&mut self, from: usize, to: usize, present: bool) -> Result<(), GraphError> {
        self.check_index(from)?;
        self.check_index(to)?;
        if from == to && present {
            return Err(GraphError::SelfLoop(from));
        }
        self.adjacency[from * self.n + to] = present;
        Ok(())
    }

    pub fn add_edge(&mut self, from: usize, to: usize) -> Result<(), GraphError> {
        self.set_edge(from, to, true)
    }

    fn check_index(&self, index: usize) -> Result<(), GraphError> {
        if index >= self.n {
            return Err(GraphError::IndexOutOfRange { index, n: self.n });
        }
        Ok(())
    }

    /// All edges as `(from, to)`, sorted ascending.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for from in 0..self.n {
            for to in 0..self.n {
                if self.adjacency[from * self.n + to] {
                    out.push((from, to));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&b| b).count()
    }

    pub fn in_neighbors(&self, v: usize) -> Vec<usize> {
        (0..self.n).filter(|&u| self.has_edge(u, v)).collect()
    }

    pub fn out_neighbors(&self, v: usize) -> Vec<usize> {
        (0..self.n).filter(|&u| self.has_edge(v, u)).collect()
    }

    pub fn degree(&self, v: usize) -> usize {
        self.in_neighbors(v).len() + self.out_neighbors(v).len()
    }

    pub fn is_isolated(&self, v: usize) -> bool {
        self.degree(v) == 0
    }

    /// Non-isolated node indices, ascending.
    pub fn active_nodes(&self) -> Vec<usize> {
        (0..self.n).filter(|&v| !self.is_isolated(v)).collect()
    }
}

/// Deterministic topological sort (Kahn's algorithm, ties broken by ascending
/// node index). Returns a witness cycle when no order exists.
pub fn topological_sort(g: &CommGraph) -> Result<Vec<usize>, CycleError> {
    let n = g.n();
    let mut indegree = vec![0usize; n];
    for (_, to) in g.edges() {
        indegree[to] += 1;
    }
    let mut heap: BinaryHeap<Reverse<usize>> = (0..n)
        .filter(|&v| indegree[v] == 0)
        .map(Reverse)
        .collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(v)) = heap.pop() {
        order.push(v);
        for u in g.out_neighbors(v) {
            indegree[u] -= 1;
            if indegree[u] == 0 {
                heap.push(Reverse(u));
            }
        }
    }
    if order.len() == n {
        Ok(order)
    } else {
        Err(CycleError {
            cycle: find_cycle(g, &indegree),
        })
    }
}

/// Extracts one cycle among the nodes Kahn's algorithm could not drain.
/// Every undrained node keeps an undrained in-neighbor, so a backwards walk
/// must revisit a node; the revisited segment, reversed, is a forward cycle.
fn find_cycle(g: &CommGraph, indegree: &[usize]) -> Vec<usize> {
    let start = (0..g.n())
        .find(|&v| indegree[v] > 0)
        .expect("a cycle leaves undrained nodes");
    let mut path = vec![start];
    let mut seen_at: BTreeMap<usize, usize> = BTreeMap::new();
    seen_at.insert(start, 0);
    let mut cur = start;
    loop {
        let prev = g
            .in_neighbors(cur)
            .into_iter()
            .find(|u| indegree[*u] > 0)
            .expect("undrained nodes keep an undrained in-neighbor");
        if let Some(&pos) = seen_at.get(&prev) {
            let mut cycle: Vec<usize> = path[pos..].to_vec();
            cycle.reverse();
            return cycle;
        }
        seen_at.insert(prev, path.len());
        path.push(prev);
        cur = prev;
    }
}

/// Effective size of the in- or out-ego network of `node`.
///
/// Neighborhood size minus the per-neighbor average count of same-role
/// ordered pairs that are directly connected. An empty neighborhood yields 0.
pub fn effective_size(g: &CommGraph, node: usize, direction: Direction) -> Result<f64, GraphError> {
    if node >= g.n() {
        return Err(GraphError::IndexOutOfRange {
            index: node,
            n: g.n(),
        });
    }
    let hood = match direction {
        Direction::In => g.in_neighbors(node),
        Direction::Out => g.out_neighbors(node),
    };
    if hood.is_empty() {
        return Ok(0.0);
    }
    let mut redundant = 0usize;
    for &j in &hood {
        for &q in &hood {
            if j != q && g.has_edge(j, q) && g.agent(j).role.index == g.agent(q).role.index {
                redundant += 1;
            }
        }
    }
    Ok(hood.len() as f64 - redundant as f64 / hood.len() as f64)
}

/// Convex combination of incoming and outgoing effective size:
/// `phi_in * (1 - beta) + phi_out * beta`.
pub fn combined_effective_size(g: &CommGraph, node: usize, beta: f64) -> Result<f64, GraphError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(GraphError::BetaOutOfRange(beta));
    }
    let phi_in = effective_size(g, node, Direction::In)?;
    let phi_out = effective_size(g, node, Direction::Out)?;
    Ok(phi_in * (1.0 - beta) + phi_out * beta)
}

/// Baseline communication topology families.
///
/// Every family is emitted as a DAG by orienting edges from lower to higher
/// node index, so the output is always execution-ready.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyFamily {
    FullyConnected,
    Mesh,
    Star,
    Layered,
    Random,
}

impl TopologyFamily {
    pub const ALL: [TopologyFamily; 5] = [
        TopologyFamily::FullyConnected,
        TopologyFamily::Mesh,
        TopologyFamily::Star,
        TopologyFamily::Layered,
        TopologyFamily::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TopologyFamily::FullyConnected => "fully_connected",
            TopologyFamily::Mesh => "mesh",
            TopologyFamily::Star => "star",
            TopologyFamily::Layered => "layered",
            TopologyFamily::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }
}

/// Builds a baseline topology with roles drawn uniformly from `roles`.
/// The `random` family uses [`DEFAULT_RANDOM_EDGE_PROB`].
pub fn baseline_topology(
    family: TopologyFamily,
    n: usize,
    roles: &RoleVocabulary,
    seed: u64,
) -> Result<CommGraph, GraphError> {
    baseline_topology_with_edge_prob(family, n, roles, DEFAULT_RANDOM_EDGE_PROB, seed)
}

/// As [`baseline_topology`], with an explicit edge probability for `random`.
pub fn baseline_topology_with_edge_prob(
    family: TopologyFamily,
    n: usize,
    roles: &RoleVocabulary,
    edge_prob: f64,
    seed: u64,
) -> Result<CommGraph, GraphError> {
    if n < 2 {
        return Err(GraphError::TooFewNodes(n));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let assigned: Vec<RoleId> = (0..n)
        .map(|_| {
            let idx = rng.random_range(0..roles.len());
            roles.role(idx).expect("index within vocabulary")
        })
        .collect();
    let mut g = CommGraph::from_roles(assigned);
    match family {
        TopologyFamily::FullyConnected => {
            for a in 0..n {
                for b in (a + 1)..n {
                    g.add_edge(a, b)?;
                }
            }
        }
        TopologyFamily::Mesh => {
            // Grid adjacency with index-ordered orientation: node k sits at
            // (k / cols, k % cols) and links to its right and down neighbors.
            let cols = (n as f64).sqrt().ceil() as usize;
            for k in 0..n {
                if (k + 1) % cols != 0 && k + 1 < n {
                    g.add_edge(k, k + 1)?;
                }
                if k + cols < n {
                    g.add_edge(k, k + cols)?;
                }
            }
        }
        TopologyFamily::Star => {
            for leaf in 1..n {
                g.add_edge(0, leaf)?;
            }
        }
        TopologyFamily::Layered => {
            // Two layers, first ceil(n/2) nodes feeding the rest.
            let split = n.div_ceil(2);
            for a in 0..split {
                for b in split..n {
                    g.add_edge(a, b)?;
                }
            }
        }
        TopologyFamily::Random => {
            for a in 0..n {
                for b in (a + 1)..n {
                    if rng.random::<f64>() < edge_prob {
                        g.add_edge(a, b)?;
                    }
                }
            }
        }
    }
    Ok(g)
}

/// Projects an arbitrary digraph onto a DAG by repeatedly removing the
/// lowest-scored edge on a detected cycle. `edge_scores` is a row-major
/// `n x n` score matrix; ties break on ascending `(from, to)`.
///
/// A restore pass then re-adds (highest score first) any removed edge that
/// no longer closes a cycle, so every edge left out is individually
/// cycle-forcing. Already-acyclic inputs come back unchanged.
pub fn dag_project(g: &CommGraph, edge_scores: &[f64]) -> CommGraph {
    let n = g.n();
    assert_eq!(
        edge_scores.len(),
        n * n,
        "edge_scores must cover every ordered node pair"
    );
    let mut out = g.clone();
    let mut removed: Vec<(usize, usize)> = Vec::new();
    loop {
        match topological_sort(&out) {
            Ok(_) => break,
            Err(CycleError { cycle }) => {
                let mut worst: Option<(f64, usize, usize)> = None;
                for i in 0..cycle.len() {
                    let from = cycle[i];
                    let to = cycle[(i + 1) % cycle.len()];
                    let score = edge_scores[from * n + to];
                    let candidate = (score, from, to);
                    worst = Some(match worst {
                        None => candidate,
                        Some(best) if candidate < best => candidate,
                        Some(best) => best,
                    });
                }
                let (_, from, to) = worst.expect("cycle is nonempty");
                out.set_edge(from, to, false)
                    .expect("cycle edges are in range");
                removed.push((from, to));
            }
        }
    }
    removed.sort_by(|&(af, at), &(bf, bt)| {
        edge_scores[bf * n + bt]
            .partial_cmp(&edge_scores[af * n + at])
            .expect("finite scores")
            .then((af, at).cmp(&(bf, bt)))
    });
    for (from, to) in removed {
        out.set_edge(from, to, true).expect("edge is in range");
        if topological_sort(&out).is_err() {
            out.set_edge(from, to, false).expect("edge is in range");
        }
    }
    out
}

/// Summary statistics over a graph's active (non-isolated) subgraph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub active_size: usize,
    pub density: f64,
    pub mean_effective_size: f64,
}

/// Active-node count, ordered-pair density, and mean combined effective size
/// over active nodes.
pub fn graph_stats(g: &CommGraph, beta: f64) -> Result<GraphStats, GraphError> {
    let n = g.n();
    let active = g.active_nodes();
    let density = if n > 1 {
        g.edge_count() as f64 / (n * (n - 1)) as f64
    } else {
        0.0
    };
    let mean_effective_size = if active.is_empty() {
        0.0
    } else {
        let sum: f64 = active
            .iter()
            .map(|&v| combined_effective_size(g, v, beta))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .sum();
        sum / active.len() as f64
    };
    Ok(GraphStats {
        active_size: active.len(),
        density,
        mean_effective_size,
    })
}

/// On-disk topology document: role labels per node, edge list, free-form meta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyDoc {
    pub n: usize,
    pub roles: Vec<String>,
    pub edges: Vec<[usize; 2]>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

/// Serializes a graph to the topology document. Extra agent fields (base,
/// state, plugins) are stored under reserved meta keys only when any of them
/// differs from its default, so round trips are exact.
pub fn to_doc(g: &CommGraph) -> TopologyDoc {
    let mut meta = BTreeMap::new();
    let agents = g.agents();
    if agents.iter().any(|a| a.base != "mock") {
        meta.insert(
            "bases".to_string(),
            serde_json::json!(agents.iter().map(|a| a.base.clone()).collect::<Vec<_>>()),
        );
    }
    if agents.iter().any(|a| !a.state.is_empty()) {
        meta.insert(
            "states".to_string(),
            serde_json::json!(agents.iter().map(|a| a.state.clone()).collect::<Vec<_>>()),
        );
    }
    if agents.iter().any(|a| !a.plugins.is_empty()) {
        meta.insert(
            "plugins".to_string(),
            serde_json::json!(agents.iter().map(|a| a.plugins.clone()).collect::<Vec<_>>()),
        );
    }
    TopologyDoc {
        n: g.n(),
        roles: agents.iter().map(|a| a.role.label.clone()).collect(),
        edges: g.edges().into_iter().map(|(a, b)| [a, b]).collect(),
        meta,
    }
}

/// Reconstructs a graph from a topology document, resolving role labels
/// against `vocab`.
pub fn from_doc(doc: &TopologyDoc, vocab: &RoleVocabulary) -> Result<CommGraph, GraphError> {
    if doc.roles.len() != doc.n {
        return Err(GraphError::Malformed(format!(
            "roles array has length {} but n = {}",
            doc.roles.len(),
            doc.n
        )));
    }
    let roles: Vec<RoleId> = doc
        .roles
        .iter()
        .map(|label| {
            vocab
                .by_label(label)
                .ok_or_else(|| GraphError::UnknownRole(label.clone()))
        })
        .collect::<Result<_, _>>()?;
    let mut g = CommGraph::from_roles(roles);
    for &[from, to] in &doc.edges {
        if from == to {
            return Err(GraphError::SelfLoop(from));
        }
        g.set_edge(from, to, true)?;
    }
    fn meta_strings(doc: &TopologyDoc, key: &str) -> Option<Vec<String>> {
        doc.meta
            .get(key)
            .and_then(|v| serde_json::from_value(v.clone()).ok())
    }
    if let Some(bases) = meta_strings(doc, "bases") {
        for (i, base) in bases.into_iter().enumerate().take(g.n) {
            g.agents[i].base = base;
        }
    }
    if let Some(states) = meta_strings(doc, "states") {
        for (i, state) in states.into_iter().enumerate().take(g.n) {
            g.agents[i].state = state;
        }
    }
    if let Some(plugins) = doc
        .meta
        .get("plugins")
        .and_then(|v| serde_json::from_value::<Vec<Vec<String>>>(v.clone()).ok())
    {
        for (i, p) in plugins.into_iter().enumerate().take(g.n) {
            g.agents[i].plugins = p;
        }
    }
    Ok(g)
}

pub fn to_json_string(g: &CommGraph) -> String {
    serde_json::to_string_pretty(&to_doc(g)).expect("topology doc serializes")
}

pub fn from_json_str(s: &str, vocab: &RoleVocabulary) -> Result<CommGraph, GraphError> {
    let doc: TopologyDoc =
        serde_json::from_str(s).map_err(|e| GraphError::Malformed(e.to_string()))?;
    from_doc(&doc, vocab)
}

/// Renders the active subgraph in DOT format; isolated nodes are omitted.
pub fn to_dot(g: &CommGraph, name: &str) -> String {
    let mut s = format!("digraph {name} {{\n");
    for &v in &g.active_nodes() {
        s.push_str(&format!(
            "  n{v} [label=\"{}:{}\"];\n",
            v,
            g.agent(v).role.label
        ));
    }
    for (a, b) in g.edges() {
        s.push_str(&format!("  n{a} -> n{b};\n"));
    }
    s.push_str("}\n");
    s
}
