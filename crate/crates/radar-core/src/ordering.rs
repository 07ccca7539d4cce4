//! The node-masking ordering policy for the forward diffusion process.
//!
//! Given a full graph and the set of nodes masked so far, the ordering
//! network scores the remaining nodes with relational message passing, biases
//! each score with the node's combined effective size on the still-visible
//! subgraph, and samples the next node to mask from the resulting categorical
//! distribution.

use rand::RngExt;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{combined_effective_size, CommGraph, GraphError};
use crate::nn::{positional_encoding, NnError, NodeId, ParamId, ParamSet, Tape};

#[derive(Debug, Error)]
pub enum OrderingError {
    #[error("prefix references node {index} outside graph of size {n}")]
    PrefixOutOfRange { index: usize, n: usize },
    #[error("node {0} already masked")]
    AlreadyMasked(usize),
    #[error("all nodes are masked")]
    AllMasked,
    #[error("graph is empty")]
    EmptyGraph,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// A partially masked graph at one diffusion step.
///
/// `prefix` lists masked nodes in masking order; an edge is visible only when
/// both endpoints are unmasked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedGraph {
    pub base: CommGraph,
    pub masked: Vec<bool>,
    pub prefix: Vec<usize>,
}

impl MaskedGraph {
    /// A fresh diffusion state with nothing masked.
    pub fn unmasked(base: CommGraph) -> Self {
        let n = base.n();
        Self {
            base,
            masked: vec![false; n],
            prefix: Vec::new(),
        }
    }

    /// A fully masked graph whose pseudo-masking order is ascending node
    /// index; reverse steps therefore recover the highest slot first.
    pub fn fully_masked(base: CommGraph) -> Self {
        let n = base.n();
        Self {
            base,
            masked: vec![true; n],
            prefix: (0..n).collect(),
        }
    }

    /// Current diffusion step `t` = number of masked nodes.
    pub fn step(&self) -> usize {
        self.prefix.len()
    }

    pub fn n(&self) -> usize {
        self.base.n()
    }

    pub fn is_masked(&self, v: usize) -> bool {
        self.masked[v]
    }

    pub fn mask_node(&mut self, v: usize) -> Result<(), OrderingError> {
        if v >= self.base.n() {
            return Err(OrderingError::PrefixOutOfRange {
                index: v,
                n: self.base.n(),
            });
        }
        if self.masked[v] {
            return Err(OrderingError::AlreadyMasked(v));
        }
        self.masked[v] = true;
        self.prefix.push(v);
        Ok(())
    }

    /// Unmasked node indices, ascending.
    pub fn visible_nodes(&self) -> Vec<usize> {
        (0..self.n()).filter(|&v| !self.masked[v]).collect()
    }

    /// Edges with both endpoints unmasked.
    pub fn visible_edges(&self) -> Vec<(usize, usize)> {
        self.base
            .edges()
            .into_iter()
            .filter(|&(a, b)| !self.masked[a] && !self.masked[b])
            .collect()
    }

    /// A copy of the base graph restricted to visible edges. Masked nodes
    /// remain as isolated placeholders so indices stay aligned.
    pub fn visible_subgraph(&self) -> CommGraph {
        let mut g = self.base.clone();
        for (a, b) in self.base.edges() {
            if self.masked[a] || self.masked[b] {
                g.set_edge(a, b, false).expect("edge indices are valid");
            }
        }
        g
    }

    /// Combined effective size per node, evaluated on the visible subgraph
    /// (or on the full base graph when `phi_on_g0` is set). `no_es` zeroes
    /// the whole vector.
    pub fn phi_values(&self, beta: f64, phi_on_g0: bool, no_es: bool) -> Result<Vec<f64>, GraphError> {
        if no_es {
            return Ok(vec![0.0; self.n()]);
        }
        let scope = if phi_on_g0 {
            self.base.clone()
        } else {
            self.visible_subgraph()
        };
        (0..self.n())
            .map(|v| combined_effective_size(&scope, v, beta))
            .collect()
    }
}

/// Options shared by the diffusion-side networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionOpts {
    pub beta: f64,
    pub phi_on_g0: bool,
    pub no_es: bool,
    pub no_query: bool,
}

impl Default for DiffusionOpts {
    fn default() -> Self {
        Self {
            beta: 0.7,
            phi_on_g0: false,
            no_es: false,
            no_query: false,
        }
    }
}

/// One sampled forward masking trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrajectory {
    /// Masking order: `ordering[t]` was masked at step `t + 1`.
    pub ordering: Vec<usize>,
    /// States after each masking step: `masked_graphs[t]` masks the first
    /// `t + 1` entries of `ordering`.
    pub masked_graphs: Vec<MaskedGraph>,
    /// Probability of the drawn node at each draw, in (0, 1].
    pub selection_probs: Vec<f64>,
}

/// Architecture of the ordering network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderingConfig {
    pub n_roles: usize,
    pub hidden: usize,
    pub layers: usize,
    pub pe_dim: usize,
}

impl OrderingConfig {
    pub fn feature_dim(&self) -> usize {
        self.n_roles + 1 + self.pe_dim
    }
}

struct RelationLayer {
    w_self: ParamId,
    w_in: ParamId,
    w_out: ParamId,
    bias: ParamId,
}

/// Relational message-passing scorer over partially masked graphs.
///
/// Per layer, a node combines an affine map of itself with affine maps of the
/// mean in-neighbor and mean out-neighbor embeddings, one weight matrix per
/// relation, followed by ReLU. A scalar head maps final embeddings to scores.
pub struct OrderingNet {
    pub cfg: OrderingConfig,
    input_w: ParamId,
    input_b: ParamId,
    layers: Vec<RelationLayer>,
    score_w: ParamId,
    score_b: ParamId,
}

impl OrderingNet {
    /// Registers all tensors for a fresh network.
    pub fn init(cfg: OrderingConfig, params: &mut ParamSet, rng: &mut ChaCha12Rng) -> Self {
        let feat = cfg.feature_dim();
        let h = cfg.hidden;
        let input_w = params.add("ordering.input.w", &[h, feat], rng);
        let input_b = params.add("ordering.input.b", &[h], rng);
        let layers = (0..cfg.layers)
            .map(|l| RelationLayer {
                w_self: params.add(&format!("ordering.layer{l}.self.w"), &[h, h], rng),
                w_in: params.add(&format!("ordering.layer{l}.in.w"), &[h, h], rng),
                w_out: params.add(&format!("ordering.layer{l}.out.w"), &[h, h], rng),
                bias: params.add(&format!("ordering.layer{l}.b"), &[h], rng),
            })
            .collect();
        let score_w = params.add("ordering.score.w", &[1, h], rng);
        let score_b = params.add("ordering.score.b", &[1], rng);
        Self {
            cfg,
            input_w,
            input_b,
            layers,
            score_w,
            score_b,
        }
    }

    /// Node input features: role one-hot, masked flag, positional encoding of
    /// the node's masking step (or of the current step for unmasked nodes).
    fn node_features(&self, mg: &MaskedGraph) -> Vec<Vec<f64>> {
        let t = mg.step();
        (0..mg.n())
            .map(|v| {
                let mut f = vec![0.0; self.cfg.feature_dim()];
                let role = mg.base.agent(v).role.index;
                f[role] = 1.0;
                let masked_at = mg.prefix.iter().position(|&p| p == v);
                f[self.cfg.n_roles] = if masked_at.is_some() { 1.0 } else { 0.0 };
                let step = masked_at.map(|p| p + 1).unwrap_or(t);
                let pe = positional_encoding(step, self.cfg.pe_dim)
                    .expect("pe_dim validated even");
                f[self.cfg.n_roles + 1..].copy_from_slice(&pe);
                f
            })
            .collect()
    }

    /// Per-node scalar scores, recorded on `tape`. Message passing runs over
    /// the full base edge set; masking enters through the node features.
    pub fn node_scores_tape(
        &self,
        params: &ParamSet,
        tape: &mut Tape,
        mg: &MaskedGraph,
    ) -> Result<Vec<NodeId>, OrderingError> {
        for &p in &mg.prefix {
            if p >= mg.n() {
                return Err(OrderingError::PrefixOutOfRange {
                    index: p,
                    n: mg.n(),
                });
            }
        }
        let n = mg.n();
        let feats = self.node_features(mg);
        let mut h: Vec<NodeId> = Vec::with_capacity(n);
        for f in feats {
            let x = tape.input(f);
            h.push(tape.affine(params, self.input_w, Some(self.input_b), x)?);
        }
        for layer in &self.layers {
            let mut next = Vec::with_capacity(n);
            for v in 0..n {
                let mut acc = tape.affine(params, layer.w_self, Some(layer.bias), h[v])?;
                let ins = mg.base.in_neighbors(v);
                if !ins.is_empty() {
                    let summed = tape.sum_vec(ins.iter().map(|&j| h[j]).collect())?;
                    let mean = tape.scale(summed, 1.0 / ins.len() as f64);
                    let msg = tape.affine(params, layer.w_in, None, mean)?;
                    acc = tape.add(acc, msg)?;
                }
                let outs = mg.base.out_neighbors(v);
                if !outs.is_empty() {
                    let summed = tape.sum_vec(outs.iter().map(|&j| h[j]).collect())?;
                    let mean = tape.scale(summed, 1.0 / outs.len() as f64);
                    let msg = tape.affine(params, layer.w_out, None, mean)?;
                    acc = tape.add(acc, msg)?;
                }
                next.push(tape.relu(acc));
            }
            h = next;
        }
        let mut scores = Vec::with_capacity(n);
        for v in 0..n {
            scores.push(tape.affine(params, self.score_w, Some(self.score_b), h[v])?);
        }
        Ok(scores)
    }

    /// Plain-value node scores (throwaway tape).
    pub fn node_scores(
        &self,
        params: &ParamSet,
        mg: &MaskedGraph,
    ) -> Result<Vec<f64>, OrderingError> {
        let mut tape = Tape::new();
        let ids = self.node_scores_tape(params, &mut tape, mg)?;
        Ok(ids.into_iter().map(|id| tape.scalar(id)).collect())
    }

    /// Selection logits over unmasked nodes as a tape node: score plus
    /// effective-size bias, normalized downstream by a masked softmax.
    pub fn selection_logits_tape(
        &self,
        params: &ParamSet,
        tape: &mut Tape,
        mg: &MaskedGraph,
        opts: &DiffusionOpts,
    ) -> Result<(NodeId, Vec<bool>), OrderingError> {
        let scores = self.node_scores_tape(params, tape, mg)?;
        let gathered = tape.gather_scalars(scores)?;
        let phi = mg.phi_values(opts.beta, opts.phi_on_g0, opts.no_es)?;
        let phi_node = tape.input(phi);
        let logits = tape.add(gathered, phi_node)?;
        let mask: Vec<bool> = (0..mg.n()).map(|v| !mg.masked[v]).collect();
        Ok((logits, mask))
    }

    /// Probability of masking each node next; masked nodes get exactly 0.
    pub fn selection_distribution(
        &self,
        params: &ParamSet,
        mg: &MaskedGraph,
        opts: &DiffusionOpts,
    ) -> Result<Vec<f64>, OrderingError> {
        if mg.visible_nodes().is_empty() {
            return Err(OrderingError::AllMasked);
        }
        let mut tape = Tape::new();
        let (logits, mask) = self.selection_logits_tape(params, &mut tape, mg, opts)?;
        let probs = tape.masked_softmax(logits, mask)?;
        Ok(tape.value(probs).to_vec())
    }

    /// Samples a full masking trajectory for `g0`, recording each drawn
    /// node's selection probability.
    pub fn sample_forward_trajectory(
        &self,
        params: &ParamSet,
        g0: &CommGraph,
        opts: &DiffusionOpts,
        rng: &mut ChaCha12Rng,
    ) -> Result<ForwardTrajectory, OrderingError> {
        if g0.n() == 0 {
            return Err(OrderingError::EmptyGraph);
        }
        let mut mg = MaskedGraph::unmasked(g0.clone());
        let mut ordering = Vec::with_capacity(g0.n());
        let mut masked_graphs = Vec::with_capacity(g0.n());
        let mut selection_probs = Vec::with_capacity(g0.n());
        for _ in 0..g0.n() {
            let probs = self.selection_distribution(params, &mg, opts)?;
            let drawn = sample_categorical(&probs, rng);
            selection_probs.push(probs[drawn]);
            mg.mask_node(drawn)?;
            ordering.push(drawn);
            masked_graphs.push(mg.clone());
        }
        Ok(ForwardTrajectory {
            ordering,
            masked_graphs,
            selection_probs,
        })
    }

    /// Tape node for `log q(ordering | g0)`: the sum over steps of the log
    /// selection probability of the recorded node. Used by the policy-
    /// gradient update, which needs gradients through the scores.
    pub fn trajectory_log_prob_tape(
        &self,
        params: &ParamSet,
        tape: &mut Tape,
        g0: &CommGraph,
        ordering: &[usize],
        opts: &DiffusionOpts,
    ) -> Result<NodeId, OrderingError> {
        let mut mg = MaskedGraph::unmasked(g0.clone());
        let mut terms = Vec::with_capacity(ordering.len());
        for &v in ordering {
            let (logits, mask) = self.selection_logits_tape(params, tape, &mg, opts)?;
            let logp = tape.masked_log_softmax(logits, mask)?;
            terms.push(tape.pick(logp, v)?);
            mg.mask_node(v)?;
        }
        Ok(tape.sum_scalars(terms)?)
    }
}

/// Inverse-CDF draw from a probability vector.
pub(crate) fn sample_categorical(probs: &[f64], rng: &mut ChaCha12Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}
