//! Joint training of the ordering policy and the denoiser.
//!
//! Three estimators drive learning:
//! - a weighted negative log-likelihood over teacher-forced reverse steps,
//!   with per-step weights taken from the ordering policy (denoiser update);
//! - a score-function policy gradient on the masking order, rewarded by the
//!   denoiser's reconstruction quality (ordering update);
//! - a utility-shaped policy gradient that pushes generation toward high
//!   task utility minus weighted communication cost (denoiser update),
//!   evaluated periodically on a subsample of queries.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{CostSource, RewardSign, TrainConfig};
use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserError, GeneratedTopology};
use crate::executor::{self, Aggregation, ExecOptions};
use crate::graph::{
    baseline_topology, graph_stats, CommGraph, GraphError, RoleVocabulary, TopologyFamily,
};
use crate::nn::{Adam, AdamState, NnError, ParamSet, Tape, TensorDoc};
use crate::ordering::{DiffusionOpts, ForwardTrajectory, MaskedGraph, OrderingConfig, OrderingError, OrderingNet};
use crate::query::QueryContext;
use crate::tasks::{objective, synthetic_cost, synthetic_utility, SyntheticTask, TaskError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("policy update needs at least 2 trajectories, got {0}")]
    TooFewTrajectories(usize),
    #[error("non-finite loss; update skipped")]
    NonFiniteLoss,
    #[error("non-finite reward; update skipped")]
    NonFiniteReward,
    #[error("trajectory has {steps} steps but {logliks} log-likelihoods")]
    LengthMismatch { steps: usize, logliks: usize },
    #[error("oracle failed on query {task_id:?} ({context}): {message}")]
    Oracle {
        task_id: String,
        context: String,
        message: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Ordering(#[from] OrderingError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

#[derive(Debug, Error)]
#[error("{0}")]
pub struct OracleError(pub String);

/// Task utility and communication cost for one executed or scored topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub utility: f64,
    pub cost: f64,
    /// Combined objective `-utility + alpha * cost`.
    pub objective: f64,
}

impl UtilityReport {
    pub fn new(utility: f64, cost: f64, alpha: f64) -> Self {
        Self {
            utility,
            cost,
            objective: objective(utility, cost, alpha),
        }
    }
}

/// Black-box scorer of (graph, query) pairs.
pub trait UtilityOracle {
    fn evaluate(&self, g: &CommGraph, q: &QueryContext) -> Result<UtilityReport, OracleError>;
}

/// Pure synthetic oracle: role coverage + routing utility, structural cost.
pub struct SyntheticOracle {
    pub tasks: BTreeMap<String, SyntheticTask>,
    pub cost_normalizer: f64,
    pub alpha: f64,
}

impl SyntheticOracle {
    pub fn new(tasks: &[SyntheticTask], cost_normalizer: f64, alpha: f64) -> Self {
        Self {
            tasks: tasks
                .iter()
                .map(|t| (t.task_id.clone(), t.clone()))
                .collect(),
            cost_normalizer,
            alpha,
        }
    }
}

impl UtilityOracle for SyntheticOracle {
    fn evaluate(&self, g: &CommGraph, q: &QueryContext) -> Result<UtilityReport, OracleError> {
        let task = self
            .tasks
            .get(&q.task_id)
            .ok_or_else(|| OracleError(format!("unknown task {:?}", q.task_id)))?;
        let utility = synthetic_utility(g, task);
        let cost = synthetic_cost(g, self.cost_normalizer).map_err(|e| OracleError(e.to_string()))?;
        Ok(UtilityReport::new(utility, cost, self.alpha))
    }
}

/// Synthetic utility plus token-derived cost from a mock execution.
pub struct ExecCostOracle {
    pub tasks: BTreeMap<String, SyntheticTask>,
    pub token_budget: f64,
    pub alpha: f64,
    pub rounds: usize,
}

impl UtilityOracle for ExecCostOracle {
    fn evaluate(&self, g: &CommGraph, q: &QueryContext) -> Result<UtilityReport, OracleError> {
        let task = self
            .tasks
            .get(&q.task_id)
            .ok_or_else(|| OracleError(format!("unknown task {:?}", q.task_id)))?;
        let utility = synthetic_utility(g, task);
        let cost = match executor::execute(
            g,
            q,
            &mut executor::echo_backends(g),
            self.rounds,
            Aggregation::MajorityVote,
            ExecOptions::default(),
        ) {
            Ok(trace) => {
                let totals = executor::account_tokens(&trace);
                (totals.prompt + totals.completion) as f64 / self.token_budget
            }
            Err(executor::ExecError::NoActiveAgents) => 0.0,
            Err(e) => return Err(OracleError(e.to_string())),
        };
        Ok(UtilityReport::new(utility, cost, self.alpha))
    }
}

/// One training record: a baseline topology, the query it was scored on,
/// whether it solved the task, and the communication cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionRecord {
    pub graph: CommGraph,
    pub query: QueryContext,
    pub correct: bool,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DiffusionDataset {
    pub records: Vec<DiffusionRecord>,
}

impl DiffusionDataset {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("dataset serializes")
    }

    pub fn from_json_str(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Node-count histogram over all records.
    pub fn size_histogram(&self) -> BTreeMap<usize, usize> {
        let mut hist = BTreeMap::new();
        for r in &self.records {
            *hist.entry(r.graph.n()).or_default() += 1;
        }
        hist
    }

    pub fn correct_records(&self) -> impl Iterator<Item = &DiffusionRecord> {
        self.records.iter().filter(|r| r.correct)
    }
}

/// Instantiates every family at every size for every query, scores the
/// result with the oracle, and labels it against `utility_threshold`.
pub fn build_diffusion_dataset(
    families: &[TopologyFamily],
    sizes: &[usize],
    vocab: &RoleVocabulary,
    oracle: &dyn UtilityOracle,
    queries: &[QueryContext],
    utility_threshold: f64,
    seed: u64,
) -> Result<DiffusionDataset, TrainError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for q in queries {
        for &family in families {
            for &n in sizes {
                let graph_seed = rng.random::<u64>();
                let graph = baseline_topology(family, n, vocab, graph_seed)?;
                let report =
                    oracle
                        .evaluate(&graph, q)
                        .map_err(|e| TrainError::Oracle {
                            task_id: q.task_id.clone(),
                            context: format!("family {} size {n}", family.name()),
                            message: e.0,
                        })?;
                records.push(DiffusionRecord {
                    graph,
                    query: q.clone(),
                    correct: report.utility >= utility_threshold,
                    cost: report.cost,
                });
            }
        }
    }
    Ok(DiffusionDataset { records })
}

/// Cumulative running mean.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunningMean {
    pub mean: f64,
    pub count: u64,
}

impl RunningMean {
    pub fn observe(&mut self, x: f64) {
        self.count += 1;
        self.mean += (x - self.mean) / self.count as f64;
    }

    /// Exponentially decayed update; the first observation seeds the mean.
    /// Tracks recent returns closely enough for stable advantage centering.
    pub fn observe_decayed(&mut self, x: f64, decay: f64) {
        if self.count == 0 {
            self.mean = x;
        } else {
            self.mean = decay * self.mean + (1.0 - decay) * x;
        }
        self.count += 1;
    }
}

/// Per-epoch training metrics. `wall_ms` is real elapsed time and is the
/// only column exempt from bit-reproducibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub vlb_loss: f64,
    pub mean_reward: f64,
    pub mean_utility: Option<f64>,
    pub mean_effective_size: f64,
    pub wall_ms: u64,
}

pub fn metrics_csv_header() -> &'static str {
    "epoch,vlb_loss,mean_reward,mean_utility,mean_effective_size,wall_ms"
}

pub fn metrics_to_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from(metrics_csv_header());
    out.push('\n');
    for m in metrics {
        let utility = m
            .mean_utility
            .map(|u| u.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.epoch, m.vlb_loss, m.mean_reward, utility, m.mean_effective_size, m.wall_ms
        ));
    }
    out
}

/// The Eq-style ordering reward: negative weighted reconstruction
/// log-likelihood, where step `s` (1-indexed, n steps total) carries weight
/// `(n - s + 1) * w_s`.
pub fn ordering_reward(
    selection_probs: &[f64],
    step_logliks: &[f64],
) -> Result<f64, TrainError> {
    if selection_probs.len() != step_logliks.len() {
        return Err(TrainError::LengthMismatch {
            steps: selection_probs.len(),
            logliks: step_logliks.len(),
        });
    }
    let n = selection_probs.len();
    let mut acc = 0.0;
    for s in 0..n {
        let mult = (n - s) as f64;
        acc += mult * selection_probs[s] * step_logliks[s];
    }
    Ok(-acc)
}

/// Everything a full checkpoint stores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub config: TrainConfig,
    pub vocab: Vec<String>,
    pub size_hist: BTreeMap<usize, usize>,
    pub state: TrainerState,
    pub tensors: BTreeMap<String, TensorDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub seed: u64,
    pub step: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerState {
    pub epoch: usize,
    pub adam_ordering: AdamState,
    pub adam_denoiser: AdamState,
    pub ordering_baseline: RunningMean,
    /// Per-task running-mean return baselines.
    pub utility_baselines: BTreeMap<String, RunningMean>,
    /// ChaCha stream position, decimal-encoded u128.
    pub rng_word_pos: String,
}

/// Holds both networks, their optimizers, and the run's random stream.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub vocab: RoleVocabulary,
    pub ordering_params: ParamSet,
    pub ordering_net: OrderingNet,
    pub denoiser_params: ParamSet,
    pub denoiser: Denoiser,
    pub adam_ordering: Adam,
    pub adam_denoiser: Adam,
    pub ordering_baseline: RunningMean,
    pub utility_baselines: BTreeMap<String, RunningMean>,
    pub size_hist: BTreeMap<usize, usize>,
    pub epoch: usize,
    rng: ChaCha12Rng,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, vocab: RoleVocabulary) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let mut ordering_params = ParamSet::new();
        let ordering_net = OrderingNet::init(
            OrderingConfig {
                n_roles: vocab.len(),
                hidden: cfg.hidden_dim,
                layers: cfg.gnn_layers,
                pe_dim: cfg.pe_dim,
            },
            &mut ordering_params,
            &mut rng,
        );
        let mut denoiser_params = ParamSet::new();
        let denoiser = Denoiser::init(
            DenoiserConfig {
                n_roles: vocab.len(),
                hidden: cfg.hidden_dim,
                layers: cfg.gnn_layers,
                components: cfg.mixture_components,
                pe_dim: cfg.pe_dim,
                query_dim: cfg.query_dim,
                comp_emb_dim: cfg.comp_emb_dim,
                mlp_hidden: cfg.mlp_hidden,
            },
            vocab.clone(),
            &mut denoiser_params,
            &mut rng,
        );
        let adam_ordering = Adam::with_clip(cfg.lr_ordering, cfg.grad_clip);
        let adam_denoiser = Adam::with_clip(cfg.lr_denoiser, cfg.grad_clip);
        Self {
            cfg,
            vocab,
            ordering_params,
            ordering_net,
            denoiser_params,
            denoiser,
            adam_ordering,
            adam_denoiser,
            ordering_baseline: RunningMean::default(),
            utility_baselines: BTreeMap::new(),
            size_hist: BTreeMap::new(),
            epoch: 0,
            rng,
        }
    }

    /// Restarts the run's random stream, e.g. before a generation batch
    /// that must be reproducible independently of training history.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha12Rng::seed_from_u64(seed);
    }

    pub fn opts(&self) -> DiffusionOpts {
        DiffusionOpts {
            beta: self.cfg.beta,
            phi_on_g0: self.cfg.phi_on_g0,
            no_es: self.cfg.no_es,
            no_query: self.cfg.no_query,
        }
    }

    /// Teacher-forced per-step log-likelihoods along one trajectory, without
    /// recording gradients.
    fn trajectory_step_logliks(
        &self,
        traj: &ForwardTrajectory,
        q: &QueryContext,
    ) -> Result<Vec<f64>, TrainError> {
        let opts = self.opts();
        let mut out = Vec::with_capacity(traj.masked_graphs.len());
        for mg in &traj.masked_graphs {
            let mut tape = Tape::new();
            let step = self.denoiser.denoise_step(
                &self.denoiser_params,
                &mut tape,
                mg,
                q,
                &opts,
                crate::denoiser::StepMode::TeacherForced,
            )?;
            out.push(step.log_lik_value);
        }
        Ok(out)
    }

    /// One denoiser update from `trajectories` sampled masking orders.
    /// Returns the weighted negative log-likelihood (mean per trajectory).
    pub fn denoiser_vlb_update(
        &mut self,
        g0: &CommGraph,
        q: &QueryContext,
    ) -> Result<f64, TrainError> {
        let m = self.cfg.trajectories;
        let opts = self.opts();
        let mut total = 0.0;
        let mut trajectories = Vec::with_capacity(m);
        for _ in 0..m {
            trajectories.push(self.ordering_net.sample_forward_trajectory(
                &self.ordering_params,
                g0,
                &opts,
                &mut self.rng,
            )?);
        }
        for traj in &trajectories {
            let n = traj.masked_graphs.len();
            let mut tape = Tape::new();
            let mut terms = Vec::with_capacity(n);
            // Step s (1-indexed) reconstructs the node masked at step s from
            // the state with exactly s nodes masked; its weight is the
            // ordering probability times the remaining-node multiplicity.
            for s in 1..=n {
                let mg = &traj.masked_graphs[s - 1];
                let step = self.denoiser.denoise_step(
                    &self.denoiser_params,
                    &mut tape,
                    mg,
                    q,
                    &opts,
                    crate::denoiser::StepMode::TeacherForced,
                )?;
                let weight = traj.selection_probs[s - 1] * (n - s + 1) as f64;
                terms.push(tape.scale(step.log_lik, weight));
            }
            let summed = tape.sum_scalars(terms)?;
            let loss = tape.scale(summed, -1.0 / m as f64);
            let loss_value = tape.scalar(loss);
            if !loss_value.is_finite() {
                self.denoiser_params.zero_grads();
                return Err(TrainError::NonFiniteLoss);
            }
            tape.backward(loss, &mut self.denoiser_params)?;
            total += loss_value;
        }
        self.adam_denoiser.step(&mut self.denoiser_params)?;
        Ok(total)
    }

    /// One REINFORCE update of the ordering policy. Returns the mean reward.
    pub fn ordering_reinforce_update(
        &mut self,
        g0: &CommGraph,
        q: &QueryContext,
    ) -> Result<f64, TrainError> {
        let m = self.cfg.trajectories;
        if m < 2 {
            return Err(TrainError::TooFewTrajectories(m));
        }
        let opts = self.opts();
        let mut trajectories = Vec::with_capacity(m);
        let mut rewards = Vec::with_capacity(m);
        for _ in 0..m {
            let traj = self.ordering_net.sample_forward_trajectory(
                &self.ordering_params,
                g0,
                &opts,
                &mut self.rng,
            )?;
            let logliks = self.trajectory_step_logliks(&traj, q)?;
            let eq_reward = ordering_reward(&traj.selection_probs, &logliks)?;
            let reward = match self.cfg.reward_sign {
                // Textual-intent default: reward reconstructible orderings.
                RewardSign::Pos => -eq_reward,
                RewardSign::Neg => eq_reward,
            };
            if !reward.is_finite() {
                return Err(TrainError::NonFiniteReward);
            }
            rewards.push(reward);
            trajectories.push(traj);
        }
        let batch_mean = rewards.iter().sum::<f64>() / m as f64;
        self.ordering_baseline.observe(batch_mean);
        let advantages: Vec<f64> = rewards.iter().map(|r| r - batch_mean).collect();
        if advantages.iter().all(|&a| a == 0.0) {
            return Ok(batch_mean);
        }
        let mut tape = Tape::new();
        let mut terms = Vec::with_capacity(m);
        for (traj, adv) in trajectories.iter().zip(&advantages) {
            let logq = self.ordering_net.trajectory_log_prob_tape(
                &self.ordering_params,
                &mut tape,
                g0,
                &traj.ordering,
                &opts,
            )?;
            terms.push(tape.scale(logq, -adv / m as f64));
        }
        let loss = tape.sum_scalars(terms)?;
        if !tape.scalar(loss).is_finite() {
            self.ordering_params.zero_grads();
            return Err(TrainError::NonFiniteLoss);
        }
        tape.backward(loss, &mut self.ordering_params)?;
        self.adam_ordering.step(&mut self.ordering_params)?;
        Ok(batch_mean)
    }

    /// Draws a generation size from the dataset's empirical distribution.
    pub fn sample_size(&mut self) -> usize {
        let total: usize = self.size_hist.values().sum();
        if total == 0 {
            return 4;
        }
        let mut pick = self.rng.random_range(0..total);
        for (&size, &count) in &self.size_hist {
            if pick < count {
                return size;
            }
            pick -= count;
        }
        *self.size_hist.keys().last().expect("nonempty histogram")
    }

    /// Generates one topology; `n_target` falls back to the empirical size
    /// distribution.
    pub fn generate(
        &mut self,
        q: &QueryContext,
        n_target: Option<usize>,
    ) -> Result<GeneratedTopology, TrainError> {
        let n = n_target.unwrap_or_else(|| self.sample_size());
        let opts = self.opts();
        Ok(self.denoiser.generate_topology(
            &self.denoiser_params,
            q,
            n,
            &opts,
            &mut self.rng,
        )?)
    }

    /// One utility-shaped policy-gradient update of the denoiser: generate
    /// `batch` topologies, score them with the oracle, and push log-prob
    /// mass toward high-return samples. Returns the mean utility.
    pub fn utility_policy_update(
        &mut self,
        q: &QueryContext,
        batch: usize,
        oracle: &dyn UtilityOracle,
    ) -> Result<f64, TrainError> {
        let opts = self.opts();
        let mut generations = Vec::with_capacity(batch);
        let mut returns = Vec::with_capacity(batch);
        let mut utilities = Vec::with_capacity(batch);
        for _ in 0..batch {
            let gen = self.generate(q, None)?;
            let report = oracle
                .evaluate(&gen.graph, q)
                .map_err(|e| TrainError::Oracle {
                    task_id: q.task_id.clone(),
                    context: "utility update".to_string(),
                    message: e.0,
                })?;
            returns.push(report.utility - self.cfg.alpha * report.cost);
            utilities.push(report.utility);
            generations.push(gen);
        }
        let mean_utility = utilities.iter().sum::<f64>() / batch as f64;
        let state = self.utility_baselines.entry(q.task_id.clone()).or_default();
        let baseline = state.mean;
        let batch_mean = returns.iter().sum::<f64>() / batch as f64;
        state.observe_decayed(batch_mean, 0.95);
        let advantages: Vec<f64> = returns.iter().map(|r| r - baseline).collect();
        if advantages.iter().all(|&a| a == 0.0) {
            return Ok(mean_utility);
        }
        let mut tape = Tape::new();
        let mut terms = Vec::with_capacity(batch);
        for (gen, adv) in generations.iter().zip(&advantages) {
            let logp = self.denoiser.score_generation(
                &self.denoiser_params,
                &mut tape,
                &gen.steps,
                q,
                &opts,
            )?;
            terms.push(tape.scale(logp, -adv / batch as f64));
        }
        let loss = tape.sum_scalars(terms)?;
        if !tape.scalar(loss).is_finite() {
            self.denoiser_params.zero_grads();
            return Err(TrainError::NonFiniteLoss);
        }
        tape.backward(loss, &mut self.denoiser_params)?;
        self.adam_denoiser.step(&mut self.denoiser_params)?;
        Ok(mean_utility)
    }

    /// Deterministic reconstruction quality probe: greedy (argmax) masking
    /// order, teacher-forced reverse log-likelihood sum.
    pub fn teacher_forced_log_lik(
        &self,
        g0: &CommGraph,
        q: &QueryContext,
    ) -> Result<f64, TrainError> {
        let opts = self.opts();
        let mut mg = MaskedGraph::unmasked(g0.clone());
        let mut states = Vec::with_capacity(g0.n());
        for _ in 0..g0.n() {
            let probs =
                self.ordering_net
                    .selection_distribution(&self.ordering_params, &mg, &opts)?;
            let next = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
                .map(|(i, _)| i)
                .expect("nonempty distribution");
            mg.mask_node(next)?;
            states.push(mg.clone());
        }
        let mut total = 0.0;
        for mg in &states {
            let mut tape = Tape::new();
            let step = self.denoiser.denoise_step(
                &self.denoiser_params,
                &mut tape,
                mg,
                q,
                &opts,
                crate::denoiser::StepMode::TeacherForced,
            )?;
            total += step.log_lik_value;
        }
        Ok(total)
    }

    /// Full training loop over the correct-labelled records. Utility updates
    /// run every `utility_period` epochs on a query subsample.
    pub fn train(
        &mut self,
        dataset: &DiffusionDataset,
        oracle: &dyn UtilityOracle,
    ) -> Result<Vec<EpochMetrics>, TrainError> {
        if dataset.records.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        self.size_hist = dataset.size_histogram();
        let correct: Vec<&DiffusionRecord> = dataset.correct_records().collect();
        // Unique queries in first-appearance order.
        let mut queries: Vec<&QueryContext> = Vec::new();
        for r in &dataset.records {
            if !queries.iter().any(|q| q.task_id == r.query.task_id) {
                queries.push(&r.query);
            }
        }
        let target_epochs = self.cfg.epochs;
        let mut metrics = Vec::new();
        while self.epoch < target_epochs {
            let started = Instant::now();
            let mut vlb_sum = 0.0;
            let mut reward_sum = 0.0;
            let mut updates = 0usize;
            for record in &correct {
                vlb_sum += self.denoiser_vlb_update(&record.graph, &record.query)?;
                if self.cfg.trajectories >= 2 {
                    reward_sum +=
                        self.ordering_reinforce_update(&record.graph, &record.query)?;
                }
                updates += 1;
            }
            let denom = updates.max(1) as f64;

            let mean_utility = if !self.cfg.no_utility
                && (self.epoch + 1) % self.cfg.utility_period == 0
            {
                let k = ((queries.len() as f64 * self.cfg.utility_fraction).round() as usize)
                    .clamp(1, queries.len());
                // Deterministic subsample from the run's stream.
                let mut pool: Vec<usize> = (0..queries.len()).collect();
                let mut chosen = Vec::with_capacity(k);
                for _ in 0..k {
                    let idx = self.rng.random_range(0..pool.len());
                    chosen.push(pool.swap_remove(idx));
                }
                chosen.sort_unstable();
                let mut sum = 0.0;
                for &qi in &chosen {
                    let q = queries[qi].clone();
                    sum += self.utility_policy_update(&q, self.cfg.batch, oracle)?;
                }
                Some(sum / k as f64)
            } else {
                None
            };

            // Effective-size probe on fresh generations.
            let probe_query = queries[self.epoch % queries.len()].clone();
            let mut es_sum = 0.0;
            for _ in 0..self.cfg.es_probe_samples {
                let gen = self.generate(&probe_query, None)?;
                es_sum += graph_stats(&gen.graph, self.cfg.beta)?.mean_effective_size;
            }
            let mean_effective_size = es_sum / self.cfg.es_probe_samples as f64;

            metrics.push(EpochMetrics {
                epoch: self.epoch,
                vlb_loss: vlb_sum / denom,
                mean_reward: reward_sum / denom,
                mean_utility,
                mean_effective_size,
                wall_ms: started.elapsed().as_millis() as u64,
            });
            self.epoch += 1;
        }
        Ok(metrics)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = self.ordering_params.to_doc();
        tensors.extend(self.denoiser_params.to_doc());
        Checkpoint {
            header: CheckpointHeader {
                seed: self.cfg.seed,
                step: self.adam_ordering.step_count() + self.adam_denoiser.step_count(),
                config_hash: self.cfg.hash(),
            },
            config: self.cfg.clone(),
            vocab: self.vocab.labels().to_vec(),
            size_hist: self.size_hist.clone(),
            state: TrainerState {
                epoch: self.epoch,
                adam_ordering: self.adam_ordering.state(),
                adam_denoiser: self.adam_denoiser.state(),
                ordering_baseline: self.ordering_baseline,
                utility_baselines: self.utility_baselines.clone(),
                rng_word_pos: self.rng.get_word_pos().to_string(),
            },
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let vocab = RoleVocabulary::new(ckpt.vocab.clone())
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let mut trainer = Trainer::new(ckpt.config.clone(), vocab);
        trainer.ordering_params.load_doc(&ckpt.tensors)?;
        trainer.denoiser_params.load_doc(&ckpt.tensors)?;
        trainer.adam_ordering = Adam::restore(&ckpt.state.adam_ordering);
        trainer.adam_denoiser = Adam::restore(&ckpt.state.adam_denoiser);
        trainer.ordering_baseline = ckpt.state.ordering_baseline;
        trainer.utility_baselines = ckpt.state.utility_baselines.clone();
        trainer.size_hist = ckpt.size_hist.clone();
        trainer.epoch = ckpt.state.epoch;
        let pos: u128 = ckpt
            .state
            .rng_word_pos
            .parse()
            .map_err(|_| TrainError::Checkpoint("bad rng_word_pos".to_string()))?;
        trainer.rng.set_word_pos(pos);
        Ok(trainer)
    }

    pub fn save_checkpoint_json(&self) -> String {
        serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serializes")
    }

    pub fn load_checkpoint_json(s: &str) -> Result<Self, TrainError> {
        let ckpt: Checkpoint =
            serde_json::from_str(s).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(&ckpt)
    }

    /// Selects the cost measurement for dataset construction per config.
    pub fn oracle_for(cfg: &TrainConfig, tasks: &[SyntheticTask]) -> Box<dyn UtilityOracle> {
        match cfg.cost_source {
            CostSource::Synthetic => Box::new(SyntheticOracle::new(
                tasks,
                cfg.cost_normalizer,
                cfg.alpha,
            )),
            CostSource::Executor => Box::new(ExecCostOracle {
                tasks: tasks
                    .iter()
                    .map(|t| (t.task_id.clone(), t.clone()))
                    .collect(),
                token_budget: cfg.token_budget,
                alpha: cfg.alpha,
                rounds: cfg.rounds,
            }),
        }
    }
}
