//! Redundancy-aware generation of multi-agent communication topologies.
//!
//! The crate provides:
//! - directed role-labelled communication graphs with effective-size
//!   redundancy metrics and baseline topology families ([`graph`]),
//! - a small dense-network substrate with a reverse-mode tape ([`nn`]),
//! - a learned node-masking ordering policy ([`ordering`]) and a
//!   query-conditioned denoiser that rebuilds graphs step by step
//!   ([`denoiser`]),
//! - the joint trainer with likelihood, ordering-policy, and utility-shaping
//!   updates ([`trainer`]),
//! - a topological-schedule executor over pluggable agent backends
//!   ([`executor`]),
//! - deterministic synthetic tasks and oracles for desk-scale evaluation
//!   ([`tasks`]).

pub mod config;
pub mod denoiser;
pub mod executor;
pub mod graph;
pub mod nn;
pub mod ordering;
pub mod query;
pub mod tasks;
pub mod trainer;

pub use config::TrainConfig;
pub use denoiser::{Denoiser, EdgeCategory, GeneratedTopology};
pub use graph::{
    baseline_topology, combined_effective_size, dag_project, effective_size, graph_stats,
    topological_sort, AgentSpec, CommGraph, CycleError, Direction, GraphError, GraphStats, RoleId,
    RoleVocabulary, TopologyFamily,
};
pub use nn::{grad_check, positional_encoding, softmax_normalize, Adam, ParamSet, Tape};
pub use ordering::{ForwardTrajectory, MaskedGraph, OrderingNet};
pub use query::{QueryContext, QueryEmbedder};
pub use tasks::{
    generate_task_suite, synthetic_cost, synthetic_utility, Difficulty, SyntheticTask,
};
pub use trainer::{DiffusionDataset, DiffusionRecord, Trainer, UtilityOracle, UtilityReport};
