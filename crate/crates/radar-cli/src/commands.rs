//! Command implementations. Each returns the finished manifest, or the
//! partial manifest plus an error message so the failure is still recorded.

use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;

use radar_core::config::TrainConfig;
use radar_core::executor::{
    self, AgentBackend, Aggregation, ExecOptions, HttpBackend, MockBackend,
};
use radar_core::graph::{self, dag_project, graph_stats, topological_sort, CommGraph, RoleVocabulary, TopologyFamily};
use radar_core::query::{QueryContext, QueryEmbedder};
use radar_core::tasks::{generate_task_suite, suite_from_json, suite_to_json, SyntheticTask};
use radar_core::trainer::{build_diffusion_dataset, metrics_to_csv, DiffusionDataset, Trainer};

use crate::manifest::{write_output, Manifest};

type Outcome = Result<Manifest, (Manifest, String)>;

fn config_json(cfg: &TrainConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn fail(manifest: Manifest, message: impl Into<String>) -> Outcome {
    Err((manifest, message.into()))
}

fn read_to_string(manifest: &mut Manifest, path: &Path) -> Result<String, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("read {}: {e}", path.display()))?;
    manifest.record_input(path);
    Ok(text)
}

fn load_suite(manifest: &mut Manifest, path: &Path) -> Result<Vec<SyntheticTask>, String> {
    let text = read_to_string(manifest, path)?;
    suite_from_json(&text).map_err(|e| format!("parse suite {}: {e}", path.display()))
}

fn load_trainer(manifest: &mut Manifest, path: &Path) -> Result<Trainer, String> {
    let text = read_to_string(manifest, path)?;
    Trainer::load_checkpoint_json(&text)
        .map_err(|e| format!("load checkpoint {}: {e}", path.display()))
}

/// Overlays command-line ablation and sweep flags onto a checkpoint's
/// stored configuration.
fn apply_runtime_overrides(trainer: &mut Trainer, cfg: &TrainConfig) {
    trainer.cfg.no_es = cfg.no_es;
    trainer.cfg.no_utility = cfg.no_utility;
    trainer.cfg.no_query = cfg.no_query;
    trainer.cfg.phi_on_g0 = cfg.phi_on_g0;
    trainer.cfg.stale_neighbors = cfg.stale_neighbors;
    trainer.cfg.beta = cfg.beta;
    trainer.cfg.reward_sign = cfg.reward_sign;
}

pub fn build_dataset(
    cfg: &TrainConfig,
    out_dir: &Path,
    tasks: usize,
    easy_fraction: f64,
    sizes: &[usize],
) -> Outcome {
    let mut manifest = Manifest::new("build-dataset", cfg.seed, config_json(cfg));
    let vocab = RoleVocabulary::default_roles();
    let suite = match generate_task_suite(tasks, easy_fraction, &vocab, cfg.seed) {
        Ok(suite) => suite,
        Err(e) => return fail(manifest, e.to_string()),
    };
    let queries: Vec<QueryContext> = suite
        .iter()
        .map(|t| t.query_context(cfg.query_dim))
        .collect();
    let oracle = Trainer::oracle_for(cfg, &suite);
    let dataset = match build_diffusion_dataset(
        &TopologyFamily::ALL,
        sizes,
        &vocab,
        oracle.as_ref(),
        &queries,
        cfg.utility_threshold,
        cfg.seed,
    ) {
        Ok(ds) => ds,
        Err(e) => return fail(manifest, e.to_string()),
    };
    if let Err(e) = write_output(&mut manifest, out_dir, "tasks.json", &suite_to_json(&suite)) {
        return fail(manifest, e);
    }
    if let Err(e) = write_output(
        &mut manifest,
        out_dir,
        "dataset.json",
        &dataset.to_json_string(),
    ) {
        return fail(manifest, e);
    }
    println!(
        "dataset: {} records ({} correct) over {} tasks",
        dataset.records.len(),
        dataset.correct_records().count(),
        suite.len()
    );
    Ok(manifest)
}

pub fn train(
    cfg: &TrainConfig,
    out_dir: &Path,
    dataset_path: &Path,
    suite_path: &Path,
    resume: Option<&Path>,
    epochs_override: Option<usize>,
) -> Outcome {
    let mut manifest = Manifest::new("train", cfg.seed, config_json(cfg));
    let dataset_text = match read_to_string(&mut manifest, dataset_path) {
        Ok(t) => t,
        Err(e) => return fail(manifest, e),
    };
    let dataset = match DiffusionDataset::from_json_str(&dataset_text) {
        Ok(ds) => ds,
        Err(e) => return fail(manifest, format!("parse dataset: {e}")),
    };
    let suite = match load_suite(&mut manifest, suite_path) {
        Ok(s) => s,
        Err(e) => return fail(manifest, e),
    };
    let oracle = Trainer::oracle_for(cfg, &suite);
    let mut trainer = match resume {
        Some(path) => match load_trainer(&mut manifest, path) {
            Ok(t) => t,
            Err(e) => return fail(manifest, e),
        },
        None => Trainer::new(cfg.clone(), RoleVocabulary::default_roles()),
    };
    if let Some(epochs) = epochs_override {
        trainer.cfg.epochs = epochs;
    }
    let metrics = match trainer.train(&dataset, oracle.as_ref()) {
        Ok(m) => m,
        Err(e) => {
            return fail(
                manifest,
                format!("training failed at epoch {}: {e}", trainer.epoch),
            )
        }
    };
    if let Err(e) = write_output(&mut manifest, out_dir, "metrics.csv", &metrics_to_csv(&metrics))
    {
        return fail(manifest, e);
    }
    if let Err(e) = write_output(
        &mut manifest,
        out_dir,
        "checkpoint.json",
        &trainer.save_checkpoint_json(),
    ) {
        return fail(manifest, e);
    }
    println!("trained {} epochs", metrics.len());
    Ok(manifest)
}

#[allow(clippy::too_many_arguments)]
pub fn generate(
    cfg: &TrainConfig,
    out_dir: &Path,
    checkpoint: &Path,
    task_id: Option<&str>,
    query_text: Option<&str>,
    suite_path: Option<&Path>,
    embeddings: Option<&Path>,
    n_samples: usize,
    n_target: Option<usize>,
) -> Outcome {
    let mut manifest = Manifest::new("generate", cfg.seed, config_json(cfg));
    let mut trainer = match load_trainer(&mut manifest, checkpoint) {
        Ok(t) => t,
        Err(e) => return fail(manifest, e),
    };
    apply_runtime_overrides(&mut trainer, cfg);
    let embedder = match embeddings {
        Some(path) => {
            manifest.record_input(path);
            match QueryEmbedder::from_file(path, trainer.cfg.query_dim) {
                Ok(e) => e,
                Err(e) => return fail(manifest, e.to_string()),
            }
        }
        None => QueryEmbedder::fallback(trainer.cfg.query_dim),
    };
    let query = match (task_id, query_text, suite_path) {
        (Some(id), _, Some(suite_path)) => {
            let suite = match load_suite(&mut manifest, suite_path) {
                Ok(s) => s,
                Err(e) => return fail(manifest, e),
            };
            match suite.iter().find(|t| t.task_id == id) {
                Some(task) => embedder.embed(&task.task_id, &task.query),
                None => return fail(manifest, format!("task {id:?} not found in suite")),
            }
        }
        (_, Some(text), _) => embedder.embed("adhoc", text),
        _ => {
            return fail(
                manifest,
                "provide --query, or --task-id together with --suite",
            )
        }
    };
    trainer.reseed(cfg.seed);
    for k in 0..n_samples {
        let gen = match trainer.generate(&query, n_target) {
            Ok(g) => g,
            Err(e) => return fail(manifest, e.to_string()),
        };
        let name = format!("topology-{k:03}.json");
        if let Err(e) = write_output(&mut manifest, out_dir, &name, &graph::to_json_string(&gen.graph)) {
            return fail(manifest, e);
        }
        let dot = graph::to_dot(&gen.graph, &format!("topology_{k:03}"));
        if let Err(e) = write_output(&mut manifest, out_dir, &format!("topology-{k:03}.dot"), &dot) {
            return fail(manifest, e);
        }
    }
    println!("generated {n_samples} topologies for {:?}", query.task_id);
    Ok(manifest)
}

fn make_backends(
    g: &CommGraph,
    spec: &str,
) -> Result<Vec<Box<dyn AgentBackend>>, String> {
    if spec == "mock:echo" {
        return Ok(executor::echo_backends(g));
    }
    if let Some(answer) = spec.strip_prefix("mock:scripted=") {
        return Ok((0..g.n())
            .map(|_| Box::new(MockBackend::scripted(answer)) as Box<dyn AgentBackend>)
            .collect());
    }
    if let Some(rest) = spec.strip_prefix("http=") {
        let (base_url, model) = rest
            .split_once(',')
            .ok_or_else(|| format!("backend {spec:?}: expected http=<base_url>,<model>"))?;
        let mut backends: Vec<Box<dyn AgentBackend>> = Vec::with_capacity(g.n());
        for _ in 0..g.n() {
            backends.push(Box::new(
                HttpBackend::new(base_url, model).map_err(|e| e.to_string())?,
            ));
        }
        return Ok(backends);
    }
    Err(format!(
        "unknown backend {spec:?}; use mock:echo, mock:scripted=<answer>, or http=<base_url>,<model>"
    ))
}

pub fn execute(
    cfg: &TrainConfig,
    out_dir: &Path,
    topology: &Path,
    query_text: &str,
    backend: &str,
    rounds: usize,
    aggregation: &str,
) -> Outcome {
    let mut manifest = Manifest::new("execute", cfg.seed, config_json(cfg));
    let text = match read_to_string(&mut manifest, topology) {
        Ok(t) => t,
        Err(e) => return fail(manifest, e),
    };
    let vocab = RoleVocabulary::default_roles();
    let g = match graph::from_json_str(&text, &vocab) {
        Ok(g) => g,
        Err(e) => return fail(manifest, format!("parse topology: {e}")),
    };
    let aggregation = match Aggregation::parse(aggregation) {
        Some(a) => a,
        None => return fail(manifest, format!("unknown aggregation {aggregation:?}")),
    };
    let mut backends = match make_backends(&g, backend) {
        Ok(b) => b,
        Err(e) => return fail(manifest, e),
    };
    let embedder = QueryEmbedder::fallback(cfg.query_dim);
    let q = embedder.embed("adhoc", query_text);
    let trace = match executor::execute(
        &g,
        &q,
        &mut backends,
        rounds,
        aggregation,
        ExecOptions {
            stale_neighbors: cfg.stale_neighbors,
        },
    ) {
        Ok(t) => t,
        Err(e) => return fail(manifest, format!("execution failed: {e}")),
    };
    let totals = executor::account_tokens(&trace);
    if let Err(e) = write_output(&mut manifest, out_dir, "trace.json", &trace.to_json_string()) {
        return fail(manifest, e);
    }
    println!(
        "solution: {:?} ({} prompt + {} completion tokens)",
        trace.solution, totals.prompt, totals.completion
    );
    Ok(manifest)
}

pub fn evaluate(
    cfg: &TrainConfig,
    out_dir: &Path,
    checkpoint: &Path,
    suite_path: &Path,
    gens_per_task: usize,
) -> Outcome {
    let mut manifest = Manifest::new("evaluate", cfg.seed, config_json(cfg));
    let mut trainer = match load_trainer(&mut manifest, checkpoint) {
        Ok(t) => t,
        Err(e) => return fail(manifest, e),
    };
    apply_runtime_overrides(&mut trainer, cfg);
    let suite = match load_suite(&mut manifest, suite_path) {
        Ok(s) => s,
        Err(e) => return fail(manifest, e),
    };
    trainer.reseed(cfg.seed);

    let mut csv = String::from(
        "task_id,difficulty,utility,cost,objective,active_size,density,effective_size,prompt_tokens,completion_tokens,gs_std,density_std,es_std\n",
    );
    #[derive(Default)]
    struct Agg {
        utility: Vec<f64>,
        cost: Vec<f64>,
        objective: Vec<f64>,
        active: Vec<f64>,
        density: Vec<f64>,
        es: Vec<f64>,
        prompt: Vec<f64>,
        completion: Vec<f64>,
    }
    let mut agg = Agg::default();
    for task in &suite {
        let q = task.query_context(trainer.cfg.query_dim);
        let mut row = Agg::default();
        for _ in 0..gens_per_task.max(1) {
            let gen = match trainer.generate(&q, None) {
                Ok(g) => g,
                Err(e) => return fail(manifest, e.to_string()),
            };
            let utility = radar_core::tasks::synthetic_utility(&gen.graph, task);
            let cost = match radar_core::tasks::synthetic_cost(&gen.graph, trainer.cfg.cost_normalizer)
            {
                Ok(c) => c,
                Err(e) => return fail(manifest, e.to_string()),
            };
            let stats = match graph_stats(&gen.graph, trainer.cfg.beta) {
                Ok(s) => s,
                Err(e) => return fail(manifest, e.to_string()),
            };
            let (prompt, completion) = match executor::execute(
                &gen.graph,
                &q,
                &mut executor::echo_backends(&gen.graph),
                trainer.cfg.rounds,
                Aggregation::MajorityVote,
                ExecOptions::default(),
            ) {
                Ok(trace) => {
                    let totals = executor::account_tokens(&trace);
                    (totals.prompt as f64, totals.completion as f64)
                }
                Err(executor::ExecError::NoActiveAgents) => (0.0, 0.0),
                Err(e) => return fail(manifest, format!("mock execution: {e}")),
            };
            row.utility.push(utility);
            row.cost.push(cost);
            row.objective
                .push(radar_core::tasks::objective(utility, cost, trainer.cfg.alpha));
            row.active.push(stats.active_size as f64);
            row.density.push(stats.density);
            row.es.push(stats.mean_effective_size);
            row.prompt.push(prompt);
            row.completion.push(completion);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},,,\n",
            task.task_id,
            task.difficulty.name(),
            mean(&row.utility),
            mean(&row.cost),
            mean(&row.objective),
            mean(&row.active),
            mean(&row.density),
            mean(&row.es),
            mean(&row.prompt),
            mean(&row.completion),
        ));
        agg.utility.push(mean(&row.utility));
        agg.cost.push(mean(&row.cost));
        agg.objective.push(mean(&row.objective));
        agg.active.push(mean(&row.active));
        agg.density.push(mean(&row.density));
        agg.es.push(mean(&row.es));
        agg.prompt.push(mean(&row.prompt));
        agg.completion.push(mean(&row.completion));
    }
    if !suite.is_empty() {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let std = |v: &[f64]| {
            let m = mean(v);
            (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
        };
        csv.push_str(&format!(
            "aggregate,,{},{},{},{},{},{},{},{},{},{},{}\n",
            mean(&agg.utility),
            mean(&agg.cost),
            mean(&agg.objective),
            mean(&agg.active),
            mean(&agg.density),
            mean(&agg.es),
            mean(&agg.prompt),
            mean(&agg.completion),
            std(&agg.active),
            std(&agg.density),
            std(&agg.es),
        ));
    }
    if let Err(e) = write_output(&mut manifest, out_dir, "report.csv", &csv) {
        return fail(manifest, e);
    }
    println!("evaluated {} tasks", suite.len());
    Ok(manifest)
}

pub fn attack(
    cfg: &TrainConfig,
    out_dir: &Path,
    checkpoint: &Path,
    suite_path: &Path,
    mode: &str,
) -> Outcome {
    let mut manifest = Manifest::new("attack", cfg.seed, config_json(cfg));
    if !["none", "prompt_liar", "structure_noise", "both"].contains(&mode) {
        return fail(manifest, format!("unknown attack mode {mode:?}"));
    }
    let mut trainer = match load_trainer(&mut manifest, checkpoint) {
        Ok(t) => t,
        Err(e) => return fail(manifest, e),
    };
    apply_runtime_overrides(&mut trainer, cfg);
    let suite = match load_suite(&mut manifest, suite_path) {
        Ok(s) => s,
        Err(e) => return fail(manifest, e),
    };
    trainer.reseed(cfg.seed);
    let mut noise_rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x6e6f697365);
    let mut csv = String::from(
        "task_id,mode,clean_correct,attacked_correct,clean_vote_share,attacked_vote_share,liars\n",
    );
    let mut liars_changed: Vec<usize> = Vec::new();
    for task in &suite {
        let q = task.query_context(trainer.cfg.query_dim);
        let gen = match trainer.generate(&q, Some(5)) {
            Ok(g) => g,
            Err(e) => return fail(manifest, e.to_string()),
        };
        let truth = format!("answer {}", task.task_id);
        let clean = match run_scripted(&gen.graph, &q, &truth, 0, cfg) {
            Ok(r) => r,
            Err(e) => return fail(manifest, e),
        };
        let (attacked_graph, liar_count) = match mode {
            "none" => (gen.graph.clone(), 0),
            "prompt_liar" => (gen.graph.clone(), 2),
            "structure_noise" => (add_structure_noise(&gen.graph, &mut noise_rng), 0),
            _ => (add_structure_noise(&gen.graph, &mut noise_rng), 2),
        };
        let attacked = match run_scripted(&attacked_graph, &q, &truth, liar_count, cfg) {
            Ok(r) => r,
            Err(e) => return fail(manifest, e),
        };
        if liars_changed.is_empty() {
            liars_changed = attacked.liars.clone();
        }
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            task.task_id,
            mode,
            clean.correct as u8,
            attacked.correct as u8,
            clean.vote_share,
            attacked.vote_share,
            attacked.liars.len(),
        ));
    }
    manifest.outputs.insert(
        "liar_agents".to_string(),
        format!("{liars_changed:?}"),
    );
    if let Err(e) = write_output(&mut manifest, out_dir, "attack.csv", &csv) {
        return fail(manifest, e);
    }
    println!("attack sweep ({mode}) over {} tasks", suite.len());
    Ok(manifest)
}

struct AttackRun {
    correct: bool,
    vote_share: f64,
    liars: Vec<usize>,
}

/// Executes with scripted mocks (optionally converting `liar_count` agents)
/// and measures majority-vote correctness plus the truth's vote share.
fn run_scripted(
    g: &CommGraph,
    q: &QueryContext,
    truth: &str,
    liar_count: usize,
    cfg: &TrainConfig,
) -> Result<AttackRun, String> {
    let (mut backends, liars) = executor::scripted_backends_with_liars(g, truth, liar_count);
    let trace = match executor::execute(
        g,
        q,
        &mut backends,
        cfg.rounds,
        Aggregation::MajorityVote,
        ExecOptions::default(),
    ) {
        Ok(t) => t,
        Err(executor::ExecError::NoActiveAgents) => {
            return Ok(AttackRun {
                correct: false,
                vote_share: 0.0,
                liars,
            })
        }
        Err(e) => return Err(format!("attack execution: {e}")),
    };
    let normalized_truth = executor::normalize_answer(truth);
    let final_round = trace.rounds;
    let votes: Vec<&str> = trace
        .records
        .iter()
        .filter(|r| r.round == final_round)
        .map(|r| r.response.as_str())
        .collect();
    let truthful = votes
        .iter()
        .filter(|v| executor::normalize_answer(v) == normalized_truth)
        .count();
    Ok(AttackRun {
        correct: trace.solution == normalized_truth,
        vote_share: truthful as f64 / votes.len().max(1) as f64,
        liars,
    })
}

/// Adds 50% extra random edges (rounded up) then projects back to a DAG.
fn add_structure_noise(g: &CommGraph, rng: &mut ChaCha12Rng) -> CommGraph {
    let n = g.n();
    let mut noisy = g.clone();
    let extra = (g.edge_count() as f64 * 0.5).ceil() as usize;
    let mut added = 0;
    let mut guard = 0;
    while added < extra && guard < 1000 {
        guard += 1;
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b && !noisy.has_edge(a, b) {
            noisy.add_edge(a, b).expect("indices in range");
            added += 1;
        }
    }
    // Keep original edges at full score so the projection prefers cutting
    // injected ones.
    let mut scores = vec![0.0; n * n];
    for (a, b) in g.edges() {
        scores[a * n + b] = 1.0;
    }
    for (a, b) in noisy.edges() {
        if !g.has_edge(a, b) {
            scores[a * n + b] = 0.5;
        }
    }
    let projected = dag_project(&noisy, &scores);
    debug_assert!(topological_sort(&projected).is_ok());
    projected
}
