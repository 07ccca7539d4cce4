//! Estimator-level checks: the score-function identity for the ordering
//! policy and element-wise recomputation of the weighted likelihood
//! gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use radar_core::denoiser::{Denoiser, DenoiserConfig, StepMode};
use radar_core::graph::{baseline_topology, RoleVocabulary, TopologyFamily};
use radar_core::nn::{ParamSet, Tape};
use radar_core::ordering::{DiffusionOpts, OrderingConfig, OrderingNet};
use radar_core::query::{fallback_embedding, QueryContext};

fn vocab() -> RoleVocabulary {
    RoleVocabulary::default_roles()
}

#[test]
fn score_function_gradient_has_zero_mean() {
    let mut params = ParamSet::new();
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let net = OrderingNet::init(
        OrderingConfig {
            n_roles: 5,
            hidden: 8,
            layers: 2,
            pe_dim: 4,
        },
        &mut params,
        &mut rng,
    );
    let g = baseline_topology(TopologyFamily::Random, 4, &vocab(), 3).unwrap();
    let opts = DiffusionOpts::default();

    let samples = 4000usize;
    let dims: Vec<usize> = params.iter().map(|t| t.len()).collect();
    let mut mean: Vec<Vec<f64>> = dims.iter().map(|&d| vec![0.0; d]).collect();
    let mut m2: Vec<Vec<f64>> = dims.iter().map(|&d| vec![0.0; d]).collect();
    let mut draw_rng = ChaCha12Rng::seed_from_u64(99);
    for k in 1..=samples {
        let traj = net
            .sample_forward_trajectory(&params, &g, &opts, &mut draw_rng)
            .unwrap();
        params.zero_grads();
        let mut tape = Tape::new();
        let logq = net
            .trajectory_log_prob_tape(&params, &mut tape, &g, &traj.ordering, &opts)
            .unwrap();
        tape.backward(logq, &mut params).unwrap();
        // Welford accumulation per component.
        for (ti, t) in params.iter().enumerate() {
            for (i, &gi) in t.grad.iter().enumerate() {
                let delta = gi - mean[ti][i];
                mean[ti][i] += delta / k as f64;
                m2[ti][i] += delta * (gi - mean[ti][i]);
            }
        }
    }
    params.zero_grads();
    let mut worst: f64 = 0.0;
    for ti in 0..mean.len() {
        for i in 0..mean[ti].len() {
            let std = (m2[ti][i] / (samples as f64 - 1.0)).sqrt();
            let se = std / (samples as f64).sqrt();
            if se > 1e-12 {
                worst = worst.max(mean[ti][i].abs() / se);
            } else {
                assert!(mean[ti][i].abs() < 1e-9);
            }
        }
    }
    // Expected gradient of log q under q is zero; every component must sit
    // within 5 standard errors (4000 samples, ~800 components).
    assert!(worst < 5.0, "worst z-score {worst}");
}

#[test]
fn weighted_likelihood_gradient_matches_elementwise_recomputation() {
    let vocab = vocab();
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let mut ord_params = ParamSet::new();
    let ordering_net = OrderingNet::init(
        OrderingConfig {
            n_roles: 5,
            hidden: 8,
            layers: 2,
            pe_dim: 4,
        },
        &mut ord_params,
        &mut rng,
    );
    let mut den_params = ParamSet::new();
    let denoiser = Denoiser::init(
        DenoiserConfig {
            n_roles: 5,
            hidden: 8,
            layers: 2,
            components: 2,
            pe_dim: 4,
            query_dim: 16,
            comp_emb_dim: 4,
            mlp_hidden: 8,
        },
        vocab.clone(),
        &mut den_params,
        &mut rng,
    );
    let g = baseline_topology(TopologyFamily::Star, 4, &vocab, 8).unwrap();
    let q = QueryContext {
        text: "estimator".to_string(),
        embedding: fallback_embedding("estimator", 16),
        task_id: "t".to_string(),
    };
    let opts = DiffusionOpts::default();
    let m = 2usize;
    let mut sample_rng = ChaCha12Rng::seed_from_u64(55);
    let trajectories: Vec<_> = (0..m)
        .map(|_| {
            ordering_net
                .sample_forward_trajectory(&ord_params, &g, &opts, &mut sample_rng)
                .unwrap()
        })
        .collect();

    // Route A: one tape per trajectory, terms scaled in place.
    den_params.zero_grads();
    for traj in &trajectories {
        let n = traj.masked_graphs.len();
        let mut tape = Tape::new();
        let mut terms = Vec::new();
        for s in 1..=n {
            let step = denoiser
                .denoise_step(
                    &den_params,
                    &mut tape,
                    &traj.masked_graphs[s - 1],
                    &q,
                    &opts,
                    StepMode::TeacherForced,
                )
                .unwrap();
            let w = traj.selection_probs[s - 1] * (n - s + 1) as f64;
            terms.push(tape.scale(step.log_lik, w));
        }
        let sum = tape.sum_scalars(terms).unwrap();
        let loss = tape.scale(sum, -1.0 / m as f64);
        tape.backward(loss, &mut den_params).unwrap();
    }
    let route_a: Vec<Vec<f64>> = den_params.iter().map(|t| t.grad.clone()).collect();

    // Route B: every (trajectory, step) on its own tape; gradients scaled
    // and summed element-wise outside the tape.
    den_params.zero_grads();
    let mut route_b: Vec<Vec<f64>> = den_params.iter().map(|t| vec![0.0; t.len()]).collect();
    for traj in &trajectories {
        let n = traj.masked_graphs.len();
        for s in 1..=n {
            den_params.zero_grads();
            let mut tape = Tape::new();
            let step = denoiser
                .denoise_step(
                    &den_params,
                    &mut tape,
                    &traj.masked_graphs[s - 1],
                    &q,
                    &opts,
                    StepMode::TeacherForced,
                )
                .unwrap();
            tape.backward(step.log_lik, &mut den_params).unwrap();
            let w = traj.selection_probs[s - 1] * (n - s + 1) as f64;
            let scale = -w / m as f64;
            for (ti, t) in den_params.iter().enumerate() {
                for (i, &gi) in t.grad.iter().enumerate() {
                    route_b[ti][i] += scale * gi;
                }
            }
        }
    }
    for (a, b) in route_a.iter().zip(&route_b) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }
}
