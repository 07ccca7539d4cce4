//! The structural cost proxy must rank graphs the same way real mock-token
//! accounting does.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use radar_core::executor::{self, Aggregation, ExecOptions};
use radar_core::graph::{baseline_topology_with_edge_prob, RoleVocabulary, TopologyFamily};
use radar_core::query::{fallback_embedding, QueryContext};
use radar_core::tasks::synthetic_cost;

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).expect("finite"));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        // Average ranks over ties.
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - mean) * (y - mean)).sum();
    let var_a: f64 = ra.iter().map(|x| (x - mean) * (x - mean)).sum();
    let var_b: f64 = rb.iter().map(|x| (x - mean) * (x - mean)).sum();
    cov / (var_a.sqrt() * var_b.sqrt())
}

#[test]
fn synthetic_cost_tracks_mock_token_cost_in_rank_order() {
    let vocab = RoleVocabulary::default_roles();
    let q = QueryContext {
        text: "rank the proxy".to_string(),
        embedding: fallback_embedding("rank the proxy", 8),
        task_id: "cp".to_string(),
    };
    let mut proxy = Vec::new();
    let mut tokens = Vec::new();
    let mut rng = ChaCha12Rng::seed_from_u64(12);
    let mut produced = 0;
    let mut seed = 0u64;
    while produced < 20 {
        seed += 1;
        use rand::RngExt;
        let n = rng.random_range(3..=7usize);
        let p = 0.15 + 0.1 * (seed % 6) as f64;
        let g =
            baseline_topology_with_edge_prob(TopologyFamily::Random, n, &vocab, p, seed).unwrap();
        if g.active_nodes().is_empty() {
            continue;
        }
        let trace = executor::execute(
            &g,
            &q,
            &mut executor::echo_backends(&g),
            1,
            Aggregation::MajorityVote,
            ExecOptions::default(),
        )
        .unwrap();
        let totals = executor::account_tokens(&trace);
        tokens.push((totals.prompt + totals.completion) as f64);
        proxy.push(synthetic_cost(&g, 20.0).unwrap());
        produced += 1;
    }
    let rho = spearman(&proxy, &tokens);
    assert!(rho > 0.8, "Spearman rho {rho} below 0.8");
}
