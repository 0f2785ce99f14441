//! Agent Aggregation Decoder: compress unlabeled images into superpixel
//! prototypes, enhance them over a threshold-adjacency graph with one
//! attention layer, and let each agent absorb the prototypes that look like
//! it. With no unlabeled images the whole module is the identity.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::registry::{Init, ParamRegistry, ParamVars};
use crate::slic::SuperpixelLabels;
use crate::tensor::{Tensor, COSINE_EPS};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AadConfig {
    pub n_unlabeled: usize,
    /// Requested superpixels per unlabeled image, at image resolution.
    pub n_segments: usize,
    /// Cosine threshold for prototype adjacency (strict).
    pub delta: f64,
    pub beta_init: f64,
    pub compactness: f64,
    pub slic_iters: usize,
}

impl Default for AadConfig {
    fn default() -> Self {
        Self {
            n_unlabeled: 5,
            n_segments: 100,
            delta: 0.5,
            beta_init: 0.4,
            compactness: 10.0,
            slic_iters: 10,
        }
    }
}

/// Prototype nodes plus their symmetric self-looped adjacency.
#[derive(Clone, Debug)]
pub struct PrototypeGraph {
    pub adjacency: Vec<u8>,
    pub n: usize,
}

impl PrototypeGraph {
    pub fn edge(&self, m: usize, n: usize) -> bool {
        self.adjacency[m * self.n + n] == 1
    }
}

pub fn register_params(reg: &mut ParamRegistry, init: &Init, dim: usize, beta_init: f64) {
    reg.insert("aad.gat.w", init.trunc_normal("aad.gat.w", vec![dim, dim], 0.02), true);
    reg.insert("aad.gat.a_src", init.trunc_normal("aad.gat.a_src", vec![dim, 1], 0.02), true);
    reg.insert("aad.gat.a_dst", init.trunc_normal("aad.gat.a_dst", vec![dim, 1], 0.02), true);
    reg.insert("aad.beta", init.constant(vec![1, 1], beta_init), true);
}

/// Mean-pool each image's features over its superpixels (labels already on
/// the feature grid). Segments that lost every cell in downsampling are
/// dropped; returns the stacked prototypes and the per-image survivor count.
pub fn unlabeled_prototypes(
    features: &[Var],
    labels: &[SuperpixelLabels],
) -> (Option<Var>, Vec<usize>) {
    assert_eq!(features.len(), labels.len());
    let mut parts = Vec::new();
    let mut counts = Vec::new();
    for (f, l) in features.iter().zip(labels) {
        let cells = l.height() * l.width();
        assert_eq!(f.shape()[0], cells, "labels must live on the feature grid");
        let mut rows = Vec::new();
        for segment in 0..l.k() {
            let members: Vec<usize> =
                (0..cells).filter(|&p| l.labels()[p] == segment).collect();
            if members.is_empty() {
                continue;
            }
            let mut row = vec![0.0; cells];
            let inv = 1.0 / members.len() as f64;
            for m in members {
                row[m] = inv;
            }
            rows.push(row);
        }
        counts.push(rows.len());
        if rows.is_empty() {
            continue;
        }
        let pool = Tensor::from_raw(vec![rows.len(), cells], rows.concat());
        let graph = f.graph_handle();
        parts.push(graph.constant(pool).matmul(f));
    }
    if parts.is_empty() {
        return (None, counts);
    }
    let graph = parts[0].graph_handle();
    let stacked = if parts.len() == 1 { parts.pop().unwrap() } else { graph.concat_rows(&parts) };
    (Some(stacked), counts)
}

/// Adjacency between prototypes: edge iff cosine similarity strictly exceeds
/// delta, plus self-loops. Rows with vanishing norm keep only their
/// self-loop.
pub fn build_graph(prototypes: &Tensor, delta: f64) -> PrototypeGraph {
    let n = prototypes.rows();
    let norms: Vec<f64> = (0..n)
        .map(|i| prototypes.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut adjacency = vec![0u8; n * n];
    for m in 0..n {
        adjacency[m * n + m] = 1;
        for k in m + 1..n {
            if norms[m] < COSINE_EPS || norms[k] < COSINE_EPS {
                continue;
            }
            let dot: f64 = prototypes.row(m).iter().zip(prototypes.row(k)).map(|(a, b)| a * b).sum();
            if dot / (norms[m] * norms[k]) > delta {
                adjacency[m * n + k] = 1;
                adjacency[k * n + m] = 1;
            }
        }
    }
    PrototypeGraph { adjacency, n }
}

/// One graph-attention layer with a residual: scores from a learned pairwise
/// form with LeakyReLU, softmax over each node's neighborhood, weighted sum
/// of linearly transformed neighbors.
pub fn gat_enhance(params: &ParamVars, prototypes: &Var, graph: &PrototypeGraph) -> Var {
    let n = prototypes.shape()[0];
    assert_eq!(n, graph.n);
    let transformed = prototypes.matmul(&params.get("aad.gat.w"));
    let s_src = transformed.matmul(&params.get("aad.gat.a_src"));
    let s_dst = transformed.matmul(&params.get("aad.gat.a_dst"));

    let g = prototypes.graph_handle();
    let ones_row = g.constant(Tensor::full(vec![1, n], 1.0));
    let ones_col = g.constant(Tensor::full(vec![n, 1], 1.0));
    let scores = s_src
        .matmul(&ones_row)
        .add(&ones_col.matmul(&s_dst.t()))
        .leaky_relu(0.2);

    let additive: Vec<f64> = graph
        .adjacency
        .iter()
        .map(|&a| if a == 1 { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    let attn = scores
        .softmax_rows(Some(&Tensor::from_raw(vec![n, n], additive)))
        .expect("self-loops keep every row live");
    attn.matmul(&transformed).add(prototypes)
}

/// Each agent takes a convex combination of prototypes weighted by clamped
/// cosine similarity, scaled by the learnable beta. Agents with no positive
/// similarity pass through unchanged.
pub fn adaptive_aggregate(params: &ParamVars, agents: &Var, enhanced: &Var) -> Var {
    assert!(enhanced.shape()[0] >= 1);
    let weights = agents
        .cosine_rows(enhanced)
        .relu()
        .normalize_rows_guarded();
    let delta = weights.matmul(enhanced).mul_scalar_var(&params.get("aad.beta"));
    agents.add(&delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::slic::slic;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn registry(dim: usize, beta: f64) -> ParamRegistry {
        let mut reg = ParamRegistry::new();
        register_params(&mut reg, &Init { seed: 3 }, dim, beta);
        reg
    }

    fn feature_labels(image_hw: usize, n_segments: usize, factor: usize) -> SuperpixelLabels {
        let img = Tensor::full(vec![image_hw, image_hw, 3], 0.5);
        slic(&img, n_segments, 10.0, 5).downsample_majority(factor)
    }

    #[test]
    fn single_segment_prototype_is_global_mean() {
        let graph = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = graph.constant(Tensor::from_raw(
            vec![16, 3],
            (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        ));
        let labels = feature_labels(16, 1, 4);
        let (protos, counts) = unlabeled_prototypes(&[f.clone()], &[labels]);
        assert_eq!(counts, vec![1]);
        let p = protos.unwrap().value();
        let fv = f.value();
        for k in 0..3 {
            let mean: f64 = (0..16).map(|r| fv.at2(r, k)).sum::<f64>() / 16.0;
            assert!((p.at2(0, k) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn prototype_count_is_sum_of_nonempty_segments() {
        let graph = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let make = |rng: &mut ChaCha8Rng| {
            graph.constant(Tensor::from_raw(
                vec![64, 4],
                (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ))
        };
        let f1 = make(&mut rng);
        let f2 = make(&mut rng);
        let l1 = feature_labels(32, 9, 4);
        let l2 = feature_labels(32, 4, 4);
        let (protos, counts) = unlabeled_prototypes(&[f1, f2], &[l1, l2]);
        let total: usize = counts.iter().sum();
        assert_eq!(protos.unwrap().shape()[0], total);
    }

    #[test]
    fn singleton_segments_pool_exact_values() {
        // 2-cell grid, two singleton segments, feature values 1 and 3
        let graph = Graph::new();
        let f = graph.constant(Tensor::from_raw(vec![2, 1], vec![1.0, 3.0]));
        // build a label map over a 2-cell feature grid by hand
        let img = Tensor::from_raw(
            vec![1, 2, 3],
            vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0],
        );
        let labels = slic(&img, 2, 1.0, 3);
        assert_eq!(labels.k(), 2);
        let down = labels.downsample_majority(1);
        let (protos, counts) = unlabeled_prototypes(&[f], &[down]);
        assert_eq!(counts, vec![2]);
        let p = protos.unwrap().value();
        let mut vals = vec![p.at2(0, 0), p.at2(1, 0)];
        vals.sort_by(f64::total_cmp);
        assert_eq!(vals, vec![1.0, 3.0]);
    }

    #[test]
    fn identical_prototypes_fully_connect() {
        let protos = Tensor::from_raw(vec![3, 2], vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5]);
        let g = build_graph(&protos, 0.5);
        for m in 0..3 {
            for n in 0..3 {
                assert!(g.edge(m, n));
            }
        }
    }

    #[test]
    fn orthogonal_prototypes_only_self_loops() {
        let protos = Tensor::from_raw(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let g = build_graph(&protos, 0.5);
        assert!(g.edge(0, 0) && g.edge(1, 1));
        assert!(!g.edge(0, 1) && !g.edge(1, 0));
    }

    #[test]
    fn cosine_exactly_delta_is_not_an_edge() {
        // (3,4)·(4,3) = 24 with norms 5·5, so the cosine is exactly 24/25
        let protos = Tensor::from_raw(vec![2, 2], vec![3.0, 4.0, 4.0, 3.0]);
        let g = build_graph(&protos, 24.0 / 25.0);
        assert!(!g.edge(0, 1), "strict threshold must exclude equality");
        let g2 = build_graph(&protos, 24.0 / 25.0 - 1e-12);
        assert!(g2.edge(0, 1));
    }

    #[test]
    fn graph_is_symmetric_with_self_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let protos = Tensor::from_raw(vec![7, 4], (0..28).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let g = build_graph(&protos, 0.3);
        for m in 0..7 {
            assert!(g.edge(m, m));
            for n in 0..7 {
                assert_eq!(g.edge(m, n), g.edge(n, m));
            }
        }
    }

    #[test]
    fn gat_identity_adjacency_is_residual_plus_self_transform() {
        let reg = registry(3, 0.4);
        let graph = Graph::new();
        let params = ParamVars::new(&graph, &reg);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let protos = Tensor::from_raw(vec![4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let pv = graph.constant(protos.clone());
        let pg = PrototypeGraph { adjacency: {
            let mut a = vec![0u8; 16];
            for i in 0..4 { a[i * 4 + i] = 1; }
            a
        }, n: 4 };
        let out = gat_enhance(&params, &pv, &pg).value();
        let expected = protos.add(&protos.matmul(reg.get("aad.gat.w")));
        for (a, b) in out.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gat_equal_features_full_adjacency_equal_outputs() {
        let reg = registry(3, 0.4);
        let graph = Graph::new();
        let params = ParamVars::new(&graph, &reg);
        let pv = graph.constant(Tensor::full(vec![5, 3], 0.7));
        let pg = PrototypeGraph { adjacency: vec![1u8; 25], n: 5 };
        let out = gat_enhance(&params, &pv, &pg).value();
        for i in 1..5 {
            assert_eq!(out.row(i), out.row(0));
        }
        assert_eq!(out.shape(), &[5, 3]);
    }

    #[test]
    fn gat_zero_weights_reduce_to_residual() {
        let mut reg = registry(3, 0.4);
        reg.set("aad.gat.w", Tensor::zeros(vec![3, 3]));
        reg.set("aad.gat.a_src", Tensor::zeros(vec![3, 1]));
        reg.set("aad.gat.a_dst", Tensor::zeros(vec![3, 1]));
        let graph = Graph::new();
        let params = ParamVars::new(&graph, &reg);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let protos = Tensor::from_raw(vec![4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let pv = graph.constant(protos.clone());
        let pg = build_graph(&protos, 0.5);
        let out = gat_enhance(&params, &pv, &pg).value();
        assert_eq!(out.data(), protos.data());
    }

    #[test]
    fn aggregate_beta_zero_is_identity() {
        let reg = registry(2, 0.0);
        let graph = Graph::new();
        let params = ParamVars::new(&graph, &reg);
        let agents = graph.constant(Tensor::from_raw(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let protos = graph.constant(Tensor::from_raw(vec![3, 2], vec![0.5, 0.5, 1.0, 0.0, 0.0, 1.0]));
        let out = adaptive_aggregate(&params, &agents, &protos).value();
        assert_eq!(out.data(), agents.value().data());
    }

    #[test]
    fn aggregate_single_positive_prototype() {
        let reg = registry(2, 0.4);
        let graph = Graph::new();
        let params = ParamVars::new(&graph, &reg);
        let agents = graph.constant(Tensor::from_raw(vec![1, 2], vec![1.0, 0.0]));
        let protos = graph.constant(Tensor::from_raw(vec![1, 2], vec![0.6, 0.8]));
        let out = adaptive_aggregate(&params, &agents, &protos).value();
        assert!((out.at2(0, 0) - (1.0 + 0.4 * 0.6)).abs() < 1e-12);
        assert!((out.at2(0, 1) - 0.4 * 0.8).abs() < 1e-12);
    }

    #[test]
    fn aggregate_hand_weights() {
        // similarities 0.6 and 0.2 normalize to 0.75 / 0.25
        let reg = registry(2, 0.4);
        let graph = Graph::new();
        let params = ParamVars::new(&graph, &reg);
        let agents = graph.constant(Tensor::from_raw(vec![1, 2], vec![1.0, 0.0]));
        let p1 = [0.6, 0.8];
        let p2 = [0.2, (1.0f64 - 0.04).sqrt()];
        let protos = graph.constant(Tensor::from_raw(vec![2, 2], vec![p1[0], p1[1], p2[0], p2[1]]));
        let out = adaptive_aggregate(&params, &agents, &protos).value();
        let expect = [
            1.0 + 0.4 * (0.75 * p1[0] + 0.25 * p2[0]),
            0.4 * (0.75 * p1[1] + 0.25 * p2[1]),
        ];
        assert!((out.at2(0, 0) - expect[0]).abs() < 1e-12);
        assert!((out.at2(0, 1) - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn aggregate_nonpositive_similarities_pass_through() {
        let reg = registry(2, 0.4);
        let graph = Graph::new();
        let params = ParamVars::new(&graph, &reg);
        let agents = graph.constant(Tensor::from_raw(vec![1, 2], vec![1.0, 0.0]));
        let protos = graph.constant(Tensor::from_raw(vec![2, 2], vec![-1.0, 0.0, -0.5, -0.5]));
        let out = adaptive_aggregate(&params, &agents, &protos).value();
        assert_eq!(out.data(), &[1.0, 0.0]);
    }

    #[test]
    fn aggregation_weights_form_probability_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let graph = Graph::new();
            let agents = graph.constant(Tensor::from_raw(vec![3, 4], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()));
            let protos = graph.constant(Tensor::from_raw(vec![6, 4], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()));
            let weights = agents.cosine_rows(&protos).relu().normalize_rows_guarded().value();
            for i in 0..3 {
                let row = weights.row(i);
                let sum: f64 = row.iter().sum();
                assert!(row.iter().all(|&w| w >= 0.0));
                assert!(sum.abs() < 1e-12 || (sum - 1.0).abs() < 1e-9);
            }
        }
    }
}
