//! Structural gradient pathologies visible in the closed forms.
//!
//! * A Θ_R row `t` is dead when every neighbor sits on the same LeakyReLU
//!   branch in dimension `t`: the `(s_k^(t) − s_j^(t))` factor vanishes for
//!   every pair and the row gradient is exactly zero.
//! * With `N ≤ 1` the softmax is constant, so Θ_R and `a` get no gradient.
//! * `closed_form_gap` measures how far the collapsed closed forms drift from
//!   the exact chain rule under the supplied upstream gradient.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{
    backward_chain, grad_b, grad_theta_l, grad_theta_r_sum, max_rel_err, slope_indicators,
};
use crate::error::Result;
use crate::graph::{FeatureMatrix, Graph};
use crate::layer::{forward_with_trace, ForwardTrace, LayerParams};
use crate::oracle::{loss, LossSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDiagnosis {
    pub node: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "dead_theta_R")]
    pub dead_theta_r: Vec<bool>,
    pub single_neighbor: bool,
    /// Natural-log entropy of the attention weights, in `[0, ln N]`.
    pub attention_entropy: f64,
    /// Fraction of output rows whose Θ_R gradient is structurally dead.
    pub regime_uniformity: f64,
    pub closed_form_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PathologyReport {
    pub nodes: Vec<NodeDiagnosis>,
}

pub fn attention_entropy(alpha: &[f64]) -> f64 {
    let h: f64 = alpha
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| -w * w.ln())
        .sum();
    h.max(0.0)
}

/// Rows `t` in which all neighbors share the same slope regime.
pub fn dead_rows(trace: &ForwardTrace, negative_slope: f64) -> Vec<bool> {
    let d = trace.a2.len();
    let slopes = slope_indicators(trace, negative_slope);
    (0..d)
        .map(|t| match slopes.s.first() {
            None => true,
            Some(first) => slopes.s.iter().all(|s| s[t] == first[t]),
        })
        .collect()
}

pub fn diagnose_node(
    params: &LayerParams,
    graph: &Graph,
    features: &FeatureMatrix,
    i: usize,
    spec: &LossSpec,
) -> Result<NodeDiagnosis> {
    let trace = forward_with_trace(params, graph, features, i)?;
    let (_, upstream) = loss(&trace.h_out, spec)?;
    let n = trace.num_neighbors();
    let dead = dead_rows(&trace, params.negative_slope);
    let dead_count = dead.iter().filter(|&&d| d).count();

    let chain = backward_chain(&trace, params, &upstream);
    let gaps = [
        max_rel_err(
            chain.d_theta_r.as_slice(),
            grad_theta_r_sum(&trace, params, &upstream).as_slice(),
        )
        .0,
        max_rel_err(
            chain.d_theta_l.as_slice(),
            grad_theta_l(&trace, params, &upstream).as_slice(),
        )
        .0,
        max_rel_err(&chain.d_b, &grad_b(&upstream)).0,
    ];

    Ok(NodeDiagnosis {
        node: i,
        n,
        single_neighbor: n <= 1,
        attention_entropy: attention_entropy(&trace.alpha),
        regime_uniformity: if dead.is_empty() {
            0.0
        } else {
            dead_count as f64 / dead.len() as f64
        },
        dead_theta_r: dead,
        closed_form_gap: gaps.into_iter().fold(0.0, f64::max),
    })
}

/// Diagnoses `nodes`, or every node with at least one neighbor when `None`.
pub fn diagnose(
    params: &LayerParams,
    graph: &Graph,
    features: &FeatureMatrix,
    nodes: Option<&[usize]>,
    spec: &LossSpec,
) -> Result<PathologyReport> {
    let selected: Vec<usize> = match nodes {
        Some(list) => list.to_vec(),
        None => (0..graph.num_nodes())
            .filter(|&i| graph.degree(i).is_ok_and(|n| n >= 1))
            .collect(),
    };
    let nodes = selected
        .par_iter()
        .map(|&i| diagnose_node(params, graph, features, i, spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(PathologyReport { nodes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{grad_theta_r_pairwise, UpstreamGradient};
    use crate::generate::{random_instance, InstanceSpec};
    use crate::layer::softmax_neighbors;
    use crate::linalg::Matrix;

    fn seeded(seed: u64) -> (LayerParams, Graph, FeatureMatrix) {
        random_instance(&InstanceSpec {
            num_nodes: 6,
            feature_dim: 3,
            out_dim: 4,
            min_degree: 2,
            seed,
        })
        .unwrap()
    }

    /// Positive features and Θ entries keep every pre-activation positive.
    fn all_positive() -> (LayerParams, Graph, FeatureMatrix) {
        let theta = Matrix::from_rows(&[vec![0.5, 1.0], vec![0.1, 2.0], vec![1.0, 0.3]]).unwrap();
        let theta_l = Matrix::from_rows(&[vec![0.2, 0.7], vec![0.4, 0.1], vec![0.9, 1.5]]).unwrap();
        let p = LayerParams::new(theta, theta_l, vec![1.0, -0.5, 2.0], vec![0.0; 3], 0.2).unwrap();
        let g = Graph::new(4, vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 0)]).unwrap();
        let f = FeatureMatrix::new(1, vec![vec![0.3], vec![1.1], vec![2.0], vec![0.7]]).unwrap();
        (p, g, f)
    }

    #[test]
    fn all_positive_preactivations_kill_theta_r() {
        let (p, g, f) = all_positive();
        let report = diagnose(&p, &g, &f, None, &LossSpec::uniform(3)).unwrap();
        assert_eq!(report.nodes.len(), 3);
        for node in &report.nodes {
            assert!(node.dead_theta_r.iter().all(|&d| d));
            assert_eq!(node.regime_uniformity, 1.0);
            let t = forward_with_trace(&p, &g, &f, node.node).unwrap();
            let up = UpstreamGradient::uniform(3);
            assert!(grad_theta_r_pairwise(&t, &p, &up).is_zero());
        }
    }

    #[test]
    fn single_neighbor_node() {
        let (p, g, f) = all_positive();
        let d = diagnose_node(&p, &g, &f, 2, &LossSpec::uniform(3)).unwrap();
        assert_eq!(d.n, 1);
        assert!(d.single_neighbor);
        assert_eq!(d.attention_entropy, 0.0);
    }

    #[test]
    fn default_node_set_skips_isolated_nodes() {
        let (p, _, f) = all_positive();
        let g = Graph::new(4, vec![(0, 1), (0, 2), (3, 3)]).unwrap();
        let report = diagnose(&p, &g, &f, None, &LossSpec::uniform(3)).unwrap();
        let ids: Vec<usize> = report.nodes.iter().map(|n| n.node).collect();
        assert_eq!(ids, vec![0, 3]);
        let explicit = diagnose(&p, &g, &f, Some(&[1]), &LossSpec::uniform(3)).unwrap();
        assert_eq!(explicit.nodes[0].n, 0);
    }

    #[test]
    fn dead_rows_match_pairwise_zero_rows() {
        let mut mixed = 0;
        for seed in 0..30 {
            let (p, g, f) = seeded(seed);
            let up = UpstreamGradient::uniform(4);
            for i in 0..6 {
                let t = forward_with_trace(&p, &g, &f, i).unwrap();
                let dead = dead_rows(&t, p.negative_slope);
                let pair = grad_theta_r_pairwise(&t, &p, &up);
                for (row, &is_dead) in dead.iter().enumerate() {
                    let zero = pair.row(row).iter().all(|v| *v == 0.0);
                    assert_eq!(is_dead, zero, "seed {seed} node {i} row {row}");
                }
                let d = diagnose_node(&p, &g, &f, i, &LossSpec::uniform(4)).unwrap();
                if d.regime_uniformity > 0.0 && d.regime_uniformity < 1.0 {
                    mixed += 1;
                }
                assert!(d.closed_form_gap <= 1e-10);
            }
        }
        assert!(mixed > 0);
    }

    #[test]
    fn gap_appears_for_non_uniform_upstream() {
        let (p, g, f) = seeded(4);
        let spec = LossSpec::Dot(vec![1.0, -2.0, 0.5, 3.0]);
        let report = diagnose(&p, &g, &f, None, &spec).unwrap();
        assert!(report.nodes.iter().any(|n| n.closed_form_gap > 1e-6));
    }

    #[test]
    fn entropy_bounds_and_shift_invariance() {
        assert_eq!(attention_entropy(&[1.0]), 0.0);
        let uniform = attention_entropy(&[0.25; 4]);
        assert!((uniform - 4f64.ln()).abs() < 1e-15);
        let scores = [0.3, -1.2, 2.0];
        let base = attention_entropy(&softmax_neighbors(&scores).unwrap());
        for kappa in [-1e3, -5.0, 7.5, 1e3] {
            let shifted: Vec<f64> = scores.iter().map(|s| s + kappa).collect();
            let h = attention_entropy(&softmax_neighbors(&shifted).unwrap());
            assert!((h - base).abs() < 1e-12);
        }
        assert!(base > 0.0 && base < 3f64.ln());
    }

    #[test]
    fn report_serializes_one_object_per_node() {
        let (p, g, f) = all_positive();
        let report = diagnose(&p, &g, &f, Some(&[0, 2]), &LossSpec::uniform(3)).unwrap();
        let text = serde_json::to_string(&report).unwrap();
        assert!(text.starts_with("[{\"node\":0,\"N\":3,\"dead_theta_R\":[true,true,true]"));
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 2);
    }
}
