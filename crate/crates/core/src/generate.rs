//! Seeded random instances: graph, features and layer parameters.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{GatError, Result};
use crate::graph::{FeatureMatrix, Graph};
use crate::layer::{LayerParams, DEFAULT_NEGATIVE_SLOPE};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceSpec {
    pub num_nodes: usize,
    pub feature_dim: usize,
    pub out_dim: usize,
    /// Every node receives between this many and `max(min_degree, n - 1)`
    /// distinct sources; self-loops may be drawn.
    pub min_degree: usize,
    pub seed: u64,
}

fn normals(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn random_instance(spec: &InstanceSpec) -> Result<(LayerParams, Graph, FeatureMatrix)> {
    let InstanceSpec {
        num_nodes: n,
        feature_dim: h,
        out_dim: d,
        min_degree,
        seed,
    } = *spec;
    if n == 0 || d == 0 {
        return Err(GatError::InvalidConfig(
            "node count and output dimension must be positive".into(),
        ));
    }
    if min_degree > n {
        return Err(GatError::InvalidConfig(format!(
            "min degree {min_degree} exceeds node count {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let features = FeatureMatrix::new(h, (0..n).map(|_| normals(&mut rng, h)).collect())?;

    let mut edges = Vec::new();
    for target in 0..n {
        let degree = rng.random_range(min_degree..=min_degree.max(n - 1));
        for source in sample(&mut rng, n, degree).into_iter() {
            edges.push((target, source));
        }
    }
    let graph = Graph::new(n, edges)?;

    let theta_r = Matrix::from_vec(d, h + 1, normals(&mut rng, d * (h + 1)))?;
    let theta_l = Matrix::from_vec(d, h + 1, normals(&mut rng, d * (h + 1)))?;
    let a = normals(&mut rng, d);
    let b = normals(&mut rng, d);
    let params = LayerParams::new(theta_r, theta_l, a, b, DEFAULT_NEGATIVE_SLOPE)?;
    Ok((params, graph, features))
}
