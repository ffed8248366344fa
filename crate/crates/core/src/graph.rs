//! Graph topology, node features and the augmented-feature convention.
//!
//! An edge `(i, j)` means node `j` sends a message to target `i`, i.e.
//! `j ∈ N(i)`. Neighbor lists keep the order in which edges were declared;
//! gradient formulas index neighbors positionally, so that order is part of
//! the contract. Self-loops are only present when declared explicitly.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, GatError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    neighbor_lists: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds the graph, rejecting out-of-range endpoints and duplicate edges.
    pub fn new(num_nodes: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if num_nodes == 0 {
            return Err(GatError::EmptyGraph);
        }
        let mut seen = HashSet::with_capacity(edges.len());
        let mut neighbor_lists = vec![Vec::new(); num_nodes];
        for &(target, source) in &edges {
            if target >= num_nodes || source >= num_nodes {
                return Err(GatError::EdgeOutOfRange {
                    target,
                    from: source,
                    num_nodes,
                });
            }
            if !seen.insert((target, source)) {
                return Err(GatError::DuplicateEdge {
                    target,
                    from: source,
                });
            }
            neighbor_lists[target].push(source);
        }
        Ok(Self {
            num_nodes,
            edges,
            neighbor_lists,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Sources of node `i`, in edge-declaration order.
    pub fn neighbors(&self, i: usize) -> Result<&[usize]> {
        self.neighbor_lists
            .get(i)
            .map(Vec::as_slice)
            .ok_or(GatError::NodeOutOfRange {
                node: i,
                num_nodes: self.num_nodes,
            })
    }

    pub fn degree(&self, i: usize) -> Result<usize> {
        self.neighbors(i).map(<[usize]>::len)
    }
}

/// `n` feature rows of common length `H`, all finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    rows: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        for row in &rows {
            check_len("feature row", dim, row.len())?;
            check_finite("feature row", row)?;
        }
        Ok(Self { dim, rows })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, q: usize) -> Result<&[f64]> {
        self.rows
            .get(q)
            .map(Vec::as_slice)
            .ok_or(GatError::NodeOutOfRange {
                node: q,
                num_nodes: self.rows.len(),
            })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn augmented(&self, q: usize) -> Result<AugmentedFeature> {
        augment(self.row(q)?)
    }
}

/// `[1, h_1, …, h_H]`; the leading one lets column 0 of a weight matrix act
/// as its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedFeature(Vec<f64>);

impl AugmentedFeature {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The raw feature part, without the leading one.
    pub fn features(&self) -> &[f64] {
        &self.0[1..]
    }
}

pub fn augment(h: &[f64]) -> Result<AugmentedFeature> {
    check_finite("feature vector", h)?;
    let mut v = Vec::with_capacity(h.len() + 1);
    v.push(1.0);
    v.extend_from_slice(h);
    Ok(AugmentedFeature(v))
}

/// On-disk graph document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphFile {
    pub num_nodes: usize,
    pub feature_dim: usize,
    pub features: Vec<Vec<f64>>,
    pub edges: Vec<[usize; 2]>,
}

impl GraphFile {
    pub fn from_parts(graph: &Graph, features: &FeatureMatrix) -> Self {
        Self {
            num_nodes: graph.num_nodes(),
            feature_dim: features.dim(),
            features: features.rows().to_vec(),
            edges: graph.edges().iter().map(|&(i, j)| [i, j]).collect(),
        }
    }

    pub fn into_parts(self) -> Result<(Graph, FeatureMatrix)> {
        check_len("feature rows", self.num_nodes, self.features.len())?;
        let graph = Graph::new(
            self.num_nodes,
            self.edges.into_iter().map(|[i, j]| (i, j)).collect(),
        )?;
        let features = FeatureMatrix::new(self.feature_dim, self.features)?;
        Ok((graph, features))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Graph, FeatureMatrix)> {
        let text = fs::read_to_string(path)?;
        let file: GraphFile = serde_json::from_str(&text)?;
        file.into_parts()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}
