//! Forward pass of a single GATv2 layer.
//!
//! For target `i` with neighbors `j ∈ N(i)`:
//!
//! ```text
//! e_ij  = a · LeakyReLU(Θ_R h̃_i + Θ_L h̃_j)
//! α_ij  = softmax_j(e_ij)
//! h'_i  = b + Σ_j α_ij Θ_L h̃_j
//! ```
//!
//! [`forward_with_trace`] keeps every intermediate so the backward pass can
//! reuse them. Field names follow the activation labels of the computation
//! graph: `a2 = Θ_R h̃_i`, `a3 = Θ_L h̃_j`, `a4 = a2 + a3`,
//! `a5 = LeakyReLU(a4)`, `e = a · a5`, `a9 = α Θ_L h̃_j`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, GatError, Result};
use crate::graph::{AugmentedFeature, FeatureMatrix, Graph};
use crate::linalg::{add, dot, scale, Matrix};

pub const DEFAULT_NEGATIVE_SLOPE: f64 = 0.2;

/// Trainable parameters of one layer. Column 0 of each Θ is its bias part.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub theta_r: Matrix,
    pub theta_l: Matrix,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub negative_slope: f64,
}

impl LayerParams {
    pub fn new(
        theta_r: Matrix,
        theta_l: Matrix,
        a: Vec<f64>,
        b: Vec<f64>,
        negative_slope: f64,
    ) -> Result<Self> {
        let params = Self {
            theta_r,
            theta_l,
            a,
            b,
            negative_slope,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.theta_r.rows();
        let cols = self.theta_r.cols();
        if cols == 0 {
            return Err(GatError::ShapeMismatch {
                what: "theta_R columns",
                expected: 1,
                actual: 0,
            });
        }
        check_len("theta_L rows", d, self.theta_l.rows())?;
        check_len("theta_L columns", cols, self.theta_l.cols())?;
        check_len("a", d, self.a.len())?;
        check_len("b", d, self.b.len())?;
        if !(self.negative_slope > 0.0 && self.negative_slope <= 1.0) {
            return Err(GatError::InvalidSlope(self.negative_slope));
        }
        check_finite("theta_R", self.theta_r.as_slice())?;
        check_finite("theta_L", self.theta_l.as_slice())?;
        check_finite("a", &self.a)?;
        check_finite("b", &self.b)?;
        Ok(())
    }

    /// Output dimension `D`.
    pub fn out_dim(&self) -> usize {
        self.theta_r.rows()
    }

    /// Raw input feature dimension `H` (Θ has `H + 1` columns).
    pub fn in_dim(&self) -> usize {
        self.theta_r.cols() - 1
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let file: ParamsFile = serde_json::from_str(&text)?;
        file.into_params()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&ParamsFile::from(self))?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

/// The four trainable parameter blocks, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamBlock {
    ThetaR,
    ThetaL,
    A,
    B,
}

impl ParamBlock {
    pub const ALL: [ParamBlock; 4] = [Self::ThetaR, Self::ThetaL, Self::A, Self::B];

    pub fn name(self) -> &'static str {
        match self {
            Self::ThetaR => "theta_R",
            Self::ThetaL => "theta_L",
            Self::A => "a",
            Self::B => "b",
        }
    }

    /// Column count used to turn a flat storage offset into `[row, col]`;
    /// `None` for vector blocks.
    pub fn matrix_cols(self, params_cols: usize) -> Option<usize> {
        match self {
            Self::ThetaR | Self::ThetaL => Some(params_cols),
            Self::A | Self::B => None,
        }
    }

    /// Human-readable index of flat entry `k`: `[row, col]` or `[k]`.
    pub fn index_of(self, k: usize, params_cols: usize) -> Vec<usize> {
        match self.matrix_cols(params_cols) {
            Some(cols) => vec![k / cols, k % cols],
            None => vec![k],
        }
    }
}

impl LayerParams {
    pub fn block(&self, block: ParamBlock) -> &[f64] {
        match block {
            ParamBlock::ThetaR => self.theta_r.as_slice(),
            ParamBlock::ThetaL => self.theta_l.as_slice(),
            ParamBlock::A => &self.a,
            ParamBlock::B => &self.b,
        }
    }

    pub fn block_mut(&mut self, block: ParamBlock) -> &mut [f64] {
        match block {
            ParamBlock::ThetaR => self.theta_r.as_mut_slice(),
            ParamBlock::ThetaL => self.theta_l.as_mut_slice(),
            ParamBlock::A => &mut self.a,
            ParamBlock::B => &mut self.b,
        }
    }
}

/// On-disk parameter document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsFile {
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "H")]
    pub h: usize,
    pub negative_slope: f64,
    #[serde(rename = "theta_R")]
    pub theta_r: Matrix,
    #[serde(rename = "theta_L")]
    pub theta_l: Matrix,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl ParamsFile {
    pub fn into_params(self) -> Result<LayerParams> {
        check_len("theta_R rows", self.d, self.theta_r.rows())?;
        check_len("theta_R columns", self.h + 1, self.theta_r.cols())?;
        LayerParams::new(
            self.theta_r,
            self.theta_l,
            self.a,
            self.b,
            self.negative_slope,
        )
    }
}

impl From<&LayerParams> for ParamsFile {
    fn from(p: &LayerParams) -> Self {
        Self {
            d: p.out_dim(),
            h: p.in_dim(),
            negative_slope: p.negative_slope,
            theta_r: p.theta_r.clone(),
            theta_l: p.theta_l.clone(),
            a: p.a.clone(),
            b: p.b.clone(),
        }
    }
}

/// LeakyReLU with the negative branch taken at exactly zero.
#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Raw attention score `a · LeakyReLU(Θ_R h̃_i + Θ_L h̃_j)`.
pub fn score(params: &LayerParams, hi: &AugmentedFeature, hj: &AugmentedFeature) -> Result<f64> {
    check_len("target feature", params.theta_r.cols(), hi.len())?;
    check_len("neighbor feature", params.theta_l.cols(), hj.len())?;
    let a2 = params.theta_r.matvec(hi.as_slice())?;
    let a3 = params.theta_l.matvec(hj.as_slice())?;
    Ok(score_from_preactivation(params, &add(&a2, &a3)))
}

fn score_from_preactivation(params: &LayerParams, a4: &[f64]) -> f64 {
    let a5: Vec<f64> = a4
        .iter()
        .map(|&x| leaky_relu(x, params.negative_slope))
        .collect();
    dot(&params.a, &a5)
}

/// Max-shifted softmax over one neighborhood. An empty input gives an empty
/// output.
pub fn softmax_neighbors(scores: &[f64]) -> Result<Vec<f64>> {
    check_finite("attention scores", scores)?;
    if scores.is_empty() {
        return Ok(Vec::new());
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|e| (e - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|x| x / total).collect())
}

/// Per-neighbor messages `α_ij Θ_L h̃_j`.
pub fn weighted_messages(alpha: &[f64], a3: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    check_len("attention weights", a3.len(), alpha.len())?;
    Ok(alpha.iter().zip(a3).map(|(w, m)| scale(*w, m)).collect())
}

fn aggregate(b: &[f64], a9: &[Vec<f64>]) -> Vec<f64> {
    let mut out = b.to_vec();
    for msg in a9 {
        for (o, m) in out.iter_mut().zip(msg) {
            *o += m;
        }
    }
    out
}

/// `h'_i = b + Σ_j α_ij (Θ_L h̃_j)` from the cached `a3` rows.
pub fn update_node(params: &LayerParams, alpha: &[f64], a3: &[Vec<f64>]) -> Result<Vec<f64>> {
    for m in a3 {
        check_len("neighbor message", params.out_dim(), m.len())?;
    }
    Ok(aggregate(&params.b, &weighted_messages(alpha, a3)?))
}

/// Every intermediate of the forward pass for one target node.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub target: usize,
    pub neighbors: Vec<usize>,
    pub h_target: AugmentedFeature,
    pub h_neighbors: Vec<AugmentedFeature>,
    /// `Θ_R h̃_i`, shared by all neighbors.
    pub a2: Vec<f64>,
    pub a3: Vec<Vec<f64>>,
    pub a4: Vec<Vec<f64>>,
    pub a5: Vec<Vec<f64>>,
    pub e: Vec<f64>,
    pub alpha: Vec<f64>,
    pub a9: Vec<Vec<f64>>,
    pub h_out: Vec<f64>,
}

impl ForwardTrace {
    /// Neighborhood size `N`.
    pub fn num_neighbors(&self) -> usize {
        self.neighbors.len()
    }

    /// Smallest `|a4|` entry over all neighbors, `None` when `N = 0`.
    pub fn min_abs_preactivation(&self) -> Option<f64> {
        self.a4
            .iter()
            .flatten()
            .map(|x| x.abs())
            .fold(None, |m, x| Some(m.map_or(x, |m: f64| m.min(x))))
    }
}

pub fn forward_with_trace(
    params: &LayerParams,
    graph: &Graph,
    features: &FeatureMatrix,
    i: usize,
) -> Result<ForwardTrace> {
    check_len("feature dimension", params.in_dim(), features.dim())?;
    check_len("feature rows", graph.num_nodes(), features.len())?;
    let neighbors = graph.neighbors(i)?.to_vec();

    let h_target = features.augmented(i)?;
    let h_neighbors = neighbors
        .iter()
        .map(|&j| features.augmented(j))
        .collect::<Result<Vec<_>>>()?;

    let a2 = params.theta_r.matvec(h_target.as_slice())?;
    let a3 = h_neighbors
        .iter()
        .map(|hj| params.theta_l.matvec(hj.as_slice()))
        .collect::<Result<Vec<_>>>()?;
    let a4: Vec<Vec<f64>> = a3.iter().map(|m| add(&a2, m)).collect();
    let a5: Vec<Vec<f64>> = a4
        .iter()
        .map(|v| {
            v.iter()
                .map(|&x| leaky_relu(x, params.negative_slope))
                .collect()
        })
        .collect();
    let e: Vec<f64> = a5.iter().map(|v| dot(&params.a, v)).collect();
    let alpha = softmax_neighbors(&e)?;
    let a9 = weighted_messages(&alpha, &a3)?;
    let h_out = aggregate(&params.b, &a9);

    Ok(ForwardTrace {
        target: i,
        neighbors,
        h_target,
        h_neighbors,
        a2,
        a3,
        a4,
        a5,
        e,
        alpha,
        a9,
        h_out,
    })
}
