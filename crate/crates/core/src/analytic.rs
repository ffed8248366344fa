//! Analytic gradients of one GATv2 layer for a single target node.
//!
//! Two families live here:
//!
//! * Closed forms built from the scalar aggregates
//!   `A_k = Σ_d (Θ_L h̃_k)^(d)` and `S_k = Σ_j (δ_kj − α_j) A_j`. They weight
//!   every output entry of `Θ_L h̃_k` equally, so they are exact when the
//!   upstream gradient `∂L/∂h'` is a constant vector. For other upstream
//!   gradients they follow the row-wise form `g^(t) · [...]` literally and
//!   differ from the true gradient; [`crate::diagnostics`] reports the gap.
//!   The Θ_R closed form comes in two algebraically equal shapes: a sum over
//!   neighbors and a sum over unordered neighbor pairs.
//! * [`backward_chain`], the uncollapsed chain of vector-Jacobian products in
//!   reverse activation order. It is exact for any upstream gradient.
//!
//! The Θ_L closed form has a weight part and a bias part; the second one is
//! the bias column (`h̃^(0) = 1`), which is how the column-0 entries below are
//! produced.

#![allow(clippy::needless_range_loop)]

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, GatError, Result};
use crate::graph::AugmentedFeature;
use crate::layer::{ForwardTrace, LayerParams, ParamBlock};
use crate::linalg::{dot, Matrix};

/// Denominator floor of [`rel_err`].
pub const REL_ERR_FLOOR: f64 = 1.0;

/// `|x − y| / max(|x|, |y|, REL_ERR_FLOOR)`.
///
/// Relative for entries of magnitude at least one, absolute below that, so
/// structurally zero entries compare against round-off rather than against
/// each other's noise.
pub fn rel_err(x: f64, y: f64) -> f64 {
    let diff = (x - y).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / x.abs().max(y.abs()).max(REL_ERR_FLOOR)
}

/// Largest [`rel_err`] over paired entries, with the offset where it occurs.
pub fn max_rel_err(xs: &[f64], ys: &[f64]) -> (f64, usize) {
    assert_eq!(xs.len(), ys.len(), "max_rel_err on different lengths");
    xs.iter()
        .zip(ys)
        .map(|(x, y)| rel_err(*x, *y))
        .enumerate()
        .fold(
            (0.0, 0),
            |best, (k, e)| if e > best.0 { (e, k) } else { best },
        )
}

/// Per-neighbor LeakyReLU derivative: `s[k][d] = 1` if `a4[k][d] > 0`,
/// else the negative slope.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeIndicator {
    pub s: Vec<Vec<f64>>,
}

/// `∂L/∂h'_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpstreamGradient(Vec<f64>);

impl UpstreamGradient {
    pub fn new(g: Vec<f64>) -> Result<Self> {
        check_finite("upstream gradient", &g)?;
        Ok(Self(g))
    }

    /// The all-ones upstream gradient.
    pub fn uniform(d: usize) -> Self {
        Self(vec![1.0; d])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// True when every entry equals the first one.
    pub fn is_constant(&self) -> bool {
        self.0.windows(2).all(|w| w[0] == w[1])
    }
}

/// Gradients of the loss with respect to every parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub d_theta_r: Matrix,
    pub d_theta_l: Matrix,
    pub d_a: Vec<f64>,
    pub d_b: Vec<f64>,
}

impl GradientSet {
    pub fn zeros_like(params: &LayerParams) -> Self {
        let (d, cols) = params.theta_r.shape();
        Self {
            d_theta_r: Matrix::zeros(d, cols),
            d_theta_l: Matrix::zeros(d, cols),
            d_a: vec![0.0; d],
            d_b: vec![0.0; d],
        }
    }

    pub fn block(&self, block: ParamBlock) -> &[f64] {
        match block {
            ParamBlock::ThetaR => self.d_theta_r.as_slice(),
            ParamBlock::ThetaL => self.d_theta_l.as_slice(),
            ParamBlock::A => &self.d_a,
            ParamBlock::B => &self.d_b,
        }
    }

    pub fn block_mut(&mut self, block: ParamBlock) -> &mut [f64] {
        match block {
            ParamBlock::ThetaR => self.d_theta_r.as_mut_slice(),
            ParamBlock::ThetaL => self.d_theta_l.as_mut_slice(),
            ParamBlock::A => &mut self.d_a,
            ParamBlock::B => &mut self.d_b,
        }
    }

    pub fn is_finite(&self) -> bool {
        ParamBlock::ALL
            .iter()
            .all(|&p| self.block(p).iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientMeta {
    pub target_node: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub upstream_mode: String,
}

/// JSON form of a [`GradientSet`], laid out like the parameter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientFile {
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "theta_R")]
    pub theta_r: Matrix,
    #[serde(rename = "theta_L")]
    pub theta_l: Matrix,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub meta: GradientMeta,
}

impl GradientFile {
    pub fn new(grads: &GradientSet, meta: GradientMeta) -> Self {
        Self {
            d: grads.d_theta_r.rows(),
            h: grads.d_theta_r.cols() - 1,
            theta_r: grads.d_theta_r.clone(),
            theta_l: grads.d_theta_l.clone(),
            a: grads.d_a.clone(),
            b: grads.d_b.clone(),
            meta,
        }
    }
}

pub fn slope_indicators(trace: &ForwardTrace, negative_slope: f64) -> SlopeIndicator {
    SlopeIndicator {
        s: trace
            .a4
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&x| if x > 0.0 { 1.0 } else { negative_slope })
                    .collect()
            })
            .collect(),
    }
}

/// `M[l][j] = α_l (δ_lj − α_j)`.
pub fn softmax_jacobian(alpha: &[f64]) -> Result<Matrix> {
    let n = alpha.len();
    let sum: f64 = alpha.iter().sum();
    if n > 0 && (sum - 1.0).abs() > 1e-9 {
        return Err(GatError::Unnormalized { sum });
    }
    let mut m = Matrix::zeros(n, n);
    for l in 0..n {
        for j in 0..n {
            m[(l, j)] = if l == j {
                alpha[l] * (1.0 - alpha[j])
            } else {
                -alpha[l] * alpha[j]
            };
        }
    }
    Ok(m)
}

/// `A = Σ_d (Θ_L h̃_j)^(d)`.
pub fn a7(theta_l: &Matrix, hj: &AugmentedFeature) -> Result<f64> {
    Ok(theta_l.matvec(hj.as_slice())?.iter().sum())
}

/// `S_k = Σ_j (δ_kj − α_j) A_j`.
pub fn s_k(k: usize, alpha: &[f64], a7_values: &[f64]) -> Result<f64> {
    check_len("A_7 values", alpha.len(), a7_values.len())?;
    if k >= alpha.len() {
        return Err(GatError::IndexOutOfRange {
            index: k,
            len: alpha.len(),
        });
    }
    Ok(centered_sum(k, alpha, a7_values))
}

fn centered_sum(k: usize, alpha: &[f64], values: &[f64]) -> f64 {
    alpha
        .iter()
        .zip(values)
        .enumerate()
        .map(|(j, (w, v))| if j == k { (1.0 - w) * v } else { -w * v })
        .sum()
}

fn a7_values(trace: &ForwardTrace) -> Vec<f64> {
    trace.a3.iter().map(|m| m.iter().sum()).collect()
}

fn check_upstream(params: &LayerParams, upstream: &UpstreamGradient) {
    assert_eq!(
        upstream.len(),
        params.out_dim(),
        "upstream gradient length must equal the output dimension"
    );
}

/// Expands per-row coefficients into a `D × (H+1)` matrix whose entry
/// `(t, m)` is `coef[t] · h̃^(m)`; column 0 carries the bias part.
fn outer_rows(coef: &[f64], h: &AugmentedFeature) -> Matrix {
    let mut out = Matrix::zeros(coef.len(), h.len());
    for (t, c) in coef.iter().enumerate() {
        for (o, x) in out.row_mut(t).iter_mut().zip(h.as_slice()) {
            *o = c * x;
        }
    }
    out
}

/// Closed-form Θ_R gradient, summed over neighbors:
/// row `t` is `g^(t) a^(t) Σ_k s_k^(t) α_k S_k · h̃_i^T`.
pub fn grad_theta_r_sum(
    trace: &ForwardTrace,
    params: &LayerParams,
    upstream: &UpstreamGradient,
) -> Matrix {
    check_upstream(params, upstream);
    let d = params.out_dim();
    let n = trace.num_neighbors();
    if n <= 1 {
        return Matrix::zeros(d, params.theta_r.cols());
    }
    let slopes = slope_indicators(trace, params.negative_slope);
    let a7 = a7_values(trace);
    let s: Vec<f64> = (0..n).map(|k| centered_sum(k, &trace.alpha, &a7)).collect();
    let g = upstream.as_slice();
    let coef: Vec<f64> = (0..d)
        .map(|t| {
            let inner: f64 = (0..n).map(|k| slopes.s[k][t] * trace.alpha[k] * s[k]).sum();
            g[t] * params.a[t] * inner
        })
        .collect();
    outer_rows(&coef, &trace.h_target)
}

/// Closed-form Θ_R gradient over unordered neighbor pairs:
/// row `t` is `g^(t) a^(t) Σ_{k<j} α_k α_j (A_k − A_j)(s_k^(t) − s_j^(t)) · h̃_i^T`.
///
/// A row is exactly zero whenever every neighbor sits on the same LeakyReLU
/// branch in that row.
pub fn grad_theta_r_pairwise(
    trace: &ForwardTrace,
    params: &LayerParams,
    upstream: &UpstreamGradient,
) -> Matrix {
    check_upstream(params, upstream);
    let d = params.out_dim();
    let n = trace.num_neighbors();
    let slopes = slope_indicators(trace, params.negative_slope);
    let a7 = a7_values(trace);
    let g = upstream.as_slice();
    let coef: Vec<f64> = (0..d)
        .map(|t| {
            let mut inner = 0.0;
            for k in 0..n {
                for j in k + 1..n {
                    inner += trace.alpha[k]
                        * trace.alpha[j]
                        * (a7[k] - a7[j])
                        * (slopes.s[k][t] - slopes.s[j][t]);
                }
            }
            g[t] * params.a[t] * inner
        })
        .collect();
    outer_rows(&coef, &trace.h_target)
}

/// Closed-form Θ_L gradient: entry `(t, m)` is
/// `g^(t) Σ_k [a^(t) s_k^(t) α_k S_k + α_k] h̃_k^(m)`.
///
/// The first term flows through the attention scores, the second is the
/// direct aggregation path.
pub fn grad_theta_l(
    trace: &ForwardTrace,
    params: &LayerParams,
    upstream: &UpstreamGradient,
) -> Matrix {
    check_upstream(params, upstream);
    let d = params.out_dim();
    let n = trace.num_neighbors();
    let slopes = slope_indicators(trace, params.negative_slope);
    let a7 = a7_values(trace);
    let s: Vec<f64> = (0..n).map(|k| centered_sum(k, &trace.alpha, &a7)).collect();
    let g = upstream.as_slice();
    let mut out = Matrix::zeros(d, params.theta_l.cols());
    for k in 0..n {
        let coef: Vec<f64> = (0..d)
            .map(|t| g[t] * (params.a[t] * slopes.s[k][t] * trace.alpha[k] * s[k] + trace.alpha[k]))
            .collect();
        out.add_assign(&outer_rows(&coef, &trace.h_neighbors[k]))
            .expect("matching shapes");
    }
    out
}

/// The bias enters the output through an identity Jacobian.
pub fn grad_b(upstream: &UpstreamGradient) -> Vec<f64> {
    upstream.as_slice().to_vec()
}

/// Gradient of the attention vector: `Σ_k (∂L/∂e_k) a5_k` with
/// `∂L/∂e_k = α_k Σ_j (δ_kj − α_j) (g · Θ_L h̃_j)`.
///
/// Uses the full upstream weighting, so it is exact for any `g`.
pub fn grad_a(trace: &ForwardTrace, params: &LayerParams, upstream: &UpstreamGradient) -> Vec<f64> {
    check_upstream(params, upstream);
    let d = params.out_dim();
    let n = trace.num_neighbors();
    let mut out = vec![0.0; d];
    if n <= 1 {
        return out;
    }
    let weighted: Vec<f64> = trace
        .a3
        .iter()
        .map(|m| dot(upstream.as_slice(), m))
        .collect();
    for k in 0..n {
        let de = trace.alpha[k] * centered_sum(k, &trace.alpha, &weighted);
        for (o, x) in out.iter_mut().zip(&trace.a5[k]) {
            *o += de * x;
        }
    }
    out
}

/// The closed forms bundled as a [`GradientSet`] (neighbor-sum Θ_R).
pub fn closed_form_gradients(
    trace: &ForwardTrace,
    params: &LayerParams,
    upstream: &UpstreamGradient,
) -> GradientSet {
    GradientSet {
        d_theta_r: grad_theta_r_sum(trace, params, upstream),
        d_theta_l: grad_theta_l(trace, params, upstream),
        d_a: grad_a(trace, params, upstream),
        d_b: grad_b(upstream),
    }
}

/// Full backward pass as explicit vector-Jacobian products, from `h'` back to
/// every parameter.
///
/// The aggregation step `a9_j = (α_j Θ_L) h̃_j` is split as
/// `a7_j = α_j`, `a8_j = a7_j Θ_L`, `a9_j = a8_j h̃_j`, and the Jacobian of
/// `a8_j` with respect to `a7_j` is kept as the full vector `vec(Θ_L)`, so
/// each output entry keeps its own upstream weight.
pub fn backward_chain(
    trace: &ForwardTrace,
    params: &LayerParams,
    upstream: &UpstreamGradient,
) -> GradientSet {
    check_upstream(params, upstream);
    let d = params.out_dim();
    let n = trace.num_neighbors();
    let mut grads = GradientSet::zeros_like(params);

    // h' = b + Σ_j a9_j: identity Jacobians to b and to every a9_j.
    let back_h = upstream.as_slice();
    grads.d_b = back_h.to_vec();
    let identity = Matrix::identity(d);
    let back_a9 = identity.vecmat(back_h).expect("D-vector");

    let theta_l_vec = Matrix::column(params.theta_l.as_slice());
    let mut back_a7 = vec![0.0; n];
    for j in 0..n {
        let hj = trace.h_neighbors[j].as_slice();
        // a9_j = a8_j h̃_j
        let back_a8 = Matrix::kron_identity_row(d, hj)
            .vecmat(&back_a9)
            .expect("D-vector");
        // a8_j = a7_j Θ_L: scalar path to α_j, direct path to Θ_L.
        back_a7[j] = theta_l_vec.vecmat(&back_a8).expect("vec(Θ_L) length")[0];
        let direct = Matrix::from_vec(d, params.theta_l.cols(), back_a8).expect("D×(H+1)");
        for (o, x) in grads
            .d_theta_l
            .as_mut_slice()
            .iter_mut()
            .zip(direct.as_slice())
        {
            *o += trace.alpha[j] * x;
        }
    }
    if n == 0 {
        return grads;
    }

    // α = softmax(e)
    let jac = softmax_jacobian(&trace.alpha).expect("normalized attention");
    let back_e = jac.vecmat(&back_a7).expect("N-vector");

    let slopes = slope_indicators(trace, params.negative_slope);
    let a_row = Matrix::from_vec(1, d, params.a.clone()).expect("1×D");
    let mut back_a2 = vec![0.0; d];
    for j in 0..n {
        // e_j = a5_j · a
        let back_a5 = a_row.vecmat(&[back_e[j]]).expect("scalar");
        for (o, x) in grads.d_a.iter_mut().zip(&trace.a5[j]) {
            *o += back_e[j] * x;
        }
        // a5_j = LeakyReLU(a4_j)
        let back_a4 = Matrix::diag(&slopes.s[j])
            .vecmat(&back_a5)
            .expect("D-vector");
        // a4_j = a2 + a3_j; a3_j = Θ_L h̃_j
        for (o, x) in back_a2.iter_mut().zip(&back_a4) {
            *o += x;
        }
        let via_score = Matrix::kron_identity_row(d, trace.h_neighbors[j].as_slice())
            .vecmat(&back_a4)
            .expect("D-vector");
        for (o, x) in grads.d_theta_l.as_mut_slice().iter_mut().zip(&via_score) {
            *o += x;
        }
    }
    // a2 = Θ_R h̃_i
    let d_theta_r = Matrix::kron_identity_row(d, trace.h_target.as_slice())
        .vecmat(&back_a2)
        .expect("D-vector");
    grads.d_theta_r = Matrix::from_vec(d, params.theta_r.cols(), d_theta_r).expect("D×(H+1)");
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::{random_instance, InstanceSpec};
    use crate::graph::{augment, FeatureMatrix, Graph};
    use crate::layer::forward_with_trace;

    fn close(x: f64, y: f64) -> bool {
        (x - y).abs() < 1e-14
    }

    fn trace_with_a4(a4: Vec<Vec<f64>>) -> ForwardTrace {
        let n = a4.len();
        ForwardTrace {
            target: 0,
            neighbors: (0..n).collect(),
            h_target: augment(&[]).unwrap(),
            h_neighbors: vec![augment(&[]).unwrap(); n],
            a2: vec![],
            a3: vec![],
            a4,
            a5: vec![],
            e: vec![],
            alpha: vec![],
            a9: vec![],
            h_out: vec![],
        }
    }

    #[test]
    fn slope_indicator_examples() {
        let t = trace_with_a4(vec![vec![0.5, 3.0], vec![-1.0, 2.0], vec![0.0, -0.0]]);
        let s = slope_indicators(&t, 0.2);
        assert_eq!(s.s[0], vec![1.0, 1.0]);
        assert_eq!(s.s[1], vec![0.2, 1.0]);
        assert_eq!(s.s[2], vec![0.2, 0.2]);
    }

    #[test]
    fn softmax_jacobian_examples() {
        assert_eq!(softmax_jacobian(&[1.0]).unwrap().as_slice(), &[0.0]);
        assert_eq!(
            softmax_jacobian(&[0.5, 0.5]).unwrap().as_slice(),
            &[0.25, -0.25, -0.25, 0.25]
        );
        assert_eq!(
            softmax_jacobian(&[0.25, 0.75]).unwrap().as_slice(),
            &[0.1875, -0.1875, -0.1875, 0.1875]
        );
        assert!(matches!(
            softmax_jacobian(&[0.5, 0.6]),
            Err(GatError::Unnormalized { .. })
        ));
    }

    #[test]
    fn a7_examples() {
        let h = augment(&[2.0]).unwrap();
        assert_eq!(a7(&Matrix::zeros(3, 2), &h).unwrap(), 0.0);
        let single = Matrix::from_rows(&[vec![0.5, -1.5]]).unwrap();
        assert_eq!(a7(&single, &h).unwrap(), 0.5 - 3.0);
        let two = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(a7(&two, &h).unwrap(), 3.0);
        assert!(a7(&two, &augment(&[1.0, 2.0]).unwrap()).is_err());
    }

    #[test]
    fn s_k_examples() {
        assert_eq!(s_k(0, &[1.0], &[7.3]).unwrap(), 0.0);
        let alpha = [0.2, 0.3, 0.5];
        for k in 0..3 {
            assert!(s_k(k, &alpha, &[2.5, 2.5, 2.5]).unwrap().abs() < 1e-15);
        }
        assert!(close(s_k(0, &[0.25, 0.75], &[3.0, 1.0]).unwrap(), 1.5));
        assert!(close(s_k(1, &[0.25, 0.75], &[3.0, 1.0]).unwrap(), -0.5));
        assert!(matches!(
            s_k(2, &[0.25, 0.75], &[3.0, 1.0]),
            Err(GatError::IndexOutOfRange { index: 2, len: 2 })
        ));
        assert!(s_k(0, &[1.0], &[1.0, 2.0]).is_err());
    }

    /// Two neighbors with A = [3, 1], α = [0.25, 0.75], slopes [1, 0.2] in
    /// the single output row, a = 1, g = 1, h̃_i = [1].
    fn two_neighbor_trace() -> (ForwardTrace, LayerParams) {
        let params = LayerParams::new(
            Matrix::zeros(1, 1),
            Matrix::zeros(1, 1),
            vec![1.0],
            vec![0.0],
            0.2,
        )
        .unwrap();
        let mut t = trace_with_a4(vec![vec![0.7], vec![-0.4]]);
        t.a3 = vec![vec![3.0], vec![1.0]];
        t.alpha = vec![0.25, 0.75];
        t.a5 = vec![vec![0.7], vec![-0.08]];
        (t, params)
    }

    #[test]
    fn pairwise_hand_value() {
        let (t, p) = two_neighbor_trace();
        let g = UpstreamGradient::uniform(1);
        let pair = grad_theta_r_pairwise(&t, &p, &g);
        assert!(close(pair[(0, 0)], 0.3));
        let sum = grad_theta_r_sum(&t, &p, &g);
        assert!(close(sum[(0, 0)], 0.3));
    }

    #[test]
    fn theta_r_vanishes_for_small_neighborhoods() {
        let (mut t, p) = two_neighbor_trace();
        let g = UpstreamGradient::uniform(1);
        t.a3.truncate(1);
        t.a4.truncate(1);
        t.a5.truncate(1);
        t.alpha = vec![1.0];
        t.neighbors.truncate(1);
        t.h_neighbors.truncate(1);
        assert!(grad_theta_r_sum(&t, &p, &g).is_zero());
        assert!(grad_theta_r_pairwise(&t, &p, &g).is_zero());
        assert_eq!(grad_a(&t, &p, &g), vec![0.0]);
    }

    #[test]
    fn uniform_slopes_kill_theta_r_rows() {
        let (mut t, p) = two_neighbor_trace();
        t.a4 = vec![vec![0.7], vec![0.4]];
        let g = UpstreamGradient::uniform(1);
        assert!(grad_theta_r_pairwise(&t, &p, &g).is_zero());
        assert!(grad_theta_r_sum(&t, &p, &g)[(0, 0)].abs() < 1e-15);
    }

    #[test]
    fn grad_b_is_identity() {
        let g = UpstreamGradient::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(grad_b(&g), vec![1.0, 2.0, 3.0]);
        assert_eq!(
            grad_b(&UpstreamGradient::new(vec![0.0; 2]).unwrap()),
            vec![0.0; 2]
        );
        assert!(UpstreamGradient::new(vec![f64::NAN]).is_err());
    }

    fn seeded(seed: u64) -> (LayerParams, Graph, FeatureMatrix) {
        random_instance(&InstanceSpec {
            num_nodes: 4,
            feature_dim: 2,
            out_dim: 3,
            min_degree: 2,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn zero_attention_vector_leaves_direct_path() {
        let (mut p, g, f) = seeded(7);
        p.a = vec![0.0; 3];
        let up = UpstreamGradient::new(vec![0.5, -1.0, 2.0]).unwrap();
        for i in 0..4 {
            let t = forward_with_trace(&p, &g, &f, i).unwrap();
            let n = t.num_neighbors() as f64;
            let gl = grad_theta_l(&t, &p, &up);
            for row in 0..3 {
                for m in 0..3 {
                    let mean: f64 = t.h_neighbors.iter().map(|h| h.as_slice()[m]).sum::<f64>() / n;
                    let want = up.as_slice()[row] * mean;
                    assert!((gl[(row, m)] - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn single_neighbor_theta_l_is_outer_product() {
        let (p, _, f) = seeded(3);
        let g = Graph::new(4, vec![(0, 2)]).unwrap();
        let t = forward_with_trace(&p, &g, &f, 0).unwrap();
        let up = UpstreamGradient::new(vec![1.0, -2.0, 0.5]).unwrap();
        let gl = grad_theta_l(&t, &p, &up);
        let h2 = f.augmented(2).unwrap();
        for row in 0..3 {
            for m in 0..3 {
                assert_eq!(gl[(row, m)], up.as_slice()[row] * h2.as_slice()[m]);
            }
        }
    }

    #[test]
    fn identical_neighbors_give_zero_attention_gradient() {
        let (p, _, _) = seeded(5);
        let f =
            FeatureMatrix::new(2, vec![vec![0.3, -1.0], vec![1.2, 0.4], vec![1.2, 0.4]]).unwrap();
        let g = Graph::new(3, vec![(0, 1), (0, 2)]).unwrap();
        let t = forward_with_trace(&p, &g, &f, 0).unwrap();
        let up = UpstreamGradient::new(vec![0.3, 1.0, -0.7]).unwrap();
        assert!(grad_a(&t, &p, &up).iter().all(|v| *v == 0.0));
        assert!(grad_theta_r_pairwise(&t, &p, &up).is_zero());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (p, g, f) = seeded(11);
        let up = UpstreamGradient::new(vec![0.0; 3]).unwrap();
        for i in 0..4 {
            let t = forward_with_trace(&p, &g, &f, i).unwrap();
            let grads = backward_chain(&t, &p, &up);
            for block in ParamBlock::ALL {
                assert!(grads.block(block).iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn chain_bias_is_upstream_bit_for_bit() {
        let (p, g, f) = seeded(13);
        let up = UpstreamGradient::new(vec![0.1 + 0.2, -1e-300, 7.25]).unwrap();
        let t = forward_with_trace(&p, &g, &f, 1).unwrap();
        let grads = backward_chain(&t, &p, &up);
        for (x, y) in grads.d_b.iter().zip(up.as_slice()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn closed_forms_match_chain_under_constant_upstream() {
        for seed in 0..10 {
            let (p, g, f) = seeded(seed);
            for up in [
                UpstreamGradient::uniform(3),
                UpstreamGradient::new(vec![-2.5; 3]).unwrap(),
            ] {
                for i in 0..4 {
                    let t = forward_with_trace(&p, &g, &f, i).unwrap();
                    let chain = backward_chain(&t, &p, &up);
                    let closed = closed_form_gradients(&t, &p, &up);
                    for block in ParamBlock::ALL {
                        let (err, _) = max_rel_err(chain.block(block), closed.block(block));
                        assert!(err <= 1e-10, "seed {seed} node {i} {block:?}: {err}");
                    }
                }
            }
        }
    }

    #[test]
    fn rel_err_metric() {
        assert_eq!(rel_err(3.0, 3.0), 0.0);
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(100.0, 101.0) - 1.0 / 101.0).abs() < 1e-15);
        assert!((rel_err(1e-9, 0.0) - 1e-9).abs() < 1e-24);
        let (e, k) = max_rel_err(&[1.0, 2.0, 3.0], &[1.0, 2.5, 3.0]);
        assert_eq!(k, 1);
        assert!((e - 0.2).abs() < 1e-15);
    }
}
