//! Central finite-difference gradient oracle.
//!
//! The oracle only ever calls the forward pass: it perturbs raw parameter
//! storage (bias columns included), re-runs [`forward_with_trace`] and
//! differentiates the scalar loss numerically. It shares no code with the
//! analytic backward passes.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{rel_err, GradientSet, UpstreamGradient};
use crate::error::{check_finite, check_len, GatError, Result};
use crate::graph::{FeatureMatrix, Graph};
use crate::layer::{forward_with_trace, LayerParams, ParamBlock};
use crate::linalg::dot;

/// Scalar loss on the layer output.
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    /// `g · h'`; its upstream gradient is `g` itself.
    Dot(Vec<f64>),
    /// `½‖h' − y‖²`.
    SquaredError(Vec<f64>),
}

impl LossSpec {
    /// `Dot` with the all-ones vector.
    pub fn uniform(d: usize) -> Self {
        Self::Dot(vec![1.0; d])
    }

    pub fn vector(&self) -> &[f64] {
        match self {
            Self::Dot(v) | Self::SquaredError(v) => v,
        }
    }

    pub fn mode(&self) -> &'static str {
        match self {
            Self::Dot(_) => "dot",
            Self::SquaredError(_) => "squared_error",
        }
    }
}

/// Loss value and `∂L/∂h'` at `h_out`.
pub fn loss(h_out: &[f64], spec: &LossSpec) -> Result<(f64, UpstreamGradient)> {
    check_len("loss vector", h_out.len(), spec.vector().len())?;
    check_finite("loss vector", spec.vector())?;
    match spec {
        LossSpec::Dot(g) => Ok((dot(g, h_out), UpstreamGradient::new(g.clone())?)),
        LossSpec::SquaredError(y) => {
            let residual: Vec<f64> = h_out.iter().zip(y).map(|(h, t)| h - t).collect();
            let value = 0.5 * dot(&residual, &residual);
            Ok((value, UpstreamGradient::new(residual)?))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Pre-activations closer than this to zero mark an entry as kinked.
    pub kink_guard: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-6,
            kink_guard: 1e-4,
        }
    }
}

impl FdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step < 1.0) {
            return Err(GatError::InvalidConfig(format!(
                "finite-difference step {} must lie in (0, 1)",
                self.step
            )));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(GatError::InvalidConfig(format!(
                "tolerance {} must be positive",
                self.tolerance
            )));
        }
        if self.kink_guard.is_nan() || self.kink_guard < 0.0 {
            return Err(GatError::InvalidConfig(format!(
                "kink guard {} must be non-negative",
                self.kink_guard
            )));
        }
        Ok(())
    }
}

/// Numerical gradient plus the flat offsets of entries whose perturbation
/// touches a LeakyReLU kink.
#[derive(Debug, Clone, PartialEq)]
pub struct FdGradient {
    pub gradient: GradientSet,
    pub kink_flagged: BTreeMap<ParamBlock, Vec<usize>>,
}

impl FdGradient {
    pub fn flagged(&self, block: ParamBlock) -> &[usize] {
        self.kink_flagged
            .get(&block)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

struct Probe {
    loss: f64,
    a4: Vec<Vec<f64>>,
}

fn probe(
    params: &LayerParams,
    graph: &Graph,
    features: &FeatureMatrix,
    i: usize,
    spec: &LossSpec,
) -> Result<Probe> {
    let trace = forward_with_trace(params, graph, features, i)?;
    let (value, _) = loss(&trace.h_out, spec)?;
    Ok(Probe {
        loss: value,
        a4: trace.a4,
    })
}

/// True when some pre-activation moved by the perturbation sits within
/// `guard` of zero or changes branch across the three evaluations.
fn crosses_kink(base: &[Vec<f64>], plus: &[Vec<f64>], minus: &[Vec<f64>], guard: f64) -> bool {
    let flat = |v: &[Vec<f64>]| v.iter().flatten().copied().collect::<Vec<_>>();
    let (b, p, m) = (flat(base), flat(plus), flat(minus));
    b.iter().zip(&p).zip(&m).any(|((&x0, &xp), &xm)| {
        if x0 == xp && x0 == xm {
            return false;
        }
        let near = x0.abs().min(xp.abs()).min(xm.abs()) < guard;
        let branch_change = (x0 > 0.0) != (xp > 0.0) || (x0 > 0.0) != (xm > 0.0);
        near || branch_change
    })
}

/// `(L(θ + ε) − L(θ − ε)) / 2ε` for every scalar parameter entry.
pub fn fd_gradient(
    params: &LayerParams,
    graph: &Graph,
    features: &FeatureMatrix,
    i: usize,
    spec: &LossSpec,
    config: &FdConfig,
) -> Result<FdGradient> {
    config.validate()?;
    let base = probe(params, graph, features, i, spec)?;
    let eps = config.step;
    let mut gradient = GradientSet::zeros_like(params);
    let mut kink_flagged = BTreeMap::new();

    for block in ParamBlock::ALL {
        let len = params.block(block).len();
        let results = (0..len)
            .into_par_iter()
            .map(|k| {
                let eval = |delta: f64| {
                    let mut shifted = params.clone();
                    shifted.block_mut(block)[k] += delta;
                    let out = probe(&shifted, graph, features, i, spec)?;
                    if out.loss.is_finite() {
                        Ok(out)
                    } else {
                        Err(GatError::NonFiniteLoss {
                            param: block.name(),
                            index: block.index_of(k, params.theta_r.cols()),
                        })
                    }
                };
                let plus = eval(eps)?;
                let minus = eval(-eps)?;
                let derivative = (plus.loss - minus.loss) / (2.0 * eps);
                let kinked = crosses_kink(&base.a4, &plus.a4, &minus.a4, config.kink_guard);
                Ok((derivative, kinked))
            })
            .collect::<Result<Vec<_>>>()?;

        let out = gradient.block_mut(block);
        let mut flagged = Vec::new();
        for (k, (derivative, kinked)) in results.into_iter().enumerate() {
            out[k] = derivative;
            if kinked {
                flagged.push(k);
            }
        }
        kink_flagged.insert(block, flagged);
    }
    Ok(FdGradient {
        gradient,
        kink_flagged,
    })
}

/// Comparison result for one parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub kink_flagged: Vec<Vec<usize>>,
    /// Number of entries that entered the verdict.
    pub checked: usize,
    pub worst_index: Option<Vec<usize>>,
    pub failing: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    #[serde(rename = "theta_R")]
    pub theta_r: BlockReport,
    #[serde(rename = "theta_L")]
    pub theta_l: BlockReport,
    pub a: BlockReport,
    pub b: BlockReport,
    pub step: f64,
    pub tolerance: f64,
    pub seed: Option<u64>,
}

impl GradCheckReport {
    pub fn block(&self, block: ParamBlock) -> &BlockReport {
        match block {
            ParamBlock::ThetaR => &self.theta_r,
            ParamBlock::ThetaL => &self.theta_l,
            ParamBlock::A => &self.a,
            ParamBlock::B => &self.b,
        }
    }

    pub fn passed(&self) -> bool {
        ParamBlock::ALL.iter().all(|&b| self.block(b).pass)
    }

    /// Largest relative error across all blocks with its block and index.
    pub fn worst(&self) -> Option<(&'static str, Vec<usize>, f64)> {
        ParamBlock::ALL
            .iter()
            .filter_map(|&b| {
                let r = self.block(b);
                r.worst_index
                    .clone()
                    .map(|idx| (b.name(), idx, r.max_rel_err))
            })
            .fold(None, |best, cur| match best {
                Some(ref b) if b.2 >= cur.2 => best,
                _ => Some(cur),
            })
    }
}

fn compare_block(
    analytic: &[f64],
    numeric: &[f64],
    flagged: &[usize],
    block: ParamBlock,
    cols: usize,
    tolerance: f64,
) -> BlockReport {
    let mut max_rel_err = 0.0;
    let mut worst = None;
    let mut failing = Vec::new();
    let mut checked = 0;
    for (k, (x, y)) in analytic.iter().zip(numeric).enumerate() {
        if flagged.contains(&k) {
            continue;
        }
        checked += 1;
        let err = rel_err(*x, *y);
        if err > tolerance || err.is_nan() {
            failing.push(block.index_of(k, cols));
        }
        if err > max_rel_err || (err.is_nan() && !max_rel_err.is_nan()) || worst.is_none() {
            max_rel_err = err;
            worst = Some(k);
        }
    }
    BlockReport {
        max_rel_err,
        pass: failing.is_empty(),
        kink_flagged: flagged.iter().map(|&k| block.index_of(k, cols)).collect(),
        checked,
        worst_index: worst.map(|k| block.index_of(k, cols)),
        failing,
    }
}

/// Entry-wise comparison of an analytic gradient with the oracle. Kinked
/// entries are listed but left out of the verdict.
pub fn compare(analytic: &GradientSet, numeric: &FdGradient, config: &FdConfig) -> GradCheckReport {
    let cols = analytic.d_theta_r.cols();
    let report = |block| {
        compare_block(
            analytic.block(block),
            numeric.gradient.block(block),
            numeric.flagged(block),
            block,
            cols,
            config.tolerance,
        )
    };
    GradCheckReport {
        theta_r: report(ParamBlock::ThetaR),
        theta_l: report(ParamBlock::ThetaL),
        a: report(ParamBlock::A),
        b: report(ParamBlock::B),
        step: config.step,
        tolerance: config.tolerance,
        seed: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::backward_chain;
    use crate::generate::{random_instance, InstanceSpec};
    use crate::linalg::Matrix;

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
    fn loss_examples() {
        let (v, g) = loss(&[2.0, 3.0], &LossSpec::uniform(2)).unwrap();
        assert_eq!(v, 5.0);
        assert_eq!(g.as_slice(), &[1.0, 1.0]);

        let (v, g) = loss(&[1.5, -2.0], &LossSpec::SquaredError(vec![1.5, -2.0])).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g.as_slice(), &[0.0, 0.0]);

        let (v, g) = loss(&[1.0, 0.0], &LossSpec::SquaredError(vec![0.0, 0.0])).unwrap();
        assert_eq!(v, 0.5);
        assert_eq!(g.as_slice(), &[1.0, 0.0]);

        assert!(loss(&[1.0], &LossSpec::uniform(2)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(FdConfig::default().validate().is_ok());
        for step in [0.0, 1.0, -1e-5, f64::NAN] {
            assert!(FdConfig {
                step,
                ..Default::default()
            }
            .validate()
            .is_err());
        }
        assert!(FdConfig {
            tolerance: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn bias_derivative_is_upstream() {
        let (p, g, f) = seeded(7);
        let spec = LossSpec::Dot(vec![0.5, -1.25, 2.0]);
        let fd = fd_gradient(&p, &g, &f, 0, &spec, &FdConfig::default()).unwrap();
        for (x, y) in fd.gradient.d_b.iter().zip(spec.vector()) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!(fd.flagged(ParamBlock::B).is_empty());
        assert!(fd.flagged(ParamBlock::A).is_empty());
    }

    #[test]
    fn single_neighbor_theta_r_is_flat() {
        let (p, _, f) = seeded(7);
        let g = Graph::new(4, vec![(0, 3)]).unwrap();
        let fd = fd_gradient(&p, &g, &f, 0, &LossSpec::uniform(3), &FdConfig::default()).unwrap();
        assert!(fd
            .gradient
            .d_theta_r
            .as_slice()
            .iter()
            .all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let (p, g, f) = seeded(21);
        let spec = LossSpec::SquaredError(vec![0.1, 0.2, 0.3]);
        let one = fd_gradient(&p, &g, &f, 2, &spec, &FdConfig::default()).unwrap();
        let two = fd_gradient(&p, &g, &f, 2, &spec, &FdConfig::default()).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn kink_entries_are_flagged() {
        // One output row, one neighbor whose pre-activation is ~1e-6.
        let p = LayerParams::new(
            Matrix::from_rows(&[vec![1e-6, 0.0]]).unwrap(),
            Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap(),
            vec![1.0],
            vec![0.0],
            0.2,
        )
        .unwrap();
        let g = Graph::new(3, vec![(0, 1), (0, 2)]).unwrap();
        let f = FeatureMatrix::new(1, vec![vec![0.5], vec![1.0], vec![2.0]]).unwrap();
        let fd = fd_gradient(&p, &g, &f, 0, &LossSpec::uniform(1), &FdConfig::default()).unwrap();
        assert_eq!(fd.flagged(ParamBlock::ThetaR), &[0, 1]);
        assert_eq!(fd.flagged(ParamBlock::ThetaL), &[0, 1]);
        assert!(fd.flagged(ParamBlock::A).is_empty());

        let analytic = {
            let t = forward_with_trace(&p, &g, &f, 0).unwrap();
            backward_chain(&t, &p, &UpstreamGradient::uniform(1))
        };
        let report = compare(&analytic, &fd, &FdConfig::default());
        assert_eq!(report.theta_r.checked, 0);
        assert_eq!(report.theta_r.kink_flagged, vec![vec![0, 0], vec![0, 1]]);
        assert!(report.passed());
    }

    #[test]
    fn compare_identical_passes() {
        let (p, g, f) = seeded(2);
        let fd = fd_gradient(&p, &g, &f, 1, &LossSpec::uniform(3), &FdConfig::default()).unwrap();
        let report = compare(&fd.gradient, &fd, &FdConfig::default());
        assert!(report.passed());
        for block in ParamBlock::ALL {
            assert_eq!(report.block(block).max_rel_err, 0.0);
        }
    }

    #[test]
    fn compare_names_failing_entry() {
        let (p, g, f) = seeded(2);
        let fd = fd_gradient(&p, &g, &f, 1, &LossSpec::uniform(3), &FdConfig::default()).unwrap();
        let mut analytic = fd.gradient.clone();
        analytic.d_theta_l[(2, 1)] += 1e-3;
        let report = compare(&analytic, &fd, &FdConfig::default());
        assert!(!report.passed());
        assert!(!report.theta_l.pass);
        assert_eq!(report.theta_l.failing, vec![vec![2, 1]]);
        assert_eq!(report.theta_l.worst_index, Some(vec![2, 1]));
        let (name, idx, _) = report.worst().unwrap();
        assert_eq!((name, idx), ("theta_L", vec![2, 1]));
        assert!(report.theta_r.pass && report.a.pass && report.b.pass);
    }

    #[test]
    fn seeded_end_to_end_passes() {
        let (p, g, f) = seeded(7);
        let spec = LossSpec::uniform(3);
        for i in 0..4 {
            let t = forward_with_trace(&p, &g, &f, i).unwrap();
            let (_, up) = loss(&t.h_out, &spec).unwrap();
            let fd = fd_gradient(&p, &g, &f, i, &spec, &FdConfig::default()).unwrap();
            let report = compare(&backward_chain(&t, &p, &up), &fd, &FdConfig::default());
            assert!(report.passed(), "node {i}: {report:?}");
        }
    }

    #[test]
    fn report_json_layout() {
        let (p, g, f) = seeded(2);
        let fd = fd_gradient(&p, &g, &f, 1, &LossSpec::uniform(3), &FdConfig::default()).unwrap();
        let mut report = compare(&fd.gradient, &fd, &FdConfig::default());
        report.seed = Some(5);
        let v = serde_json::to_value(&report).unwrap();
        for key in ["theta_R", "theta_L", "a", "b"] {
            assert!(v[key]["max_rel_err"].is_number());
            assert!(v[key]["pass"].is_boolean());
            assert!(v[key]["kink_flagged"].is_array());
        }
        assert_eq!(v["step"], 1e-5);
        assert_eq!(v["tolerance"], 1e-6);
        assert_eq!(v["seed"], 5);
    }
}
