//! Command-line front end: `gen`, `forward`, `gradcheck`, `diagnose`.
//!
//! Every command is a pure function of its flags, input files and seed.
//! Per-node work may run in parallel; results are collected in node order and
//! written once.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::analytic::{
    backward_chain, closed_form_gradients, grad_theta_l, grad_theta_r_sum, max_rel_err,
};
use crate::diagnostics::diagnose;
use crate::generate::{random_instance, InstanceSpec};
use crate::graph::{FeatureMatrix, Graph, GraphFile};
use crate::layer::{forward_with_trace, LayerParams};
use crate::oracle::{compare, fd_gradient, loss, FdConfig, GradCheckReport, LossSpec};

#[derive(Debug, Parser)]
#[command(
    name = "gatgrad",
    version,
    about = "GATv2 layer gradients and gradient checks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded random graph and parameter file.
    Gen(GenArgs),
    /// Evaluate the layer and write per-node attention and outputs.
    Forward(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(CheckArgs),
    /// Report dead Θ_R rows, attention entropy and closed-form gaps.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub nodes: usize,
    #[arg(long = "feature-dim")]
    pub feature_dim: usize,
    #[arg(long = "out-dim")]
    pub out_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "min-degree", default_value_t = 2)]
    pub min_degree: usize,
    /// Destination of the graph file.
    #[arg(long)]
    pub graph: PathBuf,
    /// Destination of the parameter file.
    #[arg(long)]
    pub params: PathBuf,
}

#[derive(Debug, Args)]
pub struct NodeSelector {
    #[arg(long, conflicts_with = "all_nodes")]
    pub node: Option<usize>,
    #[arg(long = "all-nodes")]
    pub all_nodes: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub nodes: NodeSelector,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// uniform | random | file:PATH
    #[arg(long, default_value = "uniform")]
    pub upstream: UpstreamMode,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "uniform")]
    pub upstream: UpstreamMode,
}

#[derive(Debug, Clone, PartialEq)]
pub enum UpstreamMode {
    Uniform,
    Random,
    File(PathBuf),
}

impl FromStr for UpstreamMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "random" => Ok(Self::Random),
            _ => match s.strip_prefix("file:") {
                Some(path) if !path.is_empty() => Ok(Self::File(PathBuf::from(path))),
                _ => Err(format!(
                    "unknown upstream mode {s:?} (expected uniform, random or file:PATH)"
                )),
            },
        }
    }
}

impl UpstreamMode {
    fn label(&self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::Random => "random",
            Self::File(_) => "file",
        }
    }
}

/// Resolves the upstream gradient `∂L/∂h'` for every node.
struct UpstreamSource {
    mode: UpstreamMode,
    seed: u64,
    fixed: Option<Vec<f64>>,
    dim: usize,
}

impl UpstreamSource {
    fn new(mode: &UpstreamMode, seed: u64, dim: usize) -> anyhow::Result<Self> {
        let fixed = match mode {
            UpstreamMode::Uniform => Some(vec![1.0; dim]),
            UpstreamMode::Random => None,
            UpstreamMode::File(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading upstream gradient {}", path.display()))?;
                let g: Vec<f64> = serde_json::from_str(&text)
                    .with_context(|| format!("parsing upstream gradient {}", path.display()))?;
                if g.len() != dim {
                    bail!("upstream gradient has length {}, expected {dim}", g.len());
                }
                if g.iter().any(|v| !v.is_finite()) {
                    bail!("upstream gradient contains non-finite entries");
                }
                Some(g)
            }
        };
        Ok(Self {
            mode: mode.clone(),
            seed,
            fixed,
            dim,
        })
    }

    /// Standard-normal draws on a per-node stream of the seeded generator.
    fn for_node(&self, node: usize) -> Vec<f64> {
        match &self.fixed {
            Some(g) => g.clone(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(node as u64);
                (0..self.dim).map(|_| rng.sample(StandardNormal)).collect()
            }
        }
    }
}

/// Outcome of a successful run; errors map to exit code 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    CheckFailed,
}

pub fn run(cli: &Cli) -> anyhow::Result<Outcome> {
    match &cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Forward(args) => cmd_forward(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Diagnose(args) => cmd_diagnose(args),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_inputs(args: &EvalArgs) -> anyhow::Result<(LayerParams, Graph, FeatureMatrix)> {
    let (graph, features) = GraphFile::load(&args.graph)
        .with_context(|| format!("loading graph {}", args.graph.display()))?;
    let params = LayerParams::load(&args.params)
        .with_context(|| format!("loading params {}", args.params.display()))?;
    if features.dim() != params.in_dim() {
        bail!(
            "feature dimension {} does not match parameter input dimension {}",
            features.dim(),
            params.in_dim()
        );
    }
    Ok((params, graph, features))
}

/// `--node` picks one node, `--all-nodes` every node, neither falls back to
/// `default`.
fn select_nodes(
    sel: &NodeSelector,
    graph: &Graph,
    default: impl FnOnce(&Graph) -> Vec<usize>,
) -> anyhow::Result<Vec<usize>> {
    match sel.node {
        Some(i) if i >= graph.num_nodes() => Err(anyhow!(
            "node {i} out of range for graph with {} nodes",
            graph.num_nodes()
        )),
        Some(i) => Ok(vec![i]),
        None if sel.all_nodes => Ok((0..graph.num_nodes()).collect()),
        None => Ok(default(graph)),
    }
}

fn all_nodes(graph: &Graph) -> Vec<usize> {
    (0..graph.num_nodes()).collect()
}

pub fn cmd_gen(args: &GenArgs) -> anyhow::Result<Outcome> {
    if args.nodes == 0 || args.out_dim == 0 {
        bail!("--nodes and --out-dim must be positive");
    }
    let spec = InstanceSpec {
        num_nodes: args.nodes,
        feature_dim: args.feature_dim,
        out_dim: args.out_dim,
        min_degree: args.min_degree,
        seed: args.seed,
    };
    let (params, graph, features) = random_instance(&spec)?;
    GraphFile::from_parts(&graph, &features).save(&args.graph)?;
    params.save(&args.params)?;

    // Self-check: the files load back to the same instance and evaluate.
    let (g2, f2) = GraphFile::load(&args.graph)?;
    let p2 = LayerParams::load(&args.params)?;
    if g2 != graph || f2 != features || p2 != params {
        bail!("generated files do not round-trip");
    }
    for i in 0..graph.num_nodes() {
        forward_with_trace(&p2, &g2, &f2, i)?;
    }
    Ok(Outcome::Pass)
}

#[derive(Debug, Serialize)]
struct ForwardNode {
    node: usize,
    #[serde(rename = "N")]
    n: usize,
    neighbors: Vec<usize>,
    alpha: Vec<f64>,
    h_out: Vec<f64>,
}

pub fn cmd_forward(args: &EvalArgs) -> anyhow::Result<Outcome> {
    let (params, graph, features) = load_inputs(args)?;
    let nodes = select_nodes(&args.nodes, &graph, all_nodes)?;
    let out = nodes
        .par_iter()
        .map(|&i| {
            let t = forward_with_trace(&params, &graph, &features, i)?;
            Ok(ForwardNode {
                node: i,
                n: t.num_neighbors(),
                neighbors: t.neighbors,
                alpha: t.alpha,
                h_out: t.h_out,
            })
        })
        .collect::<crate::Result<Vec<_>>>()?;
    write_json(&args.out, &out)?;
    Ok(Outcome::Pass)
}

#[derive(Debug, Serialize)]
struct NodeCheck {
    node: usize,
    #[serde(rename = "N")]
    n: usize,
    upstream: Vec<f64>,
    /// Exact chain-rule gradients against the oracle.
    chain: GradCheckReport,
    /// Closed forms against the oracle; only meaningful for a constant
    /// upstream gradient, `null` otherwise.
    closed_form: Option<GradCheckReport>,
    /// Largest relative gap between the closed forms and the chain rule.
    closed_form_gap: f64,
    pass: bool,
}

#[derive(Debug, Serialize)]
struct Worst {
    node: usize,
    source: &'static str,
    param: &'static str,
    index: Vec<usize>,
    rel_err: f64,
}

#[derive(Debug, Serialize)]
struct CheckFile {
    step: f64,
    tolerance: f64,
    seed: u64,
    upstream_mode: &'static str,
    pass: bool,
    worst: Option<Worst>,
    nodes: Vec<NodeCheck>,
}

fn check_node(
    params: &LayerParams,
    graph: &Graph,
    features: &FeatureMatrix,
    i: usize,
    g: Vec<f64>,
    config: &FdConfig,
    seed: u64,
) -> crate::Result<NodeCheck> {
    let spec = LossSpec::Dot(g.clone());
    let trace = forward_with_trace(params, graph, features, i)?;
    let (_, upstream) = loss(&trace.h_out, &spec)?;
    let numeric = fd_gradient(params, graph, features, i, &spec, config)?;

    let mut chain = compare(&backward_chain(&trace, params, &upstream), &numeric, config);
    chain.seed = Some(seed);

    let exact = backward_chain(&trace, params, &upstream);
    let closed_form_gap = [
        max_rel_err(
            exact.d_theta_r.as_slice(),
            grad_theta_r_sum(&trace, params, &upstream).as_slice(),
        )
        .0,
        max_rel_err(
            exact.d_theta_l.as_slice(),
            grad_theta_l(&trace, params, &upstream).as_slice(),
        )
        .0,
    ]
    .into_iter()
    .fold(0.0, f64::max);

    let closed_form = upstream.is_constant().then(|| {
        let mut r = compare(
            &closed_form_gradients(&trace, params, &upstream),
            &numeric,
            config,
        );
        r.seed = Some(seed);
        r
    });
    let pass = chain.passed() && closed_form.as_ref().is_none_or(GradCheckReport::passed);
    Ok(NodeCheck {
        node: i,
        n: trace.num_neighbors(),
        upstream: g,
        chain,
        closed_form,
        closed_form_gap,
        pass,
    })
}

fn worst_entry(nodes: &[NodeCheck]) -> Option<Worst> {
    let mut best: Option<Worst> = None;
    for node in nodes {
        let reports = std::iter::once(("chain", &node.chain))
            .chain(node.closed_form.as_ref().map(|r| ("closed_form", r)));
        for (source, report) in reports {
            if let Some((param, index, rel_err)) = report.worst() {
                if best.as_ref().is_none_or(|b| rel_err > b.rel_err) {
                    best = Some(Worst {
                        node: node.node,
                        source,
                        param,
                        index,
                        rel_err,
                    });
                }
            }
        }
    }
    best
}

pub fn cmd_gradcheck(args: &CheckArgs) -> anyhow::Result<Outcome> {
    let (params, graph, features) = load_inputs(&args.eval)?;
    let defaults = FdConfig::default();
    let config = FdConfig {
        step: args.step.unwrap_or(defaults.step),
        tolerance: args.tol.unwrap_or(defaults.tolerance),
        ..defaults
    };
    config.validate()?;
    let nodes = select_nodes(&args.eval.nodes, &graph, all_nodes)?;
    let source = UpstreamSource::new(&args.upstream, args.seed, params.out_dim())?;

    let checks = nodes
        .par_iter()
        .map(|&i| {
            check_node(
                &params,
                &graph,
                &features,
                i,
                source.for_node(i),
                &config,
                args.seed,
            )
        })
        .collect::<crate::Result<Vec<_>>>()?;

    let pass = checks.iter().all(|c| c.pass);
    let file = CheckFile {
        step: config.step,
        tolerance: config.tolerance,
        seed: args.seed,
        upstream_mode: source.mode.label(),
        pass,
        worst: worst_entry(&checks),
        nodes: checks,
    };
    write_json(&args.eval.out, &file)?;
    if !pass {
        if let Some(w) = &file.worst {
            eprintln!(
                "gradient check failed: node {} {} {}{:?} rel_err {:e}",
                w.node, w.source, w.param, w.index, w.rel_err
            );
        }
    }
    Ok(if pass {
        Outcome::Pass
    } else {
        Outcome::CheckFailed
    })
}

pub fn cmd_diagnose(args: &DiagnoseArgs) -> anyhow::Result<Outcome> {
    let (params, graph, features) = load_inputs(&args.eval)?;
    let nodes = select_nodes(&args.eval.nodes, &graph, |g| {
        (0..g.num_nodes())
            .filter(|&i| g.degree(i).is_ok_and(|n| n >= 1))
            .collect()
    })?;
    let source = UpstreamSource::new(&args.upstream, args.seed, params.out_dim())?;
    let mut merged = Vec::with_capacity(nodes.len());
    for &i in &nodes {
        let spec = LossSpec::Dot(source.for_node(i));
        merged.extend(diagnose(&params, &graph, &features, Some(&[i]), &spec)?.nodes);
    }
    write_json(&args.eval.out, &merged)?;
    Ok(Outcome::Pass)
}
