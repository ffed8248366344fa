//! Single-layer GATv2: forward pass, hand-derived gradients, a
//! finite-difference oracle to check them, and diagnostics for the gradient
//! pathologies the closed forms expose.
//!
//! ```
//! use gatgrad::analytic::{backward_chain, UpstreamGradient};
//! use gatgrad::generate::{random_instance, InstanceSpec};
//! use gatgrad::layer::forward_with_trace;
//!
//! let spec = InstanceSpec { num_nodes: 5, feature_dim: 3, out_dim: 4, min_degree: 2, seed: 42 };
//! let (params, graph, features) = random_instance(&spec).unwrap();
//! let trace = forward_with_trace(&params, &graph, &features, 0).unwrap();
//! let grads = backward_chain(&trace, &params, &UpstreamGradient::uniform(4));
//! assert_eq!(grads.d_b, vec![1.0; 4]);
//! ```

pub mod analytic;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod generate;
pub mod graph;
pub mod layer;
pub mod linalg;
pub mod oracle;

pub use error::{GatError, Result};
