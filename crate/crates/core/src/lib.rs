//! Counterfactual preference optimization for a small autoregressive
//! reasoning policy.
//!
//! The crate covers the full desk-scale pipeline: a triadic concept graph,
//! counterfactual chain-of-thought synthesis, a k-gram MLP policy with exact
//! gradients, the Bradley-Terry preference objective against a frozen
//! reference, drift monitoring over thinking streams, and evaluation metrics.

pub mod concept_graph;
pub mod trajectory;
pub mod policy;
pub mod gradcheck;
pub mod cpo;
pub mod counterfactual;
pub mod eval_metrics;
pub mod corpus;
pub mod drift;
