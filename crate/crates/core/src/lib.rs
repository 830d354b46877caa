//! Design-based estimation of average treatment effects under network
//! interference.
//!
//! Outcomes follow the heterogeneous additive treatment effect model
//! `Y_i = α_i + θ_i Z_i + Σ_j γ̃_ij Z_j` with Bernoulli assignment. Besides
//! the Horvitz–Thompson estimators and their eigenvector-adjusted variants,
//! the crate ships exact enumeration oracles for small populations and a
//! Monte Carlo harness.

pub mod adjustment;
pub mod cli;
pub mod design;
pub mod estimators;
pub mod generators;
pub mod graph;
pub mod hate_model;
pub mod io;
pub mod montecarlo;
pub mod oracle;
pub mod variance;

pub use adjustment::{ArmRegression, Covariates, SpectralBasis};
pub use design::{Assignment, Design};
pub use graph::{DirectedGraph, HiddenNetwork, NormalizedLatent};
pub use hate_model::{Estimands, HateParameters};
pub use variance::{Estimand, EstimateReport};
