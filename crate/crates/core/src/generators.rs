//! Scenario constructors: structured graphs, graphon random graphs, hidden
//! network thinning and parameter draws.

use std::path::PathBuf;

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::Design;
use crate::graph::{DirectedGraph, HiddenNetwork};
use crate::hate_model::HateParameters;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeneratorError {
    #[error("{count} groups cannot be split evenly into {strata} strata")]
    UnevenStrata { count: usize, strata: usize },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// Complete directed graphs on `clusters` disjoint groups of `cluster_size`
/// units; unit `i` belongs to group `i / cluster_size`.
pub fn partial_interference_graph(cluster_size: usize, clusters: usize) -> DirectedGraph {
    let n = cluster_size * clusters;
    let mut edges = Vec::with_capacity(n * cluster_size.saturating_sub(1));
    for c in 0..clusters {
        let base = c * cluster_size;
        for a in 0..cluster_size {
            for b in 0..cluster_size {
                if a != b {
                    edges.push((base + a, base + b));
                }
            }
        }
    }
    DirectedGraph::from_edge_list(&edges, n).expect("block edges are valid")
}

/// Group label of every unit in a partial-interference graph.
pub fn cluster_labels(cluster_size: usize, clusters: usize) -> Vec<usize> {
    (0..cluster_size * clusters)
        .map(|i| i / cluster_size)
        .collect()
}

/// Buyer (row) and seller (column) of unit `i`: `(i / sellers, i % sellers)`.
pub fn marketplace_position(i: usize, sellers: usize) -> (usize, usize) {
    (i / sellers, i % sellers)
}

/// Units sharing a buyer or a seller interfere with each other.
pub fn marketplace_graph(buyers: usize, sellers: usize) -> DirectedGraph {
    let n = buyers * sellers;
    let mut edges = Vec::with_capacity(n * (buyers + sellers).saturating_sub(2));
    for i in 0..n {
        let (r, c) = marketplace_position(i, sellers);
        for c2 in 0..sellers {
            if c2 != c {
                edges.push((i, r * sellers + c2));
            }
        }
        for r2 in 0..buyers {
            if r2 != r {
                edges.push((i, r2 * sellers + c));
            }
        }
    }
    DirectedGraph::from_edge_list(&edges, n).expect("marketplace edges are valid")
}

/// Eigenfunction of a low-rank graphon on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Eigenfunction {
    /// `ψ ≡ 1`.
    Constant,
    /// Piecewise constant: `values[k]` on `[breaks[k-1], breaks[k])`.
    Step { breaks: Vec<f64>, values: Vec<f64> },
    /// `√2 cos(frequency · π u)`.
    Cosine { frequency: u32 },
}

impl Eigenfunction {
    pub fn eval(&self, u: f64) -> f64 {
        match self {
            Eigenfunction::Constant => 1.0,
            Eigenfunction::Step { breaks, values } => {
                let k = breaks.partition_point(|&b| b <= u);
                values[k]
            }
            Eigenfunction::Cosine { frequency } => {
                std::f64::consts::SQRT_2 * (*frequency as f64 * std::f64::consts::PI * u).cos()
            }
        }
    }

    fn validate(&self) -> Result<(), GeneratorError> {
        if let Eigenfunction::Step { breaks, values } = self {
            if values.len() != breaks.len() + 1 {
                return Err(GeneratorError::Invalid(
                    "step eigenfunction needs one more value than breaks".into(),
                ));
            }
            if breaks.windows(2).any(|w| w[0] >= w[1])
                || breaks.iter().any(|&b| !(0.0..=1.0).contains(&b))
            {
                return Err(GeneratorError::Invalid(
                    "step breaks must increase inside [0, 1]".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One term `λ ψ(u) ψ(v)` of a low-rank graphon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphonTerm {
    pub lambda: f64,
    pub psi: Eigenfunction,
}

/// `G(u, v) = Σ_k λ_k ψ_k(u) ψ_k(v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graphon {
    pub terms: Vec<GraphonTerm>,
}

impl Graphon {
    pub fn eval(&self, u: f64, v: f64) -> f64 {
        self.terms
            .iter()
            .map(|t| t.lambda * t.psi.eval(u) * t.psi.eval(v))
            .sum()
    }

    /// Stochastic block model with equal-width blocks: `p_in` within a
    /// block and `p_out` across blocks (before scaling by `ρ*`).
    pub fn equal_blocks(blocks: usize, p_in: f64, p_out: f64) -> Self {
        let mut terms = vec![GraphonTerm {
            lambda: p_out,
            psi: Eigenfunction::Constant,
        }];
        let breaks: Vec<f64> = (1..blocks).map(|b| b as f64 / blocks as f64).collect();
        let scale = (blocks as f64).sqrt();
        for b in 0..blocks {
            let values = (0..blocks)
                .map(|k| if k == b { scale } else { 0.0 })
                .collect();
            terms.push(GraphonTerm {
                lambda: (p_in - p_out) / blocks as f64,
                psi: Eigenfunction::Step {
                    breaks: breaks.clone(),
                    values,
                },
            });
        }
        Graphon { terms }
    }

    fn validate(&self) -> Result<(), GeneratorError> {
        if self.terms.is_empty() {
            return Err(GeneratorError::Invalid(
                "graphon needs at least one term".into(),
            ));
        }
        self.terms.iter().try_for_each(|t| t.psi.validate())
    }
}

/// A sampled graphon graph with the latent positions used to draw it.
#[derive(Debug, Clone)]
pub struct GraphonSample {
    pub graph: DirectedGraph,
    pub positions: Vec<f64>,
    /// Pairs where `G` was negative and the probability was clamped to 0.
    pub clamped: usize,
}

/// Symmetric graph with `E_ij = E_ji ~ Bernoulli(min{1, ρ* G(U_i, U_j)})`.
pub fn graphon_graph<R: Rng + ?Sized>(
    n: usize,
    rho_star: f64,
    graphon: &Graphon,
    rng: &mut R,
) -> Result<GraphonSample, GeneratorError> {
    if !(0.0..=1.0).contains(&rho_star) {
        return Err(GeneratorError::Invalid(format!(
            "rho_star {rho_star} outside [0, 1]"
        )));
    }
    graphon.validate()?;
    let positions: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let mut edges = Vec::new();
    let mut clamped = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            let g = graphon.eval(positions[i], positions[j]);
            if g < 0.0 {
                clamped += 1;
            }
            let prob = (rho_star * g).clamp(0.0, 1.0);
            if rng.random::<f64>() < prob {
                edges.push((i, j));
                edges.push((j, i));
            }
        }
    }
    let graph = DirectedGraph::from_edge_list(&edges, n).expect("graphon edges are valid");
    Ok(GraphonSample {
        graph,
        positions,
        clamped,
    })
}

/// Keeps each observed edge independently with probability `keep_prob`.
pub fn thin_to_hidden<R: Rng + ?Sized>(
    g: &DirectedGraph,
    keep_prob: f64,
    rng: &mut R,
) -> Result<HiddenNetwork, GeneratorError> {
    if !(0.0..=1.0).contains(&keep_prob) {
        return Err(GeneratorError::Invalid(format!(
            "keep_prob {keep_prob} outside [0, 1]"
        )));
    }
    let kept: Vec<(usize, usize)> = g
        .edges()
        .filter(|_| rng.random::<f64>() < keep_prob)
        .collect();
    Ok(HiddenNetwork::from_edges_unchecked(g.n(), &kept))
}

/// Distribution scales of the parameter draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParameterScales {
    /// Standard deviation of `α_i` around `μ_i`.
    pub alpha_sd: f64,
    /// Multiplier of the direct-effect t draw.
    pub theta_scale: f64,
    /// Multiplier of the spillover t draw.
    pub gamma_scale: f64,
    /// Scale parameter of both t draws.
    pub t_scale: f64,
}

impl Default for ParameterScales {
    fn default() -> Self {
        ParameterScales {
            alpha_sd: 1.0,
            theta_scale: 0.8,
            gamma_scale: 1.8,
            t_scale: 0.5,
        }
    }
}

/// `μ + σ T` with `T = Z / √(V / 3)`, `Z ~ N(0, 1)`, `V ~ χ²(3)`.
pub fn draw_t3<R: Rng + ?Sized>(mu: f64, sigma: f64, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    let v: f64 = ChiSquared::new(3.0).expect("positive dof").sample(rng);
    mu + sigma * z / (v / 3.0).sqrt()
}

/// Draws `α_i ~ N(μ_i, sd²)`, `θ_i ~ a · t₃(μ_i, s)` and
/// `γ'_ij ~ b · t₃((μ_i + μ_j) / 2, s)` with `γ_ij = γ'_ij / Ñ_i`.
pub fn draw_parameters<R: Rng + ?Sized>(
    scales: &ParameterScales,
    mu: &[f64],
    hidden: &HiddenNetwork,
    rng: &mut R,
) -> Result<HateParameters, GeneratorError> {
    let n = hidden.n();
    if mu.len() != n {
        return Err(GeneratorError::Invalid(format!(
            "{} unit means for {n} units",
            mu.len()
        )));
    }
    let alpha: Vec<f64> = mu
        .iter()
        .map(|&m| m + scales.alpha_sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let theta: Vec<f64> = mu
        .iter()
        .map(|&m| scales.theta_scale * draw_t3(m, scales.t_scale, rng))
        .collect();
    let degrees = hidden.hidden_out_degrees();
    let gamma: Vec<f64> = hidden
        .edges()
        .map(|(i, j)| {
            let raw = scales.gamma_scale * draw_t3((mu[i] + mu[j]) / 2.0, scales.t_scale, rng);
            raw / degrees[i] as f64
        })
        .collect();
    HateParameters::new(alpha, theta, hidden.clone(), gamma)
        .map_err(|e| GeneratorError::Invalid(e.to_string()))
}

/// Directed graph with each ordered pair `(i, j)`, `i ≠ j`, present with
/// probability `p`.
pub fn erdos_renyi_directed<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> DirectedGraph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    DirectedGraph::from_edge_list(&edges, n).expect("indices in range")
}

/// Small random population for exact checks: a directed Erdős–Rényi graph,
/// a thinned hidden network and heterogeneous unit means `μ_i ~ N(1, 1)`.
pub fn random_instance<R: Rng + ?Sized>(
    n: usize,
    edge_prob: f64,
    keep_prob: f64,
    rng: &mut R,
) -> Result<(DirectedGraph, HateParameters), GeneratorError> {
    let g = erdos_renyi_directed(n, edge_prob, rng);
    let hidden = thin_to_hidden(&g, keep_prob, rng)?;
    let mu: Vec<f64> = (0..n)
        .map(|_| 1.0 + rng.sample::<f64, _>(StandardNormal))
        .collect();
    let params = draw_parameters(&ParameterScales::default(), &mu, &hidden, rng)?;
    Ok((g, params))
}

/// Stratum of each of `count` groups split evenly into `strata` strata.
pub fn even_strata(count: usize, strata: usize) -> Result<Vec<usize>, GeneratorError> {
    if strata == 0 || !count.is_multiple_of(strata) {
        return Err(GeneratorError::UnevenStrata { count, strata });
    }
    let per = count / strata;
    Ok((0..count).map(|g| g / per).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialSpec {
    pub cluster_size: usize,
    pub clusters: usize,
    /// `μ` of each cluster stratum; the number of strata is its length.
    pub stratum_mu: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketplaceSpec {
    pub buyers: usize,
    pub sellers: usize,
    /// Baseline of `μ_i = base + δ_{i,R} + δ_{i,C}`.
    #[serde(default = "one")]
    pub base_mu: f64,
    /// `δ` of each buyer stratum.
    pub buyer_delta: Vec<f64>,
    /// `δ` of each seller stratum.
    pub seller_delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphonSpec {
    pub n: usize,
    pub rho_star: f64,
    pub graphon: Graphon,
    #[serde(default = "one")]
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalSpec {
    /// Edge-list file.
    pub edges: PathBuf,
    /// Unit count; inferred from the largest index when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default = "one")]
    pub mu: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Partial(PartialSpec),
    Marketplace(MarketplaceSpec),
    Graphon(GraphonSpec),
    External(ExternalSpec),
}

/// Covariates used by the adjusted estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjustmentSpec {
    /// Scenario stratum indicators (merged groups or two-way).
    Strata,
    /// Intercept plus the top `k` eigenvectors of `E Eᵀ`.
    Spectral { k: usize },
    /// Intercept only.
    Intercept,
    /// No covariates; the adjusted estimators reduce to the plain ones.
    None,
}

/// A complete simulation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub r1: Design,
    /// Probability that an observed edge is kept in the hidden network.
    pub keep_prob: f64,
    #[serde(default)]
    pub scales: ParameterScales,
    pub scenario: Scenario,
    pub adjustment: AdjustmentSpec,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, GeneratorError> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| GeneratorError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), GeneratorError> {
        if !(0.0..=1.0).contains(&self.keep_prob) {
            return Err(GeneratorError::Invalid(format!(
                "keep_prob {} outside [0, 1]",
                self.keep_prob
            )));
        }
        match &self.scenario {
            Scenario::Partial(p) => {
                if p.cluster_size == 0 || p.clusters == 0 {
                    return Err(GeneratorError::Invalid(
                        "empty partial-interference graph".into(),
                    ));
                }
                even_strata(p.clusters, p.stratum_mu.len())?;
            }
            Scenario::Marketplace(m) => {
                if m.buyers == 0 || m.sellers == 0 {
                    return Err(GeneratorError::Invalid("empty marketplace".into()));
                }
                even_strata(m.buyers, m.buyer_delta.len())?;
                even_strata(m.sellers, m.seller_delta.len())?;
            }
            Scenario::Graphon(g) => {
                if g.n < 2 || !(0.0..=1.0).contains(&g.rho_star) {
                    return Err(GeneratorError::Invalid(
                        "graphon needs n >= 2 and rho_star in [0, 1]".into(),
                    ));
                }
                g.graphon.validate()?;
            }
            Scenario::External(_) => {
                if self.adjustment == AdjustmentSpec::Strata {
                    return Err(GeneratorError::Invalid(
                        "external networks carry no strata; use spectral, intercept or none".into(),
                    ));
                }
            }
        }
        if let AdjustmentSpec::Strata = self.adjustment {
            if let Scenario::Graphon(_) = self.scenario {
                return Err(GeneratorError::Invalid(
                    "graphon scenarios carry no strata".into(),
                ));
            }
        }
        Ok(())
    }
}
