//! Fixed-population Monte Carlo harness.
//!
//! The population is drawn once from stream `(seed, 0)`; replication `r`
//! draws its assignment from stream `(seed, r + 1)`. Per-replication records are collected in index
//! order, so summaries do not depend on the number of worker threads.

use std::io::{Read, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adjustment::{
    structural_covariates, top_k_spectrum, AdjustmentError, Covariates, SpectralBasis,
    SpectrumOptions, StratumLabels, StructuralKind,
};
use crate::design::{draw_assignment, replication_stream, Assignment, Design};
use crate::estimators::{ev_adjusted_indirect, ht_direct, IndirectWeights};
use crate::generators::{
    cluster_labels, even_strata, graphon_graph, marketplace_graph, marketplace_position,
    partial_interference_graph, thin_to_hidden, AdjustmentSpec, GeneratorError, Scenario,
    ScenarioConfig,
};
use crate::graph::DirectedGraph;
use crate::hate_model::{Estimands, HateParameters};
use crate::io::{read_edge_list, IoError};
use crate::variance::{
    var_dir_hat, var_ev_hat, var_ind_hat, var_tot_hat, wald_ci, Estimand, EvKind,
};

/// Maximum tolerated fraction of failed replications.
pub const MAX_FAILURE_RATE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Adjustment(#[from] AdjustmentError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("at least 2 replications are required, got {0}")]
    TooFewReplications(usize),
    #[error("{failures} of {replications} replications failed (limit 1%); first error: {first}")]
    TooManyFailures {
        failures: usize,
        replications: usize,
        first: String,
    },
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// The fixed finite population of a simulation.
#[derive(Debug, Clone)]
pub struct Population {
    pub graph: DirectedGraph,
    pub params: HateParameters,
    pub design: Design,
    pub covariates: Covariates,
    /// Group label of every unit (partial interference only).
    pub clusters: Option<Vec<usize>>,
    pub spectrum: Option<SpectralBasis>,
    pub estimands: Estimands,
    pub warnings: Vec<String>,
}

impl Population {
    /// Estimators evaluated on this population, in report order.
    pub fn estimators(&self) -> Vec<Estimand> {
        let mut list = vec![
            Estimand::Dir,
            Estimand::Ind,
            Estimand::EvInd,
            Estimand::Tot,
            Estimand::EvTot,
        ];
        if self.clusters.is_some() {
            list.push(Estimand::ClTot);
        }
        list
    }

    pub fn truth(&self, e: Estimand) -> f64 {
        match e {
            Estimand::Dir => self.estimands.tau_dir,
            Estimand::Ind | Estimand::EvInd => self.estimands.tau_ind,
            Estimand::Tot | Estimand::EvTot | Estimand::ClTot => self.estimands.tau_tot,
        }
    }
}

/// Draws the population for `cfg` from stream `(seed, 0)`.
pub fn build_population(cfg: &ScenarioConfig, seed: u64) -> Result<Population, SimulationError> {
    cfg.validate()?;
    let mut rng = replication_stream(seed, 0);
    let mut warnings = Vec::new();
    let (graph, mu, clusters, strata) = match &cfg.scenario {
        Scenario::Partial(p) => {
            let graph = partial_interference_graph(p.cluster_size, p.clusters);
            let stratum_of_cluster = even_strata(p.clusters, p.stratum_mu.len())?;
            let clusters = cluster_labels(p.cluster_size, p.clusters);
            let unit_strata: Vec<usize> = clusters.iter().map(|&c| stratum_of_cluster[c]).collect();
            let mu = unit_strata.iter().map(|&s| p.stratum_mu[s]).collect();
            let labels = StratumLabels::new(unit_strata, p.stratum_mu.len())?;
            (graph, mu, Some(clusters), Some(vec![labels]))
        }
        Scenario::Marketplace(m) => {
            let graph = marketplace_graph(m.buyers, m.sellers);
            let buyer_strata = even_strata(m.buyers, m.buyer_delta.len())?;
            let seller_strata = even_strata(m.sellers, m.seller_delta.len())?;
            let n = m.buyers * m.sellers;
            let (rows, cols): (Vec<usize>, Vec<usize>) = (0..n)
                .map(|i| {
                    let (r, c) = marketplace_position(i, m.sellers);
                    (buyer_strata[r], seller_strata[c])
                })
                .unzip();
            let mu = rows
                .iter()
                .zip(&cols)
                .map(|(&r, &c)| m.base_mu + m.buyer_delta[r] + m.seller_delta[c])
                .collect();
            let labels = vec![
                StratumLabels::new(rows, m.buyer_delta.len())?,
                StratumLabels::new(cols, m.seller_delta.len())?,
            ];
            (graph, mu, None, Some(labels))
        }
        Scenario::Graphon(g) => {
            let sample = graphon_graph(g.n, g.rho_star, &g.graphon, &mut rng)?;
            if sample.clamped > 0 {
                warnings.push(format!(
                    "graphon was negative on {} sampled pairs; probabilities clamped to 0",
                    sample.clamped
                ));
            }
            (sample.graph, vec![g.mu; g.n], None, None)
        }
        Scenario::External(e) => {
            let load = read_edge_list(&e.edges, e.n)?;
            if load.duplicates > 0 {
                warnings.push(format!("collapsed {} duplicate edges", load.duplicates));
            }
            let n = load.graph.n();
            (load.graph, vec![e.mu; n], None, None)
        }
    };
    let hidden = thin_to_hidden(&graph, cfg.keep_prob, &mut rng)?;
    let params = crate::generators::draw_parameters(&cfg.scales, &mu, &hidden, &mut rng)?;
    let n = graph.n();
    let mut spectrum = None;
    let covariates = match cfg.adjustment {
        AdjustmentSpec::None => Covariates::empty(n),
        AdjustmentSpec::Intercept => Covariates::intercept_only(n),
        AdjustmentSpec::Spectral { k: 0 } => Covariates::intercept_only(n),
        AdjustmentSpec::Spectral { k } => {
            let basis = top_k_spectrum(&graph, k, &SpectrumOptions::default(), &mut rng)?;
            if basis.degenerate {
                warnings.push("requested eigenvectors include a zero eigenvalue".into());
            }
            let w = basis.covariates.clone();
            spectrum = Some(basis);
            w
        }
        AdjustmentSpec::Strata => {
            let labels = strata.expect("validated: scenario has strata");
            let kind = match labels.as_slice() {
                [one] => StructuralKind::MergedGroups(one),
                [rows, cols] => StructuralKind::TwoWay { rows, cols },
                _ => unreachable!("one or two stratifications"),
            };
            let s = structural_covariates(kind)?;
            warnings.extend(s.warnings);
            s.covariates
        }
    };
    let estimands = params.true_estimands();
    Ok(Population {
        graph,
        params,
        design: cfg.r1,
        covariates,
        clusters,
        spectrum,
        estimands,
        warnings,
    })
}

/// One estimator's output in one replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub point: f64,
    pub var_hat: f64,
}

/// Cluster-level Bernoulli assignment: every unit copies its cluster's draw.
pub fn cluster_assignment<R: Rng + ?Sized>(
    labels: &[usize],
    d: &Design,
    rng: &mut R,
) -> Assignment {
    let clusters = labels.iter().max().map_or(0, |m| m + 1);
    let cz = draw_assignment(d, clusters, rng);
    Assignment::new(labels.iter().map(|&c| cz.is_treated(c)).collect())
}

/// Neyman-type variance at the cluster level:
/// `Σ_m Z_m T_m² / (N² r1²) + Σ_m (1 − Z_m) T_m² / (N² r0²)` with cluster totals `T_m`.
pub fn cluster_variance(y: &[f64], z: &Assignment, labels: &[usize], d: &Design) -> f64 {
    let clusters = labels.iter().max().map_or(0, |m| m + 1);
    let mut totals = vec![0.0; clusters];
    let mut treated = vec![false; clusters];
    for (i, &c) in labels.iter().enumerate() {
        totals[c] += y[i];
        treated[c] = z.is_treated(i);
    }
    let n = y.len() as f64;
    let sum: f64 = totals
        .iter()
        .zip(&treated)
        .map(|(t, &tr)| {
            if tr {
                t * t / (d.r1() * d.r1())
            } else {
                t * t / (d.r0() * d.r0())
            }
        })
        .sum();
    sum / (n * n)
}

/// Cluster-randomized difference in means `ΣZY/(N r1) − Σ(1−Z)Y/(N r0)`
/// with its cluster-level variance estimate.
pub fn cluster_randomization_baseline<R: Rng + ?Sized>(
    p: &HateParameters,
    labels: &[usize],
    d: &Design,
    rng: &mut R,
) -> Draw {
    let z = cluster_assignment(labels, d, rng);
    let y = p.realize_outcomes(&z).expect("labels cover all units");
    Draw {
        point: ht_direct(&y, &z, d).expect("lengths match"),
        var_hat: cluster_variance(&y, &z, labels, d),
    }
}

/// All estimators for one replication, in [`Population::estimators`] order.
pub fn run_replication(pop: &Population, seed: u64, index: u64) -> Result<Vec<Draw>, String> {
    let mut rng = replication_stream(seed, index + 1);
    let d = &pop.design;
    let g = &pop.graph;
    let z = draw_assignment(d, g.n(), &mut rng);
    let y = pop.params.realize_outcomes(&z).map_err(|e| e.to_string())?;
    let err = |e: &dyn std::fmt::Display| e.to_string();
    let dir = ht_direct(&y, &z, d).map_err(|e| err(&e))?;
    let ind = IndirectWeights::new(g, &z, d)
        .and_then(|w| w.apply(&y))
        .map_err(|e| err(&e))?;
    let (ev_ind, fit) = ev_adjusted_indirect(&y, &z, g, &pop.covariates, d).map_err(|e| err(&e))?;
    let mut draws = vec![
        Draw {
            point: dir,
            var_hat: var_dir_hat(&y, &z, d).map_err(|e| err(&e))?,
        },
        Draw {
            point: ind,
            var_hat: var_ind_hat(&y, &z, g, d).map_err(|e| err(&e))?,
        },
        Draw {
            point: ev_ind,
            var_hat: var_ev_hat(&y, &fit.residuals, &z, g, d, EvKind::Ind).map_err(|e| err(&e))?,
        },
        Draw {
            point: dir + ind,
            var_hat: var_tot_hat(&y, &z, g, d).map_err(|e| err(&e))?,
        },
        Draw {
            point: dir + ev_ind,
            var_hat: var_ev_hat(&y, &fit.residuals, &z, g, d, EvKind::Tot).map_err(|e| err(&e))?,
        },
    ];
    if let Some(labels) = &pop.clusters {
        draws.push(cluster_randomization_baseline(
            &pop.params,
            labels,
            d,
            &mut rng,
        ));
    }
    Ok(draws)
}

/// A row of the simulation table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub estimator: Estimand,
    #[serde(rename = "true")]
    pub truth: f64,
    pub bias: f64,
    /// Sample standard deviation (R − 1 denominator).
    pub sd: f64,
    /// `sqrt(mean((τ̂ − τ)²))`.
    pub rmse: f64,
    /// Coverage of the un-doubled Wald interval.
    pub cp: f64,
    /// Mean interval length.
    pub length: f64,
    /// Requested replications.
    #[serde(rename = "R")]
    pub replications: usize,
    pub failures: usize,
}

/// Summaries plus the per-replication matrix behind them.
#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub estimators: Vec<Estimand>,
    pub summaries: Vec<MonteCarloSummary>,
    /// `None` marks a failed replication.
    pub draws: Vec<Option<Vec<Draw>>>,
    pub failures: usize,
    pub level: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub replications: usize,
    pub seed: u64,
    pub threads: usize,
    pub level: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            replications: 2000,
            seed: 1,
            threads: 1,
            level: 0.95,
        }
    }
}

/// Runs all replications on `pop` and aggregates them.
pub fn run_on_population(
    pop: &Population,
    opts: &RunOptions,
) -> Result<SimulationOutput, SimulationError> {
    if opts.replications < 2 {
        return Err(SimulationError::TooFewReplications(opts.replications));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.max(1))
        .build()
        .map_err(|e| SimulationError::ThreadPool(e.to_string()))?;
    let results: Vec<Result<Vec<Draw>, String>> = pool.install(|| {
        (0..opts.replications as u64)
            .into_par_iter()
            .map(|r| run_replication(pop, opts.seed, r))
            .collect()
    });
    let failures = results.iter().filter(|r| r.is_err()).count();
    if failures as f64 > MAX_FAILURE_RATE * opts.replications as f64 {
        let first = results
            .iter()
            .find_map(|r| r.as_ref().err().cloned())
            .unwrap_or_default();
        return Err(SimulationError::TooManyFailures {
            failures,
            replications: opts.replications,
            first,
        });
    }
    let draws: Vec<Option<Vec<Draw>>> = results.into_iter().map(Result::ok).collect();
    let estimators = pop.estimators();
    let summaries = estimators
        .iter()
        .enumerate()
        .map(|(k, &e)| {
            let col: Vec<Draw> = draws.iter().flatten().map(|d| d[k]).collect();
            summarize(
                e,
                pop.truth(e),
                &col,
                opts.level,
                opts.replications,
                failures,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SimulationOutput {
        estimators,
        summaries,
        draws,
        failures,
        level: opts.level,
    })
}

/// Builds the population for `cfg` and runs the replications.
pub fn run_replications(
    cfg: &ScenarioConfig,
    opts: &RunOptions,
) -> Result<(Population, SimulationOutput), SimulationError> {
    let pop = build_population(cfg, opts.seed)?;
    let out = run_on_population(&pop, opts)?;
    Ok((pop, out))
}

/// Table metrics for one estimator.
pub fn summarize(
    estimator: Estimand,
    truth: f64,
    draws: &[Draw],
    level: f64,
    replications: usize,
    failures: usize,
) -> Result<MonteCarloSummary, SimulationError> {
    let r = draws.len() as f64;
    let mean = draws.iter().map(|d| d.point).sum::<f64>() / r;
    let ss = draws.iter().map(|d| (d.point - mean).powi(2)).sum::<f64>();
    let sd = (ss / (r - 1.0)).sqrt();
    let mse = draws.iter().map(|d| (d.point - truth).powi(2)).sum::<f64>() / r;
    let mut covered = 0usize;
    let mut length = 0.0;
    for d in draws {
        let report = wald_ci(estimator, d.point, d.var_hat, level, false)
            .map_err(|e| SimulationError::Generator(GeneratorError::Invalid(e.to_string())))?;
        if report.ci.contains(truth) {
            covered += 1;
        }
        length += report.ci.length();
    }
    Ok(MonteCarloSummary {
        estimator,
        truth,
        bias: mean - truth,
        sd,
        rmse: mse.sqrt(),
        cp: covered as f64 / r,
        length: length / r,
        replications,
        failures,
    })
}

pub fn write_summary_csv<W: Write>(
    out: W,
    rows: &[MonteCarloSummary],
) -> Result<(), SimulationError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_summary_csv<R: Read>(input: R) -> Result<Vec<MonteCarloSummary>, SimulationError> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<Vec<_>, _>>()?)
}

/// Per-replication matrix: `rep,failed,<E>_point,<E>_var,...`.
pub fn write_replications_csv<W: Write>(
    out: W,
    sim: &SimulationOutput,
) -> Result<(), SimulationError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["rep".to_string(), "failed".to_string()];
    for e in &sim.estimators {
        header.push(format!("{e}_point"));
        header.push(format!("{e}_var"));
    }
    w.write_record(&header)?;
    for (r, row) in sim.draws.iter().enumerate() {
        let mut rec = vec![r.to_string()];
        match row {
            Some(draws) => {
                rec.push("0".into());
                for d in draws {
                    rec.push(d.point.to_string());
                    rec.push(d.var_hat.to_string());
                }
            }
            None => {
                rec.push("1".into());
                rec.extend(std::iter::repeat_n(String::new(), 2 * sim.estimators.len()));
            }
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{ParameterScales, PartialSpec};
    use crate::graph::HiddenNetwork;
    use crate::oracle::CompensatedSum;

    fn small_partial() -> ScenarioConfig {
        ScenarioConfig {
            r1: Design::new(0.5).unwrap(),
            keep_prob: 0.5,
            scales: ParameterScales::default(),
            scenario: Scenario::Partial(PartialSpec {
                cluster_size: 4,
                clusters: 6,
                stratum_mu: vec![0.0, 1.0, 2.0],
            }),
            adjustment: AdjustmentSpec::Strata,
        }
    }

    #[test]
    fn population_is_reproducible() {
        let a = build_population(&small_partial(), 9).unwrap();
        let b = build_population(&small_partial(), 9).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.covariates, b.covariates);
        let c = build_population(&small_partial(), 10).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn summary_identities() {
        let pop = build_population(&small_partial(), 3).unwrap();
        let opts = RunOptions {
            replications: 200,
            seed: 3,
            threads: 2,
            level: 0.95,
        };
        let out = run_on_population(&pop, &opts).unwrap();
        assert_eq!(out.summaries.len(), 6);
        let r = 200.0 - out.failures as f64;
        for s in &out.summaries {
            let lhs = s.rmse * s.rmse;
            let rhs = s.bias * s.bias + s.sd * s.sd * (r - 1.0) / r;
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.max(1.0), "{s:?}");
            assert!((0.0..=1.0).contains(&s.cp));
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let pop = build_population(&small_partial(), 5).unwrap();
        let one = run_on_population(
            &pop,
            &RunOptions {
                replications: 64,
                seed: 5,
                threads: 1,
                level: 0.95,
            },
        )
        .unwrap();
        let four = run_on_population(
            &pop,
            &RunOptions {
                replications: 64,
                seed: 5,
                threads: 4,
                level: 0.95,
            },
        )
        .unwrap();
        assert_eq!(one.summaries, four.summaries);
        assert_eq!(one.draws, four.draws);
    }

    #[test]
    fn no_interference_direct_is_unbiased() {
        let n = 60;
        let g = DirectedGraph::edgeless(n);
        let params = HateParameters::new(
            vec![0.5; n],
            vec![2.0; n],
            HiddenNetwork::edgeless(n),
            vec![],
        )
        .unwrap();
        let pop = Population {
            estimands: params.true_estimands(),
            graph: g,
            params,
            design: Design::new(0.5).unwrap(),
            covariates: Covariates::intercept_only(n),
            clusters: None,
            spectrum: None,
            warnings: vec![],
        };
        let out = run_on_population(
            &pop,
            &RunOptions {
                replications: 400,
                seed: 1,
                threads: 1,
                level: 0.95,
            },
        )
        .unwrap();
        let dir = out.summaries[0];
        assert_eq!(dir.truth, 2.0);
        assert!(dir.bias.abs() <= 3.0 * dir.sd / 400f64.sqrt());
    }

    #[test]
    fn cluster_baseline_enumeration_is_unbiased() {
        let labels = cluster_labels(3, 4);
        let n = labels.len();
        let params = HateParameters::new(
            vec![0.0; n],
            vec![1.5; n],
            HiddenNetwork::edgeless(n),
            vec![],
        )
        .unwrap();
        let d = Design::new(0.4).unwrap();
        let mut mean = CompensatedSum::default();
        for bits in 0u32..16 {
            let z = Assignment::new(labels.iter().map(|&c| bits >> c & 1 == 1).collect());
            let treated = bits.count_ones() as usize;
            let y = params.realize_outcomes(&z).unwrap();
            mean.add(d.probability(treated, 4) * ht_direct(&y, &z, &d).unwrap());
        }
        assert!((mean.value() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn single_treated_cluster() {
        let labels = vec![0; 5];
        let params = HateParameters::new(
            vec![1.0; 5],
            vec![1.0; 5],
            HiddenNetwork::edgeless(5),
            vec![],
        )
        .unwrap();
        let d = Design::new(0.5).unwrap();
        let z = Assignment::all(5, true);
        let y = params.realize_outcomes(&z).unwrap();
        assert_eq!(ht_direct(&y, &z, &d).unwrap(), 10.0 / (5.0 * 0.5));
        assert_eq!(cluster_variance(&y, &z, &labels, &d), 100.0 / (25.0 * 0.25));
    }

    #[test]
    fn summary_csv_round_trip() {
        let pop = build_population(&small_partial(), 2).unwrap();
        let out = run_on_population(
            &pop,
            &RunOptions {
                replications: 20,
                seed: 2,
                threads: 1,
                level: 0.95,
            },
        )
        .unwrap();
        let mut buf = Vec::new();
        write_summary_csv(&mut buf, &out.summaries).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("estimator,true,bias,sd,rmse,cp,length,R,failures\n"));
        assert_eq!(read_summary_csv(buf.as_slice()).unwrap(), out.summaries);
        let mut reps = Vec::new();
        write_replications_csv(&mut reps, &out).unwrap();
        assert_eq!(String::from_utf8(reps).unwrap().lines().count(), 21);
    }

    #[test]
    fn too_few_replications() {
        let pop = build_population(&small_partial(), 2).unwrap();
        assert!(matches!(
            run_on_population(
                &pop,
                &RunOptions {
                    replications: 1,
                    ..Default::default()
                }
            ),
            Err(SimulationError::TooFewReplications(1))
        ));
    }

    #[test]
    fn failures_over_limit_are_an_error() {
        // two units: an empty arm happens in half of all draws
        let n = 2;
        let params = HateParameters::new(
            vec![0.0; n],
            vec![1.0; n],
            HiddenNetwork::edgeless(n),
            vec![],
        )
        .unwrap();
        let pop = Population {
            estimands: params.true_estimands(),
            graph: DirectedGraph::edgeless(n),
            params,
            design: Design::new(0.5).unwrap(),
            covariates: Covariates::intercept_only(n),
            clusters: None,
            spectrum: None,
            warnings: vec![],
        };
        assert!(matches!(
            run_on_population(
                &pop,
                &RunOptions {
                    replications: 100,
                    ..Default::default()
                }
            ),
            Err(SimulationError::TooManyFailures { .. })
        ));
    }
}
