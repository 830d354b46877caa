//! Conservative variance estimators and Wald confidence intervals.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::fmt;
use thiserror::Error;

use crate::design::{Assignment, Design};
use crate::estimators::{check_len, EstimatorError};
use crate::graph::DirectedGraph;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VarianceError {
    #[error(transparent)]
    Input(#[from] EstimatorError),
    #[error("variance estimate {0} is negative or not finite")]
    InvalidVariance(f64),
    #[error("confidence level {0} must lie strictly inside (0, 1)")]
    InvalidLevel(f64),
}

/// Target of an estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimand {
    #[serde(rename = "DIR")]
    Dir,
    #[serde(rename = "IND")]
    Ind,
    #[serde(rename = "EV_IND")]
    EvInd,
    #[serde(rename = "TOT")]
    Tot,
    #[serde(rename = "EV_TOT")]
    EvTot,
    /// Cluster-randomized difference in means (simulation baseline only).
    #[serde(rename = "CL_TOT")]
    ClTot,
}

impl Estimand {
    pub fn as_str(&self) -> &'static str {
        match self {
            Estimand::Dir => "DIR",
            Estimand::Ind => "IND",
            Estimand::EvInd => "EV_IND",
            Estimand::Tot => "TOT",
            Estimand::EvTot => "EV_TOT",
            Estimand::ClTot => "CL_TOT",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Estimand::Dir,
            Estimand::Ind,
            Estimand::EvInd,
            Estimand::Tot,
            Estimand::EvTot,
            Estimand::ClTot,
        ]
        .into_iter()
        .find(|e| e.as_str() == s)
    }
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which adjusted variance estimator to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvKind {
    Ind,
    Tot,
}

/// In-neighbour totals `T1_i = Σ_j E_ji v_j Z_j / r1` and
/// `T0_i = Σ_j E_ji v_j (1 − Z_j) / r0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTotals {
    pub treated: Vec<f64>,
    pub control: Vec<f64>,
}

impl NeighborTotals {
    pub fn new(
        v: &[f64],
        z: &Assignment,
        g: &DirectedGraph,
        d: &Design,
    ) -> Result<Self, EstimatorError> {
        let n = g.n();
        check_len(n, v.len())?;
        check_len(n, z.len())?;
        let mut treated = vec![0.0; n];
        let mut control = vec![0.0; n];
        for (j, &vj) in v.iter().enumerate() {
            let (target, scaled) = if z.is_treated(j) {
                (&mut treated, vj / d.r1())
            } else {
                (&mut control, vj / d.r0())
            };
            for &i in g.out_neighbors(j) {
                target[i] += scaled;
            }
        }
        Ok(NeighborTotals { treated, control })
    }

    pub fn zero(n: usize) -> Self {
        NeighborTotals {
            treated: vec![0.0; n],
            control: vec![0.0; n],
        }
    }
}

/// The four-term weighted sum of squares shared by the IND and TOT estimators,
/// with an optional ego term inside every square.
fn four_term(ego: Option<&[f64]>, t: &NeighborTotals, z: &Assignment, d: &Design) -> f64 {
    let (r1, r0) = (d.r1(), d.r0());
    let n = z.len() as f64;
    let sum: f64 = (0..z.len())
        .map(|i| {
            let e = ego.map_or(0.0, |y| y[i]);
            let a = (e + t.treated[i]).powi(2);
            let b = (e + t.control[i]).powi(2);
            if z.is_treated(i) {
                a / r1 + b * r0 / (r1 * r1)
            } else {
                a * r1 / (r0 * r0) + b / r0
            }
        })
        .sum();
    sum / (n * n)
}

/// `V̂_DIR = Σ Z_i Y_i² / (N² r1²) + Σ (1 − Z_i) Y_i² / (N² r0²)`.
pub fn var_dir_hat(y: &[f64], z: &Assignment, d: &Design) -> Result<f64, VarianceError> {
    check_len(y.len(), z.len())?;
    let n = y.len() as f64;
    let (r1, r0) = (d.r1(), d.r0());
    let sum: f64 = y
        .iter()
        .enumerate()
        .map(|(i, &yi)| {
            if z.is_treated(i) {
                yi * yi / (r1 * r1)
            } else {
                yi * yi / (r0 * r0)
            }
        })
        .sum();
    Ok(sum / (n * n))
}

/// Weighted sum of squares of treated and control in-neighbour outcome totals.
pub fn var_ind_hat(
    y: &[f64],
    z: &Assignment,
    g: &DirectedGraph,
    d: &Design,
) -> Result<f64, VarianceError> {
    let t = NeighborTotals::new(y, z, g, d)?;
    Ok(four_term(None, &t, z, d))
}

/// As [`var_ind_hat`] with the ego outcome added inside every square.
pub fn var_tot_hat(
    y: &[f64],
    z: &Assignment,
    g: &DirectedGraph,
    d: &Design,
) -> Result<f64, VarianceError> {
    let t = NeighborTotals::new(y, z, g, d)?;
    Ok(four_term(Some(y), &t, z, d))
}

/// Adjusted variance estimators: neighbour totals are built from the
/// regression residuals. For [`EvKind::Tot`] the ego term stays the raw
/// outcome `Y_i`.
pub fn var_ev_hat(
    y: &[f64],
    residuals: &[f64],
    z: &Assignment,
    g: &DirectedGraph,
    d: &Design,
    kind: EvKind,
) -> Result<f64, VarianceError> {
    check_len(g.n(), y.len())?;
    let t = NeighborTotals::new(residuals, z, g, d)?;
    Ok(match kind {
        EvKind::Ind => four_term(None, &t, z, d),
        EvKind::Tot => four_term(Some(y), &t, z, d),
    })
}

/// Standard normal quantile `Φ⁻¹(p)`.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub level: f64,
    pub low: f64,
    pub high: f64,
    pub doubled: bool,
}

impl ConfidenceInterval {
    pub fn contains(&self, value: f64) -> bool {
        self.low <= value && value <= self.high
    }

    pub fn length(&self) -> f64 {
        self.high - self.low
    }
}

/// One estimand's point estimate, variance estimate and Wald interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimand: Estimand,
    pub point: f64,
    pub var_hat: f64,
    pub ci: ConfidenceInterval,
}

/// `point ± z_{(1+level)/2} · sqrt(variance_hat · (doubled ? 2 : 1))`.
pub fn wald_ci(
    estimand: Estimand,
    point: f64,
    variance_hat: f64,
    level: f64,
    doubled: bool,
) -> Result<EstimateReport, VarianceError> {
    if !(variance_hat >= 0.0 && variance_hat.is_finite()) {
        return Err(VarianceError::InvalidVariance(variance_hat));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(VarianceError::InvalidLevel(level));
    }
    let factor = if doubled { 2.0 } else { 1.0 };
    let half = normal_quantile((1.0 + level) / 2.0) * (variance_hat * factor).sqrt();
    Ok(EstimateReport {
        estimand,
        point,
        var_hat: variance_hat,
        ci: ConfidenceInterval {
            level,
            low: point - half,
            high: point + half,
            doubled,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half() -> Design {
        Design::new(0.5).unwrap()
    }

    /// `Φ(x)` from its Taylor series `1/2 + φ(x) Σ x^{2k+1} / (2k+1)!!`.
    fn phi_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        for k in 1..400 {
            term *= x * x / (2 * k + 1) as f64;
            sum += term;
        }
        0.5 + sum * (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn quantile_matches_series_inverse() {
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-12);
        assert_eq!(normal_quantile(0.5), 0.0);
        for &p in &[0.001, 0.02, 0.1, 0.3, 0.6, 0.9, 0.995, 0.9999] {
            let q = normal_quantile(p);
            assert!((phi_series(q) - p).abs() < 1e-12, "p = {p}");
            assert!((normal_quantile(1.0 - p) + q).abs() < 1e-9);
        }
    }

    #[test]
    fn wald_examples() {
        let r = wald_ci(Estimand::Dir, 0.0, 1.0, 0.95, false).unwrap();
        assert!((r.ci.high - 1.959964).abs() < 1e-6 && (r.ci.low + 1.959964).abs() < 1e-6);
        let r = wald_ci(Estimand::Dir, 5.0, 0.0, 0.95, false).unwrap();
        assert_eq!((r.ci.low, r.ci.high), (5.0, 5.0));
        let r = wald_ci(Estimand::Dir, 0.0, 1.0, 0.95, true).unwrap();
        assert!((r.ci.high - 2.771808).abs() < 1e-6);
        assert!(wald_ci(Estimand::Dir, 0.0, -1.0, 0.95, false).is_err());
        assert!(wald_ci(Estimand::Dir, 0.0, 1.0, 1.0, false).is_err());
    }

    #[test]
    fn report_json_schema() {
        let r = wald_ci(Estimand::EvTot, 1.0, 0.25, 0.9, false).unwrap();
        let v = serde_json::to_value(r).unwrap();
        assert_eq!(v["estimand"], "EV_TOT");
        assert_eq!(v["var_hat"], 0.25);
        assert_eq!(v["ci"]["level"], 0.9);
        assert_eq!(v["ci"]["doubled"], false);
        let back: EstimateReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn var_dir_constant_outcomes() {
        let c = 3.0;
        let n = 8;
        let z = Assignment::from_bits(&[1, 0, 0, 1, 1, 0, 1, 1]);
        let v = var_dir_hat(&vec![c; n], &z, &half()).unwrap();
        assert!((v - 4.0 * c * c / n as f64).abs() < 1e-12);
        assert_eq!(var_dir_hat(&vec![0.0; n], &z, &half()).unwrap(), 0.0);
    }

    #[test]
    fn var_ind_single_edge() {
        let g = DirectedGraph::from_edge_list(&[(0, 1)], 2).unwrap();
        let z = Assignment::from_bits(&[1, 1]);
        let y0 = 1.5;
        let v = var_ind_hat(&[y0, 2.0], &z, &g, &half()).unwrap();
        // T1_1 = y0 / r1 = 2 y0; unit 1 treated: (2 y0)² (1/r1 + 0) / n²
        let expected = (2.0 * y0).powi(2) * 2.0 / 4.0;
        assert!((v - expected).abs() < 1e-12);
        assert_eq!(
            var_ind_hat(&[y0, 2.0], &z, &DirectedGraph::edgeless(2), &half()).unwrap(),
            0.0
        );
    }

    #[test]
    fn var_tot_edgeless_collapse() {
        let g = DirectedGraph::edgeless(3);
        let d = Design::new(0.3).unwrap();
        let z = Assignment::from_bits(&[1, 0, 1]);
        let y = [1.0, 2.0, -3.0];
        let (r1, r0) = (d.r1(), d.r0());
        let expected = (1.0 * (1.0 / r1 + r0 / (r1 * r1))
            + 4.0 * (r1 / (r0 * r0) + 1.0 / r0)
            + 9.0 * (1.0 / r1 + r0 / (r1 * r1)))
            / 9.0;
        assert!((var_tot_hat(&y, &z, &g, &d).unwrap() - expected).abs() < 1e-12);
        // equals the direct estimator's variance formula
        assert!((expected - var_dir_hat(&y, &z, &d).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ev_with_zero_residuals() {
        let g = DirectedGraph::from_edge_list(&[(0, 1), (1, 2), (2, 0)], 3).unwrap();
        let z = Assignment::from_bits(&[1, 0, 1]);
        let y = [1.0, 2.0, 3.0];
        let d = half();
        let zero = [0.0; 3];
        assert_eq!(var_ev_hat(&y, &zero, &z, &g, &d, EvKind::Ind).unwrap(), 0.0);
        let tot = var_ev_hat(&y, &zero, &z, &g, &d, EvKind::Tot).unwrap();
        let ego_only = four_term(Some(&y), &NeighborTotals::zero(3), &z, &d);
        assert_eq!(tot, ego_only);
        // with residuals equal to outcomes the plain estimators come back
        assert_eq!(
            var_ev_hat(&y, &y, &z, &g, &d, EvKind::Ind).unwrap(),
            var_ind_hat(&y, &z, &g, &d).unwrap()
        );
        assert_eq!(
            var_ev_hat(&y, &y, &z, &g, &d, EvKind::Tot).unwrap(),
            var_tot_hat(&y, &z, &g, &d).unwrap()
        );
    }

    #[test]
    fn estimand_names_round_trip() {
        for e in [
            Estimand::Dir,
            Estimand::Ind,
            Estimand::EvInd,
            Estimand::Tot,
            Estimand::EvTot,
            Estimand::ClTot,
        ] {
            assert_eq!(Estimand::parse(e.as_str()), Some(e));
        }
    }
}
