//! Horvitz–Thompson point estimators and their eigenvector-adjusted variants.

use thiserror::Error;

use crate::adjustment::{within_arm_ols, AdjustmentError, ArmRegression, Covariates};
use crate::design::{Assignment, Design};
use crate::graph::DirectedGraph;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Adjustment(#[from] AdjustmentError),
}

pub(crate) fn check_len(expected: usize, actual: usize) -> Result<(), EstimatorError> {
    if expected == actual {
        Ok(())
    } else {
        Err(EstimatorError::LengthMismatch { expected, actual })
    }
}

/// `τ̂_DIR = N⁻¹ Σ {Y_i Z_i / r1 − Y_i (1 − Z_i) / r0}`.
pub fn ht_direct(y: &[f64], z: &Assignment, d: &Design) -> Result<f64, EstimatorError> {
    check_len(y.len(), z.len())?;
    let (r1, r0) = (d.r1(), d.r0());
    let sum: f64 = y
        .iter()
        .enumerate()
        .map(|(i, &yi)| if z.is_treated(i) { yi / r1 } else { -yi / r0 })
        .sum();
    Ok(sum / y.len() as f64)
}

/// Per-unit weights `w_i = Σ_j E_ij (Z_j − r1) / (r1 r0)` shared by every
/// indirect-type estimator for one assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct IndirectWeights(Vec<f64>);

impl IndirectWeights {
    pub fn new(g: &DirectedGraph, z: &Assignment, d: &Design) -> Result<Self, EstimatorError> {
        check_len(g.n(), z.len())?;
        let (r1, r0) = (d.r1(), d.r0());
        let w = (0..g.n())
            .map(|i| {
                g.out_neighbors(i)
                    .iter()
                    .map(|&j| z.value(j) - r1)
                    .sum::<f64>()
                    / (r1 * r0)
            })
            .collect();
        Ok(IndirectWeights(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `N⁻¹ Σ_i v_i w_i`.
    pub fn apply(&self, v: &[f64]) -> Result<f64, EstimatorError> {
        check_len(self.0.len(), v.len())?;
        let sum: f64 = v.iter().zip(&self.0).map(|(a, b)| a * b).sum();
        Ok(sum / v.len() as f64)
    }
}

/// `τ̂_IND = N⁻¹ Σ_i Σ_j E_ij {Y_i Z_j / r1 − Y_i (1 − Z_j) / r0}`.
pub fn ht_indirect(
    y: &[f64],
    z: &Assignment,
    g: &DirectedGraph,
    d: &Design,
) -> Result<f64, EstimatorError> {
    check_len(g.n(), y.len())?;
    IndirectWeights::new(g, z, d)?.apply(y)
}

/// `τ̂_TOT = τ̂_DIR + τ̂_IND`.
pub fn ht_total(
    y: &[f64],
    z: &Assignment,
    g: &DirectedGraph,
    d: &Design,
) -> Result<f64, EstimatorError> {
    Ok(ht_direct(y, z, d)? + ht_indirect(y, z, g, d)?)
}

/// Both arms must hold at least `max(1, p)` units before fitting.
fn check_arm_sizes(z: &Assignment, p: usize) -> Result<(), EstimatorError> {
    let treated = z.treated_count();
    let needed = p.max(1);
    for (arm, units) in [(0u8, z.len() - treated), (1u8, treated)] {
        if units == 0 {
            return Err(AdjustmentError::EmptyArm(arm).into());
        }
        if units < needed {
            return Err(AdjustmentError::TooFewUnits { arm, units, needed }.into());
        }
    }
    Ok(())
}

/// `τ̂^EV_IND`: the indirect estimator applied to within-arm OLS residuals.
pub fn ev_adjusted_indirect(
    y: &[f64],
    z: &Assignment,
    g: &DirectedGraph,
    w: &Covariates,
    d: &Design,
) -> Result<(f64, ArmRegression), EstimatorError> {
    check_len(g.n(), y.len())?;
    check_len(g.n(), z.len())?;
    check_arm_sizes(z, w.p())?;
    let fit = within_arm_ols(y, z, w)?;
    let point = ht_indirect(&fit.residuals, z, g, d)?;
    Ok((point, fit))
}

/// `τ̂^EV_TOT = τ̂_DIR + τ̂^EV_IND`, with the direct part on raw outcomes.
pub fn ev_adjusted_total(
    y: &[f64],
    z: &Assignment,
    g: &DirectedGraph,
    w: &Covariates,
    d: &Design,
) -> Result<(f64, ArmRegression), EstimatorError> {
    let (ind, fit) = ev_adjusted_indirect(y, z, g, w, d)?;
    Ok((ht_direct(y, z, d)? + ind, fit))
}
