//! Heterogeneous additive treatment effect (HATE) outcome model.
//!
//! Every potential outcome is `Y_i(z) = α_i + θ_i z_i + Σ_j γ̃_ij z_j`, with
//! `γ̃` supported on a [`HiddenNetwork`]. The spillover values are stored in
//! the hidden network's CSR order, so `γ̃_ij = 0` off the hidden edges holds
//! by construction.

use serde::Serialize;
use thiserror::Error;

use crate::design::Assignment;
use crate::graph::HiddenNetwork;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("spillover ({0}, {1}) is not on a hidden edge")]
    OffSupport(usize, usize),
    #[error("non-finite parameter value")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HateParameters {
    alpha: Vec<f64>,
    theta: Vec<f64>,
    hidden: HiddenNetwork,
    gamma: Vec<f64>,
}

/// Population-level estimands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimands {
    pub tau_dir: f64,
    pub tau_ind: f64,
    pub tau_tot: f64,
}

/// The three maxima bounded by the model's boundedness assumption.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundDiagnostic {
    pub max_abs_alpha: f64,
    pub max_abs_theta: f64,
    pub max_scaled_gamma: f64,
}

impl HateParameters {
    /// `gamma` holds one value per hidden edge in row-major order
    /// (see [`HiddenNetwork::edges`]).
    pub fn new(
        alpha: Vec<f64>,
        theta: Vec<f64>,
        hidden: HiddenNetwork,
        gamma: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let n = hidden.n();
        check_len(n, alpha.len())?;
        check_len(n, theta.len())?;
        check_len(hidden.edge_count(), gamma.len())?;
        if alpha
            .iter()
            .chain(&theta)
            .chain(&gamma)
            .any(|v| !v.is_finite())
        {
            return Err(ModelError::NonFinite);
        }
        Ok(HateParameters {
            alpha,
            theta,
            hidden,
            gamma,
        })
    }

    /// Builds parameters from `(i, j, γ̃_ij)` triplets; every triplet must sit
    /// on a hidden edge and hidden edges without a triplet get zero.
    pub fn from_triplets(
        alpha: Vec<f64>,
        theta: Vec<f64>,
        hidden: HiddenNetwork,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self, ModelError> {
        let mut gamma = vec![0.0; hidden.edge_count()];
        for &(i, j, g) in triplets {
            let slot = hidden_slot(&hidden, i, j).ok_or(ModelError::OffSupport(i, j))?;
            gamma[slot] = g;
        }
        Self::new(alpha, theta, hidden, gamma)
    }

    pub fn n(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn hidden(&self) -> &HiddenNetwork {
        &self.hidden
    }

    /// Spillover values aligned with the hidden edges of row `i`.
    #[inline]
    pub fn gamma_row(&self, i: usize) -> (&[usize], &[f64]) {
        let adj = &self.hidden.adjacency;
        let range = adj.row_ptr[i]..adj.row_ptr[i + 1];
        (&adj.cols[range.clone()], &self.gamma[range])
    }

    /// `γ̃_ij`, zero off the hidden support.
    pub fn gamma(&self, i: usize, j: usize) -> f64 {
        hidden_slot(&self.hidden, i, j).map_or(0.0, |s| self.gamma[s])
    }

    pub fn gamma_values(&self) -> &[f64] {
        &self.gamma
    }

    /// Nonzero-pattern triplets `(i, j, γ̃_ij)` over hidden edges.
    pub fn gamma_entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.hidden
            .edges()
            .zip(self.gamma.iter())
            .map(|((i, j), &g)| (i, j, g))
    }

    /// Total spillover received by each unit, `h_i = Σ_j γ̃_ij`.
    pub fn spillover_sums(&self) -> Vec<f64> {
        (0..self.n())
            .map(|i| self.gamma_row(i).1.iter().sum())
            .collect()
    }

    /// Same hidden network and spillovers, new baseline and direct effects.
    pub fn with_unit_effects(&self, alpha: Vec<f64>, theta: Vec<f64>) -> Result<Self, ModelError> {
        Self::new(alpha, theta, self.hidden.clone(), self.gamma.clone())
    }

    /// Observed outcomes `Y(z)`.
    pub fn realize_outcomes(&self, z: &Assignment) -> Result<Vec<f64>, ModelError> {
        check_len(self.n(), z.len())?;
        Ok((0..self.n())
            .map(|i| {
                let (cols, vals) = self.gamma_row(i);
                let spill: f64 = cols
                    .iter()
                    .zip(vals)
                    .filter(|(&j, _)| z.is_treated(j))
                    .map(|(_, &g)| g)
                    .sum();
                self.alpha[i] + self.theta[i] * z.value(i) + spill
            })
            .collect())
    }

    pub fn true_estimands(&self) -> Estimands {
        let n = self.n() as f64;
        let tau_dir = self.theta.iter().sum::<f64>() / n;
        let tau_ind = self.gamma.iter().sum::<f64>() / n;
        Estimands {
            tau_dir,
            tau_ind,
            tau_tot: tau_dir + tau_ind,
        }
    }

    pub fn bound_diagnostic(&self) -> BoundDiagnostic {
        let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let max_scaled_gamma = (0..self.n())
            .map(|i| {
                let (cols, vals) = self.gamma_row(i);
                cols.len() as f64 * max_abs(vals)
            })
            .fold(0.0, f64::max);
        BoundDiagnostic {
            max_abs_alpha: max_abs(&self.alpha),
            max_abs_theta: max_abs(&self.theta),
            max_scaled_gamma,
        }
    }
}

fn hidden_slot(hidden: &HiddenNetwork, i: usize, j: usize) -> Option<usize> {
    let adj = &hidden.adjacency;
    if i >= adj.n() {
        return None;
    }
    adj.row(i)
        .binary_search(&j)
        .ok()
        .map(|k| adj.row_ptr[i] + k)
}

fn check_len(expected: usize, actual: usize) -> Result<(), ModelError> {
    if expected == actual {
        Ok(())
    } else {
        Err(ModelError::LengthMismatch { expected, actual })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::DirectedGraph;

    fn small() -> HateParameters {
        let g = DirectedGraph::from_edge_list(&[(0, 1), (1, 2), (2, 0), (1, 0)], 3).unwrap();
        let h = HiddenNetwork::full(&g);
        HateParameters::from_triplets(
            vec![1.0, 2.0, 3.0],
            vec![0.5, -1.0, 2.0],
            h,
            &[(0, 1, 0.3), (1, 2, -0.2), (2, 0, 0.7), (1, 0, 0.1)],
        )
        .unwrap()
    }

    #[test]
    fn all_control_gives_alpha() {
        let p = small();
        assert_eq!(
            p.realize_outcomes(&Assignment::all(3, false)).unwrap(),
            p.alpha()
        );
    }

    #[test]
    fn single_treated_unit() {
        let p = small();
        for i in 0..3 {
            let y = p.realize_outcomes(&Assignment::unit(3, i)).unwrap();
            for (k, &yk) in y.iter().enumerate() {
                let expected = if k == i {
                    p.alpha()[k] + p.theta()[k]
                } else {
                    p.alpha()[k] + p.gamma(k, i)
                };
                assert!((yk - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn estimands_simple_cases() {
        let g = DirectedGraph::from_edge_list(&[(0, 1)], 4).unwrap();
        let p = HateParameters::new(
            vec![0.0; 4],
            vec![2.0; 4],
            HiddenNetwork::edgeless(4),
            vec![],
        )
        .unwrap();
        let e = p.true_estimands();
        assert_eq!((e.tau_dir, e.tau_ind, e.tau_tot), (2.0, 0.0, 2.0));

        let p = HateParameters::from_triplets(
            vec![0.0; 4],
            vec![0.0; 4],
            HiddenNetwork::full(&g),
            &[(0, 1, 3.0)],
        )
        .unwrap();
        let e = p.true_estimands();
        assert_eq!((e.tau_dir, e.tau_ind, e.tau_tot), (0.0, 0.75, 0.75));
    }

    #[test]
    fn tot_matches_all_treated_minus_all_control() {
        let p = small();
        let y1 = p.realize_outcomes(&Assignment::all(3, true)).unwrap();
        let y0 = p.realize_outcomes(&Assignment::all(3, false)).unwrap();
        let diff = y1.iter().zip(&y0).map(|(a, b)| a - b).sum::<f64>() / 3.0;
        assert!((p.true_estimands().tau_tot - diff).abs() < 1e-12);
    }

    #[test]
    fn off_support_rejected() {
        let g = DirectedGraph::from_edge_list(&[(0, 1)], 2).unwrap();
        let err = HateParameters::from_triplets(
            vec![0.0; 2],
            vec![0.0; 2],
            HiddenNetwork::full(&g),
            &[(1, 0, 1.0)],
        );
        assert_eq!(err, Err(ModelError::OffSupport(1, 0)));
    }

    #[test]
    fn length_mismatch() {
        let p = small();
        assert!(matches!(
            p.realize_outcomes(&Assignment::all(2, true)),
            Err(ModelError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn bound_diagnostic_reports_maxima() {
        let b = small().bound_diagnostic();
        assert_eq!(b.max_abs_alpha, 3.0);
        assert_eq!(b.max_abs_theta, 2.0);
        // unit 1 gives 2 * 0.2, unit 2 gives 1 * 0.7
        assert!((b.max_scaled_gamma - 0.7).abs() < 1e-15);
    }
}
