//! Regression-adjustment covariates and within-arm least squares.
//!
//! Covariates are either the top-K eigenvectors of `E Eᵀ` (computed
//! matrix-free by block Lanczos with full reorthogonalization) or structural
//! stratum indicators. Both are whitened so that `N⁻¹ Σ W_i W_iᵀ = I`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::design::Assignment;
use crate::graph::DirectedGraph;

/// Relative eigenvalue cutoff for pseudo-inverses and basis reduction.
pub const RANK_CUTOFF: f64 = 1e-10;

/// Strata smaller than this fraction of the population trigger a warning.
pub const MIN_STRATUM_FRACTION: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdjustmentError {
    #[error("number of eigenvectors K = {k} must satisfy 1 <= K < n = {n}")]
    InvalidK { k: usize, n: usize },
    #[error(
        "eigensolver did not converge after {iterations} block steps; residual norms {residuals:?}"
    )]
    NonConvergence {
        iterations: usize,
        residuals: Vec<f64>,
    },
    #[error("treatment arm {0} has no units")]
    EmptyArm(u8),
    #[error("treatment arm {arm} has {units} units but the regression needs at least {needed}")]
    TooFewUnits {
        arm: u8,
        units: usize,
        needed: usize,
    },
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("stratum {0} has no units")]
    EmptyStratum(usize),
    #[error("stratum label {label} is outside 0..{count}")]
    LabelOutOfRange { label: usize, count: usize },
    #[error("covariates are not whitened (max deviation from identity {0:e})")]
    NotWhitened(f64),
}

/// Regression design matrix `W` (n rows, one column per regressor).
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    w: DMatrix<f64>,
}

impl Covariates {
    pub fn new(w: DMatrix<f64>) -> Self {
        Covariates { w }
    }

    /// The single intercept column (already whitened).
    pub fn intercept_only(n: usize) -> Self {
        Covariates {
            w: DMatrix::from_element(n, 1, 1.0),
        }
    }

    /// No regressors at all: residuals equal the outcomes.
    pub fn empty(n: usize) -> Self {
        Covariates {
            w: DMatrix::zeros(n, 0),
        }
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    /// Number of columns.
    pub fn p(&self) -> usize {
        self.w.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    #[inline]
    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.w[(i, k)]
    }

    /// `‖N⁻¹ WᵀW − I‖_max`.
    pub fn whitening_deviation(&self) -> f64 {
        let n = self.n() as f64;
        let g = self.w.transpose() * &self.w / n;
        let mut dev = 0.0f64;
        for a in 0..g.nrows() {
            for b in 0..g.ncols() {
                let target = if a == b { 1.0 } else { 0.0 };
                dev = dev.max((g[(a, b)] - target).abs());
            }
        }
        dev
    }

    /// Fitted values `W β`.
    pub fn fitted(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.n())
            .map(|i| (0..self.p()).map(|k| self.w[(i, k)] * beta[k]).sum())
            .collect()
    }
}

/// A whitened design together with the rank that survived reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitened {
    pub covariates: Covariates,
    pub rank: usize,
    /// `true` when dependent columns were dropped before whitening.
    pub reduced: bool,
}

/// Whitens `raw` so that `N⁻¹ WᵀW = I`.
///
/// Full-rank input is multiplied by the symmetric inverse square root of its
/// Gram matrix. Rank-deficient input is first reduced to a basis of its
/// column span (the returned matrix then has `rank` columns).
pub fn whiten(raw: &DMatrix<f64>) -> Whitened {
    let n = raw.nrows();
    let p = raw.ncols();
    if p == 0 {
        return Whitened {
            covariates: Covariates::empty(n),
            rank: 0,
            reduced: false,
        };
    }
    let gram = raw.transpose() * raw / n as f64;
    let eig = SymmetricEigen::new(gram);
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let keep: Vec<usize> = (0..p)
        .filter(|&k| eig.eigenvalues[k] > RANK_CUTOFF * max_ev)
        .collect();
    let rank = keep.len();
    if rank == p {
        let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
        let transform = &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();
        Whitened {
            covariates: Covariates::new(raw * transform),
            rank,
            reduced: false,
        }
    } else {
        // Order the kept directions by decreasing eigenvalue for a stable layout.
        let mut keep = keep;
        keep.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut transform = DMatrix::zeros(p, rank);
        for (c, &k) in keep.iter().enumerate() {
            let scale = 1.0 / eig.eigenvalues[k].sqrt();
            for r in 0..p {
                transform[(r, c)] = eig.eigenvectors[(r, k)] * scale;
            }
        }
        Whitened {
            covariates: Covariates::new(raw * transform),
            rank,
            reduced: true,
        }
    }
}

/// Prepends an intercept column to `columns` and whitens the result.
pub fn intercept_and_whiten(columns: &DMatrix<f64>) -> Whitened {
    let n = columns.nrows();
    let mut raw = DMatrix::zeros(n, columns.ncols() + 1);
    raw.column_mut(0).fill(1.0);
    raw.columns_mut(1, columns.ncols()).copy_from(columns);
    whiten(&raw)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumOptions {
    /// Relative Ritz residual tolerance.
    pub tol: f64,
    /// Maximum number of block Lanczos steps.
    pub max_iter: usize,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        SpectrumOptions {
            tol: 1e-10,
            max_iter: 500,
        }
    }
}

/// Top-K spectrum of `E Eᵀ` and the whitened covariates built from it.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    pub k: usize,
    /// `λ_1 ≥ … ≥ λ_K`.
    pub eigenvalues: Vec<f64>,
    /// The (K+1)-th Ritz value.
    pub next_eigenvalue_bound: f64,
    /// Orthonormal eigenvectors, one column per eigenvalue.
    pub eigenvectors: DMatrix<f64>,
    /// Intercept plus eigenvectors, jointly whitened.
    pub covariates: Covariates,
    /// Ritz residual norms of the K+1 reported values.
    pub residual_norms: Vec<f64>,
    pub iterations: usize,
    pub subspace_dim: usize,
    /// Some requested eigenvalue is zero, so its eigenvector is arbitrary.
    pub degenerate: bool,
    /// Set when the intercept and eigenvectors were linearly dependent.
    pub rank_reduced: bool,
}

impl SpectralBasis {
    /// Raw design `[1, V_1, …, V_K]` before whitening.
    pub fn raw_design(&self) -> DMatrix<f64> {
        let n = self.eigenvectors.nrows();
        let mut raw = DMatrix::zeros(n, self.k + 1);
        raw.column_mut(0).fill(1.0);
        raw.columns_mut(1, self.k).copy_from(&self.eigenvectors);
        raw
    }
}

/// Orthonormal basis of a block Krylov space for `E Eᵀ` with the projected
/// operator kept up to date.
struct KrylovBasis<'g> {
    graph: &'g DirectedGraph,
    q: Vec<Vec<f64>>,
    aq: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    scratch: Vec<f64>,
}

impl<'g> KrylovBasis<'g> {
    fn new(graph: &'g DirectedGraph) -> Self {
        KrylovBasis {
            graph,
            q: Vec::new(),
            aq: Vec::new(),
            h: Vec::new(),
            scratch: vec![0.0; graph.n()],
        }
    }

    fn dim(&self) -> usize {
        self.q.len()
    }

    /// Orthogonalizes `v` against the basis (two passes) and appends it unless
    /// it is numerically dependent. Returns whether it was kept.
    fn push(&mut self, mut v: Vec<f64>) -> bool {
        let start = dot(&v, &v).sqrt();
        if start == 0.0 {
            return false;
        }
        for _ in 0..2 {
            for b in &self.q {
                let c = dot(b, &v);
                axpy(-c, b, &mut v);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm <= 1e-9 * start {
            return false;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let mut av = vec![0.0; v.len()];
        self.graph.mul_gram_vec(&v, &mut self.scratch, &mut av);
        let row: Vec<f64> = self.q.iter().map(|b| dot(b, &av)).collect();
        for (r, &val) in self.h.iter_mut().zip(&row) {
            r.push(val);
        }
        let mut last = row;
        last.push(dot(&v, &av));
        self.h.push(last);
        self.q.push(v);
        self.aq.push(av);
        true
    }

    /// Ritz pairs sorted by decreasing value: (values, coefficient vectors).
    fn ritz(&self) -> (Vec<f64>, Vec<DVector<f64>>) {
        let m = self.dim();
        let h = DMatrix::from_fn(m, m, |a, b| 0.5 * (self.h[a][b] + self.h[b][a]));
        let eig = SymmetricEigen::new(h);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let vectors = order
            .iter()
            .map(|&k| eig.eigenvectors.column(k).into_owned())
            .collect();
        (values, vectors)
    }

    fn combine(&self, basis: &[Vec<f64>], coeffs: &DVector<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.graph.n()];
        for (b, &c) in basis.iter().zip(coeffs.iter()) {
            axpy(c, b, &mut out);
        }
        out
    }
}

/// Top-`k` eigenpairs of `E Eᵀ` with `1 <= k < n`.
///
/// Uses block Lanczos with block size `k + 1` and full reorthogonalization so
/// that eigenvalues with multiplicity up to `k + 1` are resolved. When the
/// Krylov space becomes invariant the iteration restarts from fresh random
/// vectors orthogonal to everything found so far.
pub fn top_k_spectrum<R: Rng + ?Sized>(
    graph: &DirectedGraph,
    k: usize,
    opts: &SpectrumOptions,
    rng: &mut R,
) -> Result<SpectralBasis, AdjustmentError> {
    let n = graph.n();
    if k == 0 || k >= n {
        return Err(AdjustmentError::InvalidK { k, n });
    }
    let wanted = k + 1;
    let block = wanted;
    let mut basis = KrylovBasis::new(graph);
    let mut frontier: Vec<usize> = Vec::new();
    let mut residuals = Vec::new();

    for step in 1..=opts.max_iter {
        // Candidates for the next block: the operator applied to the last block.
        let mut candidates: Vec<Vec<f64>> = frontier.iter().map(|&c| basis.aq[c].clone()).collect();
        if candidates.is_empty() {
            candidates = (0..block).map(|_| random_vector(n, rng)).collect();
        }
        let mut added = Vec::new();
        for v in candidates {
            if basis.dim() == n {
                break;
            }
            if basis.push(v) {
                added.push(basis.dim() - 1);
            }
        }
        if added.is_empty() && basis.dim() < n {
            // Invariant subspace: restart from random directions.
            for _ in 0..block {
                if basis.dim() < n && basis.push(random_vector(n, rng)) {
                    added.push(basis.dim() - 1);
                }
            }
        }
        frontier = added;

        if basis.dim() < wanted {
            continue;
        }
        let (values, vectors) = basis.ritz();
        let scale = values[0].abs().max(f64::MIN_POSITIVE);
        residuals = (0..wanted)
            .map(|idx| {
                let y = basis.combine(&basis.q, &vectors[idx]);
                let ay = basis.combine(&basis.aq, &vectors[idx]);
                ay.iter()
                    .zip(&y)
                    .map(|(a, b)| (a - values[idx] * b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect::<Vec<_>>();
        let exhausted = basis.dim() == n;
        let converged = residuals.iter().all(|&r| r <= opts.tol * scale);
        if converged || exhausted {
            let mut eigenvectors = DMatrix::zeros(n, k);
            for (idx, coeffs) in vectors.iter().take(k).enumerate() {
                let y = basis.combine(&basis.q, coeffs);
                eigenvectors.column_mut(idx).copy_from_slice(&y);
            }
            let eigenvalues: Vec<f64> = values[..k].iter().map(|v| v.max(0.0)).collect();
            let next = values[k].max(0.0);
            let degenerate = eigenvalues[k - 1] <= 1e-12 * eigenvalues[0].max(1.0);
            let mut raw = DMatrix::zeros(n, k + 1);
            raw.column_mut(0).fill(1.0);
            raw.columns_mut(1, k).copy_from(&eigenvectors);
            let whitened = whiten(&raw);
            return Ok(SpectralBasis {
                k,
                eigenvalues,
                next_eigenvalue_bound: next,
                eigenvectors,
                covariates: whitened.covariates,
                residual_norms: residuals,
                iterations: step,
                subspace_dim: basis.dim(),
                degenerate,
                rank_reduced: whitened.reduced,
            });
        }
    }
    Err(AdjustmentError::NonConvergence {
        iterations: opts.max_iter,
        residuals,
    })
}

fn random_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Per-arm least-squares fit of outcomes on `W`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmRegression {
    pub beta1: Vec<f64>,
    pub beta0: Vec<f64>,
    /// `ê_i = Y_i − β̂_{Z_i}ᵀ W_i`.
    pub residuals: Vec<f64>,
    /// Arm Gram matrix was singular (index 0: control, 1: treated).
    pub rank_deficient: [bool; 2],
}

impl ArmRegression {
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (arm, &flag) in self.rank_deficient.iter().enumerate() {
            if flag {
                out.push(format!(
                    "arm {arm} Gram matrix is rank deficient; used minimum-norm fit"
                ));
            }
        }
        out
    }
}

/// Least squares of `y` on `w` separately within the treated and control arms.
///
/// Singular arm Gram matrices are inverted with a truncated
/// pseudo-inverse (relative cutoff [`RANK_CUTOFF`]).
pub fn within_arm_ols(
    y: &[f64],
    z: &Assignment,
    w: &Covariates,
) -> Result<ArmRegression, AdjustmentError> {
    let n = y.len();
    for len in [z.len(), w.n()] {
        if len != n {
            return Err(AdjustmentError::LengthMismatch {
                expected: n,
                actual: len,
            });
        }
    }
    let p = w.p();
    let mut fits: [(Vec<f64>, bool); 2] = [(Vec::new(), false), (Vec::new(), false)];
    for arm in [0u8, 1u8] {
        let treated = arm == 1;
        let members: Vec<usize> = (0..n).filter(|&i| z.is_treated(i) == treated).collect();
        if members.is_empty() {
            return Err(AdjustmentError::EmptyArm(arm));
        }
        let mut gram = DMatrix::<f64>::zeros(p, p);
        let mut rhs = DVector::<f64>::zeros(p);
        for &i in &members {
            for a in 0..p {
                let wa = w.get(i, a);
                rhs[a] += wa * y[i];
                for b in a..p {
                    gram[(a, b)] += wa * w.get(i, b);
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        fits[arm as usize] = pseudo_solve(gram, &rhs);
    }
    let [(beta0, def0), (beta1, def1)] = fits;
    let residuals = (0..n)
        .map(|i| {
            let beta = if z.is_treated(i) { &beta1 } else { &beta0 };
            y[i] - (0..p).map(|k| w.get(i, k) * beta[k]).sum::<f64>()
        })
        .collect();
    Ok(ArmRegression {
        beta1,
        beta0,
        residuals,
        rank_deficient: [def0, def1],
    })
}

/// Minimum-norm solution of `gram · β = rhs`; the flag reports truncation.
fn pseudo_solve(gram: DMatrix<f64>, rhs: &DVector<f64>) -> (Vec<f64>, bool) {
    let p = gram.nrows();
    if p == 0 {
        return (Vec::new(), false);
    }
    let eig = SymmetricEigen::new(gram);
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let proj = eig.eigenvectors.transpose() * rhs;
    let mut deficient = false;
    let scaled = DVector::from_fn(p, |k, _| {
        let ev = eig.eigenvalues[k];
        if ev > RANK_CUTOFF * max_ev {
            proj[k] / ev
        } else {
            deficient = true;
            0.0
        }
    });
    let beta = &eig.eigenvectors * scaled;
    (beta.iter().copied().collect(), deficient)
}

/// Stratum membership with an explicit number of strata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StratumLabels {
    labels: Vec<usize>,
    count: usize,
}

impl StratumLabels {
    pub fn new(labels: Vec<usize>, count: usize) -> Result<Self, AdjustmentError> {
        if let Some(&label) = labels.iter().find(|&&l| l >= count) {
            return Err(AdjustmentError::LabelOutOfRange { label, count });
        }
        Ok(StratumLabels { labels, count })
    }

    /// Number of strata taken as `max(label) + 1`.
    pub fn from_labels(labels: Vec<usize>) -> Self {
        let count = labels.iter().max().map_or(0, |m| m + 1);
        StratumLabels { labels, count }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

/// Kinds of structural regressors.
#[derive(Debug, Clone, Copy)]
pub enum StructuralKind<'a> {
    /// Intercept plus one indicator per non-reference stratum.
    MergedGroups(&'a StratumLabels),
    /// Intercept plus row-stratum and column-stratum main effects.
    TwoWay {
        rows: &'a StratumLabels,
        cols: &'a StratumLabels,
    },
}

#[derive(Debug, Clone)]
pub struct StructuralCovariates {
    pub covariates: Covariates,
    pub rank: usize,
    pub warnings: Vec<String>,
}

/// Whitened stratum-indicator covariates.
pub fn structural_covariates(
    kind: StructuralKind<'_>,
) -> Result<StructuralCovariates, AdjustmentError> {
    let factors: Vec<&StratumLabels> = match kind {
        StructuralKind::MergedGroups(s) => vec![s],
        StructuralKind::TwoWay { rows, cols } => {
            if rows.labels.len() != cols.labels.len() {
                return Err(AdjustmentError::LengthMismatch {
                    expected: rows.labels.len(),
                    actual: cols.labels.len(),
                });
            }
            vec![rows, cols]
        }
    };
    let n = factors[0].labels.len();
    let mut warnings = Vec::new();
    for f in &factors {
        for (s, &size) in f.sizes().iter().enumerate() {
            if size == 0 {
                return Err(AdjustmentError::EmptyStratum(s));
            }
            if (size as f64) < MIN_STRATUM_FRACTION * n as f64 {
                warnings.push(format!(
                    "stratum {s} has {size} of {n} units; strata should be comparable to the population size"
                ));
            }
        }
    }
    let extra: usize = factors.iter().map(|f| f.count - 1).sum();
    let mut raw = DMatrix::zeros(n, 1 + extra);
    raw.column_mut(0).fill(1.0);
    let mut col = 1;
    for f in &factors {
        for s in 1..f.count {
            for (i, &l) in f.labels.iter().enumerate() {
                if l == s {
                    raw[(i, col)] = 1.0;
                }
            }
            col += 1;
        }
    }
    let whitened = whiten(&raw);
    if whitened.reduced {
        warnings.push(format!(
            "stratum indicators are collinear; reduced {} columns to rank {}",
            raw.ncols(),
            whitened.rank
        ));
    }
    Ok(StructuralCovariates {
        covariates: whitened.covariates,
        rank: whitened.rank,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::replication_stream;
    use crate::generators::{marketplace_graph, partial_interference_graph};

    #[test]
    fn intercept_regression_demeans_by_arm() {
        let y = [1.0, 2.0, 3.0, 10.0, 20.0];
        let z = Assignment::from_bits(&[1, 1, 1, 0, 0]);
        let fit = within_arm_ols(&y, &z, &Covariates::intercept_only(5)).unwrap();
        assert!((fit.beta1[0] - 2.0).abs() < 1e-12);
        assert!((fit.beta0[0] - 15.0).abs() < 1e-12);
        let expected = [-1.0, 0.0, 1.0, -5.0, 5.0];
        for (r, e) in fit.residuals.iter().zip(expected) {
            assert!((r - e).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_linear_signal_has_zero_residuals() {
        let n = 12;
        let raw = DMatrix::from_fn(n, 3, |i, k| match k {
            0 => 1.0,
            1 => (i as f64 * 0.7).sin(),
            _ => (i as f64).sqrt(),
        });
        let w = Covariates::new(raw);
        let y: Vec<f64> = (0..n).map(|i| 3.0 * w.get(i, 1)).collect();
        let z = Assignment::from_bits(&[1, 0, 1, 0, 1, 1, 0, 0, 1, 0, 1, 0]);
        let fit = within_arm_ols(&y, &z, &w).unwrap();
        assert!(fit.residuals.iter().all(|r| r.abs() < 1e-12));
        for beta in [&fit.beta1, &fit.beta0] {
            assert!(
                beta[0].abs() < 1e-10 && (beta[1] - 3.0).abs() < 1e-10 && beta[2].abs() < 1e-10
            );
        }
    }

    #[test]
    fn empty_arm_is_an_error() {
        let z = Assignment::all(3, true);
        let err = within_arm_ols(&[1.0, 2.0, 3.0], &z, &Covariates::intercept_only(3));
        assert_eq!(err, Err(AdjustmentError::EmptyArm(0)));
    }

    #[test]
    fn singular_gram_uses_pseudo_inverse() {
        let raw = DMatrix::from_fn(6, 2, |_, _| 1.0);
        let z = Assignment::from_bits(&[1, 0, 1, 0, 1, 0]);
        let y = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let fit = within_arm_ols(&y, &z, &Covariates::new(raw)).unwrap();
        assert_eq!(fit.rank_deficient, [true, true]);
        assert!((fit.beta1[0] - 1.5).abs() < 1e-10 && (fit.beta1[1] - 1.5).abs() < 1e-10);
        assert_eq!(fit.warnings().len(), 2);
    }

    #[test]
    fn whiten_handles_dependent_columns() {
        let raw = DMatrix::from_fn(8, 3, |i, k| {
            if k == 2 {
                2.0
            } else if k == 0 {
                1.0
            } else {
                i as f64
            }
        });
        let w = whiten(&raw);
        assert!(w.reduced);
        assert_eq!(w.rank, 2);
        assert!(w.covariates.whitening_deviation() < 1e-10);
    }

    #[test]
    fn merged_groups_one_stratum_is_intercept() {
        let labels = StratumLabels::from_labels(vec![0; 7]);
        let s = structural_covariates(StructuralKind::MergedGroups(&labels)).unwrap();
        assert_eq!(s.covariates.p(), 1);
        assert!(s
            .covariates
            .matrix()
            .iter()
            .all(|v| (v.abs() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn merged_groups_three_strata_whitened() {
        let labels = StratumLabels::from_labels((0..9).map(|i| i / 3).collect());
        let s = structural_covariates(StructuralKind::MergedGroups(&labels)).unwrap();
        assert_eq!(s.covariates.p(), 3);
        assert!(s.covariates.whitening_deviation() < 1e-12);
        assert!(s.warnings.is_empty());
    }

    #[test]
    fn empty_stratum_rejected_and_small_stratum_warned() {
        let labels = StratumLabels::new(vec![0, 0, 2], 3).unwrap();
        assert_eq!(
            structural_covariates(StructuralKind::MergedGroups(&labels)).unwrap_err(),
            AdjustmentError::EmptyStratum(1)
        );
        let mut l = vec![0usize; 100];
        l[0] = 1;
        let labels = StratumLabels::from_labels(l);
        let s = structural_covariates(StructuralKind::MergedGroups(&labels)).unwrap();
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn block_graph_spectrum() {
        let g = partial_interference_graph(3, 2);
        let mut rng = replication_stream(1, 0);
        let s = top_k_spectrum(&g, 2, &SpectrumOptions::default(), &mut rng).unwrap();
        assert!((s.eigenvalues[0] - 4.0).abs() < 1e-8);
        assert!((s.eigenvalues[1] - 4.0).abs() < 1e-8);
        assert!((s.next_eigenvalue_bound - 1.0).abs() < 1e-8);
        assert!(s.covariates.whitening_deviation() < 1e-8);
    }

    #[test]
    fn marketplace_ninth_value() {
        let g = marketplace_graph(4, 4);
        let mut rng = replication_stream(5, 0);
        let s = top_k_spectrum(&g, 7, &SpectrumOptions::default(), &mut rng).unwrap();
        assert!((s.eigenvalues[0] - 36.0).abs() < 1e-8);
        assert!((s.next_eigenvalue_bound - 4.0).abs() < 1e-8);
        // top eigenvector is constant, so the intercept is redundant
        assert!(s.rank_reduced);
    }

    #[test]
    fn edgeless_spectrum_is_degenerate() {
        let g = DirectedGraph::edgeless(5);
        let mut rng = replication_stream(3, 0);
        let s = top_k_spectrum(&g, 1, &SpectrumOptions::default(), &mut rng).unwrap();
        assert_eq!(s.eigenvalues, vec![0.0]);
        assert!(s.degenerate);
        assert_eq!(s.covariates.p(), 2);
        assert!(s.covariates.whitening_deviation() < 1e-8);
    }

    #[test]
    fn invalid_k() {
        let g = DirectedGraph::edgeless(3);
        let mut rng = replication_stream(3, 0);
        assert!(top_k_spectrum(&g, 3, &SpectrumOptions::default(), &mut rng).is_err());
        assert!(top_k_spectrum(&g, 0, &SpectrumOptions::default(), &mut rng).is_err());
    }
}
