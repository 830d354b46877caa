//! Exact finite-population verification.
//!
//! Enumerates every assignment for small populations and evaluates the
//! closed-form variance decompositions, conditional means and oracle
//! regression residuals used to cross-check the estimators.

use serde::Serialize;
use thiserror::Error;

use crate::adjustment::Covariates;
use crate::design::{Assignment, Design};
use crate::estimators::{ht_direct, ht_indirect, IndirectWeights};
use crate::graph::DirectedGraph;
use crate::hate_model::{HateParameters, ModelError};
use crate::variance::{var_dir_hat, var_ind_hat, var_tot_hat};

/// Default population cap for enumeration.
pub const DEFAULT_MAX_N: usize = 14;
/// Absolute cap, reachable only through an explicit override.
pub const HARD_MAX_N: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error(
        "enumeration over n = {n} units needs {assignments} assignments; the cap is n = {max_n}"
    )]
    TooLarge {
        n: usize,
        max_n: usize,
        assignments: u64,
    },
    #[error("requested cap {0} exceeds the hard limit of {HARD_MAX_N}")]
    CapTooHigh(usize),
    #[error("graph has {graph} units but parameters have {params}")]
    SizeMismatch { graph: usize, params: usize },
    #[error("covariates are not whitened (max deviation {0:e})")]
    NotWhitened(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Neumaier compensated sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::default();
        for x in iter {
            s.add(x);
        }
        s
    }
}

fn csum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<CompensatedSum>().value()
}

/// Exact design moments of a statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
}

/// Statistics known to the enumeration oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Statistic {
    Constant(f64),
    TauDir,
    TauInd,
    TauTot,
    VarDir,
    VarInd,
    VarTot,
}

fn check_cap(n: usize, max_n: usize) -> Result<(), OracleError> {
    if max_n > HARD_MAX_N {
        return Err(OracleError::CapTooHigh(max_n));
    }
    if n > max_n {
        return Err(OracleError::TooLarge {
            n,
            max_n,
            assignments: 1u64 << n.min(63),
        });
    }
    Ok(())
}

/// Visits every assignment in Gray-code order with the realized outcomes and
/// its probability. Outcomes are updated incrementally on each single flip.
pub fn for_each_assignment<F>(
    p: &HateParameters,
    d: &Design,
    max_n: usize,
    mut visit: F,
) -> Result<(), OracleError>
where
    F: FnMut(&[f64], &Assignment, f64),
{
    let n = p.n();
    check_cap(n, max_n)?;
    // affected[j] lists (i, γ̃_ij): units whose outcome moves when j flips.
    let mut affected: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (i, j, g) in p.gamma_entries() {
        affected[j].push((i, g));
    }
    let r1_pow: Vec<f64> = (0..=n).map(|k| d.r1().powi(k as i32)).collect();
    let r0_pow: Vec<f64> = (0..=n).map(|k| d.r0().powi(k as i32)).collect();
    let mut z = Assignment::all(n, false);
    let mut y = p.alpha().to_vec();
    let mut treated = 0usize;
    visit(&y, &z, r0_pow[n]);
    for step in 1u64..(1u64 << n) {
        let k = step.trailing_zeros() as usize;
        let sign = if z.is_treated(k) { -1.0 } else { 1.0 };
        z.flip(k);
        if sign > 0.0 {
            treated += 1;
        } else {
            treated -= 1;
        }
        y[k] += sign * p.theta()[k];
        for &(i, g) in &affected[k] {
            y[i] += sign * g;
        }
        visit(&y, &z, r1_pow[treated] * r0_pow[n - treated]);
    }
    Ok(())
}

/// Exact moments of `width` statistics computed by `stat` in one sweep.
///
/// Values are stored and reduced in two compensated passes.
pub fn enumerate_with<F>(
    p: &HateParameters,
    d: &Design,
    max_n: usize,
    width: usize,
    mut stat: F,
) -> Result<Vec<Moments>, OracleError>
where
    F: FnMut(&[f64], &Assignment, &mut [f64]),
{
    let mut probs = Vec::new();
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); width];
    let mut buf = vec![0.0; width];
    for_each_assignment(p, d, max_n, |y, z, prob| {
        stat(y, z, &mut buf);
        probs.push(prob);
        for (col, &v) in values.iter_mut().zip(&buf) {
            col.push(v);
        }
    })?;
    Ok(values
        .iter()
        .map(|col| {
            let mean = csum(col.iter().zip(&probs).map(|(v, w)| v * w));
            let variance = csum(col.iter().zip(&probs).map(|(v, w)| w * (v - mean).powi(2)));
            Moments { mean, variance }
        })
        .collect())
}

/// Exact moments of the requested statistics over all `2ⁿ` assignments.
pub fn enumerate_moments(
    p: &HateParameters,
    g: &DirectedGraph,
    d: &Design,
    stats: &[Statistic],
    max_n: usize,
) -> Result<Vec<Moments>, OracleError> {
    if g.n() != p.n() {
        return Err(OracleError::SizeMismatch {
            graph: g.n(),
            params: p.n(),
        });
    }
    enumerate_with(p, d, max_n, stats.len(), |y, z, out| {
        let dir = ht_direct(y, z, d).expect("lengths checked");
        let ind = ht_indirect(y, z, g, d).expect("lengths checked");
        for (slot, s) in out.iter_mut().zip(stats) {
            *slot = match s {
                Statistic::Constant(c) => *c,
                Statistic::TauDir => dir,
                Statistic::TauInd => ind,
                Statistic::TauTot => dir + ind,
                Statistic::VarDir => var_dir_hat(y, z, d).expect("lengths checked"),
                Statistic::VarInd => var_ind_hat(y, z, g, d).expect("lengths checked"),
                Statistic::VarTot => var_tot_hat(y, z, g, d).expect("lengths checked"),
            };
        }
    })
}

/// Closed-form conditional expectations of outcomes.
#[derive(Debug, Clone)]
pub struct ConditionalMeans<'a> {
    params: &'a HateParameters,
    h: Vec<f64>,
    r1: f64,
}

impl<'a> ConditionalMeans<'a> {
    /// `Y_{Z_i=z} = α_i + θ_i z + r1 Σ_j γ̃_ij`.
    pub fn single(&self, i: usize, z: bool) -> f64 {
        let zi = if z { 1.0 } else { 0.0 };
        self.params.alpha()[i] + self.params.theta()[i] * zi + self.r1 * self.h[i]
    }

    /// `Y^{Z_j=zj}_{Z_i=zi} = α_i + θ_i zi + γ̃_ij zj + r1 Σ_{k∉{i,j}} γ̃_ik`.
    pub fn pair(&self, i: usize, zi: bool, j: usize, zj: bool) -> f64 {
        let g = self.params.gamma(i, j);
        let zi = if zi { 1.0 } else { 0.0 };
        let zj = if zj { 1.0 } else { 0.0 };
        self.params.alpha()[i] + self.params.theta()[i] * zi + g * zj + self.r1 * (self.h[i] - g)
    }

    /// `r1 r0 Y^{11} + r0² Y^{Z_j=1}_{Z_i=0} + r1² Y^{Z_j=0}_{Z_i=1} + r1 r0 Y^{00}`.
    fn pair_combination(&self, i: usize, j: usize) -> f64 {
        let r1 = self.r1;
        let r0 = 1.0 - r1;
        r1 * r0 * self.pair(i, true, j, true)
            + r0 * r0 * self.pair(i, false, j, true)
            + r1 * r1 * self.pair(i, true, j, false)
            + r1 * r0 * self.pair(i, false, j, false)
    }

    /// `r0 Y_{Z_i=1} + r1 Y_{Z_i=0}`.
    fn ego_combination(&self, i: usize) -> f64 {
        (1.0 - self.r1) * self.single(i, true) + self.r1 * self.single(i, false)
    }
}

pub fn conditional_means<'a>(p: &'a HateParameters, d: &Design) -> ConditionalMeans<'a> {
    ConditionalMeans {
        params: p,
        h: p.spillover_sums(),
        r1: d.r1(),
    }
}

/// `Var = component1 + component2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceDecomposition {
    pub component1: f64,
    pub component2: f64,
    pub total: f64,
}

impl VarianceDecomposition {
    fn new(component1: f64, component2: f64) -> Self {
        VarianceDecomposition {
            component1,
            component2,
            total: component1 + component2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceKind {
    Dir,
    Ind,
    Tot,
}

/// Closed-form variance of `τ̂_DIR`, `τ̂_IND` or `τ̂_TOT`.
pub fn closed_form_variance(
    kind: VarianceKind,
    p: &HateParameters,
    g: &DirectedGraph,
    d: &Design,
) -> Result<VarianceDecomposition, OracleError> {
    let (ego, neighbor) = match kind {
        VarianceKind::Dir => (Some(p), None),
        VarianceKind::Ind => (None, Some(p)),
        VarianceKind::Tot => (Some(p), Some(p)),
    };
    mixed_closed_form(ego, neighbor, g, d)
}

/// Closed-form variance of `N⁻¹ Σ_i {a_i(Z_i/r1 − (1−Z_i)/r0) + b_i w_i}` where
/// `a` follows the `ego` model, `b` the `neighbor` model and `w` are the
/// indirect weights. Both models must share the same spillovers.
///
/// This covers the plain estimators and the oracle-adjusted ones, whose
/// residuals form a HATE model with shifted baseline and direct effects.
pub fn mixed_closed_form(
    ego: Option<&HateParameters>,
    neighbor: Option<&HateParameters>,
    g: &DirectedGraph,
    d: &Design,
) -> Result<VarianceDecomposition, OracleError> {
    let n = g.n();
    for p in ego.iter().chain(neighbor.iter()) {
        if p.n() != n {
            return Err(OracleError::SizeMismatch {
                graph: n,
                params: p.n(),
            });
        }
    }
    let (r1, r0) = (d.r1(), d.r0());
    let nf = n as f64;
    let ego_means = ego.map(|p| conditional_means(p, d));
    let nb_means = neighbor.map(|p| conditional_means(p, d));

    // First-order (Hájek projection) terms.
    let comp1 = csum((0..n).map(|i| {
        let mut f = ego_means.as_ref().map_or(0.0, |m| m.ego_combination(i));
        if let Some(m) = &nb_means {
            f += csum(g.in_neighbors(i).iter().map(|&j| m.pair_combination(j, i)));
        }
        f * f
    })) / (nf * nf * r1 * r0);

    // Second-order terms: B_ij = [ego] γ̃_ji + [neighbor] (E_ij θ_i + Σ_k E_kj γ̃_ki).
    let mut b = vec![0.0; n * n];
    if let Some(p) = ego {
        for (j, i, gv) in p.gamma_entries() {
            b[i * n + j] += gv;
        }
    }
    if let Some(p) = neighbor {
        for i in 0..n {
            for &j in g.out_neighbors(i) {
                b[i * n + j] += p.theta()[i];
            }
        }
        for (k, i, gv) in p.gamma_entries() {
            for &j in g.out_neighbors(k) {
                b[i * n + j] += gv;
            }
        }
    }
    let comp2 = csum((0..n).flat_map(|i| {
        let b = &b;
        (0..n)
            .filter(move |&j| j != i)
            .map(move |j| b[i * n + j] * (b[i * n + j] + b[j * n + i]))
    })) / (nf * nf);
    Ok(VarianceDecomposition::new(comp1, comp2))
}

/// `E[V̂_DIR] − Var(τ̂_DIR) = N⁻² Σ θ_i² − N⁻² Σ_i Σ_j γ̃_ij γ̃_ji`.
pub fn dir_variance_bias(p: &HateParameters) -> f64 {
    let n = p.n() as f64;
    let theta2 = csum(p.theta().iter().map(|t| t * t));
    let cross = csum(p.gamma_entries().map(|(i, j, g)| g * p.gamma(j, i)));
    (theta2 - cross) / (n * n)
}

/// Fixed-coefficient regression of conditional means on `W`.
#[derive(Debug, Clone)]
pub struct OracleResiduals {
    /// `β_{1,ora} = N⁻¹ Σ W_i Y_{Z_i=1}`.
    pub beta1: Vec<f64>,
    /// `β_{0,ora} = N⁻¹ Σ W_i Y_{Z_i=0}`.
    pub beta0: Vec<f64>,
    /// Oracle residuals as a HATE model: `(α − β0ᵀW, θ − (β1 − β0)ᵀW, γ̃)`.
    pub residual_model: HateParameters,
    /// `e_{Z_i=z}` as `[z = 0, z = 1]`.
    pub conditional: Vec<[f64; 2]>,
    /// `N⁻¹ max_z Σ_i (Σ_j E_ji e_{Z_j=z})²`.
    pub delta_n: f64,
    /// Variance of the oracle-residual indirect estimator.
    pub ev_ind: VarianceDecomposition,
    /// Variance of `τ̂_DIR(Y) + τ̂_IND(e)`.
    pub ev_tot: VarianceDecomposition,
}

impl OracleResiduals {
    /// `e(z) = Y(z) − β_{z_i}ᵀ W_i` for a concrete assignment.
    pub fn realize(&self, z: &Assignment) -> Result<Vec<f64>, ModelError> {
        self.residual_model.realize_outcomes(z)
    }
}

/// Oracle regression coefficients, residual model, `Δ_N` and the adjusted
/// variance decompositions. `w` must be whitened.
pub fn oracle_adjustment(
    p: &HateParameters,
    g: &DirectedGraph,
    w: &Covariates,
    d: &Design,
) -> Result<OracleResiduals, OracleError> {
    let n = p.n();
    if g.n() != n || w.n() != n {
        return Err(OracleError::SizeMismatch {
            graph: g.n(),
            params: n,
        });
    }
    let dev = w.whitening_deviation();
    if dev > 1e-8 {
        return Err(OracleError::NotWhitened(dev));
    }
    let nf = n as f64;
    let cm = conditional_means(p, d);
    let k = w.p();
    let beta = |z: bool| -> Vec<f64> {
        (0..k)
            .map(|c| csum((0..n).map(|i| w.get(i, c) * cm.single(i, z))) / nf)
            .collect()
    };
    let beta1 = beta(true);
    let beta0 = beta(false);
    let fit0 = w.fitted(&beta0);
    let fit_diff = w.fitted(
        &beta1
            .iter()
            .zip(&beta0)
            .map(|(a, b)| a - b)
            .collect::<Vec<_>>(),
    );
    let alpha: Vec<f64> = p.alpha().iter().zip(&fit0).map(|(a, f)| a - f).collect();
    let theta: Vec<f64> = p
        .theta()
        .iter()
        .zip(&fit_diff)
        .map(|(t, f)| t - f)
        .collect();
    let residual_model = p.with_unit_effects(alpha, theta)?;
    let rm = conditional_means(&residual_model, d);
    let conditional: Vec<[f64; 2]> = (0..n)
        .map(|i| [rm.single(i, false), rm.single(i, true)])
        .collect();
    let delta_n = [0usize, 1]
        .iter()
        .map(|&z| {
            csum((0..n).map(|i| {
                let t = csum(g.in_neighbors(i).iter().map(|&j| conditional[j][z]));
                t * t
            })) / nf
        })
        .fold(0.0, f64::max);
    let ev_ind = mixed_closed_form(None, Some(&residual_model), g, d)?;
    let ev_tot = mixed_closed_form(Some(p), Some(&residual_model), g, d)?;
    Ok(OracleResiduals {
        beta1,
        beta0,
        residual_model,
        conditional,
        delta_n,
        ev_ind,
        ev_tot,
    })
}

/// Oracle-residual adjusted estimators `(τ̃^EV_IND, τ̃^EV_TOT)` for one
/// assignment with realized outcomes `y`.
pub fn oracle_ev_statistics(
    oracle: &OracleResiduals,
    y: &[f64],
    z: &Assignment,
    g: &DirectedGraph,
    d: &Design,
) -> Result<(f64, f64), OracleError> {
    let e = oracle.realize(z)?;
    let w = IndirectWeights::new(g, z, d).map_err(|_| OracleError::SizeMismatch {
        graph: g.n(),
        params: z.len(),
    })?;
    let ind = w.apply(&e).expect("length checked");
    let dir = ht_direct(y, z, d).expect("length checked");
    Ok((ind, dir + ind))
}

/// One row of the identity table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    /// Passing requires `lhs − rhs` inside `[−tol, tol]`, or `lhs ≥ rhs − tol`
    /// for inequalities.
    pub tol: f64,
    pub inequality: bool,
    pub pass: bool,
}

impl IdentityCheck {
    fn equal(name: &str, lhs: f64, rhs: f64, tol: f64) -> Self {
        IdentityCheck {
            name: name.to_string(),
            lhs,
            rhs,
            tol,
            inequality: false,
            pass: (lhs - rhs).abs() <= tol,
        }
    }

    fn at_least(name: &str, lhs: f64, rhs: f64, tol: f64) -> Self {
        IdentityCheck {
            name: name.to_string(),
            lhs,
            rhs,
            tol,
            inequality: true,
            pass: lhs >= rhs - tol,
        }
    }
}

/// Deliberate corruption used as a negative control.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    None,
    /// Drop the second-order component from every closed-form variance.
    DropSecondOrder,
}

/// Every finite-population identity of the estimators, each checked against
/// exhaustive enumeration.
pub fn identity_checks(
    p: &HateParameters,
    g: &DirectedGraph,
    w: &Covariates,
    d: &Design,
    tol: f64,
    mutation: Mutation,
) -> Result<Vec<IdentityCheck>, OracleError> {
    let stats = [
        Statistic::TauDir,
        Statistic::TauInd,
        Statistic::TauTot,
        Statistic::VarDir,
        Statistic::VarInd,
        Statistic::VarTot,
    ];
    let m = enumerate_moments(p, g, d, &stats, DEFAULT_MAX_N)?;
    let truth = p.true_estimands();
    let closed = |kind| -> Result<f64, OracleError> {
        let v = closed_form_variance(kind, p, g, d)?;
        Ok(match mutation {
            Mutation::None => v.total,
            Mutation::DropSecondOrder => v.component1,
        })
    };
    let mut rows = vec![
        IdentityCheck::equal("unbiased DIR", m[0].mean, truth.tau_dir, tol),
        IdentityCheck::equal("unbiased IND", m[1].mean, truth.tau_ind, tol),
        IdentityCheck::equal("unbiased TOT", m[2].mean, truth.tau_tot, tol),
        IdentityCheck::equal(
            "variance decomposition DIR",
            m[0].variance,
            closed(VarianceKind::Dir)?,
            tol,
        ),
        IdentityCheck::equal(
            "variance decomposition IND",
            m[1].variance,
            closed(VarianceKind::Ind)?,
            tol,
        ),
        IdentityCheck::equal(
            "variance decomposition TOT",
            m[2].variance,
            closed(VarianceKind::Tot)?,
            tol,
        ),
        IdentityCheck::equal(
            "bias of V_DIR",
            m[3].mean - m[0].variance,
            dir_variance_bias(p),
            tol,
        ),
        IdentityCheck::at_least("conservative 2V_DIR", 2.0 * m[3].mean, m[0].variance, tol),
        IdentityCheck::at_least("conservative 2V_IND", 2.0 * m[4].mean, m[1].variance, tol),
        IdentityCheck::at_least("conservative 2V_TOT", 2.0 * m[5].mean, m[2].variance, tol),
    ];
    let oracle = oracle_adjustment(p, g, w, d)?;
    let ev = enumerate_with(p, d, DEFAULT_MAX_N, 2, |y, z, out| {
        let (ind, tot) = oracle_ev_statistics(&oracle, y, z, g, d).expect("sizes checked");
        out[0] = ind;
        out[1] = tot;
    })?;
    let (ev_ind, ev_tot) = match mutation {
        Mutation::None => (oracle.ev_ind.total, oracle.ev_tot.total),
        Mutation::DropSecondOrder => (oracle.ev_ind.component1, oracle.ev_tot.component1),
    };
    let nf = p.n() as f64;
    let theta_proj: Vec<f64> = (0..w.p())
        .map(|c| csum((0..p.n()).map(|i| w.get(i, c) * p.theta()[i])) / nf)
        .collect();
    let beta_gap = oracle
        .beta1
        .iter()
        .zip(&oracle.beta0)
        .zip(&theta_proj)
        .map(|((b1, b0), t)| (b1 - b0 - t).abs())
        .fold(0.0, f64::max);
    rows.extend([
        IdentityCheck::equal("oracle EV_IND mean", ev[0].mean, truth.tau_ind, tol),
        IdentityCheck::equal("oracle EV_TOT mean", ev[1].mean, truth.tau_tot, tol),
        IdentityCheck::equal("oracle EV_IND variance", ev[0].variance, ev_ind, tol),
        IdentityCheck::equal("oracle EV_TOT variance", ev[1].variance, ev_tot, tol),
        IdentityCheck::equal("oracle coefficient gap", beta_gap, 0.0, tol),
        IdentityCheck::at_least("delta_N nonnegative", oracle.delta_n, 0.0, 0.0),
    ]);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::HiddenNetwork;

    fn instance() -> (HateParameters, DirectedGraph) {
        let g = DirectedGraph::from_edge_list(&[(0, 1), (1, 0), (1, 2), (2, 3), (3, 1), (0, 3)], 4)
            .unwrap();
        let h = HiddenNetwork::from_edges(&g, &[(0, 1), (1, 0), (1, 2), (3, 1)]).unwrap();
        let p = HateParameters::from_triplets(
            vec![1.0, -0.5, 2.0, 0.3],
            vec![0.4, 1.2, -0.7, 2.0],
            h,
            &[(0, 1, 0.6), (1, 0, -0.3), (1, 2, 0.9), (3, 1, 0.25)],
        )
        .unwrap();
        (p, g)
    }

    #[test]
    fn constant_statistic() {
        let (p, g) = instance();
        let d = Design::new(0.3).unwrap();
        let m = enumerate_moments(&p, &g, &d, &[Statistic::Constant(2.5)], DEFAULT_MAX_N).unwrap();
        assert!((m[0].mean - 2.5).abs() < 1e-14);
        assert!(m[0].variance.abs() < 1e-14);
    }

    #[test]
    fn gray_code_outcomes_match_direct_realization() {
        let (p, _) = instance();
        let d = Design::new(0.4).unwrap();
        let mut total_prob = 0.0;
        let mut seen = std::collections::HashSet::new();
        for_each_assignment(&p, &d, DEFAULT_MAX_N, |y, z, prob| {
            let direct = p.realize_outcomes(z).unwrap();
            for (a, b) in y.iter().zip(&direct) {
                assert!((a - b).abs() < 1e-13);
            }
            assert!((prob - d.probability(z.treated_count(), z.len())).abs() < 1e-15);
            total_prob += prob;
            seen.insert(z.clone());
        })
        .unwrap();
        assert_eq!(seen.len(), 16);
        assert!((total_prob - 1.0).abs() < 1e-14);
    }

    #[test]
    fn caps() {
        let g = DirectedGraph::edgeless(15);
        let p = HateParameters::new(
            vec![0.0; 15],
            vec![0.0; 15],
            HiddenNetwork::edgeless(15),
            vec![],
        )
        .unwrap();
        let d = Design::new(0.5).unwrap();
        assert!(matches!(
            enumerate_moments(&p, &g, &d, &[Statistic::TauDir], DEFAULT_MAX_N),
            Err(OracleError::TooLarge {
                n: 15,
                assignments: 32768,
                ..
            })
        ));
        assert!(matches!(
            enumerate_moments(&p, &g, &d, &[Statistic::TauDir], 21),
            Err(OracleError::CapTooHigh(21))
        ));
        assert!(enumerate_moments(&p, &g, &d, &[Statistic::TauDir], 15).is_ok());
    }

    #[test]
    fn closed_forms_match_enumeration() {
        let (p, g) = instance();
        let d = Design::new(0.35).unwrap();
        let stats = [Statistic::TauDir, Statistic::TauInd, Statistic::TauTot];
        let m = enumerate_moments(&p, &g, &d, &stats, DEFAULT_MAX_N).unwrap();
        for (k, kind) in [VarianceKind::Dir, VarianceKind::Ind, VarianceKind::Tot]
            .into_iter()
            .enumerate()
        {
            let cf = closed_form_variance(kind, &p, &g, &d).unwrap();
            assert!(
                (cf.total - m[k].variance).abs() < 1e-12,
                "{kind:?}: {} vs {}",
                cf.total,
                m[k].variance
            );
        }
    }

    #[test]
    fn conditional_means_match_enumeration() {
        let (p, _) = instance();
        let d = Design::new(0.3).unwrap();
        let cm = conditional_means(&p, &d);
        let n = p.n();
        let mut num = vec![[0.0; 2]; n];
        let mut den = vec![[0.0; 2]; n];
        let mut pair_num = 0.0;
        let mut pair_den = 0.0;
        for_each_assignment(&p, &d, DEFAULT_MAX_N, |y, z, prob| {
            for i in 0..n {
                let s = z.is_treated(i) as usize;
                num[i][s] += prob * y[i];
                den[i][s] += prob;
            }
            if !z.is_treated(0) && z.is_treated(1) {
                pair_num += prob * y[0];
                pair_den += prob;
            }
        })
        .unwrap();
        for i in 0..n {
            for s in 0..2 {
                assert!((num[i][s] / den[i][s] - cm.single(i, s == 1)).abs() < 1e-12);
            }
        }
        assert!((pair_num / pair_den - cm.pair(0, false, 1, true)).abs() < 1e-12);
    }

    #[test]
    fn no_spillover_conditional_means() {
        let g = DirectedGraph::from_edge_list(&[(0, 1)], 2).unwrap();
        let p = HateParameters::from_triplets(
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            HiddenNetwork::full(&g),
            &[(0, 1, 0.5)],
        )
        .unwrap();
        let d = Design::new(0.5).unwrap();
        let cm = conditional_means(&p, &d);
        assert_eq!(cm.pair(0, false, 1, true), 1.5);
        assert_eq!(cm.single(1, true), 6.0);
    }

    #[test]
    fn edgeless_decompositions() {
        let g = DirectedGraph::edgeless(3);
        let p = HateParameters::new(
            vec![1.0, 2.0, 3.0],
            vec![0.5, 0.5, -1.0],
            HiddenNetwork::edgeless(3),
            vec![],
        )
        .unwrap();
        let d = Design::new(0.5).unwrap();
        let ind = closed_form_variance(VarianceKind::Ind, &p, &g, &d).unwrap();
        assert_eq!((ind.component1, ind.component2), (0.0, 0.0));
        let dir = closed_form_variance(VarianceKind::Dir, &p, &g, &d).unwrap();
        assert_eq!(dir.component2, 0.0);
        let expected: f64 = (0..3)
            .map(|i| (0.5 * (p.alpha()[i] + p.theta()[i]) + 0.5 * p.alpha()[i]).powi(2))
            .sum::<f64>()
            / (9.0 * 0.25);
        assert!((dir.component1 - expected).abs() < 1e-14);
    }

    #[test]
    fn oracle_identity_and_homogeneous_delta() {
        let (p, g) = instance();
        let d = Design::new(0.5).unwrap();
        let w = Covariates::intercept_only(4);
        let o = oracle_adjustment(&p, &g, &w, &d).unwrap();
        let mean_theta = p.theta().iter().sum::<f64>() / 4.0;
        assert!((o.beta1[0] - o.beta0[0] - mean_theta).abs() < 1e-14);
        assert!(o.delta_n >= 0.0);

        // homogeneous population: conditional means constant, residuals vanish
        let hom = HateParameters::new(
            vec![2.0; 4],
            vec![1.0; 4],
            HiddenNetwork::edgeless(4),
            vec![],
        )
        .unwrap();
        let o = oracle_adjustment(&hom, &g, &w, &d).unwrap();
        assert!(o.delta_n.abs() < 1e-28);
        assert!(o.residual_model.theta().iter().all(|t| t.abs() < 1e-15));
    }

    #[test]
    fn oracle_rejects_unwhitened() {
        let (p, g) = instance();
        let w = Covariates::new(nalgebra::DMatrix::from_element(4, 1, 2.0));
        assert!(matches!(
            oracle_adjustment(&p, &g, &w, &Design::new(0.5).unwrap()),
            Err(OracleError::NotWhitened(_))
        ));
    }

    #[test]
    fn compensated_sum_recovers_cancellation() {
        let s: CompensatedSum = [1e16, 1.0, -1e16].into_iter().collect();
        assert_eq!(s.value(), 1.0);
    }
}
