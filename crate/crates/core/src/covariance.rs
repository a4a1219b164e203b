//! Covariance of the aggregated responses and recovery of the variance
//! components `σ_u(x)`.
//!
//! The estimated matrix `Σ̂(x)` relates to the components through
//!
//! ```text
//! Σ_kl(x) = Σ_{u,v} c_{u,v}(k,l) σ_u(x) σ_v(x),
//! c_{u,v}(k,l) = ∫∫ ρ(s,s') b_k(s) b_u(s) b_l(s') b_v(s') ds ds'.
//! ```
//!
//! Truncating at `U` components turns this into a `U²×U²` linear system for
//! `A = σσᵀ`. The solution is projected onto the PSD cone and its leading
//! eigenpair gives `σ̂_u = √λ₁ |e₁ᵤ|`.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::aggregation::cover_for;
use crate::basis::BasisSet;
use crate::domain::{CovariateVector, SpatialPoint};
use crate::error::{Error, Result};
use crate::estimator::FittedModel;
use crate::quadrature::TensorRule;

/// Default cap on `order^(2d)` quadrature evaluations.
pub const DEFAULT_PAIR_NODE_CAP: usize = 100_000_000;
/// Default cap on the condition number of the stacked `c` system.
pub const DEFAULT_CONDITION_CAP: f64 = 1e8;

const BOUND_SLACK: f64 = 1e-9;

/// Correlation values on a finite set of sites, with quadrature weights that
/// sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedCorrelation {
    pub sites: Vec<SpatialPoint>,
    pub weights: Vec<f64>,
    pub values: DMatrix<f64>,
}

pub type CorrelationFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum SpatialCorrelation {
    Known(CorrelationFn),
    /// `ρ(s,s') = exp(−ρ₀ ‖s − s'‖²)`.
    GaussianDecay { rho0: f64 },
    /// Result of the nonparametric iteration, tabulated on observed sites.
    Tabulated(TabulatedCorrelation),
}

impl fmt::Debug for SpatialCorrelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpatialCorrelation::Known(_) => write!(f, "Known(<fn>)"),
            SpatialCorrelation::GaussianDecay { rho0 } => write!(f, "GaussianDecay {{ rho0: {rho0} }}"),
            SpatialCorrelation::Tabulated(t) => write!(f, "Tabulated({} sites)", t.sites.len()),
        }
    }
}

impl SpatialCorrelation {
    /// `ρ ≡ 1`.
    pub fn unit() -> Self {
        SpatialCorrelation::Known(Arc::new(|_, _| 1.0))
    }

    pub fn known(f: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        SpatialCorrelation::Known(Arc::new(f))
    }

    /// Evaluates a closed-form correlation; `None` for tabulated ones.
    pub fn eval(&self, s: &[f64], t: &[f64]) -> Option<f64> {
        match self {
            SpatialCorrelation::Known(f) => Some(f(s, t)),
            SpatialCorrelation::GaussianDecay { rho0 } => {
                let d2: f64 = s.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
                Some((-rho0 * d2).exp())
            }
            SpatialCorrelation::Tabulated(_) => None,
        }
    }
}

/// `Σ̂(x)` restricted to the first `K` components.
#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    pub query: CovariateVector,
    pub matrix: DMatrix<f64>,
    pub support: usize,
    pub warnings: Vec<String>,
}

impl CovarianceEstimate {
    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Kernel-weighted covariance of the aggregated responses around `query`.
pub fn covariance_estimate(model: &FittedModel, query: &CovariateVector) -> Result<CovarianceEstimate> {
    let fit = model.local_fit(query)?;
    if fit.support < 2 {
        return Err(Error::DegenerateSupport { count: fit.support });
    }
    let k = model.truncation();
    let mut m = DMatrix::zeros(k, k);
    let mut resid = vec![0.0; k];
    for (w, row) in fit.weights.iter().zip(model.aggregated()) {
        if *w <= 0.0 {
            continue;
        }
        for (r, (y, mu)) in resid.iter_mut().zip(row.iter().zip(&fit.mu)) {
            *r = y - mu;
        }
        for a in 0..k {
            for b in 0..=a {
                m[(a, b)] += w * resid[a] * resid[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            m[(a, b)] /= fit.weight_sum;
            m[(b, a)] = m[(a, b)];
        }
        m[(a, a)] /= fit.weight_sum;
    }
    let mut warnings = Vec::new();
    for a in 0..k {
        if m[(a, a)] < 0.0 {
            warnings.push(format!("diagonal entry {a} = {} clipped to 0", m[(a, a)]));
            m[(a, a)] = 0.0;
        }
    }
    Ok(CovarianceEstimate { query: query.clone(), matrix: m, support: fit.support, warnings })
}

pub fn sigma_kl(model: &FittedModel, k: usize, l: usize, query: &CovariateVector) -> Result<f64> {
    let kmax = model.truncation();
    for idx in [k, l] {
        if idx >= kmax {
            return Err(Error::IndexOutOfRange { index: idx, count: kmax });
        }
    }
    Ok(covariance_estimate(model, query)?.matrix[(k, l)])
}

/// Quadrature nodes on `S` used to integrate against a correlation.
struct SiteRule {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    corr: DMatrix<f64>,
}

fn site_rule(basis: &BasisSet, correlation: &SpatialCorrelation, order: usize, cap: usize) -> Result<SiteRule> {
    match correlation {
        SpatialCorrelation::Tabulated(t) => Ok(SiteRule {
            points: t.sites.iter().map(|p| p.coords().to_vec()).collect(),
            weights: t.weights.clone(),
            corr: t.values.clone(),
        }),
        _ => {
            let pair_nodes = (order as f64).powi(2 * basis.dim() as i32);
            if pair_nodes > cap as f64 {
                return Err(Error::QuadratureOverflow { nodes: pair_nodes, cap });
            }
            let rule = TensorRule::new(order, basis.dim())?;
            let n = rule.len();
            let corr = DMatrix::from_fn(n, n, |a, b| {
                correlation.eval(&rule.points[a], &rule.points[b]).expect("closed-form correlation")
            });
            Ok(SiteRule { points: rule.points, weights: rule.weights, corr })
        }
    }
}

/// Single coefficient `c_{u,v}(k,l)` (0-based indices).
pub fn c_uv(
    basis: &BasisSet,
    correlation: &SpatialCorrelation,
    u: usize,
    v: usize,
    k: usize,
    l: usize,
    order: usize,
) -> Result<f64> {
    let rule = site_rule(basis, correlation, order, DEFAULT_PAIR_NODE_CAP)?;
    let f = |a: usize, i: usize, j: usize| -> Result<f64> {
        Ok(rule.weights[a] * basis.eval(i, &rule.points[a])? * basis.eval(j, &rule.points[a])?)
    };
    let left: Vec<f64> = (0..rule.points.len()).map(|a| f(a, k, u)).collect::<Result<_>>()?;
    let right: Vec<f64> = (0..rule.points.len()).map(|a| f(a, l, v)).collect::<Result<_>>()?;
    let value = (DVector::from_vec(left).transpose() * &rule.corr * DVector::from_vec(right))[(0, 0)];
    if value.abs() > 1.0 + BOUND_SLACK {
        return Err(Error::CorrelationBound { value });
    }
    Ok(value)
}

/// Stacked system `P[(k,l),(u,v)] = c_{u,v}(k,l)` for `U` components, so that
/// `vec(Σ) = P vec(A)` with row-major `vec`.
#[derive(Debug, Clone)]
pub struct CSystem {
    pub size: usize,
    pub matrix: DMatrix<f64>,
}

impl CSystem {
    pub fn build(basis: &BasisSet, correlation: &SpatialCorrelation, size: usize, order: usize) -> Result<Self> {
        Self::build_with_cap(basis, correlation, size, order, DEFAULT_PAIR_NODE_CAP)
    }

    pub fn build_with_cap(
        basis: &BasisSet,
        correlation: &SpatialCorrelation,
        size: usize,
        order: usize,
        cap: usize,
    ) -> Result<Self> {
        if size == 0 || size > basis.len() {
            return Err(Error::InvalidTruncation { requested: size, available: basis.len() });
        }
        let rule = site_rule(basis, correlation, order, cap)?;
        let n = rule.points.len();
        let mut b = vec![0.0; size];
        let mut f = DMatrix::zeros(n, size * size);
        for a in 0..n {
            basis.eval_prefix_into(&rule.points[a], size, &mut b);
            for k in 0..size {
                for u in 0..size {
                    f[(a, k * size + u)] = rule.weights[a] * b[k] * b[u];
                }
            }
        }
        // FᵀRF is indexed by ((k,u),(l,v)); reorder to ((k,l),(u,v))
        let raw = f.transpose() * &rule.corr * &f;
        let n2 = size * size;
        let matrix = DMatrix::from_fn(n2, n2, |row, col| {
            let (k, l) = (row / size, row % size);
            let (u, v) = (col / size, col % size);
            raw[(k * size + u, l * size + v)]
        });
        // On observed sites the discrete Gram is not exact, so bound by the
        // ℓ¹ norms of the weighted products instead of 1.
        let l1: Option<Vec<f64>> = matches!(correlation, SpatialCorrelation::Tabulated(_))
            .then(|| f.column_iter().map(|c| c.abs().sum()).collect());
        for row in 0..n2 {
            for col in 0..n2 {
                let value = matrix[(row, col)];
                let bound = match &l1 {
                    None => 1.0,
                    Some(l1) => {
                        let (k, l) = (row / size, row % size);
                        let (u, v) = (col / size, col % size);
                        l1[k * size + u] * l1[l * size + v]
                    }
                };
                if value.abs() > bound * (1.0 + BOUND_SLACK) + BOUND_SLACK {
                    return Err(Error::CorrelationBound { value });
                }
            }
        }
        Ok(Self { size, matrix })
    }

    /// `c_{u,v}(k,l)`.
    pub fn coefficient(&self, u: usize, v: usize, k: usize, l: usize) -> f64 {
        let n = self.size;
        self.matrix[(k * n + l, u * n + v)]
    }

    pub fn condition_number(&self) -> f64 {
        let sv = self.matrix.singular_values();
        let max = sv.max();
        let min = sv.min();
        if min <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

/// Frobenius-nearest PSD matrix: symmetrize, then clip negative eigenvalues.
pub fn nearest_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let q = &eig.eigenvectors;
    let out = q * DMatrix::from_diagonal(&clipped) * q.transpose();
    (&out + out.transpose()) * 0.5
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().max()
}

#[derive(Debug, Clone)]
pub struct VarianceRecovery {
    /// `σ̂_u(x)` for `u < U`, all nonnegative.
    pub sigma: Vec<f64>,
    /// Solution of the linear system before projection.
    pub a: DMatrix<f64>,
    /// PSD projection of `a`.
    pub a_star: DMatrix<f64>,
    /// `‖A − σ̂σ̂ᵀ‖₂`.
    pub discrepancy: f64,
    pub condition: f64,
    pub warnings: Vec<String>,
}

/// Solves for `A = σσᵀ`, projects to PSD and extracts the leading
/// component. Uses the leading `U×U` block of `sigma_hat`.
pub fn recover_variance_components(
    sigma_hat: &DMatrix<f64>,
    system: &CSystem,
    condition_cap: f64,
) -> Result<VarianceRecovery> {
    let u = system.size;
    if sigma_hat.nrows() < u || sigma_hat.ncols() < u {
        return Err(Error::DimensionMismatch { expected: u, found: sigma_hat.nrows().min(sigma_hat.ncols()) });
    }
    let condition = system.condition_number();
    if !(condition <= condition_cap) {
        return Err(Error::IllConditionedSystem { condition, cap: condition_cap });
    }
    let rhs = DVector::from_fn(u * u, |i, _| sigma_hat[(i / u, i % u)]);
    let solved = system
        .matrix
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or(Error::IllConditionedSystem { condition: f64::INFINITY, cap: condition_cap })?;
    let a = DMatrix::from_fn(u, u, |i, j| solved[i * u + j]);
    let a_star = nearest_psd(&a);
    let eig = SymmetricEigen::new(a_star.clone());
    let (lead, lambda) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, l)| if l > best.1 { (i, l) } else { best });
    let mut warnings = Vec::new();
    let sigma: Vec<f64> = if lambda > 0.0 {
        let root = lambda.sqrt();
        eig.eigenvectors.column(lead).iter().map(|e| root * e.abs()).collect()
    } else {
        warnings.push(format!("NonPositiveLeadingEigenvalue: {lambda}"));
        vec![0.0; u]
    };
    let sv = DVector::from_vec(sigma.clone());
    let discrepancy = spectral_norm(&(&a - &sv * sv.transpose()));
    Ok(VarianceRecovery { sigma, a, a_star, discrepancy, condition, warnings })
}

/// Settings for the nonparametric correlation iteration.
#[derive(Debug, Clone)]
pub struct IterateOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Use `Y − μ̂(x, s)` instead of raw responses in the update.
    pub centered: bool,
    /// Quadrature order for the closed-form initial correlation.
    pub order: usize,
    pub sigma_floor: f64,
    pub condition_cap: f64,
    /// Number of variance components `U`; defaults to the model truncation.
    pub components: Option<usize>,
}

impl Default for IterateOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-4,
            centered: false,
            order: 8,
            sigma_floor: 1e-6,
            condition_cap: DEFAULT_CONDITION_CAP,
            components: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IterateOutcome {
    pub correlation: SpatialCorrelation,
    pub sigma: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Max absolute change of `ρ̂` at each iteration.
    pub history: Vec<f64>,
    pub warnings: Vec<String>,
}

impl IterateOutcome {
    pub fn table(&self) -> &TabulatedCorrelation {
        match &self.correlation {
            SpatialCorrelation::Tabulated(t) => t,
            _ => unreachable!("iteration always tabulates"),
        }
    }
}

fn site_key(c: &[f64]) -> Vec<u64> {
    c.iter().map(|x| x.to_bits()).collect()
}

/// Kernel-weighted second moments on the sites observed at every in-support
/// timepoint around a query.
#[derive(Debug, Clone)]
pub struct SharedMoments {
    /// Shared sites in first-record order.
    pub sites: Vec<SpatialPoint>,
    /// Cover-multiplicity quadrature weights of the sites.
    pub weights: Vec<f64>,
    /// `Σ_i K_i Y_i(s) Y_i(s') / Σ_i K_i`, optionally around `μ̂(x, ·)`.
    pub moment: DMatrix<f64>,
}

impl SharedMoments {
    pub fn collect(model: &FittedModel, query: &CovariateVector, centered: bool) -> Result<Self> {
        let fit = model.local_fit(query)?;
        let records: Vec<usize> = (0..fit.weights.len()).filter(|&i| fit.weights[i] > 0.0).collect();
        let dataset = model.dataset();
        let lookups: Vec<HashMap<Vec<u64>, f64>> = records
            .iter()
            .map(|&i| {
                dataset.records[i]
                    .observations
                    .iter()
                    .map(|o| (site_key(o.location.coords()), o.response))
                    .collect()
            })
            .collect();
        let mut sites: Vec<SpatialPoint> = dataset.records[records[0]].locations().cloned().collect();
        sites.retain(|p| lookups.iter().all(|m| m.contains_key(&site_key(p.coords()))));
        if sites.len() < 2 {
            return Err(Error::NoPairs(format!(
                "{} site(s) shared by the {} in-support timepoints",
                sites.len(),
                records.len()
            )));
        }
        let m = sites.len();
        let centers: Vec<f64> = if centered {
            sites.iter().map(|p| model.surface_from(&fit.mu, p.coords())).collect::<Result<_>>()?
        } else {
            vec![0.0; m]
        };
        let mut moment = DMatrix::<f64>::zeros(m, m);
        let mut ys = vec![0.0; m];
        for (&i, lk) in records.iter().zip(&lookups) {
            let w = fit.weights[i];
            for (y, (p, c)) in ys.iter_mut().zip(sites.iter().zip(&centers)) {
                *y = lk[&site_key(p.coords())] - c;
            }
            for a in 0..m {
                for b in 0..=a {
                    moment[(a, b)] += w * ys[a] * ys[b];
                }
            }
        }
        for a in 0..m {
            for b in 0..=a {
                moment[(a, b)] /= fit.weight_sum;
                moment[(b, a)] = moment[(a, b)];
            }
        }
        let cover = cover_for(&sites, dataset.dim)?;
        let weights = cover.multiplicities(m).iter().map(|&c| c as f64 / cover.len() as f64).collect();
        Ok(Self { sites, weights, moment })
    }

    pub fn tabulate(&self, values: DMatrix<f64>) -> SpatialCorrelation {
        SpatialCorrelation::Tabulated(TabulatedCorrelation {
            sites: self.sites.clone(),
            weights: self.weights.clone(),
            values,
        })
    }

    /// Normalized moments `M(s,s') / √(M(s,s) M(s',s'))`, a data-driven
    /// starting point for the iteration.
    pub fn empirical_correlation(&self) -> SpatialCorrelation {
        let m = self.sites.len();
        let d: Vec<f64> = (0..m).map(|a| self.moment[(a, a)].max(0.0).sqrt()).collect();
        let values = DMatrix::from_fn(m, m, |a, b| {
            if a == b {
                1.0
            } else if d[a] > 0.0 && d[b] > 0.0 {
                (self.moment[(a, b)] / (d[a] * d[b])).clamp(-1.0, 1.0)
            } else {
                0.0
            }
        });
        self.tabulate(values)
    }
}

/// Alternates variance-component recovery with the kernel-weighted update
///
/// ```text
/// ρ̂⁽ᵐ⁺¹⁾(s,s') = Σ_i K_i Y_i(s) Y_i(s') / (Σ_i K_i σ̂⁽ᵐ⁾(x,s) σ̂⁽ᵐ⁾(x,s'))
/// ```
///
/// on the shared sites. The iterate is symmetrized, clipped to `[−1, 1]`
/// and given a unit diagonal after each step.
pub fn iterate_rho(
    model: &FittedModel,
    query: &CovariateVector,
    initial: &SpatialCorrelation,
    options: &IterateOptions,
) -> Result<IterateOutcome> {
    let shared = SharedMoments::collect(model, query, options.centered)?;
    iterate_rho_from(model, query, &shared, initial, options)
}

pub fn iterate_rho_from(
    model: &FittedModel,
    query: &CovariateVector,
    shared: &SharedMoments,
    initial: &SpatialCorrelation,
    options: &IterateOptions,
) -> Result<IterateOutcome> {
    let basis = model.basis();
    let m = shared.sites.len();
    let start = match initial {
        SpatialCorrelation::Tabulated(t) if t.sites == shared.sites => t.values.clone(),
        SpatialCorrelation::Tabulated(_) => {
            return Err(Error::InvalidConfig("tabulated initial correlation must use the shared sites".into()))
        }
        closed => DMatrix::from_fn(m, m, |a, b| {
            closed.eval(shared.sites[a].coords(), shared.sites[b].coords()).expect("closed-form correlation")
        }),
    };

    let sigma_hat = covariance_estimate(model, query)?;
    let components = options.components.unwrap_or(model.truncation());
    let mut warnings = sigma_hat.warnings.clone();
    let mut current = initial.clone();
    let mut table = start;
    let mut sigma = vec![0.0; components];
    let mut history = Vec::new();
    let mut converged = false;
    let mut bvals = vec![0.0; components];
    while history.len() < options.max_iter {
        let system = CSystem::build(basis, &current, components, options.order)?;
        let rec = recover_variance_components(&sigma_hat.matrix, &system, options.condition_cap)?;
        warnings.extend(rec.warnings.iter().cloned());
        sigma = rec.sigma;
        let sigma_s: Vec<f64> = shared
            .sites
            .iter()
            .map(|p| {
                basis.eval_prefix_into(p.coords(), components, &mut bvals);
                sigma.iter().zip(&bvals).map(|(a, b)| a * b).sum()
            })
            .collect();
        let mut floored = 0usize;
        let mut next = DMatrix::<f64>::zeros(m, m);
        for a in 0..m {
            for b in 0..m {
                let mut prod = sigma_s[a] * sigma_s[b];
                if prod.abs() < options.sigma_floor {
                    prod = options.sigma_floor.copysign(if prod == 0.0 { 1.0 } else { prod });
                    floored += 1;
                }
                next[(a, b)] = shared.moment[(a, b)] / prod;
            }
        }
        if floored > 0 {
            warnings.push(format!("iteration {}: {floored} site pairs hit the sigma floor", history.len() + 1));
        }
        let mut next: DMatrix<f64> = (&next + next.transpose()) * 0.5;
        next.iter_mut().for_each(|v: &mut f64| *v = v.clamp(-1.0, 1.0));
        for a in 0..m {
            next[(a, a)] = 1.0;
        }
        let change = (&next - &table).abs().max();
        table = next;
        current = shared.tabulate(table.clone());
        history.push(change);
        if change < options.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warnings.push(format!("NoConvergence after {} iterations", history.len()));
    }
    Ok(IterateOutcome {
        correlation: shared.tabulate(table),
        sigma,
        iterations: history.len(),
        converged,
        history,
        warnings,
    })
}

#[derive(Debug, Clone)]
pub struct RhoFit {
    pub rho0: f64,
    /// `(ρ₀, discrepancy)` for each grid value that produced a solution.
    pub discrepancies: Vec<(f64, f64)>,
}

/// Grid search for the decay rate of a Gaussian correlation, minimizing
/// `‖A − σ̂σ̂ᵀ‖₂`. Ties go to the smallest `ρ₀`.
pub fn parametric_rho_fit(
    model: &FittedModel,
    query: &CovariateVector,
    grid: &[f64],
    order: usize,
) -> Result<RhoFit> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty rho0 grid".into()));
    }
    let sigma_hat = covariance_estimate(model, query)?;
    // rounding noise in Σ̂ is of order ε·‖μ̂‖²
    let noise = f64::EPSILON * model.local_fit(query)?.mu.iter().map(|m| m * m).sum::<f64>();
    let mut discrepancies = Vec::with_capacity(grid.len());
    for &rho0 in grid {
        let system = CSystem::build(
            model.basis(),
            &SpatialCorrelation::GaussianDecay { rho0 },
            model.truncation(),
            order,
        )?;
        let rec = recover_variance_components(&sigma_hat.matrix, &system, f64::INFINITY)?;
        discrepancies.push((rho0, rec.discrepancy));
    }
    let best = discrepancies
        .iter()
        .copied()
        .min_by(|a, b| {
            let scale = a.1.abs().max(b.1.abs());
            if (a.1 - b.1).abs() <= 1e-12 * scale + noise {
                a.0.total_cmp(&b.0)
            } else {
                a.1.total_cmp(&b.1)
            }
        })
        .map(|(r, _)| r)
        .expect("non-empty grid");
    Ok(RhoFit { rho0: best, discrepancies })
}
