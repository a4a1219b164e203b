//! Pointwise Wald intervals and Gumbel-calibrated simultaneous bands for the
//! mean surface.

use rayon::prelude::*;

use crate::basis::BasisSet;
use crate::covariance::CovarianceEstimate;
use crate::domain::CovariateVector;
use crate::error::{Error, Result};
use crate::estimator::FittedModel;
use crate::kernel::{scaled_distance, BandwidthConfig, TypeIKernel};

/// Inverse standard normal CDF (Acklam's rational approximation, absolute
/// error below `1e-8` on `(0, 1)`).
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const LOW: f64 = 0.024_25;
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    if p == 0.5 {
        return 0.0;
    }
    if p < LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -normal_quantile(1.0 - p)
    }
}

/// `b_{1:K}(s)ᵀ Σ̂ b_{1:K}(s)`, clipped at zero. The flag reports a clip.
pub fn q_form(sigma: &CovarianceEstimate, basis: &BasisSet, s: &[f64]) -> Result<(f64, bool)> {
    let k = sigma.size();
    if k > basis.len() {
        return Err(Error::DimensionMismatch { expected: basis.len(), found: k });
    }
    if s.len() != basis.dim() {
        return Err(Error::DimensionMismatch { expected: basis.dim(), found: s.len() });
    }
    let mut b = vec![0.0; k];
    basis.eval_prefix_into(s, k, &mut b);
    let mut q = 0.0;
    for i in 0..k {
        for j in 0..k {
            q += b[i] * sigma.matrix[(i, j)] * b[j];
        }
    }
    Ok(if q < 0.0 { (0.0, true) } else { (q, false) })
}

/// `B_m(z)` calibrating simultaneous coverage `e^{−2e^{−z}}` over `m`
/// separated queries.
pub fn b_mn(m: usize, z: f64) -> Result<f64> {
    if m < 2 {
        return Err(Error::InvalidM(m));
    }
    let l = (m as f64).ln();
    let r = (2.0 * l).sqrt();
    Ok(r - (0.5 * l.ln() + (2.0 * std::f64::consts::PI.sqrt()).ln()) / r + z / r)
}

/// Lower bound on simultaneous coverage for critical value `B_m(z)`.
pub fn gumbel_coverage(z: f64) -> f64 {
    (-2.0 * (-z).exp()).exp()
}

/// How the sampling variance of the centered estimate is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceScale {
    /// `Q · Σ w̃ᵢ²` with `w̃` the effective weights of the bias-corrected
    /// combination. Reduces to `ξ-ratio · Q / N_x` for a single uniform fit.
    #[default]
    EffectiveWeights,
    /// `ξ-ratio · Q / N_x` from the fit at `h`.
    PlugIn,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BandKind {
    Pointwise { alpha: f64 },
    Simultaneous { z: f64, m: usize, critical: f64, target_coverage: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interval {
    pub center: f64,
    pub half_width: f64,
    pub support: usize,
}

impl Interval {
    pub fn lower(&self) -> f64 {
        self.center - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.center + self.half_width
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.lower()..=self.upper()).contains(&v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandResult {
    pub kind: BandKind,
    pub intervals: Vec<Interval>,
    pub epsilon_slack: f64,
    pub warnings: Vec<String>,
}

struct Spread {
    center: f64,
    scale: f64,
    support: usize,
    clipped: bool,
}

fn spread(
    model: &FittedModel,
    sigma: &CovarianceEstimate,
    query: &CovariateVector,
    s: &[f64],
    mode: VarianceScale,
) -> Result<Spread> {
    let fit = model.bias_corrected(query)?;
    let support = fit.at_h.support;
    if support < 2 {
        return Err(Error::DegenerateSupport { count: support });
    }
    let center = model.surface_from(&fit.mu, s)?;
    let (q, clipped) = q_form(sigma, model.basis(), s)?;
    let factor = match mode {
        VarianceScale::EffectiveWeights => fit.effective_weights.iter().map(|w| w * w).sum::<f64>(),
        VarianceScale::PlugIn => model.kernel().variance_ratio(&fit.at_h.weights) / support as f64,
    };
    Ok(Spread { center, scale: (q * factor).sqrt(), support, clipped })
}

/// Wald interval for `μ(x, s)` at level `1 − α`.
pub fn pointwise_ci(
    model: &FittedModel,
    sigma: &CovarianceEstimate,
    query: &CovariateVector,
    s: &[f64],
    alpha: f64,
) -> Result<BandResult> {
    pointwise_ci_with(model, sigma, query, s, alpha, VarianceScale::default())
}

pub fn pointwise_ci_with(
    model: &FittedModel,
    sigma: &CovarianceEstimate,
    query: &CovariateVector,
    s: &[f64],
    alpha: f64,
    mode: VarianceScale,
) -> Result<BandResult> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidLevel(alpha));
    }
    let sp = spread(model, sigma, query, s, mode)?;
    let z = normal_quantile(1.0 - alpha / 2.0);
    let mut warnings = Vec::new();
    if sp.clipped {
        warnings.push("negative quadratic form clipped to 0".to_string());
    }
    Ok(BandResult {
        kind: BandKind::Pointwise { alpha },
        intervals: vec![Interval { center: sp.center, half_width: z * sp.scale, support: sp.support }],
        epsilon_slack: 0.0,
        warnings,
    })
}

/// Index pairs whose scaled distance does not exceed `2hλ`.
pub fn too_close_pairs(queries: &[CovariateVector], bw: &BandwidthConfig, kernel: &TypeIKernel) -> Vec<(usize, usize)> {
    let limit = 2.0 * bw.h * kernel.lambda;
    let mut out = Vec::new();
    for i in 0..queries.len() {
        for j in i + 1..queries.len() {
            if scaled_distance(&queries[i], &queries[j], &bw.weights) <= limit {
                out.push((i, j));
            }
        }
    }
    out
}

/// Band over separated queries at a fixed location `s`, one covariance
/// estimate per query. The critical value uses `m = max(|χ|, 2)`.
pub fn simultaneous_band(
    model: &FittedModel,
    covariances: &[CovarianceEstimate],
    queries: &[CovariateVector],
    s: &[f64],
    z: f64,
    epsilon_slack: f64,
) -> Result<BandResult> {
    if covariances.len() != queries.len() {
        return Err(Error::DimensionMismatch { expected: queries.len(), found: covariances.len() });
    }
    if queries.is_empty() {
        return Err(Error::InvalidM(0));
    }
    if !(epsilon_slack >= 0.0) {
        return Err(Error::InvalidConfig(format!("epsilon slack must be nonnegative, got {epsilon_slack}")));
    }
    let pairs = too_close_pairs(queries, model.bandwidth(), model.kernel());
    if !pairs.is_empty() {
        return Err(Error::QueriesTooClose { pairs, threshold: 2.0 * model.bandwidth().h * model.kernel().lambda });
    }
    let m = queries.len().max(2);
    let critical = b_mn(m, z)?;
    let slack = if epsilon_slack > 0.0 { epsilon_slack * model.basis().dominating(s) } else { 0.0 };
    let spreads: Vec<Spread> = queries
        .par_iter()
        .zip(covariances)
        .map(|(q, sigma)| spread(model, sigma, q, s, VarianceScale::default()))
        .collect::<Result<_>>()?;
    let mut warnings = Vec::new();
    if queries.len() < 2 {
        warnings.push("single query: critical value evaluated at m = 2".to_string());
    }
    let intervals = spreads
        .iter()
        .enumerate()
        .map(|(i, sp)| {
            if sp.clipped {
                warnings.push(format!("query {i}: negative quadratic form clipped to 0"));
            }
            Interval { center: sp.center, half_width: critical * sp.scale + slack, support: sp.support }
        })
        .collect();
    Ok(BandResult {
        kind: BandKind::Simultaneous { z, m, critical, target_coverage: gumbel_coverage(z) },
        intervals,
        epsilon_slack,
        warnings,
    })
}

/// Greedy pass in input order keeping queries more than `2hλ` from every
/// kept query.
pub fn thin_queries(
    candidates: &[CovariateVector],
    bw: &BandwidthConfig,
    kernel: &TypeIKernel,
) -> Vec<CovariateVector> {
    let limit = 2.0 * bw.h * kernel.lambda;
    let mut kept: Vec<CovariateVector> = Vec::new();
    for c in candidates {
        if kept.iter().all(|k| scaled_distance(c, k, &bw.weights) > limit) {
            kept.push(c.clone());
        }
    }
    kept
}
