//! Compactly supported kernels on `[0, ∞)` and the discounted covariate
//! metric they act on.

use crate::domain::{CovariateVector, ScalingWeights};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    /// `K(u) = 1/λ` on `[0, λ]`.
    Uniform,
    /// `K(u) = 6/(5λ) · (1 − u²/(2λ²))` on `[0, λ]`; bounded below by
    /// `3/(5λ)` on its support.
    TruncatedQuadratic,
}

/// A type-I kernel: integrates to one on `[0, ∞)` and is sandwiched between
/// `C₁·1[0,λ]` and `C₂·1[0,λ]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TypeIKernel {
    pub kind: KernelKind,
    pub lambda: f64,
}

impl Default for TypeIKernel {
    fn default() -> Self {
        Self { kind: KernelKind::Uniform, lambda: 1.0 }
    }
}

impl TypeIKernel {
    pub fn new(kind: KernelKind, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidConfig(format!("kernel support radius must be positive, got {lambda}")));
        }
        Ok(Self { kind, lambda })
    }

    pub fn uniform(lambda: f64) -> Result<Self> {
        Self::new(KernelKind::Uniform, lambda)
    }

    pub fn value(&self, u: f64) -> f64 {
        if !(0.0..=self.lambda).contains(&u) {
            return 0.0;
        }
        match self.kind {
            KernelKind::Uniform => 1.0 / self.lambda,
            KernelKind::TruncatedQuadratic => {
                let r = u / self.lambda;
                1.2 / self.lambda * (1.0 - 0.5 * r * r)
            }
        }
    }

    /// `(C₁, C₂)` of the sandwich bound.
    pub fn bounds(&self) -> (f64, f64) {
        match self.kind {
            KernelKind::Uniform => (1.0 / self.lambda, 1.0 / self.lambda),
            KernelKind::TruncatedQuadratic => (0.6 / self.lambda, 1.2 / self.lambda),
        }
    }

    /// `ξ₂/ξ₁²` for this kernel. For the uniform kernel `K² = K/λ` gives
    /// exactly 1; otherwise the in-support weights give the plug-in
    /// `N_x Σ K_i² / (Σ K_i)²`.
    pub fn variance_ratio(&self, weights: &[f64]) -> f64 {
        match self.kind {
            KernelKind::Uniform => 1.0,
            KernelKind::TruncatedQuadratic => {
                let support: Vec<f64> = weights.iter().copied().filter(|&w| w > 0.0).collect();
                let s1: f64 = support.iter().sum();
                if s1 == 0.0 {
                    return 1.0;
                }
                let s2: f64 = support.iter().map(|w| w * w).sum();
                support.len() as f64 * s2 / (s1 * s1)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthConfig {
    pub h: f64,
    pub weights: ScalingWeights,
}

impl BandwidthConfig {
    pub fn new(h: f64, weights: ScalingWeights) -> Result<Self> {
        if !(h > 0.0) || h.is_nan() {
            return Err(Error::InvalidConfig(format!("bandwidth must be positive, got {h}")));
        }
        weights.validate()?;
        Ok(Self { h, weights })
    }

    pub fn with_h(&self, h: f64) -> Self {
        Self { h, weights: self.weights.clone() }
    }
}

/// `‖D⁻¹(x − y)‖` with the shorter vector zero-extended.
pub fn scaled_distance(x: &CovariateVector, y: &CovariateVector, w: &ScalingWeights) -> f64 {
    let len = x.len().max(y.len());
    (0..len)
        .map(|j| {
            let d = x.get(j) - y.get(j);
            w.inverse_sq(j) * d * d
        })
        .sum::<f64>()
        .sqrt()
}

pub fn kernel_weight(
    kernel: &TypeIKernel,
    bw: &BandwidthConfig,
    x: &CovariateVector,
    query: &CovariateVector,
) -> f64 {
    kernel.value(scaled_distance(x, query, &bw.weights) / bw.h)
}

/// Number of covariates with positive kernel weight around `query`.
pub fn support_count(
    covariates: &[CovariateVector],
    kernel: &TypeIKernel,
    bw: &BandwidthConfig,
    query: &CovariateVector,
) -> usize {
    covariates.iter().filter(|x| kernel_weight(kernel, bw, x, query) > 0.0).count()
}
