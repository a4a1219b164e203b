//! Orthonormal tensor bases on `[0,1]^d` built from shifted Legendre
//! polynomials.
//!
//! Functions are ordered by total degree. Within a degree, pure powers of a
//! single axis come first (axis order), followed by mixed terms in
//! descending lexicographic order of their multi-index. For `d = 2` the first
//! six functions are
//!
//! ```text
//! 1, √12(s₁−½), √12(s₂−½), 6√5(s₁²−s₁+⅙), 6√5(s₂²−s₂+⅙), 12(s₁−½)(s₂−½)
//! ```
//!
//! Indices are 0-based: index 0 is the constant function.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::quadrature::TensorRule;

/// Highest total degree available in the degree table.
pub const MAX_TOTAL_DEGREE: usize = 10;

/// Value of the unit-norm shifted Legendre polynomial `√(2n+1)·P_n(2x−1)`.
pub fn shifted_legendre(n: usize, x: f64) -> f64 {
    let t = 2.0 * x - 1.0;
    let p = match n {
        0 => 1.0,
        1 => t,
        _ => {
            let (mut p0, mut p1) = (1.0, t);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * t * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            p1
        }
    };
    ((2 * n + 1) as f64).sqrt() * p
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    dim: usize,
    multi_indices: Vec<Vec<usize>>,
}

fn compositions(dim: usize, total: usize) -> Vec<Vec<usize>> {
    if dim == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in (0..=total).rev() {
        for mut rest in compositions(dim - 1, total - first) {
            let mut v = vec![first];
            v.append(&mut rest);
            out.push(v);
        }
    }
    out
}

fn ordered_multi_indices(dim: usize, max_total: usize) -> Vec<Vec<usize>> {
    let mut all = Vec::new();
    for g in 0..=max_total {
        // Descending lex order from `compositions`; stable sort keeps it
        // among terms with the same number of active axes.
        let mut level = compositions(dim, g);
        level.sort_by_key(|m| m.iter().filter(|&&e| e > 0).count());
        all.extend(level);
    }
    all
}

impl BasisSet {
    pub fn build(dim: usize, count: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("spatial dimension must be at least 1".into()));
        }
        if count == 0 {
            return Err(Error::UnsupportedCount { dim, count, max: 0 });
        }
        let table = ordered_multi_indices(dim, MAX_TOTAL_DEGREE);
        if count > table.len() {
            return Err(Error::UnsupportedCount { dim, count, max: table.len() });
        }
        Ok(Self { dim, multi_indices: table.into_iter().take(count).collect() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.multi_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.multi_indices.is_empty()
    }

    pub fn multi_index(&self, k: usize) -> &[usize] {
        &self.multi_indices[k]
    }

    /// Maximum per-axis polynomial degree across the set.
    pub fn max_axis_degree(&self) -> usize {
        self.multi_indices.iter().flatten().copied().max().unwrap_or(0)
    }

    pub fn eval(&self, k: usize, s: &[f64]) -> Result<f64> {
        let idx = self
            .multi_indices
            .get(k)
            .ok_or(Error::IndexOutOfRange { index: k, count: self.len() })?;
        if s.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, found: s.len() });
        }
        Ok(idx.iter().zip(s).map(|(&n, &x)| shifted_legendre(n, x)).product())
    }

    /// Values of the first `count` functions at `s`, written into `out`.
    pub fn eval_prefix_into(&self, s: &[f64], count: usize, out: &mut [f64]) {
        debug_assert!(count <= self.len() && out.len() >= count && s.len() == self.dim);
        let maxdeg = self.multi_indices[..count].iter().flatten().copied().max().unwrap_or(0);
        // univariate values per axis, reused across products
        let mut uni = vec![0.0; self.dim * (maxdeg + 1)];
        for (a, &x) in s.iter().enumerate() {
            for n in 0..=maxdeg {
                uni[a * (maxdeg + 1) + n] = shifted_legendre(n, x);
            }
        }
        for (k, idx) in self.multi_indices[..count].iter().enumerate() {
            out[k] = idx.iter().enumerate().map(|(a, &n)| uni[a * (maxdeg + 1) + n]).product();
        }
    }

    pub fn eval_all(&self, s: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_prefix_into(s, self.len(), &mut out);
        out
    }

    /// Dominating function `b_∞(s) = max_k |b_k(s)|` over the built set.
    pub fn dominating(&self, s: &[f64]) -> f64 {
        self.eval_all(s).into_iter().map(f64::abs).fold(0.0, f64::max)
    }

    /// Gram matrix `∫ b_i b_j` by tensor Gauss–Legendre quadrature.
    pub fn gram(&self, order: usize) -> Result<DMatrix<f64>> {
        let rule = TensorRule::new(order, self.dim)?;
        let k = self.len();
        let mut g = DMatrix::zeros(k, k);
        let mut vals = vec![0.0; k];
        for (p, w) in rule.points.iter().zip(&rule.weights) {
            self.eval_prefix_into(p, k, &mut vals);
            for i in 0..k {
                for j in 0..=i {
                    g[(i, j)] += w * vals[i] * vals[j];
                }
            }
        }
        for i in 0..k {
            for j in 0..i {
                g[(j, i)] = g[(i, j)];
            }
        }
        Ok(g)
    }
}
