//! Nadaraya–Watson estimation of the mean components `μ_k(x)` from
//! aggregated responses, the truncated mean surface, jackknife bias
//! correction and leave-one-location-out hyperparameter selection.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::aggregation::{aggregate_prefix, cover_for, GridCover};
use crate::basis::BasisSet;
use crate::domain::{CovariateVector, Observation, ScalingWeights, SpatialPoint, SpatioTemporalDataset};
use crate::error::{Error, Result};
use crate::kernel::{scaled_distance, BandwidthConfig, TypeIKernel};

fn location_key(locs: impl Iterator<Item = impl AsRef<[f64]>>) -> Vec<u64> {
    let mut key = Vec::new();
    for l in locs {
        key.extend(l.as_ref().iter().map(|c| c.to_bits()));
        key.push(u64::MAX);
    }
    key
}

/// Covers for many location sets, computed once per distinct set.
pub(crate) fn covers_for_sets(sets: &[Vec<SpatialPoint>], dim: usize) -> Result<Vec<Arc<GridCover>>> {
    let mut unique: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut reps = Vec::new();
    let mut slot = Vec::with_capacity(sets.len());
    for (i, set) in sets.iter().enumerate() {
        let key = location_key(set.iter().map(|p| p.coords()));
        let next = reps.len();
        let id = *unique.entry(key).or_insert_with(|| {
            reps.push(i);
            next
        });
        slot.push(id);
    }
    let covers: Vec<Arc<GridCover>> = reps
        .par_iter()
        .map(|&i| cover_for(&sets[i], dim).map(Arc::new))
        .collect::<Result<_>>()?;
    Ok(slot.into_iter().map(|id| covers[id].clone()).collect())
}

/// Aggregated responses for every record, basis indices `0..count`.
pub fn aggregate_dataset(
    dataset: &SpatioTemporalDataset,
    basis: &BasisSet,
    count: usize,
) -> Result<Vec<Vec<f64>>> {
    let sets: Vec<Vec<SpatialPoint>> =
        dataset.records.iter().map(|r| r.locations().cloned().collect()).collect();
    let covers = covers_for_sets(&sets, dataset.dim)?;
    dataset
        .records
        .par_iter()
        .zip(covers.par_iter())
        .map(|(rec, cover)| aggregate_prefix(&rec.observations, cover, basis, count))
        .collect()
}

/// Kernel-weighted local estimate at one covariate and bandwidth.
#[derive(Debug, Clone)]
pub struct LocalFit {
    pub bandwidth: f64,
    /// Kernel weight of every training timepoint.
    pub weights: Vec<f64>,
    pub weight_sum: f64,
    /// Number of timepoints with positive weight (`N_x`).
    pub support: usize,
    /// `μ̂_k(x)` for `k < K`.
    pub mu: Vec<f64>,
}

impl LocalFit {
    /// Weights normalized to sum to one.
    pub fn normalized_weights(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w / self.weight_sum).collect()
    }
}

/// Jackknife combination `2μ̂^(h) − μ̂^(2h)`.
#[derive(Debug, Clone)]
pub struct BiasCorrectedFit {
    pub mu: Vec<f64>,
    pub at_h: LocalFit,
    pub at_2h: LocalFit,
    /// Per-timepoint weights of the combined estimator; they sum to one.
    pub effective_weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FittedModel {
    basis: BasisSet,
    kernel: TypeIKernel,
    bw: BandwidthConfig,
    truncation: usize,
    aggregated: Vec<Vec<f64>>,
    dataset: Arc<SpatioTemporalDataset>,
}

impl FittedModel {
    pub fn fit(
        dataset: &SpatioTemporalDataset,
        basis: &BasisSet,
        kernel: TypeIKernel,
        bw: BandwidthConfig,
        truncation: usize,
    ) -> Result<Self> {
        if truncation == 0 || truncation > basis.len() {
            return Err(Error::InvalidTruncation { requested: truncation, available: basis.len() });
        }
        if basis.dim() != dataset.dim {
            return Err(Error::DimensionMismatch { expected: basis.dim(), found: dataset.dim });
        }
        dataset.validate().map_err(Error::Validation)?;
        let aggregated = aggregate_dataset(dataset, basis, truncation)?;
        Ok(Self::from_parts(dataset.clone(), basis.clone(), kernel, bw, truncation, aggregated))
    }

    /// Assembles a model from precomputed aggregated responses.
    pub fn from_parts(
        dataset: SpatioTemporalDataset,
        basis: BasisSet,
        kernel: TypeIKernel,
        bw: BandwidthConfig,
        truncation: usize,
        aggregated: Vec<Vec<f64>>,
    ) -> Self {
        assert_eq!(aggregated.len(), dataset.len());
        assert!(aggregated.iter().all(|row| row.len() >= truncation));
        Self { basis, kernel, bw, truncation, aggregated, dataset: Arc::new(dataset) }
    }

    pub fn basis(&self) -> &BasisSet {
        &self.basis
    }

    pub fn kernel(&self) -> &TypeIKernel {
        &self.kernel
    }

    pub fn bandwidth(&self) -> &BandwidthConfig {
        &self.bw
    }

    pub fn truncation(&self) -> usize {
        self.truncation
    }

    pub fn dataset(&self) -> &SpatioTemporalDataset {
        &self.dataset
    }

    /// `Ŷ*_{t_i k}` table, one row per timepoint.
    pub fn aggregated(&self) -> &[Vec<f64>] {
        &self.aggregated
    }

    pub fn covariate(&self, i: usize) -> &CovariateVector {
        &self.dataset.records[i].covariate
    }

    pub fn weights_at(&self, query: &CovariateVector, h: f64) -> Vec<f64> {
        self.dataset
            .records
            .iter()
            .map(|r| self.kernel.value(scaled_distance(&r.covariate, query, &self.bw.weights) / h))
            .collect()
    }

    pub fn local_fit_at(&self, query: &CovariateVector, h: f64) -> Result<LocalFit> {
        let weights = self.weights_at(query, h);
        let weight_sum: f64 = weights.iter().sum();
        if !(weight_sum > 0.0) {
            return Err(Error::NoNeighbors { bandwidth: h });
        }
        let support = weights.iter().filter(|&&w| w > 0.0).count();
        let mut mu = vec![0.0; self.truncation];
        for (w, row) in weights.iter().zip(&self.aggregated) {
            if *w > 0.0 {
                for (m, y) in mu.iter_mut().zip(row) {
                    *m += w * y;
                }
            }
        }
        mu.iter_mut().for_each(|m| *m /= weight_sum);
        Ok(LocalFit { bandwidth: h, weights, weight_sum, support, mu })
    }

    pub fn local_fit(&self, query: &CovariateVector) -> Result<LocalFit> {
        self.local_fit_at(query, self.bw.h)
    }

    fn check_index(&self, k: usize) -> Result<()> {
        if k >= self.truncation {
            return Err(Error::IndexOutOfRange { index: k, count: self.truncation });
        }
        Ok(())
    }

    pub fn mu_k(&self, k: usize, query: &CovariateVector) -> Result<f64> {
        self.check_index(k)?;
        Ok(self.local_fit(query)?.mu[k])
    }

    fn check_location(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.basis.dim() || !s.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::InvalidLocation(s.to_vec()));
        }
        Ok(())
    }

    /// `Σ_{k<K} coef_k b_k(s)`.
    pub fn surface_from(&self, coefficients: &[f64], s: &[f64]) -> Result<f64> {
        self.check_location(s)?;
        let mut b = vec![0.0; self.truncation];
        self.basis.eval_prefix_into(s, self.truncation, &mut b);
        Ok(coefficients.iter().zip(&b).map(|(c, v)| c * v).sum())
    }

    pub fn mu_surface(&self, query: &CovariateVector, s: &[f64]) -> Result<f64> {
        self.check_location(s)?;
        let fit = self.local_fit(query)?;
        self.surface_from(&fit.mu, s)
    }

    pub fn bias_corrected(&self, query: &CovariateVector) -> Result<BiasCorrectedFit> {
        let at_h = self.local_fit_at(query, self.bw.h)?;
        let at_2h = self.local_fit_at(query, 2.0 * self.bw.h)?;
        let mu = at_h.mu.iter().zip(&at_2h.mu).map(|(a, b)| 2.0 * a - b).collect();
        let effective_weights = at_h
            .weights
            .iter()
            .zip(&at_2h.weights)
            .map(|(a, b)| 2.0 * a / at_h.weight_sum - b / at_2h.weight_sum)
            .collect();
        Ok(BiasCorrectedFit { mu, at_h, at_2h, effective_weights })
    }

    pub fn mu_k_bias_corrected(&self, k: usize, query: &CovariateVector) -> Result<f64> {
        self.check_index(k)?;
        Ok(self.bias_corrected(query)?.mu[k])
    }

    pub fn mu_surface_bias_corrected(&self, query: &CovariateVector, s: &[f64]) -> Result<f64> {
        self.check_location(s)?;
        let fit = self.bias_corrected(query)?;
        self.surface_from(&fit.mu, s)
    }
}

/// One point of the hyperparameter grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub h: f64,
    pub truncation: usize,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScore {
    pub candidate: Candidate,
    /// `None` when the candidate was disqualified.
    pub rmse: Option<f64>,
    pub skipped: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub best: Candidate,
    pub scores: Vec<CandidateScore>,
    pub warnings: Vec<String>,
}

/// Largest tolerated fraction of skipped predictions before a candidate is
/// disqualified.
pub const MAX_SKIP_FRACTION: f64 = 0.2;

struct Fold {
    /// (record, held-out location, held-out response)
    targets: Vec<(usize, Vec<f64>, f64)>,
    /// Replacement aggregated rows for records that lost the location.
    replaced: HashMap<usize, Vec<f64>>,
}

/// Leave-one-location-out cross-validation over `candidates`.
///
/// Each distinct site is held out of every timepoint that observed it; the
/// aggregated responses of those timepoints are recomputed without it and
/// the held-out responses are predicted by the truncated mean surface at the
/// timepoint's own covariate.
pub fn select_hyperparameters(
    dataset: &SpatioTemporalDataset,
    basis: &BasisSet,
    kernel: &TypeIKernel,
    candidates: &[Candidate],
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("empty hyperparameter grid".into()));
    }
    for c in candidates {
        if c.truncation == 0 || c.truncation > basis.len() {
            return Err(Error::InvalidTruncation { requested: c.truncation, available: basis.len() });
        }
        BandwidthConfig::new(c.h, ScalingWeights::Geometric(c.phi))?;
    }
    dataset.validate().map_err(Error::Validation)?;
    for (i, rec) in dataset.records.iter().enumerate() {
        if rec.observations.len() < 2 {
            return Err(Error::InsufficientLocations { record: i });
        }
    }
    let kmax = candidates.iter().map(|c| c.truncation).max().unwrap_or(1);
    let full = aggregate_dataset(dataset, basis, kmax)?;

    // distinct sites in order of first appearance
    let mut site_index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut sites: Vec<Vec<f64>> = Vec::new();
    for rec in &dataset.records {
        for obs in &rec.observations {
            let key = location_key(std::iter::once(obs.location.coords()));
            site_index.entry(key).or_insert_with(|| {
                sites.push(obs.location.coords().to_vec());
                sites.len() - 1
            });
        }
    }

    // reduced location sets per (fold, record)
    let mut reduced_sets: Vec<Vec<SpatialPoint>> = Vec::new();
    let mut reduced_obs: Vec<Vec<Observation>> = Vec::new();
    let mut fold_records: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); sites.len()];
    for (i, rec) in dataset.records.iter().enumerate() {
        for (j, obs) in rec.observations.iter().enumerate() {
            let f = site_index[&location_key(std::iter::once(obs.location.coords()))];
            let kept: Vec<Observation> = rec
                .observations
                .iter()
                .enumerate()
                .filter(|(jj, _)| *jj != j)
                .map(|(_, o)| o.clone())
                .collect();
            reduced_sets.push(kept.iter().map(|o| o.location.clone()).collect());
            reduced_obs.push(kept);
            fold_records[f].push((i, reduced_obs.len() - 1, obs.response));
        }
    }
    let covers = covers_for_sets(&reduced_sets, dataset.dim)?;
    let reduced_agg: Vec<Vec<f64>> = reduced_obs
        .par_iter()
        .zip(covers.par_iter())
        .map(|(obs, cover)| aggregate_prefix(obs, cover, basis, kmax))
        .collect::<Result<_>>()?;
    let folds: Vec<Fold> = fold_records
        .iter()
        .enumerate()
        .map(|(f, entries)| Fold {
            targets: entries.iter().map(|&(i, _, y)| (i, sites[f].clone(), y)).collect(),
            replaced: entries.iter().map(|&(i, slot, _)| (i, reduced_agg[slot].clone())).collect(),
        })
        .collect();

    let n = dataset.len();
    let covariates = dataset.covariates();
    let mut scores = Vec::with_capacity(candidates.len());
    let mut warnings = Vec::new();
    let mut distance_cache: HashMap<u64, Vec<f64>> = HashMap::new();
    for cand in candidates {
        let dist = distance_cache.entry(cand.phi.to_bits()).or_insert_with(|| {
            let w = ScalingWeights::Geometric(cand.phi);
            let mut d = vec![0.0; n * n];
            for a in 0..n {
                for b in 0..n {
                    d[a * n + b] = scaled_distance(&covariates[a], &covariates[b], &w);
                }
            }
            d
        });
        let k = cand.truncation;
        let per_fold: Vec<(f64, usize, usize)> = folds
            .par_iter()
            .map(|fold| {
                let mut sse = 0.0;
                let mut used = 0;
                let mut skipped = 0;
                let mut bvals = vec![0.0; k];
                for (i, s, y) in &fold.targets {
                    let mut num = vec![0.0; k];
                    let mut den = 0.0;
                    for j in 0..n {
                        let w = kernel.value(dist[*i * n + j] / cand.h);
                        if w > 0.0 {
                            let row = fold.replaced.get(&j).unwrap_or(&full[j]);
                            for (acc, v) in num.iter_mut().zip(row) {
                                *acc += w * v;
                            }
                            den += w;
                        }
                    }
                    if den <= 0.0 {
                        skipped += 1;
                        continue;
                    }
                    basis.eval_prefix_into(s, k, &mut bvals);
                    let pred: f64 = num.iter().zip(&bvals).map(|(a, b)| a / den * b).sum();
                    sse += (pred - y) * (pred - y);
                    used += 1;
                }
                (sse, used, skipped)
            })
            .collect();
        let (sse, used, skipped) =
            per_fold.iter().fold((0.0, 0, 0), |acc, x| (acc.0 + x.0, acc.1 + x.1, acc.2 + x.2));
        let total = used + skipped;
        let disqualified = total == 0 || skipped as f64 > MAX_SKIP_FRACTION * total as f64;
        if skipped > 0 {
            warnings.push(format!(
                "candidate h={} K={} phi={}: {skipped} of {total} held-out predictions skipped (NoNeighbors)",
                cand.h, cand.truncation, cand.phi
            ));
        }
        let rmse = if disqualified || used == 0 { None } else { Some((sse / used as f64).sqrt()) };
        scores.push(CandidateScore { candidate: *cand, rmse, skipped, total });
    }

    let best = scores
        .iter()
        .filter_map(|s| s.rmse.map(|r| (s.candidate, r)))
        .min_by(|a, b| {
            a.1.total_cmp(&b.1)
                .then(a.0.h.total_cmp(&b.0.h))
                .then(a.0.truncation.cmp(&b.0.truncation))
                .then(a.0.phi.total_cmp(&b.0.phi))
        })
        .map(|(c, _)| c)
        .ok_or(Error::NoCandidate)?;
    Ok(Selection { best, scores, warnings })
}
