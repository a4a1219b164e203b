//! Modified Monte-Carlo aggregation of irregularly located responses.
//!
//! For one timepoint the unit cube is cut into hypercubes whose diameter
//! equals the covering radius `ε*` of the observed sites. Each cube is
//! represented by the observed site nearest to its center, and the
//! aggregated response for basis function `b_k` is the average of
//! `Y(s) b_k(s)` over the representatives. Representatives are counted
//! with multiplicity, so a site that is nearest to several centers
//! contributes once per cell.

use rayon::prelude::*;

use crate::basis::BasisSet;
use crate::domain::{Observation, SpatialPoint};
use crate::error::{Error, Result};

/// Default cap on the number of grid cells.
pub const DEFAULT_CELL_CAP: usize = 10_000_000;

/// Probe count per axis used to approximate the covering radius.
pub fn probes_per_axis(dim: usize) -> usize {
    if dim <= 3 {
        201
    } else {
        // keep the total near 201³
        ((201f64.powi(3)).powf(1.0 / dim as f64).floor() as usize).max(2)
    }
}

/// Nearest-site lookup on a uniform bucket grid over `[0,1]^d`.
#[derive(Debug, Clone)]
pub struct NearestSites {
    dim: usize,
    per_axis: usize,
    side: f64,
    coords: Vec<f64>,
    buckets: Vec<Vec<usize>>,
}

impl NearestSites {
    pub fn new<'a>(dim: usize, sites: impl IntoIterator<Item = &'a SpatialPoint>) -> Self {
        let coords: Vec<f64> = sites.into_iter().flat_map(|p| p.coords().iter().copied()).collect();
        let n = coords.len() / dim.max(1);
        let per_axis = ((n as f64).powf(1.0 / dim as f64).ceil() as usize).clamp(1, 512);
        let side = 1.0 / per_axis as f64;
        let mut buckets = vec![Vec::new(); per_axis.pow(dim as u32)];
        for j in 0..n {
            let b = Self::bucket_of(&coords[j * dim..(j + 1) * dim], per_axis, side);
            buckets[b].push(j);
        }
        Self { dim, per_axis, side, coords, buckets }
    }

    fn axis_cell(x: f64, per_axis: usize, side: f64) -> usize {
        ((x / side).floor().max(0.0) as usize).min(per_axis - 1)
    }

    fn bucket_of(p: &[f64], per_axis: usize, side: f64) -> usize {
        p.iter().rev().fold(0, |acc, &x| acc * per_axis + Self::axis_cell(x, per_axis, side))
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    fn site(&self, j: usize) -> &[f64] {
        &self.coords[j * self.dim..(j + 1) * self.dim]
    }

    /// Index and squared distance of the nearest site; ties go to the lowest
    /// index.
    pub fn nearest(&self, q: &[f64]) -> Option<(usize, f64)> {
        if self.is_empty() {
            return None;
        }
        let center: Vec<i64> =
            q.iter().map(|&x| Self::axis_cell(x, self.per_axis, self.side) as i64).collect();
        let mut best: Option<(usize, f64)> = None;
        let pa = self.per_axis as i64;
        let mut offset = vec![0i64; self.dim];
        for ring in 0..self.per_axis as i64 {
            // every bucket at Chebyshev distance `ring` from the query bucket
            let width = 2 * ring + 1;
            let total = width.pow(self.dim as u32);
            for code in 0..total {
                let mut c = code;
                let mut on_ring = false;
                let mut inside = true;
                for slot in offset.iter_mut() {
                    *slot = c % width - ring;
                    c /= width;
                    on_ring |= slot.abs() == ring;
                }
                if !on_ring {
                    continue;
                }
                let mut bucket = 0usize;
                for a in (0..self.dim).rev() {
                    let cell = center[a] + offset[a];
                    if cell < 0 || cell >= pa {
                        inside = false;
                        break;
                    }
                    bucket = bucket * self.per_axis + cell as usize;
                }
                if !inside {
                    continue;
                }
                for &j in &self.buckets[bucket] {
                    let d: f64 = self.site(j).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                    best = match best {
                        Some((bj, bd)) if bd < d || (bd == d && bj < j) => Some((bj, bd)),
                        _ => Some((j, d)),
                    };
                }
            }
            if let Some((_, bd)) = best {
                // unvisited buckets lie at least `ring · side` away
                let bound = ring as f64 * self.side;
                if bd.sqrt() < bound {
                    break;
                }
            }
        }
        best
    }
}

fn probe_at(code: usize, per_axis: usize, step: f64, dim: usize) -> Vec<f64> {
    let mut c = code;
    (0..dim)
        .map(|_| {
            let i = c % per_axis;
            c /= per_axis;
            i as f64 * step
        })
        .collect()
}

/// Refinement levels after the probe pass; each shrinks the search box by
/// `REFINE_SHRINK`.
const REFINE_LEVELS: usize = 24;
const REFINE_SHRINK: f64 = 3.0;

/// Nested-grid ascent of the nearest-site distance from `start`, staying in
/// the unit cube. `active` must hold every site that can be nearest to a
/// point within the search box. Returns the best squared distance found.
fn refine(active: &[&[f64]], start: Vec<f64>, start_sq: f64, step: f64) -> f64 {
    let dim = start.len();
    let nearest_sq = |q: &[f64]| {
        active
            .iter()
            .map(|s| s.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    };
    let mut best = (start, start_sq);
    let mut spacing = step / REFINE_SHRINK;
    let reach = REFINE_SHRINK as i64;
    let width = (2 * reach + 1) as usize;
    let total = width.pow(dim as u32);
    let mut q = vec![0.0; dim];
    for _ in 0..REFINE_LEVELS {
        let center = best.0.clone();
        for code in 0..total {
            let mut c = code;
            for (slot, &x) in q.iter_mut().zip(&center) {
                let off = (c % width) as i64 - reach;
                c /= width;
                *slot = (x + off as f64 * spacing).clamp(0.0, 1.0);
            }
            let d = nearest_sq(&q);
            if d > best.1 {
                best = (q.clone(), d);
            }
        }
        spacing /= REFINE_SHRINK;
    }
    best.1
}

/// Covering radius of `locations` over `[0,1]^d`. The maximum distance to
/// the nearest site is located on a probe grid and then sharpened by a
/// local nested-grid search around every probe that is a local maximum
/// within one probe diagonal of the best.
pub fn effective_resolution(locations: &[SpatialPoint], dim: usize) -> Result<f64> {
    if locations.is_empty() {
        return Err(Error::EmptyLocations);
    }
    let index = NearestSites::new(dim, locations);
    let per_axis = probes_per_axis(dim);
    let total = per_axis.pow(dim as u32);
    let step = 1.0 / (per_axis - 1) as f64;
    let value = |code: usize| index.nearest(&probe_at(code, per_axis, step, dim)).map(|(_, d)| d).unwrap_or(0.0);
    let max_sq = (0..total).into_par_iter().map(value).reduce(|| 0.0, f64::max);
    let floor = (max_sq.sqrt() - step * (dim as f64).sqrt()).max(0.0);
    let floor_sq = floor * floor;
    let neighbors = 3usize.pow(dim as u32);
    let refined = (0..total)
        .into_par_iter()
        .filter_map(|code| {
            let v = value(code);
            if v < floor_sq || v == 0.0 {
                return None;
            }
            let p = probe_at(code, per_axis, step, dim);
            let is_peak = (0..neighbors).all(|n| {
                let mut c = n;
                let q: Option<Vec<f64>> = p
                    .iter()
                    .map(|&x| {
                        let off = (c % 3) as f64 - 1.0;
                        c /= 3;
                        let y = x + off * step;
                        (-1e-12..=1.0 + 1e-12).contains(&y).then_some(y.clamp(0.0, 1.0))
                    })
                    .collect();
                q.is_none_or(|q| index.nearest(&q).map(|(_, d)| d).unwrap_or(0.0) <= v)
            });
            if !is_peak {
                return None;
            }
            // the search box has half-width at most `drift` per axis
            let drift = step * REFINE_SHRINK / (REFINE_SHRINK - 1.0) * (dim as f64).sqrt();
            let radius = v.sqrt() + 2.0 * drift;
            let active: Vec<&[f64]> = locations
                .iter()
                .map(|l| l.coords())
                .filter(|c| c.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() <= radius * radius)
                .collect();
            Some(refine(&active, p, v, step))
        })
        .reduce(|| 0.0, f64::max);
    Ok(max_sq.max(refined).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub center: SpatialPoint,
    /// Index into the timepoint's location list.
    pub representative: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCover {
    pub epsilon_star: f64,
    /// Side length `ε*/√d` of an unclipped cell.
    pub side: f64,
    pub cells_per_axis: usize,
    pub cells: Vec<Cell>,
}

impl GridCover {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Number of cells represented by each location.
    pub fn multiplicities(&self, n_locations: usize) -> Vec<usize> {
        let mut m = vec![0; n_locations];
        for c in &self.cells {
            m[c.representative] += 1;
        }
        m
    }
}

/// Grid of hypercubes with diameter `epsilon_star`, each assigned its
/// nearest observed location. Cells that overrun the unit cube are clipped
/// and centered on the clipped centroid.
pub fn build_cover(locations: &[SpatialPoint], epsilon_star: f64, dim: usize) -> Result<GridCover> {
    build_cover_with_cap(locations, epsilon_star, dim, DEFAULT_CELL_CAP)
}

pub fn build_cover_with_cap(
    locations: &[SpatialPoint],
    epsilon_star: f64,
    dim: usize,
    cap: usize,
) -> Result<GridCover> {
    if !(epsilon_star > 0.0) || !epsilon_star.is_finite() {
        return Err(Error::InvalidResolution(epsilon_star));
    }
    if locations.is_empty() {
        return Err(Error::EmptyLocations);
    }
    let side = epsilon_star / (dim as f64).sqrt();
    let ratio = 1.0 / side;
    let rounded = ratio.round();
    // absorb rounding noise so exact tilings do not grow a sliver cell
    let per_axis_f = if (ratio - rounded).abs() <= 1e-9 * ratio { rounded.max(1.0) } else { ratio.ceil() };
    let total = per_axis_f.powi(dim as i32);
    if total > cap as f64 {
        return Err(Error::ResolutionTooFine { cells: total, cap });
    }
    let per_axis = per_axis_f as usize;
    let centers_1d: Vec<f64> = (0..per_axis)
        .map(|i| {
            let lo = (i as f64 * side).min(1.0);
            let hi = if i + 1 == per_axis { 1.0 } else { ((i + 1) as f64 * side).min(1.0) };
            0.5 * (lo + hi)
        })
        .collect();
    let index = NearestSites::new(dim, locations);
    let total = per_axis.pow(dim as u32);
    let cells = (0..total)
        .into_par_iter()
        .map(|code| {
            let mut c = code;
            let center: Vec<f64> = (0..dim)
                .map(|_| {
                    let i = c % per_axis;
                    c /= per_axis;
                    centers_1d[i]
                })
                .collect();
            let (representative, _) = index.nearest(&center).expect("non-empty locations");
            Cell { center: SpatialPoint::new(center), representative }
        })
        .collect();
    Ok(GridCover { epsilon_star, side, cells_per_axis: per_axis, cells })
}

/// Computes `ε*` and the cover for one timepoint.
pub fn cover_for(locations: &[SpatialPoint], dim: usize) -> Result<GridCover> {
    let eps = effective_resolution(locations, dim)?;
    build_cover(locations, eps, dim)
}

/// Aggregated response `Ŷ*_k` for a single basis index.
pub fn aggregate(
    observations: &[Observation],
    cover: &GridCover,
    basis: &BasisSet,
    k: usize,
) -> Result<f64> {
    if observations.is_empty() {
        return Err(Error::EmptyLocations);
    }
    if k >= basis.len() {
        return Err(Error::IndexOutOfRange { index: k, count: basis.len() });
    }
    let mut sum = 0.0;
    for cell in &cover.cells {
        let obs = &observations[cell.representative];
        sum += obs.response * basis.eval(k, obs.location.coords())?;
    }
    Ok(sum / cover.len() as f64)
}

/// Aggregated responses for basis indices `0..count`.
pub fn aggregate_prefix(
    observations: &[Observation],
    cover: &GridCover,
    basis: &BasisSet,
    count: usize,
) -> Result<Vec<f64>> {
    if observations.is_empty() {
        return Err(Error::EmptyLocations);
    }
    if count > basis.len() {
        return Err(Error::InvalidTruncation { requested: count, available: basis.len() });
    }
    let weights = cover.multiplicities(observations.len());
    let mut out = vec![0.0; count];
    let mut vals = vec![0.0; count];
    for (obs, &w) in observations.iter().zip(&weights) {
        if w == 0 {
            continue;
        }
        basis.eval_prefix_into(obs.location.coords(), count, &mut vals);
        let scale = w as f64 * obs.response;
        for (o, v) in out.iter_mut().zip(&vals) {
            *o += scale * v;
        }
    }
    let r = cover.len() as f64;
    out.iter_mut().for_each(|o| *o /= r);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::TensorRule;

    fn pts(v: &[[f64; 2]]) -> Vec<SpatialPoint> {
        v.iter().map(|p| SpatialPoint::new(p.to_vec())).collect()
    }

    fn grid(p: usize) -> Vec<SpatialPoint> {
        let step = 1.0 / (p - 1) as f64;
        let mut out = Vec::with_capacity(p * p);
        for j in 0..p {
            for i in 0..p {
                out.push(SpatialPoint::new(vec![i as f64 * step, j as f64 * step]));
            }
        }
        out
    }

    /// Brute-force max-min distance over a probe grid.
    fn covering_oracle(locs: &[SpatialPoint], probes: usize) -> f64 {
        let step = 1.0 / (probes - 1) as f64;
        let mut worst: f64 = 0.0;
        for i in 0..probes {
            for j in 0..probes {
                let q = [i as f64 * step, j as f64 * step];
                let d = locs.iter().map(|l| l.distance_sq(&q)).fold(f64::INFINITY, f64::min);
                worst = worst.max(d.sqrt());
            }
        }
        worst
    }

    #[test]
    fn covering_radius_examples() {
        let corners = pts(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let eps = effective_resolution(&corners, 2).unwrap();
        assert!((eps - covering_oracle(&corners, 201)).abs() < 1e-12);
        assert!((eps - 0.5f64.sqrt()).abs() < 1e-2);

        let center = pts(&[[0.5, 0.5]]);
        let eps = effective_resolution(&center, 2).unwrap();
        assert!((eps - 0.5f64.sqrt()).abs() < 1e-2);

        let dense = grid(201);
        assert!(effective_resolution(&dense, 2).unwrap() <= 1.0 / 200.0);

        assert!(matches!(effective_resolution(&[], 2), Err(Error::EmptyLocations)));
    }

    #[test]
    fn nearest_matches_linear_scan() {
        let locs = pts(&[[0.1, 0.2], [0.9, 0.95], [0.5, 0.5], [0.52, 0.48], [0.0, 1.0], [0.33, 0.7]]);
        let index = NearestSites::new(2, &locs);
        for i in 0..=40 {
            for j in 0..=40 {
                let q = [i as f64 / 40.0, j as f64 / 40.0];
                let brute = locs
                    .iter()
                    .enumerate()
                    .map(|(k, l)| (k, l.distance_sq(&q)))
                    .fold((usize::MAX, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b });
                assert_eq!(index.nearest(&q).unwrap().0, brute.0, "{q:?}");
            }
        }
    }

    #[test]
    fn cover_cell_counts() {
        let locs = pts(&[[0.1, 0.1], [0.9, 0.9]]);
        let cover = build_cover(&locs, 0.5f64.sqrt(), 2).unwrap();
        assert_eq!(cover.len(), 4);
        let centers: Vec<_> = cover.cells.iter().map(|c| c.center.coords().to_vec()).collect();
        for c in [[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]] {
            assert!(centers.iter().any(|x| (x[0] - c[0]).abs() < 1e-12 && (x[1] - c[1]).abs() < 1e-12));
        }

        let one_d = vec![SpatialPoint::new(vec![0.3])];
        let cover = build_cover(&one_d, 0.5, 1).unwrap();
        assert_eq!(cover.len(), 2);
    }

    #[test]
    fn clipped_boundary_cells() {
        let locs = vec![SpatialPoint::new(vec![0.0]), SpatialPoint::new(vec![1.0])];
        let cover = build_cover(&locs, 0.4, 1).unwrap();
        assert_eq!(cover.cells_per_axis, 3);
        let last = cover.cells.last().unwrap().center.coords()[0];
        assert!((last - 0.9).abs() < 1e-12);
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        // center (0.25, 0.25) is equidistant from both sites
        let locs = pts(&[[0.0, 0.25], [0.5, 0.25]]);
        let cover = build_cover(&locs, 0.5f64.sqrt(), 2).unwrap();
        let cell = cover.cells.iter().find(|c| c.center.coords() == [0.25, 0.25]).unwrap();
        assert_eq!(cell.representative, 0);
        let swapped = pts(&[[0.5, 0.25], [0.0, 0.25]]);
        let cover = build_cover(&swapped, 0.5f64.sqrt(), 2).unwrap();
        let cell = cover.cells.iter().find(|c| c.center.coords() == [0.25, 0.25]).unwrap();
        assert_eq!(cell.representative, 0);
    }

    #[test]
    fn resolution_cap_and_invalid() {
        let locs = pts(&[[0.5, 0.5]]);
        assert!(matches!(
            build_cover_with_cap(&locs, 1e-3, 2, 1000),
            Err(Error::ResolutionTooFine { .. })
        ));
        assert!(matches!(build_cover(&locs, 0.0, 2), Err(Error::InvalidResolution(_))));
    }

    #[test]
    fn constant_response_aggregates_to_constant() {
        let basis = BasisSet::build(2, 6).unwrap();
        let locs = pts(&[[0.1, 0.3], [0.8, 0.2], [0.4, 0.9]]);
        let obs: Vec<_> = locs.iter().map(|l| Observation::new(l.clone(), 3.0)).collect();
        let cover = cover_for(&locs, 2).unwrap();
        let v = aggregate(&obs, &cover, &basis, 0).unwrap();
        assert!((v - 3.0).abs() < 1e-14);
        let all = aggregate_prefix(&obs, &cover, &basis, 6).unwrap();
        for k in 0..6 {
            assert!((all[k] - aggregate(&obs, &cover, &basis, k).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_onto_second_function() {
        let basis = BasisSet::build(2, 6).unwrap();
        let locs = grid(50);
        let obs: Vec<_> = locs
            .iter()
            .map(|l| Observation::new(l.clone(), basis.eval(1, l.coords()).unwrap()))
            .collect();
        let cover = cover_for(&locs, 2).unwrap();
        let rule = TensorRule::new(8, 2).unwrap();
        let exact_k2 = rule.integrate(|s| basis.eval(1, s).unwrap().powi(2));
        let exact_k3 = rule.integrate(|s| basis.eval(1, s).unwrap() * basis.eval(2, s).unwrap());
        assert!((aggregate(&obs, &cover, &basis, 1).unwrap() - exact_k2).abs() < 0.05);
        assert!((aggregate(&obs, &cover, &basis, 2).unwrap() - exact_k3).abs() < 0.05);
    }
}
