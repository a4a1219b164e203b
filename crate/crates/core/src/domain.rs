//! Core data types: spatial points on the unit hypercube, zero-padded
//! covariate sequences, scaling weights and the irregular spatio-temporal
//! dataset itself.
//!
//! All types are immutable once built and can be shared across threads.

use crate::error::{Error, Result, ValidationReport, Violation, ViolationKind};

/// A location in `[0,1]^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialPoint(Vec<f64>);

impl SpatialPoint {
    pub fn new(coords: Vec<f64>) -> Self {
        Self(coords)
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn in_unit_cube(&self) -> bool {
        self.0.iter().all(|c| (0.0..=1.0).contains(c))
    }

    pub fn distance_sq(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

impl From<Vec<f64>> for SpatialPoint {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Observed prefix of an infinite covariate sequence. Entries past the end
/// are zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CovariateVector(Vec<f64>);

impl CovariateVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn scalar(x: f64) -> Self {
        Self(vec![x])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Entry `j` (0-based) with zero extension.
    pub fn get(&self, j: usize) -> f64 {
        self.0.get(j).copied().unwrap_or(0.0)
    }
}

/// Scaling sequence `ζ_j > 0` defining the discounted metric
/// `‖D⁻¹(x − y)‖ = sqrt(Σ_j ζ_j⁻² (x_j − y_j)²)`.
#[derive(Debug, Clone, PartialEq)]
pub enum ScalingWeights {
    /// `ζ_j = φ^j` for `j = 1, 2, …`.
    Geometric(f64),
    /// Explicit weights; coordinates past the end of the list are fully
    /// discounted (contribute nothing to the distance).
    Explicit(Vec<f64>),
}

impl Default for ScalingWeights {
    fn default() -> Self {
        ScalingWeights::Geometric(0.9)
    }
}

impl ScalingWeights {
    pub fn validate(&self) -> Result<()> {
        match self {
            ScalingWeights::Geometric(phi) if !(*phi > 0.0 && *phi < 1.0) => Err(
                Error::InvalidConfig(format!("geometric weight phi must lie in (0,1), got {phi}")),
            ),
            ScalingWeights::Explicit(w) if w.iter().any(|z| !(*z > 0.0) || !z.is_finite()) => Err(
                Error::InvalidConfig("explicit scaling weights must be positive and finite".into()),
            ),
            _ => Ok(()),
        }
    }

    /// `ζ⁻²` for the 0-based coordinate `j`.
    pub fn inverse_sq(&self, j: usize) -> f64 {
        match self {
            ScalingWeights::Geometric(phi) => {
                let zeta = phi.powi(j as i32 + 1);
                1.0 / (zeta * zeta)
            }
            ScalingWeights::Explicit(w) => match w.get(j) {
                Some(z) => 1.0 / (z * z),
                None => 0.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub location: SpatialPoint,
    pub response: f64,
}

impl Observation {
    pub fn new(location: impl Into<SpatialPoint>, response: f64) -> Self {
        Self { location: location.into(), response }
    }
}

/// All observations made at one timepoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub time: f64,
    pub observations: Vec<Observation>,
    pub covariate: CovariateVector,
}

impl Record {
    pub fn new(time: f64, observations: Vec<Observation>, covariate: CovariateVector) -> Self {
        Self { time, observations, covariate }
    }

    pub fn locations(&self) -> impl Iterator<Item = &SpatialPoint> {
        self.observations.iter().map(|o| &o.location)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatioTemporalDataset {
    pub dim: usize,
    pub records: Vec<Record>,
}

impl SpatioTemporalDataset {
    pub fn new(dim: usize, records: Vec<Record>) -> Self {
        Self { dim, records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn covariates(&self) -> Vec<CovariateVector> {
        self.records.iter().map(|r| r.covariate.clone()).collect()
    }

    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<(), ValidationReport> {
        let mut violations = Vec::new();
        let mut push = |record, kind| violations.push(Violation { record, kind });
        for (i, rec) in self.records.iter().enumerate() {
            if i > 0 {
                let prev = self.records[i - 1].time;
                if rec.time.partial_cmp(&prev) != Some(std::cmp::Ordering::Greater) {
                    push(i, ViolationKind::NonIncreasingTime { previous: prev, current: rec.time });
                }
            }
            if rec.observations.is_empty() {
                push(i, ViolationKind::EmptyTimepoint);
            }
            for (j, obs) in rec.observations.iter().enumerate() {
                if obs.location.dim() != self.dim {
                    push(
                        i,
                        ViolationKind::DimensionMismatch {
                            location: j,
                            expected: self.dim,
                            found: obs.location.dim(),
                        },
                    );
                    continue;
                }
                for (axis, &c) in obs.location.coords().iter().enumerate() {
                    if !(0.0..=1.0).contains(&c) {
                        push(i, ViolationKind::CoordinateOutOfRange { location: j, axis, value: c });
                    }
                }
                if !obs.response.is_finite() {
                    push(i, ViolationKind::NonFiniteResponse { location: j });
                }
            }
            // Sort indices by coordinates so duplicates become adjacent.
            let mut order: Vec<usize> = (0..rec.observations.len())
                .filter(|&j| rec.observations[j].location.dim() == self.dim)
                .collect();
            order.sort_by(|&a, &b| {
                let ca = rec.observations[a].location.coords();
                let cb = rec.observations[b].location.coords();
                ca.partial_cmp(cb).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
            });
            for w in order.windows(2) {
                if rec.observations[w[0]].location == rec.observations[w[1]].location {
                    let (first, second) = (w[0].min(w[1]), w[0].max(w[1]));
                    push(i, ViolationKind::DuplicateLocation { first, second });
                }
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ValidationReport { violations })
        }
    }
}

/// Axis-aligned box `[lo_a, hi_a]` per spatial axis.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundingBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoundingBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Self { lower, upper }
    }

    /// Smallest box containing every point; `None` when there are no points.
    pub fn enclosing<'a>(points: impl IntoIterator<Item = &'a [f64]>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut lower = first.to_vec();
        let mut upper = first.to_vec();
        for p in it {
            for (a, &c) in p.iter().enumerate() {
                lower[a] = lower[a].min(c);
                upper[a] = upper[a].max(c);
            }
        }
        Some(Self { lower, upper })
    }
}

/// Rescaled times and locations, ready to be assembled into records.
#[derive(Debug, Clone, PartialEq)]
pub struct Rescaled {
    pub times: Vec<f64>,
    pub locations: Vec<Vec<SpatialPoint>>,
}

fn affine(value: f64, lo: f64, hi: f64) -> f64 {
    if value == lo {
        0.0
    } else if value == hi {
        1.0
    } else {
        (value - lo) / (hi - lo)
    }
}

/// Maps the time range onto `[0,1]` and every spatial axis of `bbox` onto
/// `[0,1]`. A single timepoint is mapped to `0`.
pub fn rescale(
    raw_times: &[f64],
    raw_locations: &[Vec<Vec<f64>>],
    bbox: &BoundingBox,
) -> Result<Rescaled> {
    if bbox.lower.len() != bbox.upper.len() {
        return Err(Error::DimensionMismatch { expected: bbox.lower.len(), found: bbox.upper.len() });
    }
    for (a, (lo, hi)) in bbox.lower.iter().zip(&bbox.upper).enumerate() {
        if !(hi > lo) {
            return Err(Error::DegenerateRange { axis: format!("s{}", a + 1), value: *lo });
        }
    }
    let times = match raw_times {
        [] => Vec::new(),
        [_] => vec![0.0],
        _ => {
            let lo = raw_times.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = raw_times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !(hi > lo) {
                return Err(Error::DegenerateRange { axis: "t".into(), value: lo });
            }
            raw_times.iter().map(|&t| affine(t, lo, hi)).collect()
        }
    };
    let dim = bbox.lower.len();
    let mut locations = Vec::with_capacity(raw_locations.len());
    for per_time in raw_locations {
        let mut out = Vec::with_capacity(per_time.len());
        for p in per_time {
            if p.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: p.len() });
            }
            let coords = p
                .iter()
                .enumerate()
                .map(|(a, &c)| affine(c, bbox.lower[a], bbox.upper[a]))
                .collect();
            out.push(SpatialPoint::new(coords));
        }
        locations.push(out);
    }
    Ok(Rescaled { times, locations })
}
