//! Simulation design: an AR(1) covariate driving a linear spatial mean with
//! Gaussian-correlated noise on a regular grid, three covariate-availability
//! scenarios, and the holdout forecasting experiment.
//!
//! Seeding: replication `b` draws from `ChaCha8Rng::seed_from_u64(seed)` with
//! stream `b`, so each replication is reproducible on its own and
//! independent of scheduling.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::basis::BasisSet;
use crate::domain::{CovariateVector, Observation, Record, ScalingWeights, SpatialPoint, SpatioTemporalDataset};
use crate::error::{Error, Result};
use crate::estimator::{select_hyperparameters, Candidate, FittedModel};
use crate::kernel::{BandwidthConfig, TypeIKernel};

/// Responses with `|Y|` below this are left out of MAPE.
pub const MAPE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    pub replications: usize,
    pub seed: u64,
    pub ar_intercept: f64,
    pub ar_coef: f64,
    pub ar_noise_sd: f64,
    pub spatial_noise_sd: f64,
    /// Decay rate of the Gaussian noise correlation.
    pub rho0: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 100,
            p: 15,
            replications: 100,
            seed: 0,
            ar_intercept: 1.0,
            ar_coef: 0.5,
            ar_noise_sd: 0.1,
            spatial_noise_sd: 0.1,
            rho0: 1.0,
        }
    }
}

impl SimConfig {
    pub fn new(n: usize, p: usize, replications: usize, seed: u64) -> Result<Self> {
        let c = Self { n, p, replications, seed, ..Self::default() };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.n < 2 {
            return fail(format!("n must be at least 2, got {}", self.n));
        }
        if self.p < 2 {
            return fail(format!("p must be at least 2, got {}", self.p));
        }
        if self.replications < 1 {
            return fail("at least one replication is required".into());
        }
        if !(self.ar_coef.abs() < 1.0) {
            return fail(format!("AR coefficient must lie in (-1, 1), got {}", self.ar_coef));
        }
        if !(self.ar_noise_sd >= 0.0 && self.spatial_noise_sd >= 0.0 && self.rho0 > 0.0) {
            return fail("noise scales must be nonnegative and rho0 positive".into());
        }
        Ok(())
    }

    pub fn stationary_mean(&self) -> f64 {
        self.ar_intercept / (1.0 - self.ar_coef)
    }

    pub fn stationary_sd(&self) -> f64 {
        self.ar_noise_sd / (1.0 - self.ar_coef * self.ar_coef).sqrt()
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 / (self.n - 1) as f64
    }
}

/// `p×p` grid on `[0,1]²`, first coordinate varying fastest.
pub fn grid(p: usize) -> Vec<SpatialPoint> {
    let step = |i: usize| if i + 1 == p { 1.0 } else { i as f64 / (p - 1) as f64 };
    (0..p).flat_map(|j| (0..p).map(move |i| SpatialPoint::new(vec![step(i), step(j)]))).collect()
}

/// Factor `L` with `L Lᵀ ≈ Σ` for the spatial noise.
#[derive(Debug, Clone)]
pub struct NoiseFactor {
    pub lower: DMatrix<f64>,
    /// Diagonal jitter added before a successful Cholesky; `None` when the
    /// eigen fallback was used.
    pub jitter: Option<f64>,
}

pub fn noise_covariance(sites: &[SpatialPoint], sd: f64, rho0: f64) -> DMatrix<f64> {
    let m = sites.len();
    DMatrix::from_fn(m, m, |a, b| {
        if a == b {
            sd * sd
        } else {
            sd * sd * (-rho0 * sites[a].distance_sq(sites[b].coords())).exp()
        }
    })
}

/// Cholesky with relative jitter `1e-12 … 1e-8` of the mean diagonal, then a
/// clipped eigendecomposition.
pub fn factorize(cov: &DMatrix<f64>) -> Result<NoiseFactor> {
    let m = cov.nrows();
    let scale = (cov.trace() / m as f64).max(f64::MIN_POSITIVE);
    if let Some(c) = cov.clone().cholesky() {
        return Ok(NoiseFactor { lower: c.l(), jitter: Some(0.0) });
    }
    for exp in -12..=-8 {
        let jitter = scale * 10f64.powi(exp);
        let mut j = cov.clone();
        for i in 0..m {
            j[(i, i)] += jitter;
        }
        if let Some(c) = j.cholesky() {
            return Ok(NoiseFactor { lower: c.l(), jitter: Some(jitter) });
        }
    }
    let eig = SymmetricEigen::new(cov.clone());
    let min = eig.eigenvalues.min();
    if min < -1e-8 * scale {
        return Err(Error::Factorization(min));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(NoiseFactor { lower: &eig.eigenvectors * DMatrix::from_diagonal(&roots), jitter: None })
}

type FactorKey = (usize, u64, u64);

fn cached_factor(p: usize, sd: f64, rho0: f64) -> Result<Arc<NoiseFactor>> {
    static CACHE: OnceLock<Mutex<HashMap<FactorKey, Arc<NoiseFactor>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let key = (p, sd.to_bits(), rho0.to_bits());
    if let Some(f) = cache.lock().expect("factor cache").get(&key) {
        return Ok(f.clone());
    }
    let f = Arc::new(factorize(&noise_covariance(&grid(p), sd, rho0))?);
    cache.lock().expect("factor cache").insert(key, f.clone());
    Ok(f)
}

/// One realization with the latent covariate and the true mean recorded.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub config: SimConfig,
    pub sites: Vec<SpatialPoint>,
    pub x: Vec<f64>,
    /// `μ(X_t, s) = X_t (s₁ + s₂)` per timepoint and site.
    pub truth: Vec<Vec<f64>>,
    /// Responses per timepoint and site.
    pub y: Vec<Vec<f64>>,
}

impl SimulatedData {
    pub fn times(&self) -> Vec<f64> {
        (0..self.config.n).map(|i| self.config.time(i)).collect()
    }

    /// Dataset over timepoints `range` with the given covariates.
    pub fn dataset_with(&self, range: std::ops::Range<usize>, covariates: &[CovariateVector]) -> SpatioTemporalDataset {
        let records = range
            .zip(covariates)
            .map(|(t, c)| {
                let obs = self.sites.iter().zip(&self.y[t]).map(|(s, &y)| Observation::new(s.clone(), y)).collect();
                Record::new(self.config.time(t), obs, c.clone())
            })
            .collect();
        SpatioTemporalDataset::new(2, records)
    }

    /// All timepoints with the true covariate `X_t`.
    pub fn dataset(&self) -> SpatioTemporalDataset {
        let cov: Vec<_> = self.x.iter().map(|&x| CovariateVector::scalar(x)).collect();
        self.dataset_with(0..self.config.n, &cov)
    }

    pub fn mean_response(&self, t: usize) -> f64 {
        self.y[t].iter().sum::<f64>() / self.y[t].len() as f64
    }
}

pub fn generate(config: &SimConfig) -> Result<SimulatedData> {
    generate_replication(config, 0)
}

pub fn replication_rng(seed: u64, replication: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replication as u64);
    rng
}

pub fn generate_replication(config: &SimConfig, replication: usize) -> Result<SimulatedData> {
    config.validate()?;
    let factor = cached_factor(config.p, config.spatial_noise_sd, config.rho0)?;
    let sites = grid(config.p);
    let m = sites.len();
    let mut rng = replication_rng(config.seed, replication);
    let mut x = Vec::with_capacity(config.n);
    let mut truth = Vec::with_capacity(config.n);
    let mut y = Vec::with_capacity(config.n);
    let mut xt = config.stationary_mean() + config.stationary_sd() * rng.sample::<f64, _>(StandardNormal);
    for t in 0..config.n {
        if t > 0 {
            xt = config.ar_intercept + config.ar_coef * xt + config.ar_noise_sd * rng.sample::<f64, _>(StandardNormal);
        }
        let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let eps = &factor.lower * z;
        let mu: Vec<f64> = sites.iter().map(|s| xt * (s.coords()[0] + s.coords()[1])).collect();
        y.push(mu.iter().zip(eps.iter()).map(|(a, e)| a + e).collect());
        truth.push(mu);
        x.push(xt);
    }
    Ok(SimulatedData { config: config.clone(), sites, x, truth, y })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    /// `X_t` known.
    S1,
    /// Only `X_{t−1}` known.
    S2,
    /// Only the spatial mean of `Y_{t−1}` known.
    S3,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::S1, Scenario::S2, Scenario::S3];

    /// First timepoint with an available covariate.
    pub fn first_index(self) -> usize {
        match self {
            Scenario::S1 => 0,
            _ => 1,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Ok(Scenario::S1),
            "S2" => Ok(Scenario::S2),
            "S3" => Ok(Scenario::S3),
            other => Err(Error::InvalidConfig(format!("unknown scenario {other:?}"))),
        }
    }
}

pub fn covariate_at(data: &SimulatedData, scenario: Scenario, t: usize) -> Result<CovariateVector> {
    match (scenario, t) {
        (Scenario::S1, _) => Ok(CovariateVector::scalar(data.x[t])),
        (_, 0) => Err(Error::FirstTimepointUnavailable(scenario.to_string())),
        (Scenario::S2, _) => Ok(CovariateVector::scalar(data.x[t - 1])),
        (Scenario::S3, _) => Ok(CovariateVector::scalar(data.mean_response(t - 1))),
    }
}

/// Covariates from `scenario.first_index()` onward.
pub fn make_covariates(data: &SimulatedData, scenario: Scenario) -> Vec<CovariateVector> {
    (scenario.first_index()..data.config.n)
        .map(|t| covariate_at(data, scenario, t).expect("index past the first timepoint"))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Hyperparameters {
    Fixed(Candidate),
    /// Leave-one-location-out selection per replication.
    CrossValidated(Vec<Candidate>),
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters::Fixed(Candidate { h: 0.1, truncation: 6, phi: 0.9 })
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub scenario: Scenario,
    pub holdout: usize,
    pub kernel: TypeIKernel,
    pub hyper: Hyperparameters,
}

impl ExperimentSpec {
    pub fn new(scenario: Scenario, holdout: usize) -> Self {
        Self { scenario, holdout, kernel: TypeIKernel::default(), hyper: Hyperparameters::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub scenario: Scenario,
    /// 1-based holdout step.
    pub horizon: usize,
    /// 0-based timepoint index.
    pub time_index: usize,
    pub bias: f64,
    pub mae: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
    pub count: usize,
    pub mape_excluded: usize,
    /// Replications where no training covariate was within the bandwidth.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub rows: Vec<MetricRow>,
    pub selected: Vec<Candidate>,
    pub warnings: Vec<String>,
}

impl ExperimentResult {
    pub fn mean_mape(&self) -> f64 {
        self.rows.iter().map(|r| r.mape).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_rmse(&self) -> f64 {
        self.rows.iter().map(|r| r.rmse).sum::<f64>() / self.rows.len() as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Accum {
    err: f64,
    abs: f64,
    sq: f64,
    pct: f64,
    count: usize,
    pct_count: usize,
    excluded: usize,
    skipped: usize,
}

struct Replication {
    horizons: Vec<Accum>,
    selected: Candidate,
    warnings: Vec<String>,
}

fn fit_candidate(
    train: &SpatioTemporalDataset,
    basis: &BasisSet,
    kernel: TypeIKernel,
    c: &Candidate,
) -> Result<FittedModel> {
    let bw = BandwidthConfig::new(c.h, ScalingWeights::Geometric(c.phi))?;
    FittedModel::fit(train, basis, kernel, bw, c.truncation)
}

fn run_replication(config: &SimConfig, spec: &ExperimentSpec, basis: &BasisSet, b: usize) -> Result<Replication> {
    let data = generate_replication(config, b)?;
    let n = config.n;
    let start = spec.scenario.first_index();
    let train_end = n - spec.holdout;
    let covs: Vec<CovariateVector> =
        (start..train_end).map(|t| covariate_at(&data, spec.scenario, t)).collect::<Result<_>>()?;
    let train = data.dataset_with(start..train_end, &covs);
    let mut warnings = Vec::new();
    let selected = match &spec.hyper {
        Hyperparameters::Fixed(c) => *c,
        Hyperparameters::CrossValidated(grid) => {
            let sel = select_hyperparameters(&train, basis, &spec.kernel, grid)?;
            warnings.extend(sel.warnings.iter().map(|w| format!("replication {b}: {w}")));
            sel.best
        }
    };
    let model = fit_candidate(&train, basis, spec.kernel, &selected)?;
    let k = selected.truncation;
    let bvals: Vec<Vec<f64>> = data
        .sites
        .iter()
        .map(|s| {
            let mut v = vec![0.0; k];
            basis.eval_prefix_into(s.coords(), k, &mut v);
            v
        })
        .collect();

    let mut horizons = vec![Accum::default(); spec.holdout];
    let mut proxy: Option<f64> = None;
    for (j, t) in (train_end..n).enumerate() {
        let query = match spec.scenario {
            Scenario::S3 => CovariateVector::scalar(proxy.unwrap_or_else(|| data.mean_response(t - 1))),
            _ => covariate_at(&data, spec.scenario, t)?,
        };
        let acc = &mut horizons[j];
        let fit = match model.local_fit(&query) {
            Ok(f) => f,
            Err(Error::NoNeighbors { .. }) => {
                acc.skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut pred_sum = 0.0;
        for (bv, &y) in bvals.iter().zip(&data.y[t]) {
            let yhat: f64 = fit.mu.iter().zip(bv).map(|(m, b)| m * b).sum();
            pred_sum += yhat;
            let e = yhat - y;
            acc.err += e;
            acc.abs += e.abs();
            acc.sq += e * e;
            acc.count += 1;
            if y.abs() < MAPE_FLOOR {
                acc.excluded += 1;
            } else {
                acc.pct += e.abs() / y.abs();
                acc.pct_count += 1;
            }
        }
        proxy = Some(pred_sum / bvals.len() as f64);
    }
    Ok(Replication { horizons, selected, warnings })
}

/// Fits on the first `n − holdout` timepoints of each replication and scores
/// predictions at the held-out ones. Replications run in parallel and are
/// reduced in replication order.
pub fn run_experiment(config: &SimConfig, spec: &ExperimentSpec) -> Result<ExperimentResult> {
    config.validate()?;
    if spec.holdout == 0 || spec.holdout >= config.n {
        return Err(Error::InvalidConfig(format!(
            "holdout must lie in 1..{}, got {}",
            config.n,
            spec.holdout
        )));
    }
    if config.n - spec.holdout <= spec.scenario.first_index() {
        return Err(Error::InvalidConfig("no training timepoints left".into()));
    }
    let max_k = match &spec.hyper {
        Hyperparameters::Fixed(c) => c.truncation,
        Hyperparameters::CrossValidated(g) => g.iter().map(|c| c.truncation).max().unwrap_or(1),
    };
    let basis = BasisSet::build(2, max_k)?;
    let reps: Vec<Replication> = (0..config.replications)
        .into_par_iter()
        .map(|b| run_replication(config, spec, &basis, b))
        .collect::<Result<_>>()?;

    let mut totals = vec![Accum::default(); spec.holdout];
    let mut warnings = Vec::new();
    let mut selected = Vec::with_capacity(reps.len());
    for rep in &reps {
        for (tot, a) in totals.iter_mut().zip(&rep.horizons) {
            tot.err += a.err;
            tot.abs += a.abs;
            tot.sq += a.sq;
            tot.pct += a.pct;
            tot.count += a.count;
            tot.pct_count += a.pct_count;
            tot.excluded += a.excluded;
            tot.skipped += a.skipped;
        }
        warnings.extend(rep.warnings.iter().cloned());
        selected.push(rep.selected);
    }
    let train_end = config.n - spec.holdout;
    let rows = totals
        .iter()
        .enumerate()
        .map(|(j, a)| {
            let c = a.count.max(1) as f64;
            MetricRow {
                scenario: spec.scenario,
                horizon: j + 1,
                time_index: train_end + j,
                bias: if a.count == 0 { f64::NAN } else { a.err / c },
                mae: if a.count == 0 { f64::NAN } else { a.abs / c },
                rmse: if a.count == 0 { f64::NAN } else { (a.sq / c).sqrt() },
                mape: if a.pct_count == 0 { f64::NAN } else { 100.0 * a.pct / a.pct_count as f64 },
                count: a.count,
                mape_excluded: a.excluded,
                skipped: a.skipped,
            }
        })
        .collect::<Vec<_>>();
    for r in &rows {
        if r.skipped > 0 {
            warnings.push(format!("horizon {}: {} replication(s) without neighbors", r.horizon, r.skipped));
        }
        if r.mape_excluded > 0 {
            warnings.push(format!("horizon {}: {} near-zero responses left out of MAPE", r.horizon, r.mape_excluded));
        }
    }
    Ok(ExperimentResult { rows, selected, warnings })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapePoint {
    pub p: usize,
    pub mape: f64,
    pub rmse: f64,
}

/// Average holdout MAPE as a function of the grid size.
pub fn mape_vs_p(template: &SimConfig, spec: &ExperimentSpec, ps: &[usize]) -> Result<Vec<MapePoint>> {
    if ps.len() < 2 {
        return Err(Error::InvalidConfig("at least two grid sizes are required".into()));
    }
    ps.iter()
        .map(|&p| {
            let config = SimConfig { p, ..template.clone() };
            let r = run_experiment(&config, spec)?;
            Ok(MapePoint { p, mape: r.mean_mape(), rmse: r.mean_rmse() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_corners() {
        let g = grid(2);
        let coords: Vec<_> = g.iter().map(|p| p.coords().to_vec()).collect();
        assert_eq!(coords, vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(grid(15).len(), 225);
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig::new(1, 5, 1, 0).is_err());
        assert!(SimConfig::new(5, 1, 1, 0).is_err());
        assert!(SimConfig::new(5, 5, 0, 0).is_err());
        let c = SimConfig { ar_coef: 1.0, ..SimConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn scenarios() {
        let c = SimConfig::new(5, 3, 1, 7).unwrap();
        let mut d = generate(&c).unwrap();
        assert_eq!(covariate_at(&d, Scenario::S1, 2).unwrap().values(), &[d.x[2]]);
        assert_eq!(covariate_at(&d, Scenario::S2, 2).unwrap().values(), &[d.x[1]]);
        assert!(matches!(covariate_at(&d, Scenario::S2, 0), Err(Error::FirstTimepointUnavailable(_))));
        assert!(matches!(covariate_at(&d, Scenario::S3, 0), Err(Error::FirstTimepointUnavailable(_))));
        d.y[1] = vec![4.0; 9];
        assert_eq!(covariate_at(&d, Scenario::S3, 2).unwrap().values(), &[4.0]);
        assert_eq!(make_covariates(&d, Scenario::S3).len(), 4);
        assert_eq!("s2".parse::<Scenario>().unwrap(), Scenario::S2);
    }

    #[test]
    fn replications_are_reproducible_and_distinct() {
        let c = SimConfig::new(6, 3, 2, 11).unwrap();
        let a = generate_replication(&c, 1).unwrap();
        let b = generate_replication(&c, 1).unwrap();
        let other = generate_replication(&c, 0).unwrap();
        assert_eq!(a.y, b.y);
        assert_ne!(a.y, other.y);
    }
}
