//! Command-line front end: CSV ingestion, layered configuration and the
//! `simulate`, `fit`, `predict`, `ci`, `band` and `eval` subcommands.
//!
//! Configuration precedence is flags, then the `--config` TOML file, then
//! built-in defaults. Config keys match the flag names without dashes.

use std::collections::{BTreeSet, HashMap};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::basis::{BasisSet, MAX_TOTAL_DEGREE};
use crate::covariance::{covariance_estimate, CovarianceEstimate};
use crate::domain::{
    rescale, BoundingBox, CovariateVector, Observation, Record, ScalingWeights, SpatioTemporalDataset,
};
use crate::error::{Error, Result};
use crate::estimator::{select_hyperparameters, Candidate, FittedModel};
use crate::inference::{pointwise_ci, simultaneous_band};
use crate::kernel::{BandwidthConfig, KernelKind, TypeIKernel};
use crate::simulation::{
    generate, make_covariates, run_experiment, ExperimentSpec, Hyperparameters, MetricRow, Scenario, SimConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "stkern", version, about = "Spatio-temporal kernel regression with functional covariates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset and write observations, covariates and truth CSVs.
    Simulate(Flags),
    /// Fit a model and write a manifest.
    Fit(Flags),
    /// Predict responses at observed sites for each query covariate.
    Predict(Flags),
    /// Pointwise confidence intervals for the mean surface.
    Ci(Flags),
    /// Simultaneous confidence bands over separated queries.
    Band(Flags),
    /// Run the holdout forecasting experiment.
    Eval(Flags),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelArg {
    Uniform,
    Quad,
}

impl From<KernelArg> for KernelKind {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Uniform => KernelKind::Uniform,
            KernelArg::Quad => KernelKind::TruncatedQuadratic,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// Observations CSV (t, s1..sd, y).
    #[arg(long)]
    pub obs: Option<PathBuf>,
    /// Covariates CSV (t, x1..xp).
    #[arg(long)]
    pub cov: Option<PathBuf>,
    /// Output file, or directory for `simulate`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// TOML file with defaults for any flag.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    /// Replications.
    #[arg(long = "B")]
    pub b: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// S1, S2 or S3.
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long, value_enum)]
    pub kernel: Option<KernelArg>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Bandwidth, or `cv`.
    #[arg(long)]
    pub h: Option<String>,
    /// Truncation level, or `cv`.
    #[arg(long = "K")]
    pub k: Option<String>,
    /// Geometric discount of covariate lags, or `cv`.
    #[arg(long)]
    pub phi: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub z: Option<f64>,
    #[arg(long)]
    pub holdout: Option<usize>,
    /// Inline `x,x,...` (components joined by `:`) or `@file.csv`.
    #[arg(long)]
    pub queries: Option<String>,
}

impl Flags {
    fn provided(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        let mut mark = |set: bool, name: &'static str| {
            if set {
                out.push(name)
            }
        };
        mark(self.obs.is_some(), "obs");
        mark(self.cov.is_some(), "cov");
        mark(self.out.is_some(), "out");
        mark(self.config.is_some(), "config");
        mark(self.n.is_some(), "n");
        mark(self.p.is_some(), "p");
        mark(self.b.is_some(), "B");
        mark(self.seed.is_some(), "seed");
        mark(self.scenario.is_some(), "scenario");
        mark(self.kernel.is_some(), "kernel");
        mark(self.lambda.is_some(), "lambda");
        mark(self.h.is_some(), "h");
        mark(self.k.is_some(), "K");
        mark(self.phi.is_some(), "phi");
        mark(self.alpha.is_some(), "alpha");
        mark(self.z.is_some(), "z");
        mark(self.holdout.is_some(), "holdout");
        mark(self.queries.is_some(), "queries");
        out
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum NumOrText {
    Num(f64),
    Text(String),
}

impl NumOrText {
    fn into_text(self) -> String {
        match self {
            NumOrText::Num(v) => format!("{v}"),
            NumOrText::Text(s) => s,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    obs: Option<PathBuf>,
    cov: Option<PathBuf>,
    out: Option<PathBuf>,
    n: Option<usize>,
    p: Option<usize>,
    #[serde(rename = "B")]
    b: Option<usize>,
    seed: Option<u64>,
    scenario: Option<String>,
    kernel: Option<KernelArg>,
    lambda: Option<f64>,
    h: Option<NumOrText>,
    #[serde(rename = "K")]
    k: Option<NumOrText>,
    phi: Option<NumOrText>,
    alpha: Option<f64>,
    z: Option<f64>,
    holdout: Option<usize>,
    queries: Option<String>,
}

/// A fixed value or cross-validation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Choice<T> {
    Value(T),
    Cv,
}

/// Fully resolved settings for one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub obs: Option<PathBuf>,
    pub cov: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub n: usize,
    pub p: usize,
    pub replications: usize,
    pub seed: u64,
    pub scenario: Option<Scenario>,
    pub kernel: TypeIKernel,
    pub h: Choice<f64>,
    pub k: Choice<usize>,
    pub phi: Choice<f64>,
    pub alpha: f64,
    pub z: f64,
    pub holdout: usize,
    pub queries: Option<String>,
}

fn parse_choice<T: std::str::FromStr>(name: &str, raw: &str) -> Result<Choice<T>> {
    if raw.eq_ignore_ascii_case("cv") {
        return Ok(Choice::Cv);
    }
    raw.parse::<T>()
        .map(Choice::Value)
        .map_err(|_| Error::InvalidConfig(format!("--{name} expects a number or \"cv\", got {raw:?}")))
}

fn usage(message: impl Into<String>) -> Error {
    Error::InvalidConfig(message.into())
}

impl RunConfig {
    /// Merges flags over the config file over defaults and checks ranges.
    pub fn resolve(flags: &Flags) -> Result<Self> {
        let file = match &flags.config {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                toml::from_str::<ConfigFile>(&text)
                    .map_err(|e| usage(format!("config {}: {}", path.display(), e.message())))?
            }
            None => ConfigFile::default(),
        };
        let h = flags.h.clone().or(file.h.map(NumOrText::into_text)).unwrap_or_else(|| "0.1".into());
        let k = flags.k.clone().or(file.k.map(NumOrText::into_text)).unwrap_or_else(|| "6".into());
        let phi = flags.phi.clone().or(file.phi.map(NumOrText::into_text)).unwrap_or_else(|| "0.9".into());
        let kind: KernelKind = flags.kernel.or(file.kernel).unwrap_or(KernelArg::Uniform).into();
        let lambda = flags.lambda.or(file.lambda).unwrap_or(1.0);
        let scenario = flags.scenario.clone().or(file.scenario).map(|s| s.parse::<Scenario>()).transpose()?;
        let cfg = Self {
            obs: flags.obs.clone().or(file.obs),
            cov: flags.cov.clone().or(file.cov),
            out: flags.out.clone().or(file.out),
            n: flags.n.or(file.n).unwrap_or(100),
            p: flags.p.or(file.p).unwrap_or(15),
            replications: flags.b.or(file.b).unwrap_or(100),
            seed: flags.seed.or(file.seed).unwrap_or(0),
            scenario,
            kernel: TypeIKernel::new(kind, lambda)?,
            h: parse_choice("h", &h)?,
            k: parse_choice("K", &k)?,
            phi: parse_choice("phi", &phi)?,
            alpha: flags.alpha.or(file.alpha).unwrap_or(0.05),
            z: flags.z.or(file.z).unwrap_or(3.0),
            holdout: flags.holdout.or(file.holdout).unwrap_or(10),
            queries: flags.queries.clone().or(file.queries),
        };
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<()> {
        if self.n < 2 {
            return Err(usage(format!("--n must be at least 2, got {}", self.n)));
        }
        if self.p < 2 {
            return Err(usage(format!("--p must be at least 2, got {}", self.p)));
        }
        if self.replications < 1 {
            return Err(usage("--B must be at least 1"));
        }
        if let Choice::Value(h) = self.h {
            if !(h > 0.0 && h.is_finite()) {
                return Err(usage(format!("--h must be positive, got {h}")));
            }
        }
        if let Choice::Value(k) = self.k {
            if k == 0 {
                return Err(usage("--K must be at least 1"));
            }
        }
        if let Choice::Value(phi) = self.phi {
            if !(phi > 0.0 && phi.is_finite()) {
                return Err(usage(format!("--phi must be positive, got {phi}")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(usage(format!("--alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !self.z.is_finite() {
            return Err(usage("--z must be finite"));
        }
        if self.holdout == 0 {
            return Err(usage("--holdout must be at least 1"));
        }
        Ok(())
    }

    fn require<'a>(&'a self, value: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
        value.as_deref().ok_or_else(|| usage(format!("--{name} is required")))
    }
}

/// Ingested data with the maps back to original coordinates.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub dataset: SpatioTemporalDataset,
    /// Original times, ascending, one per record.
    pub raw_times: Vec<f64>,
    pub bbox: BoundingBox,
}

impl Ingested {
    /// Original coordinates of a rescaled location.
    pub fn original(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .enumerate()
            .map(|(a, &c)| {
                let (lo, hi) = (self.bbox.lower[a], self.bbox.upper[a]);
                if c == 0.0 {
                    lo
                } else if c == 1.0 {
                    hi
                } else {
                    lo + c * (hi - lo)
                }
            })
            .collect()
    }

    /// Distinct rescaled sites in order of first appearance.
    pub fn sites(&self) -> Vec<Vec<f64>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for r in &self.dataset.records {
            for o in &r.observations {
                let key: Vec<u64> = o.location.coords().iter().map(|c| c.to_bits()).collect();
                if seen.insert(key) {
                    out.push(o.location.coords().to_vec());
                }
            }
        }
        out
    }
}

fn parse_error(line: u64, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.kind() {
        csv::ErrorKind::Io(_) => match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        },
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
            parse_error(line, format!("expected {expected_len} fields, found {len}"))
        }
        _ => parse_error(line, e.to_string()),
    }
}

fn parse_number(field: &str, line: u64, column: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| parse_error(line, format!("column {column}: invalid number {field:?}")))?;
    if !v.is_finite() {
        return Err(parse_error(line, format!("column {column}: non-finite value {field:?}")));
    }
    Ok(v)
}

fn check_header(header: &csv::StringRecord, prefix: &str, last: Option<&str>) -> Result<usize> {
    let fields: Vec<&str> = header.iter().map(str::trim).collect();
    if fields.first().is_some_and(|f| f.parse::<f64>().is_ok()) {
        return Err(parse_error(1, "missing header row"));
    }
    let body_end = fields.len() - usize::from(last.is_some());
    let ok = fields.first() == Some(&"t")
        && last.is_none_or(|l| fields.last() == Some(&l))
        && body_end > 1
        && (1..body_end).all(|i| fields[i] == format!("{prefix}{i}"));
    if !ok {
        let expect = match last {
            Some(l) => format!("t,{prefix}1..{prefix}d,{l}"),
            None => format!("t,{prefix}1..{prefix}p"),
        };
        return Err(parse_error(1, format!("header must be {expect}, found {:?}", fields.join(","))));
    }
    Ok(body_end - 1)
}

fn reader(path: &Path, flexible: bool) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path)?;
    Ok(csv::ReaderBuilder::new().has_headers(false).flexible(flexible).from_reader(file))
}

/// Reads observations and covariates, joins on exact time, averages exact
/// `(t, s)` duplicates, validates and rescales to the unit cube.
pub fn ingest_csv(obs_path: &Path, cov_path: &Path) -> Result<Ingested> {
    let mut obs_reader = reader(obs_path, false)?;
    let mut rows = obs_reader.records();
    let header = rows.next().ok_or_else(|| parse_error(1, "empty observations file"))?.map_err(csv_error)?;
    let dim = check_header(&header, "s", Some("y"))?;
    // time -> (location key -> (coords, sum, count)), with first-seen order
    type Cell = (Vec<f64>, f64, usize);
    let mut by_time: HashMap<u64, (f64, Vec<Cell>, HashMap<Vec<u64>, usize>)> = HashMap::new();
    for row in rows {
        let row = row.map_err(csv_error)?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let t = parse_number(&row[0], line, "t")?;
        let s: Vec<f64> = (1..=dim).map(|a| parse_number(&row[a], line, &format!("s{a}"))).collect::<Result<_>>()?;
        let y = parse_number(&row[dim + 1], line, "y")?;
        let entry = by_time.entry(t.to_bits()).or_insert_with(|| (t, Vec::new(), HashMap::new()));
        let key: Vec<u64> = s.iter().map(|c| c.to_bits()).collect();
        match entry.2.get(&key) {
            Some(&i) => {
                entry.1[i].1 += y;
                entry.1[i].2 += 1;
            }
            None => {
                entry.2.insert(key, entry.1.len());
                entry.1.push((s, y, 1));
            }
        }
    }

    let mut cov_reader = reader(cov_path, true)?;
    let mut rows = cov_reader.records();
    let header = rows.next().ok_or_else(|| parse_error(1, "empty covariates file"))?.map_err(csv_error)?;
    let width = check_header(&header, "x", None)?;
    let mut covs: HashMap<u64, CovariateVector> = HashMap::new();
    for row in rows {
        let row = row.map_err(csv_error)?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let fields: Vec<&str> = row.iter().collect();
        let used = fields.iter().rposition(|f| !f.trim().is_empty()).map_or(0, |i| i + 1);
        if used == 0 {
            continue;
        }
        if used > width + 1 {
            return Err(parse_error(line, format!("{} covariate values for {width} columns", used - 1)));
        }
        let t = parse_number(fields[0], line, "t")?;
        let x: Vec<f64> = (1..used).map(|j| parse_number(fields[j], line, &format!("x{j}"))).collect::<Result<_>>()?;
        if covs.insert(t.to_bits(), CovariateVector::new(x)).is_some() {
            return Err(parse_error(line, format!("duplicate covariate time {t}")));
        }
    }

    let obs_times: BTreeSet<u64> = by_time.keys().copied().collect();
    let cov_times: BTreeSet<u64> = covs.keys().copied().collect();
    let mut unmatched: Vec<f64> =
        obs_times.symmetric_difference(&cov_times).map(|&b| f64::from_bits(b)).collect();
    if !unmatched.is_empty() {
        unmatched.sort_by(f64::total_cmp);
        return Err(Error::Join(unmatched));
    }
    if by_time.is_empty() {
        return Err(Error::EmptyLocations);
    }

    let mut groups: Vec<(f64, Vec<Cell>)> = by_time.into_values().map(|(t, cells, _)| (t, cells)).collect();
    groups.sort_by(|a, b| a.0.total_cmp(&b.0));
    let raw_times: Vec<f64> = groups.iter().map(|g| g.0).collect();
    let raw_locations: Vec<Vec<Vec<f64>>> =
        groups.iter().map(|g| g.1.iter().map(|c| c.0.clone()).collect()).collect();
    let bbox = BoundingBox::enclosing(raw_locations.iter().flatten().map(|v| v.as_slice()))
        .ok_or(Error::EmptyLocations)?;
    let scaled = rescale(&raw_times, &raw_locations, &bbox)?;
    let records = groups
        .iter()
        .zip(scaled.times.iter().zip(scaled.locations))
        .map(|((t, cells), (&time, locs))| {
            let obs = cells
                .iter()
                .zip(locs)
                .map(|((_, sum, count), loc)| Observation::new(loc, sum / *count as f64))
                .collect();
            Record::new(time, obs, covs[&t.to_bits()].clone())
        })
        .collect();
    let dataset = SpatioTemporalDataset::new(dim, records);
    dataset.validate().map_err(Error::Validation)?;
    Ok(Ingested { dataset, raw_times, bbox })
}

/// Parses `--queries`: inline `a,b,...` with `:` between components, or
/// `@path` to a CSV with columns `t,x1..xp`. Returns `(label, covariate)`.
pub fn parse_queries(spec: &str) -> Result<Vec<(String, CovariateVector)>> {
    if let Some(path) = spec.strip_prefix('@') {
        let mut rdr = reader(Path::new(path), true)?;
        let mut rows = rdr.records();
        let header = rows.next().ok_or_else(|| parse_error(1, "empty query file"))?.map_err(csv_error)?;
        check_header(&header, "x", None)?;
        let mut out = Vec::new();
        for row in rows {
            let row = row.map_err(csv_error)?;
            let line = row.position().map(|p| p.line()).unwrap_or(0);
            let fields: Vec<&str> = row.iter().collect();
            let used = fields.iter().rposition(|f| !f.trim().is_empty()).map_or(0, |i| i + 1);
            if used == 0 {
                continue;
            }
            let x: Vec<f64> =
                (1..used).map(|j| parse_number(fields[j], line, &format!("x{j}"))).collect::<Result<_>>()?;
            out.push((fields[0].trim().to_string(), CovariateVector::new(x)));
        }
        return Ok(out);
    }
    spec.split(',')
        .enumerate()
        .map(|(i, part)| {
            let x = part
                .split(':')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| usage(format!("--queries: invalid number {v:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((i.to_string(), CovariateVector::new(x)))
        })
        .collect()
}

fn f(v: f64) -> String {
    format!("{v}")
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(header).map_err(csv_error)?;
    for r in rows {
        w.write_record(r).map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Files to write once computation has succeeded; anything written is
/// removed again if a later write fails.
#[derive(Default)]
struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    fn add(&mut self, path: PathBuf, bytes: Vec<u8>) {
        self.files.push((path, bytes));
    }

    fn commit(self) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for (path, bytes) in &self.files {
            if let Err(e) = fs::write(path, bytes) {
                for p in &written {
                    let _ = fs::remove_file(p);
                }
                let _ = fs::remove_file(path);
                return Err(Error::Io(e));
            }
            written.push(path.clone());
        }
        Ok(written)
    }
}

fn check_flags(flags: &Flags, allowed: &[&str], command: &str) -> Result<()> {
    let extra: Vec<&str> = flags.provided().into_iter().filter(|f| !allowed.contains(f)).collect();
    if extra.is_empty() {
        Ok(())
    } else {
        Err(usage(format!("{command} does not accept --{}", extra.join(", --"))))
    }
}

const MODEL_FLAGS: [&str; 7] = ["obs", "cov", "config", "kernel", "lambda", "h", "phi"];

fn allowed(extra: &[&'static str]) -> Vec<&'static str> {
    let mut v = MODEL_FLAGS.to_vec();
    v.push("K");
    v.extend_from_slice(extra);
    v
}

/// Hyperparameters after resolving any `cv` choices.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedChoice {
    pub candidate: Candidate,
    pub cross_validated: bool,
    pub cv_rmse: Option<f64>,
}

fn spread_of(covariates: &[CovariateVector]) -> f64 {
    let xs: Vec<f64> = covariates.iter().map(|c| c.get(0)).collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Bandwidths tried by cross-validation, as multiples of the covariate spread.
pub const CV_H_MULTIPLES: [f64; 4] = [0.25, 0.5, 1.0, 2.0];
pub const CV_K: [usize; 4] = [1, 3, 6, 10];
pub const CV_PHI: [f64; 3] = [0.5, 0.7, 0.9];

fn candidate_grid(cfg: &RunConfig, spread: f64, max_k: usize) -> Result<Vec<Candidate>> {
    let hs: Vec<f64> = match cfg.h {
        Choice::Value(h) => vec![h],
        Choice::Cv => {
            if !(spread > 0.0) {
                return Err(usage("cannot cross-validate h: covariates have zero spread"));
            }
            CV_H_MULTIPLES.iter().map(|m| m * spread).collect()
        }
    };
    let ks: Vec<usize> = match cfg.k {
        Choice::Value(k) => vec![k],
        Choice::Cv => CV_K.iter().copied().filter(|&k| k <= max_k).collect(),
    };
    let phis: Vec<f64> = match cfg.phi {
        Choice::Value(p) => vec![p],
        Choice::Cv => CV_PHI.to_vec(),
    };
    let mut out = Vec::new();
    for &h in &hs {
        for &truncation in &ks {
            for &phi in &phis {
                out.push(Candidate { h, truncation, phi });
            }
        }
    }
    Ok(out)
}

fn max_basis_len(dim: usize) -> usize {
    // number of multi-indices of total degree ≤ MAX_TOTAL_DEGREE
    let mut count = 1usize;
    for i in 1..=dim {
        count = count * (MAX_TOTAL_DEGREE + i) / i;
    }
    count
}

/// Resolves hyperparameters and fits the model on an ingested dataset.
pub fn fit_model(cfg: &RunConfig, data: &SpatioTemporalDataset) -> Result<(FittedModel, FittedChoice)> {
    let max_k = match cfg.k {
        Choice::Value(k) => k,
        Choice::Cv => CV_K.iter().copied().filter(|&k| k <= max_basis_len(data.dim)).max().unwrap_or(1),
    };
    let basis = BasisSet::build(data.dim, max_k)?;
    let grid = candidate_grid(cfg, spread_of(&data.covariates()), max_k)?;
    let choice = if grid.len() == 1 {
        FittedChoice { candidate: grid[0], cross_validated: false, cv_rmse: None }
    } else {
        let sel = select_hyperparameters(data, &basis, &cfg.kernel, &grid)?;
        let rmse = sel.scores.iter().find(|s| s.candidate == sel.best).and_then(|s| s.rmse);
        FittedChoice { candidate: sel.best, cross_validated: true, cv_rmse: rmse }
    };
    let c = choice.candidate;
    let bw = BandwidthConfig::new(c.h, ScalingWeights::Geometric(c.phi))?;
    let model = FittedModel::fit(data, &basis, cfg.kernel, bw, c.truncation)?;
    Ok((model, choice))
}

/// SHA-256 of the aggregated-response table serialized as CSV.
pub fn aggregate_checksum(model: &FittedModel) -> String {
    let mut text = String::new();
    for row in model.aggregated() {
        let cells: Vec<String> = row[..model.truncation()].iter().map(|v| f(*v)).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    let digest = Sha256::digest(text.as_bytes());
    let mut hex = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(hex, "{b:02x}");
    }
    hex
}

fn kernel_name(k: &TypeIKernel) -> &'static str {
    match k.kind {
        KernelKind::Uniform => "uniform",
        KernelKind::TruncatedQuadratic => "quad",
    }
}

pub fn manifest_text(model: &FittedModel, choice: &FittedChoice, ingested: &Ingested) -> String {
    let c = choice.candidate;
    let n_obs: usize = model.dataset().records.iter().map(|r| r.observations.len()).sum();
    let mut s = String::new();
    s.push_str("# stkern model manifest\n");
    let _ = writeln!(s, "kernel = {}", kernel_name(model.kernel()));
    let _ = writeln!(s, "lambda = {}", f(model.kernel().lambda));
    let _ = writeln!(s, "h = {}", f(c.h));
    let _ = writeln!(s, "K = {}", c.truncation);
    let _ = writeln!(s, "phi = {}", f(c.phi));
    let _ = writeln!(s, "selection = {}", if choice.cross_validated { "cv" } else { "fixed" });
    if let Some(r) = choice.cv_rmse {
        let _ = writeln!(s, "cv_rmse = {}", f(r));
    }
    let _ = writeln!(s, "dim = {}", model.dataset().dim);
    let _ = writeln!(s, "timepoints = {}", model.dataset().len());
    let _ = writeln!(s, "observations = {n_obs}");
    let _ = writeln!(s, "time_range = {} {}", f(ingested.raw_times[0]), f(*ingested.raw_times.last().unwrap()));
    let lower: Vec<String> = ingested.bbox.lower.iter().map(|v| f(*v)).collect();
    let upper: Vec<String> = ingested.bbox.upper.iter().map(|v| f(*v)).collect();
    let _ = writeln!(s, "bbox_lower = {}", lower.join(" "));
    let _ = writeln!(s, "bbox_upper = {}", upper.join(" "));
    let _ = writeln!(s, "aggregate_sha256 = {}", aggregate_checksum(model));
    s
}

fn load(cfg: &RunConfig) -> Result<Ingested> {
    let obs = cfg.require(&cfg.obs, "obs")?;
    let cov = cfg.require(&cfg.cov, "cov")?;
    ingest_csv(obs, cov)
}

fn queries(cfg: &RunConfig) -> Result<Vec<(String, CovariateVector)>> {
    let spec = cfg.queries.as_deref().ok_or_else(|| usage("--queries is required"))?;
    let q = parse_queries(spec)?;
    if q.is_empty() {
        return Err(usage("--queries is empty"));
    }
    Ok(q)
}

fn site_header(dim: usize) -> Vec<String> {
    (1..=dim).map(|a| format!("s{a}")).collect()
}

fn cmd_simulate(cfg: &RunConfig) -> Result<Outputs> {
    let dir = cfg.require(&cfg.out, "out")?;
    let scenario = cfg.scenario.unwrap_or(Scenario::S1);
    let sim = SimConfig { n: cfg.n, p: cfg.p, replications: 1, seed: cfg.seed, ..SimConfig::default() };
    let data = generate(&sim)?;
    let start = scenario.first_index();
    let covs = make_covariates(&data, scenario);
    let mut obs_rows = Vec::new();
    let mut truth_rows = Vec::new();
    for t in start..sim.n {
        let time = f(sim.time(t));
        for ((site, y), mu) in data.sites.iter().zip(&data.y[t]).zip(&data.truth[t]) {
            let c = site.coords();
            obs_rows.push(vec![time.clone(), f(c[0]), f(c[1]), f(*y)]);
            truth_rows.push(vec![time.clone(), f(c[0]), f(c[1]), f(*mu), f(data.x[t])]);
        }
    }
    let cov_rows: Vec<Vec<String>> =
        (start..sim.n).zip(&covs).map(|(t, c)| vec![f(sim.time(t)), f(c.get(0))]).collect();
    let hdr = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    fs::create_dir_all(dir)?;
    let mut out = Outputs::default();
    out.add(dir.join("observations.csv"), csv_bytes(&hdr(&["t", "s1", "s2", "y"]), &obs_rows)?);
    out.add(dir.join("covariates.csv"), csv_bytes(&hdr(&["t", "x1"]), &cov_rows)?);
    out.add(dir.join("truth.csv"), csv_bytes(&hdr(&["t", "s1", "s2", "mu", "x"]), &truth_rows)?);
    Ok(out)
}

fn cmd_fit(cfg: &RunConfig) -> Result<Outputs> {
    let path = cfg.require(&cfg.out, "out")?.to_path_buf();
    let ingested = load(cfg)?;
    let (model, choice) = fit_model(cfg, &ingested.dataset)?;
    let mut out = Outputs::default();
    out.add(path, manifest_text(&model, &choice, &ingested).into_bytes());
    Ok(out)
}

fn cmd_predict(cfg: &RunConfig) -> Result<Outputs> {
    let path = cfg.require(&cfg.out, "out")?.to_path_buf();
    let ingested = load(cfg)?;
    let qs = queries(cfg)?;
    let (model, _) = fit_model(cfg, &ingested.dataset)?;
    let sites = ingested.sites();
    let mut rows = Vec::new();
    for (label, q) in &qs {
        let fit = model.local_fit(q)?;
        for s in &sites {
            let mut row = vec![label.clone()];
            row.extend(ingested.original(s).into_iter().map(f));
            row.push(f(model.surface_from(&fit.mu, s)?));
            rows.push(row);
        }
    }
    let mut header = vec!["t_query".to_string()];
    header.extend(site_header(model.dataset().dim));
    header.push("yhat".into());
    let mut out = Outputs::default();
    out.add(path, csv_bytes(&header, &rows)?);
    Ok(out)
}

fn interval_header(dim: usize) -> Vec<String> {
    let mut h = vec!["x_index".to_string()];
    h.extend(site_header(dim));
    h.extend(["center", "lower", "upper", "level"].iter().map(|s| s.to_string()));
    h
}

fn cmd_ci(cfg: &RunConfig) -> Result<Outputs> {
    let path = cfg.require(&cfg.out, "out")?.to_path_buf();
    let ingested = load(cfg)?;
    let qs = queries(cfg)?;
    let (model, _) = fit_model(cfg, &ingested.dataset)?;
    let sites = ingested.sites();
    let mut rows = Vec::new();
    for (label, q) in &qs {
        let sigma = covariance_estimate(&model, q)?;
        for s in &sites {
            let band = pointwise_ci(&model, &sigma, q, s, cfg.alpha)?;
            let iv = &band.intervals[0];
            let mut row = vec![label.clone()];
            row.extend(ingested.original(s).into_iter().map(f));
            row.extend([f(iv.center), f(iv.lower()), f(iv.upper()), f(1.0 - cfg.alpha)]);
            rows.push(row);
        }
    }
    let mut out = Outputs::default();
    out.add(path, csv_bytes(&interval_header(model.dataset().dim), &rows)?);
    Ok(out)
}

fn cmd_band(cfg: &RunConfig) -> Result<Outputs> {
    let path = cfg.require(&cfg.out, "out")?.to_path_buf();
    let ingested = load(cfg)?;
    let qs = queries(cfg)?;
    let (model, _) = fit_model(cfg, &ingested.dataset)?;
    let covs: Vec<CovariateVector> = qs.iter().map(|(_, q)| q.clone()).collect();
    let pairs = crate::inference::too_close_pairs(&covs, model.bandwidth(), model.kernel());
    if !pairs.is_empty() {
        return Err(Error::QueriesTooClose {
            pairs,
            threshold: 2.0 * model.bandwidth().h * model.kernel().lambda,
        });
    }
    let sigmas: Vec<CovarianceEstimate> = covs.iter().map(|q| covariance_estimate(&model, q)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for s in ingested.sites() {
        let band = simultaneous_band(&model, &sigmas, &covs, &s, cfg.z, 0.0)?;
        let level = match band.kind {
            crate::inference::BandKind::Simultaneous { target_coverage, .. } => target_coverage,
            _ => unreachable!(),
        };
        for ((label, _), iv) in qs.iter().zip(&band.intervals) {
            let mut row = vec![label.clone()];
            row.extend(ingested.original(&s).into_iter().map(f));
            row.extend([f(iv.center), f(iv.lower()), f(iv.upper()), f(level)]);
            rows.push(row);
        }
    }
    let mut out = Outputs::default();
    out.add(path, csv_bytes(&interval_header(model.dataset().dim), &rows)?);
    Ok(out)
}

/// Metric table with one row per `(scenario, metric)` and one column per
/// held-out timepoint.
pub fn metric_table(rows_by_scenario: &[(Scenario, Vec<MetricRow>)]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["scenario".to_string(), "metric".to_string()];
    if let Some((_, rows)) = rows_by_scenario.first() {
        header.extend(rows.iter().map(|r| format!("t{}", r.time_index + 1)));
    }
    let mut out = Vec::new();
    for (sc, rows) in rows_by_scenario {
        let metrics: [(&str, fn(&MetricRow) -> f64); 4] =
            [("Bias", |r| r.bias), ("MAE", |r| r.mae), ("RMSE", |r| r.rmse), ("MAPE", |r| r.mape)];
        for (name, get) in metrics {
            let mut line = vec![sc.to_string(), name.to_string()];
            line.extend(rows.iter().map(|r| f(get(r))));
            out.push(line);
        }
    }
    (header, out)
}

fn cmd_eval(cfg: &RunConfig) -> Result<Outputs> {
    let path = cfg.require(&cfg.out, "out")?.to_path_buf();
    let sim = SimConfig { n: cfg.n, p: cfg.p, replications: cfg.replications, seed: cfg.seed, ..SimConfig::default() };
    sim.validate()?;
    let scenarios: Vec<Scenario> = match cfg.scenario {
        Some(s) => vec![s],
        None => Scenario::ALL.to_vec(),
    };
    let grid = candidate_grid(cfg, sim.stationary_sd(), max_basis_len(2))?;
    let hyper = if grid.len() == 1 { Hyperparameters::Fixed(grid[0]) } else { Hyperparameters::CrossValidated(grid) };
    let mut tables = Vec::new();
    for sc in scenarios {
        let spec = ExperimentSpec { scenario: sc, holdout: cfg.holdout, kernel: cfg.kernel, hyper: hyper.clone() };
        tables.push((sc, run_experiment(&sim, &spec)?.rows));
    }
    let (header, rows) = metric_table(&tables);
    let mut out = Outputs::default();
    out.add(path, csv_bytes(&header, &rows)?);
    Ok(out)
}

/// Exit status for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_)
        | Error::InvalidLevel(_)
        | Error::InvalidM(_)
        | Error::InvalidTruncation { .. }
        | Error::UnsupportedCount { .. } => EXIT_USAGE,
        Error::Validation(_)
        | Error::DegenerateRange { .. }
        | Error::EmptyLocations
        | Error::InvalidLocation(_)
        | Error::InsufficientLocations { .. }
        | Error::FirstTimepointUnavailable(_)
        | Error::Parse { .. }
        | Error::Join(_)
        | Error::Io(_)
        | Error::DimensionMismatch { .. }
        | Error::IndexOutOfRange { .. }
        | Error::QueriesTooClose { .. } => EXIT_DATA,
        Error::NoNeighbors { .. }
        | Error::DegenerateSupport { .. }
        | Error::InvalidResolution(_)
        | Error::ResolutionTooFine { .. }
        | Error::NoCandidate
        | Error::QuadratureOverflow { .. }
        | Error::CorrelationBound { .. }
        | Error::IllConditionedSystem { .. }
        | Error::NoPairs(_)
        | Error::Factorization(_) => EXIT_NUMERICAL,
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(raw) = std::env::var("STKERN_THREADS") {
        let n: usize = raw
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("STKERN_THREADS must be a positive integer, got {raw:?}")))?;
        // a pool may already exist when called repeatedly in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Runs a parsed command and returns the files written.
pub fn execute(command: &Command) -> Result<Vec<PathBuf>> {
    configure_threads()?;
    let (flags, allowed_flags, name): (&Flags, Vec<&str>, &str) = match command {
        Command::Simulate(f) => (f, vec!["n", "p", "seed", "scenario", "out", "config"], "simulate"),
        Command::Fit(f) => (f, allowed(&["out"]), "fit"),
        Command::Predict(f) => (f, allowed(&["out", "queries"]), "predict"),
        Command::Ci(f) => (f, allowed(&["out", "queries", "alpha"]), "ci"),
        Command::Band(f) => (f, allowed(&["out", "queries", "z"]), "band"),
        Command::Eval(f) => (
            f,
            vec!["n", "p", "B", "seed", "scenario", "holdout", "kernel", "lambda", "h", "K", "phi", "out", "config"],
            "eval",
        ),
    };
    check_flags(flags, &allowed_flags, name)?;
    let cfg = RunConfig::resolve(flags)?;
    let outputs = match command {
        Command::Simulate(_) => cmd_simulate(&cfg)?,
        Command::Fit(_) => cmd_fit(&cfg)?,
        Command::Predict(_) => cmd_predict(&cfg)?,
        Command::Ci(_) => cmd_ci(&cfg)?,
        Command::Band(_) => cmd_band(&cfg)?,
        Command::Eval(_) => cmd_eval(&cfg)?,
    };
    outputs.commit()
}

/// Parses arguments, runs, prints a one-line diagnostic on failure and
/// returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return if code == 0 { EXIT_OK } else { EXIT_USAGE };
        }
    };
    match execute(&cli.command) {
        Ok(_) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            exit_code(&e)
        }
    }
}
