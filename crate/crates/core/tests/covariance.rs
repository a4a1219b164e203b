use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use stkern::basis::BasisSet;
use stkern::covariance::*;
use stkern::domain::{CovariateVector, Observation, Record, ScalingWeights, SpatialPoint, SpatioTemporalDataset};
use stkern::estimator::FittedModel;
use stkern::kernel::{BandwidthConfig, TypeIKernel};
use stkern::simulation::{generate_replication, grid, make_covariates, Scenario, SimConfig};
use stkern::Error;

fn model_for(ds: &SpatioTemporalDataset, h: f64, k: usize) -> FittedModel {
    let basis = BasisSet::build(ds.dim, k.max(1)).unwrap();
    let bw = BandwidthConfig::new(h, ScalingWeights::Geometric(0.9)).unwrap();
    FittedModel::fit(ds, &basis, TypeIKernel::uniform(1.0).unwrap(), bw, k).unwrap()
}

fn dataset(xs: &[f64], sites: &[SpatialPoint], y: impl Fn(usize, &SpatialPoint) -> f64) -> SpatioTemporalDataset {
    let n = xs.len();
    let records = xs
        .iter()
        .enumerate()
        .map(|(t, &x)| {
            let obs = sites.iter().map(|s| Observation::new(s.clone(), y(t, s))).collect();
            Record::new(t as f64 / n as f64, obs, CovariateVector::scalar(x))
        })
        .collect();
    SpatioTemporalDataset::new(2, records)
}

#[test]
fn gaussian_c_uv_matches_monte_carlo() {
    let basis = BasisSet::build(2, 1).unwrap();
    let corr = SpatialCorrelation::GaussianDecay { rho0: 1.0 };
    let value = c_uv(&basis, &corr, 0, 0, 0, 0, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draws = 10_000_000;
    let mut sum = 0.0;
    for _ in 0..draws {
        let (a, b, c, d): (f64, f64, f64, f64) = (rng.random(), rng.random(), rng.random(), rng.random());
        sum += (-((a - c).powi(2) + (b - d).powi(2))).exp();
    }
    let mc = sum / draws as f64;
    assert!((value - mc).abs() < 1e-3, "quadrature {value} vs Monte Carlo {mc}");
}

#[test]
fn sigma_kl_zero_for_constant_aggregates() {
    let xs = [2.0, 2.01, 1.99, 2.02];
    let ds = dataset(&xs, &grid(3), |_, _| 1.5);
    let model = model_for(&ds, 0.5, 3);
    for k in 0..3 {
        for l in 0..3 {
            assert!(sigma_kl(&model, k, l, &CovariateVector::scalar(2.0)).unwrap().abs() < 1e-14);
        }
    }
}

#[test]
fn sigma_kl_two_point_variance() {
    let xs = [2.0, 2.01];
    let r = 0.3;
    let ds = dataset(&xs, &grid(3), |t, _| if t == 0 { 1.0 + r } else { 1.0 - r });
    let model = model_for(&ds, 0.5, 1);
    let v = sigma_kl(&model, 0, 0, &CovariateVector::scalar(2.0)).unwrap();
    assert!((v - r * r).abs() < 1e-14);
    assert!(matches!(sigma_kl(&model, 0, 1, &CovariateVector::scalar(2.0)), Err(Error::IndexOutOfRange { .. })));
}

#[test]
fn sigma_kl_matches_direct_sum_on_simulated_data() {
    let config = SimConfig::new(100, 15, 1, 3).unwrap();
    let data = generate_replication(&config, 0).unwrap();
    let ds = data.dataset_with(0..100, &make_covariates(&data, Scenario::S1));
    let model = model_for(&ds, 0.1, 6);
    let q = CovariateVector::scalar(2.0);
    let agg = model.aggregated();
    let xs: Vec<f64> = (0..100).map(|i| model.covariate(i).get(0)).collect();
    let w: Vec<f64> = xs.iter().map(|x| if ((x - 2.0) / 0.9).abs() / 0.1 <= 1.0 { 1.0 } else { 0.0 }).collect();
    let wsum: f64 = w.iter().sum();
    let mean = |k: usize| (0..100).map(|i| w[i] * agg[i][k]).sum::<f64>() / wsum;
    let direct: f64 = (0..100).map(|i| w[i] * (agg[i][0] - mean(0)).powi(2)).sum::<f64>() / wsum;
    let got = sigma_kl(&model, 0, 0, &q).unwrap();
    assert!(got > 0.0 && got.is_finite());
    assert!((got - direct).abs() < 1e-12, "{got} vs {direct}");
}

#[test]
fn already_psd_input_recovers_its_own_matrix() {
    let basis = BasisSet::build(2, 3).unwrap();
    let sys = CSystem::build(&basis, &SpatialCorrelation::unit(), 3, 6).unwrap();
    let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, 0.2, -0.3, 0.4, 0.9]);
    let a = &b * b.transpose();
    let rec = recover_variance_components(&a, &sys, DEFAULT_CONDITION_CAP).unwrap();
    assert!((&rec.a_star - &a).abs().max() < 1e-12);
}

fn unit_correlation_data(seed: u64) -> FittedModel {
    let config = SimConfig::new(500, 2, 1, seed).unwrap();
    let xs = generate_replication(&config, 0).unwrap().x;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: Vec<f64> = (0..xs.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let ds = dataset(&xs, &grid(10), |t, _| 0.1 * z[t]);
    model_for(&ds, 0.2, 6)
}

#[test]
fn iteration_recovers_unit_correlation() {
    let model = unit_correlation_data(5);
    let q = CovariateVector::scalar(2.0);
    let shared = SharedMoments::collect(&model, &q, false).unwrap();
    let initial = shared.empirical_correlation();
    let opts = IterateOptions { max_iter: 10, ..IterateOptions::default() };
    let out = iterate_rho_from(&model, &q, &shared, &initial, &opts).unwrap();
    assert!(out.iterations <= 10);
    let min = out.table().values.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(min >= 0.9, "smallest correlation {min}");
}

#[test]
fn zero_iterations_return_initial_flagged() {
    let model = unit_correlation_data(6);
    let q = CovariateVector::scalar(2.0);
    let initial = SpatialCorrelation::GaussianDecay { rho0: 1.0 };
    let opts = IterateOptions { max_iter: 0, ..IterateOptions::default() };
    let out = iterate_rho(&model, &q, &initial, &opts).unwrap();
    assert_eq!(out.iterations, 0);
    assert!(!out.converged);
    assert!(out.warnings.iter().any(|w| w.starts_with("NoConvergence")));
    let t = out.table();
    for a in 0..t.sites.len() {
        for b in 0..t.sites.len() {
            let expect = initial.eval(t.sites[a].coords(), t.sites[b].coords()).unwrap();
            assert_eq!(t.values[(a, b)], expect);
        }
    }
}

#[test]
fn single_location_has_no_pairs() {
    let xs = [2.0, 2.01, 1.99];
    let ds = dataset(&xs, &[SpatialPoint::new(vec![0.5, 0.5])], |t, _| t as f64);
    let model = model_for(&ds, 0.5, 1);
    let err = iterate_rho(&model, &CovariateVector::scalar(2.0), &SpatialCorrelation::unit(), &IterateOptions::default())
        .unwrap_err();
    assert!(matches!(err, Error::NoPairs(_)));
}

#[test]
fn parametric_fit_single_value_and_ties() {
    let config = SimConfig::new(100, 6, 1, 4).unwrap();
    let data = generate_replication(&config, 0).unwrap();
    let ds = data.dataset_with(0..100, &make_covariates(&data, Scenario::S1));
    let model = model_for(&ds, 0.1, 3);
    let q = CovariateVector::scalar(2.0);
    assert_eq!(parametric_rho_fit(&model, &q, &[0.7], 8).unwrap().rho0, 0.7);

    let flat = dataset(&data.x, &grid(6), |_, _| 1.0);
    let flat_model = model_for(&flat, 0.1, 3);
    let fit = parametric_rho_fit(&flat_model, &q, &[2.0, 0.5, 1.0], 8).unwrap();
    assert_eq!(fit.rho0, 0.5);
    assert!(fit.discrepancies.iter().all(|(_, d)| d.abs() < 1e-20));
}

#[test]
fn parametric_fit_selects_true_decay() {
    let config = SimConfig::new(1000, 15, 50, 17).unwrap();
    let grid_values = [0.25, 0.5, 1.0, 2.0, 4.0];
    let hits = (0..50)
        .filter(|&b| {
            let data = generate_replication(&config, b).unwrap();
            let ds = data.dataset_with(0..config.n, &make_covariates(&data, Scenario::S1));
            let model = model_for(&ds, 0.05, 6);
            parametric_rho_fit(&model, &CovariateVector::scalar(2.0), &grid_values, 8).unwrap().rho0 == 1.0
        })
        .count();
    assert!(hits >= 40, "true decay selected in {hits} of 50 replications");
}
