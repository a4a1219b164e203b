use std::time::Instant;

use stkern::domain::CovariateVector;
use stkern::simulation::*;
use stkern::Error;

#[test]
fn covariate_process_has_stationary_mean() {
    let config = SimConfig::new(10_000, 2, 1, 12).unwrap();
    let data = generate_replication(&config, 0).unwrap();
    let mean = data.x.iter().sum::<f64>() / data.x.len() as f64;
    assert!((config.stationary_mean() - 2.0).abs() < 1e-15);
    assert!((mean - 2.0).abs() < 0.02, "sample mean {mean}");
}

#[test]
fn noise_variance_at_a_site() {
    let config = SimConfig::new(10_000, 3, 1, 13).unwrap();
    let data = generate_replication(&config, 0).unwrap();
    let cov = noise_covariance(&data.sites, config.spatial_noise_sd, config.rho0);
    assert!((0..cov.nrows()).all(|i| (cov[(i, i)] - 0.01).abs() < 1e-15));
    let site = 4;
    let resid: Vec<f64> = (0..config.n).map(|t| data.y[t][site] - data.truth[t][site]).collect();
    let mean = resid.iter().sum::<f64>() / resid.len() as f64;
    let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (resid.len() - 1) as f64;
    assert!((var / 0.01 - 1.0).abs() < 0.1, "sample variance {var}");
}

#[test]
fn truth_is_linear_in_covariate_and_location() {
    let config = SimConfig::new(20, 4, 1, 14).unwrap();
    let data = generate_replication(&config, 0).unwrap();
    for t in 0..config.n {
        for (s, mu) in data.sites.iter().zip(&data.truth[t]) {
            let c = s.coords();
            assert!((mu - data.x[t] * (c[0] + c[1])).abs() < 1e-14);
        }
    }
    let times = data.times();
    assert_eq!(times[0], 0.0);
    assert_eq!(*times.last().unwrap(), 1.0);
}

#[test]
fn scenario_covariates() {
    let config = SimConfig::new(30, 3, 1, 15).unwrap();
    let mut data = generate_replication(&config, 0).unwrap();
    for t in 0..config.n {
        assert_eq!(covariate_at(&data, Scenario::S1, t).unwrap(), CovariateVector::scalar(data.x[t]));
    }
    assert_eq!(covariate_at(&data, Scenario::S2, 5).unwrap(), CovariateVector::scalar(data.x[4]));
    assert!(matches!(covariate_at(&data, Scenario::S2, 0), Err(Error::FirstTimepointUnavailable(_))));
    assert!(matches!(covariate_at(&data, Scenario::S3, 0), Err(Error::FirstTimepointUnavailable(_))));
    data.y[6] = vec![4.0; data.sites.len()];
    assert_eq!(covariate_at(&data, Scenario::S3, 7).unwrap(), CovariateVector::scalar(4.0));
    assert_eq!(make_covariates(&data, Scenario::S2).len(), config.n - 1);
    assert_eq!(make_covariates(&data, Scenario::S1).len(), config.n);
}

#[test]
fn smoke_experiment() {
    let start = Instant::now();
    let config = SimConfig::new(10, 2, 1, 16).unwrap();
    let spec = ExperimentSpec::new(Scenario::S1, 3);
    let spec = ExperimentSpec {
        hyper: Hyperparameters::Fixed(stkern::estimator::Candidate { h: 1.0, truncation: 3, phi: 0.9 }),
        ..spec
    };
    let result = run_experiment(&config, &spec).unwrap();
    assert!(start.elapsed().as_secs_f64() < 5.0);
    assert_eq!(result.rows.len(), 3);
    for r in &result.rows {
        assert!(r.bias.is_finite() && r.mae.is_finite() && r.rmse.is_finite() && r.mape.is_finite());
        assert!(r.mape >= 0.0);
        assert!(r.mae <= r.rmse + 1e-12);
    }
}

#[test]
fn experiment_rejects_bad_holdout() {
    let config = SimConfig::new(10, 2, 1, 16).unwrap();
    assert!(run_experiment(&config, &ExperimentSpec::new(Scenario::S1, 0)).is_err());
    assert!(run_experiment(&config, &ExperimentSpec::new(Scenario::S1, 10)).is_err());
}

#[test]
fn repeated_p_is_deterministic() {
    let template = SimConfig::new(40, 4, 3, 17).unwrap();
    let spec = ExperimentSpec::new(Scenario::S1, 4);
    let curve = mape_vs_p(&template, &spec, &[6, 6]).unwrap();
    assert_eq!(curve[0], curve[1]);
    let again = mape_vs_p(&template, &spec, &[6, 6]).unwrap();
    assert_eq!(curve, again);
    assert!(mape_vs_p(&template, &spec, &[6]).is_err());
}

#[test]
fn dense_grid_beats_corners() {
    let template = SimConfig::new(100, 2, 10, 18).unwrap();
    let spec = ExperimentSpec::new(Scenario::S1, 10);
    let curve = mape_vs_p(&template, &spec, &[2, 20]).unwrap();
    assert!(curve[1].mape < curve[0].mape, "{curve:?}");
}

#[test]
fn lagged_covariate_is_usable() {
    let config = SimConfig::new(100, 6, 8, 19).unwrap();
    let s2 = run_experiment(&config, &ExperimentSpec::new(Scenario::S2, 5)).unwrap();
    assert!(s2.rows.iter().all(|r| r.rmse.is_finite() && r.count > 0));
    let s3 = run_experiment(&config, &ExperimentSpec::new(Scenario::S3, 5)).unwrap();
    assert!(s3.rows.iter().all(|r| r.rmse.is_finite()));
}

#[test]
fn cross_validated_experiment_records_choices() {
    let config = SimConfig::new(60, 4, 2, 20).unwrap();
    let grid = vec![
        stkern::estimator::Candidate { h: 0.1, truncation: 3, phi: 0.9 },
        stkern::estimator::Candidate { h: 0.3, truncation: 6, phi: 0.9 },
    ];
    let spec = ExperimentSpec { hyper: Hyperparameters::CrossValidated(grid.clone()), ..ExperimentSpec::new(Scenario::S1, 5) };
    let result = run_experiment(&config, &spec).unwrap();
    assert_eq!(result.selected.len(), 2);
    assert!(result.selected.iter().all(|c| grid.contains(c)));
}
