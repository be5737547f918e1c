mod common;

use common::*;
use fedgp_core::diagnostics::{
    clustering_statistic, covariance_similarity, normality_test, pca_components, project_embeddings, sample_covariance,
    samples_matrix, stationarity_series, DiagnosticProbes, ProbeSettings,
};
use fedgp_core::engine::{run_experiment, LossSample};
use fedgp_core::gp::EmbeddingMatrix;
use fedgp_core::selection::Strategy;
use nalgebra::DMatrix;
use rand_distr::{Distribution, Exp};

/// Eigenvalues of a symmetric 3x3 matrix by the trigonometric closed form,
/// descending.
fn eig3(a: &DMatrix<f64>) -> [f64; 3] {
    let p1 = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
    let q = a.trace() / 3.0;
    let p2 = (0..3).map(|i| (a[(i, i)] - q).powi(2)).sum::<f64>() + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let b = (a - DMatrix::identity(3, 3) * q) / p;
    let r = (b.determinant() / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    [e1, 3.0 * q - e1 - e3, e3]
}

fn manual_covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (s, n) = x.shape();
    let means: Vec<f64> = (0..n).map(|j| x.column(j).sum() / s as f64).collect();
    DMatrix::from_fn(n, n, |a, b| {
        (0..s).map(|i| (x[(i, a)] - means[a]) * (x[(i, b)] - means[b])).sum::<f64>() / (s - 1) as f64
    })
}

#[test]
fn pca_of_three_clients_matches_closed_form_eigenvalues() {
    let mut r = rng(41);
    for _ in 0..50 {
        let mix = gaussian_matrix(3, 3, &mut r);
        let x = gaussian_matrix(40, 3, &mut r) * mix;
        let cov = sample_covariance(&x).unwrap();
        assert!(max_rel_matrix(&cov, &manual_covariance(&x)) <= 1e-12);
        let pca = pca_components(&x, 3).unwrap();
        let expected = eig3(&cov);
        for j in 0..3 {
            assert!(rel_err(pca.explained_variance[j], expected[j]) <= 1e-9);
            let v = pca.components.column(j).clone_owned();
            assert!(rel_err(v.norm(), 1.0) <= 1e-12);
            assert!((&cov * &v - &v * expected[j]).amax() <= 1e-9 * expected[0]);
        }
    }
}

#[test]
fn principal_scores_are_uncorrelated() {
    let mut r = rng(42);
    let x = gaussian_matrix(200, 6, &mut r) * gaussian_matrix(6, 6, &mut r);
    let pca = pca_components(&x, 4).unwrap();
    let c = sample_covariance(&pca.projections).unwrap();
    for i in 0..4 {
        assert!(rel_err(c[(i, i)], pca.explained_variance[i]) <= 1e-9);
        for j in 0..4 {
            if i != j {
                assert!(c[(i, j)].abs() <= 1e-9 * pca.explained_variance[0]);
            }
        }
    }
}

#[test]
fn similarity_properties() {
    let mut r = rng(43);
    for _ in 0..50 {
        let a = random_pd(4, &mut r);
        let b = random_pd(4, &mut r);
        let ab = covariance_similarity(&a, &b).unwrap();
        assert!(rel_err(covariance_similarity(&a, &a).unwrap(), 1.0) <= 1e-12);
        assert!(rel_err(ab, covariance_similarity(&b, &a).unwrap()) <= 1e-12);
        assert!(rel_err(ab, covariance_similarity(&(&a * 3.5), &b).unwrap()) <= 1e-12);
        assert!(ab > 0.0 && ab <= 1.0 + 1e-12);
    }
    assert!(covariance_similarity(&DMatrix::zeros(2, 2), &DMatrix::identity(2, 2)).is_err());
}

#[test]
fn normality_is_calibrated_on_gaussian_samples() {
    let mut passed = 0;
    for seed in 0..100 {
        let mut r = rng(1000 + seed);
        let x = gaussian_matrix(500, 5, &mut r) * gaussian_matrix(5, 5, &mut r);
        passed += normality_test(&x).unwrap().pass as usize;
    }
    assert!(passed >= 95, "{passed} of 100 Gaussian draws passed");

    let mut rejected = 0;
    let exp = Exp::new(1.0).unwrap();
    for seed in 0..20 {
        let mut r = rng(2000 + seed);
        let x = DMatrix::from_fn(500, 5, |_, _| exp.sample(&mut r));
        rejected += (!normality_test(&x).unwrap().pass) as usize;
    }
    assert_eq!(rejected, 20);
}

#[test]
fn normality_needs_enough_samples() {
    let mut r = rng(44);
    assert!(normality_test(&gaussian_matrix(99, 3, &mut r)).is_err());
}

fn sample(round: usize, d: Vec<f64>) -> LossSample {
    LossSample { round, selection: vec![0], delta_losses: d }
}

#[test]
fn single_sample_probes_are_flagged() {
    let probes = vec![
        (0, vec![sample(0, vec![1.0, 2.0, 0.5])]),
        (10, vec![sample(10, vec![2.0, 4.0, 1.0])]),
    ];
    let series = stationarity_series(&probes).unwrap();
    assert_eq!(series.len(), 1);
    assert!(series[0].low_confidence);
    assert_eq!(series[0].samples_per_probe, 1);
    // parallel single samples give identical outer-product directions
    assert!(rel_err(series[0].similarity, 1.0) <= 1e-12);
}

#[test]
fn two_probe_sets_on_the_same_model_are_similar() {
    let mut s = small_setup(Strategy::Rand, 45);
    s.cfg.total_rounds = 1;
    let mut probes = DiagnosticProbes::new(
        ProbeSettings {
            normality_round: Some(0),
            normality_samples: 400,
            stationarity_interval: Some(1),
            stationarity_samples: 400,
        },
        3,
    );
    run_experiment(&s.cfg, &s.spec, &s.train, &s.partition, &s.test, &mut probes).unwrap();
    let a = probes.normality.clone().unwrap();
    let (_, b) = probes.stationarity[0].clone();
    let pair = vec![(0, a), (0, b)];
    let series = stationarity_series(&pair).unwrap();
    assert!(!series[0].low_confidence);
    assert!(series[0].similarity >= 0.9, "{}", series[0].similarity);
    let m = samples_matrix(&pair[0].1).unwrap();
    assert_eq!(m.shape(), (400, 8));
}

#[test]
fn clustering_separates_planted_groups() {
    let mut r = rng(46);
    let centers = gaussian_matrix(4, 3, &mut r);
    let labels: Vec<usize> = (0..12).map(|k| k % 3).collect();
    let noise = gaussian_matrix(4, 12, &mut r) * 0.05;
    let x = DMatrix::from_fn(4, 12, |i, k| centers[(i, labels[k])]) + noise;
    let stat = clustering_statistic(&EmbeddingMatrix::new(x.clone()).unwrap(), &labels).unwrap();
    assert!(stat.intra_label > 0.95);
    assert!(stat.gap >= 0.1);
    let pts = project_embeddings(&EmbeddingMatrix::new(x).unwrap()).unwrap();
    assert_eq!(pts.len(), 12);
}
