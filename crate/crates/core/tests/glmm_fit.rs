mod common;

use clustered_cea::data::Arm;
use clustered_cea::glmm::{fit_arm, ArmLikelihood, ClusterEffectCov, CostKind, CostModel, FitOptions, Integration};
use clustered_cea::quadrature::gauss_hermite;
use clustered_cea::sim::{generate, ClusterSizeLaw, Missingness};
use clustered_cea::Error;

fn fast() -> FitOptions {
    FitOptions {
        integration: Integration::AnalyticQaly,
        ..Default::default()
    }
}

fn one_arm(seed: u64, kind: CostKind, clusters: usize, size: usize) -> (clustered_cea::data::TrialDataset, clustered_cea::glmm::ArmParams) {
    let p = common::params(kind, 270.0, 0.17);
    let a = common::arm(clusters, ClusterSizeLaw::Fixed { n: size }, p, Missingness::None);
    let (d, _) = generate(&common::trial(seed, a.clone(), a)).unwrap();
    (d.arm_subset(Arm::Control), p)
}

#[test]
fn default_fit_recovers_gamma_truth() {
    let (d, p) = one_arm(11, CostKind::Gamma, 100, 20);
    let fit = fit_arm(&d, CostKind::Gamma, &FitOptions::default()).unwrap();
    assert!(fit.converged);
    assert!((fit.mean_cost - p.mean_cost()).abs() < 3.0 * fit.se_cost(), "{} ± {}", fit.mean_cost, fit.se_cost());
    assert!((fit.mean_qaly - p.mean_qaly()).abs() < 3.0 * fit.se_qaly());
    assert!(fit.start_logliks.iter().all(Option::is_some));
}

#[test]
fn each_cost_model_fits_its_own_data() {
    for kind in CostKind::ALL {
        let (d, p) = one_arm(3, kind, 40, 15);
        let fit = fit_arm(&d, kind, &fast()).unwrap();
        assert!(fit.converged, "{kind:?}");
        assert!((fit.mean_cost - p.mean_cost()).abs() < 3.0 * fit.se_cost(), "{kind:?}");
        let implied = fit.params.gamma1 + fit.params.alpha * fit.mean_cost;
        assert!((fit.mean_qaly - implied).abs() < 1e-12);
        let c = fit.cov_means;
        assert!(c[0][0] > 0.0 && c[1][1] > 0.0 && c[0][0] * c[1][1] >= c[0][1] * c[1][0]);
        assert_eq!(c[0][1], c[1][0]);
        assert!(fit.correlation_cq.abs() <= 1.0);
    }
}

#[test]
fn tensor_and_collapsed_fits_agree() {
    let (d, _) = one_arm(5, CostKind::Lognormal, 30, 8);
    let a = fit_arm(&d, CostKind::Lognormal, &FitOptions::default()).unwrap();
    let b = fit_arm(&d, CostKind::Lognormal, &fast()).unwrap();
    assert!((a.loglik - b.loglik).abs() < 1e-7);
    assert!((a.mean_cost - b.mean_cost).abs() < 1e-5 * a.se_cost());
    assert!((a.se_cost() - b.se_cost()).abs() < 1e-4 * a.se_cost());
}

#[test]
fn start_point_does_not_change_the_maximum() {
    let (d, p) = one_arm(7, CostKind::Gamma, 60, 12);
    let a = fit_arm(&d, CostKind::Gamma, &fast()).unwrap();
    let b = fit_arm(&d, CostKind::Gamma, &FitOptions { start: Some(p), ..fast() }).unwrap();
    assert!((a.loglik - b.loglik).abs() < 1e-6, "{} vs {}", a.loglik, b.loglik);
    assert!((a.mean_cost - b.mean_cost).abs() < 1e-3 * a.se_cost());
}

#[test]
fn absent_cluster_effects_reach_the_boundary() {
    let mut p = common::params(CostKind::Normal, 270.0, 0.17);
    p.cluster_cov = ClusterEffectCov {
        sigma_u_sq: 0.0,
        sigma_w_sq: 0.0,
        rho: 0.0,
    };
    let a = common::arm(30, ClusterSizeLaw::Fixed { n: 10 }, p, Missingness::None);
    let (d, _) = generate(&common::trial(2, a.clone(), a)).unwrap();
    let fit = fit_arm(&d.arm_subset(Arm::Control), CostKind::Normal, &fast()).unwrap();
    let cc = fit.params.cluster_cov;
    assert!(cc.sigma_u_sq < 0.05 * p.cost_dist.dispersion);
    assert!(cc.rho.abs() <= 1.0);
    assert!(fit.se_cost().is_finite() && fit.se_cost() > 0.0);
    assert!((fit.mean_cost - 270.0).abs() < 3.0 * fit.se_cost());
}

#[test]
fn quadrature_order_has_converged_away_from_zero_means() {
    let p = common::params(CostKind::Gamma, 270.0, 0.05);
    let a = common::arm(20, ClusterSizeLaw::Fixed { n: 5 }, p, Missingness::None);
    let (d, _) = generate(&common::trial(9, a.clone(), a)).unwrap();
    let d = d.arm_subset(Arm::Control);
    let ll = |order| {
        ArmLikelihood::from_dataset(&d, CostModel::Gamma, gauss_hermite(order).unwrap(), Integration::TensorProduct)
            .unwrap()
            .loglik(&p)
            .unwrap()
    };
    let (a, b) = (ll(30), ll(70));
    assert!((a - b).abs() < 1e-6, "{a} vs {b}");
}

#[test]
fn skewed_models_reject_non_positive_costs() {
    let (d, _) = one_arm(4, CostKind::Normal, 10, 5);
    let mut rows = d.participants().to_vec();
    rows[0].cost = Some(0.0);
    let d = d.with_participants(rows).unwrap();
    for kind in [CostKind::Gamma, CostKind::Lognormal] {
        assert!(fit_arm(&d, kind, &fast()).is_err());
    }
}

#[test]
fn too_few_clusters() {
    let (d, _) = one_arm(4, CostKind::Gamma, 2, 5);
    let first = d.participants()[0].cluster_id.clone();
    let d = d.retain_rows(|r| r.cluster_id == first);
    assert!(matches!(fit_arm(&d, CostKind::Gamma, &fast()), Err(Error::InvalidArgument(_))));
}
