mod common;

use clustered_cea::cea::{LambdaGrid, DEFAULT_LEVEL};
use clustered_cea::data::{Arm, TrialDataset};
use clustered_cea::diagnostics::{
    complete_case_analysis, fit_missingness_logistic, screen, Outcome, DEFAULT_THRESHOLD,
};
use clustered_cea::glmm::{fit_arm, CostKind, FitOptions, Integration};
use clustered_cea::sim::{generate, ClusterSizeLaw, CovariateLaw, CovariateSpec, Missingness, SimConfig};
use clustered_cea::Error;

fn fast() -> FitOptions {
    FitOptions {
        integration: Integration::AnalyticQaly,
        ..Default::default()
    }
}

fn config(seed: u64, clusters: usize, size: usize, cost_missing: Missingness) -> SimConfig {
    let p = common::params(CostKind::Gamma, 270.0, 0.17);
    let a = common::arm(clusters, ClusterSizeLaw::Fixed { n: size }, p, cost_missing);
    let mut cfg = common::trial(seed, a.clone(), a);
    cfg.covariates = vec![
        CovariateSpec {
            name: "z".into(),
            law: CovariateLaw::Normal { mean: 0.0, sd: 1.0 },
        },
        CovariateSpec {
            name: "b".into(),
            law: CovariateLaw::Bernoulli { p: 0.4 },
        },
    ];
    cfg
}

fn control(cfg: &SimConfig) -> TrialDataset {
    generate(cfg).unwrap().0.arm_subset(Arm::Control)
}

fn covs() -> Vec<String> {
    vec!["z".into(), "b".into()]
}

#[test]
fn fully_observed_outcome_is_an_error() {
    let d = control(&config(1, 10, 10, Missingness::None));
    for ri in [false, true] {
        assert!(matches!(
            fit_missingness_logistic(&d, Outcome::Cost, &covs(), false, ri),
            Err(Error::InvalidArgument(_))
        ));
    }
}

#[test]
fn separation_names_the_covariate() {
    let d = control(&config(2, 10, 10, Missingness::None));
    let z = d.covariate("z").unwrap();
    let rows: Vec<_> = d
        .participants()
        .iter()
        .zip(&z)
        .map(|(p, &z)| {
            let mut p = p.clone();
            if z > 0.3 {
                p.cost = None;
            }
            p
        })
        .collect();
    let d = d.with_participants(rows).unwrap();
    match fit_missingness_logistic(&d, Outcome::Cost, &covs(), false, false) {
        Err(Error::Separation { covariate }) => assert_eq!(covariate, "z"),
        other => panic!("expected separation, got {other:?}"),
    }
}

#[test]
fn wald_statistics_survive_affine_rescaling() {
    let cfg = config(
        3,
        30,
        15,
        Missingness::Mar {
            intercept: -1.0,
            slopes: vec![("z".into(), 0.5)],
            size_slope: 0.0,
        },
    );
    let d = control(&cfg);
    let rows: Vec<_> = d
        .participants()
        .iter()
        .map(|p| {
            let mut p = p.clone();
            p.covariates[0] = 40.0 + 12.5 * p.covariates[0];
            p
        })
        .collect();
    let scaled = d.with_participants(rows).unwrap();
    for ri in [false, true] {
        let a = fit_missingness_logistic(&d, Outcome::Cost, &covs(), false, ri).unwrap();
        let b = fit_missingness_logistic(&scaled, Outcome::Cost, &covs(), false, ri).unwrap();
        for (x, y) in a.coefficients.iter().zip(&b.coefficients).skip(1) {
            assert!((x.z - y.z).abs() < 1e-8, "{} {} vs {}", x.name, x.z, y.z);
        }
        assert!((a.coefficients[1].estimate / 12.5 - b.coefficients[1].estimate).abs() < 1e-9);
        assert!((a.loglik - b.loglik).abs() < 1e-8);
    }
}

#[test]
fn null_missingness_rarely_flags_covariates() {
    let reps = 200;
    let mut inside = [0usize; 3];
    for r in 0..reps {
        let mut cfg = config(1000 + r, 40, 25, Missingness::Mcar { rate: 0.3 });
        cfg.control.cluster_size = ClusterSizeLaw::Uniform { min: 10, max: 40 };
        let d = control(&cfg);
        let m = fit_missingness_logistic(&d, Outcome::Cost, &covs(), true, false).unwrap();
        for (k, c) in m.coefficients.iter().skip(1).enumerate() {
            inside[k] += usize::from(c.z.abs() < 1.96);
        }
        assert!(m.coefficients.iter().all(|c| (0.0..=1.0).contains(&c.p)));
    }
    let frac: Vec<f64> = inside.iter().map(|&k| k as f64 / reps as f64).collect();
    assert!(frac.iter().all(|&f| f >= 0.93), "{frac:?}");
}

#[test]
fn strong_missingness_slope_is_detected() {
    let reps = 200;
    let mut flagged = 0;
    for r in 0..reps {
        let cfg = config(
            5000 + r,
            100,
            20,
            Missingness::Mar {
                intercept: -1.0,
                slopes: vec![("z".into(), 1.0)],
                size_slope: 0.0,
            },
        );
        let d = control(&cfg);
        assert_eq!(d.len(), 2000);
        let m = fit_missingness_logistic(&d, Outcome::Cost, &covs(), false, false).unwrap();
        flagged += usize::from(m.coefficients[1].p < 0.05);
    }
    assert!(flagged as f64 / reps as f64 >= 0.95);
}

#[test]
fn zero_cluster_sd_matches_plain_fit() {
    let reps = 60;
    let (mut plain, mut ri, mut sds) = (Vec::new(), Vec::new(), Vec::new());
    for r in 0..reps {
        let cfg = config(
            9000 + r,
            30,
            20,
            Missingness::Mar {
                intercept: -0.5,
                slopes: vec![("z".into(), 0.8)],
                size_slope: 0.0,
            },
        );
        let d = control(&cfg);
        let a = fit_missingness_logistic(&d, Outcome::Cost, &covs(), false, false).unwrap();
        let b = fit_missingness_logistic(&d, Outcome::Cost, &covs(), false, true).unwrap();
        assert!(b.cluster_sd.unwrap() >= 0.0);
        plain.push(a.coefficients[1].estimate);
        ri.push(b.coefficients[1].estimate);
        sds.push(b.cluster_sd.unwrap());
    }
    let (mp, se) = common::mean_mcse(&plain);
    let (mr, _) = common::mean_mcse(&ri);
    assert!((mp - mr).abs() < 3.0 * se, "{mp} vs {mr} (mcse {se})");
    assert!((mp - 0.8).abs() < 3.0 * se);
    assert!(common::mean_mcse(&sds).0 < 0.3);
}

#[test]
fn screening_lists_associated_covariates() {
    let cfg = config(
        4,
        60,
        20,
        Missingness::Mar {
            intercept: -1.0,
            slopes: vec![("z".into(), 1.0)],
            size_slope: 0.0,
        },
    );
    let (d, _) = generate(&cfg).unwrap();
    let report = screen(&d, &covs(), false, DEFAULT_THRESHOLD).unwrap();
    assert_eq!(report.missingness.len(), 4);
    assert_eq!(report.outcome_models.len(), 4);
    // qaly is fully observed in both arms
    assert_eq!(report.skipped.len(), 4);
    let cands = report.candidates();
    for arm in Arm::BOTH {
        assert!(cands
            .iter()
            .any(|c| c.arm == arm && c.variable == "z" && c.outcome == Outcome::Cost && c.model == "missingness"));
    }
    let text = report.to_text();
    assert!(text.contains("Candidate auxiliaries (p < 0.1):"));
    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    let lines = String::from_utf8(csv).unwrap().lines().count();
    assert_eq!(lines, 1 + 8 * 3);
    assert!(matches!(screen(&d, &["nope".into()], false, 0.1), Err(Error::InvalidArgument(_))));
}

#[test]
fn complete_data_gives_the_full_fit() {
    let (d, _) = generate(&config(6, 20, 10, Missingness::None)).unwrap();
    let grid = LambdaGrid::default();
    let cc = complete_case_analysis(&d, CostKind::Gamma, &fast(), &grid, DEFAULT_LEVEL).unwrap();
    let full = fit_arm(&d.arm_subset(Arm::Control), CostKind::Gamma, &fast()).unwrap();
    assert_eq!(cc.control, full);
    assert_eq!(cc.dropped, 0);
    assert_eq!(cc.summary.curve.len(), grid.values().len());
}

#[test]
fn complete_cases_need_two_clusters_per_arm() {
    let (d, _) = generate(&config(7, 3, 4, Missingness::None)).unwrap();
    let keep = d.participants()[0].cluster_id.clone();
    let rows: Vec<_> = d
        .participants()
        .iter()
        .map(|p| {
            let mut p = p.clone();
            if p.arm == Arm::Control && p.cluster_id != keep {
                p.qaly = None;
            }
            p
        })
        .collect();
    let d = d.with_participants(rows).unwrap();
    let r = complete_case_analysis(&d, CostKind::Gamma, &fast(), &LambdaGrid::default(), DEFAULT_LEVEL);
    assert!(matches!(r, Err(Error::InvalidArgument(_))));
}

#[test]
fn complete_cases_are_unbiased_under_mcar() {
    let reps = 200;
    let mut err = Vec::new();
    for r in 0..reps {
        let cfg = config(20_000 + r, 30, 10, Missingness::Mcar { rate: 0.3 });
        let (d, _) = generate(&cfg).unwrap();
        let cc = complete_case_analysis(&d, CostKind::Gamma, &fast(), &LambdaGrid::new(vec![0.0]).unwrap(), DEFAULT_LEVEL)
            .unwrap();
        err.push(cc.control.mean_cost - 270.0);
    }
    let (bias, se) = common::mean_mcse(&err);
    assert!(bias.abs() < 3.0 * se, "bias {bias} mcse {se}");
}
