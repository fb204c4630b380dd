mod common;

use clustered_cea::data::{Arm, TrialDataset};
use clustered_cea::glmm::CostKind;
use clustered_cea::impute::{gibbs_run, gibbs_run_with_states, impute_single_level, impute_trial, ImputationSpec};
use clustered_cea::sim::{generate, ClusterSizeLaw, CovariateLaw, CovariateSpec, Missingness};
use clustered_cea::Error;

fn data(seed: u64, clusters: usize, size: usize, rate: f64) -> TrialDataset {
    data_with(seed, clusters, size, rate, common::params(CostKind::Lognormal, 270.0, 0.17))
}

fn data_with(seed: u64, clusters: usize, size: usize, rate: f64, p: clustered_cea::glmm::ArmParams) -> TrialDataset {
    let mut a = common::arm(clusters, ClusterSizeLaw::Fixed { n: size }, p, Missingness::Mcar { rate });
    a.qaly_missing = Missingness::Mcar { rate: rate / 2.0 };
    let mut cfg = common::trial(seed, a.clone(), a);
    cfg.covariates.push(CovariateSpec {
        name: "x".into(),
        law: CovariateLaw::Normal { mean: 0.0, sd: 1.0 },
    });
    generate(&cfg).unwrap().0
}

fn short(k: usize) -> ImputationSpec {
    ImputationSpec {
        k,
        burn_in: 100,
        spacing: 20,
        seed: 17,
        ..Default::default()
    }
}

#[test]
fn completed_sets_fill_only_missing_cells() {
    let d = data(1, 12, 10, 0.3);
    let set = impute_trial(&d, &short(3)).unwrap();
    assert_eq!(set.datasets.len(), 3);
    assert_eq!(set.draw_indices, vec![120, 140, 160]);
    for completed in &set.datasets {
        assert_eq!(completed.len(), d.len());
        for (orig, new) in d.participants().iter().zip(completed.participants()) {
            assert_eq!(orig.cluster_id, new.cluster_id);
            assert_eq!(orig.covariates, new.covariates);
            assert!(new.is_complete());
            if let Some(c) = orig.cost {
                assert_eq!(new.cost, Some(c));
            }
            if let Some(q) = orig.qaly {
                assert_eq!(new.qaly, Some(q));
            }
            assert!(new.cost.unwrap() > 0.0);
        }
    }
    assert_ne!(set.datasets[0], set.datasets[1]);
}

#[test]
fn same_seed_same_draws() {
    let d = data(2, 10, 8, 0.3);
    let a = impute_trial(&d, &short(2)).unwrap();
    let b = impute_trial(&d, &short(2)).unwrap();
    assert_eq!(a, b);
    let c = impute_trial(&d, &ImputationSpec { seed: 18, ..short(2) }).unwrap();
    assert_ne!(a.datasets, c.datasets);
}

#[test]
fn nothing_missing_gives_identical_copies() {
    let d = data(3, 6, 5, 0.0);
    let set = impute_trial(&d, &short(4)).unwrap();
    assert!(set.datasets.iter().all(|c| *c == d));
}

#[test]
fn single_and_multilevel_states() {
    let d = data(4, 10, 8, 0.3).arm_subset(Arm::Control);
    let spec = ImputationSpec {
        auxiliaries: vec!["x".into()],
        ..short(2)
    };
    let (_, ml) = gibbs_run_with_states(&d, &spec).unwrap();
    assert!(ml.iter().all(|s| s.level2_cov.is_some() && s.cluster_effects.len() == 10));
    assert_eq!(ml[0].fixed_coefficients.shape(), (2, 2));
    let (_, sl) = gibbs_run_with_states(&d, &ImputationSpec { multilevel: false, ..spec.clone() }).unwrap();
    assert!(sl.iter().all(|s| s.level2_cov.is_none() && s.cluster_effects.iter().all(|u| *u == [0.0, 0.0])));
    assert_eq!(
        impute_single_level(&d, &spec).unwrap().datasets,
        gibbs_run(&d, &ImputationSpec { multilevel: false, ..spec }).unwrap().datasets
    );
}

#[test]
fn constant_cluster_size_is_collinear_with_the_intercept() {
    let d = data(5, 8, 6, 0.3).arm_subset(Arm::Control);
    let spec = ImputationSpec {
        cluster_size: true,
        ..short(2)
    };
    match gibbs_run(&d, &spec) {
        Err(Error::Collinear { columns }) => assert!(columns.iter().any(|c| c == "n_i")),
        other => panic!("expected collinearity error, got {other:?}"),
    }
}

#[test]
fn imputation_needs_a_single_arm_and_two_draws() {
    let d = data(6, 4, 4, 0.3);
    assert!(gibbs_run(&d, &short(2)).is_err());
    assert!(impute_trial(&d, &short(1)).is_err());
}

/// Posterior means of the sampled parameters against moment estimates from
/// the observed log costs and QALYs. The identity prior scale acts on
/// standardised responses, adding about `var(y) / clusters` to the
/// level-2 posterior mean.
#[test]
fn posterior_centres_on_moment_estimates() {
    let mut p = common::params(CostKind::Lognormal, 270.0, 0.17);
    p.cluster_cov.sigma_w_sq = 3e-5;
    let d = data_with(7, 100, 20, 0.1, p).arm_subset(Arm::Control);
    let spec = ImputationSpec {
        k: 40,
        burn_in: 200,
        spacing: 10,
        seed: 3,
        ..Default::default()
    };
    let (_, states) = gibbs_run_with_states(&d, &spec).unwrap();
    let n = states.len() as f64;
    let post = |f: &dyn Fn(&clustered_cea::impute::ImputerState) -> f64| states.iter().map(f).sum::<f64>() / n;

    for (col, values) in [
        (0, d.participants().iter().map(|p| p.cost.map(f64::ln)).collect::<Vec<_>>()),
        (1, d.participants().iter().map(|p| p.qaly).collect::<Vec<_>>()),
    ] {
        let groups: Vec<Vec<f64>> = d
            .rows_by_cluster()
            .into_iter()
            .map(|(_, rows)| rows.into_iter().filter_map(|i| values[i]).collect())
            .collect();
        let means: Vec<f64> = groups.iter().map(|g| g.iter().sum::<f64>() / g.len() as f64).collect();
        let (n_obs, ss_within) = groups.iter().zip(&means).fold((0usize, 0.0), |(n, s), (g, m)| {
            (n + g.len(), s + g.iter().map(|v| (v - m).powi(2)).sum::<f64>())
        });
        let within = ss_within / (n_obs - groups.len()) as f64;
        let (grand, mcse) = common::mean_mcse(&means);
        let avg_n = n_obs as f64 / groups.len() as f64;
        let between = (mcse * mcse * means.len() as f64 - within / avg_n).max(0.0);
        let all: Vec<f64> = values.iter().flatten().copied().collect();
        let (_, all_se) = common::mean_mcse(&all);
        let prior = all_se * all_se * all.len() as f64 / groups.len() as f64;

        let b0 = post(&|s| s.fixed_coefficients[(0, col)]);
        let s1 = post(&|s| s.level1_cov[(col, col)]);
        let s2 = post(&|s| s.level2_cov.unwrap()[(col, col)]);
        assert!((b0 - grand).abs() < 3.0 * mcse, "col {col}: intercept {b0} vs {grand} ± {mcse}");
        assert!((s1 / within - 1.0).abs() < 0.1, "col {col}: level-1 {s1} vs {within}");
        let expected = between + prior;
        assert!((s2 / expected - 1.0).abs() < 0.35, "col {col}: level-2 {s2} vs {expected}");
    }
}
