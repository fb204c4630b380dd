use clustered_cea::data::{Arm, CovariateSchema, Participant, TrialDataset};
use clustered_cea::pool::{pool, DfMethod, EstimateDraw};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn draw(est: (f64, f64), var: (f64, f64), r: f64) -> EstimateDraw {
    let c = r * (var.0 * var.1).sqrt();
    EstimateDraw {
        estimate: vec![est.0, est.1],
        covariance: DMatrix::from_row_slice(2, 2, &[var.0, c, c, var.1]),
    }
}

fn draws() -> impl Strategy<Value = Vec<EstimateDraw>> {
    prop::collection::vec(
        ((-1e3..1e3f64, -5.0..5.0f64), (1e-2..1e3f64, 1e-4..1.0f64), -0.9..0.9f64).prop_map(|(e, v, r)| draw(e, v, r)),
        2..8,
    )
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pooling_ignores_draw_order(ds in draws(), rot in 0usize..8) {
        let mut perm = ds.clone();
        perm.rotate_left(rot % ds.len());
        perm.reverse();
        let a = pool(&ds, DfMethod::Rubin).unwrap();
        let b = pool(&perm, DfMethod::Rubin).unwrap();
        for i in 0..2 {
            prop_assert!(close(a.point[i], b.point[i]));
            prop_assert!(close(a.df[i], b.df[i]) || (a.df[i].is_infinite() && b.df[i].is_infinite()));
            for j in 0..2 {
                prop_assert!(close(a.total_cov[(i, j)], b.total_cov[(i, j)]));
            }
        }
    }

    #[test]
    fn pooling_commutes_with_rescaling(ds in draws(), s in 0.01..100.0f64) {
        let scaled: Vec<_> = ds
            .iter()
            .map(|d| EstimateDraw {
                estimate: d.estimate.iter().map(|e| e * s).collect(),
                covariance: &d.covariance * (s * s),
            })
            .collect();
        let a = pool(&ds, DfMethod::Rubin).unwrap();
        let b = pool(&scaled, DfMethod::Rubin).unwrap();
        for i in 0..2 {
            prop_assert!(close(a.point[i] * s, b.point[i]));
            prop_assert!((a.df[i] - b.df[i]).abs() <= 1e-6 * a.df[i] || a.df[i].is_infinite());
            for j in 0..2 {
                prop_assert!(close(a.total_cov[(i, j)] * s * s, b.total_cov[(i, j)]));
            }
        }
    }

    #[test]
    fn total_variance_dominates_within(ds in draws(), complete_df in 5.0..500.0f64) {
        let rubin = pool(&ds, DfMethod::Rubin).unwrap();
        let br = pool(&ds, DfMethod::BarnardRubin { complete_df }).unwrap();
        for p in [&rubin, &br] {
            let eig = (&p.total_cov - &p.within).symmetric_eigenvalues();
            let scale = p.total_cov.amax();
            prop_assert!(eig.iter().all(|&e| e >= -1e-12 * scale));
        }
        for i in 0..2 {
            prop_assert!(rubin.df[i] >= (ds.len() - 1) as f64 - 1e-9);
            prop_assert!(br.df[i] > 0.0 && br.df[i] <= complete_df + 1e-9);
            prop_assert!(br.df[i] <= rubin.df[i] + 1e-9);
        }
    }

    #[test]
    fn csv_round_trip(rows in prop::collection::vec(
        (0u8..6, prop::option::of(0i64..10_000_000), prop::option::of(-50_000i64..150_000), -1000i64..1000),
        1..40,
    )) {
        let participants: Vec<Participant> = rows
            .iter()
            .map(|&(c, cost, qaly, x)| Participant {
                cluster_id: format!("c{c}"),
                arm: if c % 2 == 0 { Arm::Control } else { Arm::Intervention },
                cost: cost.map(|v| v as f64 / 100.0),
                qaly: qaly.map(|v| v as f64 / 1e5),
                covariates: vec![x as f64 / 8.0],
            })
            .collect();
        let d = TrialDataset::from_participants(participants, CovariateSchema::continuous(&["x"])).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = TrialDataset::read_csv(buf.as_slice(), Some(d.schema())).unwrap();
        prop_assert_eq!(&back, &d);
        prop_assert_eq!(back.mask(), d.mask());
        let (once, _) = d.filter_positive_costs();
        let (twice, removed) = once.filter_positive_costs();
        prop_assert_eq!(removed, 0);
        prop_assert_eq!(once, twice);
    }
}
