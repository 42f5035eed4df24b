mod common;

use autoiv::downstream::{ols_fit, twosls_van_fit, InstrumentBundle};
use autoiv::harness::{aggregate, ResultRow};
use autoiv::mi::rbf_pair_weights;
use autoiv::numcore::Tensor;
use common::{gaussian, oracle_dgp, pair_weight_extremes, trained_gap};
use proptest::prelude::*;

#[test]
fn independent_pair_has_no_gap() {
    let gap = trained_gap(|rng, n| (gaussian(rng, n, 2), gaussian(rng, n, 1)), 11);
    assert!(gap.abs() <= 0.1, "gap {gap}");
}

#[test]
fn identical_pair_has_large_gap() {
    let gap = trained_gap(
        |rng, n| {
            let a = gaussian(rng, n, 1);
            (a.clone(), a)
        },
        12,
    );
    assert!(gap >= 1.0, "gap {gap}");
}

#[test]
fn pair_weights_over_many_batches() {
    let (worst_sum, min_entry) = pair_weight_extremes(1000, 5);
    assert!(worst_sum <= 1e-10, "row sum off by {worst_sum:e}");
    assert!(min_entry > 0.0, "smallest weight {min_entry:e}");
}

proptest! {
    #[test]
    fn pair_weight_rows_are_distributions(
        xs in prop::collection::vec(-50.0f64..50.0, 1..40),
        sigma in 0.05f64..5.0,
    ) {
        let n = xs.len();
        let w = rbf_pair_weights(&Tensor::column(xs), sigma).unwrap().weights;
        for i in 0..n {
            let row = w.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn aggregation_ignores_record_order(mses in prop::collection::vec(0.0f64..5.0, 1..12), rot in 0usize..12) {
        let rows: Vec<ResultRow> = mses
            .iter()
            .enumerate()
            .map(|(i, &m)| ResultRow {
                run_id: format!("r{i}"),
                scenario: autoiv::datagen::Scenario::BasicLowDim,
                response: autoiv::datagen::Response::Abs,
                regime: autoiv::datagen::Regime::WithZ,
                instrument: "true_iv".into(),
                downstream: autoiv::downstream::Downstream::TwoslsVan,
                seed: i as u64,
                mse_test: m,
                wall_ms: 0,
            })
            .collect();
        let mut shuffled = rows.clone();
        shuffled.rotate_left(rot % rows.len());
        shuffled.reverse();
        prop_assert_eq!(aggregate(&rows, &[]), aggregate(&shuffled, &[]));
    }
}

#[test]
fn twosls_recovers_the_structural_slope() {
    let (z, x, y) = oracle_dgp(10_000, 1);
    let none = Tensor::empty_cols(10_000);
    let iv = twosls_van_fit(&InstrumentBundle::new(z, none.clone()).unwrap(), &x, &y).unwrap();
    let beta = iv.treatment_coefficient();
    assert!((beta + 1.0).abs() <= 0.05, "2SLS slope {beta}");
    let ols = ols_fit(&x, &none, &y).unwrap().coef.get(0, 0);
    assert!((ols + 1.0).abs() >= 0.1, "OLS slope {ols}");
}
