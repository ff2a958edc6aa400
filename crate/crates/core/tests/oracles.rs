//! Cheap acceptance checks as ordinary tests, plus property tests against the oracles.

mod common;

use common::criteria;
use common::*;
use proptest::prelude::*;
use tspretrain::baselines::dtw_distance;
use tspretrain::data::TimeSeries;

fn pass(outcome: criteria::Outcome) {
    if let Err(msg) = outcome {
        panic!("{msg}");
    }
}

#[test]
fn losses_match_oracles() {
    pass(criteria::loss_oracles());
}

#[test]
fn dtw_matches_exhaustive_alignment() {
    pass(criteria::dtw_oracle());
}

#[test]
fn split_protocol_holds() {
    pass(criteria::split_protocol());
}

#[test]
fn generation_budget_policy() {
    pass(criteria::generation_budget());
}

#[test]
fn mg_draws_match_fitted_moments() {
    pass(criteria::mg_statistics());
}

#[test]
fn hand_ranking_example() {
    pass(criteria::ranking_math());
}

#[test]
fn size_gain_regression_matches_closed_form() {
    pass(criteria::size_gain_regression());
}

#[test]
fn records_are_deterministic() {
    pass(criteria::determinism());
}

fn series(v: Vec<f64>) -> TimeSeries {
    TimeSeries::univariate(v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dtw_is_symmetric_and_bounded_by_euclidean(
        a in prop::collection::vec(-3.0f64..3.0, 1..12),
        shift in -1.0f64..1.0,
    ) {
        let b: Vec<f64> = a.iter().map(|x| x + shift).collect();
        let d_ab = dtw_distance(&series(a.clone()), &series(b.clone()), None).unwrap();
        let d_ba = dtw_distance(&series(b.clone()), &series(a.clone()), None).unwrap();
        prop_assert!((d_ab - d_ba).abs() < 1e-12);
        let ed = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        prop_assert!(d_ab <= ed + 1e-12);
        prop_assert!((d_ab - dtw_exhaustive(&a, &b, None)).abs() < 1e-12);
    }

    #[test]
    fn dtw_band_only_increases_distance(
        a in prop::collection::vec(-3.0f64..3.0, 1..8),
        b in prop::collection::vec(-3.0f64..3.0, 1..8),
        w in 0usize..8,
    ) {
        let free = dtw_distance(&series(a.clone()), &series(b.clone()), None).unwrap();
        let banded = dtw_distance(&series(a.clone()), &series(b.clone()), Some(w)).unwrap();
        prop_assert!(banded + 1e-12 >= free);
        prop_assert!((banded - dtw_exhaustive(&a, &b, Some(w))).abs() < 1e-12);
    }
}
