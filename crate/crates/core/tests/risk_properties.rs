//! Property and statistical tests of the fairness metrics and the Monte
//! Carlo estimator.

use fairvae_core::risk::{
    eval_metric, exact_risk_bruteforce, mc_estimate_value, FairnessMetric, MissingnessPosteriors,
    PosteriorState,
};
use fairvae_core::stream;
use proptest::prelude::*;

const METRICS: [FairnessMetric; 3] = [
    FairnessMetric::Deo,
    FairnessMetric::MeanDifference,
    FairnessMetric::EqualOpportunity,
];

proptest! {
    #[test]
    fn metrics_stay_within_their_bounds(
        records in prop::collection::vec((0.0f64..=1.0, 0u8..2, 0u8..2), 1..40)
    ) {
        let p: Vec<f64> = records.iter().map(|r| r.0).collect();
        let y: Vec<u8> = records.iter().map(|r| r.1).collect();
        let a: Vec<u8> = records.iter().map(|r| r.2).collect();
        for metric in METRICS {
            let eval = eval_metric(&p, &y, &a, metric);
            prop_assert!(eval.value >= 0.0);
            prop_assert!(eval.value <= metric.bound());
        }
    }

    #[test]
    fn metrics_are_invariant_to_record_order(
        records in prop::collection::vec((0.0f64..=1.0, 0u8..2, 0u8..2), 2..30),
        rotation in 1usize..10
    ) {
        let n = records.len();
        let rotated: Vec<_> = (0..n).map(|i| records[(i + rotation) % n]).collect();
        let unpack = |rs: &[(f64, u8, u8)]| {
            (
                rs.iter().map(|r| r.0).collect::<Vec<_>>(),
                rs.iter().map(|r| r.1).collect::<Vec<_>>(),
                rs.iter().map(|r| r.2).collect::<Vec<_>>(),
            )
        };
        let (p1, y1, a1) = unpack(&records);
        let (p2, y2, a2) = unpack(&rotated);
        for metric in METRICS {
            let v1 = eval_metric(&p1, &y1, &a1, metric).value;
            let v2 = eval_metric(&p2, &y2, &a2, metric).value;
            prop_assert!((v1 - v2).abs() <= 1e-12);
        }
    }

    #[test]
    fn metrics_are_invariant_to_group_relabeling(
        records in prop::collection::vec((0.0f64..=1.0, 0u8..2, 0u8..2), 1..30)
    ) {
        let p: Vec<f64> = records.iter().map(|r| r.0).collect();
        let y: Vec<u8> = records.iter().map(|r| r.1).collect();
        let a: Vec<u8> = records.iter().map(|r| r.2).collect();
        let swapped: Vec<u8> = a.iter().map(|&g| 1 - g).collect();
        for metric in METRICS {
            let v1 = eval_metric(&p, &y, &a, metric).value;
            let v2 = eval_metric(&p, &y, &swapped, metric).value;
            prop_assert!((v1 - v2).abs() <= 1e-12);
        }
    }
}

/// The estimator is unbiased: the grand mean of many independent estimates
/// lands within four standard errors of the exact expectation.
#[test]
fn monte_carlo_estimator_is_unbiased() {
    let posteriors = MissingnessPosteriors::new(
        vec![
            PosteriorState::Random(0.35),
            PosteriorState::Committed(1),
            PosteriorState::Random(0.7),
            PosteriorState::Committed(0),
            PosteriorState::Random(0.5),
        ],
        vec![
            PosteriorState::Committed(1),
            PosteriorState::Random(0.6),
            PosteriorState::Committed(0),
            PosteriorState::Random(0.25),
            PosteriorState::Committed(1),
        ],
    )
    .unwrap();
    let p = [0.9, 0.2, 0.55, 0.7, 0.15];
    let exact = exact_risk_bruteforce(&posteriors, &p, FairnessMetric::Deo).unwrap();

    let reps = 10_000usize;
    let n_samples = 4;
    let mut estimates = Vec::with_capacity(reps);
    for rep in 0..reps {
        let mut rng = stream::substream(40, "unbiased", rep as u64);
        estimates.push(mc_estimate_value(
            &posteriors,
            &p,
            FairnessMetric::Deo,
            n_samples,
            &mut rng,
        ));
    }
    let grand_mean: f64 = estimates.iter().sum::<f64>() / reps as f64;
    let var: f64 = estimates
        .iter()
        .map(|e| (e - grand_mean) * (e - grand_mean))
        .sum::<f64>()
        / (reps - 1) as f64;
    let standard_error = (var / reps as f64).sqrt();
    assert!(
        (grand_mean - exact).abs() <= 4.0 * standard_error,
        "grand mean {grand_mean} vs exact {exact} (SE {standard_error})"
    );
}
