use std::collections::BTreeMap;

use proptest::prelude::*;
use tnsde_core::causal::{
    estimate_ite, ite_moments, pointwise_ite, responder_split, retained_count, trajectory_ite, uplift_scores,
    CausalError, IteNormalization, Tercile, UpliftEntry,
};
use tnsde_core::model::TrajectoryPrediction;

const TIMES: [f64; 3] = [12.0, 24.0, 36.0];

fn pred(id: u32, arm: usize, seed: u64, samples: Vec<Vec<f64>>) -> TrajectoryPrediction {
    TrajectoryPrediction::from_samples(id, arm, seed, TIMES.to_vec(), samples).unwrap()
}

fn sample_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..6).prop_flat_map(|j| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), j))
}

#[test]
fn pointwise_and_trajectory_hand_examples() {
    let treated = pred(1, 2, 0, vec![vec![2.0, 0.0, 0.0], vec![3.0, 0.0, 0.0]]);
    let control = pred(1, 0, 0, vec![vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]]);
    assert_eq!(pointwise_ite(&treated, &control, 12.0).unwrap(), vec![1.0, 2.0]);

    let tau = vec![vec![0.5], vec![-0.5], vec![1.0]];
    let mean = trajectory_ite(&tau, &TIMES, 0.0, IteNormalization::Mean).unwrap();
    assert!((mean[0] - 1.0 / 3.0).abs() < 1e-15);
    // Span mode divides the sum 1.0 by 36 − 0.
    let span = trajectory_ite(&tau, &TIMES, 0.0, IteNormalization::Span).unwrap();
    assert!((span[0] - 1.0 / 36.0).abs() < 1e-15);
    assert_eq!(
        trajectory_ite(&[vec![1.0]], &[0.0], 0.0, IteNormalization::Span),
        Err(CausalError::ZeroSpan)
    );
    assert_eq!(trajectory_ite(&[], &[], 0.0, IteNormalization::Mean), Err(CausalError::NoTimes));
}

#[test]
fn moments_hand_examples() {
    assert_eq!(ite_moments(&[-1.0, 1.0]).unwrap(), (0.0, 2.0));
    assert_eq!(ite_moments(&[0.75, 0.75, 0.75]).unwrap().1, 0.0);
    assert_eq!(ite_moments(&[1.0]), Err(CausalError::TooFewSamples(1)));
}

#[test]
fn mismatched_pairs_are_rejected() {
    let m = vec![vec![0.0; 3]; 2];
    let a = pred(1, 1, 0, m.clone());
    assert!(matches!(pointwise_ite(&a, &pred(2, 0, 0, m.clone()), 12.0), Err(CausalError::Unpaired { .. })));
    assert!(matches!(pointwise_ite(&a, &pred(1, 0, 9, m.clone()), 12.0), Err(CausalError::Unpaired { .. })));
    assert!(matches!(
        pointwise_ite(&a, &pred(1, 0, 0, vec![vec![0.0; 3]; 3]), 12.0),
        Err(CausalError::Unpaired { .. })
    ));
    assert!(matches!(pointwise_ite(&a, &pred(1, 0, 0, m), 13.0), Err(CausalError::MissingTime { .. })));
}

#[test]
fn uplift_requires_control_and_baseline() {
    let m = vec![vec![0.0; 3]; 2];
    let t = pred(4, 1, 0, m.clone());
    let c = pred(4, 0, 0, m);
    let base = BTreeMap::from([(4, 2.0)]);
    assert_eq!(
        uplift_scores(&[&t], &BTreeMap::new(), &base, &TIMES),
        Err(CausalError::MissingControl(4))
    );
    assert_eq!(
        uplift_scores(&[&t], &BTreeMap::from([(4, &c)]), &BTreeMap::new(), &TIMES),
        Err(CausalError::MissingBaseline(4))
    );
}

#[test]
fn uplift_matches_brute_force_recomputation() {
    // Deterministic pseudo-random cohort of 6 patients with J = 4.
    let mut x = 0.37f64;
    let mut next = || {
        x = (x * 997.0 + 0.123).fract();
        4.0 * x
    };
    let mut treated = Vec::new();
    let mut control = Vec::new();
    let mut baselines = BTreeMap::new();
    for id in 0..6u32 {
        let mut m = || (0..4).map(|_| (0..3).map(|_| next()).collect()).collect::<Vec<Vec<f64>>>();
        treated.push(pred(id, 3, id as u64, m()));
        control.push(pred(id, 0, id as u64, m()));
        baselines.insert(id, next());
    }
    let refs: Vec<&TrajectoryPrediction> = treated.iter().collect();
    let ctrl: BTreeMap<u32, &TrajectoryPrediction> = control.iter().map(|p| (p.patient_id, p)).collect();
    let scores = uplift_scores(&refs, &ctrl, &baselines, &TIMES).unwrap();
    for (i, s) in scores.iter().enumerate() {
        let b = baselines[&(i as u32)];
        let change = |p: &TrajectoryPrediction| {
            let mut total = 0.0;
            for k in 0..3 {
                total += p.samples.iter().map(|row| row[k]).sum::<f64>() / 4.0 - b;
            }
            total / 3.0
        };
        let want = change(&treated[i]) - change(&control[i]);
        assert!((s.uplift - want).abs() < 1e-12);
        assert!((s.mean_ite - want).abs() < 1e-12);
    }
}

#[test]
fn retention_keeps_the_most_confident_patients() {
    let entries: Vec<UpliftEntry> = (0..10u32)
        .map(|id| UpliftEntry {
            patient_id: id,
            uplift: ((id * 7) % 10) as f64 - 5.0,
            confidence: ((id * 3) % 10) as f64 * 0.1,
        })
        .collect();
    let report = responder_split(&entries, 0.5, 2).unwrap();
    let mut sorted = entries.clone();
    sorted.sort_by(|a, b| a.confidence.partial_cmp(&b.confidence).unwrap());
    let mut want: Vec<u32> = sorted[..5].iter().map(|e| e.patient_id).collect();
    let mut got: Vec<u32> = report.assignments.iter().map(|a| a.patient_id).collect();
    want.sort();
    got.sort();
    assert_eq!(got, want);
    assert_eq!(retained_count(10, 0.3), 3);
    assert_eq!(retained_count(150, 0.3), 45);
    assert_eq!(retained_count(5, 0.5), 3);
}

#[test]
fn forced_terciles_and_equal_uplifts() {
    let mk = |u: &[f64]| -> Vec<UpliftEntry> {
        u.iter()
            .enumerate()
            .map(|(i, &uplift)| UpliftEntry {
                patient_id: 10 - i as u32,
                uplift,
                confidence: 0.0,
            })
            .collect()
    };
    let report = responder_split(&mk(&[1.0, -1.0, 0.0]), 1.0, 1).unwrap();
    assert_eq!(report.ids(Tercile::Responder).collect::<Vec<_>>(), vec![9]);
    assert_eq!(report.ids(Tercile::NonResponder).collect::<Vec<_>>(), vec![10]);

    let flat = responder_split(&mk(&[0.2; 6]), 1.0, 1).unwrap();
    assert_eq!(flat.responder_mean, flat.non_responder_mean);
    // Ties fall back to ascending id.
    assert_eq!(flat.ids(Tercile::Responder).collect::<Vec<_>>(), vec![5, 6]);

    assert_eq!(responder_split(&mk(&[0.0, 1.0]), 1.0, 1), Err(CausalError::TooFewRetained(2)));
    assert_eq!(responder_split(&mk(&[0.0; 5]), 0.0, 1), Err(CausalError::InvalidRetention(0.0)));

    let csv = report.to_csv();
    assert_eq!(csv.lines().next().unwrap(), "patient_id,arm,uplift,confidence,tercile,retention_level");
    assert_eq!(csv.lines().nth(1).unwrap(), "9,1,-1,0,responder,1");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn uplift_equals_mean_trajectory_ite(t in sample_matrix(), shift in -3.0f64..3.0, base in 0.0f64..8.0) {
        let c: Vec<Vec<f64>> = t.iter().map(|r| r.iter().map(|v| v * 0.5 + shift).collect()).collect();
        let treated = pred(3, 1, 5, t);
        let control = pred(3, 0, 5, c);
        let scores = uplift_scores(
            &[&treated],
            &BTreeMap::from([(3, &control)]),
            &BTreeMap::from([(3, base)]),
            &TIMES,
        ).unwrap();
        let est = estimate_ite(&treated, &control, &TIMES, IteNormalization::Mean).unwrap();
        prop_assert!((scores[0].uplift - scores[0].mean_ite).abs() <= 1e-12);
        prop_assert!((scores[0].uplift - est.mean).abs() <= 1e-12);
        prop_assert!(est.variance >= 0.0);
    }

    #[test]
    fn placebo_against_itself_is_zero(t in sample_matrix()) {
        let a = pred(8, 0, 1, t);
        let est = estimate_ite(&a, &a, &TIMES, IteNormalization::Mean).unwrap();
        prop_assert!(est.samples.iter().all(|&v| v == 0.0));
        prop_assert_eq!(est.variance, 0.0);
    }

    #[test]
    fn shifting_treated_shifts_every_effect(t in sample_matrix(), c in -2.0f64..2.0) {
        let control = pred(2, 0, 0, t.iter().map(|r| r.iter().map(|v| v.sin()).collect()).collect());
        let treated = pred(2, 1, 0, t.clone());
        let shifted = pred(2, 1, 0, t.iter().map(|r| r.iter().map(|v| v + c).collect()).collect());
        let a = pointwise_ite(&treated, &control, 24.0).unwrap();
        let b = pointwise_ite(&shifted, &control, 24.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((y - x - c).abs() < 1e-12);
        }
    }

    #[test]
    fn moments_are_permutation_invariant(mut v in prop::collection::vec(-10.0f64..10.0, 2..12), rot in 0usize..12) {
        let (m1, s1) = ite_moments(&v).unwrap();
        let r = rot % v.len();
        v.rotate_left(r);
        v.reverse();
        let (m2, s2) = ite_moments(&v).unwrap();
        prop_assert!((m1 - m2).abs() < 1e-12);
        prop_assert!((s1 - s2).abs() < 1e-10 * s1.max(1.0));
    }

    #[test]
    fn terciles_partition_and_order(
        rows in prop::collection::vec((-3.0f64..3.0, 0.0f64..1.0), 3..40),
        retention in prop::sample::select(vec![0.3, 0.5, 1.0]),
    ) {
        let entries: Vec<UpliftEntry> = rows
            .iter()
            .enumerate()
            .map(|(i, &(uplift, confidence))| UpliftEntry { patient_id: i as u32, uplift, confidence })
            .collect();
        let keep = retained_count(entries.len(), retention);
        match responder_split(&entries, retention, 1) {
            Err(CausalError::TooFewRetained(k)) => prop_assert!(k < 3),
            Err(e) => prop_assert!(false, "unexpected {e}"),
            Ok(report) => {
                prop_assert_eq!(report.assignments.len(), keep);
                let sizes: Vec<usize> = [Tercile::Responder, Tercile::Middle, Tercile::NonResponder]
                    .iter()
                    .map(|&t| report.ids(t).count())
                    .collect();
                prop_assert_eq!(sizes.iter().sum::<usize>(), keep);
                prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
                prop_assert!(report.responder_mean <= report.middle_mean);
                prop_assert!(report.middle_mean <= report.non_responder_mean);
            }
        }
    }
}
