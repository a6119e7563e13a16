use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use tnsde_autodiff::{grad_check, Tape, Tensor};
use tnsde_core::data::{generate_cohort, CohortConfig, ObservedCohort, Visit};
use tnsde_core::model::{factual_rollout, PredictionRecord, SolverConfig, TrajectoryPrediction};
use tnsde_core::nets::{ModelSpec, ParamBundle};
use tnsde_core::sde::Scheme;
use tnsde_core::train::{
    balanced_mse, balanced_mse_value, carry_forward, evaluate_factual, normalized_mse_curve, run_nested_cv,
    calibration_loss, training_loss, AdamConfig, AdamState, CvConfig, FoldPlan, HyperParams, TrainConfig, TrainError,
};

fn small_cohort(n_per_arm: usize) -> ObservedCohort {
    let mut cfg = CohortConfig::default_cohort(4);
    cfg.n_per_arm = n_per_arm;
    generate_cohort(&cfg).unwrap().observed()
}

fn oracle_balanced(pred: &[f64], y: &[f64], sigma: f64) -> f64 {
    // −log of the probability that prediction i is matched to its own target.
    let n = pred.len();
    let mut total = 0.0;
    for i in 0..n {
        let w = |k: usize| (-(pred[i] - y[k]).powi(2) / (2.0 * sigma * sigma)).exp();
        let z: f64 = (0..n).map(w).sum();
        total -= (w(i) / z).ln();
    }
    total / n as f64
}

#[test]
fn balanced_mse_matches_direct_formula() {
    let pred = [0.4, 1.1, 2.6, 3.0, 0.0];
    let y = [0.5, 1.0, 2.0, 3.5, 0.5];
    for sigma in [0.3, 0.8, 2.0] {
        let got = balanced_mse_value(&pred, &y, sigma).unwrap();
        assert!((got - oracle_balanced(&pred, &y, sigma)).abs() < 1e-12);

        let mut tape = Tape::new();
        let p = tape.constant(Tensor::matrix(5, 1, pred.to_vec()).unwrap());
        let loss = balanced_mse(&mut tape, p, &y, sigma).unwrap();
        assert!((tape.value(loss).data()[0] - got).abs() < 1e-12);
    }
    // Wide kernels approach log n for any predictions.
    let wide = balanced_mse_value(&pred, &y, 1e4).unwrap();
    assert!((wide - 5f64.ln()).abs() < 1e-6);
    assert!(matches!(balanced_mse_value(&pred, &y[..4], 1.0), Err(TrainError::LengthMismatch(5, 4))));
}

#[test]
fn balanced_mse_gradient_matches_finite_differences() {
    let y = vec![0.5, 1.0, 2.0, 3.5];
    let pred = Tensor::matrix(4, 1, vec![0.7, 0.9, 2.4, 3.1]).unwrap();
    let report = grad_check(
        |tape, ids| balanced_mse(tape, ids[0], &y, 0.6).map_err(|e| match e {
            TrainError::Autodiff(e) => e,
            other => panic!("{other}"),
        }),
        &[pred],
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn calibration_term_gradient_matches_finite_differences() {
    let a = Tensor::matrix(3, 1, vec![1.2, 0.4, 2.0]).unwrap();
    let b = Tensor::matrix(3, 1, vec![0.9, 0.8, 2.1]).unwrap();
    let resid2 = [0.3, 0.05, 0.6];
    let report = grad_check(
        |tape, ids| calibration_loss(tape, ids[0], ids[1], &resid2).map_err(|e| match e {
            TrainError::Autodiff(e) => e,
            other => panic!("{other}"),
        }),
        &[a, b],
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn calibrated_training_loss_matches_its_parts() {
    let cohort = small_cohort(4);
    let mut spec = ModelSpec::new(cohort.n_arms());
    spec.volume.channels = vec![2, 2];
    spec.diffusion_scale = 0.5;
    let params = ParamBundle::init(&spec, 9).unwrap();
    let solver = SolverConfig {
        step_weeks: 8.0,
        scheme: Scheme::Heun,
    };
    let cfg = TrainConfig {
        solver,
        calibration_weight: 2.0,
        ..TrainConfig::default()
    };
    let batch: Vec<_> = cohort.patients.iter().take(3).collect();
    let hyper = HyperParams { lr: 1e-3, sigma_b: 0.5 };
    let seeds = [1u64, 2, 3];

    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let loss = training_loss(&mut tape, &bound, &params, &batch, &seeds, hyper, &cfg).unwrap().unwrap();
    let got = tape.value(loss).data()[0];

    // Oracle: the two rollouts recomputed independently, combined by hand.
    let rollout = |seeds: &[u64]| {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let (y, t) = factual_rollout(&mut tape, &bound, &params, &batch, seeds, &solver).unwrap();
        (tape.value(y).data().to_vec(), t)
    };
    let (ya, targets) = rollout(&seeds);
    let salted: Vec<u64> = {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let pair: Vec<u64> = seeds.iter().copied().chain(seeds.iter().map(|s| s ^ 0x5851_F42D_4C95_7F2D)).collect();
        let (y, _) = factual_rollout(&mut tape, &bound, &params, &batch, &pair, &solver).unwrap();
        assert_eq!(&tape.value(y).data()[..ya.len()], &ya[..]);
        pair[3..].to_vec()
    };
    let (yb, _) = rollout(&salted);
    let mean: Vec<f64> = ya.iter().zip(&yb).map(|(a, b)| 0.5 * (a + b)).collect();
    let fit = balanced_mse_value(&mean, &targets, 0.5).unwrap();
    let cal: f64 = (0..mean.len())
        .map(|v| ((ya[v] - yb[v]).powi(2) / 2.0 - (mean[v] - targets[v]).powi(2)).powi(2))
        .sum::<f64>()
        / mean.len() as f64;
    assert!((got - (fit + 2.0 * cal)).abs() < 1e-10, "{got} vs {}", fit + 2.0 * cal);
    assert!(cal > 0.0);

    let plain = TrainConfig { calibration_weight: 0.0, ..cfg.clone() };
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let loss = training_loss(&mut tape, &bound, &params, &batch, &seeds, hyper, &plain).unwrap().unwrap();
    assert!((tape.value(loss).data()[0] - balanced_mse_value(&ya, &targets, 0.5).unwrap()).abs() < 1e-12);
}

fn single_param_bundle() -> (ParamBundle, String) {
    let params = ParamBundle::init(&ModelSpec::new(2), 0).unwrap();
    let name = "psi.l0.b".to_string();
    (params, name)
}

fn grads_with(params: &ParamBundle, name: &str, g0: f64) -> BTreeMap<String, Tensor> {
    params
        .tensors()
        .iter()
        .map(|(n, t)| {
            let mut g = Tensor::zeros(t.shape().to_vec());
            if n == name {
                g.set(0, g0).unwrap();
            }
            (n.clone(), g)
        })
        .collect()
}

#[test]
fn adam_two_steps_match_scalar_oracle() {
    let (mut params, name) = single_param_bundle();
    let start = params.get(&name).unwrap().data()[0];
    let cfg = AdamConfig::default();
    let lr = 0.1;
    let mut adam = AdamState::default();
    let (g1, g2) = (grads_with(&params, &name, 1.0), grads_with(&params, &name, 0.5));
    adam.step(&mut params, &g1, lr, &cfg);
    adam.step(&mut params, &g2, lr, &cfg);

    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut m, mut v, mut x) = (0.0, 0.0, start);
    for (t, g) in [(1, 1.0f64), (2, 0.5)] {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        x -= lr * mh / (vh.sqrt() + eps);
    }
    assert!((params.get(&name).unwrap().data()[0] - x).abs() < 1e-14);
    assert_eq!(adam.steps, 2);
}

#[test]
fn non_finite_gradients_cannot_be_built() {
    let mut g = Tensor::zeros(vec![2]);
    assert!(g.set(0, f64::NAN).is_err());
    assert!(Tensor::vector(vec![1.0, f64::INFINITY]).is_err());
}

#[test]
fn fold_plan_partitions_and_stratifies() {
    let cohort = small_cohort(8);
    let plan = FoldPlan::stratified(&cohort, 4, 3).unwrap();
    assert_eq!(plan, FoldPlan::stratified(&cohort, 4, 3).unwrap());
    assert_ne!(plan, FoldPlan::stratified(&cohort, 4, 4).unwrap());

    let all: Vec<u32> = plan.folds.iter().flatten().copied().collect();
    let unique: BTreeSet<u32> = all.iter().copied().collect();
    assert_eq!(all.len(), cohort.patients.len());
    assert_eq!(unique.len(), all.len());
    for fold in &plan.folds {
        for arm in 0..cohort.n_arms() {
            let n = fold.iter().filter(|id| cohort.patients.iter().any(|p| p.id == **id && p.arm == arm)).count();
            assert_eq!(n, 2);
        }
    }
    for outer in 0..4 {
        let test: BTreeSet<u32> = plan.folds[outer].iter().copied().collect();
        let train: BTreeSet<u32> = plan.training_ids(outer).into_iter().collect();
        assert!(test.is_disjoint(&train));
        for r in 0..3 {
            let (tr, va) = plan.inner_split(outer, r);
            let (tr, va): (BTreeSet<u32>, BTreeSet<u32>) = (tr.into_iter().collect(), va.into_iter().collect());
            assert!(tr.is_disjoint(&va));
            assert!(tr.is_disjoint(&test) && va.is_disjoint(&test));
            assert_eq!(tr.union(&va).copied().collect::<BTreeSet<_>>(), train);
        }
    }
    assert!(matches!(FoldPlan::stratified(&cohort, 9, 0), Err(TrainError::Stratification { .. })));
}

/// Two-sample records whose mean at each visit is `edss + offset` and whose
/// per-time variance is `2·spread²`.
fn records(cohort: &ObservedCohort, offset: f64, spread: impl Fn(u32) -> f64) -> Vec<PredictionRecord> {
    cohort
        .patients
        .iter()
        .map(|p| {
            let times: Vec<f64> = p.visits.iter().map(|v| v.t).collect();
            let d = spread(p.id);
            let mk = |s: f64| p.visits.iter().map(|v| v.edss + offset + s).collect::<Vec<f64>>();
            let pred = TrajectoryPrediction::from_samples(p.id, p.arm, 0, times, vec![mk(-d), mk(d)]).unwrap();
            PredictionRecord::new(pred, &cohort.arms[p.arm].name, (p.id % 3) as usize)
        })
        .collect()
}

#[test]
fn factual_metric_reference_values() {
    let cohort = small_cohort(4);
    let perfect = evaluate_factual(&records(&cohort, 0.0, |_| 0.5), &cohort).unwrap();
    assert_eq!(perfect.overall_mse, 0.0);

    let shifted = evaluate_factual(&records(&cohort, 1.0, |id| id as f64), &cohort).unwrap();
    assert!((shifted.overall_mse - 1.0).abs() < 1e-12);
    assert!(shifted.bins.iter().all(|b| (b.mse - 1.0).abs() < 1e-12));
    assert_eq!(shifted.bins.iter().map(|b| b.n).sum::<usize>(), shifted.n_visits);

    let weighted: f64 = shifted.per_fold.iter().map(|f| f.mse * f.n_patients as f64).sum::<f64>()
        / shifted.per_patient.len() as f64;
    assert!((weighted - shifted.overall_mse).abs() < 1e-12);
    assert_eq!(shifted.per_fold.len(), 3);
    assert!(shifted.se_folds.is_some());

    // Lower id means more confident; confidence must not change the scores.
    assert_eq!(shifted.curve.last().unwrap().normalized_mse, 1.0);
}

#[test]
fn coverage_gaps_and_late_visits() {
    let mut cohort = small_cohort(4);
    let mut recs = records(&cohort, 0.0, |_| 0.1);
    let dropped = recs.remove(3);
    match evaluate_factual(&recs, &cohort) {
        Err(TrainError::Coverage(missing)) => assert_eq!(missing, vec![(dropped.patient_id, dropped.arm)]),
        other => panic!("expected coverage error, got {other:?}"),
    }

    cohort.patients[0].visits.push(Visit { t: 110.0, edss: 9.0 });
    let table = evaluate_factual(&records(&cohort, 0.0, |_| 0.1), &cohort).unwrap();
    assert_eq!(table.excluded_visits, 1);
}

#[test]
fn carry_forward_hand_example() {
    let mut cohort = small_cohort(4);
    cohort.patients.truncate(1);
    let p = &mut cohort.patients[0];
    p.covariates.baseline_edss = 3.0;
    p.visits = vec![Visit { t: 12.0, edss: 3.5 }, Visit { t: 24.0, edss: 3.0 }];
    let table = carry_forward(&cohort, None).unwrap();
    assert!((table.overall_mse - 0.125).abs() < 1e-15);
    assert!(table.curve.is_empty());
    assert_eq!(table.se_folds, None);
}

#[test]
fn tiny_nested_cv_predicts_every_patient_once() {
    let cohort = small_cohort(4);
    let cfg = CvConfig {
        folds: 3,
        grid: vec![HyperParams { lr: 1e-2, sigma_b: 0.5 }],
        train: TrainConfig {
            epochs: 1,
            patience: 1,
            batch_size: 8,
            val_samples: 1,
            solver: SolverConfig {
                step_weeks: 8.0,
                scheme: Scheme::Heun,
            },
            seed: 2,
                ..TrainConfig::default()
        },
        predict_samples: 2,
        seed: 5,
    };
    let mut spec = ModelSpec::new(cohort.n_arms());
    spec.volume.channels = vec![2, 2];
    let out = run_nested_cv(&cohort, &spec, &cfg, &[12.0, 48.0, 96.0]).unwrap();
    assert_eq!(out.folds.len(), 3);
    for f in &out.folds {
        assert!(f.params.is_some() && f.final_epochs == 1, "{:?} {}", f.error, f.final_epochs);
    }
    let ids: Vec<u32> = out.predictions.iter().map(|r| r.patient_id).collect();
    let unique: BTreeSet<u32> = ids.iter().copied().collect();
    assert_eq!(ids.len(), cohort.patients.len());
    assert_eq!(unique.len(), ids.len());
    for r in &out.predictions {
        assert_eq!(out.plan.fold_of(r.patient_id), Some(r.fold));
    }
    evaluate_factual(&out.predictions, &cohort).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn curve_is_order_invariant_and_anchored(
        rows in prop::collection::vec((0.01f64..5.0, 0.0f64..3.0), 1..30),
        rot in 0usize..30,
    ) {
        let rows: Vec<(u32, f64, f64)> = rows.iter().enumerate().map(|(i, &(m, c))| (i as u32, m, c)).collect();
        let retentions = [0.3, 0.5, 1.0];
        let a = normalized_mse_curve(&rows, &retentions).unwrap();
        let mut shuffled = rows.clone();
        shuffled.rotate_left(rot % rows.len());
        shuffled.reverse();
        let b = normalized_mse_curve(&shuffled, &retentions).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a[2].normalized_mse, 1.0);
        prop_assert!(a.iter().all(|p| p.n_retained >= 1 && p.normalized_mse >= 0.0));
    }
}
