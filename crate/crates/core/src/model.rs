//! Full trajectory predictor: baseline encoders, arm-conditioned latent SDE
//! and decoder, sampled over `J` Brownian paths.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tnsde_autodiff::{AdError, NodeId, Tape, Tensor};

use crate::data::ObservedPatient;
use crate::nets::{BoundParams, NetError, ParamBundle};
use crate::sde::{sample_path, solve_batch, solve_batch_values, RowPlan, Scheme, SdeError, TapeDynamics, TimeGrid};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("patient {patient}: {source}")]
    Solve { patient: u32, source: SdeError },
    #[error("patient {patient}: invalid baseline field `{field}`: {reason}")]
    Baseline {
        patient: u32,
        field: &'static str,
        reason: String,
    },
    #[error("at least {needed} samples required, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("prediction times must be sorted, unique and >= 0")]
    InvalidTimes,
    #[error("prediction line {line}: {message}")]
    Record { line: usize, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Uniform integration step in weeks.
    pub step_weeks: f64,
    #[serde(default)]
    pub scheme: Scheme,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            step_weeks: 1.0,
            scheme: Scheme::Heun,
        }
    }
}

/// Drift and diffusion of one bound bundle under fixed per-row arm codes.
pub struct ArmDynamics<B> {
    pub bound: B,
    pub code: NodeId,
}

impl<'a, B: AsRef<BoundParams<'a>>> TapeDynamics for ArmDynamics<B> {
    fn drift(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId, AdError> {
        self.bound.as_ref().drift(tape, z, self.code)
    }

    fn diffusion(&self, tape: &mut Tape, z: NodeId) -> Result<Option<NodeId>, AdError> {
        self.bound.as_ref().diffusion(tape, z, self.code).map(Some)
    }
}

/// Mixes a run seed with a patient id into the patient's base path seed.
pub fn patient_seed(seed: u64, patient_id: u32) -> u64 {
    let mut x = seed ^ (u64::from(patient_id) + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of Brownian sample `j` (1-based).
pub fn path_seed(base_seed: u64, j: usize) -> u64 {
    base_seed ^ j as u64
}

fn check_baseline(patient: &ObservedPatient, params: &ParamBundle) -> Result<(), ModelError> {
    let expected = params.spec().volume.input_shape;
    let bad = |field, reason: String| ModelError::Baseline {
        patient: patient.id,
        field,
        reason,
    };
    if patient.volume.shape != expected || patient.volume.data.len() != expected.iter().product::<usize>() {
        return Err(bad(
            "volume",
            format!("expected shape {expected:?}, got {:?}", patient.volume.shape),
        ));
    }
    let c = &patient.covariates;
    for (field, v) in [
        ("age", c.age),
        ("sex", c.sex),
        ("functional_score", c.functional_score),
        ("lesion_volume", c.lesion_volume),
        ("baseline_edss", c.baseline_edss),
    ] {
        if !v.is_finite() {
            return Err(bad(field, format!("non-finite value {v}")));
        }
    }
    if c.lesion_volume <= 0.0 {
        return Err(bad("lesion_volume", "must be positive".into()));
    }
    Ok(())
}

/// `Z(t0) = concat(φ(volume), ψ(tabular))` for a batch, `[B, h1 + h2]`.
pub fn encode_batch(
    tape: &mut Tape,
    bound: &BoundParams<'_>,
    params: &ParamBundle,
    patients: &[&ObservedPatient],
) -> Result<NodeId, ModelError> {
    let [a, b, c] = params.spec().volume.input_shape;
    let mut vol = Vec::with_capacity(patients.len() * a * b * c);
    let mut tab = Vec::with_capacity(patients.len() * crate::data::TABULAR_WIDTH);
    for p in patients {
        check_baseline(p, params)?;
        vol.extend_from_slice(&p.volume.data);
        tab.extend_from_slice(&p.covariates.features());
    }
    let n = patients.len();
    let x = tape.constant(Tensor::new(vec![n, 1, a, b, c], vol)?);
    let w = tape.constant(Tensor::matrix(n, crate::data::TABULAR_WIDTH, tab)?);
    let zx = bound.encode_volume(tape, x)?;
    let zw = bound.encode_tabular(tape, w)?;
    Ok(tape.concat(&[zx, zw], 1)?)
}

/// Baseline latent state of one patient.
pub fn encode_baseline(params: &ParamBundle, patient: &ObservedPatient) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let z = encode_batch(&mut tape, &bound, params, &[patient])?;
    let width = params.spec().latent_width();
    Ok(tape.value(z).reshaped(vec![width])?)
}

/// Differentiable factual forward pass for a minibatch. `seeds` holds one
/// path seed per rollout and its length must be a multiple of the batch
/// size: rollout `r` uses patient `r % n`, so `k·n` seeds give `k` paths per
/// patient from a single encoding. Each rollout is decoded at the patient's
/// visit times under its assigned arm. Returns `[Σ visits, 1]` predictions,
/// rollout-major, and the matching observed targets.
pub fn factual_rollout(
    tape: &mut Tape,
    bound: &BoundParams<'_>,
    params: &ParamBundle,
    patients: &[&ObservedPatient],
    seeds: &[u64],
    solver: &SolverConfig,
) -> Result<(NodeId, Vec<f64>), ModelError> {
    assert!(
        !patients.is_empty() && !seeds.is_empty() && seeds.len() % patients.len() == 0,
        "seed count must be a positive multiple of the batch size"
    );
    let copies = seeds.len() / patients.len();
    let width = params.spec().latent_width();
    let mut z0 = encode_batch(tape, bound, params, patients)?;
    if copies > 1 {
        z0 = tape.concat(&vec![z0; copies], 0)?;
    }
    let rollouts: Vec<&ObservedPatient> = patients.iter().cycle().take(seeds.len()).copied().collect();
    let patients = &rollouts[..];
    let mut plans = Vec::with_capacity(patients.len());
    let mut targets = Vec::new();
    for (p, &seed) in patients.iter().zip(seeds) {
        let times: Vec<f64> = p.visits.iter().map(|v| v.t).collect();
        let solve_err = |source| ModelError::Solve { patient: p.id, source };
        let grid = TimeGrid::new(0.0, solver.step_weeks, times).map_err(solve_err)?;
        let path = sample_path(&grid, width, seed).map_err(solve_err)?;
        plans.push(RowPlan { grid, path });
        targets.extend(p.visits.iter().map(|v| v.edss));
    }
    let arms: Vec<usize> = patients.iter().map(|p| p.arm).collect();
    let code = bound.arm_code(tape, &arms)?;
    let dynamics = ArmDynamics { bound, code };
    let solution = solve_batch(tape, &dynamics, z0, &plans, solver.scheme).map_err(|source| {
        let patient = match &source {
            SdeError::Diverged { row, .. } | SdeError::PathMismatch { row, .. } => patients[*row].id,
            _ => patients[0].id,
        };
        ModelError::Solve { patient, source }
    })?;
    let state_arms: Vec<usize> = solution.rows.iter().map(|&r| arms[r]).collect();
    let code = bound.arm_code(tape, &state_arms)?;
    let y = bound.decode(tape, solution.states, code)?;
    Ok((y, targets))
}

/// `J × T` decoded samples for one patient under one arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPrediction {
    pub patient_id: u32,
    pub arm: usize,
    pub base_seed: u64,
    pub times: Vec<f64>,
    /// Row `j` holds sample `j` at every time.
    pub samples: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Unbiased across samples; zero when `J = 1`.
    pub variance: Vec<f64>,
}

impl TrajectoryPrediction {
    pub fn from_samples(
        patient_id: u32,
        arm: usize,
        base_seed: u64,
        times: Vec<f64>,
        samples: Vec<Vec<f64>>,
    ) -> Result<Self, ModelError> {
        if samples.is_empty() {
            return Err(ModelError::TooFewSamples { needed: 1, got: 0 });
        }
        let t = times.len();
        assert!(samples.iter().all(|s| s.len() == t), "ragged sample matrix");
        let j = samples.len() as f64;
        // Shifted by the first sample so identical samples give an exact mean.
        let mean: Vec<f64> = (0..t)
            .map(|k| {
                let shift = samples[0][k];
                shift + samples.iter().map(|s| s[k] - shift).sum::<f64>() / j
            })
            .collect();
        let variance = (0..t)
            .map(|k| {
                if samples.len() < 2 {
                    return 0.0;
                }
                samples.iter().map(|s| (s[k] - mean[k]).powi(2)).sum::<f64>() / (j - 1.0)
            })
            .collect();
        Ok(Self {
            patient_id,
            arm,
            base_seed,
            times,
            samples,
            mean,
            variance,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    /// Position of `t` in `times`, if predicted exactly.
    pub fn time_index(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|&x| x == t)
    }
}

/// Mean over output times of the per-time sample variance; lower is more
/// confident.
pub fn patient_confidence(pred: &TrajectoryPrediction) -> Result<f64, ModelError> {
    if pred.n_samples() < 2 {
        return Err(ModelError::TooFewSamples {
            needed: 2,
            got: pred.n_samples(),
        });
    }
    Ok(pred.variance.iter().sum::<f64>() / pred.variance.len() as f64)
}

fn check_times(times: &[f64]) -> Result<(), ModelError> {
    if times.is_empty() || times[0] < 0.0 || times.windows(2).any(|w| w[1] <= w[0]) || times.iter().any(|t| !t.is_finite()) {
        return Err(ModelError::InvalidTimes);
    }
    Ok(())
}

/// Predicts `patient` under each arm in `arms` with `j` samples. Sample `j`
/// uses the path seeded by `base_seed ⊕ j` under every arm, so arms differ
/// only through the treatment code.
pub fn predict_patient(
    params: &ParamBundle,
    patient: &ObservedPatient,
    arms: &[usize],
    times: &[f64],
    j: usize,
    base_seed: u64,
    solver: &SolverConfig,
) -> Result<Vec<TrajectoryPrediction>, ModelError> {
    if j == 0 {
        return Err(ModelError::TooFewSamples { needed: 1, got: 0 });
    }
    check_times(times)?;
    let n_arms = params.spec().n_arms;
    if let Some(&arm) = arms.iter().find(|&&a| a >= n_arms) {
        return Err(NetError::InvalidArm { arm, n_arms }.into());
    }
    let width = params.spec().latent_width();
    let z0 = encode_baseline(params, patient)?;
    let solve_err = |source| ModelError::Solve {
        patient: patient.id,
        source,
    };
    let grid = TimeGrid::new(0.0, solver.step_weeks, times.to_vec()).map_err(solve_err)?;
    let paths = (1..=j)
        .map(|s| sample_path(&grid, width, path_seed(base_seed, s)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(solve_err)?;

    // Rows are arm-major: row = a·J + s.
    let mut plans = Vec::with_capacity(arms.len() * j);
    let mut row_arms = Vec::with_capacity(arms.len() * j);
    let mut z0_rows = Vec::with_capacity(arms.len() * j * width);
    for &arm in arms {
        for path in &paths {
            plans.push(RowPlan {
                grid: grid.clone(),
                path: path.clone(),
            });
            row_arms.push(arm);
            z0_rows.extend_from_slice(z0.data());
        }
    }
    let rows = plans.len();
    let z0 = Tensor::matrix(rows, width, z0_rows)?;
    let make = |tape: &mut Tape| {
        let bound = params.bind_frozen(tape);
        let code = bound.arm_code(tape, &row_arms).expect("arms validated");
        ArmDynamics { bound, code }
    };
    let solution = solve_batch_values(make, &z0, &plans, solver.scheme).map_err(solve_err)?;

    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let state_arms: Vec<usize> = solution.rows.iter().map(|&r| row_arms[r]).collect();
    let code = bound.arm_code(&mut tape, &state_arms)?;
    let states = tape.constant(solution.states);
    let y = bound.decode(&mut tape, states, code)?;
    let y = tape.value(y).data();

    let t = times.len();
    arms.iter()
        .enumerate()
        .map(|(a, &arm)| {
            let samples = (0..j)
                .map(|s| {
                    let row = a * j + s;
                    y[row * t..(row + 1) * t].to_vec()
                })
                .collect();
            TrajectoryPrediction::from_samples(patient.id, arm, base_seed, times.to_vec(), samples)
        })
        .collect()
}

/// Single-arm convenience over [`predict_patient`].
pub fn predict_trajectory(
    params: &ParamBundle,
    patient: &ObservedPatient,
    arm: usize,
    times: &[f64],
    j: usize,
    base_seed: u64,
    solver: &SolverConfig,
) -> Result<TrajectoryPrediction, ModelError> {
    Ok(predict_patient(params, patient, &[arm], times, j, base_seed, solver)?
        .pop()
        .expect("one arm requested"))
}

/// Output times for a patient: the visit schedule merged with the
/// patient's own visit times.
pub fn prediction_times(schedule: &[f64], patient: &ObservedPatient) -> Vec<f64> {
    let mut times: Vec<f64> = schedule.iter().copied().chain(patient.visits.iter().map(|v| v.t)).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    times
}

/// Request for one patient in [`predict_cohort`].
pub struct PatientRequest<'a> {
    pub patient: &'a ObservedPatient,
    pub params: &'a ParamBundle,
    pub arms: Vec<usize>,
    pub times: Vec<f64>,
}

/// Runs [`predict_patient`] for every request, base seed derived from
/// `seed` and the patient id. Results keep request order.
pub fn predict_cohort(
    requests: &[PatientRequest<'_>],
    j: usize,
    seed: u64,
    solver: &SolverConfig,
) -> Result<Vec<Vec<TrajectoryPrediction>>, ModelError> {
    requests
        .par_iter()
        .map(|r| {
            predict_patient(
                r.params,
                r.patient,
                &r.arms,
                &r.times,
                j,
                patient_seed(seed, r.patient.id),
                solver,
            )
        })
        .collect()
}

/// One line of a prediction file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub patient_id: u32,
    pub arm: usize,
    pub arm_name: String,
    /// Outer fold whose model produced this record.
    pub fold: usize,
    pub base_seed: u64,
    pub times: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// `None` when `J < 2`.
    pub confidence: Option<f64>,
}

impl PredictionRecord {
    pub fn new(pred: TrajectoryPrediction, arm_name: &str, fold: usize) -> Self {
        let confidence = patient_confidence(&pred).ok();
        Self {
            patient_id: pred.patient_id,
            arm: pred.arm,
            arm_name: arm_name.to_string(),
            fold,
            base_seed: pred.base_seed,
            times: pred.times,
            samples: pred.samples,
            mean: pred.mean,
            variance: pred.variance,
            confidence,
        }
    }

    pub fn prediction(&self) -> TrajectoryPrediction {
        TrajectoryPrediction {
            patient_id: self.patient_id,
            arm: self.arm,
            base_seed: self.base_seed,
            times: self.times.clone(),
            samples: self.samples.clone(),
            mean: self.mean.clone(),
            variance: self.variance.clone(),
        }
    }
}

pub fn predictions_to_jsonl(records: &[PredictionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRecord>, ModelError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let de = &mut serde_json::Deserializer::from_str(line);
            let rec: PredictionRecord = serde_path_to_error::deserialize(de).map_err(|e| ModelError::Record {
                line: i + 1,
                message: e.to_string(),
            })?;
            let t = rec.times.len();
            let consistent = !rec.samples.is_empty()
                && rec.samples.iter().all(|s| s.len() == t)
                && rec.mean.len() == t
                && rec.variance.len() == t;
            if !consistent {
                return Err(ModelError::Record {
                    line: i + 1,
                    message: "samples, mean and variance must match the time list".into(),
                });
            }
            Ok(rec)
        })
        .collect()
}

/// Records keyed by `(patient, arm)`.
pub fn index_predictions(records: &[PredictionRecord]) -> BTreeMap<(u32, usize), &PredictionRecord> {
    records.iter().map(|r| ((r.patient_id, r.arm), r)).collect()
}
