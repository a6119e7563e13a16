//! Balanced MSE, Adam, nested cross-validation with crogged predictions,
//! and factual evaluation metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tnsde_autodiff::{AdError, NodeId, Tape, Tensor};

use crate::causal::retained_count;
use crate::data::{ObservedCohort, ObservedPatient, HORIZON_WEEKS};
use crate::model::{
    factual_rollout, patient_seed, predict_patient, prediction_times, ModelError, PredictionRecord, SolverConfig,
};
use crate::nets::{BoundParams, ModelSpec, NetError, ParamBundle};

/// Visits later than this are excluded from evaluation.
pub const EVAL_LIMIT_WEEKS: f64 = HORIZON_WEEKS + 6.0;
pub const BIN_WEEKS: f64 = 12.0;
pub const DEFAULT_RETENTIONS: [f64; 8] = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("balanced MSE needs at least 2 predictions, got {0}")]
    BatchTooSmall(usize),
    #[error("{0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("noise scale must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("stratification failed: arm `{arm}` has {count} patients, need at least {needed}")]
    Stratification { arm: String, count: usize, needed: usize },
    #[error("predictions missing for {} (patient, arm) pairs, first {:?}", .0.len(), .0.first())]
    Coverage(Vec<(u32, usize)>),
    #[error("patient {patient}: no prediction at visit t = {t}")]
    MissingVisit { patient: u32, t: f64 },
    #[error("retained set is empty")]
    EmptyRetention,
    #[error("retention list must include 1.0")]
    NoFullRetention,
    #[error("full-cohort MSE is zero; normalized curve undefined")]
    ZeroBaseline,
}

fn check_batch(pred_len: usize, targets: &[f64], sigma: f64) -> Result<(), TrainError> {
    if pred_len != targets.len() {
        return Err(TrainError::LengthMismatch(pred_len, targets.len()));
    }
    if pred_len < 2 {
        return Err(TrainError::BatchTooSmall(pred_len));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(TrainError::InvalidSigma(sigma));
    }
    Ok(())
}

/// Direct evaluation of the batch-contrastive balanced MSE:
/// `mean_i −log softmax_k(−(ŷ_i − y_k)² / 2σ²)[k = i]`.
pub fn balanced_mse_value(pred: &[f64], targets: &[f64], sigma: f64) -> Result<f64, TrainError> {
    check_batch(pred.len(), targets, sigma)?;
    let c = 1.0 / (2.0 * sigma * sigma);
    let n = pred.len();
    let mut total = 0.0;
    for i in 0..n {
        let logits: Vec<f64> = targets.iter().map(|y| -(pred[i] - y).powi(2) * c).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    Ok(total / n as f64)
}

/// Balanced MSE on the tape; `pred` is `[N, 1]`.
pub fn balanced_mse(tape: &mut Tape, pred: NodeId, targets: &[f64], sigma: f64) -> Result<NodeId, TrainError> {
    let shape = tape.shape(pred).to_vec();
    if shape.len() != 2 || shape[1] != 1 {
        return Err(TrainError::Autodiff(AdError::InvalidShape {
            op: "balanced_mse",
            detail: format!("predictions must be [N, 1], got {shape:?}"),
        }));
    }
    let n = shape[0];
    check_batch(n, targets, sigma)?;
    let c = -1.0 / (2.0 * sigma * sigma);
    let ones = tape.constant(Tensor::matrix(1, n, vec![1.0; n])?);
    let rows = tape.matmul(pred, ones)?;
    let grid: Vec<f64> = (0..n).flat_map(|_| targets.iter().copied()).collect();
    let grid = tape.constant(Tensor::matrix(n, n, grid)?);
    let diff = tape.sub(rows, grid)?;
    let sq = tape.square(diff)?;
    let logits = tape.scale(sq, c)?;
    let lse = tape.log_sum_exp(logits)?;
    let flat = tape.reshape(pred, vec![n])?;
    let own = tape.constant(Tensor::vector(targets.to_vec())?);
    let d = tape.sub(flat, own)?;
    let dsq = tape.square(d)?;
    let diag = tape.scale(dsq, c)?;
    let per = tape.sub(lse, diag)?;
    Ok(tape.mean(per)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub steps: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    pub skipped: u64,
}

impl AdamState {
    /// Applies one bias-corrected Adam update. A non-finite gradient skips
    /// the whole step; returns whether the step was applied.
    pub fn step(
        &mut self,
        params: &mut ParamBundle,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        cfg: &AdamConfig,
    ) -> bool {
        if let Some((name, _)) = grads.iter().find(|(_, g)| g.data().iter().any(|v| !v.is_finite())) {
            self.skipped += 1;
            warn!("non-finite gradient in `{name}`; skipping optimizer step {}", self.steps + 1);
            return false;
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        for (name, p) in params.tensors_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let updated = p.update(|i, x| {
                let gi = g.data()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let (mh, vh) = (m[i] / c1, v[i] / c2);
                x - lr * mh / (vh.sqrt() + cfg.eps)
            });
            updated.expect("finite gradients give finite updates");
        }
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    pub lr: f64,
    pub sigma_b: f64,
}

pub fn default_grid() -> Vec<HyperParams> {
    let mut grid = Vec::new();
    for lr in [3e-3, 1e-2] {
        for sigma_b in [0.3, 0.5] {
            grid.push(HyperParams { lr, sigma_b });
        }
    }
    grid
}

fn default_val_samples() -> usize {
    4
}

fn default_calibration_weight() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    /// Brownian samples averaged for validation predictions.
    #[serde(default = "default_val_samples")]
    pub val_samples: usize,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Weight of the diffusion calibration term; 0 trains on balanced MSE
    /// alone with one path per patient.
    #[serde(default = "default_calibration_weight")]
    pub calibration_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            patience: 20,
            batch_size: 32,
            val_samples: default_val_samples(),
            solver: SolverConfig::default(),
            adam: AdamConfig::default(),
            calibration_weight: default_calibration_weight(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.val_samples == 0 {
            return bad("val_samples must be at least 1");
        }
        if !(self.solver.step_weeks > 0.0 && self.solver.step_weeks.is_finite()) {
            return bad("solver.step_weeks must be positive");
        }
        if !(self.calibration_weight >= 0.0 && self.calibration_weight.is_finite()) {
            return bad("calibration_weight must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: ParamBundle,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
    pub skipped_steps: u64,
}

fn decoder_bias_name(spec: &ModelSpec) -> String {
    format!("decoder.l{}.b", spec.decoder_mlp().layers() - 1)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    patient_seed(seed, u32::MAX - epoch as u32)
}

/// Salt of the second calibration path of each patient.
const PAIR_SALT: u64 = 0x5851_F42D_4C95_7F2D;

/// Minibatch training loss.
///
/// With `calibration_weight = 0` this is the balanced MSE of one rollout per
/// patient. Otherwise each patient is rolled out on two paths, the balanced
/// MSE is taken on the pair mean, and
/// `calibration_weight · mean_v (s²_v − r²_v)²` is added, where `s²_v` is
/// the unbiased two-sample variance at visit `v` and `r²_v` the squared
/// residual of the pair mean, held constant. Only the sampled spread is
/// pulled towards the residuals. Returns the loss node, or `None` when the
/// batch has fewer than two visits.
pub fn training_loss(
    tape: &mut Tape,
    bound: &BoundParams<'_>,
    params: &ParamBundle,
    batch: &[&ObservedPatient],
    seeds: &[u64],
    hyper: HyperParams,
    cfg: &TrainConfig,
) -> Result<Option<NodeId>, TrainError> {
    if cfg.calibration_weight == 0.0 {
        let (pred, targets) = factual_rollout(tape, bound, params, batch, seeds, &cfg.solver)?;
        if targets.len() < 2 {
            return Ok(None);
        }
        return balanced_mse(tape, pred, &targets, hyper.sigma_b).map(Some);
    }
    let pair: Vec<u64> = seeds.iter().copied().chain(seeds.iter().map(|s| s ^ PAIR_SALT)).collect();
    let (pred, targets) = factual_rollout(tape, bound, params, batch, &pair, &cfg.solver)?;
    let v = targets.len() / 2;
    if v < 2 {
        return Ok(None);
    }
    let targets = &targets[..v];
    let a = tape.slice(pred, 0, 0, v)?;
    let b = tape.slice(pred, 0, v, v)?;
    let sum = tape.add(a, b)?;
    let mean = tape.scale(sum, 0.5)?;
    let fit_loss = balanced_mse(tape, mean, targets, hyper.sigma_b)?;

    let resid2: Vec<f64> = tape
        .value(mean)
        .data()
        .iter()
        .zip(targets)
        .map(|(m, y)| (m - y).powi(2))
        .collect();
    let cal = calibration_loss(tape, a, b, &resid2)?;
    let cal = tape.scale(cal, cfg.calibration_weight)?;
    Ok(Some(tape.add(fit_loss, cal)?))
}

/// `mean_v ((a_v − b_v)²/2 − resid2_v)²` for paired `[V, 1]` samples `a`
/// and `b`; `resid2` enters as a constant.
pub fn calibration_loss(tape: &mut Tape, a: NodeId, b: NodeId, resid2: &[f64]) -> Result<NodeId, TrainError> {
    let resid2 = tape.constant(Tensor::matrix(resid2.len(), 1, resid2.to_vec())?);
    let d = tape.sub(a, b)?;
    let d2 = tape.square(d)?;
    let spread = tape.scale(d2, 0.5)?;
    let gap = tape.sub(spread, resid2)?;
    let gap2 = tape.square(gap)?;
    Ok(tape.mean(gap2)?)
}

/// Trains a fresh bundle on `train`. With `val`, keeps the parameters of
/// the epoch with the lowest validation MSE and stops after `patience`
/// epochs without improvement; without it, runs exactly `epochs` epochs.
pub fn fit(
    train: &[&ObservedPatient],
    val: Option<&[&ObservedPatient]>,
    spec: &ModelSpec,
    hyper: HyperParams,
    cfg: &TrainConfig,
) -> Result<FitResult, TrainError> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(TrainError::BatchTooSmall(train.len()));
    }
    let mut params = ParamBundle::init(spec, cfg.seed)?;
    let visits: Vec<f64> = train.iter().flat_map(|p| p.visits.iter().map(|v| v.edss)).collect();
    let mean_edss = visits.iter().sum::<f64>() / visits.len().max(1) as f64;
    params.set(&decoder_bias_name(spec), Tensor::vector(vec![mean_edss])?)?;

    let mut adam = AdamState::default();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamBundle)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let eseed = epoch_seed(cfg.seed, epoch);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(eseed));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&ObservedPatient> = chunk.iter().map(|&i| train[i]).collect();
            let seeds: Vec<u64> = batch.iter().map(|p| patient_seed(eseed, p.id)).collect();
            let mut tape = Tape::new();
            let bound = params.bind_trainable(&mut tape);
            let Some(loss) = training_loss(&mut tape, &bound, &params, &batch, &seeds, hyper, cfg)? else {
                continue;
            };
            let grads = tape.backward(loss)?;
            let named = bound.named_grads(&grads);
            loss_sum += tape.value(loss).data()[0];
            batches += 1;
            drop(bound);
            adam.step(&mut params, &named, hyper.lr, &cfg.adam);
        }
        let train_loss = loss_sum / batches.max(1) as f64;
        let val_mse = match val {
            Some(v) if !v.is_empty() => Some(factual_mse(&params, v, cfg.val_samples, cfg.seed, &cfg.solver)?),
            _ => None,
        };
        debug!("epoch {epoch}: loss {train_loss:.4}, val {val_mse:?}");
        history.push(EpochStats {
            epoch,
            train_loss,
            val_mse,
        });
        if let Some(v) = val_mse {
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, params.clone()));
            } else if epoch - best.as_ref().expect("set").1 >= cfg.patience {
                debug!("early stop at epoch {epoch}");
                break;
            }
        }
    }
    let (best_epoch, params) = match best {
        Some((_, e, p)) => (e, p),
        None => (history.len(), params),
    };
    Ok(FitResult {
        params,
        best_epoch,
        history,
        skipped_steps: adam.skipped,
    })
}

/// Mean over patients of per-patient visit MSE, predicting each visit by
/// the mean of `j` sampled trajectories.
pub fn factual_mse(
    params: &ParamBundle,
    patients: &[&ObservedPatient],
    j: usize,
    seed: u64,
    solver: &SolverConfig,
) -> Result<f64, TrainError> {
    const CHUNK: usize = 64;
    let mut total = 0.0;
    for chunk in patients.chunks(CHUNK) {
        let mut sums: Option<Vec<f64>> = None;
        let mut targets = Vec::new();
        for s in 1..=j {
            let seeds: Vec<u64> = chunk.iter().map(|p| patient_seed(seed, p.id) ^ s as u64).collect();
            let mut tape = Tape::new();
            let bound = params.bind_frozen(&mut tape);
            let (pred, t) = factual_rollout(&mut tape, &bound, params, chunk, &seeds, solver)?;
            let values = tape.value(pred).data();
            match sums.as_mut() {
                None => sums = Some(values.to_vec()),
                Some(acc) => acc.iter_mut().zip(values).for_each(|(a, v)| *a += v),
            }
            targets = t;
        }
        let sums = sums.expect("j >= 1");
        let mut offset = 0;
        for p in chunk {
            let n = p.visits.len();
            let se: f64 = (0..n)
                .map(|k| (sums[offset + k] / j as f64 - targets[offset + k]).powi(2))
                .sum();
            total += se / n as f64;
            offset += n;
        }
    }
    Ok(total / patients.len() as f64)
}

/// Outer folds stratified by arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub folds: Vec<Vec<u32>>,
}

impl FoldPlan {
    /// Shuffles each arm with `seed` and deals its patients round-robin, the
    /// starting fold rotating between arms to balance fold sizes.
    pub fn stratified(cohort: &ObservedCohort, k: usize, seed: u64) -> Result<Self, TrainError> {
        if k < 2 {
            return Err(TrainError::Config("at least 2 folds required".into()));
        }
        let mut folds = vec![Vec::new(); k];
        let mut start = 0;
        for (arm, info) in cohort.arms.iter().enumerate() {
            let mut ids: Vec<u32> = cohort.patients.iter().filter(|p| p.arm == arm).map(|p| p.id).collect();
            if ids.len() < k {
                return Err(TrainError::Stratification {
                    arm: info.name.clone(),
                    count: ids.len(),
                    needed: k,
                });
            }
            ids.sort_unstable();
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ (arm as u64).wrapping_mul(0x9E37_79B9)));
            for (i, id) in ids.into_iter().enumerate() {
                folds[(start + i) % k].push(id);
            }
            start += 1;
        }
        for f in &mut folds {
            f.sort_unstable();
        }
        Ok(Self { seed, folds })
    }

    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn fold_of(&self, id: u32) -> Option<usize> {
        self.folds.iter().position(|f| f.binary_search(&id).is_ok())
    }

    /// Every patient outside outer fold `outer`.
    pub fn training_ids(&self, outer: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = (0..self.k()).filter(|&f| f != outer).flat_map(|f| self.folds[f].clone()).collect();
        ids.sort_unstable();
        ids
    }

    /// Inner rotation `r` of outer fold `outer`: the `r`-th remaining fold
    /// validates, the others train.
    pub fn inner_split(&self, outer: usize, r: usize) -> (Vec<u32>, Vec<u32>) {
        let inner: Vec<usize> = (0..self.k()).filter(|&f| f != outer).collect();
        let val = self.folds[inner[r]].clone();
        let mut train: Vec<u32> = inner
            .iter()
            .filter(|&&f| f != inner[r])
            .flat_map(|&f| self.folds[f].clone())
            .collect();
        train.sort_unstable();
        (train, val)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvConfig {
    pub folds: usize,
    pub grid: Vec<HyperParams>,
    pub train: TrainConfig,
    /// Brownian samples per crogged prediction.
    pub predict_samples: usize,
    /// Seed of fold assignment and prediction paths.
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 4,
            grid: default_grid(),
            train: TrainConfig::default(),
            predict_samples: 30,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub hyper: HyperParams,
    /// Inner-validation MSE of each rotation.
    pub val_mse: Vec<f64>,
    pub mean_val_mse: f64,
    pub best_epochs: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub scores: Vec<GridScore>,
    pub chosen: Option<HyperParams>,
    pub final_epochs: usize,
    pub params: Option<ParamBundle>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct CvOutcome {
    pub plan: FoldPlan,
    pub folds: Vec<FoldResult>,
    /// Factual predictions for every outer-test patient of every fold that
    /// trained successfully.
    pub predictions: Vec<PredictionRecord>,
}

fn select<'a>(cohort: &'a ObservedCohort, ids: &[u32]) -> Vec<&'a ObservedPatient> {
    let set: BTreeSet<u32> = ids.iter().copied().collect();
    cohort.patients.iter().filter(|p| set.contains(&p.id)).collect()
}

fn run_fold(cohort: &ObservedCohort, plan: &FoldPlan, outer: usize, cfg: &CvConfig, spec: &ModelSpec) -> Result<FoldResult, TrainError> {
    let mut scores = Vec::new();
    let rotations = plan.k() - 1;
    for &hyper in &cfg.grid {
        let mut val_mse = Vec::new();
        let mut best_epochs = Vec::new();
        for r in 0..rotations {
            let (tr, va) = plan.inner_split(outer, r);
            let fit = fit(&select(cohort, &tr), Some(&select(cohort, &va)), spec, hyper, &cfg.train)?;
            let best = fit
                .history
                .iter()
                .find(|h| h.epoch == fit.best_epoch)
                .and_then(|h| h.val_mse)
                .expect("validation ran");
            val_mse.push(best);
            best_epochs.push(fit.best_epoch);
        }
        let mean_val_mse = val_mse.iter().sum::<f64>() / val_mse.len() as f64;
        info!("fold {outer}: lr {} sigma_b {} -> inner MSE {mean_val_mse:.4}", hyper.lr, hyper.sigma_b);
        scores.push(GridScore {
            hyper,
            val_mse,
            mean_val_mse,
            best_epochs,
        });
    }
    let chosen = scores
        .iter()
        .min_by(|a, b| a.mean_val_mse.total_cmp(&b.mean_val_mse))
        .expect("non-empty grid");
    let final_epochs = ((chosen.best_epochs.iter().sum::<usize>() as f64 / chosen.best_epochs.len() as f64).round()
        as usize)
        .max(1);
    let hyper = chosen.hyper;
    let train_cfg = TrainConfig {
        epochs: final_epochs,
        ..cfg.train.clone()
    };
    let fitted = fit(&select(cohort, &plan.training_ids(outer)), None, spec, hyper, &train_cfg)?;
    Ok(FoldResult {
        fold: outer,
        scores,
        chosen: Some(hyper),
        final_epochs,
        params: Some(fitted.params),
        error: None,
    })
}

/// Nested cross-validation: per outer fold, grid search on rotating inner
/// splits, retrain on all inner data with the chosen hyperparameters for
/// the mean best epoch count, then predict the outer test fold. A fold that
/// fails is reported and skipped.
pub fn run_nested_cv(
    cohort: &ObservedCohort,
    spec: &ModelSpec,
    cfg: &CvConfig,
    schedule: &[f64],
) -> Result<CvOutcome, TrainError> {
    if cfg.grid.is_empty() {
        return Err(TrainError::Config("hyperparameter grid is empty".into()));
    }
    if cfg.predict_samples == 0 {
        return Err(TrainError::Config("predict_samples must be at least 1".into()));
    }
    if cfg.folds < 3 {
        return Err(TrainError::Config("nested CV needs at least 3 folds".into()));
    }
    cfg.train.validate()?;
    let plan = FoldPlan::stratified(cohort, cfg.folds, cfg.seed)?;
    let mut folds = Vec::new();
    let mut predictions = Vec::new();
    for outer in 0..plan.k() {
        let result = run_fold(cohort, &plan, outer, cfg, spec).unwrap_or_else(|e| {
            warn!("fold {outer} failed: {e}");
            FoldResult {
                fold: outer,
                scores: Vec::new(),
                chosen: None,
                final_epochs: 0,
                params: None,
                error: Some(e.to_string()),
            }
        });
        if let Some(params) = &result.params {
            for p in select(cohort, &plan.folds[outer]) {
                let times = prediction_times(schedule, p);
                let seed = patient_seed(cfg.seed, p.id);
                let pred = predict_patient(params, p, &[p.arm], &times, cfg.predict_samples, seed, &cfg.train.solver)?;
                for tp in pred {
                    predictions.push(PredictionRecord::new(tp, &cohort.arms[p.arm].name, outer));
                }
            }
        }
        folds.push(result);
    }
    Ok(CvOutcome {
        plan,
        folds,
        predictions,
    })
}

/// Nearest 12-week mark in `[12, 96]`.
pub fn bin_week(t: f64) -> f64 {
    ((t / BIN_WEEKS).round() * BIN_WEEKS).clamp(BIN_WEEKS, HORIZON_WEEKS)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientError {
    pub patient_id: u32,
    pub arm: usize,
    pub fold: Option<usize>,
    pub mse: f64,
    pub n_visits: usize,
    pub confidence: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinMetric {
    pub arm: String,
    pub bin_week: f64,
    pub mse: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetric {
    pub fold: usize,
    pub n_patients: usize,
    pub mse: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub retention: f64,
    pub n_retained: usize,
    pub normalized_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub bins: Vec<BinMetric>,
    pub overall_mse: f64,
    pub se_patients: f64,
    /// Standard error of the per-fold means; `None` without fold labels.
    pub se_folds: Option<f64>,
    pub per_fold: Vec<FoldMetric>,
    pub per_patient: Vec<PatientError>,
    pub n_visits: usize,
    pub excluded_visits: usize,
    pub curve: Vec<CurvePoint>,
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Shared evaluation core: `predict(patient, t)` gives the point prediction
/// at a visit, `meta(patient)` the fold and confidence.
fn evaluate_with<P, M>(cohort: &ObservedCohort, mut predict: P, meta: M) -> Result<MetricTable, TrainError>
where
    P: FnMut(&ObservedPatient, f64) -> Result<f64, TrainError>,
    M: Fn(&ObservedPatient) -> (Option<usize>, Option<f64>),
{
    let mut patients: Vec<&ObservedPatient> = cohort.patients.iter().collect();
    patients.sort_by_key(|p| p.id);
    let mut bins: BTreeMap<(usize, u64), (f64, usize)> = BTreeMap::new();
    let mut per_patient = Vec::new();
    let (mut n_visits, mut excluded) = (0, 0);
    for p in patients {
        let mut se = 0.0;
        let mut n = 0;
        for v in &p.visits {
            if !(v.t > 0.0 && v.t <= EVAL_LIMIT_WEEKS) {
                excluded += 1;
                continue;
            }
            let err = (predict(p, v.t)? - v.edss).powi(2);
            let slot = bins.entry((p.arm, bin_week(v.t).to_bits())).or_insert((0.0, 0));
            slot.0 += err;
            slot.1 += 1;
            se += err;
            n += 1;
        }
        n_visits += n;
        if n == 0 {
            continue;
        }
        let (fold, confidence) = meta(p);
        per_patient.push(PatientError {
            patient_id: p.id,
            arm: p.arm,
            fold,
            mse: se / n as f64,
            n_visits: n,
            confidence,
        });
    }
    if per_patient.is_empty() {
        return Err(TrainError::EmptyRetention);
    }
    let mses: Vec<f64> = per_patient.iter().map(|e| e.mse).collect();
    let (overall_mse, se_patients) = mean_se(&mses);

    let mut fold_groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for e in &per_patient {
        if let Some(f) = e.fold {
            fold_groups.entry(f).or_default().push(e.mse);
        }
    }
    let per_fold: Vec<FoldMetric> = fold_groups
        .iter()
        .map(|(&fold, v)| FoldMetric {
            fold,
            n_patients: v.len(),
            mse: v.iter().sum::<f64>() / v.len() as f64,
        })
        .collect();
    let se_folds = (per_fold.len() >= 2).then(|| mean_se(&per_fold.iter().map(|f| f.mse).collect::<Vec<_>>()).1);

    let curve = if per_patient.iter().all(|e| e.confidence.is_some()) {
        let rows: Vec<(u32, f64, f64)> = per_patient
            .iter()
            .map(|e| (e.patient_id, e.mse, e.confidence.expect("checked")))
            .collect();
        normalized_mse_curve(&rows, &DEFAULT_RETENTIONS).unwrap_or_default()
    } else {
        Vec::new()
    };

    Ok(MetricTable {
        bins: bins
            .into_iter()
            .map(|((arm, week), (sum, n))| BinMetric {
                arm: cohort.arms[arm].name.clone(),
                bin_week: f64::from_bits(week),
                mse: sum / n as f64,
                n,
            })
            .collect(),
        overall_mse,
        se_patients,
        se_folds,
        per_fold,
        per_patient,
        n_visits,
        excluded_visits: excluded,
        curve,
    })
}

/// Factual metrics of pooled (crogged) predictions: each patient is scored
/// by the predicted mean of its assigned-arm record at every visit.
pub fn evaluate_factual(records: &[PredictionRecord], cohort: &ObservedCohort) -> Result<MetricTable, TrainError> {
    let index: BTreeMap<(u32, usize), &PredictionRecord> = records.iter().map(|r| ((r.patient_id, r.arm), r)).collect();
    let missing: Vec<(u32, usize)> = cohort
        .patients
        .iter()
        .filter(|p| !index.contains_key(&(p.id, p.arm)))
        .map(|p| (p.id, p.arm))
        .collect();
    if !missing.is_empty() {
        return Err(TrainError::Coverage(missing));
    }
    evaluate_with(
        cohort,
        |p, t| {
            let r = index[&(p.id, p.arm)];
            let k = r.times.iter().position(|&x| x == t).ok_or(TrainError::MissingVisit { patient: p.id, t })?;
            Ok(r.mean[k])
        },
        |p| {
            let r = index[&(p.id, p.arm)];
            (Some(r.fold), r.confidence)
        },
    )
}

/// Carry-forward baseline: baseline EDSS predicted at every visit.
pub fn carry_forward(cohort: &ObservedCohort, plan: Option<&FoldPlan>) -> Result<MetricTable, TrainError> {
    evaluate_with(cohort, |p, _| Ok(p.covariates.baseline_edss), |p| {
        (plan.and_then(|f| f.fold_of(p.id)), None)
    })
}

/// Cohort MSE over the most confident `r` fraction of patients divided by
/// the full-cohort MSE. `rows` are `(patient, mse, confidence)`; patients
/// tied with the last retained confidence are all retained.
pub fn normalized_mse_curve(rows: &[(u32, f64, f64)], retentions: &[f64]) -> Result<Vec<CurvePoint>, TrainError> {
    if !retentions.contains(&1.0) {
        return Err(TrainError::NoFullRetention);
    }
    if rows.is_empty() {
        return Err(TrainError::EmptyRetention);
    }
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));
    let retained_mse = |r: f64| -> (usize, f64) {
        let mut keep = retained_count(sorted.len(), r);
        let cutoff = sorted[keep - 1].2;
        while keep < sorted.len() && sorted[keep].2 == cutoff {
            keep += 1;
        }
        (keep, sorted[..keep].iter().map(|x| x.1).sum::<f64>() / keep as f64)
    };
    let (_, full) = retained_mse(1.0);
    if full == 0.0 {
        return Err(TrainError::ZeroBaseline);
    }
    retentions
        .iter()
        .map(|&r| {
            if !(r > 0.0 && r <= 1.0) {
                return Err(TrainError::Config(format!("retention {r} outside (0, 1]")));
            }
            let (n_retained, mse) = retained_mse(r);
            Ok(CurvePoint {
                retention: r,
                n_retained,
                normalized_mse: mse / full,
            })
        })
        .collect()
}

impl MetricTable {
    /// Columns: arm, bin_week, mse, n.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,bin_week,mse,n\n");
        for b in &self.bins {
            writeln!(out, "{},{},{},{}", b.arm, b.bin_week, b.mse, b.n).expect("writing to a String");
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "overall_mse": self.overall_mse,
            "se_patients": self.se_patients,
            "se_folds": self.se_folds,
            "n_patients": self.per_patient.len(),
            "n_visits": self.n_visits,
            "excluded_visits": self.excluded_visits,
            "per_fold": self.per_fold,
            "curve": self.curve,
        })
    }
}
