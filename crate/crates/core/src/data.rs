//! Synthetic randomized-trial cohorts with known potential outcomes.
//!
//! Each patient carries a latent severity and an image-only responsiveness
//! marker. Severity drives the baseline covariates, the rendered volume and
//! the untreated progression; the marker (together with age) decides how
//! strongly an active arm slows that progression. Untreated trajectories
//! follow a damped drift plus Ornstein-Uhlenbeck noise, which is shared by
//! all potential outcomes of a patient so that the true effect of an arm is
//! noise-free. Only the assigned arm is observed, at jittered visits.
//!
//! Hidden ground truth lives in [`PatientRecord`] and is stripped by
//! [`Dataset::observed`]; modelling and training code only ever sees
//! [`ObservedCohort`].

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: &str = "synthrct-1";
/// Follow-up horizon in weeks.
pub const HORIZON_WEEKS: f64 = 96.0;
/// Time constant of the damped untreated progression, in weeks.
const PROGRESSION_TAU_WEEKS: f64 = 96.0;
/// Number of tabular covariates fed to the tabular encoder.
pub const TABULAR_WIDTH: usize = 5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("line {line}: malformed record at `{field}`: {message}")]
    Malformed {
        line: usize,
        field: String,
        message: String,
    },
    #[error("truncated file: incomplete record starting at byte offset {offset}")]
    Truncated { offset: usize },
    #[error("unsupported dataset version `{found}` (expected `{SCHEMA_VERSION}`)")]
    Version { found: String },
    #[error("line {line}: invalid value for `{field}`: {reason}")]
    Invalid {
        line: usize,
        field: String,
        reason: String,
    },
}

/// Nearest multiple of 0.5 within [0, 10]; x.25 and x.75 round up.
pub fn quantize_edss(raw: f64) -> f64 {
    ((raw * 2.0 + 0.5).floor() / 2.0).clamp(0.0, 10.0)
}

pub fn is_valid_edss(v: f64) -> bool {
    (0.0..=10.0).contains(&v) && (v * 2.0).fract() == 0.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub name: String,
    /// Fraction of untreated progression removed in a full responder.
    #[serde(default)]
    pub effect: f64,
    /// Fraction of the cohort that responds to this arm.
    #[serde(default)]
    pub responder_fraction: f64,
    #[serde(default)]
    pub placebo: bool,
}

fn default_spacing() -> f64 {
    12.0
}
fn default_jitter() -> f64 {
    2.0
}
fn default_dropout() -> f64 {
    0.1
}
fn default_noise_sd() -> f64 {
    0.3
}
fn default_noise_tau() -> f64 {
    24.0
}
fn default_volume_noise() -> f64 {
    0.05
}
fn default_volume_shape() -> [usize; 3] {
    [8, 8, 8]
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortConfig {
    pub n_per_arm: usize,
    pub arms: Vec<ArmConfig>,
    pub seed: u64,
    #[serde(default = "default_spacing")]
    pub visit_spacing_weeks: f64,
    #[serde(default = "default_jitter")]
    pub visit_jitter_weeks: f64,
    #[serde(default = "default_dropout")]
    pub visit_dropout: f64,
    /// Stationary standard deviation of the trajectory noise (EDSS points).
    #[serde(default = "default_noise_sd")]
    pub noise_sd: f64,
    /// Mean-reversion time of the trajectory noise, in weeks.
    #[serde(default = "default_noise_tau")]
    pub noise_timescale_weeks: f64,
    #[serde(default = "default_volume_noise")]
    pub volume_noise: f64,
    #[serde(default = "default_volume_shape")]
    pub volume_shape: [usize; 3],
    #[serde(default = "default_true")]
    pub responder_analysis: bool,
}

impl CohortConfig {
    /// Two placebo arms and three active arms (high, moderate and null
    /// effect), 150 patients each.
    pub fn default_cohort(seed: u64) -> Self {
        let arm = |name: &str, effect: f64, fraction: f64, placebo: bool| ArmConfig {
            name: name.into(),
            effect,
            responder_fraction: fraction,
            placebo,
        };
        Self {
            n_per_arm: 150,
            arms: vec![
                arm("placebo", 0.0, 0.0, true),
                arm("placebo_b", 0.0, 0.0, true),
                arm("high", 0.9, 0.5, false),
                arm("moderate", 0.5, 0.4, false),
                arm("null", 0.0, 0.0, false),
            ],
            seed,
            visit_spacing_weeks: default_spacing(),
            visit_jitter_weeks: default_jitter(),
            visit_dropout: default_dropout(),
            noise_sd: default_noise_sd(),
            noise_timescale_weeks: default_noise_tau(),
            volume_noise: default_volume_noise(),
            volume_shape: default_volume_shape(),
            responder_analysis: true,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |field: &str, reason: &str| {
            Err(DataError::Config {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if self.n_per_arm < 4 {
            return bad("n_per_arm", "must be at least 4");
        }
        if self.arms.is_empty() {
            return bad("arms", "at least one arm is required");
        }
        for (i, arm) in self.arms.iter().enumerate() {
            if arm.name.trim().is_empty() {
                return bad(&format!("arms[{i}].name"), "must be non-empty");
            }
            if self.arms[..i].iter().any(|a| a.name == arm.name) {
                return bad(&format!("arms[{i}].name"), "duplicate arm name");
            }
            if !arm.effect.is_finite() {
                return bad(&format!("arms[{i}].effect"), "must be finite");
            }
            if !(0.0..=1.0).contains(&arm.responder_fraction) {
                return bad(&format!("arms[{i}].responder_fraction"), "must lie in [0, 1]");
            }
        }
        if !(self.visit_spacing_weeks > 0.0 && self.visit_spacing_weeks <= HORIZON_WEEKS) {
            return bad("visit_spacing_weeks", "must lie in (0, 96]");
        }
        if !(self.visit_jitter_weeks >= 0.0 && self.visit_jitter_weeks < self.visit_spacing_weeks / 2.0)
        {
            return bad("visit_jitter_weeks", "must lie in [0, spacing / 2)");
        }
        if !(0.0..=1.0).contains(&self.visit_dropout) {
            return bad("visit_dropout", "must lie in [0, 1]");
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad("noise_sd", "must be finite and non-negative");
        }
        if !(self.noise_timescale_weeks > 0.0 && self.noise_timescale_weeks.is_finite()) {
            return bad("noise_timescale_weeks", "must be positive");
        }
        if !(self.volume_noise >= 0.0 && self.volume_noise.is_finite()) {
            return bad("volume_noise", "must be finite and non-negative");
        }
        if self.volume_shape.iter().any(|&d| d == 0) {
            return bad("volume_shape", "dimensions must be positive");
        }
        Ok(())
    }

    /// Scheduled visit times k·spacing within the horizon.
    pub fn schedule(&self) -> Vec<f64> {
        let n = (HORIZON_WEEKS / self.visit_spacing_weeks + 1e-9).floor() as usize;
        (1..=n).map(|k| k as f64 * self.visit_spacing_weeks).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmInfo {
    pub name: String,
    pub placebo: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub version: String,
    pub seed: u64,
    pub config: CohortConfig,
    pub arms: Vec<ArmInfo>,
    pub n_patients: usize,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Volume {
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Covariates {
    pub age: f64,
    /// 1 = female.
    pub sex: f64,
    pub functional_score: f64,
    /// T2 lesion volume (ml).
    pub lesion_volume: f64,
    pub baseline_edss: f64,
}

impl Covariates {
    /// Roughly standardized encoder inputs.
    pub fn features(&self) -> [f64; TABULAR_WIDTH] {
        [
            (self.age - 40.0) / 10.0,
            self.sex - 0.5,
            self.functional_score - 1.5,
            (self.lesion_volume.max(1e-3).ln() - 2.3) / 0.6,
            (self.baseline_edss - 3.0) / 1.5,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Visit {
    /// Weeks since baseline.
    pub t: f64,
    pub edss: f64,
}

/// Potential outcomes known only to the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub severity: f64,
    /// Per-arm responsiveness in [0, 1].
    pub responsiveness: Vec<f64>,
    /// Union of the nominal schedule and the visit times.
    pub times: Vec<f64>,
    /// Per arm, unquantized EDSS at `times`.
    pub potential: Vec<Vec<f64>>,
    /// Per arm, mean over the nominal schedule of (arm − untreated).
    pub true_ite: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientRecord {
    pub id: u32,
    pub arm: usize,
    pub volume: Volume,
    pub covariates: Covariates,
    pub visits: Vec<Visit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hidden: Option<GroundTruth>,
}

impl PatientRecord {
    pub fn new(
        id: u32,
        arm: usize,
        volume: Volume,
        covariates: Covariates,
        visits: Vec<Visit>,
        hidden: Option<GroundTruth>,
    ) -> Self {
        Self {
            id,
            arm,
            volume,
            covariates,
            visits,
            hidden,
        }
    }

    pub fn ground_truth(&self) -> Option<&GroundTruth> {
        self.hidden.as_ref()
    }

    pub fn observed(&self) -> ObservedPatient {
        ObservedPatient {
            id: self.id,
            arm: self.arm,
            volume: self.volume.clone(),
            covariates: self.covariates,
            visits: self.visits.clone(),
        }
    }
}

/// A patient as visible to modelling code: no potential outcomes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ObservedPatient {
    pub id: u32,
    pub arm: usize,
    pub volume: Volume,
    pub covariates: Covariates,
    pub visits: Vec<Visit>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservedCohort {
    pub arms: Vec<ArmInfo>,
    pub patients: Vec<ObservedPatient>,
}

impl ObservedCohort {
    pub fn n_arms(&self) -> usize {
        self.arms.len()
    }

    pub fn arm_index(&self, name: &str) -> Option<usize> {
        self.arms.iter().position(|a| a.name == name)
    }

    /// First placebo arm, the default comparator.
    pub fn control_arm(&self) -> Option<usize> {
        self.arms.iter().position(|a| a.placebo)
    }

    pub fn subset(&self, ids: &[u32]) -> ObservedCohort {
        let patients = ids
            .iter()
            .filter_map(|id| self.patients.iter().find(|p| p.id == *id).cloned())
            .collect();
        ObservedCohort {
            arms: self.arms.clone(),
            patients,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub patients: Vec<PatientRecord>,
}

impl Dataset {
    pub fn observed(&self) -> ObservedCohort {
        ObservedCohort {
            arms: self.meta.arms.clone(),
            patients: self.patients.iter().map(PatientRecord::observed).collect(),
        }
    }

    pub fn patient(&self, id: u32) -> Option<&PatientRecord> {
        self.patients.iter().find(|p| p.id == id)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn progression_shape(t: f64) -> f64 {
    (1.0 - (-t / PROGRESSION_TAU_WEEKS).exp()) / (1.0 - (-HORIZON_WEEKS / PROGRESSION_TAU_WEEKS).exp())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Latent {
    severity: f64,
    marker: f64,
    age_z: f64,
    score: f64,
}

fn render_volume(cfg: &CohortConfig, latent: &Latent, rng: &mut ChaCha8Rng) -> Volume {
    let [d, h, w] = cfg.volume_shape;
    let centre = [
        (d as f64 - 1.0) / 2.0 + 0.3 * normal(rng),
        (h as f64 - 1.0) / 2.0 + 0.3 * normal(rng),
        (w as f64 - 1.0) / 2.0 + 0.3 * normal(rng),
    ];
    let radius = (1.6 + 0.5 * latent.marker).clamp(0.8, 3.0);
    let intensity = 1.0 + 0.35 * latent.severity;
    let mut data = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let r2 = (z as f64 - centre[0]).powi(2)
                    + (y as f64 - centre[1]).powi(2)
                    + (x as f64 - centre[2]).powi(2);
                let v = intensity * (-r2 / (2.0 * radius * radius)).exp();
                data.push(v + cfg.volume_noise * normal(rng));
            }
        }
    }
    Volume {
        shape: cfg.volume_shape,
        data,
    }
}

fn sample_visits(cfg: &CohortConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let schedule = cfg.schedule();
    let times: Vec<f64> = schedule
        .iter()
        .map(|&t| {
            let jitter = if cfg.visit_jitter_weeks > 0.0 {
                rng.gen_range(-cfg.visit_jitter_weeks..=cfg.visit_jitter_weeks)
            } else {
                0.0
            };
            // whole days
            (((t + jitter) * 7.0).round() / 7.0).clamp(1.0 / 7.0, HORIZON_WEEKS)
        })
        .collect();
    let mut kept: Vec<f64> = times
        .iter()
        .copied()
        .filter(|_| rng.gen::<f64>() >= cfg.visit_dropout)
        .collect();
    if kept.is_empty() {
        kept.push(*times.last().expect("schedule is non-empty"));
    }
    kept.dedup();
    kept
}

/// Exact Ornstein-Uhlenbeck sample path at sorted times, starting from 0 at t = 0.
fn ou_path(times: &[f64], sd: f64, tau: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut prev_t = 0.0;
    let mut x = 0.0;
    times
        .iter()
        .map(|&t| {
            let decay = (-(t - prev_t) / tau).exp();
            x = x * decay + sd * (1.0 - decay * decay).sqrt() * normal(rng);
            prev_t = t;
            x
        })
        .collect()
}

fn merge_times(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = a.iter().chain(b).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    all
}

/// Simulates a randomized cohort. Arm assignment is a seeded shuffle of a
/// balanced allocation, independent of every covariate.
pub fn generate_cohort(cfg: &CohortConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_arms = cfg.arms.len();
    let n = cfg.n_per_arm * n_arms;

    let mut allocation: Vec<usize> = (0..n).map(|i| i % n_arms).collect();
    allocation.shuffle(&mut rng);

    let latents: Vec<Latent> = (0..n)
        .map(|_| {
            let severity = normal(&mut rng);
            let marker = normal(&mut rng);
            let age_z = normal(&mut rng);
            let score = 0.9 * marker - 0.5 * age_z + 0.2 * normal(&mut rng);
            Latent {
                severity,
                marker,
                age_z,
                score,
            }
        })
        .collect();

    // Per-arm responder threshold at the empirical (1 − fraction) quantile.
    let mut sorted_scores: Vec<f64> = latents.iter().map(|l| l.score).collect();
    sorted_scores.sort_by(f64::total_cmp);
    let responsiveness = |arm: &ArmConfig, score: f64| -> f64 {
        if arm.responder_fraction <= 0.0 {
            return 0.0;
        }
        if arm.responder_fraction >= 1.0 {
            return 1.0;
        }
        let k = ((1.0 - arm.responder_fraction) * n as f64).floor() as usize;
        let threshold = sorted_scores[k.min(n - 1)];
        sigmoid((score - threshold) / 0.15)
    };

    let schedule = cfg.schedule();
    let mut patients = Vec::with_capacity(n);
    for (i, latent) in latents.iter().enumerate() {
        let r = latent.severity;
        let age = (40.0 + 9.0 * latent.age_z).clamp(18.0, 65.0);
        let sex = if rng.gen::<f64>() < 0.65 { 1.0 } else { 0.0 };
        let baseline_raw = (3.0 + 1.2 * r + 0.4 * normal(&mut rng)).clamp(0.0, 8.0);
        let covariates = Covariates {
            age,
            sex,
            functional_score: (1.5 + 0.8 * r + 0.5 * normal(&mut rng)).max(0.0),
            lesion_volume: (2.3 + 0.5 * r + 0.3 * normal(&mut rng)).exp(),
            baseline_edss: quantize_edss(baseline_raw),
        };
        let progression = (1.2 + 0.7 * r + 0.2 * normal(&mut rng)).max(0.0);
        let volume = render_volume(cfg, latent, &mut rng);
        let visit_times = sample_visits(cfg, &mut rng);
        let times = merge_times(&schedule, &visit_times);
        let noise_sd = cfg.noise_sd * (0.4 * r).exp();
        let noise = ou_path(&times, noise_sd, cfg.noise_timescale_weeks, &mut rng);

        let rho: Vec<f64> = cfg
            .arms
            .iter()
            .map(|arm| responsiveness(arm, latent.score))
            .collect();
        let potential: Vec<Vec<f64>> = cfg
            .arms
            .iter()
            .zip(&rho)
            .map(|(arm, rho)| {
                let p = progression * (1.0 - arm.effect * rho);
                times
                    .iter()
                    .zip(&noise)
                    .map(|(&t, &e)| baseline_raw + p * progression_shape(t) + e)
                    .collect()
            })
            .collect();
        let true_ite = cfg
            .arms
            .iter()
            .zip(&rho)
            .map(|(arm, rho)| {
                let mean_shape = schedule.iter().map(|&t| progression_shape(t)).sum::<f64>()
                    / schedule.len() as f64;
                -progression * arm.effect * rho * mean_shape
            })
            .collect();

        let arm = allocation[i];
        let visits = visit_times
            .iter()
            .map(|&t| {
                let k = times.iter().position(|&x| x == t).expect("visit is in the merged grid");
                Visit {
                    t,
                    edss: quantize_edss(potential[arm][k]),
                }
            })
            .collect();
        patients.push(PatientRecord {
            id: i as u32,
            arm,
            volume,
            covariates,
            visits,
            hidden: Some(GroundTruth {
                severity: r,
                responsiveness: rho,
                times,
                potential,
                true_ite,
            }),
        });
    }

    let mut warnings = Vec::new();
    if cfg.responder_analysis && cfg.arms.iter().all(|a| a.effect == 0.0) {
        warnings.push(
            "all arm effects are zero: responder analysis has no true responders".to_string(),
        );
    }
    if !cfg.arms.iter().any(|a| a.placebo) {
        warnings.push("no placebo arm: counterfactual comparisons need a control".to_string());
    }
    Ok(Dataset {
        meta: DatasetMeta {
            version: SCHEMA_VERSION.into(),
            seed: cfg.seed,
            config: cfg.clone(),
            arms: cfg
                .arms
                .iter()
                .map(|a| ArmInfo {
                    name: a.name.clone(),
                    placebo: a.placebo,
                })
                .collect(),
            n_patients: n,
            warnings,
        },
        patients,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Serializes to JSON-lines: one metadata line, then one line per patient.
pub fn to_jsonl(dataset: &Dataset) -> String {
    let mut out = serde_json::to_string(&dataset.meta).expect("metadata serializes");
    out.push('\n');
    for p in &dataset.patients {
        out.push_str(&serde_json::to_string(p).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(to_jsonl(dataset).as_bytes())
        .map_err(io_err(path))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_jsonl(&text)
}

fn parse_line<T: serde::de::DeserializeOwned>(line: &str, number: usize) -> Result<T, DataError> {
    let mut de = serde_json::Deserializer::from_str(line);
    serde_path_to_error::deserialize(&mut de).map_err(|e| DataError::Malformed {
        line: number,
        field: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

pub fn parse_jsonl(text: &str) -> Result<Dataset, DataError> {
    let mut lines = Vec::new();
    let mut offset = 0;
    for chunk in text.split_inclusive('\n') {
        if !chunk.ends_with('\n') {
            return Err(DataError::Truncated { offset });
        }
        lines.push((offset, chunk.trim_end()));
        offset += chunk.len();
    }
    let Some(&(_, header)) = lines.first() else {
        return Err(DataError::Truncated { offset: 0 });
    };
    let version: serde_json::Value = parse_line(header, 1)?;
    let found = version
        .get("version")
        .and_then(|v| v.as_str())
        .unwrap_or("<missing>");
    if found != SCHEMA_VERSION {
        return Err(DataError::Version {
            found: found.to_string(),
        });
    }
    let meta: DatasetMeta = parse_line(header, 1)?;
    let mut patients = Vec::with_capacity(lines.len().saturating_sub(1));
    for (i, &(_, line)) in lines.iter().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let record: PatientRecord = parse_line(line, i + 1)?;
        validate_record(&record, meta.arms.len(), i + 1)?;
        patients.push(record);
    }
    if patients.len() != meta.n_patients {
        return Err(DataError::Invalid {
            line: 1,
            field: "n_patients".into(),
            reason: format!("header declares {}, file holds {}", meta.n_patients, patients.len()),
        });
    }
    Ok(Dataset { meta, patients })
}

fn validate_record(p: &PatientRecord, n_arms: usize, line: usize) -> Result<(), DataError> {
    let invalid = |field: &str, reason: String| {
        Err(DataError::Invalid {
            line,
            field: field.into(),
            reason,
        })
    };
    if p.arm >= n_arms {
        return invalid("arm", format!("arm {} out of range for {n_arms} arms", p.arm));
    }
    let numel: usize = p.volume.shape.iter().product();
    if numel == 0 || numel != p.volume.data.len() {
        return invalid(
            "volume",
            format!("shape {:?} holds {numel} voxels, data has {}", p.volume.shape, p.volume.data.len()),
        );
    }
    if !is_valid_edss(p.covariates.baseline_edss) {
        return invalid("covariates.baseline_edss", format!("{} is not an EDSS step", p.covariates.baseline_edss));
    }
    let mut prev = 0.0;
    for (k, v) in p.visits.iter().enumerate() {
        if !(v.t > prev && v.t <= HORIZON_WEEKS) {
            return invalid(
                &format!("visits[{k}].t"),
                format!("{} must lie in (0, 96] and increase", v.t),
            );
        }
        if !is_valid_edss(v.edss) {
            return invalid(&format!("visits[{k}].edss"), format!("{} is not an EDSS step", v.edss));
        }
        prev = v.t;
    }
    Ok(())
}
