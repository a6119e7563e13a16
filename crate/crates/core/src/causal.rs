//! Treatment-effect estimands over paired trajectory predictions.
//!
//! Treated and control predictions for a patient must share times, sample
//! count and base seed, so sample `j` under both arms was driven by the same
//! Brownian path. Negative effects mean lower disability, i.e. benefit.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::TrajectoryPrediction;

#[derive(Debug, Error, PartialEq)]
pub enum CausalError {
    #[error("patient {patient}: predictions are not paired ({reason})")]
    Unpaired { patient: u32, reason: &'static str },
    #[error("patient {patient}: no prediction at t = {t}")]
    MissingTime { patient: u32, t: f64 },
    #[error("patient {0}: no control-arm prediction")]
    MissingControl(u32),
    #[error("patient {0}: no baseline EDSS")]
    MissingBaseline(u32),
    #[error("no timepoints to average over")]
    NoTimes,
    #[error("at least 2 samples required, got {0}")]
    TooFewSamples(usize),
    #[error("retained cohort has {0} patients; terciles need at least 3")]
    TooFewRetained(usize),
    #[error("retention {0} outside (0, 1]")]
    InvalidRetention(f64),
    #[error("span normalization needs the last time after t0")]
    ZeroSpan,
}

/// How per-time effects are combined into a trajectory effect.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IteNormalization {
    /// Arithmetic mean over the timepoints.
    #[default]
    Mean,
    /// Sum over the timepoints divided by `t_last − t0`.
    Span,
}

fn check_paired(treated: &TrajectoryPrediction, control: &TrajectoryPrediction) -> Result<(), CausalError> {
    let unpaired = |reason| CausalError::Unpaired {
        patient: treated.patient_id,
        reason,
    };
    if treated.patient_id != control.patient_id {
        return Err(unpaired("different patients"));
    }
    if treated.times != control.times {
        return Err(unpaired("different output times"));
    }
    if treated.n_samples() != control.n_samples() {
        return Err(unpaired("different sample counts"));
    }
    if treated.base_seed != control.base_seed {
        return Err(unpaired("different path seeds"));
    }
    Ok(())
}

fn time_index(pred: &TrajectoryPrediction, t: f64) -> Result<usize, CausalError> {
    pred.time_index(t).ok_or(CausalError::MissingTime {
        patient: pred.patient_id,
        t,
    })
}

/// Per-sample `ŷ_s − ŷ_0` at time `t`.
pub fn pointwise_ite(
    treated: &TrajectoryPrediction,
    control: &TrajectoryPrediction,
    t: f64,
) -> Result<Vec<f64>, CausalError> {
    check_paired(treated, control)?;
    let k = time_index(treated, t)?;
    Ok(treated
        .samples
        .iter()
        .zip(&control.samples)
        .map(|(s, c)| s[k] - c[k])
        .collect())
}

/// Combines per-time effects `tau[k][j]` (time `k`, sample `j`) into one
/// effect per sample.
pub fn trajectory_ite(
    tau: &[Vec<f64>],
    times: &[f64],
    t0: f64,
    mode: IteNormalization,
) -> Result<Vec<f64>, CausalError> {
    if tau.is_empty() || times.len() != tau.len() {
        return Err(CausalError::NoTimes);
    }
    let denom = match mode {
        IteNormalization::Mean => tau.len() as f64,
        IteNormalization::Span => {
            let span = times[times.len() - 1] - t0;
            if span <= 0.0 {
                return Err(CausalError::ZeroSpan);
            }
            span
        }
    };
    let j = tau[0].len();
    Ok((0..j)
        .map(|s| tau.iter().map(|row| row[s]).sum::<f64>() / denom)
        .collect())
}

/// Sample mean and unbiased sample variance.
pub fn ite_moments(samples: &[f64]) -> Result<(f64, f64), CausalError> {
    if samples.len() < 2 {
        return Err(CausalError::TooFewSamples(samples.len()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IteEstimate {
    pub patient_id: u32,
    pub arm: usize,
    pub samples: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
}

/// Trajectory ITE of `treated` against `control` over `times`.
pub fn estimate_ite(
    treated: &TrajectoryPrediction,
    control: &TrajectoryPrediction,
    times: &[f64],
    mode: IteNormalization,
) -> Result<IteEstimate, CausalError> {
    let tau = times
        .iter()
        .map(|&t| pointwise_ite(treated, control, t))
        .collect::<Result<Vec<_>, _>>()?;
    let samples = trajectory_ite(&tau, times, 0.0, mode)?;
    let (mean, variance) = ite_moments(&samples)?;
    Ok(IteEstimate {
        patient_id: treated.patient_id,
        arm: treated.arm,
        samples,
        mean,
        variance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpliftScore {
    pub patient_id: u32,
    pub arm: usize,
    /// Mean predicted EDSS change under treatment minus under control.
    pub uplift: f64,
    /// The same quantity as the mean trajectory ITE across samples.
    pub mean_ite: f64,
    /// Variance of the trajectory ITE across samples.
    pub ite_variance: f64,
}

/// Uplift per treated patient over `times`, matched to control predictions
/// and baselines by patient id.
pub fn uplift_scores(
    treated: &[&TrajectoryPrediction],
    control: &BTreeMap<u32, &TrajectoryPrediction>,
    baselines: &BTreeMap<u32, f64>,
    times: &[f64],
) -> Result<Vec<UpliftScore>, CausalError> {
    if times.is_empty() {
        return Err(CausalError::NoTimes);
    }
    treated
        .iter()
        .map(|s| {
            let id = s.patient_id;
            let c = control.get(&id).ok_or(CausalError::MissingControl(id))?;
            let base = *baselines.get(&id).ok_or(CausalError::MissingBaseline(id))?;
            let ite = estimate_ite(s, c, times, IteNormalization::Mean)?;
            let change = |p: &TrajectoryPrediction| -> Result<f64, CausalError> {
                let mut acc = 0.0;
                for &t in times {
                    acc += p.mean[time_index(p, t)?] - base;
                }
                Ok(acc / times.len() as f64)
            };
            Ok(UpliftScore {
                patient_id: id,
                arm: s.arm,
                uplift: change(s)? - change(c)?,
                mean_ite: ite.mean,
                ite_variance: ite.variance,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tercile {
    Responder,
    Middle,
    NonResponder,
}

impl Tercile {
    pub fn as_str(self) -> &'static str {
        match self {
            Tercile::Responder => "responder",
            Tercile::Middle => "middle",
            Tercile::NonResponder => "non-responder",
        }
    }
}

/// Input row for [`responder_split`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpliftEntry {
    pub patient_id: u32,
    pub uplift: f64,
    /// Lower is more confident.
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TercileAssignment {
    pub patient_id: u32,
    pub uplift: f64,
    pub confidence: f64,
    pub tercile: Tercile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpliftReport {
    pub arm: usize,
    pub retention: f64,
    /// Retained patients in ascending uplift order.
    pub assignments: Vec<TercileAssignment>,
    pub responder_mean: f64,
    pub middle_mean: f64,
    pub non_responder_mean: f64,
}

impl UpliftReport {
    pub fn ids(&self, tercile: Tercile) -> impl Iterator<Item = u32> + '_ {
        self.assignments
            .iter()
            .filter(move |a| a.tercile == tercile)
            .map(|a| a.patient_id)
    }

    /// Columns: patient_id, arm, uplift, confidence, tercile, retention_level.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("patient_id,arm,uplift,confidence,tercile,retention_level\n");
        for a in &self.assignments {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                a.patient_id,
                self.arm,
                a.uplift,
                a.confidence,
                a.tercile.as_str(),
                self.retention
            )
            .expect("writing to a String");
        }
        out
    }
}

/// Number of patients kept at `retention`: `round(retention · n)`, at
/// least one.
pub fn retained_count(n: usize, retention: f64) -> usize {
    ((retention * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Keeps the most confident `retention` fraction, then splits it into
/// uplift terciles. Ties break by ascending patient id.
pub fn responder_split(entries: &[UpliftEntry], retention: f64, arm: usize) -> Result<UpliftReport, CausalError> {
    if !(retention > 0.0 && retention <= 1.0) {
        return Err(CausalError::InvalidRetention(retention));
    }
    let mut by_conf: Vec<&UpliftEntry> = entries.iter().collect();
    by_conf.sort_by(|a, b| a.confidence.total_cmp(&b.confidence).then(a.patient_id.cmp(&b.patient_id)));
    let keep = retained_count(entries.len(), retention);
    if entries.len() < 3 || keep < 3 {
        return Err(CausalError::TooFewRetained(keep.min(entries.len())));
    }
    let mut kept: Vec<&UpliftEntry> = by_conf[..keep].to_vec();
    kept.sort_by(|a, b| a.uplift.total_cmp(&b.uplift).then(a.patient_id.cmp(&b.patient_id)));
    let n = kept.len();
    let (b1, b2) = (n / 3, 2 * n / 3);
    let assignments: Vec<TercileAssignment> = kept
        .iter()
        .enumerate()
        .map(|(i, e)| TercileAssignment {
            patient_id: e.patient_id,
            uplift: e.uplift,
            confidence: e.confidence,
            tercile: if i < b1 {
                Tercile::Responder
            } else if i < b2 {
                Tercile::Middle
            } else {
                Tercile::NonResponder
            },
        })
        .collect();
    let mean = |range: std::ops::Range<usize>| {
        let len = range.len() as f64;
        kept[range].iter().map(|e| e.uplift).sum::<f64>() / len
    };
    Ok(UpliftReport {
        arm,
        retention,
        responder_mean: mean(0..b1),
        middle_mean: mean(b1..b2),
        non_responder_mean: mean(b2..n),
        assignments,
    })
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    if x.len() < 2 {
        return None;
    }
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(id: u32, arm: usize, samples: Vec<Vec<f64>>, times: Vec<f64>) -> TrajectoryPrediction {
        TrajectoryPrediction::from_samples(id, arm, 7, times, samples).unwrap()
    }

    #[test]
    fn pointwise_examples() {
        let s = pred(1, 2, vec![vec![2.0], vec![3.0]], vec![12.0]);
        let c = pred(1, 0, vec![vec![1.0], vec![1.0]], vec![12.0]);
        assert_eq!(pointwise_ite(&s, &c, 12.0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(pointwise_ite(&c, &c, 12.0).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(pointwise_ite(&s, &c, 24.0), Err(CausalError::MissingTime { .. })));
        let other_seed = TrajectoryPrediction { base_seed: 8, ..c.clone() };
        assert!(matches!(pointwise_ite(&s, &other_seed, 12.0), Err(CausalError::Unpaired { .. })));
    }

    #[test]
    fn trajectory_and_moments() {
        let tau = vec![vec![0.5], vec![-0.5], vec![1.0]];
        let v = trajectory_ite(&tau, &[12.0, 24.0, 36.0], 0.0, IteNormalization::Mean).unwrap();
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-15);
        let span = trajectory_ite(&tau, &[12.0, 24.0, 36.0], 0.0, IteNormalization::Span).unwrap();
        assert!((span[0] - 1.0 / 36.0).abs() < 1e-15);
        assert_eq!(trajectory_ite(&[], &[], 0.0, IteNormalization::Mean), Err(CausalError::NoTimes));
        assert_eq!(ite_moments(&[-1.0, 1.0]).unwrap(), (0.0, 2.0));
        assert_eq!(ite_moments(&[0.3, 0.3, 0.3]).unwrap().1, 0.0);
        assert_eq!(ite_moments(&[1.0]), Err(CausalError::TooFewSamples(1)));
    }

    #[test]
    fn uplift_constant_offset() {
        let times = vec![12.0, 24.0];
        let c = pred(3, 0, vec![vec![4.0, 5.0], vec![4.5, 5.5]], times.clone());
        let s = pred(3, 2, vec![vec![3.5, 4.5], vec![4.0, 5.0]], times.clone());
        let control = BTreeMap::from([(3, &c)]);
        let base = BTreeMap::from([(3, 4.0)]);
        let u = uplift_scores(&[&s], &control, &base, &times).unwrap();
        assert!((u[0].uplift + 0.5).abs() < 1e-12);
        assert!((u[0].uplift - u[0].mean_ite).abs() < 1e-12);
        assert_eq!(
            uplift_scores(&[&s], &BTreeMap::new(), &base, &times),
            Err(CausalError::MissingControl(3))
        );
    }

    #[test]
    fn forced_terciles() {
        let entries: Vec<UpliftEntry> = [(0, 1.0), (1, -1.0), (2, 0.0)]
            .iter()
            .map(|&(id, u)| UpliftEntry {
                patient_id: id,
                uplift: u,
                confidence: 0.0,
            })
            .collect();
        let r = responder_split(&entries, 1.0, 2).unwrap();
        assert_eq!(r.ids(Tercile::Responder).collect::<Vec<_>>(), vec![1]);
        assert_eq!(r.ids(Tercile::NonResponder).collect::<Vec<_>>(), vec![0]);
        assert_eq!(r.responder_mean, -1.0);
        assert!(r.to_csv().starts_with("patient_id,arm,uplift,confidence,tercile,retention_level\n1,2,-1,0,responder,1\n"));
        assert_eq!(responder_split(&entries[..2], 1.0, 2), Err(CausalError::TooFewRetained(2)));
        assert_eq!(responder_split(&entries, 0.0, 2), Err(CausalError::InvalidRetention(0.0)));
    }

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.5]).unwrap() - 0.9986).abs() < 1e-3);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 1.0]), None);
    }
}
