//! Error metrics and summaries for eigenvalue tracking and forecasting.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::baselines::Kde;
use crate::dmd::arg_2pi;
use crate::error::{Error, Result};
use crate::linalg::{percentile, C64};
use crate::synthetic::csv_err;

/// True and estimated polar eigenvalue at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigTrackRecord {
    pub step: usize,
    pub true_modulus: f64,
    pub true_argument: f64,
    pub est_modulus: f64,
    pub est_argument: f64,
    /// False when the estimate had no conjugate pair and the dominant
    /// eigenvalue was used instead.
    pub pair_detected: bool,
}

impl EigTrackRecord {
    /// Reads the estimate off a spectrum sorted by descending modulus: the
    /// leading conjugate pair's upper member if there is one, otherwise the
    /// dominant eigenvalue.
    pub fn from_spectrum(step: usize, true_modulus: f64, true_argument: f64, spectrum: &[C64]) -> Self {
        let leader = spectrum.iter().find(|z| z.im > 0.0);
        let (est, pair_detected) = match leader {
            Some(z) => (*z, true),
            None => (
                spectrum
                    .iter()
                    .cloned()
                    .max_by(|a, b| a.norm().total_cmp(&b.norm()))
                    .unwrap_or(C64::new(0.0, 0.0)),
                false,
            ),
        };
        Self {
            step,
            true_modulus,
            true_argument: true_argument.rem_euclid(2.0 * PI),
            est_modulus: est.norm(),
            est_argument: arg_2pi(est),
            pair_detected,
        }
    }

    /// Signed argument error wrapped to `(-pi, pi]`.
    pub fn argument_error(&self) -> f64 {
        wrap_angle(self.est_argument - self.true_argument)
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

/// Mean absolute modulus error over all records, and the signed argument
/// errors of records where a pair was detected.
pub fn modulus_argument_errors(records: &[EigTrackRecord]) -> Result<(f64, Vec<f64>)> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no eigenvalue records".into()));
    }
    let mean = records.iter().map(|r| (r.est_modulus - r.true_modulus).abs()).sum::<f64>() / records.len() as f64;
    let args = records.iter().filter(|r| r.pair_detected).map(|r| r.argument_error()).collect();
    Ok((mean, args))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub target: usize,
    pub horizon: usize,
    pub point: DVector<f64>,
    pub truth: DVector<f64>,
    pub interval: Option<(DVector<f64>, DVector<f64>)>,
}

/// `|truth - forecast| / |truth|`.
pub fn relative_error(forecast: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    let norm = truth.norm();
    if norm == 0.0 {
        return Err(Error::InvalidInput("relative error against a zero truth vector".into()));
    }
    if forecast.len() != truth.len() {
        return Err(Error::InvalidInput("forecast and truth differ in dimension".into()));
    }
    Ok((truth - forecast).norm() / norm)
}

/// Probabilities are floored here before taking logs.
pub const LOG_SCORE_FLOOR: f64 = 1e-10;

/// Geometric mean of per-week probabilities, each floored at [`LOG_SCORE_FLOOR`].
pub fn log_score(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::InvalidInput("log score of an empty list".into()));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidInput(format!("probability {p} outside [0, 1]")));
    }
    let mean_log = probs.iter().map(|p| p.max(LOG_SCORE_FLOOR).ln()).sum::<f64>() / probs.len() as f64;
    Ok(mean_log.exp())
}

/// Fraction of members in `[truth - 0.5, truth + 0.5]`.
pub fn ensemble_prob_within_half(members: &[f64], truth: f64) -> f64 {
    if members.is_empty() {
        return 0.0;
    }
    members.iter().filter(|m| (**m - truth).abs() <= 0.5).count() as f64 / members.len() as f64
}

/// Density mass in `[truth - 0.5, truth + 0.5]`.
pub fn density_prob_within_half(kde: &Kde, truth: f64) -> f64 {
    kde.prob_within(truth - 0.5, truth + 0.5)
}

/// Anything labelled with a year and ISO week.
pub trait Weekly {
    fn year(&self) -> i32;
    fn week(&self) -> u32;
}

impl Weekly for (i32, u32) {
    fn year(&self) -> i32 {
        self.0
    }
    fn week(&self) -> u32 {
        self.1
    }
}

/// Week 40 through week 20 of the following year, inclusive.
pub fn in_season(week: u32) -> bool {
    week >= 40 || week <= 20
}

/// Start year of the season a week belongs to, if in season.
pub fn season_of(year: i32, week: u32) -> Option<i32> {
    if week >= 40 {
        Some(year)
    } else if week <= 20 {
        Some(year - 1)
    } else {
        None
    }
}

pub fn season_filter<T: Weekly + Clone>(records: &[T]) -> Vec<T> {
    records.iter().filter(|r| in_season(r.week())).cloned().collect()
}

/// In-season records of the seasons starting in `first..=last`.
pub fn select_seasons<T: Weekly + Clone>(records: &[T], first: i32, last: i32) -> Vec<T> {
    records
        .iter()
        .filter(|r| season_of(r.year(), r.week()).is_some_and(|s| (first..=last).contains(&s)))
        .cloned()
        .collect()
}

/// Fraction of values above `Q3 + 1.5 * IQR`.
pub fn outlier_rate_iqr(errors: &[f64]) -> Result<f64> {
    if errors.len() < 4 {
        return Err(Error::InsufficientData {
            needed: 4,
            got: errors.len(),
        });
    }
    let q1 = percentile(errors, 25.0);
    let q3 = percentile(errors, 75.0);
    let fence = q3 + 1.5 * (q3 - q1);
    Ok(errors.iter().filter(|e| **e > fence).count() as f64 / errors.len() as f64)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// One row of a metric table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub sigma: f64,
    pub metric: String,
    pub value: f64,
    pub n_runs: usize,
    pub seed_base: u64,
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
