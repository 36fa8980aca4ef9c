//! ILINet-style ingestion, the 40-stratum weekly state and the end-to-end
//! forecasting experiment with its historical baseline.
//!
//! Input CSV header: `year,week,region,age_group,ili,total_patients`. The
//! `total_patients` column holds stratum totals unless a census table is
//! supplied, in which case it is read as the region's total (repeated on each
//! age row) and split across age groups by interpolated population share.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate, Weekday};
use nalgebra::DVector;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::baselines::{kde_predict, HistoricalBaseline, DEFAULT_BANDWIDTH_FLOOR};
use crate::dmdenkf::{spin_up, DmdEnkfConfig, Fitter};
use crate::error::{Error, Result};
use crate::evaluation::{density_prob_within_half, ensemble_prob_within_half, log_score, select_seasons, Weekly};
use crate::linalg::percentile;
use crate::rng::{derive_seed, rng_from_seed, standard_normal_vec};
use crate::synthetic::csv_err;
use crate::SvdTruncation;

pub const ILI_HEADER: [&str; 6] = ["year", "week", "region", "age_group", "ili", "total_patients"];
pub const CENSUS_HEADER: [&str; 3] = ["date", "age_group", "share"];
pub const REGIONS: u8 = 10;
pub const STRATA: usize = REGIONS as usize * AgeGroup::ALL.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AgeGroup {
    #[serde(rename = "0-4")]
    A0To4,
    #[serde(rename = "5-24")]
    A5To24,
    #[serde(rename = "25-64")]
    A25To64,
    #[serde(rename = "65+")]
    A65Plus,
}

impl AgeGroup {
    pub const ALL: [AgeGroup; 4] = [AgeGroup::A0To4, AgeGroup::A5To24, AgeGroup::A25To64, AgeGroup::A65Plus];

    pub fn label(&self) -> &'static str {
        match self {
            AgeGroup::A0To4 => "0-4",
            AgeGroup::A5To24 => "5-24",
            AgeGroup::A25To64 => "25-64",
            AgeGroup::A65Plus => "65+",
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }
}

impl fmt::Display for AgeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AgeGroup {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        AgeGroup::ALL
            .iter()
            .find(|a| a.label() == s)
            .copied()
            .ok_or_else(|| format!("unknown age group '{s}' (expected 0-4, 5-24, 25-64 or 65+)"))
    }
}

/// Position of a stratum in the 40-dimensional state: region-major.
pub fn stratum_index(region: u8, age: AgeGroup) -> usize {
    (region as usize - 1) * AgeGroup::ALL.len() + age.index()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IliWeekRecord {
    pub year: i32,
    pub week: u32,
    pub region: u8,
    pub age_group: AgeGroup,
    pub ili: u64,
    pub total_patients: u64,
}

impl IliWeekRecord {
    /// Percentage of consultations that were ILI; zero when there were none.
    pub fn rate(&self) -> f64 {
        if self.total_patients == 0 {
            0.0
        } else {
            100.0 * self.ili as f64 / self.total_patients as f64
        }
    }
}

impl Weekly for IliWeekRecord {
    fn year(&self) -> i32 {
        self.year
    }
    fn week(&self) -> u32 {
        self.week
    }
}

/// A week present in the file but missing some strata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PartialWeek {
    pub year: i32,
    pub week: u32,
    pub missing: Vec<(u8, AgeGroup)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IliLoad {
    pub records: Vec<IliWeekRecord>,
    pub partial_weeks: Vec<PartialWeek>,
}

fn check_header<R: Read>(reader: &mut csv::Reader<R>, expected: &[&str]) -> Result<()> {
    let headers = reader.headers().map_err(csv_err)?;
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header '{}', got '{}'", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

fn parse_field<T: FromStr>(rec: &csv::StringRecord, i: usize, name: &str, line: usize) -> Result<T>
where
    T::Err: fmt::Display,
{
    let raw = rec.get(i).ok_or_else(|| Error::Parse {
        line,
        message: format!("missing field '{name}'"),
    })?;
    raw.parse().map_err(|e| Error::Parse {
        line,
        message: format!("{name} '{raw}': {e}"),
    })
}

fn parse_count(rec: &csv::StringRecord, i: usize, name: &str, line: usize) -> Result<u64> {
    let v: i64 = parse_field(rec, i, name, line)?;
    u64::try_from(v).map_err(|_| Error::Parse {
        line,
        message: format!("{name} must be non-negative, got {v}"),
    })
}

pub fn load_ili_csv(path: impl AsRef<Path>) -> Result<IliLoad> {
    read_ili_csv(std::fs::File::open(path)?)
}

pub fn read_ili_csv<R: Read>(input: R) -> Result<IliLoad> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    check_header(&mut reader, &ILI_HEADER)?;
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for row in reader.records() {
        let rec = row.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let year: i32 = parse_field(&rec, 0, "year", line)?;
        let week: u32 = parse_field(&rec, 1, "week", line)?;
        let region: u8 = parse_field(&rec, 2, "region", line)?;
        let age_group: AgeGroup = parse_field(&rec, 3, "age_group", line)?;
        let ili = parse_count(&rec, 4, "ili", line)?;
        let total_patients = parse_count(&rec, 5, "total_patients", line)?;
        if NaiveDate::from_isoywd_opt(year, week, Weekday::Mon).is_none() {
            return Err(Error::Parse {
                line,
                message: format!("{year} has no ISO week {week}"),
            });
        }
        if !(1..=REGIONS).contains(&region) {
            return Err(Error::Parse {
                line,
                message: format!("region {region} outside 1..={REGIONS}"),
            });
        }
        if ili > total_patients {
            return Err(Error::Parse {
                line,
                message: format!("ili count {ili} exceeds total {total_patients}"),
            });
        }
        if !seen.insert((year, week, region, age_group)) {
            return Err(Error::DuplicateKey(format!(
                "year {year} week {week} region {region} age {age_group} (line {line})"
            )));
        }
        records.push(IliWeekRecord {
            year,
            week,
            region,
            age_group,
            ili,
            total_patients,
        });
    }
    let partial_weeks = partial_weeks(&records);
    for p in &partial_weeks {
        log::warn!("{}-W{:02}: {} strata missing", p.year, p.week, p.missing.len());
    }
    Ok(IliLoad { records, partial_weeks })
}

fn partial_weeks(records: &[IliWeekRecord]) -> Vec<PartialWeek> {
    let mut by_week: BTreeMap<(i32, u32), BTreeSet<(u8, AgeGroup)>> = BTreeMap::new();
    for r in records {
        by_week.entry((r.year, r.week)).or_default().insert((r.region, r.age_group));
    }
    by_week
        .into_iter()
        .filter_map(|((year, week), present)| {
            let missing: Vec<_> = (1..=REGIONS)
                .flat_map(|reg| AgeGroup::ALL.iter().map(move |a| (reg, *a)))
                .filter(|k| !present.contains(k))
                .collect();
            (!missing.is_empty()).then_some(PartialWeek { year, week, missing })
        })
        .collect()
}

pub fn write_ili_csv<W: Write>(records: &[IliWeekRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(ILI_HEADER).map_err(csv_err)?;
    for r in records {
        out.write_record([
            r.year.to_string(),
            r.week.to_string(),
            r.region.to_string(),
            r.age_group.label().to_string(),
            r.ili.to_string(),
            r.total_patients.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Dated population shares by age group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationShare {
    pub date: NaiveDate,
    pub age_group: AgeGroup,
    pub share: f64,
}

/// Census anchors; shares between anchors are interpolated linearly.
#[derive(Debug, Clone, PartialEq)]
pub struct Census {
    anchors: BTreeMap<NaiveDate, [f64; 4]>,
}

impl Census {
    pub fn new(shares: &[PopulationShare]) -> Result<Self> {
        let mut partial: BTreeMap<NaiveDate, [Option<f64>; 4]> = BTreeMap::new();
        for s in shares {
            if !(s.share >= 0.0 && s.share <= 1.0) {
                return Err(Error::InvalidInput(format!("share {} for {} on {} outside [0, 1]", s.share, s.age_group, s.date)));
            }
            let slot = &mut partial.entry(s.date).or_default()[s.age_group.index()];
            if slot.replace(s.share).is_some() {
                return Err(Error::DuplicateKey(format!("census {} {}", s.date, s.age_group)));
            }
        }
        let mut anchors = BTreeMap::new();
        for (date, slots) in partial {
            let mut row = [0.0; 4];
            for (i, v) in slots.iter().enumerate() {
                row[i] = v.ok_or_else(|| Error::InvalidInput(format!("census {date} lacks age group {}", AgeGroup::ALL[i])))?;
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!("census shares on {date} sum to {sum}, not 1")));
            }
            anchors.insert(date, row);
        }
        if anchors.is_empty() {
            return Err(Error::InvalidInput("census table is empty".into()));
        }
        Ok(Self { anchors })
    }

    /// Shares on `date`; dates outside the anchor span are an error.
    pub fn shares_at(&self, date: NaiveDate) -> Result<[f64; 4]> {
        if let Some(exact) = self.anchors.get(&date) {
            return Ok(*exact);
        }
        let before = self.anchors.range(..date).next_back();
        let after = self.anchors.range(date..).next();
        match (before, after) {
            (Some((d0, s0)), Some((d1, s1))) => {
                let t = (date - *d0).num_days() as f64 / (*d1 - *d0).num_days() as f64;
                let mut out = [0.0; 4];
                for i in 0..4 {
                    out[i] = s0[i] + t * (s1[i] - s0[i]);
                }
                Ok(out)
            }
            _ => Err(Error::MissingCensus(date.to_string())),
        }
    }
}

pub fn load_census_csv(path: impl AsRef<Path>) -> Result<Census> {
    read_census_csv(std::fs::File::open(path)?)
}

pub fn read_census_csv<R: Read>(input: R) -> Result<Census> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    check_header(&mut reader, &CENSUS_HEADER)?;
    let mut shares = Vec::new();
    for row in reader.records() {
        let rec = row.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        shares.push(PopulationShare {
            date: parse_field(&rec, 0, "date", line)?,
            age_group: parse_field(&rec, 1, "age_group", line)?,
            share: parse_field(&rec, 2, "share", line)?,
        });
    }
    Census::new(&shares)
}

pub fn write_census_csv<W: Write>(shares: &[PopulationShare], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CENSUS_HEADER).map_err(csv_err)?;
    for s in shares {
        out.write_record([s.date.to_string(), s.age_group.label().to_string(), s.share.to_string()])
            .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Splits an integer total by shares with largest-remainder rounding, so the
/// parts always sum to `total`. Ties go to the earlier group.
pub fn allocate_age_totals(total: u64, shares: &[f64; 4]) -> [u64; 4] {
    let sum: f64 = shares.iter().sum();
    let exact: Vec<f64> = shares.iter().map(|s| total as f64 * s / sum).collect();
    let mut out = [0u64; 4];
    for (o, e) in out.iter_mut().zip(&exact) {
        *o = e.floor() as u64;
    }
    let assigned: u64 = out.iter().sum();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().take(total.saturating_sub(assigned) as usize) {
        out[i] += 1;
    }
    out
}

/// Thursday of an ISO week, the date used for census interpolation.
pub fn week_date(year: i32, week: u32) -> Option<NaiveDate> {
    NaiveDate::from_isoywd_opt(year, week, Weekday::Thu)
}

/// Replaces each record's regional total by its age group's allocated share.
/// The four age rows of a region-week must carry the same regional total.
pub fn apply_census(records: &[IliWeekRecord], census: &Census) -> Result<Vec<IliWeekRecord>> {
    let mut regional: BTreeMap<(i32, u32, u8), u64> = BTreeMap::new();
    for r in records {
        let prev = regional.insert((r.year, r.week, r.region), r.total_patients);
        if prev.is_some_and(|p| p != r.total_patients) {
            return Err(Error::InvalidInput(format!(
                "{}-W{:02} region {}: age rows disagree on the regional total",
                r.year, r.week, r.region
            )));
        }
    }
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let date = week_date(r.year, r.week).expect("validated at load");
        let parts = allocate_age_totals(regional[&(r.year, r.week, r.region)], &census.shares_at(date)?);
        out.push(IliWeekRecord {
            total_patients: parts[r.age_group.index()],
            ..r.clone()
        });
    }
    Ok(out)
}

/// Elementwise `ln(rate + c)`.
pub fn transform(rates: &DVector<f64>, c: f64) -> Result<DVector<f64>> {
    if let Some(r) = rates.iter().find(|r| !(**r >= 0.0)) {
        return Err(Error::InvalidInput(format!("rate {r} is negative")));
    }
    Ok(rates.map(|r| (r + c).ln()))
}

/// Elementwise `exp(z) - c`, clamped at zero. Returns how many entries were
/// clamped.
pub fn inverse_transform(z: &DVector<f64>, c: f64) -> (DVector<f64>, usize) {
    let mut clamped = 0;
    let out = z.map(|v| {
        let r = v.exp() - c;
        if r < 0.0 {
            clamped += 1;
            0.0
        } else {
            r
        }
    });
    (out, clamped)
}

/// Consecutive ISO weeks with a full 40-stratum rate vector each.
#[derive(Debug, Clone, PartialEq)]
pub struct WeeklySeries {
    pub weeks: Vec<(i32, u32)>,
    pub rates: Vec<DVector<f64>>,
    /// Consultation totals per stratum.
    pub totals: Vec<DVector<f64>>,
    /// Weeks in which at least one stratum was forward-filled.
    pub filled: Vec<(i32, u32)>,
}

impl WeeklySeries {
    pub fn len(&self) -> usize {
        self.weeks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weeks.is_empty()
    }

    /// National rate of week `t` under the given stratum weights.
    pub fn national_rate(&self, t: usize) -> f64 {
        national_rate(&self.rates[t], &self.totals[t])
    }
}

/// Consultation-weighted mean of stratum rates; a plain mean when every
/// weight is zero.
pub fn national_rate(rates: &DVector<f64>, totals: &DVector<f64>) -> f64 {
    let w = totals.sum();
    if w > 0.0 {
        rates.dot(totals) / w
    } else {
        rates.mean()
    }
}

/// Builds the weekly state. Missing strata, and weeks missing entirely, are
/// forward-filled from the previous week; the first week must be complete.
pub fn weekly_series(records: &[IliWeekRecord], census: Option<&Census>) -> Result<WeeklySeries> {
    let allocated;
    let records = match census {
        Some(c) => {
            allocated = apply_census(records, c)?;
            &allocated[..]
        }
        None => records,
    };
    let mut by_week: BTreeMap<(i32, u32), Vec<Option<(f64, f64)>>> = BTreeMap::new();
    for r in records {
        let slot = by_week.entry((r.year, r.week)).or_insert_with(|| vec![None; STRATA]);
        slot[stratum_index(r.region, r.age_group)] = Some((r.rate(), r.total_patients as f64));
    }
    let (&first, _) = by_week.first_key_value().ok_or(Error::InsufficientData { needed: 1, got: 0 })?;
    let (&last, _) = by_week.last_key_value().expect("non-empty");
    let mut out = WeeklySeries {
        weeks: Vec::new(),
        rates: Vec::new(),
        totals: Vec::new(),
        filled: Vec::new(),
    };
    let mut date = NaiveDate::from_isoywd_opt(first.0, first.1, Weekday::Mon).expect("validated at load");
    loop {
        let iso = date.iso_week();
        let key = (iso.year(), iso.week());
        let row = by_week.get(&key);
        let mut rates = DVector::zeros(STRATA);
        let mut totals = DVector::zeros(STRATA);
        let mut filled = false;
        for s in 0..STRATA {
            match row.and_then(|r| r[s]) {
                Some((rate, total)) => {
                    rates[s] = rate;
                    totals[s] = total;
                }
                None => {
                    let Some(prev) = out.rates.last() else {
                        return Err(Error::InvalidInput(format!(
                            "first week {}-W{:02} is missing strata; nothing to forward-fill from",
                            key.0, key.1
                        )));
                    };
                    rates[s] = prev[s];
                    totals[s] = out.totals.last().expect("parallel")[s];
                    filled = true;
                }
            }
        }
        if filled {
            log::warn!("{}-W{:02}: forward-filled missing strata", key.0, key.1);
            out.filled.push(key);
        }
        out.weeks.push(key);
        out.rates.push(rates);
        out.totals.push(totals);
        if key == last {
            break;
        }
        date += chrono::Duration::weeks(1);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IliExperimentConfig {
    /// Delay-embedding depth; 1 is plain DMDEnKF.
    pub delay: usize,
    pub rank: usize,
    pub max_horizon: usize,
    /// Last calendar year used for spin-up.
    pub split_year: i32,
    pub ensemble_size: usize,
    pub seed: u64,
    /// Defaults to `1e-2` times the pooled variance of the transformed
    /// spin-up data.
    pub alpha1: Option<f64>,
    /// Defaults to `1e-5 * alpha1`.
    pub alpha2: Option<f64>,
    /// Defaults to half the median per-stratum variance of first differences
    /// of the transformed spin-up data.
    pub meas_var: Option<f64>,
    pub offset: f64,
    pub first_season: i32,
    pub last_season: i32,
    pub baseline_excluded_years: Vec<i32>,
    pub bandwidth_floor: f64,
}

impl Default for IliExperimentConfig {
    fn default() -> Self {
        Self {
            delay: 1,
            rank: 8,
            max_horizon: 4,
            split_year: 2012,
            ensemble_size: 50,
            seed: 0,
            alpha1: None,
            alpha2: None,
            meas_var: None,
            offset: 1.0,
            first_season: 2012,
            last_season: 2017,
            baseline_excluded_years: vec![2009],
            bandwidth_floor: DEFAULT_BANDWIDTH_FLOOR,
        }
    }
}

impl IliExperimentConfig {
    pub fn method_name(&self) -> &'static str {
        if self.delay > 1 {
            "hankel_dmdenkf"
        } else {
            "dmdenkf"
        }
    }
}

/// One scored national forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IliForecastRow {
    pub method: String,
    pub horizon: usize,
    pub year: i32,
    pub week: u32,
    pub truth: f64,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub prob_within: f64,
}

impl Weekly for IliForecastRow {
    fn year(&self) -> i32 {
        self.year
    }
    fn week(&self) -> u32 {
        self.week
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IliMetricRow {
    pub method: String,
    pub rank: usize,
    /// Zero for the horizon-free historical baseline.
    pub horizon: usize,
    pub log_score: f64,
    pub mse: f64,
    pub n_weeks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IliExperimentResult {
    pub config: IliExperimentConfig,
    pub spin_up_weeks: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub meas_var: f64,
    /// In-season forecasts of the selected seasons, baseline rows included.
    pub forecasts: Vec<IliForecastRow>,
    pub metrics: Vec<IliMetricRow>,
    /// Forecast members clamped at zero rate on the way back from log space.
    pub clamped_values: usize,
}

impl IliExperimentResult {
    pub fn metric(&self, method: &str, horizon: usize) -> Option<&IliMetricRow> {
        self.metrics.iter().find(|m| m.method == method && m.horizon == horizon)
    }
}

fn default_meas_var(z: &[DVector<f64>]) -> f64 {
    let n = z[0].len();
    let per_dim: Vec<f64> = (0..n)
        .map(|j| {
            let d: Vec<f64> = z.windows(2).map(|w| w[1][j] - w[0][j]).collect();
            let m = d.iter().sum::<f64>() / d.len() as f64;
            d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (d.len() as f64 - 1.0).max(1.0) / 2.0
        })
        .collect();
    percentile(&per_dim, 50.0).max(1e-8)
}

/// Historical-baseline forecasts for every in-season target week of the
/// selected seasons after the spin-up split, built from national rates of
/// earlier years.
pub fn baseline_forecasts(series: &WeeklySeries, config: &IliExperimentConfig) -> Result<Vec<IliForecastRow>> {
    let national: Vec<(i32, u32, f64)> = (0..series.len())
        .map(|t| (series.weeks[t].0, series.weeks[t].1, series.national_rate(t)))
        .collect();
    let targets = select_seasons(&series.weeks, config.first_season, config.last_season);
    let mut per_year: BTreeMap<i32, HistoricalBaseline> = BTreeMap::new();
    let mut out = Vec::with_capacity(targets.len());
    let split = series.weeks.iter().take_while(|w| w.0 <= config.split_year).count();
    for (t, &(year, week)) in series.weeks.iter().enumerate().skip(split) {
        if !targets.contains(&(year, week)) {
            continue;
        }
        let hb = per_year.entry(year).or_insert_with(|| {
            HistoricalBaseline::from_records(national.iter().copied(), year, &config.baseline_excluded_years, config.bandwidth_floor)
        });
        let (kde, median) = kde_predict(hb, week)?;
        let truth = national[t].2;
        out.push(IliForecastRow {
            method: "baseline".into(),
            horizon: 0,
            year,
            week,
            truth,
            point: median,
            lower: f64::NAN,
            upper: f64::NAN,
            prob_within: density_prob_within_half(&kde, truth),
        });
    }
    Ok(out)
}

fn score(method: &str, rank: usize, horizon: usize, rows: &[&IliForecastRow]) -> Result<IliMetricRow> {
    let probs: Vec<f64> = rows.iter().map(|r| r.prob_within).collect();
    let mse = rows.iter().map(|r| (r.point - r.truth).powi(2)).sum::<f64>() / rows.len().max(1) as f64;
    Ok(IliMetricRow {
        method: method.into(),
        rank,
        horizon,
        log_score: log_score(&probs)?,
        mse,
        n_weeks: rows.len(),
    })
}

/// Spin-up on every week up to the end of `split_year`, then weekly
/// assimilation with 1..=`max_horizon`-week national forecasts, scored over
/// the selected seasons alongside the historical baseline.
pub fn run_ili_experiment(series: &WeeklySeries, config: &IliExperimentConfig) -> Result<IliExperimentResult> {
    if config.max_horizon == 0 {
        return Err(Error::InvalidInput("max_horizon must be at least 1".into()));
    }
    let z: Vec<DVector<f64>> = series.rates.iter().map(|r| transform(r, config.offset)).collect::<Result<_>>()?;
    let m = series.weeks.iter().take_while(|w| w.0 <= config.split_year).count();
    if m < 2 || m >= series.len() {
        return Err(Error::InvalidInput(format!(
            "split after {} leaves {m} spin-up weeks of {}",
            config.split_year,
            series.len()
        )));
    }
    let meas_var = config.meas_var.unwrap_or_else(|| default_meas_var(&z[..m]));
    let mut dcfg = DmdEnkfConfig::with_defaults(
        &z[..m],
        m,
        SvdTruncation::FixedRank(config.rank),
        config.delay,
        vec![meas_var],
        config.seed,
    );
    dcfg.ensemble_size = config.ensemble_size;
    dcfg.fitter = Fitter::Tdmd;
    if let Some(a1) = config.alpha1 {
        dcfg.alpha1 = a1;
        dcfg.alpha2 = 1e-5 * a1;
    }
    if let Some(a2) = config.alpha2 {
        dcfg.alpha2 = a2;
    }
    let mut model = spin_up(&z, &dcfg)?;
    let method = config.method_name();
    let in_scope: BTreeSet<(i32, u32)> = select_seasons(&series.weeks, config.first_season, config.last_season).into_iter().collect();
    let mut forecasts = Vec::new();
    let mut clamped_values = 0;
    for t in (m - 1)..series.len() - 1 {
        if t >= m {
            model.assimilate(&z[t])?;
        }
        let weights = &series.totals[t];
        let horizons = model.forecast_horizons(config.max_horizon)?;
        for f in horizons {
            let target = t + f.steps;
            if target >= series.len() || !in_scope.contains(&series.weeks[target]) {
                continue;
            }
            let national: Vec<f64> = f
                .members
                .column_iter()
                .map(|c| {
                    let (rates, clamped) = inverse_transform(&c.into_owned(), config.offset);
                    clamped_values += clamped;
                    national_rate(&rates, weights)
                })
                .collect();
            let truth = series.national_rate(target);
            let (year, week) = series.weeks[target];
            forecasts.push(IliForecastRow {
                method: method.into(),
                horizon: f.steps,
                year,
                week,
                truth,
                point: national.iter().sum::<f64>() / national.len() as f64,
                lower: percentile(&national, 2.5),
                upper: percentile(&national, 97.5),
                prob_within: ensemble_prob_within_half(&national, truth),
            });
        }
    }
    if clamped_values > 0 {
        log::warn!("{clamped_values} forecast values fell below zero rate and were clamped");
    }
    let mut metrics = Vec::new();
    let baseline = baseline_forecasts(series, config)?;
    if !baseline.is_empty() {
        metrics.push(score("baseline", config.rank, 0, &baseline.iter().collect::<Vec<_>>())?);
    }
    for h in 1..=config.max_horizon {
        let rows: Vec<&IliForecastRow> = forecasts.iter().filter(|r| r.horizon == h).collect();
        if !rows.is_empty() {
            metrics.push(score(method, config.rank, h, &rows)?);
        }
    }
    forecasts.extend(baseline);
    Ok(IliExperimentResult {
        config: config.clone(),
        spin_up_weeks: m,
        alpha1: dcfg.alpha1,
        alpha2: dcfg.alpha2,
        meas_var,
        forecasts,
        metrics,
        clamped_values,
    })
}

/// Metrics of `run_ili_experiment` for each truncation rank.
pub fn rank_sweep(series: &WeeklySeries, config: &IliExperimentConfig, ranks: &[usize]) -> Result<Vec<IliMetricRow>> {
    let mut out = Vec::new();
    for &r in ranks {
        let cfg = IliExperimentConfig { rank: r, ..config.clone() };
        out.extend(run_ili_experiment(series, &cfg)?.metrics.into_iter().filter(|m| m.horizon > 0));
    }
    Ok(out)
}

/// Seasonal ILI-like data. Each stratum's log rate is a level plus a sum of
/// harmonics of the 52-week cycle with stratum-specific amplitude and phase,
/// observed with Gaussian noise; regional totals are census-allocated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IliFixtureSpec {
    pub first_year: i32,
    pub last_year: i32,
    pub seed: u64,
    /// Standard deviation of the log-scale observation noise.
    pub noise: f64,
    /// Harmonics of the yearly cycle; amplitudes halve with each one.
    pub harmonics: usize,
    pub regional_total: u64,
}

impl Default for IliFixtureSpec {
    fn default() -> Self {
        Self {
            first_year: 2003,
            last_year: 2018,
            seed: 0,
            noise: 0.15,
            harmonics: 3,
            regional_total: 40_000,
        }
    }
}

/// Mean ISO-week length of a year.
const WEEKS_PER_YEAR: f64 = 365.2425 / 7.0;

#[derive(Debug, Clone, PartialEq)]
pub struct IliFixture {
    pub records: Vec<IliWeekRecord>,
    pub census: Vec<PopulationShare>,
}

fn fixture_census(first_year: i32, last_year: i32) -> Vec<PopulationShare> {
    let start = [0.068, 0.285, 0.525, 0.122];
    let end = [0.061, 0.262, 0.522, 0.155];
    let mut out = Vec::new();
    for (date, row) in [
        (NaiveDate::from_ymd_opt(first_year - 1, 1, 1).expect("valid"), start),
        (NaiveDate::from_ymd_opt(last_year + 1, 12, 31).expect("valid"), end),
    ] {
        for (a, share) in AgeGroup::ALL.iter().zip(row) {
            out.push(PopulationShare {
                date,
                age_group: *a,
                share,
            });
        }
    }
    out
}

pub fn gen_ili_fixture(spec: &IliFixtureSpec) -> Result<IliFixture> {
    let census_rows = fixture_census(spec.first_year, spec.last_year);
    let census = Census::new(&census_rows)?;
    let mut rng = rng_from_seed(spec.seed);
    let level: Vec<f64> = (0..STRATA).map(|_| (1.0 + 0.8 + 1.2 * rng.random::<f64>()).ln()).collect();
    let amp: Vec<Vec<f64>> = (0..STRATA)
        .map(|s| {
            let a1 = (0.5 + 0.3 * rng.random::<f64>()) * (1.0 - 0.15 * (s % 4) as f64);
            (0..spec.harmonics).map(|k| a1 * 0.5f64.powi(k as i32) * (0.8 + 0.4 * rng.random::<f64>())).collect()
        })
        .collect();
    let phase: Vec<Vec<f64>> = (0..STRATA)
        .map(|_| (0..spec.harmonics).map(|k| (k as f64 + 1.0) * 0.3 * (2.0 * rng.random::<f64>() - 1.0)).collect())
        .collect();
    let first = NaiveDate::from_isoywd_opt(spec.first_year, 1, Weekday::Mon).ok_or_else(|| Error::InvalidInput("bad first year".into()))?;
    let mut date = first;
    let mut records = Vec::new();
    let mut noise_rng = rng_from_seed(derive_seed(spec.seed, 1));
    while date.iso_week().year() <= spec.last_year {
        let iso = date.iso_week();
        let (year, week) = (iso.year(), iso.week());
        let t = (date - first).num_weeks() as f64;
        let shares = census.shares_at(week_date(year, week).expect("valid week"))?;
        let eps = standard_normal_vec(&mut noise_rng, STRATA);
        for region in 1..=REGIONS {
            let total = spec.regional_total + (region as u64 * 1_000);
            let parts = allocate_age_totals(total, &shares);
            for age in AgeGroup::ALL {
                let s = stratum_index(region, age);
                // Phase zero puts the yearly peak in early February.
                let seasonal: f64 = (0..spec.harmonics)
                    .map(|k| {
                        let w = 2.0 * std::f64::consts::PI * (k as f64 + 1.0) / WEEKS_PER_YEAR;
                        amp[s][k] * (w * (t - 5.0) - phase[s][k]).cos()
                    })
                    .sum();
                let rate = ((level[s] + seasonal + spec.noise * eps[s]).exp() - 1.0).max(0.0);
                let stratum_total = parts[age.index()];
                let ili = ((rate / 100.0) * stratum_total as f64).round().min(stratum_total as f64) as u64;
                records.push(IliWeekRecord {
                    year,
                    week,
                    region,
                    age_group: age,
                    ili,
                    total_patients: total,
                });
            }
        }
        date += chrono::Duration::weeks(1);
    }
    Ok(IliFixture {
        records,
        census: census_rows,
    })
}
