//! Comparison methods: a batch-prefix stand-in for Streaming TDMD, Windowed
//! TDMD, Online DMD with exponential forgetting, and a kernel-density
//! historical baseline for seasonal data.

use std::collections::{BTreeMap, VecDeque};
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dmd::{arg_2pi, build_snapshots, fit_tdmd, DmdModel, SvdTruncation};
use crate::error::{Error, Result};
use crate::linalg::{max_asymmetry, percentile, C64};

/// TDMD over every snapshot seen so far.
pub fn streaming_tdmd_step(all_data_so_far: &[DVector<f64>], trunc: &SvdTruncation) -> Result<DmdModel> {
    fit_tdmd(&build_snapshots(all_data_so_far, 1)?, trunc)
}

#[derive(Debug, Clone)]
pub struct WindowedTdmdState {
    buffer: VecDeque<DVector<f64>>,
    w: usize,
    trunc: SvdTruncation,
}

#[derive(Debug, Clone)]
pub enum WindowOutput {
    /// Too few snapshots buffered for the truncation.
    WarmingUp { have: usize, need: usize },
    Model(DmdModel),
}

impl WindowOutput {
    pub fn model(&self) -> Option<&DmdModel> {
        match self {
            WindowOutput::Model(m) => Some(m),
            WindowOutput::WarmingUp { .. } => None,
        }
    }
}

impl WindowedTdmdState {
    pub fn new(w: usize, trunc: SvdTruncation) -> Result<Self> {
        if w < 2 {
            return Err(Error::InvalidInput(format!("window must hold at least 2 snapshots, got {w}")));
        }
        Ok(Self {
            buffer: VecDeque::with_capacity(w),
            w,
            trunc,
        })
    }

    /// Seeds the buffer with the last `w` snapshots of `history`.
    pub fn with_history(w: usize, trunc: SvdTruncation, history: &[DVector<f64>]) -> Result<Self> {
        let mut state = Self::new(w, trunc)?;
        for x in history.iter().skip(history.len().saturating_sub(w)) {
            state.buffer.push_back(x.clone());
        }
        Ok(state)
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn window(&self) -> usize {
        self.w
    }

    /// Snapshots needed before the truncation can be honoured.
    pub fn snapshots_needed(&self) -> usize {
        match self.trunc {
            SvdTruncation::FixedRank(r) => r + 1,
            SvdTruncation::DropSmallest(k) => k + 2,
            SvdTruncation::EnergyThreshold(_) => 2,
        }
        .max(2)
    }

    pub fn fit(&self) -> Result<WindowOutput> {
        let need = self.snapshots_needed();
        if self.buffer.len() < need {
            return Ok(WindowOutput::WarmingUp {
                have: self.buffer.len(),
                need,
            });
        }
        let data: Vec<DVector<f64>> = self.buffer.iter().cloned().collect();
        Ok(WindowOutput::Model(fit_tdmd(&build_snapshots(&data, 1)?, &self.trunc)?))
    }
}

/// Pushes a snapshot (dropping the oldest beyond `w`) and refits.
pub fn windowed_tdmd_step(mut state: WindowedTdmdState, new_snapshot: DVector<f64>) -> Result<(WindowedTdmdState, WindowOutput)> {
    if state.buffer.len() == state.w {
        state.buffer.pop_front();
    }
    state.buffer.push_back(new_snapshot);
    let out = state.fit()?;
    Ok((state, out))
}

/// Exponentially weighted recursive least squares for `y = A x`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OnlineDmdState {
    a_hat: DMatrix<f64>,
    p: DMatrix<f64>,
    rho: f64,
    steps: usize,
    symmetry_repairs: usize,
}

/// Asymmetry in `P` above which a repair is logged.
pub const P_SYMMETRY_TOL: f64 = 1e-10;

impl OnlineDmdState {
    /// Weighted batch fit on columns of `x`, `y`; the newest column has
    /// weight 1 and one `k` steps older has weight `rho^k`.
    pub fn initialize(x: &DMatrix<f64>, y: &DMatrix<f64>, rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::InvalidInput(format!("decay rho={rho} outside (0, 1]")));
        }
        if x.shape() != y.shape() {
            return Err(Error::InvalidInput("X and Y must have the same shape".into()));
        }
        let (n, q) = x.shape();
        if q < n {
            return Err(Error::InsufficientData { needed: n + 1, got: q + 1 });
        }
        let mut xw = x.clone();
        let mut yw = y.clone();
        for j in 0..q {
            let w = rho.sqrt().powi((q - 1 - j) as i32);
            xw.column_mut(j).scale_mut(w);
            yw.column_mut(j).scale_mut(w);
        }
        let gram = &xw * xw.transpose();
        let gram_inv = gram
            .try_inverse()
            .ok_or_else(|| Error::InvalidInput("initial snapshot Gramian is singular".into()))?;
        let a_hat = &yw * xw.transpose() * &gram_inv;
        Ok(Self {
            a_hat,
            p: gram_inv / rho,
            rho,
            steps: 0,
            symmetry_repairs: 0,
        })
    }

    pub fn from_series(series: &[DVector<f64>], rho: f64) -> Result<Self> {
        let pair = build_snapshots(series, 1)?;
        Self::initialize(pair.x(), pair.x_prime(), rho)
    }

    pub fn update(&mut self, x: &DVector<f64>, y: &DVector<f64>) {
        let px = &self.p * x;
        let gamma = 1.0 / (1.0 + x.dot(&px));
        let resid = y - &self.a_hat * x;
        self.a_hat += gamma * &resid * px.transpose();
        self.p = (&self.p - gamma * &px * px.transpose()) / self.rho;
        let asym = max_asymmetry(&self.p);
        let scale = self.p.amax().max(1.0);
        if asym > P_SYMMETRY_TOL * scale {
            self.symmetry_repairs += 1;
            log::warn!("online DMD: P asymmetry {asym:e}, re-symmetrising");
        }
        self.p = (&self.p + self.p.transpose()) * 0.5;
        self.steps += 1;
    }

    pub fn operator(&self) -> &DMatrix<f64> {
        &self.a_hat
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn symmetry_repairs(&self) -> usize {
        self.symmetry_repairs
    }

    /// 2-norm condition number of `P`, recorded as a diagnostic only.
    pub fn condition_number(&self) -> f64 {
        let s = self.p.singular_values();
        let max = s.max();
        let min = s.min();
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    /// Eigenvalues of `A_hat`, by descending modulus then ascending argument.
    pub fn spectrum(&self) -> Vec<C64> {
        sorted_spectrum(&self.a_hat)
    }
}

pub fn online_dmd_step(mut state: OnlineDmdState, x_in: &DVector<f64>, x_out: &DVector<f64>) -> (OnlineDmdState, Vec<C64>) {
    state.update(x_in, x_out);
    let spectrum = state.spectrum();
    (state, spectrum)
}

pub fn sorted_spectrum(a: &DMatrix<f64>) -> Vec<C64> {
    let mut l: Vec<C64> = a.complex_eigenvalues().iter().cloned().collect();
    l.sort_by(|x, y| y.norm().total_cmp(&x.norm()).then(arg_2pi(*x).total_cmp(&arg_2pi(*y))));
    l
}

/// Propagates `x` by `p` steps of a dense operator.
pub fn operator_forecast(a: &DMatrix<f64>, x: &DVector<f64>, p: usize) -> DVector<f64> {
    let mut out = x.clone();
    for _ in 0..p {
        out = a * out;
    }
    out
}

/// Gaussian kernel density estimate with a shared bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kde {
    pub centers: Vec<f64>,
    pub bandwidth: f64,
}

/// Lower bound on KDE bandwidths so single or identical samples stay proper densities.
pub const DEFAULT_BANDWIDTH_FLOOR: f64 = 1e-3;

/// `0.9 * min(sd, IQR / 1.34) * n^(-1/5)`, using the sample standard
/// deviation when the IQR is zero, and never below `floor`.
pub fn silverman_bandwidth(samples: &[f64], floor: f64) -> f64 {
    let n = samples.len();
    if n < 2 {
        return floor;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let sd = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let iqr = percentile(samples, 75.0) - percentile(samples, 25.0);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    (0.9 * spread * (n as f64).powf(-0.2)).max(floor)
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

impl Kde {
    pub fn new(centers: Vec<f64>, floor: f64) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::InvalidInput("kernel density needs at least one sample".into()));
        }
        let bandwidth = silverman_bandwidth(&centers, floor);
        Ok(Self { centers, bandwidth })
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let norm = 1.0 / ((2.0 * PI).sqrt() * h * self.centers.len() as f64);
        norm * self.centers.iter().map(|c| (-0.5 * ((x - c) / h).powi(2)).exp()).sum::<f64>()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        self.centers.iter().map(|c| std_normal_cdf((x - c) / h)).sum::<f64>() / self.centers.len() as f64
    }

    pub fn prob_within(&self, lo: f64, hi: f64) -> f64 {
        (self.cdf(hi) - self.cdf(lo)).max(0.0)
    }

    /// Median by bisection on the CDF to `1e-10`.
    pub fn median(&self) -> f64 {
        let min = self.centers.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = self.centers.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut lo = min - 10.0 * self.bandwidth;
        let mut hi = max + 10.0 * self.bandwidth;
        while hi - lo > 1e-10 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < 0.5 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Per-week samples from prior seasons.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HistoricalBaseline {
    samples: BTreeMap<u32, Vec<f64>>,
    bandwidth_floor: f64,
}

impl HistoricalBaseline {
    pub fn new(bandwidth_floor: f64) -> Self {
        Self {
            samples: BTreeMap::new(),
            bandwidth_floor,
        }
    }

    /// Builds from `(year, week, value)` triples, keeping years before
    /// `before_year` and skipping `excluded_years`.
    pub fn from_records<I>(records: I, before_year: i32, excluded_years: &[i32], bandwidth_floor: f64) -> Self
    where
        I: IntoIterator<Item = (i32, u32, f64)>,
    {
        let mut hb = Self::new(bandwidth_floor);
        for (year, week, value) in records {
            if year < before_year && !excluded_years.contains(&year) {
                hb.add(week, value);
            }
        }
        hb
    }

    pub fn add(&mut self, week: u32, value: f64) {
        self.samples.entry(week).or_default().push(value);
    }

    pub fn samples(&self, week: u32) -> &[f64] {
        self.samples.get(&week).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Week 53 falls back to week 52 when no 53-week season is in the history.
    fn week_samples(&self, week: u32) -> &[f64] {
        let s = self.samples(week);
        if s.is_empty() && week == 53 {
            self.samples(52)
        } else {
            s
        }
    }
}

pub fn kde_predict(hb: &HistoricalBaseline, week: u32) -> Result<(Kde, f64)> {
    let samples = hb.week_samples(week);
    if samples.is_empty() {
        return Err(Error::InvalidInput(format!("no historical samples for week {week}")));
    }
    let kde = Kde::new(samples.to_vec(), hb.bandwidth_floor)?;
    let median = kde.median();
    Ok((kde, median))
}
