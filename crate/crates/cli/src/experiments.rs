//! Single-run drivers for the synthetic studies. Each function takes a run
//! seed and returns everything needed to aggregate across runs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use dmdenkf::baselines::{operator_forecast, streaming_tdmd_step, windowed_tdmd_step, OnlineDmdState, WindowedTdmdState};
use dmdenkf::dmdenkf::{spin_up, DmdEnkfConfig, Fitter};
use dmdenkf::evaluation::{mean, relative_error, EigTrackRecord};
use dmdenkf::filters::{pf_init, pf_step};
use dmdenkf::linalg::C64;
use dmdenkf::rng::derive_seed;
use dmdenkf::synthetic::{gen_pandemic, gen_rotation, PandemicSeriesSpec, RotationSeriesSpec};
use dmdenkf::{DmdModel, Error, Result, SvdTruncation};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Windowed,
    Online,
    Streaming,
    Dmdenkf,
    Hankel,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Windowed, Method::Online, Method::Streaming, Method::Dmdenkf, Method::Hankel];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Windowed => "windowed",
            Method::Online => "online",
            Method::Streaming => "streaming",
            Method::Dmdenkf => "dmdenkf",
            Method::Hankel => "hankel",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .find(|m| m.name() == s.trim())
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("unknown method '{s}' (expected one of windowed, online, streaming, dmdenkf, hankel)")))
    }
}

pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let mut out: Vec<Method> = list.split(',').filter(|s| !s.trim().is_empty()).map(Method::from_str).collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(Error::InvalidInput("no methods selected".into()));
    }
    Ok(out)
}

/// Filter settings for one DMDEnKF variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    pub alpha1: f64,
    pub alpha2: f64,
    pub ensemble_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RotationParams {
    pub steps: usize,
    pub spin_up: usize,
    pub delay: usize,
    pub rank: usize,
    pub window: usize,
    pub rho: f64,
    pub dmdenkf: FilterParams,
    pub hankel: FilterParams,
}

impl Default for RotationParams {
    fn default() -> Self {
        Self {
            steps: 500,
            spin_up: 100,
            delay: 50,
            rank: 2,
            window: 10,
            rho: 0.9,
            dmdenkf: FilterParams {
                alpha1: 5e-3,
                alpha2: 1e-5,
                ensemble_size: 50,
            },
            hankel: FilterParams {
                alpha1: 1e-2,
                alpha2: 2e-6,
                ensemble_size: 50,
            },
        }
    }
}

impl RotationParams {
    /// Filter config; `sigma` sets the measurement variance with a floor so
    /// noiseless runs stay well posed.
    pub fn filter_config(&self, method: Method, sigma: f64, seed: u64) -> DmdEnkfConfig {
        let (fp, delay) = match method {
            Method::Hankel => (self.hankel, self.delay),
            _ => (self.dmdenkf, 1),
        };
        DmdEnkfConfig {
            spin_up: self.spin_up,
            truncation: SvdTruncation::FixedRank(self.rank),
            delay,
            alpha1: fp.alpha1,
            alpha2: fp.alpha2,
            meas_var: vec![meas_var(sigma)],
            ensemble_size: fp.ensemble_size,
            seed,
            fitter: Fitter::Tdmd,
        }
    }
}

pub fn meas_var(sigma: f64) -> f64 {
    (sigma * sigma).max(1e-10)
}

/// Eigenvalue tracks of one rotation run, per method.
#[derive(Debug, Clone)]
pub struct RotationRun {
    pub run: usize,
    pub seed: u64,
    pub tracks: BTreeMap<Method, Vec<EigTrackRecord>>,
    /// Whether the DMDEnKF (or Hankel) spin-up found a conjugate pair.
    pub spin_up_pair: BTreeMap<Method, bool>,
}

pub fn rotation_series_spec(params: &RotationParams, sigma: f64, seed: u64) -> RotationSeriesSpec {
    RotationSeriesSpec {
        steps: params.steps,
        sigma,
        seed,
        ..Default::default()
    }
}

/// Runs every requested method over one noisy rotation series. Estimates
/// are recorded for each step after the spin-up, against the true angle of
/// that step.
pub fn rotation_run(params: &RotationParams, sigma: f64, run: usize, base_seed: u64, methods: &[Method]) -> Result<RotationRun> {
    let seed = derive_seed(base_seed, run as u64);
    let spec = rotation_series_spec(params, sigma, derive_seed(seed, 1));
    let data = gen_rotation(&spec);
    let y = &data.noisy;
    let m = params.spin_up;
    let trunc = SvdTruncation::FixedRank(params.rank);
    let mut tracks = BTreeMap::new();
    let mut spin_up_pair = BTreeMap::new();
    let record = |k: usize, spectrum: &[C64]| EigTrackRecord::from_spectrum(k + 1, 1.0, data.parameter[k], spectrum);

    for &method in methods {
        let mut recs = Vec::with_capacity(y.len() - m);
        match method {
            Method::Dmdenkf | Method::Hankel => {
                let cfg = params.filter_config(method, sigma, derive_seed(seed, 2 + method as u64));
                let mut model = spin_up(y, &cfg)?;
                spin_up_pair.insert(method, model.dmd().pairing().has_pair());
                for k in m..y.len() {
                    let step = model.assimilate(&y[k])?;
                    recs.push(record(k, &step.eigenvalues));
                }
            }
            Method::Streaming => {
                for k in m..y.len() {
                    let fit = streaming_tdmd_step(&y[..=k], &trunc)?;
                    recs.push(record(k, fit.eigenvalues()));
                }
            }
            Method::Windowed => {
                let mut state = WindowedTdmdState::with_history(params.window, trunc, &y[..m])?;
                for k in m..y.len() {
                    let (next, out) = windowed_tdmd_step(state, y[k].clone())?;
                    state = next;
                    let model = out.model().ok_or_else(|| Error::InvalidInput("window too small for the rank".into()))?;
                    recs.push(record(k, model.eigenvalues()));
                }
            }
            Method::Online => {
                let mut state = OnlineDmdState::from_series(&y[..m], params.rho)?;
                for k in m..y.len() {
                    state.update(&y[k - 1], &y[k]);
                    recs.push(record(k, &state.spectrum()));
                }
            }
        }
        tracks.insert(method, recs);
    }
    Ok(RotationRun {
        run,
        seed,
        tracks,
        spin_up_pair,
    })
}

/// Whether a TDMD spin-up on the first `m` noisy snapshots finds a pair.
pub fn rotation_spin_up_has_pair(params: &RotationParams, sigma: f64, delay: usize, run: usize, base_seed: u64) -> Result<bool> {
    let seed = derive_seed(base_seed, run as u64);
    let data = gen_rotation(&rotation_series_spec(params, sigma, derive_seed(seed, 1)));
    let fit = Fitter::Tdmd.fit(&data.noisy[..params.spin_up], delay, &SvdTruncation::FixedRank(params.rank))?;
    Ok(fit.pairing().has_pair())
}

/// Squared argument errors of one EnKF-vs-PF run, per filter label.
#[derive(Debug, Clone)]
pub struct FilterCompareRun {
    pub run: usize,
    pub pair_detected: bool,
    /// Mean over steps of the squared argument error, keyed by label
    /// (`enkf_N` or `pf`).
    pub mse: BTreeMap<String, f64>,
}

/// DMDEnKF with several ensemble sizes and a bootstrap particle filter,
/// all sharing the same data and spin-up model.
pub fn filter_compare_run(
    params: &RotationParams,
    sigma: f64,
    run: usize,
    base_seed: u64,
    ensemble_sizes: &[usize],
    particles: usize,
) -> Result<FilterCompareRun> {
    let seed = derive_seed(base_seed, run as u64);
    let data = gen_rotation(&rotation_series_spec(params, sigma, derive_seed(seed, 1)));
    let y = &data.noisy;
    let m = params.spin_up;
    let mut mse = BTreeMap::new();
    let arg_err = |k: usize, spectrum: &[C64]| {
        let r = EigTrackRecord::from_spectrum(k + 1, 1.0, data.parameter[k], spectrum);
        r.argument_error().powi(2)
    };
    let mut pair_detected = true;
    for &n in ensemble_sizes {
        let mut cfg = params.filter_config(Method::Dmdenkf, sigma, derive_seed(seed, 100 + n as u64));
        cfg.ensemble_size = n;
        let mut model = spin_up(y, &cfg)?;
        pair_detected = model.dmd().pairing().has_pair();
        let mut errs = Vec::with_capacity(y.len() - m);
        for k in m..y.len() {
            let step = model.assimilate(&y[k])?;
            errs.push(arg_err(k, &step.eigenvalues));
        }
        mse.insert(format!("enkf_{n}"), mean(&errs));
    }
    if particles > 0 {
        let cfg = params.filter_config(Method::Dmdenkf, sigma, derive_seed(seed, 99));
        let model = spin_up(y, &cfg)?;
        pair_detected = model.dmd().pairing().has_pair();
        let p0 = model.initial_covariance().expect("fresh spin-up keeps P0");
        let z0 = model.initial_mean().expect("fresh spin-up keeps the initial mean").clone();
        let mut ps = pf_init(&z0, &p0, particles, derive_seed(seed, 200))?;
        let spec = model.state_space()?;
        let mut errs = Vec::with_capacity(y.len() - m);
        for k in m..y.len() {
            ps = pf_step(&ps, &spec, &y[k], derive_seed(seed, 300 + k as u64))?;
            let spectrum = model.spectrum_of(ps.mean().as_view())?;
            errs.push(arg_err(k, &spectrum));
        }
        mse.insert("pf".to_string(), mean(&errs));
    }
    Ok(FilterCompareRun { run, pair_detected, mse })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PandemicParams {
    pub steps: usize,
    pub spin_up: usize,
    pub delay: usize,
    pub horizon: usize,
    pub window: usize,
    pub rho: f64,
    /// Singular values dropped by the non-Hankel truncations.
    pub drop_smallest: usize,
    pub hankel_rank: usize,
    /// Filter variances are `scale * max(sigma^2, floor)`.
    pub alpha1_scale: f64,
    pub alpha2_scale: f64,
    pub variance_floor: f64,
    pub ensemble_size: usize,
    pub gamma_start: f64,
    pub gamma_end: f64,
}

impl Default for PandemicParams {
    fn default() -> Self {
        Self {
            steps: 1000,
            spin_up: 100,
            delay: 50,
            horizon: 50,
            window: 10,
            rho: 0.9,
            drop_smallest: 1,
            hankel_rank: 2,
            alpha1_scale: 1.0,
            alpha2_scale: 1e-5,
            variance_floor: 1e-10,
            ensemble_size: 50,
            gamma_start: 1.01,
            gamma_end: 0.99,
        }
    }
}

impl PandemicParams {
    pub fn filter_config(&self, method: Method, sigma: f64, seed: u64) -> DmdEnkfConfig {
        let var = (sigma * sigma).max(self.variance_floor);
        let (truncation, delay) = match method {
            Method::Hankel => (SvdTruncation::FixedRank(self.hankel_rank), self.delay),
            _ => (SvdTruncation::DropSmallest(self.drop_smallest), 1),
        };
        DmdEnkfConfig {
            spin_up: self.spin_up,
            truncation,
            delay,
            alpha1: self.alpha1_scale * var,
            alpha2: self.alpha2_scale * var,
            meas_var: vec![var],
            ensemble_size: self.ensemble_size,
            seed,
            fitter: Fitter::Tdmd,
        }
    }
}

/// Mean relative error of `horizon`-step forecasts over one pandemic run.
#[derive(Debug, Clone)]
pub struct PandemicRun {
    pub run: usize,
    pub seed: u64,
    pub mean_error: BTreeMap<Method, f64>,
}

fn model_forecast(model: &DmdModel, x: &DVector<f64>, p: usize) -> Result<DVector<f64>> {
    model.propagate_state(x, model.eigenvalues(), p)
}

/// Feeds `y_m .. y_{steps-horizon}` one at a time and scores each method's
/// `horizon`-step forecast against the truth.
pub fn pandemic_run(params: &PandemicParams, sigma: f64, run: usize, base_seed: u64, methods: &[Method]) -> Result<PandemicRun> {
    let seed = derive_seed(base_seed, run as u64);
    let spec = PandemicSeriesSpec {
        steps: params.steps,
        gamma_start: params.gamma_start,
        gamma_end: params.gamma_end,
        seed_a: derive_seed(seed, 10),
        seed_noise: derive_seed(seed, 11),
        sigma,
        ..Default::default()
    };
    let data = gen_pandemic(&spec).series;
    let y = &data.noisy;
    let truth = &data.truth;
    let m = params.spin_up;
    let h = params.horizon;
    // Issue times are 0-based indices m-1 ..= steps-1-h.
    let issue: Vec<usize> = ((m - 1)..(params.steps - h)).collect();
    let trunc = SvdTruncation::DropSmallest(params.drop_smallest);
    let mut mean_error = BTreeMap::new();
    for &method in methods {
        let mut errs = Vec::with_capacity(issue.len());
        let mut score = |k: usize, forecast: DVector<f64>| -> Result<()> {
            errs.push(relative_error(&forecast, &truth[k + h])?);
            Ok(())
        };
        match method {
            Method::Dmdenkf | Method::Hankel => {
                let cfg = params.filter_config(method, sigma, derive_seed(seed, 2 + method as u64));
                let mut model = spin_up(y, &cfg)?;
                for &k in &issue {
                    if k >= m {
                        model.assimilate(&y[k])?;
                    }
                    score(k, model.forecast(h)?.point)?;
                }
            }
            Method::Streaming => {
                for &k in &issue {
                    let fit = streaming_tdmd_step(&y[..=k], &trunc)?;
                    score(k, model_forecast(&fit, &y[k], h)?)?;
                }
            }
            Method::Windowed => {
                let mut state = WindowedTdmdState::with_history(params.window, trunc, &y[..m - 1])?;
                for &k in &issue {
                    let (next, out) = windowed_tdmd_step(state, y[k].clone())?;
                    state = next;
                    let model = out.model().ok_or_else(|| Error::InvalidInput("window too small for the rank".into()))?;
                    score(k, model_forecast(model, &y[k], h)?)?;
                }
            }
            Method::Online => {
                let mut state = OnlineDmdState::from_series(&y[..m], params.rho)?;
                for &k in &issue {
                    if k >= m {
                        state.update(&y[k - 1], &y[k]);
                    }
                    score(k, operator_forecast(state.operator(), &y[k], h))?;
                }
            }
        }
        mean_error.insert(method, mean(&errs));
    }
    Ok(PandemicRun { run, seed, mean_error })
}
