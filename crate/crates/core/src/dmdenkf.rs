//! DMDEnKF: a DMD (or Hankel-DMD) spin-up whose temporal modes and state
//! are then filtered jointly by an ensemble Kalman filter.
//!
//! The filter state is `z = [x; mu]`, where `x` is the (possibly delay
//! embedded) DMD state and `mu` is a real encoding of the spectrum that
//! keeps real modes real and conjugate pairs intact. Spatial modes stay
//! fixed at their spin-up values.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::dmd::{
    arg_2pi, build_snapshots, cpow, fit_exact_dmd, fit_tdmd, DmdModel, DmdModelRecord, ModeLink, Pairing,
    SvdTruncation, DEFAULT_PAIR_TOL,
};
use crate::error::{Error, Result};
use crate::filters::{enkf_init_with, enkf_step_detailed, Covariance, Ensemble, StateSpaceSpec};
use crate::linalg::{percentile, C64};
use crate::rng::derive_seed;

/// Real parameterisation of a conjugate-closed spectrum.
///
/// Real modes and the first member of each pair carry a modulus; the second
/// member of a pair carries the argument of the first. Real modes also keep
/// their sign so negative real eigenvalues survive the round trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalModeEncoding {
    pub mu: DVector<f64>,
    pub pairing: Pairing,
    pub real_sign: Vec<f64>,
}

impl TemporalModeEncoding {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn decode(&self) -> Result<Vec<C64>> {
        decode_mu(self.mu.as_view(), &self.pairing, &self.real_sign)
    }
}

pub fn encode_mu(lambda: &[C64], pairing: &Pairing) -> Result<TemporalModeEncoding> {
    pairing.check(lambda, DEFAULT_PAIR_TOL)?;
    let r = lambda.len();
    let mut mu = DVector::zeros(r);
    let mut real_sign = vec![1.0; r];
    for (i, link) in pairing.0.iter().enumerate() {
        match *link {
            ModeLink::Real => {
                mu[i] = lambda[i].re.abs();
                if lambda[i].re < 0.0 {
                    real_sign[i] = -1.0;
                }
            }
            ModeLink::Leader { .. } => mu[i] = lambda[i].norm(),
            ModeLink::Follower { partner } => mu[i] = arg_2pi(lambda[partner]),
        }
    }
    Ok(TemporalModeEncoding {
        mu,
        pairing: pairing.clone(),
        real_sign,
    })
}

pub fn decode_lambda(enc: &TemporalModeEncoding) -> Result<Vec<C64>> {
    enc.decode()
}

fn decode_mu(mu: DVectorView<f64>, pairing: &Pairing, real_sign: &[f64]) -> Result<Vec<C64>> {
    let mut out = vec![C64::new(0.0, 0.0); mu.len()];
    for (i, link) in pairing.0.iter().enumerate() {
        match *link {
            ModeLink::Real => {
                if mu[i] < 0.0 {
                    return Err(Error::NegativeModulus { index: i, value: mu[i] });
                }
                out[i] = C64::new(real_sign[i] * mu[i], 0.0);
            }
            ModeLink::Leader { partner } => {
                if mu[i] < 0.0 {
                    return Err(Error::NegativeModulus { index: i, value: mu[i] });
                }
                let z = C64::from_polar(mu[i], mu[partner]);
                out[i] = z;
                out[partner] = z.conj();
            }
            ModeLink::Follower { .. } => {}
        }
    }
    Ok(out)
}

/// DMD variant used for the spin-up fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fitter {
    Exact,
    #[default]
    Tdmd,
}

impl Fitter {
    pub fn fit(&self, series: &[DVector<f64>], d: usize, trunc: &SvdTruncation) -> Result<DmdModel> {
        let pair = build_snapshots(series, d)?;
        match self {
            Fitter::Exact => fit_exact_dmd(&pair, trunc),
            Fitter::Tdmd => fit_tdmd(&pair, trunc),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmdEnkfConfig {
    /// Spin-up length `m`.
    pub spin_up: usize,
    pub truncation: SvdTruncation,
    /// Delay-embedding dimension; 1 gives the plain DMDEnKF.
    pub delay: usize,
    /// State process variance.
    pub alpha1: f64,
    /// Temporal-mode process variance.
    pub alpha2: f64,
    /// Diagonal of the measurement covariance; a single entry is broadcast.
    pub meas_var: Vec<f64>,
    pub ensemble_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub fitter: Fitter,
}

impl DmdEnkfConfig {
    /// Config with `alpha1 = 1e-2 * var`, `alpha2 = 1e-5 * alpha1` and 50
    /// members, where `var` is the pooled variance of the spin-up data.
    pub fn with_defaults(series: &[DVector<f64>], spin_up: usize, truncation: SvdTruncation, delay: usize, meas_var: Vec<f64>, seed: u64) -> Self {
        let values: Vec<f64> = series.iter().take(spin_up).flat_map(|v| v.iter().cloned()).collect();
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let alpha1 = 1e-2 * var.max(f64::MIN_POSITIVE);
        Self {
            spin_up,
            truncation,
            delay,
            alpha1,
            alpha2: 1e-5 * alpha1,
            meas_var,
            ensemble_size: 50,
            seed,
            fitter: Fitter::default(),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.delay == 0 {
            return Err(Error::InvalidInput("delay must be at least 1".into()));
        }
        if !(self.alpha1 > 0.0 && self.alpha2 > 0.0) {
            return Err(Error::InvalidInput("alpha1 and alpha2 must be positive".into()));
        }
        if self.alpha2 >= self.alpha1 {
            return Err(Error::InvalidInput(format!(
                "alpha2 ({:e}) must be smaller than alpha1 ({:e})",
                self.alpha2, self.alpha1
            )));
        }
        if self.meas_var.len() != 1 && self.meas_var.len() != n {
            return Err(Error::InvalidInput(format!(
                "meas_var has {} entries for a {n}-dimensional state",
                self.meas_var.len()
            )));
        }
        if self.meas_var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidInput("measurement variances must be positive".into()));
        }
        if self.ensemble_size < 2 {
            return Err(Error::InvalidInput("ensemble_size must be at least 2".into()));
        }
        Ok(())
    }

    fn meas_diag(&self, n: usize) -> DVector<f64> {
        if self.meas_var.len() == 1 {
            DVector::from_element(n, self.meas_var[0])
        } else {
            DVector::from_vec(self.meas_var.clone())
        }
    }
}

/// Per-step filter output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Analysis mean restricted to the original `n` dimensions.
    pub state: DVector<f64>,
    /// Spectrum decoded from the analysis-mean `mu`.
    pub eigenvalues: Vec<C64>,
    /// Forecast mean (first `n` dimensions) before the update.
    pub forecast: DVector<f64>,
    /// Norm of `y - H * forecast_mean`.
    pub innovation_norm: f64,
}

/// Ensemble forecast restricted to the original dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub steps: usize,
    pub point: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    /// One column per ensemble member.
    pub members: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct DmdEnkfModel {
    dmd: Arc<DmdModel>,
    encoding: TemporalModeEncoding,
    ensemble: Ensemble,
    config: DmdEnkfConfig,
    history: Vec<StepRecord>,
    steps: u64,
    spin_up_seen: usize,
    z0: Option<DVector<f64>>,
    p0_factor: Option<Arc<DMatrix<f64>>>,
}

/// Fits the spin-up model on the first `config.spin_up` snapshots and draws
/// the initial ensemble.
pub fn spin_up(series: &[DVector<f64>], config: &DmdEnkfConfig) -> Result<DmdEnkfModel> {
    spin_up_seeded(series, config, derive_seed(config.seed, 0))
}

fn spin_up_seeded(series: &[DVector<f64>], config: &DmdEnkfConfig, init_seed: u64) -> Result<DmdEnkfModel> {
    let m = config.spin_up;
    if series.len() < m {
        return Err(Error::InsufficientData {
            needed: m,
            got: series.len(),
        });
    }
    let n = series.first().map(|v| v.len()).unwrap_or(0);
    config.validate(n)?;
    let data = &series[..m];
    let dmd = config.fitter.fit(data, config.delay, &config.truncation)?;
    for w in dmd.warnings() {
        log::warn!("spin-up: {w:?}");
    }
    let pair = build_snapshots(data, config.delay)?;
    let encoding = encode_mu(dmd.eigenvalues(), dmd.pairing())?;
    let n_eff = dmd.n_eff();
    let r = dmd.rank();

    // P0 = blockdiag(E E^T / m, alpha2 I_r), sampled through its factor.
    let resid = dmd.one_step_residuals(&pair);
    let cols = resid.ncols();
    let mut factor = DMatrix::zeros(n_eff + r, cols + r);
    factor
        .view_mut((0, 0), (n_eff, cols))
        .copy_from(&(resid / (m as f64).sqrt()));
    for i in 0..r {
        factor[(n_eff + i, cols + i)] = config.alpha2.sqrt();
    }
    let mut z0 = DVector::zeros(n_eff + r);
    z0.rows_mut(0, n_eff).copy_from(&pair.last_state());
    z0.rows_mut(n_eff, r).copy_from(&encoding.mu);
    let factor = Arc::new(factor);
    let ensemble = enkf_init_with(&z0, &Covariance::from_factor((*factor).clone()), config.ensemble_size, init_seed)?;
    Ok(DmdEnkfModel {
        dmd: Arc::new(dmd),
        encoding,
        ensemble,
        config: config.clone(),
        history: Vec::new(),
        steps: 0,
        spin_up_seen: m,
        z0: Some(z0),
        p0_factor: Some(factor),
    })
}

impl DmdEnkfModel {
    pub fn dmd(&self) -> &DmdModel {
        &self.dmd
    }

    pub fn encoding(&self) -> &TemporalModeEncoding {
        &self.encoding
    }

    pub fn ensemble(&self) -> &Ensemble {
        &self.ensemble
    }

    pub fn config(&self) -> &DmdEnkfConfig {
        &self.config
    }

    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }

    pub fn n(&self) -> usize {
        self.dmd.n()
    }

    pub fn n_eff(&self) -> usize {
        self.dmd.n_eff()
    }

    /// Snapshots used by the most recent spin-up fit.
    pub fn spin_up_length(&self) -> usize {
        self.spin_up_seen
    }

    /// Current analysis mean of the augmented state.
    pub fn mean_state(&self) -> DVector<f64> {
        self.ensemble.mean()
    }

    /// Current state estimate in the original dimensions.
    pub fn state_estimate(&self) -> DVector<f64> {
        self.mean_state().rows(0, self.n()).into_owned()
    }

    /// Spectrum decoded from the ensemble-mean `mu`.
    pub fn eigenvalue_estimate(&self) -> Result<Vec<C64>> {
        let z = self.mean_state();
        decode_mu(z.rows(self.n_eff(), self.dmd.rank()), &self.encoding.pairing, &self.encoding.real_sign)
    }

    /// Spectrum encoded in an augmented state `z = [x; mu]`.
    pub fn spectrum_of(&self, z: DVectorView<f64>) -> Result<Vec<C64>> {
        self.member_spectrum(z)
    }

    /// Initial covariance `P0` of the augmented state, available until the
    /// model is restored from a checkpoint.
    pub fn initial_covariance(&self) -> Option<Covariance> {
        self.p0_factor.as_ref().map(|f| Covariance::from_factor((**f).clone()))
    }

    /// Initial augmented mean `[x_m; mu]`, kept alongside `P0`.
    pub fn initial_mean(&self) -> Option<&DVector<f64>> {
        self.z0.as_ref()
    }

    fn member_spectrum(&self, z: DVectorView<f64>) -> Result<Vec<C64>> {
        decode_mu(z.rows(self.n_eff(), self.dmd.rank()), &self.encoding.pairing, &self.encoding.real_sign)
    }

    /// Augmented state-space model: member-wise spectral propagation, process
    /// covariance `blockdiag(alpha1 I, alpha2 I_r)` and observation of the
    /// newest `n` state rows.
    pub fn state_space(&self) -> Result<StateSpaceSpec<impl Fn(&DVector<f64>) -> Result<DVector<f64>> + '_>> {
        let n = self.n();
        let n_eff = self.n_eff();
        let r = self.dmd.rank();
        let dim = n_eff + r;
        let propagate = move |z: &DVector<f64>| -> Result<DVector<f64>> {
            let lambda = self.member_spectrum(z.as_view())?;
            let mut out = z.clone();
            let x = self.dmd.apply_spectrum(z.rows(0, n_eff), &lambda, 1);
            out.rows_mut(0, n_eff).copy_from(&x);
            Ok(out)
        };
        let mut q = DVector::from_element(dim, self.config.alpha1);
        q.rows_mut(n_eff, r).fill(self.config.alpha2);
        let h = DMatrix::from_fn(n, dim, |i, j| if i == j { 1.0 } else { 0.0 });
        StateSpaceSpec::new(
            propagate,
            h,
            Covariance::diagonal(q)?,
            Covariance::diagonal(self.config.meas_diag(n))?,
        )
    }

    /// One EnKF step; each member propagates under its own decoded spectrum.
    /// The model is left untouched on error.
    pub fn assimilate(&mut self, y: &DVector<f64>) -> Result<&StepRecord> {
        if y.len() != self.n() {
            return Err(Error::InvalidInput(format!(
                "observation has dimension {} but the model state has {}",
                y.len(),
                self.n()
            )));
        }
        let seed = derive_seed(self.config.seed, self.steps + 1);
        let step = {
            let spec = self.state_space()?;
            enkf_step_detailed(&self.ensemble, &spec, y, seed)?
        };
        let analysis_mean = step.analysis.mean();
        let n = self.n();
        let eigenvalues = decode_mu(
            analysis_mean.rows(self.n_eff(), self.dmd.rank()),
            &self.encoding.pairing,
            &self.encoding.real_sign,
        )?;
        self.ensemble = step.analysis;
        self.steps += 1;
        self.history.push(StepRecord {
            state: analysis_mean.rows(0, n).into_owned(),
            eigenvalues,
            forecast: step.forecast_mean.rows(0, n).into_owned(),
            innovation_norm: step.innovation.norm(),
        });
        Ok(self.history.last().expect("just pushed"))
    }

    /// `p`-step forecast from every member without process noise.
    pub fn forecast(&self, p: usize) -> Result<Forecast> {
        if p == 0 {
            return Err(Error::InvalidInput("forecast horizon must be at least 1".into()));
        }
        Ok(self.forecast_horizons(p)?.pop().expect("p >= 1"))
    }

    /// Forecasts for every horizon `1..=max_p`.
    pub fn forecast_horizons(&self, max_p: usize) -> Result<Vec<Forecast>> {
        let n = self.n();
        let n_eff = self.n_eff();
        let r = self.dmd.rank();
        let size = self.ensemble.size();
        let modes = self.dmd.spatial_modes();
        let pinv = self.dmd.spatial_modes_pinv();
        let mut per_horizon: Vec<DMatrix<f64>> = (0..max_p).map(|_| DMatrix::zeros(n, size)).collect();
        for j in 0..size {
            let z = self.ensemble.members.column(j);
            let lambda = self.member_spectrum(z).map_err(|e| Error::Member {
                index: j,
                source: Box::new(e),
            })?;
            let coeffs: Vec<C64> = (0..r)
                .map(|i| (0..n_eff).fold(C64::new(0.0, 0.0), |acc, k| acc + pinv[(i, k)] * z[k]))
                .collect();
            for (h, out) in per_horizon.iter_mut().enumerate() {
                let p = h + 1;
                for row in 0..n {
                    let mut acc = C64::new(0.0, 0.0);
                    for i in 0..r {
                        acc += modes[(row, i)] * coeffs[i] * cpow(lambda[i], p);
                    }
                    out[(row, j)] = acc.re;
                }
            }
        }
        Ok(per_horizon
            .into_iter()
            .enumerate()
            .map(|(h, members)| summarize(h + 1, members))
            .collect())
    }

    /// Refits the spin-up on all data seen so far when the rolling mean of
    /// `recent_errors` over `window` steps has exceeded `threshold` for
    /// `window` consecutive steps. History and step count carry over.
    pub fn detect_and_respin(
        self,
        recent_errors: &[f64],
        threshold: f64,
        window: usize,
        seen: &[DVector<f64>],
    ) -> Result<(DmdEnkfModel, bool)> {
        if !should_respin(recent_errors, threshold, window) {
            return Ok((self, false));
        }
        let mut config = self.config.clone();
        config.spin_up = seen.len();
        log::info!("respinning on {} snapshots after {} filter steps", seen.len(), self.steps);
        let mut fresh = spin_up_seeded(seen, &config, derive_seed(self.config.seed, RESPIN_STREAM + self.steps))?;
        fresh.config.spin_up = self.config.spin_up;
        fresh.history = self.history;
        fresh.steps = self.steps;
        Ok((fresh, true))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            dmd: self.dmd.to_record(),
            encoding: self.encoding.clone(),
            ensemble: self.ensemble.clone(),
            history: self.history.clone(),
            steps: self.steps,
            spin_up_seen: self.spin_up_seen,
        }
    }

    pub fn from_checkpoint(cp: &Checkpoint) -> Result<Self> {
        if cp.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidInput(format!("unsupported checkpoint version {}", cp.version)));
        }
        let dmd = DmdModel::from_record(&cp.dmd)?;
        if cp.ensemble.dim() != dmd.n_eff() + dmd.rank() {
            return Err(Error::InvalidInput("checkpoint ensemble does not match its model".into()));
        }
        Ok(Self {
            dmd: Arc::new(dmd),
            encoding: cp.encoding.clone(),
            ensemble: cp.ensemble.clone(),
            config: cp.config.clone(),
            history: cp.history.clone(),
            steps: cp.steps,
            spin_up_seen: cp.spin_up_seen,
            z0: None,
            p0_factor: None,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_checkpoint())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_checkpoint(&serde_json::from_str(s)?)
    }
}

const RESPIN_STREAM: u64 = 1 << 40;

pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint of a [`DmdEnkfModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: DmdEnkfConfig,
    pub dmd: DmdModelRecord,
    pub encoding: TemporalModeEncoding,
    pub ensemble: Ensemble,
    pub history: Vec<StepRecord>,
    pub steps: u64,
    pub spin_up_seen: usize,
}

fn summarize(steps: usize, members: DMatrix<f64>) -> Forecast {
    let n = members.nrows();
    let size = members.ncols() as f64;
    let point = members.column_sum() / size;
    let mut lower = DVector::zeros(n);
    let mut upper = DVector::zeros(n);
    for i in 0..n {
        let row: Vec<f64> = members.row(i).iter().cloned().collect();
        lower[i] = percentile(&row, 2.5);
        upper[i] = percentile(&row, 97.5);
    }
    Forecast {
        steps,
        point,
        lower,
        upper,
        members,
    }
}

/// True when the `window`-step rolling mean of `errors` has stayed above
/// `threshold` for the last `window` steps.
pub fn should_respin(errors: &[f64], threshold: f64, window: usize) -> bool {
    if window == 0 || errors.len() < 2 * window - 1 {
        return false;
    }
    let tail = &errors[errors.len() - (2 * window - 1)..];
    (0..window).all(|s| tail[s..s + window].iter().sum::<f64>() / window as f64 > threshold)
}

/// Robust default trigger level: median plus three median absolute
/// deviations of the innovation magnitudes.
pub fn default_respin_threshold(errors: &[f64]) -> Option<f64> {
    if errors.is_empty() {
        return None;
    }
    let med = percentile(errors, 50.0);
    let dev: Vec<f64> = errors.iter().map(|e| (e - med).abs()).collect();
    Some(med + 3.0 * percentile(&dev, 50.0))
}

pub const DEFAULT_RESPIN_WINDOW: usize = 10;

/// Runs spin-up then assimilates the remaining observations in order,
/// calling `each` after every step.
pub fn run_filter<F>(series: &[DVector<f64>], config: &DmdEnkfConfig, mut each: F) -> Result<DmdEnkfModel>
where
    F: FnMut(usize, &DmdEnkfModel) -> Result<()>,
{
    let mut model = spin_up(series, config)?;
    for (k, y) in series.iter().enumerate().skip(config.spin_up) {
        model.assimilate(y)?;
        each(k, &model)?;
    }
    Ok(model)
}

/// Rolling buffer of recent innovation magnitudes for respin detection.
#[derive(Debug, Clone, Default)]
pub struct InnovationMonitor {
    errors: VecDeque<f64>,
    capacity: usize,
}

impl InnovationMonitor {
    pub fn new(capacity: usize) -> Self {
        Self {
            errors: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, e: f64) {
        if self.errors.len() == self.capacity {
            self.errors.pop_front();
        }
        self.errors.push_back(e);
    }

    pub fn errors(&self) -> Vec<f64> {
        self.errors.iter().cloned().collect()
    }

    pub fn clear(&mut self) {
        self.errors.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn encode_examples() {
        let l = [c(2.0, 0.0)];
        let enc = encode_mu(&l, &Pairing::detect(&l, 1e-8).unwrap()).unwrap();
        assert_eq!(enc.mu.as_slice(), &[2.0]);

        let z = C64::from_polar(0.9, PI / 4.0);
        let l = [z, z.conj()];
        let enc = encode_mu(&l, &Pairing::detect(&l, 1e-8).unwrap()).unwrap();
        assert_relative_eq!(enc.mu[0], 0.9, epsilon = 1e-15);
        assert_relative_eq!(enc.mu[1], PI / 4.0, epsilon = 1e-15);
        let back = enc.decode().unwrap();
        assert!((back[0] - z).norm() < 1e-15 && (back[1] - z.conj()).norm() < 1e-15);

        let w = C64::from_polar(0.5, PI / 3.0);
        let l = [c(1.0, 0.0), w, w.conj()];
        let enc = encode_mu(&l, &Pairing::detect(&l, 1e-8).unwrap()).unwrap();
        assert_relative_eq!(enc.mu, DVector::from_vec(vec![1.0, 0.5, PI / 3.0]), epsilon = 1e-15);
    }

    #[test]
    fn negative_real_mode_round_trips() {
        let l = [c(-0.7, 0.0)];
        let enc = encode_mu(&l, &Pairing::detect(&l, 1e-8).unwrap()).unwrap();
        assert_eq!(enc.mu[0], 0.7);
        assert_eq!(enc.decode().unwrap()[0], c(-0.7, 0.0));
    }

    #[test]
    fn decode_rejects_negative_modulus() {
        let enc = TemporalModeEncoding {
            mu: DVector::from_vec(vec![-0.1]),
            pairing: Pairing(vec![ModeLink::Real]),
            real_sign: vec![1.0],
        };
        assert!(matches!(enc.decode(), Err(Error::NegativeModulus { index: 0, .. })));
    }

    #[test]
    fn encode_rejects_open_spectrum() {
        let l = [c(0.5, 0.5), c(0.5, -0.4)];
        let pairing = Pairing(vec![ModeLink::Leader { partner: 1 }, ModeLink::Follower { partner: 0 }]);
        assert!(matches!(encode_mu(&l, &pairing), Err(Error::ConjugateStructure(_))));
    }

    fn doubling(m: usize) -> Vec<DVector<f64>> {
        (0..m).map(|k| DVector::from_element(1, 2f64.powi(k as i32))).collect()
    }

    fn config(m: usize) -> DmdEnkfConfig {
        DmdEnkfConfig {
            spin_up: m,
            truncation: SvdTruncation::FixedRank(1),
            delay: 1,
            alpha1: 1e-12,
            alpha2: 1e-14,
            meas_var: vec![1e-6],
            ensemble_size: 20,
            seed: 5,
            fitter: Fitter::Exact,
        }
    }

    #[test]
    fn noiseless_doubling_spin_up() {
        let series = doubling(10);
        let model = spin_up(&series, &config(10)).unwrap();
        let z = model.mean_state();
        assert_relative_eq!(z[0], 512.0, max_relative = 1e-5);
        assert_relative_eq!(z[1], 2.0, epsilon = 1e-5);
        let f = model.forecast(1).unwrap();
        assert_relative_eq!(f.point[0], 2.0 * z[0], max_relative = 1e-8);
    }

    #[test]
    fn short_series_is_rejected() {
        assert!(matches!(spin_up(&doubling(5), &config(10)), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn config_validation() {
        let mut cfg = config(10);
        cfg.alpha2 = cfg.alpha1;
        assert!(matches!(spin_up(&doubling(10), &cfg), Err(Error::InvalidInput(_))));
        let mut cfg = config(10);
        cfg.ensemble_size = 1;
        assert!(spin_up(&doubling(10), &cfg).is_err());
    }

    #[test]
    fn degenerate_ensemble_has_zero_width_interval() {
        let members = DMatrix::from_element(2, 5, 1.5);
        let f = summarize(1, members);
        assert_eq!(f.lower, f.point);
        assert_eq!(f.upper, f.point);
    }

    #[test]
    fn respin_rule() {
        assert!(!should_respin(&[], 1.0, 3));
        assert!(!should_respin(&[0.1; 20], 1.0, 3));
        assert!(should_respin(&[5.0; 5], 1.0, 3));
        // Rolling mean dips below the threshold inside the last window.
        assert!(!should_respin(&[5.0, 5.0, 0.0, 0.0, 0.0, 5.0, 5.0], 2.0, 3));
        assert_relative_eq!(default_respin_threshold(&[1.0, 2.0, 3.0]).unwrap(), 5.0);
    }

    #[test]
    fn history_grows_per_observation() {
        let series = doubling(14);
        let mut model = spin_up(&series, &config(10)).unwrap();
        for y in &series[10..] {
            model.assimilate(y).unwrap();
        }
        assert_eq!(model.history().len(), 4);
        assert_relative_eq!(model.eigenvalue_estimate().unwrap()[0].re, 2.0, epsilon = 1e-4);
    }
}
