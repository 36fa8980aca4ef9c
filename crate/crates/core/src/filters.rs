//! Perturbed-observation ensemble Kalman filter and bootstrap particle
//! filter over a user-supplied propagation map and a linear observation
//! operator.
//!
//! Ensembles store members as the columns of a `dim x N` matrix. The EnKF
//! gain is assembled from the ensemble anomalies, so the `dim x dim` sample
//! covariance is never formed.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::psd_factor;
use crate::rng::{rng_from_seed, standard_normal_vec, Rng};

/// Deterministic part of the state transition.
pub trait Dynamics {
    fn propagate(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
}

impl<F> Dynamics for F
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    fn propagate(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self(x)
    }
}

/// Linear dynamics `x -> F x`.
#[derive(Debug, Clone)]
pub struct LinearDynamics(pub DMatrix<f64>);

impl Dynamics for LinearDynamics {
    fn propagate(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.0 * x)
    }
}

/// Gaussian covariance, stored in the form cheapest to sample from.
#[derive(Debug, Clone)]
pub enum Covariance {
    Diagonal(DVector<f64>),
    Dense { matrix: DMatrix<f64>, factor: DMatrix<f64> },
    /// `F F^T` for a `dim x k` factor.
    Factor(DMatrix<f64>),
}

impl Covariance {
    pub fn diagonal(variances: DVector<f64>) -> Result<Self> {
        if let Some(v) = variances.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::NotPositiveSemidefinite { eigenvalue: *v });
        }
        Ok(Covariance::Diagonal(variances))
    }

    pub fn isotropic(dim: usize, variance: f64) -> Result<Self> {
        Self::diagonal(DVector::from_element(dim, variance))
    }

    /// Validates symmetry and positive semi-definiteness.
    pub fn dense(matrix: DMatrix<f64>) -> Result<Self> {
        let factor = psd_factor(&matrix)?;
        Ok(Covariance::Dense { matrix, factor })
    }

    pub fn from_factor(factor: DMatrix<f64>) -> Self {
        Covariance::Factor(factor)
    }

    pub fn dim(&self) -> usize {
        match self {
            Covariance::Diagonal(v) => v.len(),
            Covariance::Dense { matrix, .. } => matrix.nrows(),
            Covariance::Factor(f) => f.nrows(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Covariance::Diagonal(v) => DMatrix::from_diagonal(v),
            Covariance::Dense { matrix, .. } => matrix.clone(),
            Covariance::Factor(f) => f * f.transpose(),
        }
    }

    /// One draw from `N(0, self)`.
    pub fn sample(&self, rng: &mut Rng) -> DVector<f64> {
        match self {
            Covariance::Diagonal(v) => {
                let z = standard_normal_vec(rng, v.len());
                z.zip_map(v, |z, v| z * v.sqrt())
            }
            Covariance::Dense { factor, .. } => factor * standard_normal_vec(rng, factor.ncols()),
            Covariance::Factor(f) => f * standard_normal_vec(rng, f.ncols()),
        }
    }

    fn add_to(&self, m: &mut DMatrix<f64>) {
        match self {
            Covariance::Diagonal(v) => {
                for i in 0..v.len() {
                    m[(i, i)] += v[i];
                }
            }
            _ => *m += self.to_dense(),
        }
    }
}

/// State-space model `x_k = F(x_{k-1}) + w_k`, `y_k = H x_k + v_k`.
pub struct StateSpaceSpec<D> {
    pub propagate: D,
    pub obs_matrix: DMatrix<f64>,
    pub process_cov: Covariance,
    pub meas_cov: Covariance,
}

impl<D: Dynamics> StateSpaceSpec<D> {
    pub fn new(propagate: D, obs_matrix: DMatrix<f64>, process_cov: Covariance, meas_cov: Covariance) -> Result<Self> {
        if process_cov.dim() != obs_matrix.ncols() {
            return Err(Error::InvalidInput(format!(
                "process covariance is {0}x{0} but H has {1} columns",
                process_cov.dim(),
                obs_matrix.ncols()
            )));
        }
        if meas_cov.dim() != obs_matrix.nrows() {
            return Err(Error::InvalidInput(format!(
                "measurement covariance is {0}x{0} but H has {1} rows",
                meas_cov.dim(),
                obs_matrix.nrows()
            )));
        }
        Ok(Self {
            propagate,
            obs_matrix,
            process_cov,
            meas_cov,
        })
    }

    pub fn dim(&self) -> usize {
        self.obs_matrix.ncols()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_matrix.nrows()
    }

    /// Propagates one state and adds process noise.
    fn forecast_member(&self, x: &DVector<f64>, index: usize, rng: &mut Rng) -> Result<DVector<f64>> {
        let mut next = self.propagate.propagate(x).map_err(|e| Error::Member {
            index,
            source: Box::new(e),
        })?;
        if next.len() != self.dim() {
            return Err(Error::Member {
                index,
                source: Box::new(Error::InvalidInput(format!(
                    "propagation returned dimension {} instead of {}",
                    next.len(),
                    self.dim()
                ))),
            });
        }
        next += self.process_cov.sample(rng);
        Ok(next)
    }

    fn check_obs(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.obs_dim() {
            return Err(Error::InvalidInput(format!(
                "observation has dimension {} but H has {} rows",
                y.len(),
                self.obs_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    /// One member per column.
    pub members: DMatrix<f64>,
    pub rng_seed: u64,
}

impl Ensemble {
    pub fn new(members: DMatrix<f64>, rng_seed: u64) -> Result<Self> {
        if members.ncols() < 2 {
            return Err(Error::InvalidInput(format!(
                "ensemble needs at least 2 members, got {}",
                members.ncols()
            )));
        }
        Ok(Self { members, rng_seed })
    }

    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    pub fn dim(&self) -> usize {
        self.members.nrows()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.members.column_sum() / self.size() as f64
    }

    /// Anomalies `(x_i - mean) / sqrt(N - 1)`, so `A A^T` is the sample covariance.
    pub fn anomalies(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let scale = 1.0 / ((self.size() - 1) as f64).sqrt();
        let mut a = self.members.clone();
        for mut col in a.column_iter_mut() {
            col -= &mean;
            col *= scale;
        }
        a
    }
}

/// Sample mean and unbiased sample covariance (divisor `N - 1`).
pub fn ensemble_stats(ens: &Ensemble) -> (DVector<f64>, DMatrix<f64>) {
    let a = ens.anomalies();
    (ens.mean(), &a * a.transpose())
}

/// `N` independent draws from `N(mean, cov)`.
pub fn enkf_init(mean: &DVector<f64>, cov: &DMatrix<f64>, n: usize, seed: u64) -> Result<Ensemble> {
    enkf_init_with(mean, &Covariance::dense(cov.clone())?, n, seed)
}

pub fn enkf_init_with(mean: &DVector<f64>, cov: &Covariance, n: usize, seed: u64) -> Result<Ensemble> {
    if n < 2 {
        return Err(Error::InvalidInput(format!("ensemble needs at least 2 members, got {n}")));
    }
    if cov.dim() != mean.len() {
        return Err(Error::InvalidInput(format!(
            "mean has dimension {} but covariance is {1}x{1}",
            mean.len(),
            cov.dim()
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut members = DMatrix::zeros(mean.len(), n);
    for j in 0..n {
        members.set_column(j, &(mean + cov.sample(&mut rng)));
    }
    Ensemble::new(members, seed)
}

/// Outcome of one EnKF step with its diagnostics.
#[derive(Debug, Clone)]
pub struct EnkfStep {
    pub analysis: Ensemble,
    pub forecast_mean: DVector<f64>,
    /// `y - H * forecast_mean`.
    pub innovation: DVector<f64>,
}

pub fn enkf_step<D: Dynamics>(ens: &Ensemble, spec: &StateSpaceSpec<D>, y: &DVector<f64>, seed: u64) -> Result<Ensemble> {
    Ok(enkf_step_detailed(ens, spec, y, seed)?.analysis)
}

/// Forecast, gain from the forecast sample covariance, perturbed
/// observations and member-wise update.
pub fn enkf_step_detailed<D: Dynamics>(
    ens: &Ensemble,
    spec: &StateSpaceSpec<D>,
    y: &DVector<f64>,
    seed: u64,
) -> Result<EnkfStep> {
    spec.check_obs(y)?;
    if ens.dim() != spec.dim() {
        return Err(Error::InvalidInput(format!(
            "ensemble dimension {} does not match model dimension {}",
            ens.dim(),
            spec.dim()
        )));
    }
    let mut rng = rng_from_seed(seed);
    let n = ens.size();
    let mut forecast = DMatrix::zeros(ens.dim(), n);
    for j in 0..n {
        let x = ens.members.column(j).into_owned();
        forecast.set_column(j, &spec.forecast_member(&x, j, &mut rng)?);
    }
    let forecast = Ensemble::new(forecast, seed)?;
    let forecast_mean = forecast.mean();
    let a = forecast.anomalies();
    let h = &spec.obs_matrix;
    let ha = h * &a;
    let mut s = &ha * ha.transpose();
    spec.meas_cov.add_to(&mut s);
    let chol = Cholesky::<f64, Dyn>::new(s).ok_or(Error::SingularInnovation)?;

    // Innovations against perturbed observations, one column per member.
    let hx = h * &forecast.members;
    let mut d = DMatrix::zeros(y.len(), n);
    for j in 0..n {
        let v = spec.meas_cov.sample(&mut rng);
        d.set_column(j, &(y + v - hx.column(j)));
    }
    let s_inv_d = chol.solve(&d);
    let members = &forecast.members + (&a * ha.transpose()) * s_inv_d;
    let innovation = y - h * &forecast_mean;
    Ok(EnkfStep {
        analysis: Ensemble::new(members, seed)?,
        forecast_mean,
        innovation,
    })
}

/// Weighted particles, one per column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleSet {
    pub particles: DMatrix<f64>,
    pub weights: DVector<f64>,
}

impl ParticleSet {
    pub fn size(&self) -> usize {
        self.particles.ncols()
    }

    pub fn dim(&self) -> usize {
        self.particles.nrows()
    }

    pub fn mean(&self) -> DVector<f64> {
        &self.particles * &self.weights
    }

    pub fn ess(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Weighted variance per dimension.
    pub fn variance(&self) -> DVector<f64> {
        let mean = self.mean();
        DVector::from_fn(self.dim(), |i, _| {
            (0..self.size())
                .map(|j| self.weights[j] * (self.particles[(i, j)] - mean[i]).powi(2))
                .sum()
        })
    }
}

pub fn pf_init(mean: &DVector<f64>, cov: &Covariance, n: usize, seed: u64) -> Result<ParticleSet> {
    let ens = enkf_init_with(mean, cov, n, seed)?;
    Ok(ParticleSet {
        particles: ens.members,
        weights: DVector::from_element(n, 1.0 / n as f64),
    })
}

#[derive(Debug, Clone)]
pub struct PfStep {
    pub particles: ParticleSet,
    /// ESS after reweighting, before any resampling.
    pub ess: f64,
    pub resampled: bool,
}

pub fn pf_step<D: Dynamics>(ps: &ParticleSet, spec: &StateSpaceSpec<D>, y: &DVector<f64>, seed: u64) -> Result<ParticleSet> {
    Ok(pf_step_detailed(ps, spec, y, seed)?.particles)
}

/// Bootstrap step: propagate with process noise, reweight by the Gaussian
/// likelihood, resample multinomially when `ESS < N / 2`.
///
/// Divergence is reported when every particle's likelihood underflows
/// `f64` (log-likelihood below `ln(f64::MIN_POSITIVE)`).
pub fn pf_step_detailed<D: Dynamics>(
    ps: &ParticleSet,
    spec: &StateSpaceSpec<D>,
    y: &DVector<f64>,
    seed: u64,
) -> Result<PfStep> {
    spec.check_obs(y)?;
    if ps.dim() != spec.dim() {
        return Err(Error::InvalidInput(format!(
            "particle dimension {} does not match model dimension {}",
            ps.dim(),
            spec.dim()
        )));
    }
    let r = spec.meas_cov.to_dense();
    let chol = Cholesky::<f64, Dyn>::new(r).ok_or_else(|| {
        Error::InvalidInput("particle filter needs a positive definite measurement covariance".into())
    })?;
    let mut rng = rng_from_seed(seed);
    let n = ps.size();
    let mut particles = DMatrix::zeros(ps.dim(), n);
    for j in 0..n {
        let x = ps.particles.column(j).into_owned();
        particles.set_column(j, &spec.forecast_member(&x, j, &mut rng)?);
    }
    let resid = DMatrix::from_fn(y.len(), n, |i, _| y[i]) - &spec.obs_matrix * &particles;
    let whitened = chol.l().solve_lower_triangular(&resid).expect("Cholesky factor is invertible");
    let maha: Vec<f64> = whitened.column_iter().map(|c| c.norm_squared()).collect();
    let log_floor = f64::MIN_POSITIVE.ln();
    if maha.iter().all(|m| -0.5 * m < log_floor) {
        let min = maha.iter().cloned().fold(f64::INFINITY, f64::min);
        return Err(Error::FilterDivergence { min_mahalanobis: min.sqrt() });
    }
    let log_w: Vec<f64> = (0..n)
        .map(|j| if ps.weights[j] > 0.0 { ps.weights[j].ln() - 0.5 * maha[j] } else { f64::NEG_INFINITY })
        .collect();
    let shift = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        let min = maha.iter().cloned().fold(f64::INFINITY, f64::min);
        return Err(Error::FilterDivergence { min_mahalanobis: min.sqrt() });
    }
    let mut weights = DVector::from_iterator(n, log_w.iter().map(|l| (l - shift).exp()));
    let total = weights.sum();
    weights /= total;
    let mut set = ParticleSet { particles, weights };
    let ess = set.ess();
    let resampled = ess < n as f64 / 2.0;
    if resampled {
        set = multinomial_resample(&set, &mut rng);
    }
    Ok(PfStep {
        particles: set,
        ess,
        resampled,
    })
}

fn multinomial_resample(ps: &ParticleSet, rng: &mut Rng) -> ParticleSet {
    let n = ps.size();
    let dist = WeightedIndex::new(ps.weights.iter()).expect("weights are normalised and finite");
    let mut particles = DMatrix::zeros(ps.dim(), n);
    for j in 0..n {
        let k = dist.sample(rng);
        particles.set_column(j, &ps.particles.column(k));
    }
    ParticleSet {
        particles,
        weights: DVector::from_element(n, 1.0 / n as f64),
    }
}
