//! Snapshot matrices, exact DMD and total-least-squares DMD.
//!
//! A fitted [`DmdModel`] holds the spatial modes, temporal modes
//! (eigenvalues) and amplitudes of the reduced linear operator, plus the
//! complex-conjugate pairing of its spectrum. Eigenvalues are ordered by
//! descending modulus, then ascending argument in `[0, 2pi)`, so the member
//! of a conjugate pair with positive imaginary part always comes first.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{numerical_rank, pinv_complex, real_eigen, thin_svd, C64};

/// Absolute tolerance on eigenvalue differences for conjugate-pair detection.
pub const DEFAULT_PAIR_TOL: f64 = 1e-8;

/// Singular values below this fraction of the largest are treated as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Consecutive-snapshot matrices `X` and `X'`, optionally delay embedded.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotPair {
    x: DMatrix<f64>,
    x_prime: DMatrix<f64>,
    n: usize,
    d: usize,
}

impl SnapshotPair {
    pub fn from_matrices(x: DMatrix<f64>, x_prime: DMatrix<f64>, n: usize, d: usize) -> Result<Self> {
        if x.shape() != x_prime.shape() {
            return Err(Error::InvalidInput(format!(
                "X is {:?} but X' is {:?}",
                x.shape(),
                x_prime.shape()
            )));
        }
        if d == 0 || x.nrows() != n * d {
            return Err(Error::InvalidInput(format!(
                "{} rows do not match n={n}, d={d}",
                x.nrows()
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::InsufficientData { needed: d + 1, got: d });
        }
        Ok(Self { x, x_prime, n, d })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn x_prime(&self) -> &DMatrix<f64> {
        &self.x_prime
    }

    /// Original state dimension.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Delay-embedding dimension (1 = no embedding).
    pub fn d(&self) -> usize {
        self.d
    }

    /// Embedded state dimension `n * d`.
    pub fn n_eff(&self) -> usize {
        self.n * self.d
    }

    pub fn columns(&self) -> usize {
        self.x.ncols()
    }

    /// The oldest embedded state (first column of `X`).
    pub fn first_state(&self) -> DVector<f64> {
        self.x.column(0).into_owned()
    }

    /// The newest embedded state (last column of `X'`).
    pub fn last_state(&self) -> DVector<f64> {
        self.x_prime.column(self.x_prime.ncols() - 1).into_owned()
    }
}

/// Embeds the `d` most recent states ending at index `k`, newest on top.
pub fn delay_embed(series: &[DVector<f64>], k: usize, d: usize) -> DVector<f64> {
    let n = series[k].len();
    let mut out = DVector::zeros(n * d);
    for lag in 0..d {
        out.rows_mut(lag * n, n).copy_from(&series[k - lag]);
    }
    out
}

/// Builds `X`, `X'` from an ordered series. With `d > 1` each column is the
/// delay embedding `[x_k; x_{k-1}; ...; x_{k-d+1}]`.
pub fn build_snapshots(series: &[DVector<f64>], d: usize) -> Result<SnapshotPair> {
    if d == 0 {
        return Err(Error::InvalidInput("delay dimension must be at least 1".into()));
    }
    let m = series.len();
    if m <= d {
        return Err(Error::InsufficientData { needed: d + 1, got: m });
    }
    let n = series[0].len();
    if n == 0 {
        return Err(Error::InvalidInput("state dimension is zero".into()));
    }
    if let Some(bad) = series.iter().position(|v| v.len() != n) {
        return Err(Error::InvalidInput(format!(
            "snapshot {bad} has dimension {} but expected {n}",
            series[bad].len()
        )));
    }
    let cols = m - d;
    let mut x = DMatrix::zeros(n * d, cols);
    let mut x_prime = DMatrix::zeros(n * d, cols);
    for j in 0..cols {
        x.set_column(j, &delay_embed(series, j + d - 1, d));
        x_prime.set_column(j, &delay_embed(series, j + d, d));
    }
    Ok(SnapshotPair { x, x_prime, n, d })
}

/// How many singular triplets to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "value")]
pub enum SvdTruncation {
    FixedRank(usize),
    DropSmallest(usize),
    EnergyThreshold(f64),
}

impl SvdTruncation {
    /// Resolves the policy against descending singular values of a
    /// `rows x cols` matrix.
    pub fn resolve(&self, s: &DVector<f64>, rows: usize, cols: usize) -> Result<usize> {
        let max_rank = rows.min(cols);
        match *self {
            SvdTruncation::FixedRank(r) => {
                if r == 0 || r > max_rank {
                    return Err(Error::InvalidInput(format!(
                        "rank {r} outside 1..={max_rank}"
                    )));
                }
                Ok(r)
            }
            SvdTruncation::DropSmallest(k) => {
                if k >= max_rank {
                    return Err(Error::InvalidInput(format!(
                        "cannot drop {k} of {max_rank} singular values"
                    )));
                }
                Ok(max_rank - k)
            }
            SvdTruncation::EnergyThreshold(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::InvalidInput(format!("energy fraction {f} not in (0, 1]")));
                }
                let total: f64 = s.iter().map(|x| x * x).sum();
                let mut acc = 0.0;
                for (i, x) in s.iter().enumerate() {
                    acc += x * x;
                    if acc >= f * total * (1.0 - 1e-15) {
                        return Ok(i + 1);
                    }
                }
                Ok(s.len().max(1))
            }
        }
    }
}

/// Conjugate structure of one temporal mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeLink {
    Real,
    /// First (lower-index) member of a conjugate pair.
    Leader { partner: usize },
    Follower { partner: usize },
}

/// Conjugate-pair map of a spectrum, one entry per mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pairing(pub Vec<ModeLink>);

impl Pairing {
    /// Detects the pairing of a spectrum: modes with `|Im| <= tol` are real,
    /// the rest are matched to their nearest conjugate within `tol`.
    pub fn detect(lambda: &[C64], tol: f64) -> Result<Self> {
        let r = lambda.len();
        let mut links = vec![None; r];
        for i in 0..r {
            if lambda[i].im.abs() <= tol {
                links[i] = Some(ModeLink::Real);
            }
        }
        for i in 0..r {
            if links[i].is_some() {
                continue;
            }
            let target = lambda[i].conj();
            let partner = (i + 1..r)
                .filter(|&j| links[j].is_none())
                .map(|j| (j, (lambda[j] - target).norm()))
                .filter(|&(_, dist)| dist <= tol)
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(j, _)| j);
            match partner {
                Some(j) => {
                    links[i] = Some(ModeLink::Leader { partner: j });
                    links[j] = Some(ModeLink::Follower { partner: i });
                }
                None => {
                    return Err(Error::ConjugateStructure(format!(
                        "eigenvalue {i} ({:.6}{:+.6}i) has no conjugate partner",
                        lambda[i].re, lambda[i].im
                    )))
                }
            }
        }
        Ok(Pairing(links.into_iter().map(|l| l.expect("every mode linked")).collect()))
    }

    /// Checks that `lambda` respects this pairing within `tol`.
    pub fn check(&self, lambda: &[C64], tol: f64) -> Result<()> {
        if lambda.len() != self.0.len() {
            return Err(Error::ConjugateStructure(format!(
                "expected {} eigenvalues, got {}",
                self.0.len(),
                lambda.len()
            )));
        }
        for (i, link) in self.0.iter().enumerate() {
            match *link {
                ModeLink::Real if lambda[i].im.abs() > tol => {
                    return Err(Error::ConjugateStructure(format!("mode {i} must be real")));
                }
                ModeLink::Leader { partner } if (lambda[partner] - lambda[i].conj()).norm() > tol => {
                    return Err(Error::ConjugateStructure(format!(
                        "modes {i} and {partner} are not conjugates"
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn pair_count(&self) -> usize {
        self.0.iter().filter(|l| matches!(l, ModeLink::Leader { .. })).count()
    }

    pub fn has_pair(&self) -> bool {
        self.pair_count() > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DmdWarning {
    RankShrunk { requested: usize, effective: usize },
    /// Mode with a zero eigenvalue; its spatial mode is the projected one.
    ZeroEigenvalue { index: usize },
}

/// Tolerances used while fitting.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub pair_tol: f64,
    pub rank_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            pair_tol: DEFAULT_PAIR_TOL,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }
}

/// Fitted DMD model: `x_k = Phi Lambda^k b`.
#[derive(Debug, Clone)]
pub struct DmdModel {
    modes: DMatrix<C64>,
    modes_pinv: DMatrix<C64>,
    eigenvalues: Vec<C64>,
    amplitudes: DVector<C64>,
    pairing: Pairing,
    zero_modes: Vec<bool>,
    n: usize,
    d: usize,
    warnings: Vec<DmdWarning>,
}

impl DmdModel {
    pub fn spatial_modes(&self) -> &DMatrix<C64> {
        &self.modes
    }

    /// Pseudoinverse of the spatial modes, computed once at fit time.
    pub fn spatial_modes_pinv(&self) -> &DMatrix<C64> {
        &self.modes_pinv
    }

    pub fn eigenvalues(&self) -> &[C64] {
        &self.eigenvalues
    }

    pub fn amplitudes(&self) -> &DVector<C64> {
        &self.amplitudes
    }

    pub fn pairing(&self) -> &Pairing {
        &self.pairing
    }

    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_eff(&self) -> usize {
        self.n * self.d
    }

    pub fn is_zero_mode(&self, i: usize) -> bool {
        self.zero_modes[i]
    }

    pub fn warnings(&self) -> &[DmdWarning] {
        &self.warnings
    }

    /// Eigenvalue with the largest modulus.
    pub fn dominant_eigenvalue(&self) -> C64 {
        self.eigenvalues[0]
    }

    /// Reconstruction `Re(Phi Lambda^k b)` restricted to the first `n` rows.
    pub fn predict(&self, k: usize) -> DVector<f64> {
        let coeffs = DVector::from_fn(self.rank(), |i, _| self.amplitudes[i] * cpow(self.eigenvalues[i], k));
        let full = &self.modes * coeffs;
        DVector::from_fn(self.n, |i, _| full[i].re)
    }

    /// `Re(Phi diag(lambda)^p Phi^+ x)` for an override spectrum that keeps
    /// the model's conjugate structure.
    pub fn propagate_state(&self, x: &DVector<f64>, lambda_override: &[C64], p: usize) -> Result<DVector<f64>> {
        if x.len() != self.n_eff() {
            return Err(Error::InvalidInput(format!(
                "state has dimension {} but the model expects {}",
                x.len(),
                self.n_eff()
            )));
        }
        self.pairing.check(lambda_override, DEFAULT_PAIR_TOL)?;
        Ok(self.apply_spectrum(x.as_view(), lambda_override, p))
    }

    /// [`propagate_state`](Self::propagate_state) before the real part is taken.
    pub fn propagate_state_complex(&self, x: &DVector<f64>, lambda_override: &[C64], p: usize) -> Result<DVector<C64>> {
        if x.len() != self.n_eff() {
            return Err(Error::InvalidInput(format!(
                "state has dimension {} but the model expects {}",
                x.len(),
                self.n_eff()
            )));
        }
        self.pairing.check(lambda_override, DEFAULT_PAIR_TOL)?;
        Ok(self.apply_spectrum_complex(x.as_view(), lambda_override, p))
    }

    /// Unchecked propagation; `lambda` must be conjugate-closed under the
    /// model's pairing.
    pub(crate) fn apply_spectrum(&self, x: DVectorView<f64>, lambda: &[C64], p: usize) -> DVector<f64> {
        let full = self.apply_spectrum_complex(x, lambda, p);
        DVector::from_fn(full.len(), |i, _| full[i].re)
    }

    pub(crate) fn apply_spectrum_complex(&self, x: DVectorView<f64>, lambda: &[C64], p: usize) -> DVector<C64> {
        let r = self.rank();
        let n_eff = self.n_eff();
        let mut coeffs = vec![C64::new(0.0, 0.0); r];
        for (i, c) in coeffs.iter_mut().enumerate() {
            let mut acc = C64::new(0.0, 0.0);
            for j in 0..n_eff {
                acc += self.modes_pinv[(i, j)] * x[j];
            }
            *c = acc * cpow(lambda[i], p);
        }
        let mut out = DVector::from_element(n_eff, C64::new(0.0, 0.0));
        for (i, c) in coeffs.iter().enumerate() {
            for j in 0..n_eff {
                out[j] += self.modes[(j, i)] * c;
            }
        }
        out
    }

    /// One-step residuals `X' - Phi Lambda Phi^+ X` (real part).
    pub fn one_step_residuals(&self, pair: &SnapshotPair) -> DMatrix<f64> {
        let mut out = pair.x_prime().clone();
        for j in 0..pair.columns() {
            let pred = self.apply_spectrum(pair.x().column(j), &self.eigenvalues, 1);
            let mut col = out.column_mut(j);
            col -= pred;
        }
        out
    }

    pub fn to_record(&self) -> DmdModelRecord {
        DmdModelRecord {
            n: self.n,
            d: self.d,
            modes_re: column_major(&self.modes.map(|c| c.re)),
            modes_im: column_major(&self.modes.map(|c| c.im)),
            eigenvalues_re: self.eigenvalues.iter().map(|c| c.re).collect(),
            eigenvalues_im: self.eigenvalues.iter().map(|c| c.im).collect(),
            amplitudes_re: self.amplitudes.iter().map(|c| c.re).collect(),
            amplitudes_im: self.amplitudes.iter().map(|c| c.im).collect(),
            pairing: self.pairing.clone(),
            zero_modes: self.zero_modes.clone(),
            warnings: self.warnings.clone(),
        }
    }

    pub fn from_record(rec: &DmdModelRecord) -> Result<Self> {
        let r = rec.eigenvalues_re.len();
        let n_eff = rec.n * rec.d;
        let lens = [
            rec.eigenvalues_im.len(),
            rec.amplitudes_re.len(),
            rec.amplitudes_im.len(),
            rec.pairing.len(),
            rec.zero_modes.len(),
        ];
        if lens.iter().any(|&l| l != r) || rec.modes_re.len() != n_eff * r || rec.modes_im.len() != n_eff * r {
            return Err(Error::InvalidInput("inconsistent DMD model record".into()));
        }
        let modes = DMatrix::from_fn(n_eff, r, |i, j| C64::new(rec.modes_re[j * n_eff + i], rec.modes_im[j * n_eff + i]));
        let eigenvalues: Vec<C64> = rec
            .eigenvalues_re
            .iter()
            .zip(&rec.eigenvalues_im)
            .map(|(&a, &b)| C64::new(a, b))
            .collect();
        rec.pairing.check(&eigenvalues, DEFAULT_PAIR_TOL)?;
        Ok(Self {
            modes_pinv: pinv_complex(&modes),
            modes,
            eigenvalues,
            amplitudes: DVector::from_fn(r, |i, _| C64::new(rec.amplitudes_re[i], rec.amplitudes_im[i])),
            pairing: rec.pairing.clone(),
            zero_modes: rec.zero_modes.clone(),
            n: rec.n,
            d: rec.d,
            warnings: rec.warnings.clone(),
        })
    }
}

/// Serializable form of [`DmdModel`]; matrices are column-major real/imag arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmdModelRecord {
    pub n: usize,
    pub d: usize,
    pub modes_re: Vec<f64>,
    pub modes_im: Vec<f64>,
    pub eigenvalues_re: Vec<f64>,
    pub eigenvalues_im: Vec<f64>,
    pub amplitudes_re: Vec<f64>,
    pub amplitudes_im: Vec<f64>,
    pub pairing: Pairing,
    pub zero_modes: Vec<bool>,
    pub warnings: Vec<DmdWarning>,
}

fn column_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.as_slice().to_vec()
}

pub(crate) fn cpow(z: C64, k: usize) -> C64 {
    match k {
        0 => C64::new(1.0, 0.0),
        1 => z,
        _ => z.powu(k as u32),
    }
}

/// Argument of `z` in `[0, 2pi)`.
pub fn arg_2pi(z: C64) -> f64 {
    let a = z.im.atan2(z.re);
    if a < 0.0 {
        a + 2.0 * PI
    } else {
        a
    }
}

fn check_nonzero(pair: &SnapshotPair) -> Result<()> {
    let zero = pair.x().iter().chain(pair.x_prime().iter()).all(|&v| v == 0.0);
    if zero {
        return Err(Error::ZeroData);
    }
    if pair.x().iter().chain(pair.x_prime().iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("snapshot data contains non-finite values".into()));
    }
    Ok(())
}

/// Exact DMD with the given truncation.
pub fn fit_exact_dmd(pair: &SnapshotPair, trunc: &SvdTruncation) -> Result<DmdModel> {
    fit_exact_dmd_with(pair, trunc, &FitOptions::default())
}

pub fn fit_exact_dmd_with(pair: &SnapshotPair, trunc: &SvdTruncation, opts: &FitOptions) -> Result<DmdModel> {
    check_nonzero(pair)?;
    let svd = thin_svd(pair.x());
    let r = trunc.resolve(&svd.s, pair.x().nrows(), pair.x().ncols())?;
    let mut warnings = Vec::new();
    fit_from_svd(pair.x_prime(), svd, r, pair.first_state(), pair.n(), pair.d(), opts, &mut warnings)
}

/// Total-least-squares DMD.
///
/// TLS projection step: both `X` and `X'` are projected onto the leading
/// `r` right-singular vectors of the stacked matrix `[X; X']`, which removes
/// the noise component shared symmetrically by inputs and outputs; exact
/// DMD is then fitted on the projected pair.
pub fn fit_tdmd(pair: &SnapshotPair, trunc: &SvdTruncation) -> Result<DmdModel> {
    fit_tdmd_with(pair, trunc, &FitOptions::default())
}

pub fn fit_tdmd_with(pair: &SnapshotPair, trunc: &SvdTruncation, opts: &FitOptions) -> Result<DmdModel> {
    check_nonzero(pair)?;
    let x = pair.x();
    let xp = pair.x_prime();
    let (rows, cols) = x.shape();
    let s_x = thin_svd(x).s;
    let requested = trunc.resolve(&s_x, rows, cols)?;
    let mut warnings = Vec::new();

    let mut stacked = DMatrix::zeros(2 * rows, cols);
    stacked.rows_mut(0, rows).copy_from(x);
    stacked.rows_mut(rows, rows).copy_from(xp);
    let svd_z = thin_svd(&stacked);
    let z_rank = numerical_rank(&svd_z.s, opts.rank_tol);
    let k = requested.min(z_rank).min(svd_z.v.ncols());
    if k == 0 {
        return Err(Error::ZeroData);
    }
    if k < requested {
        log::warn!("TDMD: stacked snapshot matrix has rank {z_rank}, shrinking rank {requested} -> {k}");
        warnings.push(DmdWarning::RankShrunk { requested, effective: k });
    }
    let vk = svd_z.v.columns(0, k);
    let x_proj = (x * vk) * vk.transpose();
    let xp_proj = (xp * vk) * vk.transpose();
    let svd = thin_svd(&x_proj);
    fit_from_svd(&xp_proj, svd, k, pair.first_state(), pair.n(), pair.d(), opts, &mut warnings)
}

#[allow(clippy::too_many_arguments)]
fn fit_from_svd(
    x_prime: &DMatrix<f64>,
    svd: crate::linalg::ThinSvd,
    requested: usize,
    first_state: DVector<f64>,
    n: usize,
    d: usize,
    opts: &FitOptions,
    warnings: &mut Vec<DmdWarning>,
) -> Result<DmdModel> {
    let smax = svd.s.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return Err(Error::ZeroData);
    }
    let mut r = requested.min(svd.s.len());
    while r > 0 && svd.s[r - 1] <= opts.rank_tol * smax {
        r -= 1;
    }
    if r < requested {
        log::warn!("DMD: zero singular values inside retained rank, shrinking {requested} -> {r}");
        // Merge with an earlier shrink so only the overall change is reported.
        let original = match warnings.iter().position(|w| matches!(w, DmdWarning::RankShrunk { .. })) {
            Some(pos) => match warnings.remove(pos) {
                DmdWarning::RankShrunk { requested, .. } => requested,
                _ => unreachable!(),
            },
            None => requested,
        };
        warnings.push(DmdWarning::RankShrunk { requested: original, effective: r });
    }
    let u_r = svd.u.columns(0, r);
    let v_r = svd.v.columns(0, r);
    let sigma_inv = DMatrix::from_diagonal(&svd.s.rows(0, r).map(|s| 1.0 / s));
    // X' V_r Sigma_r^{-1}
    let b_mat = x_prime * v_r * sigma_inv;
    let a_tilde = u_r.transpose() * &b_mat;
    let (values, vectors) = real_eigen(&a_tilde);

    let scale = values.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let zero_tol = 1e-12 * scale.max(f64::MIN_POSITIVE);

    // Snap near-real eigenvalues to the real axis and make pairs exact conjugates.
    let mut lambda: Vec<C64> = values
        .iter()
        .map(|&z| if z.im.abs() <= opts.pair_tol { C64::new(z.re, 0.0) } else { z })
        .collect();
    let mut w: Vec<DVector<C64>> = (0..r).map(|j| vectors.column(j).into_owned()).collect();
    let pairing = Pairing::detect(&lambda, opts.pair_tol)?;
    for (i, link) in pairing.0.iter().enumerate() {
        match *link {
            ModeLink::Real => {
                w[i] = w[i].map(|c| C64::new(c.re, 0.0));
                let norm = w[i].norm();
                if norm > 0.0 {
                    w[i] /= C64::new(norm, 0.0);
                }
            }
            ModeLink::Leader { partner } => {
                // Keep the upper-half-plane member as the reference.
                let (up, down) = if lambda[i].im > 0.0 { (i, partner) } else { (partner, i) };
                lambda[down] = lambda[up].conj();
                w[down] = w[up].map(|c| c.conj());
            }
            ModeLink::Follower { .. } => {}
        }
    }

    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| {
        lambda[b]
            .norm()
            .total_cmp(&lambda[a].norm())
            .then(arg_2pi(lambda[a]).total_cmp(&arg_2pi(lambda[b])))
    });
    let lambda: Vec<C64> = order.iter().map(|&i| lambda[i]).collect();
    let w: Vec<DVector<C64>> = order.iter().map(|&i| w[i].clone()).collect();
    let pairing = Pairing::detect(&lambda, opts.pair_tol)?;

    let b_c = b_mat.map(|v| C64::new(v, 0.0));
    let u_c = u_r.map(|v| C64::new(v, 0.0));
    let mut modes = DMatrix::<C64>::zeros(b_mat.nrows(), r);
    let mut zero_modes = vec![false; r];
    for i in 0..r {
        if let ModeLink::Follower { partner } = pairing.0[i] {
            let col = modes.column(partner).map(|c| c.conj());
            modes.set_column(i, &col);
            zero_modes[i] = zero_modes[partner];
            continue;
        }
        if lambda[i].norm() <= zero_tol {
            zero_modes[i] = true;
            warnings.push(DmdWarning::ZeroEigenvalue { index: i });
            modes.set_column(i, &(&u_c * &w[i]));
        } else {
            modes.set_column(i, &(&b_c * &w[i]));
        }
        let norm = modes.column(i).norm();
        if norm > 0.0 {
            modes.column_mut(i).unscale_mut(norm);
        }
    }
    let modes_pinv = pinv_complex(&modes);
    let first_c = first_state.map(|v| C64::new(v, 0.0));
    let amplitudes = &modes_pinv * first_c;
    Ok(DmdModel {
        modes,
        modes_pinv,
        eigenvalues: lambda,
        amplitudes,
        pairing,
        zero_modes,
        n,
        d,
        warnings: std::mem::take(warnings),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalars(v: &[f64]) -> Vec<DVector<f64>> {
        v.iter().map(|&x| DVector::from_element(1, x)).collect()
    }

    fn rotation_series(theta: f64, m: usize) -> Vec<DVector<f64>> {
        let mut out = vec![DVector::from_vec(vec![1.0, 0.0])];
        for _ in 1..m {
            let p = out.last().unwrap();
            out.push(DVector::from_vec(vec![
                theta.cos() * p[0] - theta.sin() * p[1],
                theta.sin() * p[0] + theta.cos() * p[1],
            ]));
        }
        out
    }

    #[test]
    fn scalar_shift() {
        let pair = build_snapshots(&scalars(&[1.0, 2.0, 4.0, 8.0]), 1).unwrap();
        assert_eq!(pair.x().as_slice(), &[1.0, 2.0, 4.0]);
        assert_eq!(pair.x_prime().as_slice(), &[2.0, 4.0, 8.0]);
    }

    #[test]
    fn hankel_block_layout() {
        let series: Vec<DVector<f64>> = (1..=5).map(|k| DVector::from_vec(vec![k as f64, 10.0 * k as f64])).collect();
        let pair = build_snapshots(&series, 2).unwrap();
        assert_eq!(pair.x().shape(), (4, 3));
        assert_eq!(pair.x().column(0).as_slice(), &[2.0, 20.0, 1.0, 10.0]);
        assert_eq!(pair.x_prime().column(2).as_slice(), &[5.0, 50.0, 4.0, 40.0]);
    }

    #[test]
    fn too_short_series_is_insufficient() {
        let err = build_snapshots(&scalars(&[1.0, 2.0, 3.0]), 3).unwrap_err();
        assert!(matches!(err, Error::InsufficientData { needed: 4, got: 3 }));
        assert!(err.to_string().contains("insufficient data"));
    }

    #[test]
    fn scalar_growth() {
        let pair = build_snapshots(&scalars(&[1.0, 2.0, 4.0, 8.0, 16.0]), 1).unwrap();
        let model = fit_exact_dmd(&pair, &SvdTruncation::FixedRank(1)).unwrap();
        assert_relative_eq!(model.eigenvalues()[0].re, 2.0, epsilon = 1e-12);
        assert_eq!(model.eigenvalues()[0].im, 0.0);
        assert_relative_eq!(model.spatial_modes()[(0, 0)].re.abs(), 1.0, epsilon = 1e-12);
        let b = model.amplitudes()[0] * model.spatial_modes()[(0, 0)];
        assert_relative_eq!(b.re, 1.0, epsilon = 1e-12);
        assert_relative_eq!(model.predict(3)[0], 8.0, epsilon = 1e-10);
        assert_relative_eq!(model.predict(0)[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rotation_eigenvalues_are_unit_pair() {
        let theta = PI / 8.0;
        let pair = build_snapshots(&rotation_series(theta, 40), 1).unwrap();
        for model in [
            fit_exact_dmd(&pair, &SvdTruncation::FixedRank(2)).unwrap(),
            fit_tdmd(&pair, &SvdTruncation::FixedRank(2)).unwrap(),
        ] {
            let l = model.eigenvalues();
            assert_relative_eq!(l[0].norm(), 1.0, epsilon = 1e-10);
            assert_relative_eq!(arg_2pi(l[0]), theta, epsilon = 1e-10);
            assert_eq!(l[1], l[0].conj());
            assert_eq!(model.pairing().0[0], ModeLink::Leader { partner: 1 });
            // Eight steps of pi/8 are half a revolution, sixteen a full one.
            let x8 = model.predict(8);
            assert_relative_eq!(x8[0], -1.0, epsilon = 1e-8);
            assert_relative_eq!(x8[1], 0.0, epsilon = 1e-8);
            let x16 = model.predict(16);
            assert_relative_eq!(x16[0], 1.0, epsilon = 1e-8);
            // Paired modes are exact conjugates.
            let phi = model.spatial_modes();
            for i in 0..2 {
                assert_eq!(phi[(i, 1)], phi[(i, 0)].conj());
            }
        }
    }

    #[test]
    fn propagate_matches_predict_and_semigroup() {
        let pair = build_snapshots(&rotation_series(0.3, 30), 1).unwrap();
        let model = fit_exact_dmd(&pair, &SvdTruncation::FixedRank(2)).unwrap();
        let lam = model.eigenvalues().to_vec();
        let x5 = model.predict(5);
        let x6 = model.propagate_state(&x5, &lam, 1).unwrap();
        assert_relative_eq!(x6, model.predict(6), epsilon = 1e-8);
        let two = model.propagate_state(&x5, &lam, 2).unwrap();
        let twice = model.propagate_state(&x6, &lam, 1).unwrap();
        assert_relative_eq!(two, twice, epsilon = 1e-10);
        let ones = vec![C64::new(1.0, 0.0); 2];
        let proj = model.propagate_state(&x5, &ones, 7).unwrap();
        assert_relative_eq!(proj, x5, epsilon = 1e-10);
    }

    #[test]
    fn override_must_keep_conjugate_structure() {
        let pair = build_snapshots(&rotation_series(0.3, 30), 1).unwrap();
        let model = fit_exact_dmd(&pair, &SvdTruncation::FixedRank(2)).unwrap();
        let bad = vec![C64::new(0.9, 0.2), C64::new(0.9, 0.3)];
        let err = model.propagate_state(&DVector::from_vec(vec![1.0, 0.0]), &bad, 1).unwrap_err();
        assert!(matches!(err, Error::ConjugateStructure(_)));
    }

    #[test]
    fn rank_deficient_data_shrinks_with_warning() {
        let series: Vec<DVector<f64>> = (0..6).map(|k| DVector::from_vec(vec![2f64.powi(k), 2.0 * 2f64.powi(k)])).collect();
        let pair = build_snapshots(&series, 1).unwrap();
        for model in [
            fit_exact_dmd(&pair, &SvdTruncation::FixedRank(2)).unwrap(),
            fit_tdmd(&pair, &SvdTruncation::FixedRank(2)).unwrap(),
        ] {
            assert_eq!(model.rank(), 1);
            assert_eq!(model.warnings(), &[DmdWarning::RankShrunk { requested: 2, effective: 1 }]);
            assert_relative_eq!(model.eigenvalues()[0].re, 2.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn all_zero_data_is_an_error() {
        let pair = build_snapshots(&scalars(&[0.0, 0.0, 0.0]), 1).unwrap();
        assert!(matches!(fit_exact_dmd(&pair, &SvdTruncation::FixedRank(1)), Err(Error::ZeroData)));
        assert!(matches!(fit_tdmd(&pair, &SvdTruncation::FixedRank(1)), Err(Error::ZeroData)));
    }

    #[test]
    fn zero_eigenvalue_uses_projected_mode() {
        // x_{k+1} = A x_k with a nilpotent direction.
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.0, 0.0, 0.0]);
        let mut series = vec![DVector::from_vec(vec![1.0, 1.0])];
        for _ in 0..5 {
            let next = &a * series.last().unwrap();
            series.push(next);
        }
        // Column 0 of X has a component along the nilpotent direction; X has rank 2.
        let pair = build_snapshots(&series, 1).unwrap();
        let model = fit_exact_dmd(&pair, &SvdTruncation::FixedRank(2)).unwrap();
        assert_relative_eq!(model.eigenvalues()[0].re, 0.9, epsilon = 1e-10);
        assert!(model.eigenvalues()[1].norm() < 1e-10);
        assert!(model.is_zero_mode(1));
        assert!(model.warnings().contains(&DmdWarning::ZeroEigenvalue { index: 1 }));
        assert_relative_eq!(model.predict(0), series[0].clone(), epsilon = 1e-10);
        assert_relative_eq!(model.predict(3), series[3].clone(), epsilon = 1e-10);
    }

    #[test]
    fn truncation_policies() {
        let s = DVector::from_vec(vec![3.0, 2.0, 1.0]);
        assert_eq!(SvdTruncation::FixedRank(2).resolve(&s, 3, 5).unwrap(), 2);
        assert!(SvdTruncation::FixedRank(4).resolve(&s, 3, 5).is_err());
        assert!(SvdTruncation::FixedRank(0).resolve(&s, 3, 5).is_err());
        assert_eq!(SvdTruncation::DropSmallest(1).resolve(&s, 3, 5).unwrap(), 2);
        // 9 / 14 < 0.7 <= 13 / 14
        assert_eq!(SvdTruncation::EnergyThreshold(0.7).resolve(&s, 3, 5).unwrap(), 2);
        assert_eq!(SvdTruncation::EnergyThreshold(1.0).resolve(&s, 3, 5).unwrap(), 3);
        assert!(SvdTruncation::EnergyThreshold(0.0).resolve(&s, 3, 5).is_err());
    }

    #[test]
    fn record_round_trip() {
        let pair = build_snapshots(&rotation_series(0.2, 20), 1).unwrap();
        let model = fit_tdmd(&pair, &SvdTruncation::FixedRank(2)).unwrap();
        let json = serde_json::to_string(&model.to_record()).unwrap();
        let back = DmdModel::from_record(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.eigenvalues(), model.eigenvalues());
        assert_relative_eq!(back.predict(4), model.predict(4), epsilon = 1e-12);
    }
}
