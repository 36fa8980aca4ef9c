//! Dense linear-algebra helpers on top of nalgebra.
//!
//! The SVD contract used throughout the crate: singular values in
//! descending order with orthonormal factors.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

/// Thin SVD `m = u * diag(s) * v^T` with `s` sorted descending.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

pub fn thin_svd(m: &DMatrix<f64>) -> ThinSvd {
    let (r, c) = m.shape();
    let k = r.min(c);
    if k == 0 {
        return ThinSvd {
            u: DMatrix::zeros(r, 0),
            s: DVector::zeros(0),
            v: DMatrix::zeros(c, 0),
        };
    }
    // nalgebra's bidiagonal SVD loses accuracy on exactly rank-deficient
    // input, which is the common case for snapshot matrices.
    let fm = faer::Mat::<f64>::from_fn(r, c, |i, j| m[(i, j)]);
    let svd = fm.thin_svd().expect("SVD converges on finite input");
    let (fu, fs, fv) = (svd.U(), svd.S().column_vector(), svd.V());
    ThinSvd {
        u: DMatrix::from_fn(r, k, |i, j| fu[(i, j)]),
        s: DVector::from_fn(k, |i, _| fs[i]),
        v: DMatrix::from_fn(c, k, |i, j| fv[(i, j)]),
    }
}

/// Numerical rank: count of singular values above `rel_tol * s_max`.
pub fn numerical_rank(s: &DVector<f64>, rel_tol: f64) -> usize {
    let smax = s.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&x| x > rel_tol * smax).count()
}

pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<C64> {
    m.map(|x| C64::new(x, 0.0))
}

/// Thin SVD `m = U diag(s) V^H` of a complex matrix, singular values
/// descending.
fn complex_thin_svd(m: &DMatrix<C64>) -> (DMatrix<C64>, DVector<f64>, DMatrix<C64>) {
    let (r, c) = m.shape();
    let k = r.min(c);
    let fm = faer::Mat::<C64>::from_fn(r, c, |i, j| m[(i, j)]);
    let svd = fm.thin_svd().expect("SVD converges on finite input");
    let (fu, fs, fv) = (svd.U(), svd.S().column_vector(), svd.V());
    (
        DMatrix::from_fn(r, k, |i, j| fu[(i, j)]),
        DVector::from_fn(k, |i, _| fs[i].re),
        DMatrix::from_fn(c, k, |i, j| fv[(i, j)]),
    )
}

/// Moore-Penrose pseudoinverse of a complex matrix.
pub fn pinv_complex(m: &DMatrix<C64>) -> DMatrix<C64> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return DMatrix::zeros(cols, rows);
    }
    let (u, s, v) = complex_thin_svd(m);
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let cutoff = smax * 1e-13 * rows.max(cols) as f64;
    let mut out = DMatrix::<C64>::zeros(cols, rows);
    for k in 0..s.len() {
        if s[k] <= cutoff {
            continue;
        }
        let inv = 1.0 / s[k];
        for i in 0..cols {
            let vik = v[(i, k)] * inv;
            for j in 0..rows {
                out[(i, j)] += vik * u[(j, k)].conj();
            }
        }
    }
    out
}

/// Eigenvalues and unit eigenvectors of a small real square matrix.
///
/// Complex eigenvalues come from the real Schur form, so conjugate pairs are
/// exact conjugates. Each eigenvector is the right singular vector of
/// `A - lambda I` with the smallest singular value, scaled so that its
/// largest entry is real and positive.
pub fn real_eigen(a: &DMatrix<f64>) -> (Vec<C64>, DMatrix<C64>) {
    let r = a.nrows();
    assert_eq!(r, a.ncols(), "eigendecomposition of a non-square matrix");
    if r == 0 {
        return (Vec::new(), DMatrix::zeros(0, 0));
    }
    let values: Vec<C64> = a.complex_eigenvalues().iter().cloned().collect();
    let ac = to_complex(a);
    let mut vectors = DMatrix::<C64>::zeros(r, r);
    for (j, &lambda) in values.iter().enumerate() {
        let mut shifted = ac.clone();
        for i in 0..r {
            shifted[(i, i)] -= lambda;
        }
        let (_, s, v_all) = complex_thin_svd(&shifted);
        let kmin = (0..s.len()).min_by(|&x, &y| s[x].total_cmp(&s[y])).unwrap_or(0);
        let mut v = v_all.column(kmin).into_owned();
        normalize_phase(&mut v);
        vectors.set_column(j, &v);
    }
    (values, vectors)
}

pub fn normalize_phase(v: &mut DVector<C64>) {
    let norm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if norm == 0.0 {
        return;
    }
    let pivot = v
        .iter()
        .cloned()
        .enumerate()
        .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
        .map(|(i, _)| v[i])
        .unwrap_or(C64::new(1.0, 0.0));
    let phase = pivot.conj() / pivot.norm();
    for c in v.iter_mut() {
        *c = *c * phase / norm;
    }
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Returns `L` with `L L^T = cov` for a symmetric positive semi-definite
/// matrix, rejecting asymmetry beyond `1e-12` (relative) and eigenvalues
/// below `-1e-10` (relative to the largest).
pub fn psd_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    if n != cov.ncols() {
        return Err(Error::InvalidInput(format!(
            "covariance must be square, got {}x{}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    let scale = cov.amax().max(1.0);
    let asym = max_asymmetry(cov);
    if asym > 1e-12 * scale {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lmin = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if lmin < -1e-10 * scale {
        return Err(Error::NotPositiveSemidefinite { eigenvalue: lmin });
    }
    let mut factor = eig.eigenvectors;
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        let s = l.max(0.0).sqrt();
        factor.column_mut(j).scale_mut(s);
    }
    Ok(factor)
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of unsorted data.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    percentile_sorted(&v, q)
}

pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = (q / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = pos - lo as f64;
            sorted[lo] + (sorted[hi] - sorted[lo]) * frac
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn svd_is_sorted_and_reconstructs() {
        let m = DMatrix::from_row_slice(3, 4, &[1.0, 5.0, 0.0, 2.0, 3.0, 1.0, 4.0, 0.5, 0.0, 2.0, 1.0, 7.0]);
        let svd = thin_svd(&m);
        for i in 1..svd.s.len() {
            assert!(svd.s[i - 1] >= svd.s[i]);
        }
        let rebuilt = &svd.u * DMatrix::from_diagonal(&svd.s) * svd.v.transpose();
        assert_relative_eq!(rebuilt, m, epsilon = 1e-12);
        let utu = svd.u.transpose() * &svd.u;
        assert_relative_eq!(utu, DMatrix::identity(3, 3), epsilon = 1e-10);
    }

    #[test]
    fn eigenvectors_satisfy_eigen_relation() {
        let a = DMatrix::from_row_slice(3, 3, &[0.5, -0.8, 0.1, 0.8, 0.5, 0.0, 0.2, 0.1, 0.9]);
        let (vals, vecs) = real_eigen(&a);
        let ac = to_complex(&a);
        for (j, lambda) in vals.iter().enumerate() {
            let v = vecs.column(j).into_owned();
            let resid = &ac * &v - v.map(|c| c * lambda);
            assert!(resid.norm() < 1e-10, "residual {}", resid.norm());
        }
    }

    #[test]
    fn complex_pinv_is_left_inverse_for_full_column_rank() {
        let m = DMatrix::from_fn(5, 2, |i, j| C64::new((i + 2 * j) as f64, (i * j) as f64 - 1.0));
        let p = pinv_complex(&m);
        let id = &p * &m;
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((id[(i, j)] - C64::new(want, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn psd_factor_rejects_negative_eigenvalue() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        match psd_factor(&m) {
            Err(Error::NotPositiveSemidefinite { eigenvalue }) => assert_relative_eq!(eigenvalue, -1.0, epsilon = 1e-12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn percentile_interpolates() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_relative_eq!(percentile(&v, 50.0), 2.5);
        assert_relative_eq!(percentile(&v, 0.0), 1.0);
        assert_relative_eq!(percentile(&v, 100.0), 4.0);
    }
}
