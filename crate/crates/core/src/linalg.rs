//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

const JITTER_LEVELS: [f64; 3] = [1e-8, 1e-6, 1e-4];

/// Zero-jitter Cholesky; `None` means the matrix is not numerically PD.
pub fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if m.nrows() != m.ncols() || m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let chol = Cholesky::new(m.clone())?;
    if chol.l_dirty().diagonal().iter().all(|d| *d > 0.0 && d.is_finite()) {
        Some(chol)
    } else {
        None
    }
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    cholesky(m).is_some()
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Outcome of [`regularize_spd`].
#[derive(Debug, Clone)]
pub struct Regularized {
    pub matrix: DMatrix<f64>,
    /// Jitter added to the diagonal, zero when the input was already PD.
    pub jitter: f64,
    /// True when the eigenvalue floor had to be used.
    pub clipped: bool,
}

/// Symmetrize and, if needed, add the smallest jitter from
/// `{1e-8, 1e-6, 1e-4} * trace / k` that restores a Cholesky factorization.
/// A matrix with indefinite spectrum beyond that reach gets its eigenvalues
/// floored at `1e-4 * trace / k`.
pub fn regularize_spd(m: &DMatrix<f64>) -> Regularized {
    let k = m.nrows();
    let sym = symmetrize(m);
    if is_positive_definite(&sym) {
        return Regularized { matrix: sym, jitter: 0.0, clipped: false };
    }
    let trace = sym.trace();
    let scale = if trace > 0.0 && trace.is_finite() { trace / k as f64 } else { 1.0 };
    for level in JITTER_LEVELS {
        let jitter = level * scale;
        let candidate = &sym + DMatrix::identity(k, k) * jitter;
        if is_positive_definite(&candidate) {
            return Regularized { matrix: candidate, jitter, clipped: false };
        }
    }
    let floor = JITTER_LEVELS[2] * scale;
    let sym = if sym.iter().all(|v| v.is_finite()) { sym } else { DMatrix::identity(k, k) };
    let eig = sym.symmetric_eigen();
    let values = eig.eigenvalues.map(|v| v.max(floor));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&values) * eig.eigenvectors.transpose();
    Regularized { matrix: symmetrize(&rebuilt), jitter: floor, clipped: true }
}

/// Inverse of an SPD matrix, `None` if it is not PD.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    cholesky(m).map(|c| symmetrize(&c.inverse()))
}

/// Inverse with a pseudo-inverse fallback. The flag reports the fallback.
pub fn inverse_or_pinv(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if let Some(inv) = m.clone().try_inverse() {
        if inv.iter().all(|v| v.is_finite()) && condition_ok(m, &inv) {
            return (inv, false);
        }
    }
    (pseudo_inverse(m), true)
}

fn condition_ok(m: &DMatrix<f64>, inv: &DMatrix<f64>) -> bool {
    let n = m.nrows();
    let residual = m * inv - DMatrix::identity(n, n);
    residual.amax() < 1e-6
}

pub fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let eps = max_sv * (m.nrows().max(m.ncols()) as f64) * f64::EPSILON;
    svd.pseudo_inverse(eps.max(f64::MIN_POSITIVE))
        .unwrap_or_else(|_| DMatrix::zeros(m.ncols(), m.nrows()))
}

/// Row-major packed lower-triangular Cholesky factor, used in hot loops
/// where nalgebra's allocation per call would dominate.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedCholesky {
    dim: usize,
    factor: Vec<f64>,
    log_det: f64,
}

impl PackedCholesky {
    pub fn new(m: &DMatrix<f64>) -> Option<Self> {
        let chol = cholesky(m)?;
        let l = chol.l();
        let dim = m.nrows();
        let mut factor = Vec::with_capacity(dim * (dim + 1) / 2);
        for i in 0..dim {
            for j in 0..=i {
                factor.push(l[(i, j)]);
            }
        }
        let log_det = 2.0 * (0..dim).map(|i| l[(i, i)].ln()).sum::<f64>();
        Some(Self { dim, factor, log_det })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        let start = i * (i + 1) / 2;
        &self.factor[start..start + i + 1]
    }

    /// Squared norm of `L^{-1} x`, i.e. the quadratic form `x' S^{-1} x`.
    #[inline]
    pub fn mahalanobis_sq(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.dim {
            let row = self.row(i);
            let mut s = x[i];
            for j in 0..i {
                s -= row[j] * scratch[j];
            }
            let y = s / row[i];
            scratch[i] = y;
            acc += y * y;
        }
        acc
    }

    /// `out = mean + L * eps`.
    #[inline]
    pub fn affine(&self, mean: &[f64], eps: &[f64], out: &mut [f64]) {
        for i in 0..self.dim {
            let row = self.row(i);
            let mut s = mean[i];
            for j in 0..=i {
                s += row[j] * eps[j];
            }
            out[i] = s;
        }
    }

    pub fn to_lower(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| if j <= i { self.row(i)[j] } else { 0.0 })
    }
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spd3() -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 3, &[2.0, 0.3, -0.2, 0.3, 1.5, 0.1, -0.2, 0.1, 1.0])
    }

    #[test]
    fn packed_matches_dense() {
        let m = spd3();
        let pc = PackedCholesky::new(&m).unwrap();
        let x = [0.4, -1.2, 2.0];
        let mut scratch = [0.0; 3];
        let inv = spd_inverse(&m).unwrap();
        let xv = DVector::from_row_slice(&x);
        let expected = (xv.transpose() * &inv * &xv)[(0, 0)];
        assert_relative_eq!(pc.mahalanobis_sq(&x, &mut scratch), expected, epsilon = 1e-12);
        assert_relative_eq!(pc.log_det(), m.determinant().ln(), epsilon = 1e-12);
        let l = pc.to_lower();
        assert_relative_eq!(&l * l.transpose(), m, epsilon = 1e-12);
    }

    #[test]
    fn regularize_keeps_pd_input() {
        let r = regularize_spd(&spd3());
        assert_eq!(r.jitter, 0.0);
        assert_eq!(r.matrix, spd3());
    }

    #[test]
    fn regularize_zero_matrix_uses_smallest_jitter() {
        let r = regularize_spd(&DMatrix::zeros(2, 2));
        assert_eq!(r.jitter, 1e-8);
        assert!(is_positive_definite(&r.matrix));
    }

    #[test]
    fn regularize_rank_one() {
        let v = DVector::from_row_slice(&[1.0, 2.0, 3.0]);
        let m = &v * v.transpose();
        let r = regularize_spd(&m);
        assert!(r.jitter > 0.0 && !r.clipped);
        assert!(is_positive_definite(&r.matrix));
    }

    #[test]
    fn regularize_indefinite_floors_spectrum() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let r = regularize_spd(&m);
        assert!(r.clipped);
        assert!(is_positive_definite(&r.matrix));
    }

    #[test]
    fn pinv_fallback_on_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (inv, flagged) = inverse_or_pinv(&m);
        assert!(flagged);
        assert_relative_eq!(&m * &inv * &m, m, epsilon = 1e-12);
    }

    #[test]
    fn non_pd_detected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(!is_positive_definite(&m));
        assert!(spd_inverse(&m).is_none());
    }
}
