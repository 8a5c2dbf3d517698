//! Starting values for the EM runs: parameters and per-site proposal moments.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::newton_beta;
use crate::error::{PlnError, Result};
use crate::linalg::{cholesky, regularize_spd, spd_inverse};
use crate::model::{ln_factorial, Dataset, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitState {
    pub params0: ModelParams,
    /// `n x p` proposal means.
    pub site_means: DMatrix<f64>,
    /// `n x p` diagonal proposal variances, all positive.
    pub site_vars: DMatrix<f64>,
}

impl InitState {
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        self.params0.validate()?;
        self.params0.check_against(data)?;
        let shape = (data.n(), data.p());
        if self.site_means.shape() != shape || self.site_vars.shape() != shape {
            return Err(PlnError::DimensionMismatch("initial site moments do not match the data".into()));
        }
        if self.site_vars.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || self.site_means.iter().any(|v| !v.is_finite()) {
            return Err(PlnError::InvalidInput("initial site moments must be finite with positive variances".into()));
        }
        Ok(())
    }
}

/// Columns of `x` that are linear combinations of earlier columns.
pub fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for c in 0..x.ncols() {
        let col = x.column(c).into_owned();
        let norm = col.norm();
        let mut r = col.clone();
        for q in &basis {
            let proj = q.dot(&r);
            r -= q * proj;
        }
        if norm == 0.0 || r.norm() <= 1e-10 * norm.max(1.0) {
            dependent.push(c);
        } else {
            let rn = r.norm();
            basis.push(r / rn);
        }
    }
    dependent
}

fn least_squares(x: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let dep = dependent_columns(x);
    if !dep.is_empty() {
        return Err(PlnError::RankDeficient { columns: dep });
    }
    let xtx = x.transpose() * x;
    let chol = cholesky(&xtx).ok_or_else(|| PlnError::RankDeficient { columns: dependent_columns(x) })?;
    Ok(chol.solve(&(x.transpose() * w)))
}

/// Log-count regression: `W = log(Y + 0.5) - O`, `B0` by least squares,
/// `Sigma0` from the residuals, site means at the residual rows.
pub fn init_moment(data: &Dataset) -> Result<InitState> {
    let (n, p) = (data.n(), data.p());
    let w = DMatrix::from_fn(n, p, |i, j| (data.y(i, j) + 0.5).ln() - data.offsets[(i, j)]);
    let b0 = least_squares(&data.covariates, &w)?;
    let resid = &w - &data.covariates * &b0;
    let raw = resid.transpose() * &resid / n as f64;
    let sigma0 = regularize_spd(&raw).matrix;
    let site_vars = DMatrix::from_fn(n, p, |_, j| raw[(j, j)].max(0.1));
    Ok(InitState { params0: ModelParams { b: b0, sigma: sigma0 }, site_means: resid, site_vars })
}

fn site_elbo(data: &Dataset, b: &DMatrix<f64>, omega: &DMatrix<f64>, log_det: f64, i: usize, m: &[f64], s: &[f64]) -> f64 {
    let p = data.p();
    let mut v = -0.5 * log_det + 0.5 * p as f64;
    for j in 0..p {
        let eta = data.eta(b, i, j);
        v += data.y(i, j) * (eta + m[j]) - (eta + m[j] + 0.5 * s[j]).exp() - ln_factorial(data.counts[(i, j)]);
        v += 0.5 * s[j].ln() - 0.5 * omega[(j, j)] * s[j];
        for k in 0..p {
            v -= 0.5 * m[j] * omega[(j, k)] * m[k];
        }
    }
    v
}

/// Evidence lower bound of the diagonal-Gaussian variational family.
pub fn elbo(data: &Dataset, state: &InitState) -> Result<f64> {
    let omega = spd_inverse(&state.params0.sigma).ok_or_else(|| PlnError::NotPositiveDefinite("Sigma".into()))?;
    let log_det = state.params0.sigma.determinant().ln();
    let b = &state.params0.b;
    Ok((0..data.n())
        .map(|i| {
            let m: Vec<f64> = state.site_means.row(i).iter().copied().collect();
            let s: Vec<f64> = state.site_vars.row(i).iter().copied().collect();
            site_elbo(data, b, &omega, log_det, i, &m, &s)
        })
        .sum())
}

/// One damped Newton step on `(m_i, log s_i)`; never lowers the site ELBO.
fn site_step(data: &Dataset, b: &DMatrix<f64>, omega: &DMatrix<f64>, log_det: f64, i: usize, m: &mut [f64], s: &mut [f64]) {
    let p = data.p();
    let mut e = vec![0.0; p];
    let mut grad = DVector::zeros(p);
    let mut neg_hess = omega.clone();
    for j in 0..p {
        let eta = data.eta(b, i, j);
        e[j] = (eta + m[j] + 0.5 * s[j]).exp();
        grad[j] = data.y(i, j) - e[j] - (0..p).map(|k| omega[(j, k)] * m[k]).sum::<f64>();
        neg_hess[(j, j)] += e[j];
    }
    let dm = cholesky(&neg_hess).map(|c| c.solve(&grad)).unwrap_or_else(|| grad.clone());
    let du: Vec<f64> = (0..p)
        .map(|j| {
            let g = -0.5 * e[j] * s[j] - 0.5 * omega[(j, j)] * s[j] + 0.5;
            let h = 0.5 * e[j] * s[j] * (1.0 + 0.5 * s[j]) + 0.5 * omega[(j, j)] * s[j];
            (g / h).clamp(-2.0, 2.0)
        })
        .collect();
    let f0 = site_elbo(data, b, omega, log_det, i, m, s);
    let mut t = 1.0;
    for _ in 0..40 {
        let mc: Vec<f64> = (0..p).map(|j| m[j] + t * dm[j]).collect();
        let sc: Vec<f64> = (0..p).map(|j| s[j] * (t * du[j]).exp()).collect();
        let f = site_elbo(data, b, omega, log_det, i, &mc, &sc);
        if f.is_finite() && f >= f0 {
            m.copy_from_slice(&mc);
            s.copy_from_slice(&sc);
            return;
        }
        t *= 0.5;
    }
}

/// `init_moment` refined by `n_steps` rounds of coordinate ascent on the
/// ELBO: per-site Newton steps on the variational moments, then Newton for
/// each `beta_j`, then the closed-form Sigma. Also returns the ELBO after each
/// round (entry 0 is the starting value).
pub fn init_vem_lite_trace(data: &Dataset, n_steps: usize) -> Result<(InitState, Vec<f64>)> {
    let mut state = init_moment(data)?;
    let mut trace = vec![elbo(data, &state)?];
    if n_steps == 0 {
        return Ok((state, trace));
    }
    let (n, p) = (data.n(), data.p());
    let offsets_cols: Vec<Vec<f64>> = (0..p).map(|j| data.offsets.column(j).iter().copied().collect()).collect();
    for _ in 0..n_steps {
        let sigma = &state.params0.sigma;
        let omega = spd_inverse(sigma).ok_or_else(|| PlnError::NotPositiveDefinite("Sigma".into()))?;
        let log_det = sigma.determinant().ln();
        let b = state.params0.b.clone();
        let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut m: Vec<f64> = state.site_means.row(i).iter().copied().collect();
                let mut s: Vec<f64> = state.site_vars.row(i).iter().copied().collect();
                site_step(data, &b, &omega, log_det, i, &mut m, &mut s);
                (m, s)
            })
            .collect();
        for (i, (m, s)) in rows.iter().enumerate() {
            for j in 0..p {
                state.site_means[(i, j)] = m[j];
                state.site_vars[(i, j)] = s[j];
            }
        }
        let new_cols: Vec<Option<DVector<f64>>> = (0..p)
            .into_par_iter()
            .map(|j| {
                let y: Vec<f64> = (0..n).map(|i| data.y(i, j)).collect();
                let e: Vec<f64> = (0..n)
                    .map(|i| (state.site_means[(i, j)] + 0.5 * state.site_vars[(i, j)]).exp())
                    .collect();
                let init = state.params0.b.column(j).into_owned();
                newton_beta(j, &data.covariates, &offsets_cols[j], &y, &e, &init).ok()
            })
            .collect();
        for (j, col) in new_cols.into_iter().enumerate() {
            if let Some(col) = col {
                state.params0.b.set_column(j, &col);
            }
        }
        let mut acc = DMatrix::zeros(p, p);
        for i in 0..n {
            let m = state.site_means.row(i).transpose();
            acc += &m * m.transpose();
            for j in 0..p {
                acc[(j, j)] += state.site_vars[(i, j)];
            }
        }
        state.params0.sigma = regularize_spd(&(acc / n as f64)).matrix;
        let value = elbo(data, &state)?;
        let last = *trace.last().expect("trace is non-empty");
        debug_assert!(value >= last - 1e-8 * (1.0 + last.abs()), "ELBO decreased: {last} -> {value}");
        trace.push(value);
    }
    Ok((state, trace))
}

pub fn init_vem_lite(data: &Dataset, n_steps: usize) -> Result<InitState> {
    Ok(init_vem_lite_trace(data, n_steps)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy() -> Dataset {
        let counts = DMatrix::from_row_slice(5, 2, &[0, 3, 2, 1, 5, 0, 1, 1, 0, 7]);
        let x = DMatrix::from_fn(5, 2, |i, l| if l == 0 { 1.0 } else { i as f64 * 0.3 - 0.5 });
        Dataset::new(counts, x, None).unwrap()
    }

    #[test]
    fn constant_counts_degenerate_case() {
        let data = Dataset::new(DMatrix::from_element(4, 2, 3u64), DMatrix::from_element(4, 1, 1.0), None).unwrap();
        let s = init_moment(&data).unwrap();
        assert!(s.site_means.iter().all(|v| v.abs() < 1e-12));
        assert_relative_eq!(s.params0.sigma, DMatrix::identity(2, 2) * 1e-8, epsilon = 1e-20);
        assert!(s.site_vars.iter().all(|v| *v == 0.1));
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let x = DMatrix::from_fn(5, 3, |i, l| match l {
            0 => 1.0,
            1 => i as f64,
            _ => 2.0 * i as f64 + 1.0,
        });
        let data = Dataset::new(DMatrix::from_element(5, 1, 1u64), x, None).unwrap();
        assert_eq!(init_moment(&data), Err(PlnError::RankDeficient { columns: vec![2] }));
    }

    #[test]
    fn zero_steps_is_moment_init() {
        let data = toy();
        assert_eq!(init_vem_lite(&data, 0).unwrap(), init_moment(&data).unwrap());
    }

    #[test]
    fn elbo_never_decreases() {
        let data = toy();
        let (state, trace) = init_vem_lite_trace(&data, 30).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * (1.0 + w[0].abs()), "{} -> {}", w[0], w[1]);
        }
        assert_ne!(state, init_moment(&data).unwrap());
        state.validate(&data).unwrap();
    }
}
