//! Deterministic trapezoid-grid integration of the conditional law of
//! `Z_i | Y_i` for one or two species. Used as a reference for the sampler.
//!
//! The integrand is log-concave with curvature at least `Sigma^{-1}`, so a
//! window of +-12 prior standard deviations around the conditional mode holds
//! all but `exp(-72)` of the mass. Node spacing starts at a quarter of the
//! conditional standard deviation at the mode and is halved until the
//! results move by less than `1e-12`.

use nalgebra::{DMatrix, DVector};

use super::SiteMoments;
use crate::error::{PlnError, Result};
use crate::linalg::spd_inverse;
use crate::model::{ln_factorial, ModelParams};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const HALF_WIDTH: f64 = 12.0;
const MIN_NODES: usize = 401;
const TOL: f64 = 1e-12;

struct Integrand {
    k: usize,
    y: Vec<f64>,
    eta: Vec<f64>,
    omega: DMatrix<f64>,
    constant: f64,
}

impl Integrand {
    fn new(params: &ModelParams, y: &[u64], x: &DVector<f64>, o: &[f64]) -> Result<Self> {
        let k = params.p();
        if k == 0 || k > 2 {
            return Err(PlnError::InvalidInput(format!("quadrature supports 1 or 2 species, got {k}")));
        }
        if y.len() != k || o.len() != k || x.len() != params.d() {
            return Err(PlnError::DimensionMismatch("quadrature inputs disagree with params".into()));
        }
        let omega = spd_inverse(&params.sigma).ok_or_else(|| PlnError::NotPositiveDefinite("Sigma".into()))?;
        let eta = (0..k).map(|j| o[j] + x.dot(&params.b.column(j))).collect();
        let log_det = params.sigma.determinant().ln();
        let constant = -0.5 * (k as f64 * LN_2PI + log_det) - y.iter().map(|&v| ln_factorial(v)).sum::<f64>();
        Ok(Self { k, y: y.iter().map(|&v| v as f64).collect(), eta, omega, constant })
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        let mut s = self.constant;
        for j in 0..self.k {
            let lin = self.eta[j] + z[j];
            s += self.y[j] * lin - lin.exp();
            for l in 0..self.k {
                s -= 0.5 * z[j] * self.omega[(j, l)] * z[l];
            }
        }
        s
    }

    /// Conditional mode and the negative Hessian there.
    fn mode(&self) -> (Vec<f64>, DMatrix<f64>) {
        let k = self.k;
        let mut z = vec![0.0; k];
        let mut f = self.log_density(&z);
        for _ in 0..200 {
            let mut grad = DVector::zeros(k);
            let mut neg_hess = self.omega.clone();
            for j in 0..k {
                let e = (self.eta[j] + z[j]).exp();
                grad[j] = self.y[j] - e - (0..k).map(|l| self.omega[(j, l)] * z[l]).sum::<f64>();
                neg_hess[(j, j)] += e;
            }
            if grad.amax() < 1e-13 * (1.0 + self.y.iter().sum::<f64>()) {
                break;
            }
            let step = match neg_hess.clone().cholesky() {
                Some(c) => c.solve(&grad),
                None => grad.clone(),
            };
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..60 {
                let cand: Vec<f64> = (0..k).map(|j| z[j] + t * step[j]).collect();
                let fc = self.log_density(&cand);
                if fc >= f {
                    z = cand;
                    f = fc;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
        }
        let mut neg_hess = self.omega.clone();
        for j in 0..k {
            neg_hess[(j, j)] += (self.eta[j] + z[j]).exp();
        }
        (z, neg_hess)
    }
}

struct Integral {
    log_marginal: f64,
    moments: SiteMoments,
}

fn integrate_grid(f: &Integrand, axes: &[Vec<f64>]) -> Integral {
    let k = f.k;
    let steps: Vec<f64> = axes.iter().map(|a| a[1] - a[0]).collect();
    let weight = |idx: usize, len: usize| if idx == 0 || idx + 1 == len { 0.5 } else { 1.0 };
    let mut points: Vec<(f64, [f64; 2], f64)> = Vec::new();
    let mut fmax = f64::NEG_INFINITY;
    let mut z = [0.0; 2];
    match k {
        1 => {
            let a = &axes[0];
            for (i, &v) in a.iter().enumerate() {
                z[0] = v;
                let lv = f.log_density(&z[..1]);
                fmax = fmax.max(lv);
                points.push((lv, z, weight(i, a.len())));
            }
        }
        _ => {
            let (a, b) = (&axes[0], &axes[1]);
            for (i, &u) in a.iter().enumerate() {
                for (j, &v) in b.iter().enumerate() {
                    z = [u, v];
                    let lv = f.log_density(&z);
                    fmax = fmax.max(lv);
                    points.push((lv, z, weight(i, a.len()) * weight(j, b.len())));
                }
            }
        }
    }
    let mut total = 0.0;
    let mut mean = DVector::zeros(k);
    let mut second = DMatrix::zeros(k, k);
    let mut exp_mean = DVector::zeros(k);
    for (lv, z, w) in &points {
        let m = w * (lv - fmax).exp();
        total += m;
        for a in 0..k {
            mean[a] += m * z[a];
            exp_mean[a] += m * z[a].exp();
            for b in 0..k {
                second[(a, b)] += m * z[a] * z[b];
            }
        }
    }
    let cell: f64 = steps.iter().product();
    let log_marginal = fmax + (total * cell).ln();
    let moments = SiteMoments::from_raw(mean / total, second / total, exp_mean / total);
    Integral { log_marginal, moments }
}

fn axis(center: f64, half: f64, nodes: usize) -> Vec<f64> {
    let h = 2.0 * half / (nodes - 1) as f64;
    (0..nodes).map(|i| center - half + h * i as f64).collect()
}

fn change(a: &Integral, b: &Integral) -> f64 {
    let rel = |x: f64, y: f64| (x - y).abs() / (1.0 + x.abs().max(y.abs()));
    let mut c = rel(a.log_marginal, b.log_marginal);
    let (ma, mb) = (&a.moments, &b.moments);
    for (x, y) in ma.mean.iter().zip(mb.mean.iter()) {
        c = c.max(rel(*x, *y));
    }
    for (x, y) in ma.exp_mean.iter().zip(mb.exp_mean.iter()) {
        c = c.max(rel(*x, *y));
    }
    for (x, y) in ma.second_moment.iter().zip(mb.second_moment.iter()) {
        c = c.max(rel(*x, *y));
    }
    c
}

fn integrate(params: &ModelParams, y: &[u64], x: &DVector<f64>, o: &[f64]) -> Result<Integral> {
    let f = Integrand::new(params, y, x, o)?;
    let (mode, neg_hess) = f.mode();
    let k = f.k;
    let (start_cap, max_doublings) = if k == 1 { (200_001, 6) } else { (1_601, 2) };
    let mut nodes = Vec::with_capacity(k);
    let mut halves = Vec::with_capacity(k);
    for j in 0..k {
        let half = HALF_WIDTH * params.sigma[(j, j)].sqrt();
        let cond_sd = 1.0 / neg_hess[(j, j)].sqrt();
        let wanted = (2.0 * half / (0.25 * cond_sd)).ceil() as usize + 1;
        let n = wanted.clamp(MIN_NODES, start_cap) | 1;
        nodes.push(n);
        halves.push(half);
    }
    let build = |nodes: &[usize]| -> Vec<Vec<f64>> { (0..k).map(|j| axis(mode[j], halves[j], nodes[j])).collect() };
    let mut current = integrate_grid(&f, &build(&nodes));
    for _ in 0..max_doublings {
        for n in nodes.iter_mut() {
            *n = 2 * *n - 1;
        }
        let refined = integrate_grid(&f, &build(&nodes));
        let c = change(&current, &refined);
        current = refined;
        if c < TOL {
            break;
        }
    }
    if !current.log_marginal.is_finite() {
        return Err(PlnError::Numeric("quadrature produced a non-finite marginal".into()));
    }
    Ok(current)
}

/// Conditional moments of `Z | Y = y` for one site of a model with one or two
/// species; `x` is the site's covariate row and `o` its offsets.
pub fn quadrature_oracle(params: &ModelParams, y: &[u64], x: &DVector<f64>, o: &[f64]) -> Result<SiteMoments> {
    Ok(integrate(params, y, x, o)?.moments)
}

/// `log p_theta(y)` by the same quadrature.
pub fn quadrature_log_marginal(params: &ModelParams, y: &[u64], x: &DVector<f64>, o: &[f64]) -> Result<f64> {
    Ok(integrate(params, y, x, o)?.log_marginal)
}

/// Both results from one integration.
pub fn quadrature_site(params: &ModelParams, y: &[u64], x: &DVector<f64>, o: &[f64]) -> Result<(f64, SiteMoments)> {
    let r = integrate(params, y, x, o)?;
    Ok((r.log_marginal, r.moments))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar(beta: f64, s2: f64) -> ModelParams {
        ModelParams::new(DMatrix::from_element(1, 1, beta), DMatrix::from_element(1, 1, s2)).unwrap()
    }

    #[test]
    fn vanishing_prior_variance() {
        let x = DVector::from_element(1, 1.0);
        let m = quadrature_oracle(&scalar(0.0, 1e-10), &[3], &x, &[0.0]).unwrap();
        assert!(m.mean[0].abs() < 1e-8);
        assert_relative_eq!(m.exp_mean[0], 1.0, epsilon = 1e-8);
    }

    #[test]
    fn pinned_unit_case() {
        // Cross-checked against adaptive Gauss-Kronrod integration.
        let x = DVector::from_element(1, 1.0);
        let (lm, m) = quadrature_site(&scalar(0.0, 1.0), &[0], &x, &[0.0]).unwrap();
        assert_relative_eq!(m.mean[0], -0.678_066_114_601_557_5, epsilon = 1e-12);
        assert_relative_eq!(m.exp_mean[0], 0.678_066_114_601_557_5, epsilon = 1e-12);
        assert_relative_eq!(lm, -0.962_972_400_500_303_5, epsilon = 1e-12);
    }

    #[test]
    fn stein_identity() {
        // E[d/dz log p(y, Z) | y] = 0 gives E[Z] = s2 (y - e^eta E[e^Z]).
        let x = DVector::from_row_slice(&[1.0, 0.4]);
        for (beta, s2, y) in [(0.3, 0.5, 4u64), (-1.0, 1.4, 0), (2.0, 0.8, 15), (0.0, 0.05, 1)] {
            let params = ModelParams::new(
                DMatrix::from_column_slice(2, 1, &[beta, 0.5]),
                DMatrix::from_element(1, 1, s2),
            )
            .unwrap();
            let o = [0.2];
            let m = quadrature_oracle(&params, &[y], &x, &o).unwrap();
            let eta = o[0] + beta + 0.4 * 0.5;
            let rhs = s2 * (y as f64 - eta.exp() * m.exp_mean[0]);
            assert_relative_eq!(m.mean[0], rhs, epsilon = 1e-10);
        }
    }

    #[test]
    fn diagonal_pair_factorizes() {
        let x = DVector::from_element(1, 1.0);
        let pair = ModelParams::new(
            DMatrix::from_row_slice(1, 2, &[0.4, -0.3]),
            DMatrix::from_row_slice(2, 2, &[0.7, 0.0, 0.0, 1.2]),
        )
        .unwrap();
        let (lm2, m2) = quadrature_site(&pair, &[3, 0], &x, &[0.0, 0.1]).unwrap();
        let (la, ma) = quadrature_site(&pair.restrict(&[0]), &[3], &x, &[0.0]).unwrap();
        let (lb, mb) = quadrature_site(&pair.restrict(&[1]), &[0], &x, &[0.1]).unwrap();
        assert_relative_eq!(lm2, la + lb, epsilon = 1e-8);
        assert_relative_eq!(m2.mean[0], ma.mean[0], epsilon = 1e-8);
        assert_relative_eq!(m2.mean[1], mb.mean[0], epsilon = 1e-8);
        assert_relative_eq!(m2.exp_mean[1], mb.exp_mean[0], epsilon = 1e-8);
        assert_relative_eq!(m2.second_moment[(0, 1)], ma.mean[0] * mb.mean[0], epsilon = 1e-8);
    }

    #[test]
    fn marginal_matches_poisson_when_prior_is_tight() {
        let x = DVector::from_element(1, 1.0);
        let lm = quadrature_log_marginal(&scalar(1.0, 1e-10), &[2], &x, &[0.0]).unwrap();
        let lambda = 1f64.exp();
        let expected = 2.0 * lambda.ln() - lambda - 2f64.ln();
        assert_relative_eq!(lm, expected, epsilon = 1e-8);
    }

    #[test]
    fn rejects_three_species() {
        let p = ModelParams::new(DMatrix::zeros(1, 3), DMatrix::identity(3, 3)).unwrap();
        let x = DVector::from_element(1, 1.0);
        assert!(quadrature_oracle(&p, &[0, 0, 0], &x, &[0.0; 3]).is_err());
    }
}
