//! PLN model containers, densities and forward simulation.
//!
//! `Z_i ~ N(0, Sigma)` and `Y_ij | Z_i ~ Poisson(exp(o_ij + x_i' beta_j + Z_ij))`.
//! Every log density here is exact, the `-log(Y!)` term included.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{PlnError, Result};
use crate::linalg::{cholesky, PackedCholesky};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const MAX_LOG_RATE: f64 = 700.0;

pub fn ln_factorial(y: u64) -> f64 {
    if y < 2 {
        0.0
    } else {
        ln_gamma(y as f64 + 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub counts: DMatrix<u64>,
    pub covariates: DMatrix<f64>,
    pub offsets: DMatrix<f64>,
    pub species_names: Vec<String>,
    pub covariate_names: Vec<String>,
}

impl Dataset {
    pub fn new(counts: DMatrix<u64>, covariates: DMatrix<f64>, offsets: Option<DMatrix<f64>>) -> Result<Self> {
        let p = counts.ncols();
        let d = covariates.ncols();
        let species_names = (1..=p).map(|j| format!("sp{j}")).collect();
        let covariate_names = (0..d).map(|l| format!("x{l}")).collect();
        let offsets = offsets.unwrap_or_else(|| DMatrix::zeros(counts.nrows(), p));
        Self::with_names(counts, covariates, offsets, species_names, covariate_names)
    }

    pub fn with_names(
        counts: DMatrix<u64>,
        covariates: DMatrix<f64>,
        offsets: DMatrix<f64>,
        species_names: Vec<String>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let (n, p) = counts.shape();
        let d = covariates.ncols();
        if n == 0 || p == 0 || d == 0 {
            return Err(PlnError::InvalidInput(format!("empty dataset: n={n}, p={p}, d={d}")));
        }
        if covariates.nrows() != n {
            return Err(PlnError::DimensionMismatch(format!(
                "covariates have {} rows, counts have {n}",
                covariates.nrows()
            )));
        }
        if offsets.shape() != (n, p) {
            return Err(PlnError::DimensionMismatch(format!(
                "offsets are {:?}, counts are {:?}",
                offsets.shape(),
                (n, p)
            )));
        }
        if species_names.len() != p || covariate_names.len() != d {
            return Err(PlnError::DimensionMismatch("name lists do not match matrix widths".into()));
        }
        if let Some(pos) = covariates.iter().position(|v| !v.is_finite()) {
            return Err(PlnError::InvalidInput(format!(
                "non-finite covariate at row {}, column {}",
                pos % n,
                pos / n
            )));
        }
        if let Some(pos) = offsets.iter().position(|v| !v.is_finite()) {
            return Err(PlnError::InvalidInput(format!(
                "non-finite offset at row {}, column {}",
                pos % n,
                pos / n
            )));
        }
        Ok(Self { counts, covariates, offsets, species_names, covariate_names })
    }

    pub fn n(&self) -> usize {
        self.counts.nrows()
    }

    pub fn p(&self) -> usize {
        self.counts.ncols()
    }

    pub fn d(&self) -> usize {
        self.covariates.ncols()
    }

    #[inline]
    pub fn y(&self, i: usize, j: usize) -> f64 {
        self.counts[(i, j)] as f64
    }

    /// Linear predictor `o_ij + x_i' beta_j`.
    #[inline]
    pub fn eta(&self, b: &DMatrix<f64>, i: usize, j: usize) -> f64 {
        let mut s = self.offsets[(i, j)];
        for l in 0..self.d() {
            s += self.covariates[(i, l)] * b[(l, j)];
        }
        s
    }

    /// Same data restricted to a subset of covariate columns.
    pub fn select_covariates(&self, columns: &[usize]) -> Result<Self> {
        if columns.is_empty() || columns.iter().any(|c| *c >= self.d()) {
            return Err(PlnError::InvalidInput(format!("bad covariate selection {columns:?}")));
        }
        let covariates = self.covariates.select_columns(columns);
        let names = columns.iter().map(|c| self.covariate_names[*c].clone()).collect();
        Self::with_names(
            self.counts.clone(),
            covariates,
            self.offsets.clone(),
            self.species_names.clone(),
            names,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub b: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
}

impl ModelParams {
    pub fn new(b: DMatrix<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let params = Self { b, sigma };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.sigma.nrows();
        if self.sigma.ncols() != p || self.b.ncols() != p {
            return Err(PlnError::DimensionMismatch(format!(
                "B is {:?}, Sigma is {:?}",
                self.b.shape(),
                self.sigma.shape()
            )));
        }
        if self.b.iter().any(|v| !v.is_finite()) {
            return Err(PlnError::InvalidInput("B has non-finite entries".into()));
        }
        for i in 0..p {
            for j in 0..i {
                let (a, c) = (self.sigma[(i, j)], self.sigma[(j, i)]);
                if (a - c).abs() > 1e-12 * a.abs().max(c.abs()).max(1.0) {
                    return Err(PlnError::InvalidInput(format!("Sigma is not symmetric at ({i}, {j})")));
                }
            }
        }
        if cholesky(&self.sigma).is_none() {
            return Err(PlnError::NotPositiveDefinite("Sigma".into()));
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn d(&self) -> usize {
        self.b.nrows()
    }

    /// Parameters of the sub-model on the listed species.
    pub fn restrict(&self, species: &[usize]) -> Self {
        Self {
            b: self.b.select_columns(species),
            sigma: self.sigma.select_rows(species).select_columns(species),
        }
    }

    pub fn check_against(&self, data: &Dataset) -> Result<()> {
        if self.p() != data.p() || self.d() != data.d() {
            return Err(PlnError::DimensionMismatch(format!(
                "params are (d={}, p={}), data are (d={}, p={})",
                self.d(),
                self.p(),
                data.d(),
                data.p()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentMatrix {
    pub z: DMatrix<f64>,
}

/// Fixed ordering of the parameter vector: `vec(B)` (column-major, so
/// index `j * d + l` holds `B[l, j]`), then the lower triangle of Sigma row
/// by row (index `d * p + j (j + 1) / 2 + k` holds `sigma_jk`, `j >= k`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub d: usize,
    pub p: usize,
}

impl ParamLayout {
    pub fn new(d: usize, p: usize) -> Self {
        Self { d, p }
    }

    pub fn dim(&self) -> usize {
        self.d * self.p + self.p * (self.p + 1) / 2
    }

    pub fn n_beta(&self) -> usize {
        self.d * self.p
    }

    #[inline]
    pub fn beta_index(&self, l: usize, j: usize) -> usize {
        j * self.d + l
    }

    #[inline]
    pub fn sigma_index(&self, j: usize, k: usize) -> usize {
        let (a, b) = if j >= k { (j, k) } else { (k, j) };
        self.n_beta() + a * (a + 1) / 2 + b
    }

    pub fn to_vector(&self, params: &ModelParams) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        for j in 0..self.p {
            for l in 0..self.d {
                v[self.beta_index(l, j)] = params.b[(l, j)];
            }
            for k in 0..=j {
                v[self.sigma_index(j, k)] = params.sigma[(j, k)];
            }
        }
        v
    }

    pub fn from_vector(&self, v: &DVector<f64>) -> ModelParams {
        let b = DMatrix::from_fn(self.d, self.p, |l, j| v[self.beta_index(l, j)]);
        let sigma = DMatrix::from_fn(self.p, self.p, |j, k| v[self.sigma_index(j, k)]);
        ModelParams { b, sigma }
    }

    /// Human-readable names such as `beta[x1,sp2]` and `sigma[sp1,sp3]`.
    pub fn names(&self, covariates: &[String], species: &[String]) -> Vec<String> {
        let mut names = vec![String::new(); self.dim()];
        for j in 0..self.p {
            for l in 0..self.d {
                names[self.beta_index(l, j)] = format!("beta[{},{}]", covariates[l], species[j]);
            }
            for k in 0..=j {
                names[self.sigma_index(j, k)] = format!("sigma[{},{}]", species[j], species[k]);
            }
        }
        names
    }
}

/// Precomputed ingredients for evaluating `log p(Y_i^(b), z)` on a block of
/// species for one site. The Gaussian factor is shared across sites.
#[derive(Debug, Clone)]
pub struct SiteTarget<'a> {
    prior: &'a PackedCholesky,
    y: Vec<f64>,
    eta: Vec<f64>,
    constant: f64,
}

impl<'a> SiteTarget<'a> {
    pub fn new(prior: &'a PackedCholesky, data: &Dataset, b: &DMatrix<f64>, site: usize, species: &[usize]) -> Self {
        let k = species.len();
        let y: Vec<f64> = species.iter().map(|&j| data.y(site, j)).collect();
        let eta: Vec<f64> = species.iter().map(|&j| data.eta(b, site, j)).collect();
        let log_fact: f64 = species.iter().map(|&j| ln_factorial(data.counts[(site, j)])).sum();
        let constant = -0.5 * (k as f64 * LN_2PI + prior.log_det()) - log_fact;
        Self { prior, y, eta, constant }
    }

    pub fn dim(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    #[inline]
    pub fn log_density(&self, z: &[f64], scratch: &mut [f64]) -> f64 {
        let mut poisson = 0.0;
        for j in 0..self.y.len() {
            let lin = self.eta[j] + z[j];
            poisson += self.y[j] * lin - lin.exp();
        }
        self.constant - 0.5 * self.prior.mahalanobis_sq(z, scratch) + poisson
    }
}

fn prior_factor(params: &ModelParams) -> Result<PackedCholesky> {
    PackedCholesky::new(&params.sigma).ok_or_else(|| PlnError::NotPositiveDefinite("Sigma".into()))
}

/// `log p_theta(Y_i, z)`.
pub fn log_joint_site(params: &ModelParams, data: &Dataset, site: usize, z: &DVector<f64>) -> Result<f64> {
    params.check_against(data)?;
    if site >= data.n() {
        return Err(PlnError::InvalidInput(format!("site {site} out of range (n = {})", data.n())));
    }
    if z.len() != data.p() {
        return Err(PlnError::DimensionMismatch(format!("z has length {}, p = {}", z.len(), data.p())));
    }
    let prior = prior_factor(params)?;
    let species: Vec<usize> = (0..data.p()).collect();
    let target = SiteTarget::new(&prior, data, &params.b, site, &species);
    let mut scratch = vec![0.0; data.p()];
    Ok(target.log_density(z.as_slice(), &mut scratch))
}

/// `log p_theta(Y, Z)` summed over sites.
pub fn complete_log_lik(params: &ModelParams, data: &Dataset, z: &LatentMatrix) -> Result<f64> {
    params.check_against(data)?;
    if z.z.shape() != (data.n(), data.p()) {
        return Err(PlnError::DimensionMismatch(format!(
            "latent matrix is {:?}, data are {:?}",
            z.z.shape(),
            (data.n(), data.p())
        )));
    }
    let prior = prior_factor(params)?;
    let species: Vec<usize> = (0..data.p()).collect();
    let mut scratch = vec![0.0; data.p()];
    let mut row = vec![0.0; data.p()];
    let mut total = 0.0;
    for i in 0..data.n() {
        for j in 0..data.p() {
            row[j] = z.z[(i, j)];
        }
        total += SiteTarget::new(&prior, data, &params.b, i, &species).log_density(&row, &mut scratch);
    }
    Ok(total)
}

/// Draw latent vectors and counts from the model.
pub fn sample_pln<R: Rng + ?Sized>(
    params: &ModelParams,
    covariates: &DMatrix<f64>,
    offsets: &DMatrix<f64>,
    rng: &mut R,
) -> Result<(Dataset, LatentMatrix)> {
    let (n, d) = covariates.shape();
    let p = params.p();
    if d != params.d() || offsets.shape() != (n, p) {
        return Err(PlnError::DimensionMismatch(format!(
            "covariates {:?}, offsets {:?}, params (d={}, p={p})",
            covariates.shape(),
            offsets.shape(),
            params.d()
        )));
    }
    let l = cholesky(&params.sigma)
        .ok_or_else(|| PlnError::NotPositiveDefinite("Sigma".into()))?
        .l();
    let mut z = DMatrix::zeros(n, p);
    let mut counts = DMatrix::<u64>::zeros(n, p);
    let mut eps = DVector::zeros(p);
    for i in 0..n {
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        let zi = &l * &eps;
        for j in 0..p {
            z[(i, j)] = zi[j];
            let mut lin = offsets[(i, j)] + zi[j];
            for c in 0..d {
                lin += covariates[(i, c)] * params.b[(c, j)];
            }
            if lin > MAX_LOG_RATE {
                return Err(PlnError::Numeric(format!("log rate {lin} exceeds {MAX_LOG_RATE} at ({i}, {j})")));
            }
            let rate = lin.exp();
            counts[(i, j)] = if rate > 0.0 {
                Poisson::new(rate)
                    .map_err(|e| PlnError::Numeric(e.to_string()))?
                    .sample(rng) as u64
            } else {
                0
            };
        }
    }
    let data = Dataset::new(counts, covariates.clone(), Some(offsets.clone()))?;
    Ok((data, LatentMatrix { z }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_relative_eq;

    fn one_site() -> (ModelParams, Dataset) {
        let params = ModelParams::new(DMatrix::zeros(1, 1), DMatrix::identity(1, 1)).unwrap();
        let data = Dataset::new(DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, 1.0), None).unwrap();
        (params, data)
    }

    #[test]
    fn scalar_case() {
        let (params, data) = one_site();
        let z = LatentMatrix { z: DMatrix::zeros(1, 1) };
        let v = complete_log_lik(&params, &data, &z).unwrap();
        assert_relative_eq!(v, -0.5 * (2.0 * std::f64::consts::PI).ln() - 1.0, epsilon = 1e-12);
        assert_relative_eq!(v, -1.9189385332, epsilon = 1e-9);
        let s = log_joint_site(&params, &data, 0, &DVector::zeros(1)).unwrap();
        assert_eq!(s, v);
    }

    #[test]
    fn layout_round_trip() {
        let layout = ParamLayout::new(2, 3);
        assert_eq!(layout.dim(), 12);
        let b = DMatrix::from_fn(2, 3, |l, j| (l * 10 + j) as f64);
        let sigma = DMatrix::from_fn(3, 3, |j, k| if j == k { 2.0 } else { 0.1 * (j + k) as f64 });
        let params = ModelParams { b, sigma };
        let v = layout.to_vector(&params);
        assert_eq!(v[layout.beta_index(1, 2)], 12.0);
        assert_eq!(layout.sigma_index(0, 0), 6);
        assert_eq!(layout.sigma_index(1, 0), 7);
        assert_eq!(layout.sigma_index(2, 1), 10);
        assert_eq!(layout.from_vector(&v), params);
    }

    #[test]
    fn dimension_errors() {
        let (params, data) = one_site();
        assert!(matches!(
            log_joint_site(&params, &data, 0, &DVector::zeros(2)),
            Err(PlnError::DimensionMismatch(_))
        ));
        assert!(log_joint_site(&params, &data, 1, &DVector::zeros(1)).is_err());
        let bad = ModelParams { b: DMatrix::zeros(1, 1), sigma: DMatrix::from_element(1, 1, -1.0) };
        assert!(matches!(
            log_joint_site(&bad, &data, 0, &DVector::zeros(1)),
            Err(PlnError::NotPositiveDefinite(_))
        ));
    }

    #[test]
    fn dataset_validation() {
        let cov = DMatrix::from_element(2, 1, f64::NAN);
        assert!(Dataset::new(DMatrix::zeros(2, 1), cov, None).is_err());
        assert!(Dataset::new(DMatrix::zeros(2, 1), DMatrix::zeros(3, 1), None).is_err());
        assert!(Dataset::new(DMatrix::zeros(0, 1), DMatrix::zeros(0, 1), None).is_err());
    }

    #[test]
    fn simulation_guard_and_determinism() {
        let params = ModelParams::new(DMatrix::from_element(1, 2, 800.0), DMatrix::identity(2, 2)).unwrap();
        let x = DMatrix::from_element(3, 1, 1.0);
        let o = DMatrix::zeros(3, 2);
        assert!(matches!(sample_pln(&params, &x, &o, &mut stream(1, 0, 0, 0)), Err(PlnError::Numeric(_))));
        let params = ModelParams::new(DMatrix::from_element(1, 2, 0.5), DMatrix::identity(2, 2)).unwrap();
        let a = sample_pln(&params, &x, &o, &mut stream(1, 0, 0, 0)).unwrap();
        let b = sample_pln(&params, &x, &o, &mut stream(1, 0, 0, 0)).unwrap();
        assert_eq!(a, b);
    }
}
