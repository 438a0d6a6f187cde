//! Model types and the marginal log-likelihood.
//!
//! For subject `alpha` with observation times `t_1..t_N`, the model is
//!
//! ```text
//! x_i = sum_k beta_k phi_k(t_i) + sum_l gamma_l psi_l(t_i) + eps_i
//! ```
//!
//! with `phi` a cubic B-spline basis of size `m_f` (fixed effects), `psi` a
//! cubic B-spline basis of size `m_r` (random effects), `gamma ~ N(0, Gamma)`
//! and `eps_i ~ N(0, noise_var)` independent. Marginally each subject's
//! observation vector is Gaussian with mean `Phi_f beta` and covariance
//! `W = noise_var * I + Phi_r Gamma Phi_r'`.

use nalgebra::{DMatrix, DVector};

use crate::bspline::{make_knots, BasisSystem};
use crate::{Error, Result};

/// B-spline degree used by every shipped model.
pub const DEGREE: usize = 3;

/// One subject's repeated measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

/// A collection of subjects observed on a common domain. Subjects may have
/// different numbers of observations and different time points.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    pub subjects: Vec<Subject>,
}

impl LongitudinalDataset {
    pub fn new(subjects: Vec<Subject>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::InvalidDataset("no subjects".into()));
        }
        for s in &subjects {
            if s.times.is_empty() {
                return Err(Error::InvalidDataset(format!(
                    "subject {} has no observations",
                    s.id
                )));
            }
            if s.times.len() != s.values.len() {
                return Err(Error::InvalidDataset(format!(
                    "subject {}: {} times but {} values",
                    s.id,
                    s.times.len(),
                    s.values.len()
                )));
            }
            if s.times
                .iter()
                .chain(s.values.iter())
                .any(|v| !v.is_finite())
            {
                return Err(Error::InvalidDataset(format!(
                    "subject {} has non-finite entries",
                    s.id
                )));
            }
        }
        Ok(Self { subjects })
    }

    pub fn num_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn total_observations(&self) -> usize {
        self.subjects.iter().map(|s| s.times.len()).sum()
    }

    /// Smallest and largest observation time across all subjects.
    pub fn time_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in &self.subjects {
            for &t in &s.times {
                lo = lo.min(t);
                hi = hi.max(t);
            }
        }
        (lo, hi)
    }
}

/// Basis dimensions and the common domain both bases are anchored to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub m_f: usize,
    pub m_r: usize,
    pub domain: (f64, f64),
}

impl ModelSpec {
    pub fn new(m_f: usize, m_r: usize, domain: (f64, f64)) -> Result<Self> {
        // cubic bases need at least DEGREE + 1 functions
        for m in [m_f, m_r] {
            if m < DEGREE + 1 {
                return Err(Error::InvalidBasisCount {
                    num_basis: m,
                    degree: DEGREE,
                });
            }
        }
        if !domain.0.is_finite() || !domain.1.is_finite() || domain.0 >= domain.1 {
            return Err(Error::InvalidDomain {
                min: domain.0,
                max: domain.1,
            });
        }
        Ok(Self { m_f, m_r, domain })
    }

    pub fn fixed_basis(&self) -> Result<BasisSystem> {
        make_knots(self.domain.0, self.domain.1, self.m_f, DEGREE)
    }

    pub fn random_basis(&self) -> Result<BasisSystem> {
        make_knots(self.domain.0, self.domain.1, self.m_r, DEGREE)
    }
}

/// Model parameters: fixed-effect coefficients, random-effect covariance and
/// the noise variance.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub beta: DVector<f64>,
    pub gamma_cov: DMatrix<f64>,
    pub noise_var: f64,
}

impl ParameterSet {
    pub fn new(beta: DVector<f64>, gamma_cov: DMatrix<f64>, noise_var: f64) -> Result<Self> {
        let p = Self {
            beta,
            gamma_cov,
            noise_var,
        };
        p.validate()?;
        Ok(p)
    }

    /// Checks shape, symmetry and positive definiteness of the covariance
    /// and positivity of the noise variance.
    pub fn validate(&self) -> Result<()> {
        if self.beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameters("non-finite beta".into()));
        }
        let g = &self.gamma_cov;
        if g.nrows() != g.ncols() || g.nrows() == 0 {
            return Err(Error::InvalidParameters(format!(
                "gamma_cov is {}x{}, expected square and nonempty",
                g.nrows(),
                g.ncols()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameters("non-finite gamma_cov".into()));
        }
        let scale = g.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
        for i in 0..g.nrows() {
            for j in (i + 1)..g.ncols() {
                if (g[(i, j)] - g[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidParameters(format!(
                        "gamma_cov not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        if nalgebra::Cholesky::new(g.clone()).is_none() {
            return Err(Error::InvalidParameters(
                "gamma_cov not positive definite".into(),
            ));
        }
        if !(self.noise_var.is_finite() && self.noise_var > 0.0) {
            return Err(Error::InvalidParameters(format!(
                "noise_var = {} must be positive and finite",
                self.noise_var
            )));
        }
        Ok(())
    }
}

/// Marginal covariance `W = noise_var * I + Phi_r Gamma Phi_r'` of one
/// subject's observation vector, symmetrized against rounding.
pub fn marginal_covariance(
    spec: &ModelSpec,
    params: &ParameterSet,
    subject: &Subject,
) -> Result<DMatrix<f64>> {
    check_dims(spec, params)?;
    let phi_r = spec.random_basis()?.design_matrix(&subject.times)?.matrix;
    let mut w = &phi_r * &params.gamma_cov * phi_r.transpose();
    let n = subject.times.len();
    for i in 0..n {
        w[(i, i)] += params.noise_var;
        for j in 0..i {
            let s = 0.5 * (w[(i, j)] + w[(j, i)]);
            w[(i, j)] = s;
            w[(j, i)] = s;
        }
    }
    Ok(w)
}

pub(crate) fn check_dims(spec: &ModelSpec, params: &ParameterSet) -> Result<()> {
    params.validate()?;
    if params.beta.len() != spec.m_f {
        return Err(Error::InvalidParameters(format!(
            "beta has {} entries, model has m_f = {}",
            params.beta.len(),
            spec.m_f
        )));
    }
    if params.gamma_cov.nrows() != spec.m_r {
        return Err(Error::InvalidParameters(format!(
            "gamma_cov is {}x{}, model has m_r = {}",
            params.gamma_cov.nrows(),
            params.gamma_cov.ncols(),
            spec.m_r
        )));
    }
    Ok(())
}

/// Log-density of a centered Gaussian with covariance `w` at residual
/// vector `resid`, via a Cholesky factor (no explicit inverse). The factor's
/// diagonal ratio serves as a cheap conditioning probe.
pub fn centered_gaussian_logpdf(w: &DMatrix<f64>, resid: &DVector<f64>) -> Result<f64> {
    let n = resid.len();
    let chol = nalgebra::Cholesky::new(w.clone())
        .ok_or_else(|| Error::CovarianceDegenerate("covariance not positive definite".into()))?;
    let l = chol.l();
    let mut log_det = 0.0;
    let mut dmin = f64::INFINITY;
    let mut dmax = 0.0f64;
    for i in 0..n {
        let d = l[(i, i)];
        log_det += 2.0 * d.ln();
        dmin = dmin.min(d);
        dmax = dmax.max(d);
    }
    if (dmax / dmin).powi(2) > 1e12 {
        return Err(Error::CovarianceDegenerate(format!(
            "condition estimate {:.3e} exceeds 1e12",
            (dmax / dmin).powi(2)
        )));
    }
    let quad = resid.dot(&chol.solve(resid));
    Ok(-0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad))
}

/// Marginal log-density of one subject's observations.
pub fn log_density(spec: &ModelSpec, params: &ParameterSet, subject: &Subject) -> Result<f64> {
    let w = marginal_covariance(spec, params, subject)?;
    let phi_f = spec.fixed_basis()?.design_matrix(&subject.times)?.matrix;
    let x = DVector::from_column_slice(&subject.values);
    let resid = x - phi_f * &params.beta;
    centered_gaussian_logpdf(&w, &resid)
}

/// Marginal log-likelihood of the whole dataset: the sum of per-subject
/// log-densities.
pub fn log_likelihood(
    spec: &ModelSpec,
    params: &ParameterSet,
    data: &LongitudinalDataset,
) -> Result<f64> {
    let mut total = 0.0;
    for s in &data.subjects {
        total += log_density(spec, params, s)?;
    }
    Ok(total)
}
