//! Parameter estimation: GLS for the fixed effects, best linear unbiased
//! prediction of the random effects, and an EM algorithm for the full
//! parameter set.
//!
//! The EM iteration for state `(beta, Gamma, noise_var)`:
//!
//! 1. predict each subject's random effects from the current state,
//!    `gamma_a = (noise_var * Gamma^-1 + Phi_r' Phi_r)^-1 Phi_r' (x_a - Phi_f beta)`;
//! 2. update the noise variance from the residual sum of squares at the
//!    current `beta` plus the posterior-variance trace correction;
//! 3. update `Gamma` from the predicted effects' second moments plus the
//!    posterior covariance, evaluated at the *new* noise variance;
//! 4. update `beta` by generalized least squares at the updated variances,
//!    an exact maximization that keeps each iteration an ascent;
//! 5. stop when the relative change of the marginal log-likelihood falls
//!    below `rel_tol`.
//!
//! Subjects sharing an identical observation grid share design matrices and
//! factorizations, so studies on a common grid cost far less than the
//! general case. Likelihood values inside the loop use the low-rank
//! (Woodbury) form of `W^-1` and `log |W|`, which agrees with the dense
//! evaluation in [`crate::model`] to rounding.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::{marginal_covariance, LongitudinalDataset, ModelSpec, ParameterSet};
use crate::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// Options controlling the EM loop.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct EmOptions {
    /// Hard cap on EM iterations.
    pub max_iter: usize,
    /// Relative log-likelihood change below which iteration stops:
    /// `|l_new - l_old| / (1 + |l_new|) < rel_tol`.
    pub rel_tol: f64,
    /// Smallest admissible eigenvalue of the updated `Gamma`; anything
    /// below is clamped to keep the covariance invertible.
    pub gamma_floor: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            rel_tol: 1e-8,
            gamma_floor: 1e-10,
        }
    }
}

/// Result of an EM fit.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub spec: ModelSpec,
    pub params: ParameterSet,
    /// Predicted random-effect vectors, one per subject, evaluated at the
    /// final parameters.
    pub subject_effects: Vec<DVector<f64>>,
    /// Fitted values at each subject's own observation times.
    pub fitted_values: Vec<DVector<f64>>,
    pub subject_ids: Vec<String>,
    pub subject_times: Vec<Vec<f64>>,
    /// Marginal log-likelihood at the final parameters.
    pub loglik: f64,
    /// Log-likelihood after the initial state and after every iteration.
    pub em_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Generalized least squares estimate of `beta` with known variance
/// parameters.
pub fn gls_beta(
    spec: &ModelSpec,
    params: &ParameterSet,
    data: &LongitudinalDataset,
) -> Result<DVector<f64>> {
    let fixed = spec.fixed_basis()?;
    let mut normal = DMatrix::zeros(spec.m_f, spec.m_f);
    let mut rhs = DVector::zeros(spec.m_f);
    for subject in &data.subjects {
        let w = marginal_covariance(spec, params, subject)?;
        let chol = Cholesky::new(w)
            .ok_or_else(|| Error::CovarianceDegenerate("marginal covariance".into()))?;
        let phi_f = fixed.design_matrix(&subject.times)?.matrix;
        let x = DVector::from_column_slice(&subject.values);
        normal += phi_f.transpose() * chol.solve(&phi_f);
        rhs += phi_f.transpose() * chol.solve(&x);
    }
    let chol = Cholesky::new(normal).ok_or_else(|| {
        Error::RankDeficient("normal equations for the fixed effects are singular".into())
    })?;
    Ok(chol.solve(&rhs))
}

/// Random-effect predictions in marginal form,
/// `Gamma Phi_r' W^-1 (x - Phi_f beta)`.
pub fn blup_gamma_marginal(
    spec: &ModelSpec,
    params: &ParameterSet,
    data: &LongitudinalDataset,
    beta: &DVector<f64>,
) -> Result<Vec<DVector<f64>>> {
    let fixed = spec.fixed_basis()?;
    let random = spec.random_basis()?;
    let mut out = Vec::with_capacity(data.subjects.len());
    for subject in &data.subjects {
        let w = marginal_covariance(spec, params, subject)?;
        let chol = Cholesky::new(w)
            .ok_or_else(|| Error::CovarianceDegenerate("marginal covariance".into()))?;
        let phi_f = fixed.design_matrix(&subject.times)?.matrix;
        let phi_r = random.design_matrix(&subject.times)?.matrix;
        let x = DVector::from_column_slice(&subject.values);
        let resid = x - phi_f * beta;
        out.push(&params.gamma_cov * phi_r.transpose() * chol.solve(&resid));
    }
    Ok(out)
}

/// Random-effect predictions in conditional form,
/// `(noise_var Gamma^-1 + Phi_r' Phi_r)^-1 Phi_r' (x - Phi_f beta)`.
/// Algebraically identical to [`blup_gamma_marginal`].
pub fn blup_gamma_conditional(
    spec: &ModelSpec,
    params: &ParameterSet,
    data: &LongitudinalDataset,
    beta: &DVector<f64>,
) -> Result<Vec<DVector<f64>>> {
    let fixed = spec.fixed_basis()?;
    let random = spec.random_basis()?;
    let gamma_inv = Cholesky::new(params.gamma_cov.clone())
        .ok_or_else(|| Error::CovarianceDegenerate("gamma_cov".into()))?
        .inverse();
    let mut out = Vec::with_capacity(data.subjects.len());
    for subject in &data.subjects {
        let phi_f = fixed.design_matrix(&subject.times)?.matrix;
        let phi_r = random.design_matrix(&subject.times)?.matrix;
        let x = DVector::from_column_slice(&subject.values);
        let resid = x - phi_f * beta;
        let m = &gamma_inv * params.noise_var + phi_r.transpose() * &phi_r;
        let chol = Cholesky::new(m)
            .ok_or_else(|| Error::CovarianceDegenerate("conditional precision".into()))?;
        out.push(chol.solve(&(phi_r.transpose() * resid)));
    }
    Ok(out)
}

/// Starting values: pooled ordinary least squares for `beta` (minimum-norm
/// through an SVD when the stacked design is rank deficient), the residual
/// variance of that fit as the common scale of `Gamma`, and half of it as
/// the noise variance. Both variance quantities are floored at 1e-8.
pub fn default_init(spec: &ModelSpec, data: &LongitudinalDataset) -> Result<ParameterSet> {
    let fixed = spec.fixed_basis()?;
    let total = data.total_observations();
    let mut design = DMatrix::zeros(total, spec.m_f);
    let mut y = DVector::zeros(total);
    let mut row = 0;
    for subject in &data.subjects {
        let phi = fixed.design_matrix(&subject.times)?.matrix;
        design
            .view_mut((row, 0), (phi.nrows(), spec.m_f))
            .copy_from(&phi);
        for (i, &v) in subject.values.iter().enumerate() {
            y[row + i] = v;
        }
        row += phi.nrows();
    }
    let svd = design.clone().svd(true, true);
    let tol = f64::EPSILON * total.max(spec.m_f) as f64 * svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    if rank == 0 {
        return Err(Error::RankDeficient("pooled design is zero".into()));
    }
    let beta = svd
        .solve(&y, tol)
        .map_err(|e| Error::RankDeficient(e.to_string()))?;
    let resid = &y - design * &beta;
    let s2 = (resid.norm_squared() / total as f64).max(1e-8);
    ParameterSet::new(
        beta,
        DMatrix::identity(spec.m_r, spec.m_r) * s2,
        (s2 / 2.0).max(1e-8),
    )
}

/// Fitted values for one subject recomputed from the stored parameters and
/// effects; identical to the values cached at fit time.
pub fn predict_subject(fit: &FittedModel, subject_index: usize) -> Result<DVector<f64>> {
    if subject_index >= fit.subject_times.len() {
        return Err(Error::InvalidIndex {
            index: subject_index,
            degree: 0,
            limit: fit.subject_times.len(),
        });
    }
    fitted_curve(
        &fit.spec,
        &fit.params.beta,
        &fit.subject_effects[subject_index],
        &fit.subject_times[subject_index],
    )
}

/// `Phi_f beta + Phi_r gamma` at the given times.
pub fn fitted_curve(
    spec: &ModelSpec,
    beta: &DVector<f64>,
    gamma: &DVector<f64>,
    times: &[f64],
) -> Result<DVector<f64>> {
    let phi_f = spec.fixed_basis()?.design_matrix(times)?.matrix;
    let phi_r = spec.random_basis()?.design_matrix(times)?.matrix;
    Ok(phi_f * beta + phi_r * gamma)
}

/// Population mean curve `Phi_f beta` at the given times.
pub fn mean_curve(spec: &ModelSpec, beta: &DVector<f64>, times: &[f64]) -> Result<DVector<f64>> {
    let phi_f = spec.fixed_basis()?.design_matrix(times)?.matrix;
    Ok(phi_f * beta)
}

/// Maximum-likelihood estimation by EM from the given starting values.
pub fn em_fit(
    spec: &ModelSpec,
    data: &LongitudinalDataset,
    init: &ParameterSet,
    opts: &EmOptions,
) -> Result<FittedModel> {
    em_fit_inner(spec, data, init, opts, true)
}

/// EM with the variance updates (steps 2 and 3) disabled; the beta step
/// solves the GLS problem at the frozen variances directly. Exists for
/// consistency checks.
#[doc(hidden)]
pub fn em_fit_frozen_variances(
    spec: &ModelSpec,
    data: &LongitudinalDataset,
    init: &ParameterSet,
    opts: &EmOptions,
) -> Result<FittedModel> {
    em_fit_inner(spec, data, init, opts, false)
}

/// Design cross-products for one distinct observation grid.
struct GridCache {
    phi_f: DMatrix<f64>,
    phi_r: DMatrix<f64>,
    s_f: DMatrix<f64>,
    s_r: DMatrix<f64>,
    c_fr: DMatrix<f64>,
    c_rf: DMatrix<f64>,
    n_obs: usize,
    count: usize,
}

/// Per-subject sufficient statistics; everything the EM loop touches per
/// subject is in the basis coordinates.
struct SubjectStats {
    grid: usize,
    xtx: f64,
    phi_f_tx: DVector<f64>,
    phi_r_tx: DVector<f64>,
}

struct Workspace {
    grids: Vec<GridCache>,
    subjects: Vec<SubjectStats>,
    total_obs: usize,
}

fn build_workspace(spec: &ModelSpec, data: &LongitudinalDataset) -> Result<Workspace> {
    let fixed = spec.fixed_basis()?;
    let random = spec.random_basis()?;
    let mut grid_of: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut grids: Vec<GridCache> = Vec::new();
    let mut subjects = Vec::with_capacity(data.subjects.len());
    let mut total_obs = 0;
    for subject in &data.subjects {
        let key: Vec<u64> = subject.times.iter().map(|t| t.to_bits()).collect();
        let grid = match grid_of.get(&key) {
            Some(&g) => {
                grids[g].count += 1;
                g
            }
            None => {
                let phi_f = fixed.design_matrix(&subject.times)?.matrix;
                let phi_r = random.design_matrix(&subject.times)?.matrix;
                let s_f = phi_f.transpose() * &phi_f;
                let s_r = phi_r.transpose() * &phi_r;
                let c_fr = phi_f.transpose() * &phi_r;
                let c_rf = c_fr.transpose();
                grids.push(GridCache {
                    n_obs: subject.times.len(),
                    phi_f,
                    phi_r,
                    s_f,
                    s_r,
                    c_fr,
                    c_rf,
                    count: 1,
                });
                grid_of.insert(key, grids.len() - 1);
                grids.len() - 1
            }
        };
        let g = &grids[grid];
        let x = DVector::from_column_slice(&subject.values);
        subjects.push(SubjectStats {
            grid,
            xtx: x.dot(&x),
            phi_f_tx: g.phi_f.transpose() * &x,
            phi_r_tx: g.phi_r.transpose() * &x,
        });
        total_obs += subject.times.len();
    }
    Ok(Workspace {
        grids,
        subjects,
        total_obs,
    })
}

/// Marginal log-likelihood through the low-rank identities
/// `log|W| = (N - m_r) log s2 + log|Gamma| + log|s2 Gamma^-1 + S_r|` and
/// `a' W^-1 a = (a'a - b' M^-1 b) / s2` with `b = Phi_r' a`.
fn woodbury_loglik(
    ws: &Workspace,
    beta: &DVector<f64>,
    gamma_inv: &DMatrix<f64>,
    log_det_gamma: f64,
    s2: f64,
) -> Result<f64> {
    let m_r = gamma_inv.nrows();
    let mut per_grid = Vec::with_capacity(ws.grids.len());
    for g in &ws.grids {
        let m = gamma_inv * s2 + &g.s_r;
        let chol = Cholesky::new(m)
            .ok_or_else(|| Error::CovarianceDegenerate("low-rank precision".into()))?;
        let mut log_det_m = 0.0;
        for i in 0..m_r {
            log_det_m += 2.0 * chol.l()[(i, i)].ln();
        }
        per_grid.push((chol, log_det_m));
    }
    let mut total = 0.0;
    for s in &ws.subjects {
        let g = &ws.grids[s.grid];
        let (chol, log_det_m) = &per_grid[s.grid];
        let n = g.n_obs as f64;
        let ata = s.xtx - 2.0 * beta.dot(&s.phi_f_tx) + beta.dot(&(&g.s_f * beta));
        let b = &s.phi_r_tx - &g.c_rf * beta;
        let quad = (ata - b.dot(&chol.solve(&b))) / s2;
        let log_det_w = (n - m_r as f64) * s2.ln() + log_det_gamma + log_det_m;
        total += -0.5 * (n * LN_2PI + log_det_w + quad);
    }
    Ok(total)
}

fn chol_with_logdet(m: DMatrix<f64>, what: &str) -> Result<(Cholesky<f64, nalgebra::Dyn>, f64)> {
    let dim = m.nrows();
    let chol = Cholesky::new(m)
        .ok_or_else(|| Error::EmDegenerate(format!("{what} not positive definite")))?;
    let mut log_det = 0.0;
    for i in 0..dim {
        log_det += 2.0 * chol.l()[(i, i)].ln();
    }
    Ok((chol, log_det))
}

fn em_fit_inner(
    spec: &ModelSpec,
    data: &LongitudinalDataset,
    init: &ParameterSet,
    opts: &EmOptions,
    update_variances: bool,
) -> Result<FittedModel> {
    crate::model::check_dims(spec, init)?;
    let ws = build_workspace(spec, data)?;
    let n_subjects = ws.subjects.len() as f64;

    let mut beta = init.beta.clone();
    let mut gamma = init.gamma_cov.clone();
    let mut s2 = init.noise_var;

    let (mut gamma_chol, mut log_det_gamma) = chol_with_logdet(gamma.clone(), "gamma_cov")
        .map_err(|_| Error::InvalidParameters("initial gamma_cov not positive definite".into()))?;
    let mut gamma_inv = gamma_chol.inverse();

    let mut trace = Vec::with_capacity(opts.max_iter + 1);
    let mut loglik = woodbury_loglik(&ws, &beta, &gamma_inv, log_det_gamma, s2)?;
    if !loglik.is_finite() {
        return Err(Error::EmDiverged {
            iteration: 0,
            message: "non-finite log-likelihood at the starting values".into(),
        });
    }
    trace.push(loglik);

    let mut converged = false;
    let mut iterations = 0;
    let mut effects: Vec<DVector<f64>> = vec![DVector::zeros(spec.m_r); ws.subjects.len()];

    for iter in 1..=opts.max_iter {
        // step 1: predicted effects at the current state
        let mut e_chols = Vec::with_capacity(ws.grids.len());
        for g in &ws.grids {
            let m = &gamma_inv * s2 + &g.s_r;
            let chol = Cholesky::new(m).ok_or_else(|| {
                Error::EmDegenerate("prediction precision not positive definite".into())
            })?;
            e_chols.push(chol);
        }
        for (s, e) in ws.subjects.iter().zip(effects.iter_mut()) {
            let g = &ws.grids[s.grid];
            let b = &s.phi_r_tx - &g.c_rf * &beta;
            *e = e_chols[s.grid].solve(&b);
        }

        if update_variances {
            // step 2: noise variance at the current beta
            let mut acc = 0.0;
            let mut grid_traces = Vec::with_capacity(ws.grids.len());
            for (g, chol) in ws.grids.iter().zip(e_chols.iter()) {
                // tr(Phi V Phi') = s2_old * tr(M^-1 S_r)
                grid_traces.push(s2 * chol.solve(&g.s_r).trace());
            }
            for (s, e) in ws.subjects.iter().zip(effects.iter()) {
                let g = &ws.grids[s.grid];
                let rss = s.xtx - 2.0 * beta.dot(&s.phi_f_tx) - 2.0 * e.dot(&s.phi_r_tx)
                    + 2.0 * beta.dot(&(&g.c_fr * e))
                    + beta.dot(&(&g.s_f * &beta))
                    + e.dot(&(&g.s_r * e));
                acc += rss + grid_traces[s.grid];
            }
            let s2_new = acc / ws.total_obs as f64;
            if !(s2_new.is_finite() && s2_new > 0.0) {
                return Err(Error::EmDegenerate(format!(
                    "noise variance update produced {s2_new}"
                )));
            }

            // step 3: effect covariance, posterior part at the new noise
            // variance and the previous gamma
            let mut gamma_new = DMatrix::zeros(spec.m_r, spec.m_r);
            for e in effects.iter() {
                gamma_new.ger(1.0, e, e, 1.0);
            }
            for g in &ws.grids {
                let m = &gamma_inv * s2_new + &g.s_r;
                let chol = Cholesky::new(m).ok_or_else(|| {
                    Error::EmDegenerate("posterior precision not positive definite".into())
                })?;
                gamma_new += chol.inverse() * (s2_new * g.count as f64);
            }
            gamma_new /= n_subjects;
            // symmetrize and clamp the spectrum at the floor
            for i in 0..spec.m_r {
                for j in 0..i {
                    let v = 0.5 * (gamma_new[(i, j)] + gamma_new[(j, i)]);
                    gamma_new[(i, j)] = v;
                    gamma_new[(j, i)] = v;
                }
            }
            if gamma_new.iter().any(|v| !v.is_finite()) {
                return Err(Error::EmDegenerate("non-finite effect covariance".into()));
            }
            let eig = nalgebra::SymmetricEigen::new(gamma_new.clone());
            if eig.eigenvalues.iter().any(|l| *l < opts.gamma_floor) {
                let mut lam = eig.eigenvalues.clone();
                for l in lam.iter_mut() {
                    *l = l.max(opts.gamma_floor);
                }
                gamma_new =
                    &eig.eigenvectors * DMatrix::from_diagonal(&lam) * eig.eigenvectors.transpose();
                for i in 0..spec.m_r {
                    for j in 0..i {
                        let v = 0.5 * (gamma_new[(i, j)] + gamma_new[(j, i)]);
                        gamma_new[(i, j)] = v;
                        gamma_new[(j, i)] = v;
                    }
                }
            }
            s2 = s2_new;
            gamma = gamma_new;
            (gamma_chol, log_det_gamma) = chol_with_logdet(gamma.clone(), "effect covariance")?;
            gamma_inv = gamma_chol.inverse();
        }

        // step 4: generalized least squares at the updated variances.
        // Exact maximization over beta keeps the ascent property and, unlike
        // least squares on the effect-corrected responses, does not stall
        // when the noise variance is small and the two bases overlap.
        let mut normal = DMatrix::zeros(spec.m_f, spec.m_f);
        let mut rhs = DVector::zeros(spec.m_f);
        let mut beta_chols = Vec::with_capacity(ws.grids.len());
        for g in &ws.grids {
            let m = &gamma_inv * s2 + &g.s_r;
            let chol = Cholesky::new(m).ok_or_else(|| {
                Error::EmDegenerate("weighting precision not positive definite".into())
            })?;
            normal += (&g.s_f - &g.c_fr * chol.solve(&g.c_rf)) * g.count as f64;
            beta_chols.push(chol);
        }
        for s in ws.subjects.iter() {
            let g = &ws.grids[s.grid];
            rhs += &s.phi_f_tx - &g.c_fr * beta_chols[s.grid].solve(&s.phi_r_tx);
        }
        beta = Cholesky::new(normal)
            .ok_or_else(|| Error::RankDeficient("fixed-effect normal matrix is singular".into()))?
            .solve(&rhs);

        let new_loglik = woodbury_loglik(&ws, &beta, &gamma_inv, log_det_gamma, s2)?;
        if !new_loglik.is_finite() {
            return Err(Error::EmDiverged {
                iteration: iter,
                message: "non-finite log-likelihood".into(),
            });
        }
        trace.push(new_loglik);
        iterations = iter;
        let delta = (new_loglik - loglik).abs();
        loglik = new_loglik;
        if delta / (1.0 + loglik.abs()) < opts.rel_tol {
            converged = true;
            break;
        }
    }

    // final prediction pass at the converged parameters
    let mut e_chols = Vec::with_capacity(ws.grids.len());
    for g in &ws.grids {
        let m = &gamma_inv * s2 + &g.s_r;
        e_chols.push(Cholesky::new(m).ok_or_else(|| {
            Error::EmDegenerate("prediction precision not positive definite".into())
        })?);
    }
    for (s, e) in ws.subjects.iter().zip(effects.iter_mut()) {
        let g = &ws.grids[s.grid];
        let b = &s.phi_r_tx - &g.c_rf * &beta;
        *e = e_chols[s.grid].solve(&b);
    }

    let params = ParameterSet::new(beta, gamma, s2)
        .map_err(|e| Error::EmDegenerate(format!("final parameter state invalid: {e}")))?;
    let mut fitted_values = Vec::with_capacity(data.subjects.len());
    for (subject, e) in data.subjects.iter().zip(effects.iter()) {
        fitted_values.push(fitted_curve(spec, &params.beta, e, &subject.times)?);
    }
    Ok(FittedModel {
        spec: *spec,
        params,
        subject_effects: effects,
        fitted_values,
        subject_ids: data.subjects.iter().map(|s| s.id.clone()).collect(),
        subject_times: data.subjects.iter().map(|s| s.times.clone()).collect(),
        loglik,
        em_trace: trace,
        converged,
        iterations,
    })
}
