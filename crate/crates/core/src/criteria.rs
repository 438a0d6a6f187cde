//! Model-selection criteria over a grid of basis dimensions.
//!
//! The free parameters of a model are `beta` (`m_f` of them), the distinct
//! entries of the symmetric `Gamma` (`m_r (m_r + 1) / 2`), and the noise
//! variance, so `p = m_f + m_r (m_r + 1) / 2 + 1`. With `l` the maximized
//! marginal log-likelihood and `n` the number of subjects,
//!
//! ```text
//! AIC   = -2 l + 2 p
//! BIC   = -2 l + p log n
//! BIC_I = -2 l + p (log n - log 2 pi) + log |I|
//! ```
//!
//! where `I` is minus the average per-subject Hessian of the marginal
//! log-density at the fitted parameters. The Hessian is assembled
//! analytically in basis coordinates; [`fd_hessian`] provides an
//! implementation-independent finite-difference check of the same matrix.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::estimation::{default_init, em_fit, EmOptions, FittedModel};
use crate::model::{log_likelihood, LongitudinalDataset, ModelSpec, ParameterSet};
use crate::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// Enumeration of the distinct entries of a symmetric matrix: pairs
/// `(h, k)` with `h <= k`, ordered column by column, so for dimension 3
/// the order is (0,0), (0,1), (1,1), (0,2), (1,2), (2,2).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VechIndex {
    dim: usize,
    pairs: Vec<(usize, usize)>,
}

impl VechIndex {
    pub fn new(dim: usize) -> Self {
        let mut pairs = Vec::with_capacity(dim * (dim + 1) / 2);
        for k in 0..dim {
            for h in 0..=k {
                pairs.push((h, k));
            }
        }
        Self { dim, pairs }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Position of the pair `(min(h,k), max(h,k))` in the enumeration.
    pub fn position(&self, h: usize, k: usize) -> usize {
        let (h, k) = if h <= k { (h, k) } else { (k, h) };
        k * (k + 1) / 2 + h
    }

    /// Stacks the distinct entries of a symmetric matrix.
    pub fn pack(&self, m: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.pairs.iter().map(|&(h, k)| m[(h, k)]))
    }

    /// Rebuilds the symmetric matrix from its distinct entries.
    pub fn unpack(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (idx, &(h, k)) in self.pairs.iter().enumerate() {
            m[(h, k)] = v[idx];
            m[(k, h)] = v[idx];
        }
        m
    }
}

/// Number of free parameters of a model with the given basis dimensions.
pub fn num_params(m_f: usize, m_r: usize) -> usize {
    m_f + m_r * (m_r + 1) / 2 + 1
}

/// Flattens `(beta, vech Gamma, noise_var)` into one coordinate vector.
pub fn pack_theta(params: &ParameterSet, vech: &VechIndex) -> DVector<f64> {
    let m_f = params.beta.len();
    let mut theta = DVector::zeros(m_f + vech.len() + 1);
    theta.rows_mut(0, m_f).copy_from(&params.beta);
    theta
        .rows_mut(m_f, vech.len())
        .copy_from(&vech.pack(&params.gamma_cov));
    theta[m_f + vech.len()] = params.noise_var;
    theta
}

/// Inverse of [`pack_theta`]; fails if the encoded parameters are invalid
/// (for example a non-positive-definite covariance).
pub fn unpack_theta(theta: &DVector<f64>, m_f: usize, vech: &VechIndex) -> Result<ParameterSet> {
    let beta = DVector::from_iterator(m_f, theta.rows(0, m_f).iter().cloned());
    let gamma = vech.unpack(&DVector::from_iterator(
        vech.len(),
        theta.rows(m_f, vech.len()).iter().cloned(),
    ));
    ParameterSet::new(beta, gamma, theta[m_f + vech.len()])
}

pub fn aic(fit: &FittedModel) -> f64 {
    let p = num_params(fit.spec.m_f, fit.spec.m_r) as f64;
    -2.0 * fit.loglik + 2.0 * p
}

/// Schwarz criterion; the sample-size term counts subjects, not
/// observations. With a single subject the penalty vanishes.
pub fn bic(fit: &FittedModel) -> f64 {
    let p = num_params(fit.spec.m_f, fit.spec.m_r) as f64;
    let n = fit.subject_ids.len() as f64;
    -2.0 * fit.loglik + p * n.ln()
}

/// Minus the average per-subject Hessian of the marginal log-density with
/// respect to `(beta, vech Gamma, noise_var)`, evaluated analytically.
///
/// Derivatives with respect to an off-diagonal `Gamma_hk` are taken in the
/// symmetric parameterization: the perturbation moves `Gamma_hk` and
/// `Gamma_kh` together. Every block reduces to the small matrices
/// `Phi_r' W^-j Phi_r`, `Phi_f' W^-j Phi_f` and the vectors
/// `Phi' W^-j (x - Phi_f beta)`, so the per-subject work after one shared
/// factorization of `W` is quadratic in the number of observations.
pub fn information_matrix(
    spec: &ModelSpec,
    params: &ParameterSet,
    data: &LongitudinalDataset,
) -> Result<DMatrix<f64>> {
    crate::model::check_dims(spec, params)?;
    let vech = VechIndex::new(spec.m_r);
    let m_f = spec.m_f;
    let p = num_params(spec.m_f, spec.m_r);
    let n = data.num_subjects() as f64;
    let fixed = spec.fixed_basis()?;
    let random = spec.random_basis()?;

    // pair expansion for the symmetric parameterization
    let expansions: Vec<Vec<(usize, usize)>> = vech
        .pairs()
        .iter()
        .map(|&(h, k)| {
            if h == k {
                vec![(h, h)]
            } else {
                vec![(h, k), (k, h)]
            }
        })
        .collect();

    let mut hess = DMatrix::zeros(p, p);

    // group subjects sharing an observation grid
    use std::collections::HashMap;
    let mut grid_of: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut grids: Vec<Vec<usize>> = Vec::new();
    for (i, s) in data.subjects.iter().enumerate() {
        let key: Vec<u64> = s.times.iter().map(|t| t.to_bits()).collect();
        match grid_of.get(&key) {
            Some(&g) => grids[g].push(i),
            None => {
                grid_of.insert(key, grids.len());
                grids.push(vec![i]);
            }
        }
    }

    for members in &grids {
        let times = &data.subjects[members[0]].times;
        let n_obs = times.len();
        let phi_f = fixed.design_matrix(times)?.matrix;
        let phi_r = random.design_matrix(times)?.matrix;
        let mut w = &phi_r * &params.gamma_cov * phi_r.transpose();
        for i in 0..n_obs {
            w[(i, i)] += params.noise_var;
            for j in 0..i {
                let s = 0.5 * (w[(i, j)] + w[(j, i)]);
                w[(i, j)] = s;
                w[(j, i)] = s;
            }
        }
        let chol = Cholesky::new(w).ok_or_else(|| {
            Error::InformationDegenerate("marginal covariance not positive definite".into())
        })?;
        let w_inv = chol.inverse();
        let u = &w_inv * &phi_r; //  W^-1 Phi_r
        let g1 = phi_r.transpose() * &u; //  Phi_r' W^-1 Phi_r
        let u2 = &w_inv * &u;
        let g2 = phi_r.transpose() * &u2; //  Phi_r' W^-2 Phi_r
        let wf = &w_inv * &phi_f;
        let ff = phi_f.transpose() * &wf; //  Phi_f' W^-1 Phi_f
        let fr = phi_f.transpose() * &u; //  Phi_f' W^-1 Phi_r
        let tr_w2: f64 = w_inv.iter().map(|v| v * v).sum();

        for &subject_idx in members {
            let subject = &data.subjects[subject_idx];
            let x = DVector::from_column_slice(&subject.values);
            let a = x - &phi_f * &params.beta;
            let v = &w_inv * &a;
            let v2 = &w_inv * &v;
            let c1 = phi_r.transpose() * &v; //  Phi_r' W^-1 a
            let c2 = phi_r.transpose() * &v2; //  Phi_r' W^-2 a
            let f2 = phi_f.transpose() * &v2; //  Phi_f' W^-2 a
            let quad3 = v.dot(&v2); //  a' W^-3 a

            // beta x beta
            for i in 0..m_f {
                for j in 0..m_f {
                    hess[(i, j)] -= ff[(i, j)];
                }
            }
            // beta x vech
            for (pos, exp) in expansions.iter().enumerate() {
                let col = m_f + pos;
                for &(r, s) in exp {
                    for i in 0..m_f {
                        let val = fr[(i, r)] * c1[s];
                        hess[(i, col)] -= val;
                        hess[(col, i)] -= val;
                    }
                }
            }
            // beta x noise
            for i in 0..m_f {
                hess[(i, p - 1)] -= f2[i];
                hess[(p - 1, i)] -= f2[i];
            }
            // vech x vech
            for (pa, ea) in expansions.iter().enumerate() {
                for (pb, eb) in expansions.iter().enumerate().skip(pa) {
                    let mut tr_term = 0.0;
                    let mut quad_term = 0.0;
                    for &(r, s) in ea {
                        for &(r2, s2) in eb {
                            tr_term += g1[(s2, r)] * g1[(s, r2)];
                            quad_term += c1[r] * g1[(s, r2)] * c1[s2];
                        }
                    }
                    let val = 0.5 * tr_term - quad_term;
                    hess[(m_f + pa, m_f + pb)] += val;
                    if pb != pa {
                        hess[(m_f + pb, m_f + pa)] += val;
                    }
                }
            }
            // vech x noise
            for (pos, exp) in expansions.iter().enumerate() {
                let mut val = 0.0;
                for &(r, s) in exp {
                    val += 0.5 * g2[(s, r)] - c2[r] * c1[s];
                }
                hess[(m_f + pos, p - 1)] += val;
                hess[(p - 1, m_f + pos)] += val;
            }
            // noise x noise
            hess[(p - 1, p - 1)] += 0.5 * tr_w2 - quad3;
        }
    }

    let info = hess / -n;
    if info.iter().any(|v| !v.is_finite()) {
        return Err(Error::InformationDegenerate(
            "non-finite entries in the averaged Hessian".into(),
        ));
    }
    Ok(info)
}

/// Central finite differences of the total marginal log-likelihood with
/// respect to `(beta, vech Gamma, noise_var)`. Steps are relative to the
/// coordinate magnitude and shrunk as needed so every stencil point keeps
/// `Gamma` positive definite (with margin) and the noise variance positive.
pub fn fd_hessian(
    spec: &ModelSpec,
    params: &ParameterSet,
    data: &LongitudinalDataset,
    step: f64,
) -> Result<DMatrix<f64>> {
    crate::model::check_dims(spec, params)?;
    let vech = VechIndex::new(spec.m_r);
    let m_f = spec.m_f;
    let p = num_params(spec.m_f, spec.m_r);
    let theta0 = pack_theta(params, &vech);

    let mut steps: Vec<f64> = theta0.iter().map(|t| step * t.abs().max(1.0)).collect();
    // a mixed stencil shifts Gamma's spectrum by at most twice the largest
    // covariance step, and the noise coordinate must stay positive
    let lam_min = nalgebra::SymmetricEigen::new(params.gamma_cov.clone())
        .eigenvalues
        .min();
    let max_gamma_step = steps[m_f..m_f + vech.len()]
        .iter()
        .cloned()
        .fold(0.0f64, f64::max);
    if 4.0 * max_gamma_step > lam_min {
        let shrink = lam_min / (4.0 * max_gamma_step);
        for s in steps[m_f..m_f + vech.len()].iter_mut() {
            *s *= shrink;
        }
    }
    if 4.0 * steps[p - 1] > params.noise_var {
        steps[p - 1] = params.noise_var / 4.0;
    }

    let eval = |theta: &DVector<f64>| -> Result<f64> {
        let params = unpack_theta(theta, m_f, &vech)?;
        log_likelihood(spec, &params, data)
    };

    let f0 = eval(&theta0)?;
    let mut hess = DMatrix::zeros(p, p);
    for i in 0..p {
        let hi = steps[i];
        for j in 0..=i {
            let hj = steps[j];
            let val = if i == j {
                let mut up = theta0.clone();
                let mut dn = theta0.clone();
                up[i] += hi;
                dn[i] -= hi;
                (eval(&up)? - 2.0 * f0 + eval(&dn)?) / (hi * hi)
            } else {
                let mut pp = theta0.clone();
                let mut pm = theta0.clone();
                let mut mp = theta0.clone();
                let mut mm = theta0.clone();
                pp[i] += hi;
                pp[j] += hj;
                pm[i] += hi;
                pm[j] -= hj;
                mp[i] -= hi;
                mp[j] += hj;
                mm[i] -= hi;
                mm[j] -= hj;
                (eval(&pp)? - eval(&pm)? - eval(&mp)? + eval(&mm)?) / (4.0 * hi * hj)
            };
            hess[(i, j)] = val;
            hess[(j, i)] = val;
        }
    }
    Ok(hess)
}

/// Log-determinant of the (symmetrized) information matrix via a Cholesky
/// factorization. A fit whose information matrix is not positive definite
/// sits on a saddle or boundary of the parameter space, and the curvature
/// correction is meaningless there, so the factorization failure is the
/// degeneracy signal. A positive determinant alone would not do: a saddle
/// with an even number of descent directions also has one.
pub fn info_log_det(info: &DMatrix<f64>) -> Result<f64> {
    let sym = (info + info.transpose()) * 0.5;
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(Error::InformationDegenerate(
            "non-finite entry in the information matrix".into(),
        ));
    }
    let chol = nalgebra::Cholesky::new(sym).ok_or_else(|| {
        Error::InformationDegenerate("information matrix is not positive definite".into())
    })?;
    Ok(2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>())
}

/// The information-corrected Bayesian criterion
/// `-2 l + p (log n - log 2 pi) + log |I|`.
pub fn bic_i(fit: &FittedModel, data: &LongitudinalDataset) -> Result<f64> {
    let info = information_matrix(&fit.spec, &fit.params, data)?;
    let log_det = info_log_det(&info)?;
    Ok(bic_i_from_parts(fit, log_det))
}

fn bic_i_from_parts(fit: &FittedModel, info_log_det: f64) -> f64 {
    let p = num_params(fit.spec.m_f, fit.spec.m_r) as f64;
    let n = fit.subject_ids.len() as f64;
    -2.0 * fit.loglik + p * (n.ln() - LN_2PI) + info_log_det
}

/// Outcome of one grid candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "state", content = "message")]
pub enum CandidateStatus {
    Ok,
    FitFailed(String),
    InfoFailed(String),
}

impl std::fmt::Display for CandidateStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CandidateStatus::Ok => write!(f, "ok"),
            CandidateStatus::FitFailed(m) => write!(f, "fit-failed: {m}"),
            CandidateStatus::InfoFailed(m) => write!(f, "info-failed: {m}"),
        }
    }
}

/// One row of the selection report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub m_f: usize,
    pub m_r: usize,
    pub p: usize,
    pub loglik: Option<f64>,
    pub aic: Option<f64>,
    pub bic: Option<f64>,
    pub bic_i: Option<f64>,
    pub info_log_det: Option<f64>,
    pub converged: Option<bool>,
    pub iterations: Option<usize>,
    pub status: CandidateStatus,
}

/// Winning `(m_f, m_r)` per criterion; a criterion is `None` when no
/// candidate produced a finite value for it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChosenModels {
    pub aic: Option<(usize, usize)>,
    pub bic: Option<(usize, usize)>,
    pub bic_i: Option<(usize, usize)>,
}

/// Full record of a grid search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriteriaReport {
    pub n_subjects: usize,
    pub domain: (f64, f64),
    pub records: Vec<CandidateRecord>,
    pub chosen: ChosenModels,
}

/// Fits every `(m_f, m_r)` candidate on the inclusive grid and tabulates
/// the three criteria. Candidates are fitted independently (fresh starting
/// values each) and in parallel; records are reported in ascending
/// `(m_f, m_r)` order and ties in a criterion resolve to the smaller
/// `m_f`, then smaller `m_r`. A failed fit excludes the candidate from
/// every criterion; a failed information matrix excludes it from the
/// corrected criterion only.
pub fn select_model(
    data: &LongitudinalDataset,
    domain: (f64, f64),
    mf_range: (usize, usize),
    mr_range: (usize, usize),
    em: &EmOptions,
) -> Result<CriteriaReport> {
    if mf_range.0 > mf_range.1 || mr_range.0 > mr_range.1 {
        return Err(Error::SelectionFailed("empty candidate grid".into()));
    }
    let mut candidates = Vec::new();
    for m_f in mf_range.0..=mf_range.1 {
        for m_r in mr_range.0..=mr_range.1 {
            candidates.push((m_f, m_r));
        }
    }
    let records: Vec<CandidateRecord> = candidates
        .par_iter()
        .map(|&(m_f, m_r)| evaluate_candidate(data, domain, m_f, m_r, em))
        .collect();

    let pick = |get: &dyn Fn(&CandidateRecord) -> Option<f64>| -> Option<(usize, usize)> {
        let mut best: Option<((usize, usize), f64)> = None;
        for r in &records {
            if let Some(v) = get(r) {
                if v.is_finite() && best.is_none_or(|(_, b)| v < b) {
                    best = Some(((r.m_f, r.m_r), v));
                }
            }
        }
        best.map(|(k, _)| k)
    };
    let chosen = ChosenModels {
        aic: pick(&|r| r.aic),
        bic: pick(&|r| r.bic),
        bic_i: pick(&|r| r.bic_i),
    };
    if chosen.aic.is_none() && chosen.bic.is_none() && chosen.bic_i.is_none() {
        return Err(Error::SelectionFailed(
            "every candidate on the grid failed".into(),
        ));
    }
    Ok(CriteriaReport {
        n_subjects: data.num_subjects(),
        domain,
        records,
        chosen,
    })
}

fn evaluate_candidate(
    data: &LongitudinalDataset,
    domain: (f64, f64),
    m_f: usize,
    m_r: usize,
    em: &EmOptions,
) -> CandidateRecord {
    let p = num_params(m_f, m_r);
    let failed = |msg: String| CandidateRecord {
        m_f,
        m_r,
        p,
        loglik: None,
        aic: None,
        bic: None,
        bic_i: None,
        info_log_det: None,
        converged: None,
        iterations: None,
        status: CandidateStatus::FitFailed(msg),
    };
    let spec = match ModelSpec::new(m_f, m_r, domain) {
        Ok(s) => s,
        Err(e) => return failed(e.to_string()),
    };
    let init = match default_init(&spec, data) {
        Ok(i) => i,
        Err(e) => return failed(e.to_string()),
    };
    let fit = match em_fit(&spec, data, &init, em) {
        Ok(f) => f,
        Err(e) => return failed(e.to_string()),
    };
    let aic_v = aic(&fit);
    let bic_v = bic(&fit);
    let (bic_i_v, log_det, status) =
        match information_matrix(&spec, &fit.params, data).and_then(|info| info_log_det(&info)) {
            Ok(ld) => (
                Some(bic_i_from_parts(&fit, ld)),
                Some(ld),
                CandidateStatus::Ok,
            ),
            Err(e) => (None, None, CandidateStatus::InfoFailed(e.to_string())),
        };
    CandidateRecord {
        m_f,
        m_r,
        p,
        loglik: Some(fit.loglik),
        aic: Some(aic_v),
        bic: Some(bic_v),
        bic_i: bic_i_v,
        info_log_det: log_det,
        converged: Some(fit.converged),
        iterations: Some(fit.iterations),
        status,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Subject;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn toeplitz(dim: usize, rho: f64) -> DMatrix<f64> {
        DMatrix::from_fn(dim, dim, |i, j| rho.powi((i as i32 - j as i32).abs()))
    }

    fn sample_dataset(
        rng: &mut ChaCha12Rng,
        spec: &ModelSpec,
        truth: &ParameterSet,
        n_subjects: usize,
        n_obs: usize,
        shared_grid: bool,
    ) -> LongitudinalDataset {
        let chol_g = Cholesky::new(truth.gamma_cov.clone()).unwrap();
        let base_grid: Vec<f64> = (0..n_obs)
            .map(|i| {
                spec.domain.0 + (spec.domain.1 - spec.domain.0) * i as f64 / (n_obs - 1) as f64
            })
            .collect();
        let subjects = (0..n_subjects)
            .map(|i| {
                let times: Vec<f64> = if shared_grid {
                    base_grid.clone()
                } else {
                    let mut t: Vec<f64> = (0..n_obs)
                        .map(|_| rng.gen_range(spec.domain.0..=spec.domain.1))
                        .collect();
                    t.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    t
                };
                let phi_f = spec
                    .fixed_basis()
                    .unwrap()
                    .design_matrix(&times)
                    .unwrap()
                    .matrix;
                let phi_r = spec
                    .random_basis()
                    .unwrap()
                    .design_matrix(&times)
                    .unwrap()
                    .matrix;
                let z = DVector::from_fn(spec.m_r, |_, _| rng.sample::<f64, _>(StandardNormal));
                let mean = phi_f * &truth.beta + phi_r * (chol_g.l() * z);
                let values = mean
                    .iter()
                    .map(|m| m + truth.noise_var.sqrt() * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Subject {
                    id: format!("s{i}"),
                    times,
                    values,
                }
            })
            .collect();
        LongitudinalDataset::new(subjects).unwrap()
    }

    #[test]
    fn vech_order_for_dimension_three() {
        let vech = VechIndex::new(3);
        assert_eq!(
            vech.pairs(),
            &[(0, 0), (0, 1), (1, 1), (0, 2), (1, 2), (2, 2)]
        );
        assert_eq!(vech.position(2, 1), 2 * (2 + 1) / 2 + 1);
        assert_eq!(vech.position(1, 2), vech.position(2, 1));
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(num_params(5, 8), 42);
        assert_eq!(num_params(1, 1), 3);
        assert_eq!(num_params(4, 4), 15);
    }

    proptest! {
        #[test]
        fn vech_round_trip(dim in 1usize..8, seed in 0u64..1000) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let sym = (&a + a.transpose()) * 0.5;
            let vech = VechIndex::new(dim);
            let packed = vech.pack(&sym);
            prop_assert_eq!(packed.len(), dim * (dim + 1) / 2);
            let back = vech.unpack(&packed);
            prop_assert_eq!(back, sym);
        }
    }

    #[test]
    fn theta_round_trip() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let vech = VechIndex::new(4);
        let params = ParameterSet::new(
            DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal)),
            toeplitz(4, 0.5),
            0.7,
        )
        .unwrap();
        let theta = pack_theta(&params, &vech);
        assert_eq!(theta.len(), num_params(5, 4));
        let back = unpack_theta(&theta, 5, &vech).unwrap();
        assert_eq!(back.beta, params.beta);
        assert_eq!(back.gamma_cov, params.gamma_cov);
        assert_eq!(back.noise_var, params.noise_var);
    }

    /// The log-likelihood is exactly quadratic in beta, so with a wide step
    /// the finite-difference beta block is exact to rounding.
    #[test]
    fn beta_block_matches_fd_on_quadratic_surface() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let spec = ModelSpec::new(4, 4, (0.0, 1.0)).unwrap();
        let truth = ParameterSet::new(
            DVector::from_column_slice(&[1.0, -1.0, 0.5, 2.0]),
            toeplitz(4, 0.5),
            0.5,
        )
        .unwrap();
        let data = sample_dataset(&mut rng, &spec, &truth, 8, 9, true);
        let info = information_matrix(&spec, &truth, &data).unwrap();
        let fd = fd_hessian(&spec, &truth, &data, 0.1).unwrap();
        let n = data.num_subjects() as f64;
        for i in 0..4 {
            for j in 0..4 {
                assert_relative_eq!(
                    info[(i, j)],
                    -fd[(i, j)] / n,
                    max_relative = 1e-8,
                    epsilon = 1e-8
                );
            }
        }
    }

    #[test]
    fn information_matrix_matches_fd_hessian() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        for trial in 0..10 {
            let m_f = rng.gen_range(4..6);
            let m_r = rng.gen_range(4..6);
            let spec = ModelSpec::new(m_f, m_r, (0.0, 1.0)).unwrap();
            let beta = DVector::from_fn(m_f, |_, _| rng.sample::<f64, _>(StandardNormal));
            let truth =
                ParameterSet::new(beta, toeplitz(m_r, 0.4), rng.gen_range(0.3..1.0)).unwrap();
            let n_subjects = rng.gen_range(4..9);
            let shared = trial % 2 == 0;
            let data = sample_dataset(&mut rng, &spec, &truth, n_subjects, 8, shared);
            let info = information_matrix(&spec, &truth, &data).unwrap();
            let fd = fd_hessian(&spec, &truth, &data, 1e-4).unwrap();
            let n = data.num_subjects() as f64;
            let p = num_params(m_f, m_r);
            for i in 0..p {
                for j in 0..p {
                    let a = info[(i, j)];
                    let b = -fd[(i, j)] / n;
                    let scale = a.abs().max(b.abs()).max(1.0);
                    assert!(
                        (a - b).abs() <= 1e-4 * scale,
                        "trial {trial}: entry ({i}, {j}): analytic {a}, differenced {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn criterion_identities_hold_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        let spec = ModelSpec::new(4, 4, (0.0, 1.0)).unwrap();
        let truth = ParameterSet::new(
            DVector::from_column_slice(&[2.0, 0.0, -2.0, 1.0]),
            toeplitz(4, 0.5),
            0.4,
        )
        .unwrap();
        let data = sample_dataset(&mut rng, &spec, &truth, 12, 10, true);
        let init = default_init(&spec, &data).unwrap();
        let fit = em_fit(&spec, &data, &init, &EmOptions::default()).unwrap();
        let p = num_params(4, 4) as f64;
        let n = 12f64;
        assert_relative_eq!(
            bic(&fit) - aic(&fit),
            p * (n.ln() - 2.0),
            max_relative = 1e-12
        );
        let info = information_matrix(&spec, &fit.params, &data).unwrap();
        let log_det = info_log_det(&info).unwrap();
        let bic_i_v = bic_i(&fit, &data).unwrap();
        assert_relative_eq!(
            bic_i_v - bic(&fit),
            -p * LN_2PI + log_det,
            max_relative = 1e-9,
            epsilon = 1e-9
        );
    }

    #[test]
    fn bic_penalty_vanishes_for_single_subject() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let spec = ModelSpec::new(4, 4, (0.0, 1.0)).unwrap();
        let truth = ParameterSet::new(
            DVector::from_column_slice(&[1.0, 1.0, -1.0, 0.0]),
            toeplitz(4, 0.3),
            0.5,
        )
        .unwrap();
        let data = sample_dataset(&mut rng, &spec, &truth, 1, 12, true);
        let init = default_init(&spec, &data).unwrap();
        let fit = em_fit(&spec, &data, &init, &EmOptions::default()).unwrap();
        assert_eq!(bic(&fit), -2.0 * fit.loglik);
    }

    #[test]
    fn select_model_on_small_grid() {
        let mut rng = ChaCha12Rng::seed_from_u64(18);
        let spec = ModelSpec::new(5, 4, (0.0, 1.0)).unwrap();
        let truth = ParameterSet::new(
            DVector::from_column_slice(&[-2.0, 1.0, 3.0, 0.0, -1.0]),
            toeplitz(4, 0.5),
            0.05,
        )
        .unwrap();
        let data = sample_dataset(&mut rng, &spec, &truth, 40, 16, true);
        let opts = EmOptions {
            max_iter: 2000,
            rel_tol: 1e-10,
            ..EmOptions::default()
        };
        let report = select_model(&data, (0.0, 1.0), (4, 6), (4, 5), &opts).unwrap();
        assert_eq!(report.records.len(), 6);
        // records arrive in ascending grid order
        let order: Vec<(usize, usize)> = report.records.iter().map(|r| (r.m_f, r.m_r)).collect();
        assert_eq!(order, vec![(4, 4), (4, 5), (5, 4), (5, 5), (6, 4), (6, 5)]);
        for r in &report.records {
            assert_eq!(
                r.status,
                CandidateStatus::Ok,
                "candidate ({}, {})",
                r.m_f,
                r.m_r
            );
            assert!(r.loglik.is_some() && r.aic.is_some() && r.bic.is_some() && r.bic_i.is_some());
            assert_eq!(r.p, num_params(r.m_f, r.m_r));
        }
        assert!(report.chosen.aic.is_some());
        assert!(report.chosen.bic.is_some());
        assert!(report.chosen.bic_i.is_some());

        // a rerun is bitwise identical
        let again = select_model(&data, (0.0, 1.0), (4, 6), (4, 5), &opts).unwrap();
        assert_eq!(report.chosen, again.chosen);
        for (a, b) in report.records.iter().zip(again.records.iter()) {
            assert_eq!(a.loglik, b.loglik);
            assert_eq!(a.bic_i, b.bic_i);
        }
    }

    /// A candidate whose covariance estimate drifts toward the singular
    /// boundary loses its corrected criterion but keeps the other two.
    #[test]
    fn boundary_drift_excludes_corrected_criterion_only() {
        let mut rng = ChaCha12Rng::seed_from_u64(18);
        let spec = ModelSpec::new(5, 4, (0.0, 1.0)).unwrap();
        let truth = ParameterSet::new(
            DVector::from_column_slice(&[-2.0, 1.0, 3.0, 0.0, -1.0]),
            toeplitz(4, 0.5),
            0.3,
        )
        .unwrap();
        let data = sample_dataset(&mut rng, &spec, &truth, 25, 12, true);
        let report =
            select_model(&data, (0.0, 1.0), (4, 5), (4, 4), &EmOptions::default()).unwrap();
        assert!(report
            .records
            .iter()
            .any(|r| matches!(r.status, CandidateStatus::InfoFailed(_))));
        for r in &report.records {
            assert!(!matches!(r.status, CandidateStatus::FitFailed(_)));
            assert!(r.loglik.is_some() && r.aic.is_some() && r.bic.is_some());
            assert_eq!(r.bic_i.is_some(), matches!(r.status, CandidateStatus::Ok));
            assert_eq!(
                r.info_log_det.is_some(),
                matches!(r.status, CandidateStatus::Ok)
            );
        }
        assert!(report.chosen.aic.is_some());
        assert!(report.chosen.bic.is_some());
    }

    #[test]
    fn select_model_rejects_empty_grid() {
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let spec = ModelSpec::new(4, 4, (0.0, 1.0)).unwrap();
        let truth = ParameterSet::new(
            DVector::from_column_slice(&[1.0, 0.0, 1.0, 0.0]),
            toeplitz(4, 0.2),
            0.4,
        )
        .unwrap();
        let data = sample_dataset(&mut rng, &spec, &truth, 5, 8, true);
        assert!(matches!(
            select_model(&data, (0.0, 1.0), (6, 4), (4, 4), &EmOptions::default()),
            Err(Error::SelectionFailed(_))
        ));
    }
}
