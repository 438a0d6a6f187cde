//! Monte Carlo study of the selection criteria.
//!
//! Each replication draws `n` subjects on a shared grid from a known
//! spline model, runs the grid search, and scores the fit chosen by each
//! criterion against the noise-free subject curves by average mean squared
//! error. Random numbers come from counter-based substreams keyed by
//! `(seed, replication, subject)`, so results are independent of thread
//! count and the first `k` subjects of a replication are the same for
//! every sample size.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criteria::select_model;
use crate::estimation::{default_init, em_fit, EmOptions};
use crate::model::{LongitudinalDataset, ModelSpec, Subject};
use crate::{Error, Result};

/// How the noise level scales with a subject's curve range `R`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseLaw {
    /// Noise variance `scale * R^2`.
    Variance,
    /// Noise standard deviation `scale * R`.
    Sd,
}

impl std::fmt::Display for NoiseLaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NoiseLaw::Variance => write!(f, "variance"),
            NoiseLaw::Sd => write!(f, "sd"),
        }
    }
}

impl std::str::FromStr for NoiseLaw {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "variance" => Ok(NoiseLaw::Variance),
            "sd" => Ok(NoiseLaw::Sd),
            other => Err(format!(
                "unknown noise law {other:?} (expected variance or sd)"
            )),
        }
    }
}

/// Complete description of one study configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationDesign {
    pub n_subjects: usize,
    pub n_replications: usize,
    pub n_points: usize,
    pub domain: (f64, f64),
    pub true_m_f: usize,
    pub true_m_r: usize,
    pub true_beta: Vec<f64>,
    /// First-order autoregressive correlation of the true random effects:
    /// entry `(j, k)` of their covariance is `rho^|j - k|`.
    pub gamma_rho: f64,
    pub noise_law: NoiseLaw,
    pub noise_scale: f64,
    pub seed: u64,
    pub mf_range: (usize, usize),
    pub mr_range: (usize, usize),
    pub em: EmOptions,
}

impl SimulationDesign {
    /// The reference configuration: 50 observations per subject on
    /// (0.01, 1), a five-function mean with coefficients
    /// (-8, -2, 6, 5, 7), eight-function random curves with an
    /// autoregressive covariance at correlation one half, and candidate
    /// grids running from 4 to 10 in both directions. Noise follows the
    /// sd law by default, so the scale multiplies each subject's curve
    /// range to give the error standard deviation.
    pub fn reference(n_subjects: usize, seed: u64) -> Self {
        Self {
            n_subjects,
            n_replications: 100,
            n_points: 50,
            domain: (0.01, 1.0),
            true_m_f: 5,
            true_m_r: 8,
            true_beta: vec![-8.0, -2.0, 6.0, 5.0, 7.0],
            gamma_rho: 0.5,
            noise_law: NoiseLaw::Sd,
            noise_scale: 0.1,
            seed,
            mf_range: (4, 10),
            mr_range: (4, 10),
            em: EmOptions::default(),
        }
    }

    /// Shared observation grid: equally spaced over the domain with the
    /// last point set to the upper endpoint exactly.
    pub fn grid(&self) -> Vec<f64> {
        let (lo, hi) = self.domain;
        let k = self.n_points;
        let mut t: Vec<f64> = (0..k)
            .map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64)
            .collect();
        t[k - 1] = hi;
        t
    }

    pub fn true_spec(&self) -> Result<ModelSpec> {
        ModelSpec::new(self.true_m_f, self.true_m_r, self.domain)
    }

    /// True random-effect covariance.
    pub fn gamma_truth(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.true_m_r, self.true_m_r, |i, j| {
            self.gamma_rho.powi((i as i32 - j as i32).abs())
        })
    }

    fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.n_replications == 0 {
            return Err(Error::InvalidDataset(
                "study needs at least one subject and one replication".into(),
            ));
        }
        if self.n_points < 2 {
            return Err(Error::InvalidDataset(
                "study needs at least two observation points".into(),
            ));
        }
        if self.true_beta.len() != self.true_m_f {
            return Err(Error::InvalidParameters(format!(
                "true mean has {} coefficients but the basis has {} functions",
                self.true_beta.len(),
                self.true_m_f
            )));
        }
        if self.gamma_rho.is_nan() || self.gamma_rho.abs() >= 1.0 {
            return Err(Error::InvalidParameters(format!(
                "autoregressive correlation {} is outside (-1, 1)",
                self.gamma_rho
            )));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidParameters(format!(
                "noise scale {} must be positive and finite",
                self.noise_scale
            )));
        }
        Ok(())
    }
}

/// Noise-free subject curves of one replication, kept for scoring.
#[derive(Debug, Clone)]
pub struct TrueCurves {
    /// One curve per subject, evaluated on the shared grid.
    pub curves: Vec<DVector<f64>>,
    /// Range (max minus min) of each curve on the grid.
    pub ranges: Vec<f64>,
    /// Noise standard deviation applied to each subject.
    pub noise_sd: Vec<f64>,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for one subject of one replication. The key mixes
/// the three indices, never the sample size, so enlarging a study extends
/// the subject list without disturbing earlier draws.
fn substream(seed: u64, replication: u64, subject: u64) -> ChaCha12Rng {
    let mut s = seed;
    let mixed_seed = splitmix64(&mut s);
    let mut s = mixed_seed ^ replication.wrapping_mul(0xA076_1D64_78BD_642F);
    let mixed_rep = splitmix64(&mut s);
    let mut s = mixed_rep ^ subject.wrapping_mul(0xE703_7ED1_A0B4_28DB);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

/// Draws one replication: `n` subjects on the shared grid, each the true
/// mean plus a random spline curve plus noise whose level follows the
/// design's law for that subject's curve range.
pub fn generate_replication(
    design: &SimulationDesign,
    replication: usize,
) -> Result<(LongitudinalDataset, TrueCurves)> {
    design.validate()?;
    let spec = design.true_spec()?;
    let grid = design.grid();
    let phi_f = spec.fixed_basis()?.design_matrix(&grid)?.matrix;
    let phi_r = spec.random_basis()?.design_matrix(&grid)?.matrix;
    let beta = DVector::from_column_slice(&design.true_beta);
    let mean = &phi_f * &beta;
    let chol = Cholesky::new(design.gamma_truth()).ok_or_else(|| {
        Error::InvalidParameters("true random-effect covariance is not positive definite".into())
    })?;

    let mut subjects = Vec::with_capacity(design.n_subjects);
    let mut curves = Vec::with_capacity(design.n_subjects);
    let mut ranges = Vec::with_capacity(design.n_subjects);
    let mut noise_sd = Vec::with_capacity(design.n_subjects);
    for alpha in 0..design.n_subjects {
        let mut rng = substream(design.seed, replication as u64, alpha as u64);
        let z = DVector::from_fn(design.true_m_r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let gamma = chol.l() * z;
        let curve = &mean + &phi_r * gamma;
        let lo = curve.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        let sd = match design.noise_law {
            NoiseLaw::Variance => (design.noise_scale * range * range).sqrt(),
            NoiseLaw::Sd => design.noise_scale * range,
        };
        let values: Vec<f64> = curve
            .iter()
            .map(|u| u + sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        subjects.push(Subject {
            id: format!("s{alpha:04}"),
            times: grid.clone(),
            values,
        });
        curves.push(curve);
        ranges.push(range);
        noise_sd.push(sd);
    }
    Ok((
        LongitudinalDataset::new(subjects)?,
        TrueCurves {
            curves,
            ranges,
            noise_sd,
        },
    ))
}

/// Average mean squared error of fitted curves against the noise-free
/// truth: the total squared difference divided by the number of curve
/// points summed over subjects.
pub fn amse(fitted: &[DVector<f64>], truth: &[DVector<f64>]) -> Result<f64> {
    if fitted.len() != truth.len() || fitted.is_empty() {
        return Err(Error::InvalidDataset(format!(
            "cannot score {} fitted curves against {} true curves",
            fitted.len(),
            truth.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (f, u) in fitted.iter().zip(truth) {
        if f.len() != u.len() {
            return Err(Error::InvalidDataset(
                "fitted and true curves observed at different grids".into(),
            ));
        }
        total += (f - u).norm_squared();
        count += f.len();
    }
    Ok(total / count as f64)
}

/// Outcome of one replication.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    /// Grid-search error, if the whole replication failed.
    pub error: Option<String>,
    pub chosen_aic: Option<(usize, usize)>,
    pub chosen_bic: Option<(usize, usize)>,
    pub chosen_bic_i: Option<(usize, usize)>,
    pub amse_aic: Option<f64>,
    pub amse_bic: Option<f64>,
    pub amse_bic_i: Option<f64>,
    /// Candidates dropped from the corrected criterion because their
    /// information matrix was degenerate.
    pub info_excluded: usize,
}

/// Selection frequency of one candidate under one criterion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionCount {
    pub m_f: usize,
    pub m_r: usize,
    pub count: usize,
}

/// Per-criterion aggregate over the successful replications.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriterionSummary {
    pub criterion: String,
    /// Replications in which the criterion produced a choice.
    pub evaluated: usize,
    pub mean_amse: Option<f64>,
    pub counts: Vec<SelectionCount>,
}

/// Full study output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyResult {
    pub design: SimulationDesign,
    pub failed_replications: usize,
    pub replications: Vec<ReplicationRecord>,
    pub summaries: Vec<CriterionSummary>,
}

fn refit_and_score(
    data: &LongitudinalDataset,
    truth: &TrueCurves,
    domain: (f64, f64),
    choice: (usize, usize),
    em: &EmOptions,
) -> Result<f64> {
    let spec = ModelSpec::new(choice.0, choice.1, domain)?;
    let init = default_init(&spec, data)?;
    let fit = em_fit(&spec, data, &init, em)?;
    amse(&fit.fitted_values, &truth.curves)
}

fn run_replication(design: &SimulationDesign, replication: usize) -> ReplicationRecord {
    let failed = |msg: String| ReplicationRecord {
        replication,
        error: Some(msg),
        chosen_aic: None,
        chosen_bic: None,
        chosen_bic_i: None,
        amse_aic: None,
        amse_bic: None,
        amse_bic_i: None,
        info_excluded: 0,
    };
    let (data, truth) = match generate_replication(design, replication) {
        Ok(pair) => pair,
        Err(e) => return failed(e.to_string()),
    };
    let report = match select_model(
        &data,
        design.domain,
        design.mf_range,
        design.mr_range,
        &design.em,
    ) {
        Ok(r) => r,
        Err(e) => return failed(e.to_string()),
    };
    let info_excluded = report
        .records
        .iter()
        .filter(|r| r.loglik.is_some() && r.bic_i.is_none())
        .count();
    let score = |choice: Option<(usize, usize)>| -> (Option<(usize, usize)>, Option<f64>) {
        match choice {
            Some(c) => match refit_and_score(&data, &truth, design.domain, c, &design.em) {
                Ok(v) => (Some(c), Some(v)),
                Err(_) => (Some(c), None),
            },
            None => (None, None),
        }
    };
    let (chosen_aic, amse_aic) = score(report.chosen.aic);
    let (chosen_bic, amse_bic) = score(report.chosen.bic);
    let (chosen_bic_i, amse_bic_i) = score(report.chosen.bic_i);
    ReplicationRecord {
        replication,
        error: None,
        chosen_aic,
        chosen_bic,
        chosen_bic_i,
        amse_aic,
        amse_bic,
        amse_bic_i,
        info_excluded,
    }
}

fn summarize(
    criterion: &str,
    records: &[ReplicationRecord],
    choice: impl Fn(&ReplicationRecord) -> Option<(usize, usize)>,
    value: impl Fn(&ReplicationRecord) -> Option<f64>,
) -> CriterionSummary {
    let mut counts: std::collections::BTreeMap<(usize, usize), usize> = Default::default();
    let mut total = 0.0;
    let mut scored = 0usize;
    let mut evaluated = 0usize;
    for r in records {
        if let Some(c) = choice(r) {
            evaluated += 1;
            *counts.entry(c).or_insert(0) += 1;
        }
        if let Some(v) = value(r) {
            total += v;
            scored += 1;
        }
    }
    CriterionSummary {
        criterion: criterion.to_string(),
        evaluated,
        mean_amse: if scored > 0 {
            Some(total / scored as f64)
        } else {
            None
        },
        counts: counts
            .into_iter()
            .map(|((m_f, m_r), count)| SelectionCount { m_f, m_r, count })
            .collect(),
    }
}

/// Runs the whole study, replications in parallel, and aggregates the
/// per-criterion mean errors and selection frequencies. Fails when more
/// than a fifth of the replications fail outright.
pub fn run_study(design: &SimulationDesign) -> Result<StudyResult> {
    design.validate()?;
    design.true_spec()?;
    if design.mf_range.0 > design.mf_range.1 || design.mr_range.0 > design.mr_range.1 {
        return Err(Error::SelectionFailed("empty candidate grid".into()));
    }
    let replications: Vec<ReplicationRecord> = (0..design.n_replications)
        .into_par_iter()
        .map(|rep| run_replication(design, rep))
        .collect();
    let failed_replications = replications.iter().filter(|r| r.error.is_some()).count();
    if 5 * failed_replications > design.n_replications {
        return Err(Error::StudyFailed {
            failed: failed_replications,
            total: design.n_replications,
        });
    }
    let summaries = vec![
        summarize("aic", &replications, |r| r.chosen_aic, |r| r.amse_aic),
        summarize("bic", &replications, |r| r.chosen_bic, |r| r.amse_bic),
        summarize("bic-i", &replications, |r| r.chosen_bic_i, |r| r.amse_bic_i),
    ];
    Ok(StudyResult {
        design: design.clone(),
        failed_replications,
        replications,
        summaries,
    })
}
