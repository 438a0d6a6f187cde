//! The three subcommands: fit one model, search a grid, run a study.

use std::path::{Path, PathBuf};

use serde::Serialize;

use splinemix::criteria::{aic, bic, bic_i, num_params, select_model, CriteriaReport};
use splinemix::estimation::{default_init, em_fit, mean_curve, EmOptions, FittedModel};
use splinemix::model::{LongitudinalDataset, ModelSpec};
use splinemix::simulation::{run_study, NoiseLaw, SimulationDesign, StudyResult};

use crate::artifacts::{full, full_opt, in_dir, sig4, sig4_opt, write_csv, write_json};
use crate::config::{require, FitArgs, SelectArgs, SimulateArgs};
use crate::data::read_dataset;
use crate::error::{AppError, AppResult};

fn em_options(max_iter: Option<usize>, rel_tol: Option<f64>) -> EmOptions {
    let mut em = EmOptions::default();
    if let Some(m) = max_iter {
        em.max_iter = m;
    }
    if let Some(r) = rel_tol {
        em.rel_tol = r;
    }
    em
}

fn resolve_domain(
    data: &LongitudinalDataset,
    min: Option<f64>,
    max: Option<f64>,
) -> AppResult<(f64, f64)> {
    let observed = data.time_range();
    let lo = min.unwrap_or(observed.0);
    let hi = max.unwrap_or(observed.1);
    if observed.0 < lo || observed.1 > hi {
        return Err(AppError::Parse(format!(
            "observations span [{}, {}], outside the domain [{lo}, {hi}]",
            observed.0, observed.1
        )));
    }
    Ok((lo, hi))
}

fn out_dir(dir: &Option<PathBuf>) -> PathBuf {
    dir.clone().unwrap_or_else(|| PathBuf::from("."))
}

#[derive(Serialize)]
struct FitReport {
    model: ModelBlock,
    data: DataBlock,
    em: EmBlock,
    loglik: f64,
    criteria: CriteriaBlock,
    estimates: EstimateBlock,
}

#[derive(Serialize)]
struct ModelBlock {
    m_f: usize,
    m_r: usize,
    degree: usize,
    domain: (f64, f64),
    parameters: usize,
}

#[derive(Serialize)]
struct DataBlock {
    subjects: usize,
    observations: usize,
}

#[derive(Serialize)]
struct EmBlock {
    max_iter: usize,
    rel_tol: f64,
    converged: bool,
    iterations: usize,
}

#[derive(Serialize)]
struct CriteriaBlock {
    aic: f64,
    bic: f64,
    bic_i: Option<f64>,
    bic_i_error: Option<String>,
}

#[derive(Serialize)]
struct EstimateBlock {
    beta: Vec<f64>,
    gamma: Vec<Vec<f64>>,
    noise_var: f64,
}

pub fn run_fit(args: FitArgs) -> AppResult<()> {
    let data_path = require(args.data, "data")?;
    let m_f = require(args.m_f, "m_f")?;
    let m_r = require(args.m_r, "m_r")?;
    let data = read_dataset(&data_path)?;
    let domain = resolve_domain(&data, args.domain_min, args.domain_max)?;
    let em = em_options(args.max_iter, args.rel_tol);
    let dir = out_dir(&args.out_dir);

    let spec = ModelSpec::new(m_f, m_r, domain)?;
    let init = default_init(&spec, &data)?;
    let fit = em_fit(&spec, &data, &init, &em)?;

    let (bic_i_value, bic_i_error) = match bic_i(&fit, &data) {
        Ok(v) => (Some(v), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let report = FitReport {
        model: ModelBlock {
            m_f,
            m_r,
            degree: splinemix::model::DEGREE,
            domain,
            parameters: num_params(m_f, m_r),
        },
        data: DataBlock {
            subjects: data.num_subjects(),
            observations: data.total_observations(),
        },
        em: EmBlock {
            max_iter: em.max_iter,
            rel_tol: em.rel_tol,
            converged: fit.converged,
            iterations: fit.iterations,
        },
        loglik: fit.loglik,
        criteria: CriteriaBlock {
            aic: aic(&fit),
            bic: bic(&fit),
            bic_i: bic_i_value,
            bic_i_error: bic_i_error.clone(),
        },
        estimates: EstimateBlock {
            beta: fit.params.beta.iter().cloned().collect(),
            gamma: (0..m_r)
                .map(|i| (0..m_r).map(|j| fit.params.gamma_cov[(i, j)]).collect())
                .collect(),
            noise_var: fit.params.noise_var,
        },
    };
    write_json(&in_dir(&dir, "fit_report.json"), &report)?;
    write_fitted_curves(&in_dir(&dir, "fitted_curves.csv"), &spec, &data, &fit)?;

    println!(
        "fitted m_f={m_f} m_r={m_r} on {} subjects ({} observations)",
        data.num_subjects(),
        data.total_observations()
    );
    println!(
        "{} after {} iterations, loglik {}",
        if fit.converged {
            "converged"
        } else {
            "stopped unconverged"
        },
        fit.iterations,
        sig4(fit.loglik)
    );
    println!("noise variance {}", sig4(fit.params.noise_var));
    match (bic_i_value, &bic_i_error) {
        (Some(v), _) => println!(
            "AIC {}  BIC {}  BIC_I {}",
            sig4(aic(&fit)),
            sig4(bic(&fit)),
            sig4(v)
        ),
        (None, Some(e)) => println!(
            "AIC {}  BIC {}  BIC_I unavailable ({e})",
            sig4(aic(&fit)),
            sig4(bic(&fit))
        ),
        (None, None) => unreachable!("bic_i yields a value or an error"),
    }
    println!(
        "wrote {} and {}",
        in_dir(&dir, "fit_report.json").display(),
        in_dir(&dir, "fitted_curves.csv").display()
    );
    Ok(())
}

fn write_fitted_curves(
    path: &Path,
    spec: &ModelSpec,
    data: &LongitudinalDataset,
    fit: &FittedModel,
) -> AppResult<()> {
    let mut rows = Vec::new();
    for (idx, subject) in data.subjects.iter().enumerate() {
        let fitted = &fit.fitted_values[idx];
        let mean = mean_curve(spec, &fit.params.beta, &subject.times)?;
        for (i, &t) in subject.times.iter().enumerate() {
            rows.push(vec![
                subject.id.clone(),
                full(t),
                full(subject.values[i]),
                full(fitted[i]),
                full(mean[i]),
            ]);
        }
    }
    write_csv(path, &["subject_id", "t", "x", "fitted", "mean"], &rows)
}

#[derive(Serialize)]
struct SelectReportFile {
    em: EmOptions,
    report: CriteriaReport,
}

pub fn run_select(args: SelectArgs) -> AppResult<()> {
    let data_path = require(args.data, "data")?;
    let data = read_dataset(&data_path)?;
    let domain = resolve_domain(&data, args.domain_min, args.domain_max)?;
    let em = em_options(args.max_iter, args.rel_tol);
    let dir = out_dir(&args.out_dir);
    let mf_range = (args.mf_min.unwrap_or(4), args.mf_max.unwrap_or(10));
    let mr_range = (args.mr_min.unwrap_or(4), args.mr_max.unwrap_or(10));

    let report = select_model(&data, domain, mf_range, mr_range, &em)?;

    let rows: Vec<Vec<String>> = report
        .records
        .iter()
        .map(|r| {
            vec![
                r.m_f.to_string(),
                r.m_r.to_string(),
                r.p.to_string(),
                full_opt(r.loglik),
                full_opt(r.aic),
                full_opt(r.bic),
                full_opt(r.bic_i),
                full_opt(r.info_log_det),
                r.converged.map(|c| c.to_string()).unwrap_or_default(),
                r.iterations.map(|i| i.to_string()).unwrap_or_default(),
                r.status.to_string(),
            ]
        })
        .collect();
    write_csv(
        &in_dir(&dir, "criteria_table.csv"),
        &[
            "m_f",
            "m_r",
            "p",
            "loglik",
            "aic",
            "bic",
            "bic_i",
            "info_log_det",
            "converged",
            "iterations",
            "status",
        ],
        &rows,
    )?;
    write_json(
        &in_dir(&dir, "criteria_report.json"),
        &SelectReportFile {
            em,
            report: report.clone(),
        },
    )?;

    println!(
        "{:>4} {:>4} {:>4} {:>12} {:>12} {:>12} {:>12}  status",
        "m_f", "m_r", "p", "loglik", "AIC", "BIC", "BIC_I"
    );
    for r in &report.records {
        println!(
            "{:>4} {:>4} {:>4} {:>12} {:>12} {:>12} {:>12}  {}",
            r.m_f,
            r.m_r,
            r.p,
            sig4_opt(r.loglik),
            sig4_opt(r.aic),
            sig4_opt(r.bic),
            sig4_opt(r.bic_i),
            r.status
        );
    }
    let show = |name: &str, choice: Option<(usize, usize)>| match choice {
        Some((m_f, m_r)) => println!("{name} chooses m_f={m_f} m_r={m_r}"),
        None => println!("{name} has no eligible candidate"),
    };
    show("AIC", report.chosen.aic);
    show("BIC", report.chosen.bic);
    show("BIC_I", report.chosen.bic_i);
    println!(
        "wrote {} and {}",
        in_dir(&dir, "criteria_report.json").display(),
        in_dir(&dir, "criteria_table.csv").display()
    );
    Ok(())
}

pub fn run_simulate(args: SimulateArgs) -> AppResult<()> {
    let n_subjects = args.subjects.unwrap_or(30);
    let seed = args.seed.unwrap_or(1);
    let mut design = SimulationDesign::reference(n_subjects, seed);
    if let Some(r) = args.replications {
        design.n_replications = r;
    }
    if let Some(p) = args.points {
        design.n_points = p;
    }
    if let Some(law) = &args.noise_law {
        design.noise_law = law.parse::<NoiseLaw>().map_err(AppError::Parse)?;
    }
    if let Some(s) = args.noise_scale {
        design.noise_scale = s;
    }
    if let Some(v) = args.mf_min {
        design.mf_range.0 = v;
    }
    if let Some(v) = args.mf_max {
        design.mf_range.1 = v;
    }
    if let Some(v) = args.mr_min {
        design.mr_range.0 = v;
    }
    if let Some(v) = args.mr_max {
        design.mr_range.1 = v;
    }
    design.em = em_options(args.max_iter, args.rel_tol);
    let dir = out_dir(&args.out_dir);

    let study = run_study(&design)?;

    write_json(&in_dir(&dir, "study_report.json"), &study)?;
    write_amse_table(&in_dir(&dir, "study_amse.csv"), &study)?;
    write_selection_table(&in_dir(&dir, "study_selection.csv"), &study)?;
    let mut written = vec!["study_report.json", "study_amse.csv", "study_selection.csv"];
    if args.audit.unwrap_or(false) {
        write_audit_table(&in_dir(&dir, "study_replications.csv"), &study)?;
        written.push("study_replications.csv");
    }

    println!(
        "study: {} subjects, {} replications, noise law {}, seed {}",
        design.n_subjects, design.n_replications, design.noise_law, design.seed
    );
    if study.failed_replications > 0 {
        println!("failed replications: {}", study.failed_replications);
    }
    println!(
        "{:>10} {:>10} {:>12}",
        "criterion", "evaluated", "mean AMSE"
    );
    for s in &study.summaries {
        println!(
            "{:>10} {:>10} {:>12}",
            s.criterion,
            s.evaluated,
            sig4_opt(s.mean_amse)
        );
    }
    for s in &study.summaries {
        let mut counts = s.counts.clone();
        counts.sort_by_key(|c| std::cmp::Reverse(c.count));
        let top: Vec<String> = counts
            .iter()
            .take(3)
            .map(|c| format!("({}, {}) x{}", c.m_f, c.m_r, c.count))
            .collect();
        println!("{} selects most often: {}", s.criterion, top.join(", "));
    }
    println!(
        "wrote {}",
        written
            .iter()
            .map(|name| in_dir(&dir, name).display().to_string())
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(())
}

fn write_amse_table(path: &Path, study: &StudyResult) -> AppResult<()> {
    let rows: Vec<Vec<String>> = study
        .summaries
        .iter()
        .map(|s| {
            vec![
                s.criterion.clone(),
                s.evaluated.to_string(),
                full_opt(s.mean_amse),
            ]
        })
        .collect();
    write_csv(path, &["criterion", "evaluated", "mean_amse"], &rows)
}

fn write_selection_table(path: &Path, study: &StudyResult) -> AppResult<()> {
    let mut rows = Vec::new();
    for s in &study.summaries {
        for c in &s.counts {
            let share = c.count as f64 / s.evaluated.max(1) as f64;
            rows.push(vec![
                s.criterion.clone(),
                c.m_f.to_string(),
                c.m_r.to_string(),
                c.count.to_string(),
                full(share),
            ]);
        }
    }
    write_csv(path, &["criterion", "m_f", "m_r", "count", "share"], &rows)
}

fn write_audit_table(path: &Path, study: &StudyResult) -> AppResult<()> {
    let pair = |c: Option<(usize, usize)>| -> (String, String) {
        match c {
            Some((a, b)) => (a.to_string(), b.to_string()),
            None => (String::new(), String::new()),
        }
    };
    let rows: Vec<Vec<String>> = study
        .replications
        .iter()
        .map(|r| {
            let (aic_f, aic_r) = pair(r.chosen_aic);
            let (bic_f, bic_r) = pair(r.chosen_bic);
            let (bici_f, bici_r) = pair(r.chosen_bic_i);
            vec![
                r.replication.to_string(),
                r.error.clone().unwrap_or_default(),
                aic_f,
                aic_r,
                full_opt(r.amse_aic),
                bic_f,
                bic_r,
                full_opt(r.amse_bic),
                bici_f,
                bici_r,
                full_opt(r.amse_bic_i),
                r.info_excluded.to_string(),
            ]
        })
        .collect();
    write_csv(
        path,
        &[
            "replication",
            "error",
            "aic_m_f",
            "aic_m_r",
            "aic_amse",
            "bic_m_f",
            "bic_m_r",
            "bic_amse",
            "bic_i_m_f",
            "bic_i_m_r",
            "bic_i_amse",
            "info_excluded",
        ],
        &rows,
    )
}
