//! The library driven purely through its public interface, the way the
//! binary and external callers use it.

use splinemix::criteria::{select_model, CandidateStatus};
use splinemix::estimation::{
    default_init, em_fit, fitted_curve, mean_curve, predict_subject, EmOptions,
};
use splinemix::model::ModelSpec;
use splinemix::simulation::{amse, generate_replication, run_study, SimulationDesign};

fn quick_em() -> EmOptions {
    EmOptions {
        max_iter: 300,
        ..EmOptions::default()
    }
}

#[test]
fn simulated_data_flows_into_selection() {
    let mut design = SimulationDesign::reference(12, 7);
    design.mf_range = (4, 5);
    design.mr_range = (4, 5);
    let (data, _) = generate_replication(&design, 0).unwrap();

    let report = select_model(
        &data,
        design.domain,
        design.mf_range,
        design.mr_range,
        &quick_em(),
    )
    .unwrap();
    assert_eq!(report.n_subjects, 12);
    assert_eq!(report.records.len(), 4);
    for r in &report.records {
        assert!((4..=5).contains(&r.m_f) && (4..=5).contains(&r.m_r));
        if r.status == CandidateStatus::Ok {
            assert!(r.loglik.unwrap().is_finite());
            assert!(r.aic.unwrap().is_finite());
            assert!(r.bic.unwrap().is_finite());
            assert!(r.bic_i.unwrap().is_finite());
        }
    }
    for choice in [report.chosen.aic, report.chosen.bic, report.chosen.bic_i] {
        if let Some((m_f, m_r)) = choice {
            assert!((4..=5).contains(&m_f) && (4..=5).contains(&m_r));
        }
    }
}

#[test]
fn fitted_values_decompose_into_mean_and_deviation() {
    let design = SimulationDesign::reference(10, 99);
    let (data, _) = generate_replication(&design, 3).unwrap();
    let spec = ModelSpec::new(5, 5, design.domain).unwrap();
    let init = default_init(&spec, &data).unwrap();
    let fit = em_fit(&spec, &data, &init, &quick_em()).unwrap();

    assert_eq!(fit.fitted_values.len(), 10);
    for idx in 0..data.subjects.len() {
        let via_index = predict_subject(&fit, idx).unwrap();
        let via_parts = fitted_curve(
            &spec,
            &fit.params.beta,
            &fit.subject_effects[idx],
            &data.subjects[idx].times,
        )
        .unwrap();
        let mean = mean_curve(&spec, &fit.params.beta, &data.subjects[idx].times).unwrap();
        for i in 0..via_index.len() {
            assert!((via_index[i] - via_parts[i]).abs() < 1e-12);
            assert!((via_index[i] - fit.fitted_values[idx][i]).abs() < 1e-12);
        }
        // the deviation is genuinely subject specific on simulated data
        let dev: f64 = (&via_index - &mean).norm();
        assert!(dev.is_finite());
    }
}

#[test]
fn recovered_curves_score_close_to_truth() {
    let design = SimulationDesign::reference(20, 424_242);
    let (data, truth) = generate_replication(&design, 1).unwrap();
    let spec = design.true_spec().unwrap();
    let init = default_init(&spec, &data).unwrap();
    let fit = em_fit(&spec, &data, &init, &quick_em()).unwrap();

    let grid = design.grid();
    let fitted: Vec<_> = (0..20)
        .map(|idx| fitted_curve(&spec, &fit.params.beta, &fit.subject_effects[idx], &grid).unwrap())
        .collect();
    let score = amse(&fitted, &truth.curves).unwrap();
    // fitting the true dimensions on its own data must beat a mean-only fit
    let means: Vec<_> = (0..20)
        .map(|_| mean_curve(&spec, &fit.params.beta, &grid).unwrap())
        .collect();
    let mean_only = amse(&means, &truth.curves).unwrap();
    assert!(score.is_finite() && score > 0.0);
    assert!(score < mean_only / 2.0, "amse {score} vs mean-only {mean_only}");
}

#[test]
fn studies_are_reproducible_end_to_end() {
    let mut design = SimulationDesign::reference(12, 20_250_819);
    design.n_replications = 2;
    design.mf_range = (4, 5);
    design.mr_range = (4, 5);
    design.em = quick_em();
    let a = run_study(&design).unwrap();
    let b = run_study(&design).unwrap();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
    assert_eq!(a.replications.len(), 2);
}
