use std::sync::OnceLock;

use l96::dynamics::ModelParams;
use l96::experiment::{
    emit_figure, generate_truth, run_table1, run_table2, run_table3, run_table4, Closure,
    EnkfSettings, ExperimentConfig, Method, RunDir, Truth, Windows,
};
use l96::sparse::BiasMode;

fn small() -> ExperimentConfig {
    ExperimentConfig {
        seed: 17,
        model: ModelParams {
            k: 8,
            j: 4,
            ..ModelParams::default()
        },
        windows: Windows {
            spinup: 5.0,
            train_end: 15.0,
            test_end: 25.0,
            horizon: 0.5,
        },
        enkf: EnkfSettings {
            members: 10,
            window: 2.0,
            ..EnkfSettings::default()
        },
        ..ExperimentConfig::default()
    }
}

fn truth() -> &'static Truth {
    static T: OnceLock<Truth> = OnceLock::new();
    T.get_or_init(|| generate_truth(&small()).unwrap())
}

#[test]
fn table2_is_deterministic_and_complete() {
    let cfg = small();
    let a = run_table2(&cfg, truth()).unwrap();
    let b = run_table2(&cfg, &generate_truth(&cfg).unwrap()).unwrap();
    assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap());
    assert_eq!(a.report.rows.len(), Method::ALL.len());
    for m in Method::ALL {
        let row = a.report.row(m.name()).unwrap();
        assert!(
            row.mspe.is_some_and(|v| v.is_finite() && v >= 0.0),
            "{}",
            m.name()
        );
    }
    assert!(a.report.experiment_id.starts_with("table2-"));
    assert!(a.report.seeds.contains_key("truth"));
}

#[test]
fn bias_modes_shape_the_fitted_models() {
    let t = run_table2(&small(), truth()).unwrap();
    let sparse = |m: Method| match &t.models.iter().find(|(n, _)| *n == m).unwrap().1 {
        Closure::Sparse(s) => s.clone(),
        Closure::Wilks(_) => panic!("expected a sparse model"),
    };
    let zero = sparse(Method::CsZeroBias);
    assert!(zero.bias.iter().all(|b| *b == 0.0));
    let avg = sparse(Method::CsAvgBias);
    assert!(avg.bias.windows(2).all(|w| w[0] == w[1]));
    let raw = sparse(Method::CsRaw);
    let mean = raw.bias.iter().sum::<f64>() / raw.bias.len() as f64;
    assert!((avg.bias[0] - mean).abs() < 1e-12);
    assert_eq!(
        Method::CsNoisyBias.bias_mode(0.07),
        Some(BiasMode::AveragePlusNoise { sigma: 0.07 })
    );
}

#[test]
fn closures_survive_json() {
    let t = run_table2(&small(), truth()).unwrap();
    for (_, c) in &t.models {
        let back = Closure::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(&back, c);
    }
}

#[test]
fn table3_reports_ar_parameters() {
    let t = run_table3(&small(), truth()).unwrap();
    for row in &t.report.rows {
        let (phi, s, se) = (row.phi.unwrap(), row.sigma.unwrap(), row.sigma_e.unwrap());
        assert!(phi.abs() < 1.0);
        assert!((se * se - s * s / (1.0 - phi * phi)).abs() <= 1e-12 * se * se);
        assert!(row.deterministic_mspe.is_some());
    }
}

#[test]
fn table4_filters_beat_free_runs() {
    let t = run_table4(&small(), truth()).unwrap();
    assert_eq!(t.runs.len(), 4);
    for row in &t.report.rows {
        assert!(
            row.enkf_mspe.unwrap() < row.free_run_mspe.unwrap(),
            "{}",
            row.method
        );
    }
}

#[test]
fn figures_write_plot_data() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small();
    let dir = RunDir::create(tmp.path(), &cfg, "fig").unwrap();
    let pdfs = emit_figure(&cfg, 3, &dir).unwrap();
    // only X1 and X8 exist when K = 8
    assert_eq!(pdfs.len(), 2);
    for p in &pdfs {
        let text = std::fs::read_to_string(p).unwrap();
        assert!(text.lines().count() > 10);
    }
    let traj = emit_figure(&cfg, 5, &dir).unwrap();
    let csv = std::fs::read_to_string(&traj[0]).unwrap();
    assert!(csv.lines().next().unwrap().ends_with("l1_error"));
    assert!(dir.path.join("config.json").is_file());
}

#[test]
fn lyapunov_estimates_are_stable() {
    let mut cfg = ExperimentConfig::default();
    let base = run_table1(&cfg).unwrap().report.spectrum.unwrap().exponents;

    cfg.lyapunov.renorm_interval = 0.1;
    let half = run_table1(&cfg).unwrap().report.spectrum.unwrap().exponents;
    let lead = base[0];
    for (a, b) in base.iter().zip(&half) {
        // relative for exponents of appreciable size, scaled by the leading
        // exponent near zero
        assert!(
            (a - b).abs() <= 0.02 * a.abs().max(lead * 0.1),
            "{a} vs {b}"
        );
    }

    cfg.lyapunov.renorm_interval = 0.2;
    cfg.seed = 99;
    let other = run_table1(&cfg).unwrap().report.spectrum.unwrap().exponents;
    for (a, b) in base.iter().zip(&other) {
        assert!((a - b).abs() < 0.1, "{a} vs {b}");
    }
}
