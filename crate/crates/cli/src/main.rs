//! Command-line driver for the Lorenz-96 closure experiments.
//!
//! Every run writes one experiment directory under `--out` holding the
//! configuration echo, CSV data, `metrics.json`, `timing.json` and fitted
//! model files. Exit codes: 0 success, 2 configuration error, 3 numerical
//! failure, 1 anything else (I/O).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use l96::ar::fit_ar1;
use l96::dynamics::{column_names, ZeroResidual};
use l96::experiment::{
    ar_forecast_mspe, average_kl, emit_figure, enkf_truth, expectations, fit_core_models,
    fit_cs_raw, fit_methods, fit_wilks_closure, forecast, generate_truth, parse_figure,
    run_degree2_stage, run_degree3_stage, run_filter, run_table1, run_table2, run_table3,
    run_table4, training_residuals, within_relative, write_assimilation_csv,
    write_observations_csv, write_table1, write_table2, write_table3, write_table4, Check, Closure,
    ExperimentConfig, FilterVariant, Method, MethodRow, MetricsReport, RunDir,
};
use l96::rng::{indexed_seed, sub_seed};
use l96::sparse::{apply_bias_mode, average_coefficients, BiasMode};
use l96::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "l96",
    version,
    about = "Two-scale Lorenz-96 closure experiments"
)]
struct Cli {
    /// Configuration file (TOML, or JSON when the extension is `.json`).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Root directory for experiment directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,

    /// Override the master seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate the coupled model and write the slow variables and forcing.
    Simulate {
        /// Keep every n-th step in the CSV output.
        #[arg(long, default_value_t = 10)]
        record_every: usize,
    },
    /// Lyapunov spectrum of the uncoupled slow system.
    Lyapunov,
    /// Fit a deterministic closure.
    Fit {
        #[command(subcommand)]
        kind: FitKind,
    },
    /// Fit the AR(1) model of a closure's training residuals.
    FitAr {
        #[arg(long, default_value = "cs-noisy-bias")]
        method: String,
    },
    /// Forecast error and climate divergence of the configured methods.
    Evaluate {
        /// Evaluate this model file instead of fitting the configured methods.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Ensemble Kalman filter run of one closure.
    Enkf {
        /// One of wilks, cs, ar-wilks, ar-cs.
        #[arg(long, default_value = "ar-cs")]
        variant: String,
    },
    /// Regenerate a table or the data behind a figure.
    Reproduce {
        /// table1..table4 or fig2..fig8.
        target: String,
    },
}

#[derive(Subcommand, Debug)]
enum FitKind {
    /// Pooled quartic regression.
    Wilks,
    /// Sparse regression over monomial dictionaries.
    Cs {
        #[arg(long, value_enum, default_value_t = Stage::Final)]
        stage: Stage,
        /// Bias handling of the final model.
        #[arg(long, value_enum, default_value_t = Bias::Noisy)]
        bias: Bias,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Stage {
    /// Own powers up to the configured degree.
    Final,
    /// All monomials up to degree two.
    Degree2,
    /// Repeated fits with random cubic columns.
    Degree3,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Bias {
    Raw,
    Zero,
    Average,
    Noisy,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        e if e.is_config() => 2,
        Error::Io(_) => 1,
        _ => 3,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            Error::Io(io) => Error::Config {
                field: "config".into(),
                reason: format!("{}: {io}", path.display()),
            },
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_checks(checks: &[Check]) {
    for c in checks {
        let mark = if c.passed { "pass" } else { "FAIL" };
        println!("  [{mark}] {} {}", c.name, c.detail);
    }
}

fn print_rows(rows: &[MethodRow]) {
    if rows.is_empty() {
        return;
    }
    let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.5}"));
    println!(
        "  {:<14} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "method", "mspe", "avg_kl", "det_mspe", "phi", "sigma", "enkf", "free"
    );
    for r in rows {
        println!(
            "  {:<14} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
            r.method,
            f(r.mspe),
            f(r.avg_kl),
            f(r.deterministic_mspe),
            f(r.phi),
            f(r.sigma),
            f(r.enkf_mspe),
            f(r.free_run_mspe)
        );
    }
}

fn finish(dir: &RunDir, report: &MetricsReport, start: Instant) -> Result<()> {
    dir.write_metrics(report)?;
    dir.write_timing(start.elapsed().as_secs_f64())?;
    print_rows(&report.rows);
    print_checks(&report.checks);
    println!("{}", dir.path.display());
    Ok(())
}

fn coefficient_checks(prefix: &str, got: &[f64], reference: &[f64], tol: f64) -> Vec<Check> {
    reference
        .iter()
        .enumerate()
        .map(|(p, r)| {
            let g = got.get(p).copied().unwrap_or(0.0);
            Check::new(
                &format!("{prefix}_a{p}"),
                within_relative(g, *r, tol),
                format!("{g:.6} vs {r}"),
            )
        })
        .collect()
}

fn simulate(cfg: &ExperimentConfig, out: &Path, record_every: usize) -> Result<()> {
    if record_every == 0 {
        return Err(Error::Config {
            field: "record_every".into(),
            reason: "must be positive".into(),
        });
    }
    let start = Instant::now();
    let dir = RunDir::create(out, cfg, "simulate")?;
    let truth = generate_truth(cfg)?;
    dir.write_trajectory("x.csv", &truth.x.thin(record_every))?;
    let u = truth.u.thin(record_every);
    let mut w = dir.writer("u.csv")?;
    let names: Vec<String> = (1..=u.width()).map(|i| format!("U{i}")).collect();
    u.write_csv(&mut w, &names)?;
    w.flush()?;
    let report = MetricsReport::new(cfg, "simulate", &["truth"])?;
    finish(&dir, &report, start)
}

fn lyapunov(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let start = Instant::now();
    let dir = RunDir::create(out, cfg, "table1")?;
    let t = run_table1(cfg)?;
    write_table1(&dir, &t)?;
    if let Some(s) = &t.report.spectrum {
        println!(
            "  lambda1 {:.4}  positive {}  D_KY {:.3}  H_KS {:.3}",
            s.exponents[0], s.n_positive, s.d_ky, s.h_ks
        );
    }
    finish(&dir, &t.report, start)
}

fn fit_wilks_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let start = Instant::now();
    let dir = RunDir::create(out, cfg, "fit-wilks")?;
    let truth = generate_truth(cfg)?;
    let model = fit_wilks_closure(&truth)?;
    let closure = Closure::Wilks(model);
    dir.write_model("wilks", &closure)?;
    let mut report = MetricsReport::new(cfg, "fit-wilks", &["truth"])?;
    let e = expectations()?;
    report.checks = coefficient_checks(
        "wilks",
        &model.coefficients,
        &e.wilks.coefficients,
        e.wilks.relative_tol,
    );
    println!("  coefficients (a0..a4) {:?}", model.coefficients);
    finish(&dir, &report, start)
}

fn fit_cs_cmd(cfg: &ExperimentConfig, out: &Path, stage: Stage, bias: Bias) -> Result<()> {
    let start = Instant::now();
    let e = expectations()?;
    match stage {
        Stage::Final => {
            let dir = RunDir::create(out, cfg, "fit-cs")?;
            let truth = generate_truth(cfg)?;
            let raw = fit_cs_raw(cfg, &truth)?;
            let mode = match bias {
                Bias::Raw => BiasMode::Raw,
                Bias::Zero => BiasMode::Zero,
                Bias::Average => BiasMode::Average,
                Bias::Noisy => BiasMode::AveragePlusNoise {
                    sigma: cfg.cs.sigma_bias,
                },
            };
            let model = apply_bias_mode(&raw, mode, sub_seed(cfg.seed, "bias-noise"))?;
            dir.write_text("equations.txt", &(model.equations().join("\n") + "\n"))?;
            let avg = average_coefficients(&model);
            dir.write_text("averaged.json", &serde_json::to_string_pretty(&avg)?)?;
            dir.write_model("cs", &Closure::Sparse(model))?;
            let mut report = MetricsReport::new(cfg, "fit-cs", &["truth", "fits", "bias-noise"])?;
            report.checks = coefficient_checks(
                "cs",
                &avg.coefficients,
                &e.cs.coefficients,
                e.cs.relative_tol,
            );
            println!("  averaged (a0..a4) {:?}", avg.coefficients);
            finish(&dir, &report, start)
        }
        Stage::Degree2 => {
            let dir = RunDir::create(out, cfg, "fit-cs-degree2")?;
            let truth = generate_truth(cfg)?;
            let s = run_degree2_stage(cfg, &truth)?;
            dir.write_text("equations.txt", &(s.model.equations().join("\n") + "\n"))?;
            dir.write_text("averaged.json", &serde_json::to_string_pretty(&s.averaged)?)?;
            dir.write_text("locality.json", &serde_json::to_string_pretty(&s.locality)?)?;
            dir.write_model("cs-degree2", &Closure::Sparse(s.model))?;
            let mut report = MetricsReport::new(cfg, "fit-cs-degree2", &["truth", "fits"])?;
            let frac = s.locality.fraction_cross_term_free;
            let dominated = s.locality.own_linear_dominates.iter().all(|b| *b);
            report.checks = vec![
                Check::new(
                    "cross_term_free_fraction",
                    frac >= e.cs.locality_fraction,
                    format!("{frac:.3} at relevance {}", s.locality.relevance),
                ),
                Check::new("own_linear_dominates", dominated, ""),
            ];
            println!("  averaged (a0..a2) {:?}", s.averaged.coefficients);
            finish(&dir, &report, start)
        }
        Stage::Degree3 => {
            let dir = RunDir::create(out, cfg, "fit-cs-degree3")?;
            let truth = generate_truth(cfg)?;
            let s = run_degree3_stage(cfg, &truth)?;
            dir.write_text("degree3.json", &serde_json::to_string_pretty(&s)?)?;
            let report = MetricsReport::new(cfg, "fit-cs-degree3", &["truth", "fits", "degree3"])?;
            println!("  averaged (a0..a3) {:?}", s.averaged);
            println!("  relevant non-own stencils: {}", s.relevant_other.len());
            finish(&dir, &report, start)
        }
    }
}

fn fit_ar_cmd(cfg: &ExperimentConfig, out: &Path, method: &str) -> Result<()> {
    let start = Instant::now();
    let m: Method = method.parse()?;
    let dir = RunDir::create(out, cfg, "fit-ar")?;
    let truth = generate_truth(cfg)?;
    let (_, closure) = fit_methods(cfg, &truth, &[m])?.remove(0);
    let res = training_residuals(&closure, &truth)?;
    let ar = fit_ar1(&res)?;
    dir.write_model(m.name(), &closure)?;
    dir.write_text(
        &format!("models/ar-{}.json", m.name()),
        &serde_json::to_string_pretty(&ar)?,
    )?;
    let mut w = dir.writer("residuals.csv")?;
    let thin = res.thin(cfg.evaluation.kl_stride);
    let names: Vec<String> = (1..=thin.width()).map(|i| format!("e{i}")).collect();
    thin.write_csv(&mut w, &names)?;
    w.flush()?;
    let mut report = MetricsReport::new(cfg, "fit-ar", &["truth", "fits", "bias-noise"])?;
    report.rows.push(MethodRow {
        method: m.name().into(),
        phi: Some(ar.phi),
        sigma: Some(ar.sigma),
        sigma_e: ar.sigma_e,
        ..MethodRow::default()
    });
    finish(&dir, &report, start)
}

fn evaluate_cmd(cfg: &ExperimentConfig, out: &Path, model: Option<&Path>) -> Result<()> {
    let start = Instant::now();
    let dir = RunDir::create(out, cfg, "evaluate")?;
    let truth = generate_truth(cfg)?;
    let models: Vec<(String, Closure)> = match model {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
                field: "model".into(),
                reason: format!("{}: {e}", path.display()),
            })?;
            let c = Closure::from_json(&text)?;
            vec![("model".to_string(), c)]
        }
        None => fit_methods(cfg, &truth, &cfg.methods)?
            .into_iter()
            .map(|(m, c)| (m.name().to_string(), c))
            .collect(),
    };
    let k = cfg.model.k;
    let mut report = MetricsReport::new(
        cfg,
        "evaluate",
        &["truth", "fits", "bias-noise", "ar-forecast", "ar-climate"],
    )?;
    for (i, (name, closure)) in models.iter().enumerate() {
        let mut row = MethodRow {
            method: name.clone(),
            ..MethodRow::default()
        };
        let (pred, det) = forecast(cfg, &truth, closure, &mut ZeroResidual::new(k))?;
        dir.write_trajectory(&format!("forecast_{name}.csv"), &pred)?;
        if cfg.ar {
            let ar = fit_ar1(&training_residuals(closure, &truth)?)?;
            row.phi = Some(ar.phi);
            row.sigma = Some(ar.sigma);
            row.sigma_e = ar.sigma_e;
            row.deterministic_mspe = Some(det);
            let fseed = indexed_seed(sub_seed(cfg.seed, "ar-forecast"), i);
            row.mspe = Some(ar_forecast_mspe(cfg, &truth, closure, &ar, fseed)?);
            let cseed = indexed_seed(sub_seed(cfg.seed, "ar-climate"), i);
            let mut res = l96::ar::ArResidual::new(&ar, vec![0.0; k], cseed)?;
            row.avg_kl = average_kl(cfg, &truth, closure, &mut res)?;
        } else {
            row.mspe = Some(det);
            row.avg_kl = average_kl(cfg, &truth, closure, &mut ZeroResidual::new(k))?;
        }
        report.rows.push(row);
    }
    finish(&dir, &report, start)
}

fn enkf_cmd(cfg: &ExperimentConfig, out: &Path, variant: &str) -> Result<()> {
    let start = Instant::now();
    let v: FilterVariant = variant.parse()?;
    let dir = RunDir::create(out, cfg, "enkf")?;
    let truth = generate_truth(cfg)?;
    let models = fit_core_models(cfg, &truth)?;
    let window = enkf_truth(cfg, &truth);
    let (closure, noise) = v.setup(&models);
    let (filtered, free) = run_filter(cfg, &window, closure, &noise)?;
    let mut w = dir.writer(&format!("enkf_{}.csv", v.name()))?;
    write_assimilation_csv(&mut w, &window, &filtered, cfg.model.k)?;
    w.flush()?;
    let mut w = dir.writer("observations.csv")?;
    write_observations_csv(&mut w, &filtered, cfg.model.k)?;
    w.flush()?;
    let mut w = dir.writer("free_run.csv")?;
    free.mean.write_csv(&mut w, &column_names(cfg.model.k, 0))?;
    w.flush()?;
    let mut report = MetricsReport::new(cfg, "enkf", &["truth", "fits", "bias-noise", "enkf"])?;
    report.rows.push(MethodRow {
        method: v.name().into(),
        enkf_mspe: Some(filtered.mspe),
        free_run_mspe: Some(free.mspe),
        ..MethodRow::default()
    });
    finish(&dir, &report, start)
}

fn reproduce(cfg: &ExperimentConfig, out: &Path, target: &str) -> Result<()> {
    let start = Instant::now();
    match target {
        "table1" => lyapunov(cfg, out),
        "table2" => {
            let dir = RunDir::create(out, cfg, "table2")?;
            let truth = generate_truth(cfg)?;
            let t = run_table2(cfg, &truth)?;
            write_table2(&dir, &t)?;
            finish(&dir, &t.report, start)
        }
        "table3" => {
            let dir = RunDir::create(out, cfg, "table3")?;
            let truth = generate_truth(cfg)?;
            let t = run_table3(cfg, &truth)?;
            write_table3(&dir, &t)?;
            finish(&dir, &t.report, start)
        }
        "table4" => {
            let dir = RunDir::create(out, cfg, "table4")?;
            let truth = generate_truth(cfg)?;
            let t = run_table4(cfg, &truth)?;
            write_table4(&dir, &t)?;
            finish(&dir, &t.report, start)
        }
        other => {
            let fig = parse_figure(other)?;
            let dir = RunDir::create(out, cfg, &format!("fig{fig}"))?;
            for p in emit_figure(cfg, fig, &dir)? {
                println!("  {}", p.display());
            }
            dir.write_timing(start.elapsed().as_secs_f64())?;
            println!("{}", dir.path.display());
            Ok(())
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Simulate { record_every } => simulate(&cfg, out, *record_every),
        Command::Lyapunov => lyapunov(&cfg, out),
        Command::Fit { kind } => match kind {
            FitKind::Wilks => fit_wilks_cmd(&cfg, out),
            FitKind::Cs { stage, bias } => fit_cs_cmd(&cfg, out, *stage, *bias),
        },
        Command::FitAr { method } => fit_ar_cmd(&cfg, out, method),
        Command::Evaluate { model } => evaluate_cmd(&cfg, out, model.as_deref()),
        Command::Enkf { variant } => enkf_cmd(&cfg, out, variant),
        Command::Reproduce { target } => reproduce(&cfg, out, target),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
