use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use shapeflow::cohort::{simulate_cohort, SimConfig};
use shapeflow::deformation::{flow_shape, shoot_for, steps_for, DeformationParams};
use shapeflow::estimation::{register, regress, ControlPointLayout, FitConfig, IterationRecord, Observation};
use shapeflow::io::{
    load_geodesic, read_json, read_scores, save_geodesic, write_json, ManifestEntry, MatchingFile, ObservationManifest,
};
use shapeflow::mesh::{load_complex, save_complex, ShapeComplex};
use shapeflow::pipeline::{
    evaluate, horizon_months, predict, run_experiment, EvalRow, EvalTable, MethodSpec, PredictConfig, PredictionTask,
};
use shapeflow::timewarp::{fit_timewarp, ReferenceCurve, ScoreNormalization};
use shapeflow::transport::{matching_state, parallelize, ParallelMode, ParallelSettings};

mod report;

const EXIT_VALIDATION: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_USAGE: u8 = 64;

/// Longitudinal shape trajectories: simulation, regression, transport,
/// time warps and Dice evaluation.
#[derive(Parser, Debug)]
#[command(name = "shapeflow", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// JSON configuration of the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed overriding the configuration's.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// RK4 steps per year of deformation time (6 is two-month resolution).
    #[arg(long, global = true, default_value_t = 6)]
    steps_per_year: u32,
    /// Voxel edge for Dice, in mm.
    #[arg(long, global = true, default_value_t = 0.5)]
    voxel_size: f64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_subjects: Option<usize>,
    },
    /// Fit a geodesic to a series of shapes.
    Regress {
        /// JSON manifest of {"observations": [{"age", "mesh"}]}.
        #[arg(long)]
        observations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Match a source shape onto a target.
    Register {
        #[arg(long, required_unless_present = "reference")]
        source: Option<PathBuf>,
        #[arg(long)]
        target: PathBuf,
        /// Register onto this geodesic at --t-match, using its control points.
        #[arg(long, requires = "t_match")]
        reference: Option<PathBuf>,
        #[arg(long)]
        t_match: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Deform a shape by shooting momenta.
    Shoot {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        template: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transfer a reference geodesic through a matching.
    Transport {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        matching: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Comma-separated reference ages.
        #[arg(long, value_delimiter = ',', required = true)]
        times: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit time warps to score series.
    FitWarp {
        /// CSV with subject_id,age,score.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        subject: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict follow-up shapes of one subject.
    Predict {
        #[arg(long)]
        observations: PathBuf,
        /// naive, extrapolate, exp_parallel[+raw|+reparam], geod_parallel[+raw|+reparam].
        #[arg(long)]
        method: String,
        #[arg(long, value_delimiter = ',', required = true)]
        times: Vec<f64>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, requires = "subject")]
        scores: Option<PathBuf>,
        #[arg(long)]
        subject: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dice between predicted and observed shapes.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        observations: PathBuf,
        #[arg(long, default_value = "subject")]
        subject: String,
        #[arg(long, default_value = "prediction")]
        method: String,
        /// Age horizons are counted from; the earliest observation by default.
        #[arg(long)]
        baseline_age: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate Dice tables, or run a whole synthetic experiment (--config).
    Report {
        /// Per-prediction Dice CSVs from `evaluate`.
        #[arg(long)]
        eval: Vec<PathBuf>,
        /// Method tests are run against.
        #[arg(long, default_value = "naive")]
        baseline: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Exp,
    Geod,
}

impl From<ModeArg> for ParallelMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Exp => ParallelMode::ExpParallel,
            ModeArg::Geod => ParallelMode::GeodesicParallel,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    if let Command::Report { eval, .. } = &cli.command {
        if eval.is_empty() && cli.global.config.is_none() {
            eprintln!("error: report needs --eval files or an experiment --config");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let divergence = e.chain().any(|c| c.downcast_ref::<shapeflow::Error>().is_some_and(|e| e.is_divergence()));
            ExitCode::from(if divergence { EXIT_DIVERGENCE } else { EXIT_VALIDATION })
        }
    }
}

/// `SHAPEFLOW_THREADS` caps the worker pool.
fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("SHAPEFLOW_THREADS") {
        let n: usize = v.parse().with_context(|| format!("SHAPEFLOW_THREADS={v} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn config_or_default<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> anyhow::Result<T> {
    match path {
        Some(p) => read_json(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(T::default()),
    }
}

fn fit_config(g: &Global) -> anyhow::Result<FitConfig> {
    let mut cfg: FitConfig = config_or_default(&g.config)?;
    cfg.steps_per_year = g.steps_per_year as f64;
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_log(log: &[IterationRecord], path: &Path) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in log {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_samples(dir: &Path, prefix: &str, samples: &[(f64, ShapeComplex)]) -> anyhow::Result<ObservationManifest> {
    create_dir(dir)?;
    let mut manifest = ObservationManifest::default();
    for (k, (t, shape)) in samples.iter().enumerate() {
        let name = format!("{prefix}_{k}.vtk");
        save_complex(shape, dir.join(&name))?;
        manifest.observations.push(ManifestEntry {
            age: *t,
            mesh: name.into(),
        });
    }
    Ok(manifest)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = cli.global;
    match cli.command {
        Command::Simulate { out, n_subjects } => {
            let mut cfg: SimConfig = config_or_default(&g.config)?;
            if let Some(seed) = g.seed {
                cfg.seed = seed;
            }
            if let Some(n) = n_subjects {
                cfg.n_subjects = n;
            }
            cfg.parallel.steps_per_year = g.steps_per_year as f64;
            let cohort = simulate_cohort(&cfg, &out)?;
            println!("wrote {} subjects to {}", cohort.subjects.len(), out.display());
        }
        Command::Regress { observations, out } => {
            let cfg = fit_config(&g)?;
            let obs = ObservationManifest::load(&observations)?;
            let result = regress(&obs, &cfg)?;
            create_dir(&out)?;
            save_geodesic(&result.geodesic, out.join("geodesic.json"))?;
            write_json(&result.geodesic.params, out.join("params.json"))?;
            write_log(&result.log, &out.join("iterations.csv"))?;
            let residuals: Vec<_> = result
                .ages
                .iter()
                .zip(&result.residuals)
                .map(|(a, r)| serde_json::json!({"age": a, "residual": r}))
                .collect();
            write_json(
                &serde_json::json!({
                    "final_objective": result.final_objective,
                    "converged": result.converged,
                    "residuals": residuals,
                }),
                out.join("summary.json"),
            )?;
            println!("objective {:.6e}, converged {}", result.final_objective, result.converged);
        }
        Command::Register {
            source,
            target,
            reference,
            t_match,
            out,
        } => {
            let mut cfg = fit_config(&g)?;
            let target = load_complex(&target)?;
            let (source, t_match) = match (reference, source) {
                (Some(r), _) => {
                    let geo = load_geodesic(&r)?;
                    let t = t_match.expect("clap enforces --t-match");
                    let settings = ParallelSettings {
                        steps_per_year: cfg.steps_per_year,
                        ..ParallelSettings::default()
                    };
                    let at = matching_state(&geo, t, &settings)?;
                    cfg.control_points = ControlPointLayout::Explicit(at.control_points);
                    cfg.kernel.sigma_v = geo.params.sigma_v;
                    let steps = steps_for(t - geo.t_ref, cfg.steps_per_year);
                    (shapeflow::deformation::shape_at(&geo, t, steps)?, t)
                }
                (None, Some(s)) => (load_complex(&s)?, 0.0),
                (None, None) => bail!("--source or --reference is required"),
            };
            let reg = register(&source, &target, &cfg)?;
            create_dir(&out)?;
            write_json(
                &MatchingFile {
                    t_match,
                    params: reg.params.clone(),
                },
                out.join("matching.json"),
            )?;
            let flow = shoot_for(&reg.params, 1.0, steps_for(1.0, cfg.steps_per_year))?;
            save_complex(&flow_shape(&flow, &source)?, out.join("deformed.vtk"))?;
            write_log(&reg.log, &out.join("iterations.csv"))?;
            println!(
                "objective {:.6e}, residual {:.6e}, converged {}",
                reg.objective, reg.residual, reg.converged
            );
        }
        Command::Shoot {
            params,
            template,
            duration,
            out,
        } => {
            let params: DeformationParams = read_json(&params)?;
            params.validate()?;
            let template = load_complex(&template)?;
            let flow = shoot_for(&params, duration, steps_for(duration, g.steps_per_year as f64))?;
            save_complex(&flow_shape(&flow, &template)?, &out)?;
        }
        Command::Transport {
            reference,
            matching,
            mode,
            times,
            out,
        } => {
            let mut settings: ParallelSettings = config_or_default(&g.config)?;
            settings.steps_per_year = g.steps_per_year as f64;
            let geo = load_geodesic(&reference)?;
            let m: MatchingFile = read_json(&matching)?;
            let traj = parallelize(mode.into(), &geo, &m.params.momenta, m.t_match, &times, &settings)?;
            let manifest = write_samples(&out, "sample", &traj.samples)?;
            write_json(
                &serde_json::json!({
                    "mode": traj.mode,
                    "t_match": traj.t_match,
                    "observations": manifest.observations,
                }),
                out.join("trajectory.json"),
            )?;
        }
        Command::FitWarp { scores, subject, out } => {
            let cfg: WarpConfig = config_or_default(&g.config)?;
            let series = read_scores(&scores, &cfg.normalization)?;
            let t0 = cfg.t0.context("the warp config needs t0")?;
            let mut fits = serde_json::Map::new();
            for (id, s) in &series {
                if subject.as_ref().is_some_and(|want| want != id) {
                    continue;
                }
                fits.insert(id.clone(), serde_json::to_value(fit_timewarp(s, &cfg.curve, t0)?)?);
            }
            if let Some(want) = &subject {
                let fit = fits.remove(want).with_context(|| format!("no scores for subject {want}"))?;
                write_json(&fit, &out)?;
            } else {
                write_json(&fits, &out)?;
            }
        }
        Command::Predict {
            observations,
            method,
            times,
            reference,
            scores,
            subject,
            out,
        } => {
            let cfg: PredictFile = config_or_default(&g.config)?;
            let method: MethodSpec = method.parse()?;
            let learning: Vec<Observation> = ObservationManifest::load(&observations)?;
            let reference = reference.map(|r| load_geodesic(&r)).transpose()?;
            let series = match (&scores, &subject) {
                (Some(path), Some(id)) => {
                    let mut all = read_scores(path, &cfg.normalization)?;
                    Some(all.remove(id).with_context(|| format!("no scores for subject {id}"))?)
                }
                _ => None,
            };
            let predict_config = cfg.predict.with_steps_per_year(g.steps_per_year as f64);
            let task = PredictionTask {
                method,
                learning: &learning,
                scores: series.as_ref(),
                reference: reference.as_ref(),
                target_times: times,
            };
            let pred = predict(&task, &predict_config)?;
            let manifest = write_samples(&out, "prediction", &pred.samples)?;
            write_json(&manifest, out.join("manifest.json"))?;
            if let Some(w) = pred.warp {
                write_json(&w, out.join("warp.json"))?;
            }
            if pred.flagged {
                eprintln!("warning: matching time clamped into the reference span");
            }
        }
        Command::Evaluate {
            predictions,
            observations,
            subject,
            method,
            baseline_age,
            out,
        } => {
            let load = |p: &Path| -> anyhow::Result<Vec<(f64, ShapeComplex)>> {
                Ok(ObservationManifest::load(p)?.into_iter().map(|o| (o.t, o.shape)).collect())
            };
            let pred = load(&predictions)?;
            let obs = load(&observations)?;
            let t_b = baseline_age.unwrap_or_else(|| obs.iter().map(|o| o.0).fold(f64::INFINITY, f64::min));
            let dice = evaluate(&pred, &obs, g.voxel_size)?;
            let rows = pred
                .iter()
                .zip(dice)
                .map(|((t, _), d)| EvalRow {
                    subject: subject.clone(),
                    method: method.clone(),
                    horizon_months: horizon_months(t_b, *t),
                    age: *t,
                    dice: d,
                    flagged: false,
                })
                .collect();
            EvalTable::new(rows)?.write_csv(&out)?;
        }
        Command::Report { eval, baseline, out } => {
            if let Some(path) = &g.config {
                let mut cfg: report::ExperimentFile = read_json(path)?;
                if let Some(seed) = g.seed {
                    cfg.simulation.seed = seed;
                }
                cfg.simulation.parallel.steps_per_year = g.steps_per_year as f64;
                cfg.experiment.predict = cfg.experiment.predict.with_steps_per_year(g.steps_per_year as f64);
                cfg.experiment.voxel_size = g.voxel_size;
                let cohort = shapeflow::cohort::simulate(&cfg.simulation)?;
                let table = run_experiment(&cohort, &cfg.experiment)?;
                report::write(&table, &baseline, &cfg.name, &out)?;
            } else {
                let mut rows = Vec::new();
                for p in &eval {
                    rows.extend(EvalTable::read_csv(p)?.rows);
                }
                report::write(&EvalTable::new(rows)?, &baseline, "report", &out)?;
            }
        }
    }
    Ok(())
}

/// Config of `fit-warp`.
#[derive(serde::Deserialize, Default)]
#[serde(default)]
struct WarpConfig {
    curve: ReferenceCurve,
    t0: Option<f64>,
    normalization: ScoreNormalization,
}

/// Config of `predict`.
#[derive(serde::Deserialize, Default)]
#[serde(default)]
struct PredictFile {
    #[serde(flatten)]
    predict: PredictConfig,
    normalization: ScoreNormalization,
}
