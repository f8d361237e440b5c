//! Prediction protocols, Dice evaluation and cohort experiments.
//!
//! Four predictors are compared:
//!
//! * `naive` repeats the last learning visit;
//! * `extrapolate` regresses a geodesic on the learning visits and follows it;
//! * `exp_parallel` and `geod_parallel` register the subject baseline onto a
//!   reference geodesic and transfer the reference trajectory.
//!
//! Transfers run on the raw clock (reference age `t_ref + (t - t_baseline)`)
//! or on the reparametrized clock `psi_ref^-1(psi_subject(t))`, with the
//! subject warp fitted to its scores.

mod stats;
mod table;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::Cohort;
use crate::deformation::{shape_at, steps_for, Geodesic};
use crate::error::{Error, Result};
use crate::estimation::{extrapolate, register, regress, ControlPointLayout, FitConfig, Observation};
use crate::mesh::{dice, ShapeComplex};
use crate::timewarp::{fit_timewarp, ReferenceCurve, ScoreSeries, TimeWarp, WarpFit};
use crate::transport::{matching_state, parallelize, ParallelMode, ParallelSettings};

pub use stats::{mann_whitney_normal, mann_whitney_u, stars, MannWhitney, EXACT_LIMIT};
pub use table::{write_summary_csv, CellSummary, EvalRow, EvalTable};

/// Time mismatch tolerated when pairing predictions with observations.
pub const PAIRING_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Naive,
    Extrapolate,
    ExpParallel,
    GeodParallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    Raw,
    Reparam,
}

/// A method on a clock, written `exp_parallel+reparam`; `naive` and
/// `extrapolate` exist only on the raw clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MethodSpec {
    pub method: Method,
    pub timing: Timing,
}

impl MethodSpec {
    pub const NAIVE: MethodSpec = MethodSpec {
        method: Method::Naive,
        timing: Timing::Raw,
    };

    pub fn new(method: Method, timing: Timing) -> Result<Self> {
        if timing == Timing::Reparam && matches!(method, Method::Naive | Method::Extrapolate) {
            return Err(Error::Config(format!(
                "{} has no reparametrized variant",
                MethodSpec { method, timing: Timing::Raw }
            )));
        }
        Ok(Self { method, timing })
    }

    pub fn is_transfer(&self) -> bool {
        matches!(self.method, Method::ExpParallel | Method::GeodParallel)
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = match self.method {
            Method::Naive => "naive",
            Method::Extrapolate => "extrapolate",
            Method::ExpParallel => "exp_parallel",
            Method::GeodParallel => "geod_parallel",
        };
        match (self.is_transfer(), self.timing) {
            (false, _) => write!(f, "{m}"),
            (true, Timing::Raw) => write!(f, "{m}+raw"),
            (true, Timing::Reparam) => write!(f, "{m}+reparam"),
        }
    }
}

impl FromStr for MethodSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (m, t) = s.split_once('+').unwrap_or((s, "raw"));
        let method = match m {
            "naive" => Method::Naive,
            "extrapolate" => Method::Extrapolate,
            "exp_parallel" | "exp" => Method::ExpParallel,
            "geod_parallel" | "geod" => Method::GeodParallel,
            _ => return Err(Error::Config(format!("unknown method '{m}'"))),
        };
        let timing = match t {
            "raw" => Timing::Raw,
            "reparam" => Timing::Reparam,
            _ => return Err(Error::Config(format!("unknown timing '{t}'"))),
        };
        MethodSpec::new(method, timing)
    }
}

impl TryFrom<String> for MethodSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MethodSpec> for String {
    fn from(m: MethodSpec) -> String {
        m.to_string()
    }
}

/// Settings shared by all predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictConfig {
    pub fit: FitConfig,
    pub parallel: ParallelSettings,
    pub curve: ReferenceCurve,
    /// Warp of the reference subject; identity at the reference `t_ref` if absent.
    pub reference_warp: Option<TimeWarp>,
    /// `t0` of the fitted subject warps; the reference `t_ref` if absent.
    pub t0: Option<f64>,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            fit: FitConfig::default(),
            parallel: ParallelSettings::default(),
            curve: ReferenceCurve::default(),
            reference_warp: None,
            t0: None,
        }
    }
}

impl PredictConfig {
    /// Uses one time resolution for registration, regression and transfer.
    pub fn with_steps_per_year(mut self, steps_per_year: f64) -> Self {
        self.fit.steps_per_year = steps_per_year;
        self.parallel.steps_per_year = steps_per_year;
        self
    }
}

/// What to predict for one subject.
#[derive(Debug, Clone)]
pub struct PredictionTask<'a> {
    pub method: MethodSpec,
    pub learning: &'a [Observation],
    pub scores: Option<&'a ScoreSeries>,
    pub reference: Option<&'a Geodesic>,
    /// Subject ages to predict.
    pub target_times: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// `(age, shape)` in the order of the requested times.
    pub samples: Vec<(f64, ShapeComplex)>,
    /// Matching time clamped into the reference span.
    pub flagged: bool,
    pub warp: Option<WarpFit>,
}

/// Baseline matching shared by the two transfers on one clock.
#[derive(Debug, Clone)]
pub struct MatchSetup {
    pub timing: Timing,
    /// Reference time matched with the subject baseline.
    pub t_match: f64,
    pub matching: Vec<crate::kernel::Vec3>,
    pub flagged: bool,
    pub warp: Option<WarpFit>,
    /// Subject age to reference time.
    clock: Clock,
    pub registration_converged: bool,
}

#[derive(Debug, Clone, Copy)]
enum Clock {
    Shift { t_baseline: f64, t_ref: f64 },
    Warp { subject: TimeWarp, reference: TimeWarp },
}

impl Clock {
    fn map(&self, t: f64) -> f64 {
        match *self {
            Clock::Shift { t_baseline, t_ref } => t_ref + (t - t_baseline),
            Clock::Warp { subject, reference } => reference.psi_inverse(subject.psi(t)),
        }
    }
}

fn baseline(learning: &[Observation]) -> Result<&Observation> {
    learning
        .iter()
        .min_by(|a, b| a.t.total_cmp(&b.t))
        .ok_or_else(|| Error::InvalidInput("prediction needs at least one learning visit".into()))
}

fn last(learning: &[Observation]) -> Result<&Observation> {
    learning
        .iter()
        .max_by(|a, b| a.t.total_cmp(&b.t))
        .ok_or_else(|| Error::InvalidInput("prediction needs at least one learning visit".into()))
}

/// Registers the subject baseline onto the reference at the matching time of
/// the requested clock.
pub fn match_baseline(
    reference: &Geodesic,
    learning: &[Observation],
    scores: Option<&ScoreSeries>,
    timing: Timing,
    config: &PredictConfig,
) -> Result<MatchSetup> {
    if (config.fit.kernel.sigma_v - reference.params.sigma_v).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "fit sigma_V {} differs from the reference's {}",
            config.fit.kernel.sigma_v, reference.params.sigma_v
        )));
    }
    let base = baseline(learning)?;
    let (clock, warp) = match timing {
        Timing::Raw => (
            Clock::Shift {
                t_baseline: base.t,
                t_ref: reference.t_ref,
            },
            None,
        ),
        Timing::Reparam => {
            let scores = scores.ok_or_else(|| Error::Config("reparametrized transfer needs scores".into()))?;
            let fit = fit_timewarp(scores, &config.curve, config.t0.unwrap_or(reference.t_ref))?;
            let reference_warp = config.reference_warp.unwrap_or(TimeWarp::identity(reference.t_ref));
            (
                Clock::Warp {
                    subject: fit.warp,
                    reference: reference_warp,
                },
                Some(fit),
            )
        }
    };
    let raw = clock.map(base.t);
    let t_match = raw.clamp(reference.t_min, reference.t_max);
    let flagged = t_match != raw;
    if flagged {
        log::warn!("matching time {raw:.3} clamped to {t_match:.3}");
    }
    let at = matching_state(reference, t_match, &config.parallel)?;
    let source = shape_at(reference, t_match, steps_for(t_match - reference.t_ref, config.parallel.steps_per_year))?;
    let fit = FitConfig {
        control_points: ControlPointLayout::Explicit(at.control_points),
        optimize_control_points: false,
        steps_per_year: config.parallel.steps_per_year,
        ..config.fit.clone()
    };
    let reg = register(&source, &base.shape, &fit)?;
    Ok(MatchSetup {
        timing,
        t_match,
        matching: reg.params.momenta,
        flagged,
        warp,
        clock,
        registration_converged: reg.converged,
    })
}

/// Transfers the reference with an existing matching.
pub fn transfer(
    reference: &Geodesic,
    setup: &MatchSetup,
    mode: ParallelMode,
    target_times: &[f64],
    config: &PredictConfig,
) -> Result<Vec<(f64, ShapeComplex)>> {
    let ref_times: Vec<f64> = target_times.iter().map(|&t| setup.clock.map(t)).collect();
    let traj = parallelize(mode, reference, &setup.matching, setup.t_match, &ref_times, &config.parallel)?;
    Ok(target_times
        .iter()
        .zip(&ref_times)
        .map(|(&t, &u)| {
            let shape = &traj
                .samples
                .iter()
                .find(|(s, _)| *s == u)
                .expect("every requested time is sampled")
                .1;
            (t, shape.clone())
        })
        .collect())
}

pub fn predict(task: &PredictionTask<'_>, config: &PredictConfig) -> Result<Prediction> {
    if task.target_times.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidInput("target times must be finite".into()));
    }
    match task.method.method {
        Method::Naive => {
            let shape = &last(task.learning)?.shape;
            Ok(Prediction {
                samples: task.target_times.iter().map(|&t| (t, shape.clone())).collect(),
                flagged: false,
                warp: None,
            })
        }
        Method::Extrapolate => {
            let fit = FitConfig {
                steps_per_year: config.parallel.steps_per_year,
                ..config.fit.clone()
            };
            let result = regress(task.learning, &fit)?;
            let samples = task
                .target_times
                .par_iter()
                .map(|&t| Ok((t, extrapolate(&result, t)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(Prediction {
                samples,
                flagged: false,
                warp: None,
            })
        }
        Method::ExpParallel | Method::GeodParallel => {
            let reference = task
                .reference
                .ok_or_else(|| Error::Config(format!("{} needs a reference geodesic", task.method)))?;
            let setup = match_baseline(reference, task.learning, task.scores, task.method.timing, config)?;
            let mode = if task.method.method == Method::ExpParallel {
                ParallelMode::ExpParallel
            } else {
                ParallelMode::GeodesicParallel
            };
            Ok(Prediction {
                samples: transfer(reference, &setup, mode, &task.target_times, config)?,
                flagged: setup.flagged,
                warp: setup.warp,
            })
        }
    }
}

/// Dice of each prediction against the observation at the same age.
pub fn evaluate(
    predictions: &[(f64, ShapeComplex)],
    observations: &[(f64, ShapeComplex)],
    voxel_size: f64,
) -> Result<Vec<f64>> {
    predictions
        .par_iter()
        .map(|(t, shape)| {
            let (_, truth) = observations
                .iter()
                .filter(|(s, _)| (s - t).abs() <= PAIRING_TOLERANCE)
                .min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs()))
                .ok_or_else(|| Error::Pairing(format!("no observation within {PAIRING_TOLERANCE} yr of age {t}")))?;
            dice(shape, truth, voxel_size)
        })
        .collect()
}

/// Months from `t_baseline` to `t`, rounded.
pub fn horizon_months(t_baseline: f64, t: f64) -> i64 {
    ((t - t_baseline) * 12.0).round() as i64
}

/// Protocol of a cohort experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub methods: Vec<MethodSpec>,
    /// Leading visits used for learning; the rest are predicted.
    pub learning_visits: usize,
    /// Predict only the last visit.
    pub last_visit_only: bool,
    pub voxel_size: f64,
    /// Compare with noiseless shapes instead of the observed visits.
    pub against_truth: bool,
    pub predict: PredictConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            methods: vec![
                MethodSpec::NAIVE,
                MethodSpec::new(Method::ExpParallel, Timing::Raw).unwrap(),
                MethodSpec::new(Method::GeodParallel, Timing::Raw).unwrap(),
                MethodSpec::new(Method::ExpParallel, Timing::Reparam).unwrap(),
                MethodSpec::new(Method::GeodParallel, Timing::Reparam).unwrap(),
            ],
            learning_visits: 1,
            last_visit_only: false,
            voxel_size: 0.5,
            against_truth: false,
            predict: PredictConfig::default(),
        }
    }
}

/// Runs every method on every subject of a simulated cohort, using the
/// simulator's reference geodesic and reference curve.
pub fn run_experiment(cohort: &Cohort, config: &ExperimentConfig) -> Result<EvalTable> {
    if !(config.voxel_size > 0.0) {
        return Err(Error::Config("voxel size must be > 0".into()));
    }
    let mut predict_config = config.predict.clone();
    predict_config.curve = cohort.config.curve;
    predict_config.reference_warp = Some(cohort.config.reference_warp());
    predict_config.t0 = Some(cohort.config.t_ref);
    let rows = cohort
        .subjects
        .par_iter()
        .map(|s| subject_rows(cohort, s, config, &predict_config))
        .collect::<Result<Vec<_>>>()?;
    EvalTable::new(rows.into_iter().flatten().collect())
}

fn subject_rows(
    cohort: &Cohort,
    subject: &crate::cohort::Subject,
    config: &ExperimentConfig,
    predict_config: &PredictConfig,
) -> Result<Vec<EvalRow>> {
    let k = config.learning_visits.max(1);
    if subject.visits.len() <= k {
        return Ok(Vec::new());
    }
    let learning: Vec<Observation> = subject.visits[..k].iter().map(|v| Observation::new(v.age, v.shape.clone())).collect();
    let targets: Vec<&crate::cohort::Visit> = if config.last_visit_only {
        subject.visits.last().into_iter().collect()
    } else {
        subject.visits[k..].iter().collect()
    };
    let times: Vec<f64> = targets.iter().map(|v| v.age).collect();
    let truth: Vec<(f64, ShapeComplex)> = targets
        .iter()
        .map(|v| (v.age, if config.against_truth { v.truth.clone() } else { v.shape.clone() }))
        .collect();
    // Score dynamics are fitted on the whole score history, as the score model
    // is learned from all cognitive assessments.
    let scores = ScoreSeries::new(subject.visits.iter().map(|v| (v.age, v.score)).collect())?;
    let t_b = learning[0].t;

    let mut setups: Vec<MatchSetup> = Vec::new();
    let mut rows = Vec::new();
    for &m in &config.methods {
        let (samples, flagged) = if m.is_transfer() {
            if !setups.iter().any(|s| s.timing == m.timing) {
                setups.push(match_baseline(&cohort.reference, &learning, Some(&scores), m.timing, predict_config)?);
            }
            let setup = setups.iter().find(|s| s.timing == m.timing).expect("setup just inserted");
            let mode = if m.method == Method::ExpParallel {
                ParallelMode::ExpParallel
            } else {
                ParallelMode::GeodesicParallel
            };
            (transfer(&cohort.reference, setup, mode, &times, predict_config)?, setup.flagged)
        } else {
            let task = PredictionTask {
                method: m,
                learning: &learning,
                scores: Some(&scores),
                reference: Some(&cohort.reference),
                target_times: times.clone(),
            };
            (predict(&task, predict_config)?.samples, false)
        };
        let dice = evaluate(&samples, &truth, config.voxel_size)?;
        for ((t, _), d) in samples.iter().zip(dice) {
            rows.push(EvalRow {
                subject: subject.truth.id.clone(),
                method: m.to_string(),
                horizon_months: horizon_months(t_b, *t),
                age: *t,
                dice: d,
                flagged,
            });
        }
    }
    Ok(rows)
}
