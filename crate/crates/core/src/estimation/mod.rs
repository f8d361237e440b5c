//! Registration and geodesic regression.
//!
//! Both minimize
//!
//! ```text
//! sum_j |flow_{(t_j - t_ref) b0}(T) - y_j|^2_varifold + lambda * b0^T K(c0, c0) b0
//! ```
//!
//! over the momenta `b0`, and optionally the control points `c0` and the
//! template vertices `T`. Gradients come from reverse accumulation through the
//! RK4 shooting and flow.

mod objective;
mod optimizer;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::deformation::{shape_at, steps_for, DeformationParams, Geodesic};
use crate::error::{Error, Result};
use crate::kernel::{KernelConfig, Vec3};
use crate::mesh::ShapeComplex;

pub use objective::{objective, objective_gradient, regularizer_gradient, ObjectiveGradient};
pub use optimizer::IterationRecord;

use objective::Problem;
use optimizer::{minimize, Schedule};

/// A shape observed at an age (years).
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub t: f64,
    pub shape: ShapeComplex,
}

impl Observation {
    pub fn new(t: f64, shape: ShapeComplex) -> Self {
        Self { t, shape }
    }
}

/// Where the control points sit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlPointLayout {
    /// Regular grid over the template bounding box padded by one spacing.
    /// `None` uses the deformation kernel width.
    Grid { spacing: Option<f64> },
    Explicit(#[serde(with = "crate::serde_vec3")] Vec<Vec3>),
}

impl Default for ControlPointLayout {
    fn default() -> Self {
        ControlPointLayout::Grid { spacing: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub kernel: KernelConfig,
    /// Weight of the kinetic-energy penalty.
    pub lambda_reg: f64,
    pub max_iters: usize,
    /// Relative objective decrease below which an iteration counts as quiet.
    pub tolerance: f64,
    /// Consecutive quiet iterations that end the descent.
    pub patience: usize,
    /// Largest point displacement of the first step, in mm (mm/year for momenta).
    pub initial_step: f64,
    /// Step multiplier applied after every accepted iterate.
    pub step_growth: f64,
    pub control_points: ControlPointLayout,
    /// Used by regression; registration always keeps the source fixed.
    pub optimize_template: bool,
    pub optimize_control_points: bool,
    /// RK4 resolution of every shot, per year of deformation time.
    pub steps_per_year: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            kernel: KernelConfig::default(),
            lambda_reg: 1e-2,
            max_iters: 200,
            tolerance: 1e-5,
            patience: 3,
            initial_step: 0.25,
            step_growth: 1.2,
            control_points: ControlPointLayout::default(),
            optimize_template: true,
            optimize_control_points: false,
            steps_per_year: crate::deformation::DEFAULT_STEPS as f64,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return bad("lambda_reg must be finite and >= 0");
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be > 0");
        }
        if !(self.initial_step > 0.0 && self.initial_step.is_finite()) {
            return bad("initial_step must be > 0");
        }
        if !(self.step_growth >= 1.0 && self.step_growth.is_finite()) {
            return bad("step_growth must be >= 1");
        }
        if !(self.steps_per_year > 0.0 && self.steps_per_year.is_finite()) {
            return bad("steps_per_year must be > 0");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if let ControlPointLayout::Grid { spacing: Some(s) } = self.control_points {
            if !(s > 0.0 && s.is_finite()) {
                return bad("grid spacing must be > 0");
            }
        }
        Ok(())
    }

    fn schedule(&self) -> Schedule {
        Schedule {
            max_iters: self.max_iters,
            tolerance: self.tolerance,
            patience: self.patience,
            initial_step: self.initial_step,
            step_growth: self.step_growth,
        }
    }

    /// Control points for a template under this configuration.
    pub fn control_points_for(&self, template: &ShapeComplex) -> Result<Vec<Vec3>> {
        match &self.control_points {
            ControlPointLayout::Explicit(points) => {
                if points.is_empty() {
                    return Err(Error::Config("explicit control-point list is empty".into()));
                }
                Ok(points.clone())
            }
            ControlPointLayout::Grid { spacing } => {
                let s = spacing.unwrap_or(self.kernel.sigma_v);
                let (lo, hi) = template.bounding_box();
                Ok(control_point_grid(lo, hi, s, s))
            }
        }
    }
}

/// Regular grid of spacing `spacing` centered in `[lo - pad, hi + pad]`.
pub fn control_point_grid(lo: Vec3, hi: Vec3, spacing: f64, pad: f64) -> Vec<Vec3> {
    let start = lo.add_scalar(-pad);
    let extent = (hi - lo).add_scalar(2.0 * pad);
    let counts = extent.map(|e| (e / spacing + 1e-9).floor() as usize + 1);
    let offset = Vec3::from_fn(|a, _| start[a] + 0.5 * (extent[a] - (counts[a] - 1) as f64 * spacing));
    let mut out = Vec::with_capacity(counts.iter().product());
    for k in 0..counts.z {
        for j in 0..counts.y {
            for i in 0..counts.x {
                out.push(offset + spacing * Vec3::new(i as f64, j as f64, k as f64));
            }
        }
    }
    out
}

/// Result of a fit with a fixed reference age.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub template: ShapeComplex,
    pub params: DeformationParams,
    pub objective: f64,
    pub residuals: Vec<f64>,
    pub log: Vec<IterationRecord>,
    pub converged: bool,
}

/// Minimizes the objective from zero momenta at `template`, `t_ref`.
pub fn fit_geodesic(
    template: &ShapeComplex,
    t_ref: f64,
    observations: &[Observation],
    config: &FitConfig,
    optimize_template: bool,
) -> Result<FitOutcome> {
    let problem = Problem::new(template, t_ref, observations, config)?;
    let c0 = config.control_points_for(template)?;
    crate::kernel::check_points(&c0, "control points")?;
    let p = c0.len();
    let x0 = vec![template.flat_vertices(), c0, vec![Vec3::zeros(); p]];
    let active = [optimize_template, config.optimize_control_points, true];

    let out = minimize(
        x0,
        &active,
        config.schedule(),
        |x| Ok(problem.value(&x[0], &x[1], &x[2])?.0),
        |x| {
            let (f, _, gt, gc, gb) = problem.value_and_gradient(&x[0], &x[1], &x[2])?;
            Ok((f, vec![gt, gc, gb]))
        },
    )?;
    let (_, residuals) = problem.value(&out.x[0], &out.x[1], &out.x[2])?;
    let objective = out.objective;
    let mut x = out.x;
    let momenta = x.pop().expect("momenta block");
    let control_points = x.pop().expect("control block");
    let vertices = x.pop().expect("template block");
    Ok(FitOutcome {
        template: template.with_flat_vertices(&vertices),
        params: DeformationParams::new(control_points, momenta, config.kernel.sigma_v)?,
        objective,
        residuals,
        log: out.log,
        converged: out.converged,
    })
}

/// Momenta carrying `source` onto `target` in unit time.
#[derive(Debug, Clone)]
pub struct Registration {
    pub params: DeformationParams,
    pub objective: f64,
    /// Squared varifold distance between the deformed source and the target.
    pub residual: f64,
    pub log: Vec<IterationRecord>,
    pub converged: bool,
}

/// Matches `source` to `target`: one observation at unit time, source fixed.
pub fn register(source: &ShapeComplex, target: &ShapeComplex, config: &FitConfig) -> Result<Registration> {
    source.check_same_labels(target)?;
    let obs = [Observation::new(1.0, target.clone())];
    let out = fit_geodesic(source, 0.0, &obs, config, false)?;
    Ok(Registration {
        params: out.params,
        objective: out.objective,
        residual: out.residuals[0],
        log: out.log,
        converged: out.converged,
    })
}

/// Regression output.
#[derive(Debug, Clone)]
pub struct RegressionResult {
    pub geodesic: Geodesic,
    pub final_objective: f64,
    /// Squared varifold residual per observation, in age order.
    pub residuals: Vec<f64>,
    /// Ages matching `residuals`.
    pub ages: Vec<f64>,
    pub log: Vec<IterationRecord>,
    pub converged: bool,
    pub steps_per_year: f64,
}

fn lexicographic(a: &ShapeComplex, b: &ShapeComplex) -> Ordering {
    let (va, vb) = (a.flat_vertices(), b.flat_vertices());
    for (p, q) in va.iter().zip(&vb) {
        for k in 0..3 {
            match p[k].total_cmp(&q[k]) {
                Ordering::Equal => {}
                other => return other,
            }
        }
    }
    va.len().cmp(&vb.len())
}

/// Geodesic regression: template initialized to the earliest observation,
/// `t_ref` its age, momenta from zero.
pub fn regress(observations: &[Observation], config: &FitConfig) -> Result<RegressionResult> {
    if observations.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "regression needs at least 2 observations, got {}",
            observations.len()
        )));
    }
    let mut obs = observations.to_vec();
    obs.sort_by(|a, b| a.t.total_cmp(&b.t).then_with(|| lexicographic(&a.shape, &b.shape)));
    let (t_min, t_max) = (obs[0].t, obs[obs.len() - 1].t);
    if t_min == t_max {
        return Err(Error::InvalidInput("regression needs at least two distinct ages".into()));
    }
    let template = obs[0].shape.clone();
    let out = fit_geodesic(&template, t_min, &obs, config, config.optimize_template)?;
    let geodesic = Geodesic::new(out.template, out.params, t_min, t_min, t_max)?;
    Ok(RegressionResult {
        geodesic,
        final_objective: out.objective,
        residuals: out.residuals,
        ages: obs.iter().map(|o| o.t).collect(),
        log: out.log,
        converged: out.converged,
        steps_per_year: config.steps_per_year,
    })
}

/// The fitted trajectory evaluated at `t_future`, possibly past the data.
pub fn extrapolate(result: &RegressionResult, t_future: f64) -> Result<ShapeComplex> {
    let g = &result.geodesic;
    shape_at(g, t_future, steps_for(t_future - g.t_ref, result.steps_per_year))
}
