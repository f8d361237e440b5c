//! Data attachment plus kinetic regularization, and its exact gradient.

use crate::deformation::adjoint::{flow_adjoint, shoot_adjoint, StateBar};
use crate::deformation::{dh_dc, flow_trajectory, hamiltonian, integrate, steps_for, DeformationParams};
use crate::error::{Error, Result};
use crate::estimation::{FitConfig, Observation};
use crate::kernel::Vec3;
use crate::mesh::{ComplexVarifold, ShapeComplex};

/// Gradient blocks of the objective. Disabled blocks are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGradient {
    pub momenta: Vec<Vec3>,
    pub control_points: Option<Vec<Vec3>>,
    pub template: Option<Vec<Vec3>>,
}

/// The pieces of the objective that stay fixed during a fit.
#[derive(Debug, Clone)]
pub(crate) struct Problem {
    pub template: ShapeComplex,
    pub t_ref: f64,
    pub targets: Vec<(f64, ComplexVarifold)>,
    pub lambda: f64,
    pub sigma_v: f64,
    pub steps_per_year: f64,
}

impl Problem {
    pub fn new(template: &ShapeComplex, t_ref: f64, observations: &[Observation], config: &FitConfig) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::InvalidInput("at least one observation is required".into()));
        }
        config.validate()?;
        let mut targets = Vec::with_capacity(observations.len());
        for o in observations {
            if !o.t.is_finite() {
                return Err(Error::InvalidInput(format!("observation age {} is not finite", o.t)));
            }
            template.check_same_labels(&o.shape)?;
            targets.push((o.t, ComplexVarifold::new(&o.shape, config.kernel.sigma_w)?));
        }
        Ok(Self {
            template: template.clone(),
            t_ref,
            targets,
            lambda: config.lambda_reg,
            sigma_v: config.kernel.sigma_v,
            steps_per_year: config.steps_per_year,
        })
    }

    fn steps(&self, dt: f64) -> usize {
        steps_for(dt, self.steps_per_year)
    }

    /// Objective value and per-observation residuals.
    pub fn value(&self, template: &[Vec3], c0: &[Vec3], b0: &[Vec3]) -> Result<(f64, Vec<f64>)> {
        let inv_s2 = 1.0 / (self.sigma_v * self.sigma_v);
        let mut residuals = Vec::with_capacity(self.targets.len());
        for (t, target) in &self.targets {
            let dt = t - self.t_ref;
            let moved = if dt == 0.0 {
                template.to_vec()
            } else {
                let n = self.steps(dt);
                let scaled: Vec<Vec3> = b0.iter().map(|b| dt * b).collect();
                let path = integrate(c0, &scaled, 1.0, n, self.sigma_v)?;
                let mut traj = flow_trajectory(&path, 1.0 / n as f64, template, inv_s2)?;
                traj.pop().expect("trajectory end")
            };
            residuals.push(target.distance2(&self.template.with_flat_vertices(&moved))?);
        }
        let data: f64 = residuals.iter().sum();
        Ok((data + self.lambda * 2.0 * hamiltonian(c0, b0, self.sigma_v), residuals))
    }

    /// Value, residuals and full gradient (every block computed).
    pub fn value_and_gradient(
        &self,
        template: &[Vec3],
        c0: &[Vec3],
        b0: &[Vec3],
    ) -> Result<(f64, Vec<f64>, Vec<Vec3>, Vec<Vec3>, Vec<Vec3>)> {
        let inv_s2 = 1.0 / (self.sigma_v * self.sigma_v);
        let p = c0.len();
        let mut residuals = Vec::with_capacity(self.targets.len());
        let mut g_template = vec![Vec3::zeros(); template.len()];
        let mut g_c = vec![Vec3::zeros(); p];
        let mut g_b = vec![Vec3::zeros(); p];
        for (t, target) in &self.targets {
            let dt = t - self.t_ref;
            if dt == 0.0 {
                let (d2, gx) = target.distance2_with_gradient(&self.template.with_flat_vertices(template))?;
                residuals.push(d2);
                for (a, g) in g_template.iter_mut().zip(&gx) {
                    *a += g;
                }
                continue;
            }
            let n = self.steps(dt);
            let h = 1.0 / n as f64;
            let scaled: Vec<Vec3> = b0.iter().map(|b| dt * b).collect();
            let path = integrate(c0, &scaled, 1.0, n, self.sigma_v)?;
            let traj = flow_trajectory(&path, h, template, inv_s2)?;
            let end = traj.last().expect("trajectory end");
            let (d2, gx) = target.distance2_with_gradient(&self.template.with_flat_vertices(end))?;
            residuals.push(d2);
            let mut bars = vec![StateBar::zeros(p); path.len()];
            let x0_bar = flow_adjoint(&path, h, &traj, gx, inv_s2, &mut bars);
            let z0 = shoot_adjoint(&path, h, inv_s2, bars);
            for (a, g) in g_template.iter_mut().zip(&x0_bar) {
                *a += g;
            }
            for i in 0..p {
                g_c[i] += z0.c[i];
                g_b[i] += dt * z0.b[i];
            }
        }
        // lambda * b^T K b
        let reg = self.lambda * 2.0 * hamiltonian(c0, b0, self.sigma_v);
        if self.lambda != 0.0 {
            let kb = crate::kernel::convolve_raw(c0, c0, b0, self.sigma_v);
            let dhc = dh_dc(c0, b0, inv_s2);
            for i in 0..p {
                g_b[i] += 2.0 * self.lambda * kb[i];
                g_c[i] += 2.0 * self.lambda * dhc[i];
            }
        }
        let data: f64 = residuals.iter().sum();
        Ok((data + reg, residuals, g_template, g_c, g_b))
    }
}

/// Sum of squared varifold residuals over the observations plus
/// `lambda * 2 * H(c0, b0)`. Returns the total and the per-observation
/// residuals.
pub fn objective(
    template: &ShapeComplex,
    params: &DeformationParams,
    observations: &[Observation],
    t_ref: f64,
    config: &FitConfig,
) -> Result<(f64, Vec<f64>)> {
    params.validate()?;
    let problem = Problem::new(template, t_ref, observations, config)?;
    problem.value(&template.flat_vertices(), &params.control_points, &params.momenta)
}

/// Gradient of [`objective`] with respect to the initial momenta, and to the
/// control points and template vertices when `config` enables them.
pub fn objective_gradient(
    template: &ShapeComplex,
    params: &DeformationParams,
    observations: &[Observation],
    t_ref: f64,
    config: &FitConfig,
) -> Result<ObjectiveGradient> {
    params.validate()?;
    let problem = Problem::new(template, t_ref, observations, config)?;
    let (_, _, gt, gc, gb) =
        problem.value_and_gradient(&template.flat_vertices(), &params.control_points, &params.momenta)?;
    Ok(ObjectiveGradient {
        momenta: gb,
        control_points: config.optimize_control_points.then_some(gc),
        template: config.optimize_template.then_some(gt),
    })
}

/// Momenta gradient of the regularizer alone, `2 lambda K(c, c) b`.
pub fn regularizer_gradient(params: &DeformationParams, lambda: f64) -> Vec<Vec3> {
    let c = &params.control_points;
    crate::kernel::convolve_raw(c, c, &params.momenta, params.sigma_v)
        .into_iter()
        .map(|v| 2.0 * lambda * v)
        .collect()
}
