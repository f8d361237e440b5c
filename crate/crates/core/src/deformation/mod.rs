//! Geodesic shooting of control points and momenta, and transport of meshes
//! along the resulting flow of diffeomorphisms.

pub(crate) mod adjoint;
mod hamiltonian;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{check_points, check_sigma, Vec3};
use crate::mesh::ShapeComplex;

pub use hamiltonian::hamiltonian;
pub(crate) use hamiltonian::{dh_dc, field, field_vjp, point_field, point_field_vjp};

/// Default number of RK4 steps per unit of integration time.
pub const DEFAULT_STEPS: usize = 20;

/// Initial control points and momenta: one tangent vector of the
/// diffeomorphism group. Momenta are expressed per unit time (per year when
/// attached to a [`Geodesic`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformationParams {
    #[serde(with = "crate::serde_vec3")]
    pub control_points: Vec<Vec3>,
    #[serde(with = "crate::serde_vec3")]
    pub momenta: Vec<Vec3>,
    #[serde(rename = "sigma_V")]
    pub sigma_v: f64,
}

impl DeformationParams {
    pub fn new(control_points: Vec<Vec3>, momenta: Vec<Vec3>, sigma_v: f64) -> Result<Self> {
        let p = Self {
            control_points,
            momenta,
            sigma_v,
        };
        p.validate()?;
        Ok(p)
    }

    /// Zero momenta at the given control points.
    pub fn at_rest(control_points: Vec<Vec3>, sigma_v: f64) -> Result<Self> {
        let n = control_points.len();
        Self::new(control_points, vec![Vec3::zeros(); n], sigma_v)
    }

    pub fn validate(&self) -> Result<()> {
        check_sigma(self.sigma_v)?;
        if self.control_points.is_empty() {
            return Err(Error::InvalidInput("at least one control point is required".into()));
        }
        if self.control_points.len() != self.momenta.len() {
            return Err(Error::InvalidInput(format!(
                "{} control points but {} momenta",
                self.control_points.len(),
                self.momenta.len()
            )));
        }
        check_points(&self.control_points, "control_points")?;
        check_points(&self.momenta, "momenta")
    }

    pub fn len(&self) -> usize {
        self.control_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.control_points.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            control_points: self.control_points.clone(),
            momenta: self.momenta.iter().map(|m| m * factor).collect(),
            sigma_v: self.sigma_v,
        }
    }

    pub fn kinetic_energy(&self) -> f64 {
        hamiltonian(&self.control_points, &self.momenta, self.sigma_v)
    }

    pub(crate) fn inv_s2(&self) -> f64 {
        1.0 / (self.sigma_v * self.sigma_v)
    }
}

/// Control points and momenta at one instant of a flow.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub control_points: Vec<Vec3>,
    pub momenta: Vec<Vec3>,
}

impl State {
    pub(crate) fn is_finite(&self) -> bool {
        self.control_points
            .iter()
            .chain(&self.momenta)
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

fn axpy(base: &[Vec3], h: f64, dir: &[Vec3]) -> Vec<Vec3> {
    base.iter().zip(dir).map(|(a, d)| a + h * d).collect()
}

pub(crate) fn rk4_step(s: &State, h: f64, inv_s2: f64) -> State {
    let (c, b) = (&s.control_points, &s.momenta);
    let (k1c, k1b) = field(c, b, inv_s2);
    let (k2c, k2b) = field(&axpy(c, h / 2.0, &k1c), &axpy(b, h / 2.0, &k1b), inv_s2);
    let (k3c, k3b) = field(&axpy(c, h / 2.0, &k2c), &axpy(b, h / 2.0, &k2b), inv_s2);
    let (k4c, k4b) = field(&axpy(c, h, &k3c), &axpy(b, h, &k3b), inv_s2);
    let comb = |x: &[Vec3], k1: &[Vec3], k2: &[Vec3], k3: &[Vec3], k4: &[Vec3]| -> Vec<Vec3> {
        (0..x.len())
            .map(|i| x[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect()
    };
    State {
        control_points: comb(c, &k1c, &k2c, &k3c, &k4c),
        momenta: comb(b, &k1b, &k2b, &k3b, &k4b),
    }
}

/// Integrates the Hamiltonian system from `(c, b)` over `duration` (which may
/// be negative) in `steps` RK4 steps. Returns all `steps + 1` states.
pub(crate) fn integrate(c: &[Vec3], b: &[Vec3], duration: f64, steps: usize, sigma_v: f64) -> Result<Vec<State>> {
    INTEGRATIONS.fetch_add(1, Ordering::Relaxed);
    let steps = steps.max(1);
    let h = duration / steps as f64;
    let inv_s2 = 1.0 / (sigma_v * sigma_v);
    let mut path = Vec::with_capacity(steps + 1);
    path.push(State {
        control_points: c.to_vec(),
        momenta: b.to_vec(),
    });
    for step in 0..steps {
        let next = rk4_step(&path[step], h, inv_s2);
        if !next.is_finite() {
            return Err(Error::Divergence {
                step: step + 1,
                context: "non-finite control points or momenta while shooting".into(),
            });
        }
        path.push(next);
    }
    Ok(path)
}

static INTEGRATIONS: AtomicUsize = AtomicUsize::new(0);

/// Integrations (control-point systems and point flows) run by this process
/// so far.
pub fn integration_count() -> usize {
    INTEGRATIONS.load(Ordering::Relaxed)
}

/// Number of steps for an integration window at a given resolution.
pub fn steps_for(duration: f64, steps_per_unit: f64) -> usize {
    ((duration.abs() * steps_per_unit) - 1e-9).ceil().max(1.0) as usize
}

/// A sampled geodesic of the control-point system.
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicFlow {
    pub params: DeformationParams,
    pub steps: usize,
    /// Total integration time; 1 for [`shoot`].
    pub duration: f64,
    /// `steps + 1` states, `path[0]` being the initial one.
    pub path: Vec<State>,
}

impl GeodesicFlow {
    pub fn step_size(&self) -> f64 {
        self.duration / self.steps as f64
    }

    pub fn end(&self) -> &State {
        self.path.last().expect("flows have at least one state")
    }

    /// Kinetic energy at every sampled state.
    pub fn energies(&self) -> Vec<f64> {
        self.path
            .iter()
            .map(|s| hamiltonian(&s.control_points, &s.momenta, self.params.sigma_v))
            .collect()
    }
}

/// Shoots `params` over the unit interval with `steps` RK4 steps.
pub fn shoot(params: &DeformationParams, steps: usize) -> Result<GeodesicFlow> {
    shoot_for(params, 1.0, steps)
}

/// Shoots `params` over `[0, duration]`.
pub fn shoot_for(params: &DeformationParams, duration: f64, steps: usize) -> Result<GeodesicFlow> {
    params.validate()?;
    if steps == 0 {
        return Err(Error::InvalidInput("at least one integration step is required".into()));
    }
    let path = integrate(&params.control_points, &params.momenta, duration, steps, params.sigma_v)?;
    Ok(GeodesicFlow {
        params: params.clone(),
        steps,
        duration,
        path,
    })
}

/// Positions of `points` after each step of the flow (`steps + 1` snapshots).
///
/// Vertices follow `dx/ds = sum_k K(x, c_k(s)) b_k(s)` with RK4; the control
/// state at half steps is the average of the two bracketing path states.
pub(crate) fn flow_trajectory(path: &[State], h: f64, x0: &[Vec3], inv_s2: f64) -> Result<Vec<Vec<Vec3>>> {
    INTEGRATIONS.fetch_add(1, Ordering::Relaxed);
    let mut traj = Vec::with_capacity(path.len());
    traj.push(x0.to_vec());
    for k in 0..path.len() - 1 {
        let (s0, s1) = (&path[k], &path[k + 1]);
        let cm: Vec<Vec3> = s0.control_points.iter().zip(&s1.control_points).map(|(a, b)| (a + b) / 2.0).collect();
        let bm: Vec<Vec3> = s0.momenta.iter().zip(&s1.momenta).map(|(a, b)| (a + b) / 2.0).collect();
        let x = &traj[k];
        let g1 = point_field(x, &s0.control_points, &s0.momenta, inv_s2);
        let g2 = point_field(&axpy(x, h / 2.0, &g1), &cm, &bm, inv_s2);
        let g3 = point_field(&axpy(x, h / 2.0, &g2), &cm, &bm, inv_s2);
        let g4 = point_field(&axpy(x, h, &g3), &s1.control_points, &s1.momenta, inv_s2);
        let next: Vec<Vec3> = (0..x.len())
            .map(|i| x[i] + (h / 6.0) * (g1[i] + 2.0 * g2[i] + 2.0 * g3[i] + g4[i]))
            .collect();
        if !next.iter().all(|v| v.iter().all(|c| c.is_finite())) {
            return Err(Error::Divergence {
                step: k + 1,
                context: "non-finite vertex while flowing a shape".into(),
            });
        }
        traj.push(next);
    }
    Ok(traj)
}

/// Final positions of `points` under the flow.
pub fn flow_points(flow: &GeodesicFlow, points: &[Vec3]) -> Result<Vec<Vec3>> {
    let mut traj = flow_trajectory(&flow.path, flow.step_size(), points, flow.params.inv_s2())?;
    Ok(traj.pop().expect("trajectory has an end"))
}

/// Deforms every structure of `shape` by the flow. Connectivity is unchanged.
pub fn flow_shape(flow: &GeodesicFlow, shape: &ShapeComplex) -> Result<ShapeComplex> {
    let moved = flow_points(flow, &shape.flat_vertices())?;
    Ok(shape.with_flat_vertices(&moved))
}

/// A trajectory `t -> flow_{(t - t_ref) params}(template)` in shape space.
/// Momenta are per year.
#[derive(Debug, Clone, PartialEq)]
pub struct Geodesic {
    pub template: ShapeComplex,
    pub params: DeformationParams,
    pub t_ref: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Geodesic {
    pub fn new(template: ShapeComplex, params: DeformationParams, t_ref: f64, t_min: f64, t_max: f64) -> Result<Self> {
        params.validate()?;
        if !(t_min <= t_ref && t_ref <= t_max) || !t_ref.is_finite() || !t_min.is_finite() || !t_max.is_finite() {
            return Err(Error::InvalidInput(format!(
                "geodesic span [{t_min}, {t_max}] must contain t_ref = {t_ref}"
            )));
        }
        Ok(Self {
            template,
            params,
            t_ref,
            t_min,
            t_max,
        })
    }

    /// Control points and per-year momenta at age `t`.
    pub fn state_at(&self, t: f64, steps: usize) -> Result<State> {
        state_along(&self.params, t - self.t_ref, steps)
    }
}

/// State reached after time `s` along the geodesic of `params`, with momenta
/// expressed per unit time. Computed by shooting `s * params` for unit time,
/// the same computation [`shape_at`] uses.
pub fn state_along(params: &DeformationParams, s: f64, steps: usize) -> Result<State> {
    if s == 0.0 {
        return Ok(State {
            control_points: params.control_points.clone(),
            momenta: params.momenta.clone(),
        });
    }
    let flow = shoot(&params.scaled(s), steps)?;
    let end = flow.end();
    Ok(State {
        control_points: end.control_points.clone(),
        momenta: end.momenta.iter().map(|m| m / s).collect(),
    })
}

/// The template deformed to age `t` (extrapolating outside the span).
pub fn shape_at(g: &Geodesic, t: f64, steps: usize) -> Result<ShapeComplex> {
    let dt = t - g.t_ref;
    if dt == 0.0 {
        return Ok(g.template.clone());
    }
    let flow = shoot(&g.params.scaled(dt), steps)?;
    flow_shape(&flow, &g.template)
}
