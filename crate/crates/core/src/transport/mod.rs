//! Parallel transport of momenta along geodesics of the control-point system,
//! and the two ways of transferring a reference trajectory to a new subject.
//!
//! The fanning scheme moves a tangent vector `w` along a geodesic rung by rung.
//! From the current state `(c_k, b_k)` two perturbed shoots with momenta
//! `b_k +/- d w_k/|w_k|` over one rung give a Jacobi field
//!
//! ```text
//! J = (c+(h) - c-(h)) / (2 d h)  ~  K(c_{k+1}) w_{k+1} / |w_k|
//! ```
//!
//! and the raw estimate is then corrected so that `|w|` and `<w, b>` keep
//! their initial values.

mod schild;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deformation::{
    flow_shape, rk4_step, shape_at, shoot, state_along, steps_for, DeformationParams, Geodesic, State,
};
use crate::error::{Error, Result};
use crate::kernel::{check_points, kernel_inner, kernel_norm, solve_gram, Vec3};
use crate::mesh::ShapeComplex;

pub use schild::transport_schild;

pub const DEFAULT_EPSILON: f64 = 0.1;

/// Transport of `w`, attached to the control points at position `s_from` of
/// the geodesic generated by `params`, to position `s_to`. Positions are in
/// the time unit of `params` (years for a regression, the unit interval for a
/// matching).
#[derive(Debug, Clone)]
pub struct TransportJob {
    pub params: DeformationParams,
    pub w: Vec<Vec3>,
    pub s_from: f64,
    pub s_to: f64,
    pub rungs: usize,
    /// Perturbation of the momenta per unit rung length, along `w / |w|`.
    pub epsilon: f64,
    /// Resolution used to reach `s_from` from the initial state.
    pub steps_per_unit: f64,
}

impl TransportJob {
    pub fn new(params: DeformationParams, w: Vec<Vec3>, s_from: f64, s_to: f64, rungs: usize) -> Self {
        Self {
            params,
            w,
            s_from,
            s_to,
            rungs,
            epsilon: DEFAULT_EPSILON,
            steps_per_unit: crate::deformation::DEFAULT_STEPS as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.rungs == 0 {
            return Err(Error::InvalidInput("transport needs at least one rung".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidInput(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.w.len() != self.params.len() {
            return Err(Error::InvalidInput(format!(
                "transported vector has {} entries for {} control points",
                self.w.len(),
                self.params.len()
            )));
        }
        check_points(&self.w, "transported vector")?;
        if !self.s_from.is_finite() || !self.s_to.is_finite() {
            return Err(Error::InvalidInput("transport positions must be finite".into()));
        }
        Ok(())
    }

    /// Geodesic state at `s_from`.
    pub(crate) fn start(&self) -> Result<State> {
        state_along(&self.params, self.s_from, steps_for(self.s_from, self.steps_per_unit))
    }

    pub(crate) fn rung_length(&self) -> f64 {
        (self.s_to - self.s_from) / self.rungs as f64
    }
}

/// Output of a transport.
#[derive(Debug, Clone)]
pub struct Transported {
    /// Geodesic state at `s_to`, as reached by the rungs.
    pub state: State,
    /// The transported vector, attached to `state.control_points`.
    pub w: Vec<Vec3>,
    /// Per rung, `| |w_raw| - |w_0| | / |w_0|` before correction.
    pub raw_norm_drift: Vec<f64>,
    /// Per rung, `| <w_raw, b> - <w_0, b_0> | / (|w_0| |b|)` before correction.
    pub raw_pairing_drift: Vec<f64>,
}

impl Transported {
    pub fn mean_norm_drift(&self) -> f64 {
        mean(&self.raw_norm_drift)
    }

    pub fn mean_pairing_drift(&self) -> f64 {
        mean(&self.raw_pairing_drift)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Component of `w` along `b` set to `pairing / |b|`, orthogonal rest rescaled
/// to total norm `norm` (all in the kernel metric at `c`).
fn enforce(c: &[Vec3], b: &[Vec3], w: &[Vec3], norm: f64, pairing: f64, sigma: f64) -> Vec<Vec3> {
    let nb = kernel_norm(c, b, sigma);
    let wn = kernel_norm(c, w, sigma);
    if nb <= 1e-300 || !(nb.is_finite()) {
        return if wn > 0.0 { w.iter().map(|x| x * (norm / wn)).collect() } else { w.to_vec() };
    }
    let a_raw = kernel_inner(c, w, b, sigma) / nb;
    let perp: Vec<Vec3> = w.iter().zip(b).map(|(x, y)| x - (a_raw / nb) * y).collect();
    let a = (pairing / nb).clamp(-norm, norm);
    let perp_norm = kernel_norm(c, &perp, sigma);
    let target = (norm * norm - a * a).max(0.0).sqrt();
    let scale = if perp_norm > 0.0 { target / perp_norm } else { 0.0 };
    perp.iter().zip(b).map(|(p, y)| (a / nb) * y + scale * p).collect()
}

/// Fanning (Jacobi-field) transport.
pub fn transport_fanning(job: &TransportJob) -> Result<Transported> {
    job.validate()?;
    let sigma = job.params.sigma_v;
    let inv_s2 = job.params.inv_s2();
    let start = job.start()?;
    let n0 = kernel_norm(&start.control_points, &job.w, sigma);
    // along a constant path (zero momenta) transport is the identity
    let resting = start.momenta.iter().all(|b| *b == Vec3::zeros());
    if job.s_to == job.s_from || n0 == 0.0 || resting {
        let state = if job.s_to == job.s_from {
            start
        } else {
            walk(&start, job.rung_length(), job.rungs, inv_s2)?
        };
        return Ok(Transported {
            state,
            w: job.w.clone(),
            raw_norm_drift: Vec::new(),
            raw_pairing_drift: Vec::new(),
        });
    }
    let p0 = kernel_inner(&start.control_points, &job.w, &start.momenta, sigma);
    let h = job.rung_length();
    let d = job.epsilon * h.abs();

    let mut state = start;
    let mut w = job.w.clone();
    let mut norm_drift = Vec::with_capacity(job.rungs);
    let mut pairing_drift = Vec::with_capacity(job.rungs);
    for k in 0..job.rungs {
        let next = rk4_step(&state, h, inv_s2);
        let wn = kernel_norm(&state.control_points, &w, sigma);
        let perturbed = |sign: f64| {
            let b: Vec<Vec3> = state.momenta.iter().zip(&w).map(|(b, x)| b + (sign * d / wn) * x).collect();
            rk4_step(
                &State {
                    control_points: state.control_points.clone(),
                    momenta: b,
                },
                h,
                inv_s2,
            )
        };
        let (plus, minus) = (perturbed(1.0), perturbed(-1.0));
        let jacobi: Vec<Vec3> = plus
            .control_points
            .iter()
            .zip(&minus.control_points)
            .map(|(a, b)| (a - b) * (wn / (2.0 * d * h)))
            .collect();
        let raw = solve_gram(&next.control_points, &jacobi, sigma)?;
        if !next.is_finite() || !raw.iter().all(|v| v.iter().all(|x| x.is_finite())) {
            return Err(Error::Divergence {
                step: k + 1,
                context: "non-finite state in transport rung".into(),
            });
        }
        let c = &next.control_points;
        norm_drift.push((kernel_norm(c, &raw, sigma) - n0).abs() / n0);
        let nb = kernel_norm(c, &next.momenta, sigma);
        if nb > 0.0 {
            pairing_drift.push((kernel_inner(c, &raw, &next.momenta, sigma) - p0).abs() / (n0 * nb));
        }
        w = enforce(c, &next.momenta, &raw, n0, p0, sigma);
        state = next;
    }
    Ok(Transported {
        state,
        w,
        raw_norm_drift: norm_drift,
        raw_pairing_drift: pairing_drift,
    })
}

/// Follows the geodesic for `rungs` RK4 steps of length `h`.
pub(crate) fn walk(start: &State, h: f64, rungs: usize, inv_s2: f64) -> Result<State> {
    let mut s = start.clone();
    for k in 0..rungs {
        s = rk4_step(&s, h, inv_s2);
        if !s.is_finite() {
            return Err(Error::Divergence {
                step: k + 1,
                context: "non-finite state along the transport path".into(),
            });
        }
    }
    Ok(s)
}

/// Discretization of the transfer procedures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParallelSettings {
    /// RK4 steps per year for shooting and flowing shapes.
    pub steps_per_year: f64,
    /// Transport rungs per year along the reference, and per unit along a matching.
    pub rungs_per_year: f64,
    pub epsilon: f64,
}

impl Default for ParallelSettings {
    fn default() -> Self {
        Self {
            steps_per_year: crate::deformation::DEFAULT_STEPS as f64,
            rungs_per_year: 10.0,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl ParallelSettings {
    fn job(&self, params: DeformationParams, w: Vec<Vec3>, s_from: f64, s_to: f64) -> TransportJob {
        TransportJob {
            rungs: steps_for(s_to - s_from, self.rungs_per_year),
            epsilon: self.epsilon,
            steps_per_unit: self.steps_per_year,
            ..TransportJob::new(params, w, s_from, s_to, 1)
        }
    }

    /// Steps of a unit-time matching shoot.
    pub fn matching_steps(&self) -> usize {
        steps_for(1.0, self.steps_per_year)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParallelMode {
    ExpParallel,
    GeodesicParallel,
}

/// A subject trajectory obtained by transferring a reference geodesic.
/// Times are on the reference's clock.
#[derive(Debug, Clone)]
pub struct ParallelTrajectory {
    pub mode: ParallelMode,
    pub reference: Geodesic,
    /// Matching momenta at the reference control points at `t_match`.
    pub matching: Vec<Vec3>,
    pub t_match: f64,
    /// Sorted by time.
    pub samples: Vec<(f64, ShapeComplex)>,
    /// For geodesic parallelization, the subject geodesic that was sampled.
    pub subject_geodesic: Option<Geodesic>,
}

/// Reference state at `t_match`, computed exactly as the transfer functions do.
pub fn matching_state(reference: &Geodesic, t_match: f64, settings: &ParallelSettings) -> Result<State> {
    let s = t_match - reference.t_ref;
    state_along(&reference.params, s, steps_for(s, settings.steps_per_year))
}

fn reference_shape(reference: &Geodesic, t: f64, settings: &ParallelSettings) -> Result<ShapeComplex> {
    shape_at(reference, t, steps_for(t - reference.t_ref, settings.steps_per_year))
}

fn check_matching(reference: &Geodesic, matching: &[Vec3], times: &[f64]) -> Result<Vec<f64>> {
    if matching.len() != reference.params.len() {
        return Err(Error::InvalidInput(format!(
            "matching has {} momenta for {} reference control points",
            matching.len(),
            reference.params.len()
        )));
    }
    check_points(matching, "matching momenta")?;
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidInput("query times must be finite".into()));
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted)
}

/// The matching transported to reference time `t`, with the control points it
/// is attached to.
pub fn transported_matching(
    reference: &Geodesic,
    matching: &[Vec3],
    t_match: f64,
    t: f64,
    settings: &ParallelSettings,
) -> Result<Transported> {
    let job = settings.job(
        reference.params.clone(),
        matching.to_vec(),
        t_match - reference.t_ref,
        t - reference.t_ref,
    );
    transport_fanning(&job)
}

/// Exp-parallelization: at each time `t` the matching is transported to the
/// reference state at `t` and shot from there for unit time, deforming the
/// reference shape at `t`.
pub fn exp_parallelize(
    reference: &Geodesic,
    matching: &[Vec3],
    t_match: f64,
    times: &[f64],
    settings: &ParallelSettings,
) -> Result<ParallelTrajectory> {
    let sorted = check_matching(reference, matching, times)?;
    let sigma = reference.params.sigma_v;
    let samples = sorted
        .par_iter()
        .map(|&t| {
            let moved = transported_matching(reference, matching, t_match, t, settings)?;
            let base = reference_shape(reference, t, settings)?;
            let params = DeformationParams::new(moved.state.control_points, moved.w, sigma)?;
            let flow = shoot(&params, settings.matching_steps())?;
            Ok((t, flow_shape(&flow, &base)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParallelTrajectory {
        mode: ParallelMode::ExpParallel,
        reference: reference.clone(),
        matching: matching.to_vec(),
        t_match,
        samples,
        subject_geodesic: None,
    })
}

/// The subject geodesic of geodesic parallelization: the reference velocity at
/// `t_match` transported along the matching, starting from the matched shape.
pub fn geodesic_parallel_geodesic(
    reference: &Geodesic,
    matching: &[Vec3],
    t_match: f64,
    settings: &ParallelSettings,
) -> Result<Geodesic> {
    let sigma = reference.params.sigma_v;
    let at_match = matching_state(reference, t_match, settings)?;
    let matching_params = DeformationParams::new(at_match.control_points.clone(), matching.to_vec(), sigma)?;
    let flow = shoot(&matching_params, settings.matching_steps())?;
    let baseline = flow_shape(&flow, &reference_shape(reference, t_match, settings)?)?;
    let job = settings.job(matching_params, at_match.momenta, 0.0, 1.0);
    let moved = transport_fanning(&job)?;
    let params = DeformationParams::new(moved.state.control_points, moved.w, sigma)?;
    let (t_min, t_max) = (reference.t_min.min(t_match), reference.t_max.max(t_match));
    Geodesic::new(baseline, params, t_match, t_min, t_max)
}

/// Geodesic parallelization sampled at `times`.
pub fn geodesic_parallelize(
    reference: &Geodesic,
    matching: &[Vec3],
    t_match: f64,
    times: &[f64],
    settings: &ParallelSettings,
) -> Result<ParallelTrajectory> {
    let sorted = check_matching(reference, matching, times)?;
    let subject = geodesic_parallel_geodesic(reference, matching, t_match, settings)?;
    let samples = sorted
        .par_iter()
        .map(|&t| Ok((t, reference_shape(&subject, t, settings)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ParallelTrajectory {
        mode: ParallelMode::GeodesicParallel,
        reference: reference.clone(),
        matching: matching.to_vec(),
        t_match,
        samples,
        subject_geodesic: Some(subject),
    })
}

/// Evaluates a transfer at the given reference times.
pub fn parallelize(
    mode: ParallelMode,
    reference: &Geodesic,
    matching: &[Vec3],
    t_match: f64,
    times: &[f64],
    settings: &ParallelSettings,
) -> Result<ParallelTrajectory> {
    match mode {
        ParallelMode::ExpParallel => exp_parallelize(reference, matching, t_match, times, settings),
        ParallelMode::GeodesicParallel => geodesic_parallelize(reference, matching, t_match, times, settings),
    }
}
