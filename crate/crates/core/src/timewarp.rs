//! Affine time reparametrization `psi(t) = alpha (t - t0 - tau) + t0` and its
//! estimation from scalar score series against a logistic reference curve.

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deformation::{shape_at, steps_for, Geodesic};
use crate::error::{Error, Result};
use crate::mesh::ShapeComplex;
use crate::transport::ParallelTrajectory;

/// Smallest Jacobian singular value for which a fitted warp is trusted.
pub const IDENTIFIABILITY_TOL: f64 = 1e-6;

const ALPHA_GRID: (f64, f64, usize) = (0.1, 10.0, 40);
const TAU_GRID: (f64, f64, usize) = (-25.0, 25.0, 100);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeWarp {
    pub alpha: f64,
    pub tau: f64,
    pub t0: f64,
}

impl TimeWarp {
    pub fn new(alpha: f64, tau: f64, t0: f64) -> Result<Self> {
        let w = Self { alpha, tau, t0 };
        w.validate()?;
        Ok(w)
    }

    pub fn identity(t0: f64) -> Self {
        Self { alpha: 1.0, tau: 0.0, t0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) || !self.tau.is_finite() || !self.t0.is_finite() {
            return Err(Error::InvalidInput(format!(
                "invalid time warp: alpha = {}, tau = {}, t0 = {}",
                self.alpha, self.tau, self.t0
            )));
        }
        Ok(())
    }

    pub fn psi(&self, t: f64) -> f64 {
        self.alpha * (t - self.t0 - self.tau) + self.t0
    }

    pub fn psi_inverse(&self, u: f64) -> f64 {
        (u - self.t0) / self.alpha + self.t0 + self.tau
    }

    /// The warp `u -> psi_inverse(u)`, with the same `t0`.
    pub fn inverse(&self) -> Self {
        Self {
            alpha: 1.0 / self.alpha,
            tau: -self.alpha * self.tau,
            t0: self.t0,
        }
    }

    /// The warp `t -> self.psi(inner.psi(t))`, expressed with `self.t0`.
    pub fn after(&self, inner: &TimeWarp) -> Self {
        let alpha = self.alpha * inner.alpha;
        let offset = self.psi(inner.psi(0.0));
        Self {
            alpha,
            tau: (self.t0 - offset) / alpha - self.t0,
            t0: self.t0,
        }
    }
}

pub fn psi(t: f64, warp: &TimeWarp) -> f64 {
    warp.psi(t)
}

pub fn psi_inverse(u: f64, warp: &TimeWarp) -> f64 {
    warp.psi_inverse(u)
}

/// Normalized scores of one subject, in increasing time order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    points: Vec<(f64, f64)>,
}

impl ScoreSeries {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidInput(format!("a score series needs at least 2 points, got {}", points.len())));
        }
        if points.iter().any(|(t, s)| !t.is_finite() || !s.is_finite()) {
            return Err(Error::InvalidInput("score series contains non-finite values".into()));
        }
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidInput("score times must be strictly increasing".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// The same scores observed `delta` years later.
    pub fn shifted(&self, delta: f64) -> Self {
        Self {
            points: self.points.iter().map(|&(t, s)| (t + delta, s)).collect(),
        }
    }
}

/// Linear map of raw instrument scores onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreNormalization {
    pub min: f64,
    pub max: f64,
}

impl Default for ScoreNormalization {
    fn default() -> Self {
        Self { min: 0.0, max: 1.0 }
    }
}

impl ScoreNormalization {
    pub fn validate(&self) -> Result<()> {
        if !(self.min < self.max) || !self.min.is_finite() || !self.max.is_finite() {
            return Err(Error::Config(format!("score range [{}, {}] is empty", self.min, self.max)));
        }
        Ok(())
    }

    pub fn apply(&self, raw: f64) -> f64 {
        (raw - self.min) / (self.max - self.min)
    }
}

/// Logistic progression curve `floor + (ceiling - floor) / (1 + exp(-(t - t_mid) / scale))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCurve {
    pub t_mid: f64,
    pub scale: f64,
    pub floor: f64,
    pub ceiling: f64,
}

impl Default for ReferenceCurve {
    fn default() -> Self {
        Self {
            t_mid: 75.0,
            scale: 3.0,
            floor: 0.0,
            ceiling: 1.0,
        }
    }
}

impl ReferenceCurve {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !(self.floor < self.ceiling) || !self.t_mid.is_finite() || !self.ceiling.is_finite() {
            return Err(Error::Config(format!("invalid reference curve {self:?}")));
        }
        Ok(())
    }

    pub fn value(&self, u: f64) -> f64 {
        self.floor + (self.ceiling - self.floor) / (1.0 + (-(u - self.t_mid) / self.scale).exp())
    }

    pub fn derivative(&self, u: f64) -> f64 {
        let e = (-(u - self.t_mid) / self.scale).exp();
        if !e.is_finite() {
            return 0.0;
        }
        (self.ceiling - self.floor) * e / (self.scale * (1.0 + e) * (1.0 + e))
    }
}

/// A fitted warp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarpFit {
    #[serde(flatten)]
    pub warp: TimeWarp,
    pub identifiable: bool,
    /// Sum of squared score residuals at the returned warp.
    pub sse: f64,
}

fn sse(series: &ScoreSeries, curve: &ReferenceCurve, warp: &TimeWarp) -> f64 {
    series
        .points
        .iter()
        .map(|&(t, s)| {
            let r = s - curve.value(warp.psi(t));
            r * r
        })
        .sum()
}

fn linspace(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> + Clone {
    (0..n).map(move |i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
}

/// Residuals and Jacobian with respect to `(ln alpha, tau)`.
fn residuals(series: &ScoreSeries, curve: &ReferenceCurve, warp: &TimeWarp) -> (Vec<f64>, Vec<[f64; 2]>) {
    series
        .points
        .iter()
        .map(|&(t, s)| {
            let u = warp.psi(t);
            let d = curve.derivative(u);
            (s - curve.value(u), [-d * warp.alpha * (t - warp.t0 - warp.tau), d * warp.alpha])
        })
        .unzip()
}

fn normal_equations(r: &[f64], j: &[[f64; 2]]) -> (Matrix2<f64>, Vector2<f64>) {
    let mut jtj = Matrix2::zeros();
    let mut jtr = Vector2::zeros();
    for (ri, ji) in r.iter().zip(j) {
        let g = Vector2::new(ji[0], ji[1]);
        jtj += g * g.transpose();
        jtr += g * *ri;
    }
    (jtj, jtr)
}

/// Least-squares fit of `(alpha, tau)`: log-grid search then Levenberg-Marquardt
/// on `(ln alpha, tau)`.
pub fn fit_timewarp(series: &ScoreSeries, curve: &ReferenceCurve, t0: f64) -> Result<WarpFit> {
    curve.validate()?;
    if !t0.is_finite() {
        return Err(Error::InvalidInput("t0 must be finite".into()));
    }
    let alphas: Vec<f64> = linspace(ALPHA_GRID.0.ln(), ALPHA_GRID.1.ln(), ALPHA_GRID.2).map(f64::exp).collect();
    let taus: Vec<f64> = linspace(TAU_GRID.0, TAU_GRID.1, TAU_GRID.2).collect();
    let best = (0..alphas.len() * taus.len())
        .into_par_iter()
        .map(|k| {
            let w = TimeWarp {
                alpha: alphas[k / taus.len()],
                tau: taus[k % taus.len()],
                t0,
            };
            (sse(series, curve, &w), k)
        })
        .reduce(|| (f64::INFINITY, usize::MAX), |a, b| if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a });
    let mut warp = TimeWarp {
        alpha: alphas[best.1 / taus.len()],
        tau: taus[best.1 % taus.len()],
        t0,
    };
    let mut f = best.0;

    let mut lambda = 1e-3;
    for _ in 0..200 {
        let (r, j) = residuals(series, curve, &warp);
        let (jtj, jtr) = normal_equations(&r, &j);
        let mut improved = false;
        while lambda < 1e12 {
            let damped = jtj + Matrix2::from_diagonal(&jtj.diagonal().map(|d| lambda * d.max(1e-12)));
            let Some(step) = damped.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let cand = TimeWarp {
                alpha: (warp.alpha.ln() + step[0]).exp(),
                tau: warp.tau + step[1],
                t0,
            };
            let fc = sse(series, curve, &cand);
            if fc < f {
                let small = step[0].abs() < 1e-14 && step[1].abs() < 1e-12;
                warp = cand;
                f = fc;
                lambda = (lambda / 10.0).max(1e-12);
                improved = !small;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }

    let (_, j) = residuals(series, curve, &warp);
    let (jtj, _) = normal_equations(&vec![0.0; j.len()], &j);
    let sigma_min = jtj.symmetric_eigenvalues().min().max(0.0).sqrt();
    if !(sigma_min > IDENTIFIABILITY_TOL) {
        let identity = TimeWarp::identity(t0);
        return Ok(WarpFit {
            warp: identity,
            identifiable: false,
            sse: sse(series, curve, &identity),
        });
    }
    Ok(WarpFit {
        warp,
        identifiable: true,
        sse: f,
    })
}

/// Something that yields a shape at any reference time.
#[derive(Debug, Clone, Copy)]
pub enum Trajectory<'a> {
    /// Evaluated by shooting; extrapolates freely.
    Geodesic { geodesic: &'a Geodesic, steps_per_year: f64 },
    /// Linear interpolation between stored samples; no extrapolation.
    Sampled(&'a ParallelTrajectory),
}

impl Trajectory<'_> {
    pub fn evaluate(&self, u: f64) -> Result<ShapeComplex> {
        match self {
            Trajectory::Geodesic {
                geodesic,
                steps_per_year,
            } => shape_at(geodesic, u, steps_for(u - geodesic.t_ref, *steps_per_year)),
            Trajectory::Sampled(traj) => interpolate(&traj.samples, u),
        }
    }
}

fn interpolate(samples: &[(f64, ShapeComplex)], u: f64) -> Result<ShapeComplex> {
    const SNAP: f64 = 1e-9;
    let (Some(first), Some(last)) = (samples.first(), samples.last()) else {
        return Err(Error::InvalidInput("trajectory has no samples".into()));
    };
    if !(u >= first.0 - SNAP && u <= last.0 + SNAP) {
        return Err(Error::OutOfRange {
            time: u,
            min: first.0,
            max: last.0,
        });
    }
    if let Some((_, s)) = samples.iter().find(|(t, _)| (t - u).abs() <= SNAP) {
        return Ok(s.clone());
    }
    let k = samples.partition_point(|(t, _)| *t < u);
    let ((t0, a), (t1, b)) = (&samples[k - 1], &samples[k]);
    let x = (u - t0) / (t1 - t0);
    let (va, vb) = (a.flat_vertices(), b.flat_vertices());
    let v: Vec<_> = va.iter().zip(&vb).map(|(p, q)| p + x * (q - p)).collect();
    Ok(a.with_flat_vertices(&v))
}

/// Shapes at subject times `query_times`, read from the trajectory at `psi(t)`.
pub fn reparametrize_trajectory(
    traj: Trajectory<'_>,
    warp: &TimeWarp,
    query_times: &[f64],
) -> Result<Vec<(f64, ShapeComplex)>> {
    warp.validate()?;
    query_times
        .par_iter()
        .map(|&t| Ok((t, traj.evaluate(warp.psi(t))?)))
        .collect()
}
