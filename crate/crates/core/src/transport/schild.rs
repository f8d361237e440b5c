//! Schild's ladder on control-point configurations, used as an independent
//! check of the fanning scheme. Riemannian logarithms are solved by damped
//! Gauss-Newton on the shooting map with a finite-difference Jacobian.

use nalgebra::{DMatrix, DVector};

use super::{walk, TransportJob};
use crate::deformation::integrate;
use crate::error::{Error, Result};
use crate::kernel::{kernel_norm, solve_gram, Vec3};

const EXP_STEPS: usize = 16;
const LOG_MAX_ITERS: usize = 50;

fn exp(c: &[Vec3], m: &[Vec3], sigma: f64) -> Result<Vec<Vec3>> {
    let mut path = integrate(c, m, 1.0, EXP_STEPS, sigma)?;
    Ok(path.pop().expect("non-empty path").control_points)
}

fn flatten(v: &[Vec3]) -> DVector<f64> {
    DVector::from_iterator(3 * v.len(), v.iter().flat_map(|x| [x.x, x.y, x.z]))
}

fn unflatten(v: &DVector<f64>) -> Vec<Vec3> {
    (0..v.len() / 3).map(|i| Vec3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2])).collect()
}

/// Momenta `m` at `a` with `exp_a(m) = b`.
fn log(a: &[Vec3], b: &[Vec3], sigma: f64, rung: usize) -> Result<Vec<Vec3>> {
    let target = flatten(b);
    let residual = |m: &[Vec3]| -> Result<DVector<f64>> { Ok(flatten(&exp(a, m, sigma)?) - &target) };
    let diff: Vec<Vec3> = b.iter().zip(a).map(|(x, y)| x - y).collect();
    let mut m = solve_gram(a, &diff, sigma)?;
    let mut r = residual(&m)?;
    let scale = 1.0 + flatten(&diff).norm();
    let n = m.len() * 3;
    'outer: for _ in 0..LOG_MAX_ITERS {
        if r.norm() <= 1e-13 * scale {
            return Ok(m);
        }
        let x = flatten(&m);
        let step = 1e-6 * (1.0 + x.amax());
        let mut jac = DMatrix::zeros(n, n);
        for j in 0..n {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[j] += step;
            xm[j] -= step;
            let col = (flatten(&exp(a, &unflatten(&xp), sigma)?) - flatten(&exp(a, &unflatten(&xm), sigma)?)) / (2.0 * step);
            jac.set_column(j, &col);
        }
        let delta = jac
            .lu()
            .solve(&(-&r))
            .ok_or_else(|| Error::Validation(format!("singular shooting Jacobian in ladder rung {rung}")))?;
        let mut t = 1.0;
        loop {
            let cand = unflatten(&(&x + t * &delta));
            let rc = residual(&cand)?;
            if rc.norm() < r.norm() {
                m = cand;
                r = rc;
                break;
            }
            t *= 0.5;
            if t < 1e-6 {
                break 'outer;
            }
        }
    }
    if r.norm() <= 1e-9 * scale {
        Ok(m)
    } else {
        Err(stuck(rung))
    }
}

fn stuck(rung: usize) -> Error {
    Error::Divergence {
        step: rung,
        context: "logarithm did not converge in Schild's ladder".into(),
    }
}

/// Schild's ladder transport. Slow; meant for small configurations.
pub fn transport_schild(job: &TransportJob) -> Result<Vec<Vec3>> {
    job.validate()?;
    let sigma = job.params.sigma_v;
    let inv_s2 = job.params.inv_s2();
    let start = job.start()?;
    let n0 = kernel_norm(&start.control_points, &job.w, sigma);
    if job.s_to == job.s_from || n0 == 0.0 {
        return Ok(job.w.clone());
    }
    let h = job.rung_length();
    let len = h.abs();
    let mut state = start;
    let mut w = job.w.clone();
    for k in 0..job.rungs {
        let rung = k + 1;
        let next = walk(&state, h, 1, inv_s2)?;
        let x0 = &state.control_points;
        let x1 = &next.control_points;
        let scaled: Vec<Vec3> = w.iter().map(|v| v * len).collect();
        let p = exp(x0, &scaled, sigma)?;
        let to_x1 = log(&p, x1, sigma, rung)?;
        let half: Vec<Vec3> = to_x1.iter().map(|v| v * 0.5).collect();
        let mid = exp(&p, &half, sigma)?;
        let to_mid = log(x0, &mid, sigma, rung)?;
        let double: Vec<Vec3> = to_mid.iter().map(|v| v * 2.0).collect();
        let q = exp(x0, &double, sigma)?;
        w = log(x1, &q, sigma, rung)?.iter().map(|v| v / len).collect();
        state = next;
    }
    Ok(w)
}
