//! Nesterov-accelerated gradient descent with step halving.
//!
//! Each variable block (momenta, control points, template) carries its own
//! step size, initialized so that the first move displaces the most affected
//! point by `initial_step`. A trial that increases the objective halves every
//! step and restarts the momentum sequence; accepted iterates therefore never
//! increase the objective.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kernel::Vec3;

pub(crate) type Blocks = Vec<Vec<Vec3>>;

/// Optimizer knobs, a subset of [`super::FitConfig`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct Schedule {
    pub max_iters: usize,
    pub tolerance: f64,
    pub patience: usize,
    pub initial_step: f64,
    pub step_growth: f64,
}

/// One accepted iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    /// Step multiplier relative to the initial step sizes.
    pub step_scale: f64,
    /// Rejected trials since the previous accepted iterate.
    pub halvings: usize,
}

pub(crate) struct Outcome {
    pub x: Blocks,
    pub objective: f64,
    pub log: Vec<IterationRecord>,
    pub converged: bool,
}

const MAX_CONSECUTIVE_HALVINGS: usize = 40;

fn max_norm(v: &[Vec3]) -> f64 {
    v.iter().map(|x| x.norm()).fold(0.0, f64::max)
}

pub(crate) fn minimize<V, G>(x0: Blocks, active: &[bool], schedule: Schedule, mut value: V, mut value_grad: G) -> Result<Outcome>
where
    V: FnMut(&Blocks) -> Result<f64>,
    G: FnMut(&Blocks) -> Result<(f64, Blocks)>,
{
    let (f0, g0) = value_grad(&x0)?;
    let base: Vec<f64> = g0
        .iter()
        .zip(active)
        .map(|(g, &on)| {
            let m = max_norm(g);
            if on && m > 0.0 {
                schedule.initial_step / m
            } else {
                0.0
            }
        })
        .collect();
    let mut log = vec![IterationRecord {
        iteration: 0,
        objective: f0,
        step_scale: 1.0,
        halvings: 0,
    }];
    if base.iter().all(|&s| s == 0.0) {
        return Ok(Outcome {
            x: x0,
            objective: f0,
            log,
            converged: true,
        });
    }

    let mut x = x0;
    let mut x_prev = x.clone();
    let mut f = f0;
    let mut grad_x = Some(g0);
    let mut scale = 1.0;
    let mut k = 1usize;
    let mut quiet = 0usize;
    let mut halvings = 0usize;
    let mut converged = false;

    for iter in 1..=schedule.max_iters {
        let coef = (k as f64 - 1.0) / (k as f64 + 2.0);
        let (y, g_y) = if coef == 0.0 {
            let g = match grad_x.take() {
                Some(g) => g,
                None => value_grad(&x)?.1,
            };
            grad_x = Some(g.clone());
            (x.clone(), g)
        } else {
            let y: Blocks = x
                .iter()
                .zip(&x_prev)
                .zip(active)
                .map(|((a, b), &on)| {
                    if on {
                        a.iter().zip(b).map(|(p, q)| p + coef * (p - q)).collect()
                    } else {
                        a.clone()
                    }
                })
                .collect();
            let g = value_grad(&y)?.1;
            (y, g)
        };

        let x_new: Blocks = y
            .iter()
            .zip(&g_y)
            .zip(&base)
            .map(|((yb, gb), &s)| {
                if s == 0.0 {
                    yb.clone()
                } else {
                    yb.iter().zip(gb).map(|(p, g)| p - (s * scale) * g).collect()
                }
            })
            .collect();
        let f_new = match value(&x_new) {
            Ok(v) if v.is_finite() => v,
            Ok(_) => f64::INFINITY,
            Err(e) if e.is_divergence() => f64::INFINITY,
            Err(e) => return Err(e),
        };

        if f_new <= f {
            let rel = (f - f_new) / f.abs().max(f64::MIN_POSITIVE);
            x_prev = std::mem::replace(&mut x, x_new);
            f = f_new;
            grad_x = None;
            k += 1;
            log.push(IterationRecord {
                iteration: iter,
                objective: f,
                step_scale: scale,
                halvings,
            });
            halvings = 0;
            scale *= schedule.step_growth;
            quiet = if rel < schedule.tolerance { quiet + 1 } else { 0 };
            if quiet >= schedule.patience || f == 0.0 {
                converged = true;
                break;
            }
        } else {
            scale *= 0.5;
            halvings += 1;
            k = 1;
            x_prev = x.clone();
            if halvings >= MAX_CONSECUTIVE_HALVINGS {
                // No descent left at any representable step.
                converged = true;
                break;
            }
        }
    }
    Ok(Outcome {
        x,
        objective: f,
        log,
        converged,
    })
}
