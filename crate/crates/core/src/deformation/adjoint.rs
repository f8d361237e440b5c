//! Reverse accumulation through the discrete RK4 shooting and vertex flow.
//!
//! The forward computations in the parent module are differentiated exactly,
//! so gradients agree with finite differences of the discretized objective.

use super::{axpy, field, field_vjp, point_field, point_field_vjp, State};
use crate::kernel::Vec3;

/// Cotangent on one [`State`].
#[derive(Debug, Clone)]
pub(crate) struct StateBar {
    pub c: Vec<Vec3>,
    pub b: Vec<Vec3>,
}

impl StateBar {
    pub fn zeros(p: usize) -> Self {
        Self {
            c: vec![Vec3::zeros(); p],
            b: vec![Vec3::zeros(); p],
        }
    }

    fn add(&mut self, c: &[Vec3], b: &[Vec3], w: f64) {
        for (x, y) in self.c.iter_mut().zip(c) {
            *x += w * y;
        }
        for (x, y) in self.b.iter_mut().zip(b) {
            *x += w * y;
        }
    }
}

fn add_into(acc: &mut [Vec3], v: &[Vec3], w: f64) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += w * x;
    }
}

/// Back-propagates a cotangent on the final vertex positions of
/// [`super::flow_trajectory`]. Cotangents on path states are accumulated into
/// `path_bar`; the cotangent on the initial vertices is returned.
pub(crate) fn flow_adjoint(
    path: &[State],
    h: f64,
    traj: &[Vec<Vec3>],
    x_bar_end: Vec<Vec3>,
    inv_s2: f64,
    path_bar: &mut [StateBar],
) -> Vec<Vec3> {
    let mut x_bar = x_bar_end;
    for k in (0..path.len() - 1).rev() {
        let (s0, s1) = (&path[k], &path[k + 1]);
        let cm: Vec<Vec3> = s0.control_points.iter().zip(&s1.control_points).map(|(a, b)| (a + b) / 2.0).collect();
        let bm: Vec<Vec3> = s0.momenta.iter().zip(&s1.momenta).map(|(a, b)| (a + b) / 2.0).collect();
        let x = &traj[k];
        let y1 = x.clone();
        let g1 = point_field(&y1, &s0.control_points, &s0.momenta, inv_s2);
        let y2 = axpy(x, h / 2.0, &g1);
        let g2 = point_field(&y2, &cm, &bm, inv_s2);
        let y3 = axpy(x, h / 2.0, &g2);
        let g3 = point_field(&y3, &cm, &bm, inv_s2);
        let y4 = axpy(x, h, &g3);

        let mut acc = x_bar.clone();
        let g4_bar: Vec<Vec3> = x_bar.iter().map(|v| (h / 6.0) * v).collect();
        let mut g3_bar: Vec<Vec3> = x_bar.iter().map(|v| (h / 3.0) * v).collect();
        let mut g2_bar = g3_bar.clone();
        let mut g1_bar = g4_bar.clone();

        let (y4b, c4b, b4b) = point_field_vjp(&y4, &s1.control_points, &s1.momenta, &g4_bar, inv_s2);
        path_bar[k + 1].add(&c4b, &b4b, 1.0);
        add_into(&mut acc, &y4b, 1.0);
        add_into(&mut g3_bar, &y4b, h);

        let (y3b, c3b, b3b) = point_field_vjp(&y3, &cm, &bm, &g3_bar, inv_s2);
        path_bar[k].add(&c3b, &b3b, 0.5);
        path_bar[k + 1].add(&c3b, &b3b, 0.5);
        add_into(&mut acc, &y3b, 1.0);
        add_into(&mut g2_bar, &y3b, h / 2.0);

        let (y2b, c2b, b2b) = point_field_vjp(&y2, &cm, &bm, &g2_bar, inv_s2);
        path_bar[k].add(&c2b, &b2b, 0.5);
        path_bar[k + 1].add(&c2b, &b2b, 0.5);
        add_into(&mut acc, &y2b, 1.0);
        add_into(&mut g1_bar, &y2b, h / 2.0);

        let (y1b, c1b, b1b) = point_field_vjp(&y1, &s0.control_points, &s0.momenta, &g1_bar, inv_s2);
        path_bar[k].add(&c1b, &b1b, 1.0);
        add_into(&mut acc, &y1b, 1.0);

        x_bar = acc;
    }
    x_bar
}

fn rk4_vjp(s: &State, h: f64, out_bar: &StateBar, inv_s2: f64) -> StateBar {
    let (c, b) = (&s.control_points, &s.momenta);
    let (k1c, k1b) = field(c, b, inv_s2);
    let (z2c, z2b) = (axpy(c, h / 2.0, &k1c), axpy(b, h / 2.0, &k1b));
    let (k2c, k2b) = field(&z2c, &z2b, inv_s2);
    let (z3c, z3b) = (axpy(c, h / 2.0, &k2c), axpy(b, h / 2.0, &k2b));
    let (k3c, k3b) = field(&z3c, &z3b, inv_s2);
    let (z4c, z4b) = (axpy(c, h, &k3c), axpy(b, h, &k3b));

    let scale = |v: &[Vec3], w: f64| -> Vec<Vec3> { v.iter().map(|x| w * x).collect() };
    let mut acc = out_bar.clone();
    let (k4c_bar, k4b_bar) = (scale(&out_bar.c, h / 6.0), scale(&out_bar.b, h / 6.0));
    let (mut k3c_bar, mut k3b_bar) = (scale(&out_bar.c, h / 3.0), scale(&out_bar.b, h / 3.0));
    let (mut k2c_bar, mut k2b_bar) = (k3c_bar.clone(), k3b_bar.clone());
    let (mut k1c_bar, mut k1b_bar) = (k4c_bar.clone(), k4b_bar.clone());

    let (z4c_bar, z4b_bar) = field_vjp(&z4c, &z4b, &k4c_bar, &k4b_bar, inv_s2);
    acc.add(&z4c_bar, &z4b_bar, 1.0);
    add_into(&mut k3c_bar, &z4c_bar, h);
    add_into(&mut k3b_bar, &z4b_bar, h);

    let (z3c_bar, z3b_bar) = field_vjp(&z3c, &z3b, &k3c_bar, &k3b_bar, inv_s2);
    acc.add(&z3c_bar, &z3b_bar, 1.0);
    add_into(&mut k2c_bar, &z3c_bar, h / 2.0);
    add_into(&mut k2b_bar, &z3b_bar, h / 2.0);

    let (z2c_bar, z2b_bar) = field_vjp(&z2c, &z2b, &k2c_bar, &k2b_bar, inv_s2);
    acc.add(&z2c_bar, &z2b_bar, 1.0);
    add_into(&mut k1c_bar, &z2c_bar, h / 2.0);
    add_into(&mut k1b_bar, &z2b_bar, h / 2.0);

    let (z1c_bar, z1b_bar) = field_vjp(c, b, &k1c_bar, &k1b_bar, inv_s2);
    acc.add(&z1c_bar, &z1b_bar, 1.0);
    acc
}

/// Folds per-state cotangents back to the initial state of the shot.
pub(crate) fn shoot_adjoint(path: &[State], h: f64, inv_s2: f64, path_bar: Vec<StateBar>) -> StateBar {
    let n = path.len() - 1;
    let mut bars = path_bar;
    let mut z_bar = bars[n].clone();
    for k in (0..n).rev() {
        let mut prev = rk4_vjp(&path[k], h, &z_bar, inv_s2);
        let own = std::mem::replace(&mut bars[k], StateBar::zeros(0));
        prev.add(&own.c, &own.b, 1.0);
        z_bar = prev;
    }
    z_bar
}

#[cfg(test)]
mod tests {
    use super::super::{flow_trajectory, integrate};
    use super::*;

    fn objective(c0: &[Vec3], b0: &[Vec3], x0: &[Vec3], w: &[Vec3], sigma: f64) -> f64 {
        let path = integrate(c0, b0, 1.0, 4, sigma).unwrap();
        let traj = flow_trajectory(&path, 0.25, x0, 1.0 / (sigma * sigma)).unwrap();
        traj.last().unwrap().iter().zip(w).map(|(x, y)| x.dot(y)).sum()
    }

    #[test]
    fn flow_and_shoot_adjoint_match_finite_differences() {
        let sigma = 2.0;
        let inv = 1.0 / (sigma * sigma);
        let c0 = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.5, 0.5, -0.2), Vec3::new(-1.0, 1.0, 0.8)];
        let b0 = vec![Vec3::new(0.4, -0.2, 0.1), Vec3::new(-0.3, 0.5, 0.2), Vec3::new(0.1, 0.2, -0.6)];
        let x0 = vec![Vec3::new(0.5, 0.2, 0.1), Vec3::new(-0.7, 0.4, 1.1)];
        let w = vec![Vec3::new(1.0, -0.5, 0.3), Vec3::new(0.2, 0.8, -0.4)];

        let path = integrate(&c0, &b0, 1.0, 4, sigma).unwrap();
        let traj = flow_trajectory(&path, 0.25, &x0, inv).unwrap();
        let mut bars = vec![StateBar::zeros(3); path.len()];
        let xb = flow_adjoint(&path, 0.25, &traj, w.clone(), inv, &mut bars);
        let zb = shoot_adjoint(&path, 0.25, inv, bars);

        let eps = 1e-6;
        for i in 0..3 {
            for a in 0..3 {
                let mut p = b0.clone();
                let mut m = b0.clone();
                p[i][a] += eps;
                m[i][a] -= eps;
                let fd = (objective(&c0, &p, &x0, &w, sigma) - objective(&c0, &m, &x0, &w, sigma)) / (2.0 * eps);
                assert!((fd - zb.b[i][a]).abs() < 1e-7, "b {i}{a}: {fd} vs {}", zb.b[i][a]);
                let mut p = c0.clone();
                let mut m = c0.clone();
                p[i][a] += eps;
                m[i][a] -= eps;
                let fd = (objective(&p, &b0, &x0, &w, sigma) - objective(&m, &b0, &x0, &w, sigma)) / (2.0 * eps);
                assert!((fd - zb.c[i][a]).abs() < 1e-7, "c {i}{a}: {fd} vs {}", zb.c[i][a]);
            }
        }
        for v in 0..2 {
            for a in 0..3 {
                let mut p = x0.clone();
                let mut m = x0.clone();
                p[v][a] += eps;
                m[v][a] -= eps;
                let fd = (objective(&c0, &b0, &p, &w, sigma) - objective(&c0, &b0, &m, &w, sigma)) / (2.0 * eps);
                assert!((fd - xb[v][a]).abs() < 1e-7);
            }
        }
    }
}
