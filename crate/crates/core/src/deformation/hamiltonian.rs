//! Kernel cotangent dynamics of control points and momenta, and their
//! vector-Jacobian products.
//!
//! With `H(c, b) = 1/2 sum_ij b_i . b_j K(c_i, c_j)`:
//!
//! ```text
//! dc_i/ds =  dH/db_i = sum_j K(c_i, c_j) b_j
//! db_i/ds = -dH/dc_i = (2 / sigma^2) sum_j (b_i . b_j) K(c_i, c_j) (c_i - c_j)
//! ```

use crate::kernel::{gauss, Vec3};

/// Kinetic energy `1/2 b^T K(c, c) b`.
pub fn hamiltonian(control_points: &[Vec3], momenta: &[Vec3], sigma_v: f64) -> f64 {
    0.5 * crate::kernel::kernel_inner(control_points, momenta, momenta, sigma_v)
}

/// Right-hand side of the Hamiltonian system.
pub(crate) fn field(c: &[Vec3], b: &[Vec3], inv_s2: f64) -> (Vec<Vec3>, Vec<Vec3>) {
    let p = c.len();
    let g = 2.0 * inv_s2;
    let mut dc = b.to_vec();
    let mut db = vec![Vec3::zeros(); p];
    for i in 0..p {
        for j in 0..i {
            let d = c[i] - c[j];
            let k = gauss(d.norm_squared(), inv_s2);
            dc[i] += k * b[j];
            dc[j] += k * b[i];
            let f = g * k * b[i].dot(&b[j]);
            db[i] += f * d;
            db[j] -= f * d;
        }
    }
    (dc, db)
}

/// `dH/dc`, the negated momentum derivative.
pub(crate) fn dh_dc(c: &[Vec3], b: &[Vec3], inv_s2: f64) -> Vec<Vec3> {
    field(c, b, inv_s2).1.into_iter().map(|v| -v).collect()
}

/// Pulls cotangents `(gc, gb)` on the field output back onto `(c, b)`.
pub(crate) fn field_vjp(c: &[Vec3], b: &[Vec3], gc: &[Vec3], gb: &[Vec3], inv_s2: f64) -> (Vec<Vec3>, Vec<Vec3>) {
    let p = c.len();
    let g = 2.0 * inv_s2;
    let mut ac = vec![Vec3::zeros(); p];
    let mut ab = gc.to_vec();
    for i in 0..p {
        for j in 0..p {
            if i == j {
                continue;
            }
            let d = c[i] - c[j];
            let k = gauss(d.norm_squared(), inv_s2);
            // velocity term
            ab[j] += k * gc[i];
            let s = gc[i].dot(&b[j]);
            let t1 = (g * k * s) * d;
            ac[i] -= t1;
            ac[j] += t1;
            // momentum term
            let q = gb[i].dot(&d);
            let pij = b[i].dot(&b[j]);
            ab[i] += (g * k * q) * b[j];
            ab[j] += (g * k * q) * b[i];
            let t2 = (g * pij) * (k * gb[i] - (g * k * q) * d);
            ac[i] += t2;
            ac[j] -= t2;
        }
    }
    (ac, ab)
}

/// Velocity of every point under the field carried by `(c, b)`.
pub(crate) fn point_field(x: &[Vec3], c: &[Vec3], b: &[Vec3], inv_s2: f64) -> Vec<Vec3> {
    let one = |p: &Vec3| crate::kernel::field_at(p, c, b, inv_s2);
    if x.len() >= crate::kernel::PAR_THRESHOLD {
        use rayon::prelude::*;
        x.par_iter().map(one).collect()
    } else {
        x.iter().map(one).collect()
    }
}

/// Cotangents on `x`, `c` and `b` from a cotangent `gx` on [`point_field`].
pub(crate) fn point_field_vjp(
    x: &[Vec3],
    c: &[Vec3],
    b: &[Vec3],
    gx: &[Vec3],
    inv_s2: f64,
) -> (Vec<Vec3>, Vec<Vec3>, Vec<Vec3>) {
    let g = 2.0 * inv_s2;
    let mut ax = vec![Vec3::zeros(); x.len()];
    let mut ac = vec![Vec3::zeros(); c.len()];
    let mut ab = vec![Vec3::zeros(); c.len()];
    for (v, (xv, gv)) in x.iter().zip(gx).enumerate() {
        if gv.x == 0.0 && gv.y == 0.0 && gv.z == 0.0 {
            continue;
        }
        for k in 0..c.len() {
            let d = xv - c[k];
            let kv = gauss(d.norm_squared(), inv_s2);
            let s = gv.dot(&b[k]);
            let t = (g * kv * s) * d;
            ax[v] -= t;
            ac[k] += t;
            ab[k] += kv * gv;
        }
    }
    (ax, ac, ab)
}
