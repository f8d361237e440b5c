//! Gaussian reproducing kernel `K(x, y) = exp(-|x - y|^2 / sigma^2)` and the
//! sums built on it.
//!
//! Every other module funnels its kernel arithmetic through here, so the
//! convention (no factor 2 in the denominator) lives in exactly one place.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Below this many targets the sums run sequentially.
pub(crate) const PAR_THRESHOLD: usize = 512;

/// Kernel widths, in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Deformation kernel width.
    #[serde(rename = "sigma_V")]
    pub sigma_v: f64,
    /// Varifold kernel width.
    #[serde(rename = "sigma_W")]
    pub sigma_w: f64,
}

impl KernelConfig {
    pub fn new(sigma_v: f64, sigma_w: f64) -> Result<Self> {
        let cfg = Self { sigma_v, sigma_w };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_sigma(self.sigma_v)?;
        check_sigma(self.sigma_w)
    }
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            sigma_v: 5.0,
            sigma_w: 3.0,
        }
    }
}

pub(crate) fn check_sigma(sigma: f64) -> Result<()> {
    if sigma.is_finite() && sigma > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "kernel width must be positive and finite, got {sigma}"
        )))
    }
}

pub(crate) fn check_points(points: &[Vec3], what: &str) -> Result<()> {
    match points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
        None => Ok(()),
        Some(i) => Err(Error::InvalidInput(format!("{what}[{i}] is not finite"))),
    }
}

/// Unchecked kernel value from a squared distance and `1 / sigma^2`.
#[inline(always)]
pub(crate) fn gauss(d2: f64, inv_s2: f64) -> f64 {
    (-d2 * inv_s2).exp()
}

/// `K(x, y)` for a single pair of points.
pub fn eval_kernel(x: &Vec3, y: &Vec3, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    if !(x.iter().chain(y.iter()).all(|v| v.is_finite())) {
        return Err(Error::InvalidInput("non-finite kernel argument".into()));
    }
    Ok(gauss((x - y).norm_squared(), 1.0 / (sigma * sigma)))
}

fn check_conv_inputs(targets: &[Vec3], centers: &[Vec3], vectors: &[Vec3], sigma: f64) -> Result<()> {
    check_sigma(sigma)?;
    if centers.is_empty() {
        return Err(Error::InvalidInput("convolution needs at least one center".into()));
    }
    if centers.len() != vectors.len() {
        return Err(Error::InvalidInput(format!(
            "{} centers but {} vectors",
            centers.len(),
            vectors.len()
        )));
    }
    check_points(targets, "targets")?;
    check_points(centers, "centers")?;
    check_points(vectors, "vectors")
}

/// Velocity `v(x) = sum_k K(x, c_k) beta_k` at a single point.
#[inline]
pub(crate) fn field_at(x: &Vec3, centers: &[Vec3], vectors: &[Vec3], inv_s2: f64) -> Vec3 {
    let mut acc = Vec3::zeros();
    for (c, b) in centers.iter().zip(vectors) {
        acc += gauss((x - c).norm_squared(), inv_s2) * b;
    }
    acc
}

/// Unchecked convolution used on hot paths.
pub(crate) fn convolve_raw(targets: &[Vec3], centers: &[Vec3], vectors: &[Vec3], sigma: f64) -> Vec<Vec3> {
    let inv_s2 = 1.0 / (sigma * sigma);
    if targets.len() >= PAR_THRESHOLD {
        targets
            .par_iter()
            .map(|x| field_at(x, centers, vectors, inv_s2))
            .collect()
    } else {
        targets
            .iter()
            .map(|x| field_at(x, centers, vectors, inv_s2))
            .collect()
    }
}

/// Evaluates `sum_k K(target_i, c_k) beta_k` at every target.
pub fn convolve(targets: &[Vec3], centers: &[Vec3], vectors: &[Vec3], sigma: f64) -> Result<Vec<Vec3>> {
    check_conv_inputs(targets, centers, vectors, sigma)?;
    Ok(convolve_raw(targets, centers, vectors, sigma))
}

/// Jacobian of [`convolve`] with respect to each target: entry `(a, b)` is
/// `d v_a / d x_b`.
pub fn convolve_gradient(
    targets: &[Vec3],
    centers: &[Vec3],
    vectors: &[Vec3],
    sigma: f64,
) -> Result<Vec<Matrix3<f64>>> {
    check_conv_inputs(targets, centers, vectors, sigma)?;
    let inv_s2 = 1.0 / (sigma * sigma);
    let jac = |x: &Vec3| {
        let mut m = Matrix3::zeros();
        for (c, b) in centers.iter().zip(vectors) {
            let d = x - c;
            let k = gauss(d.norm_squared(), inv_s2);
            m += (-2.0 * inv_s2 * k) * b * d.transpose();
        }
        m
    };
    Ok(targets.iter().map(jac).collect())
}

/// Gram matrix `[K(x_i, x_j)]`.
pub fn gram_matrix(points: &[Vec3], sigma: f64) -> DMatrix<f64> {
    let n = points.len();
    let inv_s2 = 1.0 / (sigma * sigma);
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        g[(i, i)] = 1.0;
        for j in 0..i {
            let k = gauss((points[i] - points[j]).norm_squared(), inv_s2);
            g[(i, j)] = k;
            g[(j, i)] = k;
        }
    }
    g
}

/// Kernel (RKHS) inner product `sum_ij K(c_i, c_j) a_i . b_j` of two momenta
/// fields attached to the same points.
pub fn kernel_inner(points: &[Vec3], a: &[Vec3], b: &[Vec3], sigma: f64) -> f64 {
    let inv_s2 = 1.0 / (sigma * sigma);
    let mut acc = 0.0;
    for i in 0..points.len() {
        let mut row = Vec3::zeros();
        for j in 0..points.len() {
            row += gauss((points[i] - points[j]).norm_squared(), inv_s2) * b[j];
        }
        acc += a[i].dot(&row);
    }
    acc
}

/// Kernel norm `sqrt(<a, a>_K)`.
pub fn kernel_norm(points: &[Vec3], a: &[Vec3], sigma: f64) -> f64 {
    kernel_inner(points, a, a, sigma).max(0.0).sqrt()
}

/// Solves `K(points) x = rhs` for momenta `x` (velocities to momenta).
pub(crate) fn solve_gram(points: &[Vec3], rhs: &[Vec3], sigma: f64) -> Result<Vec<Vec3>> {
    let n = points.len();
    let mut g = gram_matrix(points, sigma);
    let b = DMatrix::from_fn(n, 3, |i, a| rhs[i][a]);
    let mut jitter = 0.0;
    for _ in 0..4 {
        if let Some(ch) = g.clone().cholesky() {
            let x = ch.solve(&b);
            return Ok((0..n).map(|i| Vec3::new(x[(i, 0)], x[(i, 1)], x[(i, 2)])).collect());
        }
        jitter = if jitter == 0.0 { 1e-12 } else { jitter * 100.0 };
        for i in 0..n {
            g[(i, i)] += jitter;
        }
    }
    Err(Error::Validation("kernel Gram matrix is singular (coincident control points)".into()))
}
