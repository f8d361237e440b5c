//! Unoriented varifold inner product between triangle meshes.
//!
//! Each face is a Dirac at its centroid carrying its area-weighted normal `n`.
//! Two faces interact through `K(c_f, c_g) (n_f . n_g)^2 / (|n_f| |n_g|)`,
//! which is blind to orientation and needs no point correspondence.

use crate::error::Result;
use crate::kernel::{check_sigma, gauss, Vec3};
use crate::mesh::{face_data, Mesh, ShapeComplex};

/// Faces whose normal is shorter than this are treated as degenerate.
const MIN_NORMAL: f64 = 1e-14;

#[derive(Debug, Clone)]
pub(crate) struct FaceSet {
    centroids: Vec<Vec3>,
    normals: Vec<Vec3>,
    norms: Vec<f64>,
}

impl FaceSet {
    pub(crate) fn new(vertices: &[Vec3], triangles: &[[usize; 3]]) -> Self {
        let fd = face_data(vertices, triangles);
        let mut degenerate = 0usize;
        let norms = fd
            .iter()
            .map(|(_, n)| {
                let l = n.norm();
                if l < MIN_NORMAL {
                    degenerate += 1;
                }
                l
            })
            .collect();
        if degenerate > 0 {
            log::warn!("{degenerate} zero-area face(s) ignored by the varifold metric");
        }
        let (centroids, normals) = fd.into_iter().unzip();
        Self {
            centroids,
            normals,
            norms,
        }
    }

    fn of(mesh: &Mesh) -> Self {
        Self::new(&mesh.vertices, &mesh.triangles)
    }
}

pub(crate) fn inner_faces(a: &FaceSet, b: &FaceSet, inv_s2: f64) -> f64 {
    let mut total = 0.0;
    for f in 0..a.centroids.len() {
        let na = a.norms[f];
        if na < MIN_NORMAL {
            continue;
        }
        let (ca, va) = (a.centroids[f], a.normals[f]);
        let mut acc = 0.0;
        for g in 0..b.centroids.len() {
            let nb = b.norms[g];
            if nb < MIN_NORMAL {
                continue;
            }
            let dot = va.dot(&b.normals[g]);
            acc += gauss((ca - b.centroids[g]).norm_squared(), inv_s2) * dot * dot / nb;
        }
        total += acc / na;
    }
    total
}

/// Gradient of `<A, B>` with respect to the vertices of `A`, `B` held fixed.
pub(crate) fn inner_gradient(
    vertices: &[Vec3],
    triangles: &[[usize; 3]],
    a: &FaceSet,
    b: &FaceSet,
    inv_s2: f64,
) -> Vec<Vec3> {
    let mut grad = vec![Vec3::zeros(); vertices.len()];
    for (f, tri) in triangles.iter().enumerate() {
        let na = a.norms[f];
        if na < MIN_NORMAL {
            continue;
        }
        let (ca, va) = (a.centroids[f], a.normals[f]);
        let mut g_c = Vec3::zeros();
        let mut g_n = Vec3::zeros();
        for g in 0..b.centroids.len() {
            let nb = b.norms[g];
            if nb < MIN_NORMAL {
                continue;
            }
            let vb = b.normals[g];
            let d = ca - b.centroids[g];
            let k = gauss(d.norm_squared(), inv_s2);
            let dot = va.dot(&vb);
            let phi = dot * dot / (na * nb);
            g_c -= (2.0 * inv_s2 * k * phi) * d;
            g_n += k * ((2.0 * dot / (na * nb)) * vb - (dot * dot / (na * na * na * nb)) * va);
        }
        let [i0, i1, i2] = *tri;
        let (p0, p1, p2) = (vertices[i0], vertices[i1], vertices[i2]);
        let gc3 = g_c / 3.0;
        grad[i0] += gc3 + 0.5 * g_n.cross(&(p2 - p1));
        grad[i1] += gc3 + 0.5 * g_n.cross(&(p0 - p2));
        grad[i2] += gc3 + 0.5 * g_n.cross(&(p1 - p0));
    }
    grad
}

/// Varifold inner product `<A, B>`.
pub fn varifold_inner(a: &Mesh, b: &Mesh, sigma_w: f64) -> Result<f64> {
    check_sigma(sigma_w)?;
    a.validate()?;
    b.validate()?;
    Ok(inner_faces(&FaceSet::of(a), &FaceSet::of(b), 1.0 / (sigma_w * sigma_w)))
}

/// Squared varifold distance `<A,A> - 2<A,B> + <B,B>`, clamped at zero.
pub fn varifold_distance2(a: &Mesh, b: &Mesh, sigma_w: f64) -> Result<f64> {
    check_sigma(sigma_w)?;
    a.validate()?;
    b.validate()?;
    let inv_s2 = 1.0 / (sigma_w * sigma_w);
    let (fa, fb) = (FaceSet::of(a), FaceSet::of(b));
    let d2 = inner_faces(&fa, &fa, inv_s2) - 2.0 * inner_faces(&fa, &fb, inv_s2) + inner_faces(&fb, &fb, inv_s2);
    Ok(d2.max(0.0))
}

/// A fixed target complex with its face data and self-products precomputed,
/// ready to be compared against many deformed complexes of the same labels.
#[derive(Debug, Clone)]
pub struct ComplexVarifold {
    faces: Vec<FaceSet>,
    self_inner: Vec<f64>,
    labels: Vec<String>,
    inv_s2: f64,
}

impl ComplexVarifold {
    pub fn new(target: &ShapeComplex, sigma_w: f64) -> Result<Self> {
        check_sigma(sigma_w)?;
        let inv_s2 = 1.0 / (sigma_w * sigma_w);
        let faces: Vec<FaceSet> = target.structures().iter().map(FaceSet::of).collect();
        let self_inner = faces.iter().map(|f| inner_faces(f, f, inv_s2)).collect();
        Ok(Self {
            faces,
            self_inner,
            labels: target.labels().map(str::to_string).collect(),
            inv_s2,
        })
    }

    fn check(&self, shape: &ShapeComplex) -> Result<()> {
        let labels: Vec<&str> = shape.labels().collect();
        if labels.iter().copied().eq(self.labels.iter().map(String::as_str)) {
            Ok(())
        } else {
            Err(crate::error::Error::InvalidInput(format!(
                "label mismatch: {labels:?} vs {:?}",
                self.labels
            )))
        }
    }

    /// Summed per-label squared distance to `shape`.
    pub fn distance2(&self, shape: &ShapeComplex) -> Result<f64> {
        self.check(shape)?;
        let mut total = 0.0;
        for (s, mesh) in shape.structures().iter().enumerate() {
            let fa = FaceSet::of(mesh);
            let d2 = inner_faces(&fa, &fa, self.inv_s2) - 2.0 * inner_faces(&fa, &self.faces[s], self.inv_s2)
                + self.self_inner[s];
            total += d2.max(0.0);
        }
        Ok(total)
    }

    /// Distance and its gradient with respect to the flat vertex list of
    /// `shape` (structure after structure).
    pub fn distance2_with_gradient(&self, shape: &ShapeComplex) -> Result<(f64, Vec<Vec3>)> {
        self.check(shape)?;
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(shape.num_vertices());
        for (s, mesh) in shape.structures().iter().enumerate() {
            let fa = FaceSet::of(mesh);
            let d2 = inner_faces(&fa, &fa, self.inv_s2) - 2.0 * inner_faces(&fa, &self.faces[s], self.inv_s2)
                + self.self_inner[s];
            total += d2.max(0.0);
            let g_self = inner_gradient(&mesh.vertices, &mesh.triangles, &fa, &fa, self.inv_s2);
            let g_cross = inner_gradient(&mesh.vertices, &mesh.triangles, &fa, &self.faces[s], self.inv_s2);
            grad.extend(g_self.iter().zip(&g_cross).map(|(a, b)| 2.0 * a - 2.0 * b));
        }
        Ok((total, grad))
    }
}

/// Label-wise summed squared varifold distance between two complexes.
pub fn complex_distance2(a: &ShapeComplex, b: &ShapeComplex, sigma_w: f64) -> Result<f64> {
    a.check_same_labels(b)?;
    ComplexVarifold::new(b, sigma_w)?.distance2(a)
}
