//! Triangle surfaces, the varifold metric between them, voxel Dice, and
//! legacy-VTK file I/O.

mod primitives;
pub mod varifold;
pub mod voxel;
pub mod vtk;

use std::collections::{BTreeMap, HashSet};

use crate::error::{Error, Result};
use crate::kernel::Vec3;

pub use primitives::{box_mesh, icosphere};
pub use varifold::{varifold_distance2, varifold_inner, ComplexVarifold};
pub use voxel::{dice, voxelize, GridBounds, Occupancy};
pub use vtk::{load_complex, load_mesh, save_complex, save_mesh};

/// A closed or open triangle surface in millimetre coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub label: String,
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(label: impl Into<String>, vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = Self {
            label: label.into(),
            vertices,
            triangles,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (i, v) in self.vertices.iter().enumerate() {
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::Validation(format!("{}: vertex {i} is not finite", self.label)));
            }
        }
        for (f, t) in self.triangles.iter().enumerate() {
            if let Some(&bad) = t.iter().find(|&&i| i >= n) {
                return Err(Error::Validation(format!(
                    "{}: triangle {f} references vertex {bad} but the mesh has {n} vertices",
                    self.label
                )));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(Error::Validation(format!(
                    "{}: triangle {f} repeats a vertex index {t:?}",
                    self.label
                )));
            }
        }
        Ok(())
    }

    /// Same connectivity, new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Self {
        debug_assert_eq!(vertices.len(), self.vertices.len());
        Self {
            label: self.label.clone(),
            vertices,
            triangles: self.triangles.clone(),
        }
    }

    pub fn translated(&self, delta: &Vec3) -> Self {
        self.with_vertices(self.vertices.iter().map(|v| v + delta).collect())
    }

    /// Every triangle with its orientation reversed.
    pub fn flipped(&self) -> Self {
        Self {
            label: self.label.clone(),
            vertices: self.vertices.clone(),
            triangles: self.triangles.iter().map(|t| [t[0], t[2], t[1]]).collect(),
        }
    }

    pub fn bounding_box(&self) -> Option<(Vec3, Vec3)> {
        bounding_box(self.vertices.iter())
    }

    /// Undirected edges not shared by exactly two triangles.
    pub fn open_edges(&self) -> Vec<(usize, usize)> {
        let mut count: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        count.into_iter().filter(|&(_, c)| c != 2).map(|(e, _)| e).collect()
    }

    pub fn ensure_watertight(&self) -> Result<()> {
        let edges = self.open_edges();
        if edges.is_empty() && !self.triangles.is_empty() {
            Ok(())
        } else {
            Err(Error::NotWatertight {
                label: self.label.clone(),
                edges,
            })
        }
    }
}

pub(crate) fn bounding_box<'a>(points: impl Iterator<Item = &'a Vec3>) -> Option<(Vec3, Vec3)> {
    let mut it = points.peekable();
    let first = **it.peek()?;
    Some(it.fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p))))
}

/// Centroid and area-weighted normal of every face.
///
/// The normal is `(v1 - v0) x (v2 - v0) / 2`, so its length is the face area.
pub fn face_centroids_normals(mesh: &Mesh) -> Vec<(Vec3, Vec3)> {
    face_data(&mesh.vertices, &mesh.triangles)
}

pub(crate) fn face_data(vertices: &[Vec3], triangles: &[[usize; 3]]) -> Vec<(Vec3, Vec3)> {
    triangles
        .iter()
        .map(|t| {
            let (a, b, c) = (vertices[t[0]], vertices[t[1]], vertices[t[2]]);
            ((a + b + c) / 3.0, 0.5 * (b - a).cross(&(c - a)))
        })
        .collect()
}

/// Several labelled structures observed together. Comparison between two
/// complexes is always label by label, in this order.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeComplex {
    structures: Vec<Mesh>,
}

impl ShapeComplex {
    pub fn new(structures: Vec<Mesh>) -> Result<Self> {
        if structures.is_empty() {
            return Err(Error::Validation("a shape complex needs at least one structure".into()));
        }
        let mut seen = HashSet::new();
        for m in &structures {
            m.validate()?;
            if !seen.insert(m.label.as_str()) {
                return Err(Error::Validation(format!("duplicate structure label '{}'", m.label)));
            }
        }
        Ok(Self { structures })
    }

    pub fn single(mesh: Mesh) -> Result<Self> {
        Self::new(vec![mesh])
    }

    pub fn structures(&self) -> &[Mesh] {
        &self.structures
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.structures.iter().map(|m| m.label.as_str())
    }

    pub fn get(&self, label: &str) -> Option<&Mesh> {
        self.structures.iter().find(|m| m.label == label)
    }

    pub fn num_vertices(&self) -> usize {
        self.structures.iter().map(|m| m.vertices.len()).sum()
    }

    /// All vertices, structure after structure.
    pub fn flat_vertices(&self) -> Vec<Vec3> {
        self.structures.iter().flat_map(|m| m.vertices.iter().copied()).collect()
    }

    /// Rebuilds the complex from a flat vertex list in [`flat_vertices`] order.
    ///
    /// [`flat_vertices`]: ShapeComplex::flat_vertices
    pub fn with_flat_vertices(&self, flat: &[Vec3]) -> Self {
        assert_eq!(flat.len(), self.num_vertices(), "vertex count mismatch");
        let mut offset = 0;
        let structures = self
            .structures
            .iter()
            .map(|m| {
                let n = m.vertices.len();
                let out = m.with_vertices(flat[offset..offset + n].to_vec());
                offset += n;
                out
            })
            .collect();
        Self { structures }
    }

    pub fn translated(&self, delta: &Vec3) -> Self {
        Self {
            structures: self.structures.iter().map(|m| m.translated(delta)).collect(),
        }
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        bounding_box(self.structures.iter().flat_map(|m| m.vertices.iter()))
            .expect("validated complexes are non-empty")
    }

    /// Errors unless `other` carries the same labels in the same order.
    pub fn check_same_labels(&self, other: &ShapeComplex) -> Result<()> {
        let a: Vec<&str> = self.labels().collect();
        let b: Vec<&str> = other.labels().collect();
        if a == b {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("label mismatch: {a:?} vs {b:?}")))
        }
    }

    /// Same labels and connectivity, vertices possibly different.
    pub fn same_topology(&self, other: &ShapeComplex) -> bool {
        self.structures.len() == other.structures.len()
            && self
                .structures
                .iter()
                .zip(&other.structures)
                .all(|(a, b)| a.label == b.label && a.triangles == b.triangles && a.vertices.len() == b.vertices.len())
    }
}

/// Root-mean-square vertex distance between two complexes of equal topology.
pub fn vertex_rms(a: &ShapeComplex, b: &ShapeComplex) -> f64 {
    let va = a.flat_vertices();
    let vb = b.flat_vertices();
    assert_eq!(va.len(), vb.len(), "vertex count mismatch");
    let s: f64 = va.iter().zip(&vb).map(|(x, y)| (x - y).norm_squared()).sum();
    (s / va.len().max(1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tri() -> Mesh {
        Mesh::new(
            "t",
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn right_triangle_centroid_normal() {
        let fd = face_centroids_normals(&tri());
        let (c, n) = fd[0];
        assert!((c - Vec3::new(1.0 / 3.0, 1.0 / 3.0, 0.0)).norm() < 1e-15);
        assert_eq!(n, Vec3::new(0.0, 0.0, 0.5));
    }

    #[test]
    fn cyclic_permutation_and_swap() {
        let mut m = tri();
        let (c0, n0) = face_centroids_normals(&m)[0];
        m.triangles[0] = [1, 2, 0];
        let (c1, n1) = face_centroids_normals(&m)[0];
        assert!((c0 - c1).norm() < 1e-15 && (n0 - n1).norm() < 1e-15);
        m.triangles[0] = [1, 0, 2];
        let (_, n2) = face_centroids_normals(&m)[0];
        assert!((n0 + n2).norm() < 1e-15);
    }

    #[test]
    fn validation_errors() {
        let v = vec![Vec3::zeros(), Vec3::x(), Vec3::y()];
        assert!(Mesh::new("a", v.clone(), vec![[0, 1, 3]]).is_err());
        assert!(Mesh::new("a", v.clone(), vec![[0, 1, 1]]).is_err());
        let mut bad = v.clone();
        bad[1].x = f64::INFINITY;
        assert!(Mesh::new("a", bad, vec![[0, 1, 2]]).is_err());
        let m = Mesh::new("a", v, vec![[0, 1, 2]]).unwrap();
        assert!(ShapeComplex::new(vec![m.clone(), m]).is_err());
    }

    #[test]
    fn open_edges_are_reported() {
        let err = tri().ensure_watertight().unwrap_err();
        match err {
            Error::NotWatertight { edges, .. } => assert_eq!(edges, vec![(0, 1), (0, 2), (1, 2)]),
            other => panic!("unexpected {other}"),
        }
        assert!(icosphere("s", 1, Vec3::zeros(), Vec3::repeat(1.0)).ensure_watertight().is_ok());
    }
}
