//! Inside/outside voxelization by ray parity, and the volumetric Dice score.
//!
//! A voxel is occupied iff its center lies inside the surface: a ray cast
//! along +x from the center crosses the surface an odd number of times. Rays
//! that graze an edge or vertex are nudged by a fixed sub-voxel offset and
//! recast, so the result is deterministic.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::Vec3;
use crate::mesh::{bounding_box, Mesh, ShapeComplex};

/// Default voxel edge length for Dice, in millimetres.
pub const DEFAULT_VOXEL_SIZE: f64 = 1.0;
/// Empty voxel layers added around the union bounding box.
pub const GRID_PADDING: usize = 2;

/// A regular grid: voxel `(i, j, k)` has its center at
/// `origin + (i + 0.5, j + 0.5, k + 0.5) * voxel_size`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridBounds {
    pub origin: Vec3,
    pub dims: [usize; 3],
}

impl GridBounds {
    /// Grid covering `[lo, hi]`, snapped to multiples of `voxel_size` and
    /// padded by `pad` voxels on every side.
    pub fn covering(lo: Vec3, hi: Vec3, voxel_size: f64, pad: usize) -> Self {
        let p = pad as f64;
        let start = lo.map(|v| ((v / voxel_size).floor() - p) * voxel_size);
        let stop = hi.map(|v| ((v / voxel_size).ceil() + p) * voxel_size);
        let n = |a: f64, b: f64| (((b - a) / voxel_size).round() as usize).max(1);
        Self {
            origin: start,
            dims: [n(start.x, stop.x), n(start.y, stop.y), n(start.z, stop.z)],
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn center(&self, axis: usize, i: usize, voxel: f64) -> f64 {
        self.origin[axis] + (i as f64 + 0.5) * voxel
    }
}

/// Boolean occupancy over a [`GridBounds`], x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Occupancy {
    pub bounds: GridBounds,
    pub voxel_size: f64,
    cells: Vec<bool>,
}

impl Occupancy {
    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn volume(&self) -> f64 {
        self.count() as f64 * self.voxel_size.powi(3)
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        let [nx, ny, _] = self.bounds.dims;
        self.cells[i + nx * (j + ny * k)]
    }

    pub fn intersection_count(&self, other: &Occupancy) -> usize {
        assert_eq!(self.bounds, other.bounds, "occupancies on different grids");
        self.cells.iter().zip(&other.cells).filter(|(a, b)| **a && **b).count()
    }
}

struct RayTriangle {
    p: [Vec3; 3],
    lo: (f64, f64),
    hi: (f64, f64),
}

enum RayHit {
    Miss,
    Cross(f64),
    Grazing,
}

impl RayTriangle {
    fn hit(&self, y: f64, z: f64, tol: f64) -> RayHit {
        if y < self.lo.0 - tol || y > self.hi.0 + tol || z < self.lo.1 - tol || z > self.hi.1 + tol {
            return RayHit::Miss;
        }
        let edge = |a: &Vec3, b: &Vec3| (b.y - a.y) * (z - a.z) - (b.z - a.z) * (y - a.y);
        let [p0, p1, p2] = &self.p;
        let w0 = edge(p1, p2);
        let w1 = edge(p2, p0);
        let w2 = edge(p0, p1);
        let area = w0 + w1 + w2;
        if area.abs() <= tol {
            // Triangle seen edge-on; its neighbours decide.
            return RayHit::Miss;
        }
        let s = area.signum();
        let (a0, a1, a2) = (w0 * s, w1 * s, w2 * s);
        if a0 < -tol || a1 < -tol || a2 < -tol {
            return RayHit::Miss;
        }
        if a0 <= tol || a1 <= tol || a2 <= tol {
            return RayHit::Grazing;
        }
        RayHit::Cross((w0 * p0.x + w1 * p1.x + w2 * p2.x) / area)
    }
}

fn row_crossings(tris: &[RayTriangle], y: f64, z: f64, voxel: f64) -> Vec<f64> {
    const NUDGE: [f64; 2] = [0.618_033_988_749_894_8, 0.414_213_562_373_095_1];
    let tol = 1e-9 * voxel * voxel;
    for attempt in 0..16 {
        let shift = attempt as f64 * 1e-5 * voxel;
        let (yy, zz) = (y + shift * NUDGE[0], z + shift * NUDGE[1]);
        let mut xs = Vec::new();
        let mut grazing = false;
        for t in tris {
            match t.hit(yy, zz, tol) {
                RayHit::Miss => {}
                RayHit::Cross(x) => xs.push(x),
                RayHit::Grazing => {
                    grazing = true;
                    break;
                }
            }
        }
        if !grazing {
            xs.sort_by(f64::total_cmp);
            return xs;
        }
    }
    log::warn!("ray at (y={y}, z={z}) still grazing after perturbation; treating row as empty");
    Vec::new()
}

/// Occupancy of a closed mesh on the given grid.
pub fn voxelize(mesh: &Mesh, voxel_size: f64, bounds: &GridBounds) -> Result<Occupancy> {
    if !(voxel_size.is_finite() && voxel_size > 0.0) {
        return Err(Error::InvalidInput(format!("voxel size must be positive, got {voxel_size}")));
    }
    mesh.validate()?;
    mesh.ensure_watertight()?;
    let [nx, ny, nz] = bounds.dims;
    let mut cells = vec![false; bounds.len()];
    let Some((lo, hi)) = mesh.bounding_box() else {
        return Ok(Occupancy {
            bounds: *bounds,
            voxel_size,
            cells,
        });
    };
    let tris: Vec<RayTriangle> = mesh
        .triangles
        .iter()
        .map(|t| {
            let p = [mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]];
            let lo = (p[0].y.min(p[1].y).min(p[2].y), p[0].z.min(p[1].z).min(p[2].z));
            let hi = (p[0].y.max(p[1].y).max(p[2].y), p[0].z.max(p[1].z).max(p[2].z));
            RayTriangle { p, lo, hi }
        })
        .collect();

    let rows: Vec<(usize, usize)> = (0..nz)
        .flat_map(|k| (0..ny).map(move |j| (j, k)))
        .filter(|&(j, k)| {
            let y = bounds.center(1, j, voxel_size);
            let z = bounds.center(2, k, voxel_size);
            y >= lo.y && y <= hi.y && z >= lo.z && z <= hi.z
        })
        .collect();

    let filled: Vec<((usize, usize), Vec<usize>)> = rows
        .par_iter()
        .map(|&(j, k)| {
            let y = bounds.center(1, j, voxel_size);
            let z = bounds.center(2, k, voxel_size);
            let xs = row_crossings(&tris, y, z, voxel_size);
            let mut inside = Vec::new();
            if xs.len() >= 2 {
                for i in 0..nx {
                    let x = bounds.center(0, i, voxel_size);
                    if x < lo.x || x > hi.x {
                        continue;
                    }
                    let beyond = xs.len() - xs.partition_point(|&c| c <= x);
                    if beyond % 2 == 1 {
                        inside.push(i);
                    }
                }
            }
            ((j, k), inside)
        })
        .collect();
    for ((j, k), inside) in filled {
        for i in inside {
            cells[i + nx * (j + ny * k)] = true;
        }
    }
    Ok(Occupancy {
        bounds: *bounds,
        voxel_size,
        cells,
    })
}

/// Volumetric Dice `2 sum_s |A_s & B_s| / sum_s (|A_s| + |B_s|)` between two
/// complexes, structure by structure on a shared grid.
pub fn dice(a: &ShapeComplex, b: &ShapeComplex, voxel_size: f64) -> Result<f64> {
    a.check_same_labels(b)?;
    let all = a
        .structures()
        .iter()
        .chain(b.structures())
        .flat_map(|m| m.vertices.iter());
    let (lo, hi) = bounding_box(all).ok_or_else(|| Error::InvalidInput("empty complexes".into()))?;
    let bounds = GridBounds::covering(lo, hi, voxel_size, GRID_PADDING);
    let mut inter = 0usize;
    let mut total = 0usize;
    for (ma, mb) in a.structures().iter().zip(b.structures()) {
        let oa = voxelize(ma, voxel_size, &bounds)?;
        let ob = voxelize(mb, voxel_size, &bounds)?;
        inter += oa.intersection_count(&ob);
        total += oa.count() + ob.count();
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}
