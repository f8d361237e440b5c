use std::collections::HashMap;

use crate::kernel::Vec3;
use crate::mesh::Mesh;

/// Subdivided icosahedron projected onto an ellipsoid with the given semi-axes.
/// Subdivision `n` yields `10 * 4^n + 2` vertices with outward-facing
/// triangles.
pub fn icosphere(label: &str, subdivisions: u32, center: Vec3, radii: Vec3) -> Mesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
            *midpoints.entry((a.min(b), a.max(b))).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) / 2.0).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let vertices = verts.iter().map(|v| center + v.component_mul(&radii)).collect();
    Mesh {
        label: label.to_string(),
        vertices,
        triangles: faces,
    }
}

/// Closed axis-aligned box `[lo, hi]` made of 12 outward-facing triangles.
pub fn box_mesh(label: &str, lo: Vec3, hi: Vec3) -> Mesh {
    let corner = |i: usize| {
        Vec3::new(
            if i & 1 == 0 { lo.x } else { hi.x },
            if i & 2 == 0 { lo.y } else { hi.y },
            if i & 4 == 0 { lo.z } else { hi.z },
        )
    };
    let vertices = (0..8).map(corner).collect();
    let triangles = vec![
        [0, 2, 1],
        [1, 2, 3],
        [4, 5, 6],
        [5, 7, 6],
        [0, 1, 4],
        [1, 5, 4],
        [2, 6, 3],
        [3, 6, 7],
        [0, 4, 2],
        [2, 4, 6],
        [1, 3, 5],
        [3, 7, 5],
    ];
    Mesh {
        label: label.to_string(),
        vertices,
        triangles,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::face_centroids_normals;

    fn signed_volume(m: &Mesh) -> f64 {
        m.triangles
            .iter()
            .map(|t| m.vertices[t[0]].dot(&m.vertices[t[1]].cross(&m.vertices[t[2]])) / 6.0)
            .sum()
    }

    #[test]
    fn outward_orientation() {
        let s = icosphere("s", 2, Vec3::zeros(), Vec3::repeat(2.0));
        assert_eq!(s.vertices.len(), 162);
        assert_eq!(s.triangles.len(), 320);
        assert!(signed_volume(&s) > 0.0);
        for (c, n) in face_centroids_normals(&s) {
            assert!(c.dot(&n) > 0.0);
        }
        let b = box_mesh("b", Vec3::zeros(), Vec3::repeat(1.0));
        assert!((signed_volume(&b) - 1.0).abs() < 1e-14);
        assert!(b.ensure_watertight().is_ok());
    }
}
