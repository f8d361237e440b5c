//! ASCII legacy-VTK `POLYDATA` reader and writer.
//!
//! Single meshes carry their label on the title line. A whole complex can be
//! stored in one file: the title lists the labels and a `CELL_DATA` scalar
//! named `structure` assigns every polygon to one of them.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernel::Vec3;
use crate::mesh::{Mesh, ShapeComplex};

const VERSION_LINE: &str = "# vtk DataFile Version 3.0";
const COMPLEX_PREFIX: &str = "shapeflow labels:";

/// `printf("%g")` with six significant digits.
pub fn format_g6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        strip_zeros(&format!("{v:.decimals$}")).to_string()
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn write_polydata(title: &str, vertices: &[Vec3], triangles: &[[usize; 3]], structure: Option<&[usize]>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{VERSION_LINE}");
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "ASCII");
    let _ = writeln!(out, "DATASET POLYDATA");
    let _ = writeln!(out, "POINTS {} float", vertices.len());
    for v in vertices {
        let _ = writeln!(out, "{} {} {}", format_g6(v.x), format_g6(v.y), format_g6(v.z));
    }
    let _ = writeln!(out, "POLYGONS {} {}", triangles.len(), 4 * triangles.len());
    for t in triangles {
        let _ = writeln!(out, "3 {} {} {}", t[0], t[1], t[2]);
    }
    if let Some(ids) = structure {
        let _ = writeln!(out, "CELL_DATA {}", ids.len());
        let _ = writeln!(out, "SCALARS structure int 1");
        let _ = writeln!(out, "LOOKUP_TABLE default");
        for id in ids {
            let _ = writeln!(out, "{id}");
        }
    }
    out
}

pub fn save_mesh(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    mesh.validate()?;
    let text = write_polydata(&mesh.label, &mesh.vertices, &mesh.triangles, None);
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn save_complex(shape: &ShapeComplex, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let labels: Vec<&str> = shape.labels().collect();
    if labels.iter().any(|l| l.contains(char::is_whitespace)) {
        return Err(Error::InvalidInput("structure labels may not contain whitespace".into()));
    }
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut ids = Vec::new();
    for (s, m) in shape.structures().iter().enumerate() {
        let base = vertices.len();
        vertices.extend_from_slice(&m.vertices);
        triangles.extend(m.triangles.iter().map(|t| [t[0] + base, t[1] + base, t[2] + base]));
        ids.extend(std::iter::repeat_n(s, m.triangles.len()));
    }
    let title = format!("{COMPLEX_PREFIX} {}", labels.join(" "));
    let text = write_polydata(&title, &vertices, &triangles, Some(&ids));
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct Parsed {
    title: String,
    vertices: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
    structure: Option<Vec<usize>>,
}

struct Lines<'a> {
    path: &'a Path,
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn err(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    /// Next non-blank line and its 1-based number.
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        for (i, l) in self.inner.by_ref() {
            self.last = i + 1;
            if !l.trim().is_empty() {
                return Ok((i + 1, l.trim()));
            }
        }
        Err(self.err(self.last + 1, format!("unexpected end of file, expected {what}")))
    }

    fn next_raw(&mut self, what: &str) -> Result<(usize, &'a str)> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok((i + 1, l.trim_end()))
            }
            None => Err(self.err(self.last + 1, format!("unexpected end of file, expected {what}"))),
        }
    }

    /// Pulls `count` whitespace-separated tokens, spanning lines as needed.
    fn tokens(&mut self, count: usize, what: &str) -> Result<Vec<(usize, &'a str)>> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let (n, l) = self.next(what)?;
            out.extend(l.split_whitespace().map(|t| (n, t)));
        }
        if out.len() > count {
            let (n, _) = out[count];
            return Err(self.err(n, format!("trailing tokens after {what}")));
        }
        Ok(out)
    }
}

fn parse(text: &str, path: &Path) -> Result<Parsed> {
    let mut lines = Lines {
        path,
        inner: text.lines().enumerate().peekable(),
        last: 0,
    };
    let (n, version) = lines.next_raw("version line")?;
    if !version.starts_with("# vtk DataFile Version") {
        return Err(lines.err(n, "missing '# vtk DataFile Version' header"));
    }
    let (_, title) = lines.next_raw("title line")?;
    let title = title.trim().to_string();
    let (n, fmt) = lines.next("ASCII")?;
    if fmt != "ASCII" {
        return Err(lines.err(n, format!("only ASCII files are supported, found '{fmt}'")));
    }
    let (n, ds) = lines.next("DATASET")?;
    if ds.split_whitespace().collect::<Vec<_>>() != ["DATASET", "POLYDATA"] {
        return Err(lines.err(n, "expected 'DATASET POLYDATA'"));
    }

    let (n, header) = lines.next("POINTS")?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "POINTS" {
        return Err(lines.err(n, "expected 'POINTS <n> <type>'"));
    }
    let npts: usize = parts[1]
        .parse()
        .map_err(|_| lines.err(n, format!("bad point count '{}'", parts[1])))?;
    if npts == 0 {
        return Err(lines.err(n, "file contains no points"));
    }
    let coords = lines.tokens(3 * npts, "point coordinates")?;
    let mut vals = Vec::with_capacity(3 * npts);
    for (ln, tok) in coords {
        let v: f64 = tok.parse().map_err(|_| lines.err(ln, format!("bad coordinate '{tok}'")))?;
        if !v.is_finite() {
            return Err(lines.err(ln, format!("non-finite coordinate '{tok}'")));
        }
        vals.push(v);
    }
    let vertices: Vec<Vec3> = vals.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();

    let (n, header) = lines.next("POLYGONS")?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "POLYGONS" {
        return Err(lines.err(n, "expected 'POLYGONS <n> <size>'"));
    }
    let nfaces: usize = parts[1]
        .parse()
        .map_err(|_| lines.err(n, format!("bad polygon count '{}'", parts[1])))?;
    if nfaces == 0 {
        return Err(lines.err(n, "file contains no polygons"));
    }
    let mut triangles = Vec::with_capacity(nfaces);
    for _ in 0..nfaces {
        let (ln, l) = lines.next("polygon")?;
        let idx: Vec<&str> = l.split_whitespace().collect();
        if idx.len() != 4 || idx[0] != "3" {
            return Err(lines.err(ln, "only triangles ('3 a b c') are supported"));
        }
        let mut t = [0usize; 3];
        for (slot, tok) in t.iter_mut().zip(&idx[1..]) {
            *slot = tok.parse().map_err(|_| lines.err(ln, format!("bad vertex index '{tok}'")))?;
        }
        triangles.push(t);
    }

    let mut structure = None;
    if let Ok((n, header)) = lines.next("CELL_DATA") {
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.first() != Some(&"CELL_DATA") {
            return Err(lines.err(n, format!("unexpected section '{header}'")));
        }
        let (n2, scalars) = lines.next("SCALARS")?;
        if !scalars.starts_with("SCALARS structure") {
            return Err(lines.err(n2, "expected 'SCALARS structure int 1'"));
        }
        let (n3, lut) = lines.next("LOOKUP_TABLE")?;
        if !lut.starts_with("LOOKUP_TABLE") {
            return Err(lines.err(n3, "expected 'LOOKUP_TABLE default'"));
        }
        let toks = lines.tokens(nfaces, "structure ids")?;
        let mut ids = Vec::with_capacity(nfaces);
        for (ln, tok) in toks {
            ids.push(tok.parse().map_err(|_| lines.err(ln, format!("bad structure id '{tok}'")))?);
        }
        structure = Some(ids);
    }
    Ok(Parsed {
        title,
        vertices,
        triangles,
        structure,
    })
}

fn read(path: &Path) -> Result<Parsed> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, path)
}

/// Reads a single-structure file.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let p = read(path)?;
    if p.structure.is_some() {
        return Err(Error::InvalidInput(format!(
            "{} holds a multi-structure complex; use load_complex",
            path.display()
        )));
    }
    let label = if p.title.is_empty() { "mesh".to_string() } else { p.title };
    Mesh::new(label, p.vertices, p.triangles)
}

/// Reads either a complex file or a single-structure file (as a complex of one).
pub fn load_complex(path: impl AsRef<Path>) -> Result<ShapeComplex> {
    let path = path.as_ref();
    let p = read(path)?;
    let Some(ids) = p.structure else {
        let label = if p.title.is_empty() { "mesh".to_string() } else { p.title };
        return ShapeComplex::single(Mesh::new(label, p.vertices, p.triangles)?);
    };
    let labels: Vec<String> = p
        .title
        .strip_prefix(COMPLEX_PREFIX)
        .ok_or_else(|| Error::Validation(format!("{}: complex file without a label title", path.display())))?
        .split_whitespace()
        .map(str::to_string)
        .collect();
    for &t in p.triangles.iter().flatten() {
        if t >= p.vertices.len() {
            return Err(Error::Validation(format!(
                "{}: triangle index {t} out of range ({} vertices)",
                path.display(),
                p.vertices.len()
            )));
        }
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= labels.len()) {
        return Err(Error::Validation(format!("{}: structure id {bad} has no label", path.display())));
    }
    let mut meshes = Vec::with_capacity(labels.len());
    for (s, label) in labels.iter().enumerate() {
        let tris: Vec<[usize; 3]> = p
            .triangles
            .iter()
            .zip(&ids)
            .filter(|(_, &id)| id == s)
            .map(|(t, _)| *t)
            .collect();
        let mut used: Vec<usize> = tris.iter().flatten().copied().collect();
        used.sort_unstable();
        used.dedup();
        let mut remap = vec![usize::MAX; p.vertices.len()];
        for (new, &old) in used.iter().enumerate() {
            remap[old] = new;
        }
        let vertices = used.iter().map(|&i| p.vertices[i]).collect();
        let triangles = tris.iter().map(|t| [remap[t[0]], remap[t[1]], remap[t[2]]]).collect();
        meshes.push(Mesh::new(label.clone(), vertices, triangles)?);
    }
    ShapeComplex::new(meshes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::icosphere;

    #[test]
    fn g6_formatting() {
        assert_eq!(format_g6(0.0), "0");
        assert_eq!(format_g6(1.0), "1");
        assert_eq!(format_g6(-12.345678), "-12.3457");
        assert_eq!(format_g6(0.1234567), "0.123457");
        assert_eq!(format_g6(1e-7), "1e-07");
        assert_eq!(format_g6(1234567.0), "1.23457e+06");
        assert_eq!(format_g6(0.0001), "0.0001");
        assert_eq!(format_g6(999999.5), "1e+06");
    }

    #[test]
    fn unit_icosphere_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.vtk");
        let m = icosphere("unit", 2, Vec3::zeros(), Vec3::repeat(1.0));
        save_mesh(&m, &path).unwrap();
        let back = load_mesh(&path).unwrap();
        assert_eq!(back.label, "unit");
        assert_eq!(back.triangles, m.triangles);
        for (a, b) in m.vertices.iter().zip(&back.vertices) {
            assert!((a - b).amax() <= 1e-6);
        }
    }

    #[test]
    fn index_out_of_range_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.vtk");
        fs::write(
            &path,
            "# vtk DataFile Version 3.0\nbad\nASCII\nDATASET POLYDATA\nPOINTS 3 float\n0 0 0\n1 0 0\n0 1 0\nPOLYGONS 1 4\n3 0 1 3\n",
        )
        .unwrap();
        assert!(matches!(load_mesh(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn empty_polydata_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.vtk");
        fs::write(&path, "# vtk DataFile Version 3.0\nempty\nASCII\nDATASET POLYDATA\n").unwrap();
        match load_mesh(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::write(&path, "# vtk DataFile Version 3.0\nempty\nASCII\nDATASET POLYDATA\nPOINTS 0 float\n").unwrap();
        assert!(matches!(load_mesh(&path), Err(Error::Parse { line: 5, .. })));
    }

    #[test]
    fn complex_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.vtk");
        let a = icosphere("left", 1, Vec3::new(-3.0, 0.0, 0.0), Vec3::repeat(1.0));
        let b = icosphere("right", 1, Vec3::new(3.0, 0.0, 0.0), Vec3::repeat(1.0));
        let c = ShapeComplex::new(vec![a, b]).unwrap();
        save_complex(&c, &path).unwrap();
        let back = load_complex(&path).unwrap();
        assert!(back.same_topology(&c));
        assert!(crate::mesh::vertex_rms(&back, &c) < 1e-5);
    }
}
