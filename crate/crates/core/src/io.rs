//! JSON documents exchanged with the command line: geodesics, matchings,
//! observation manifests and configs. Meshes referenced by a document are
//! stored as VTK files next to it, with paths relative to the document.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::deformation::{DeformationParams, Geodesic};
use crate::error::{Error, Result};
use crate::estimation::Observation;
use crate::mesh::{load_complex, save_complex};
use crate::timewarp::{ScoreNormalization, ScoreSeries};

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn resolve(base: &Path, rel: &Path) -> PathBuf {
    if rel.is_absolute() {
        rel.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(rel)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeodesicFile {
    /// VTK complex holding the template.
    pub template: PathBuf,
    pub params: DeformationParams,
    pub t_ref: f64,
    pub t_min: f64,
    pub t_max: f64,
}

/// Writes `path` and the template next to it as `<stem>_template.vtk`.
pub fn save_geodesic(g: &Geodesic, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("geodesic");
    let template = PathBuf::from(format!("{stem}_template.vtk"));
    let doc = GeodesicFile {
        template: template.clone(),
        params: g.params.clone(),
        t_ref: g.t_ref,
        t_min: g.t_min,
        t_max: g.t_max,
    };
    write_json(&doc, path)?;
    save_complex(&g.template, resolve(path, &template))
}

pub fn load_geodesic(path: impl AsRef<Path>) -> Result<Geodesic> {
    let path = path.as_ref();
    let doc: GeodesicFile = read_json(path)?;
    let template = load_complex(resolve(path, &doc.template))?;
    Geodesic::new(template, doc.params, doc.t_ref, doc.t_min, doc.t_max)
}

/// Matching momenta on a reference, attached at reference time `t_match`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchingFile {
    pub t_match: f64,
    pub params: DeformationParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub age: f64,
    pub mesh: PathBuf,
}

/// A list of `(age, mesh)` pairs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ObservationManifest {
    pub observations: Vec<ManifestEntry>,
}

impl ObservationManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Vec<Observation>> {
        let path = path.as_ref();
        let doc: ObservationManifest = read_json(path)?;
        doc.observations
            .iter()
            .map(|e| {
                if !e.age.is_finite() {
                    return Err(Error::Validation(format!("non-finite age in {}", path.display())));
                }
                Ok(Observation::new(e.age, load_complex(resolve(path, &e.mesh))?))
            })
            .collect()
    }
}

#[derive(Debug, Deserialize)]
struct ScoreRecord {
    subject_id: String,
    age: f64,
    score: f64,
}

/// Reads `subject_id,age,score` rows, normalizes the scores and groups them
/// by subject in age order.
pub fn read_scores(path: impl AsRef<Path>, normalization: &ScoreNormalization) -> Result<BTreeMap<String, ScoreSeries>> {
    let path = path.as_ref();
    normalization.validate()?;
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut grouped: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for rec in rd.deserialize::<ScoreRecord>() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        grouped
            .entry(rec.subject_id)
            .or_default()
            .push((rec.age, normalization.apply(rec.score)));
    }
    grouped
        .into_iter()
        .map(|(id, mut pts)| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let series = ScoreSeries::new(pts).map_err(|e| Error::Validation(format!("subject {id}: {e}")))?;
            Ok((id, series))
        })
        .collect()
}
