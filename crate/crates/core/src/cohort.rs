//! Synthetic longitudinal cohorts with known ground truth.
//!
//! A reference geodesic is shot from a template of ellipsoids; it runs on the
//! clock of a reference subject whose pace is `reference_alpha`. Each subject
//! follows the exp-parallel of that geodesic under random matching momenta,
//! read at reference age `psi_ref^-1(psi_subject(t))`. Visits add vertex
//! jitter, and scores are the reference curve at `psi_subject(t)` plus noise.
//!
//! On disk:
//!
//! ```text
//! <out>/reference/geodesic.json        reference geodesic (+ geodesic_template.vtk)
//! <out>/subjects/<id>/visit_<k>.vtk    observed shapes
//! <out>/subjects/<id>/manifest.json    (age, mesh) pairs of that subject
//! <out>/scores.csv                     subject_id,age,score
//! <out>/truth.json                     config and every latent parameter
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deformation::{shape_at, steps_for, DeformationParams, Geodesic};
use crate::error::{Error, Result};
use crate::io::{write_json, ManifestEntry, ObservationManifest};
use crate::kernel::{KernelConfig, Vec3};
use crate::mesh::{icosphere, save_complex, ShapeComplex};
use crate::timewarp::{ReferenceCurve, TimeWarp};
use crate::transport::{exp_parallelize, ParallelSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureSpec {
    pub label: String,
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub n_subjects: usize,
    pub subdivisions: u32,
    pub structures: Vec<StructureSpec>,
    /// Control points per axis, on a grid spanning the template bounding box.
    pub control_grid: [usize; 3],
    pub kernel: KernelConfig,
    /// Age at which the reference sits at the template.
    pub t_ref: f64,
    /// Reference span, relative to `t_ref`.
    pub reference_span: [f64; 2],
    /// Standard deviation of the reference momenta components (per year).
    pub reference_momenta_scale: f64,
    /// Standard deviation of the subject matching momenta components.
    pub matching_scale: f64,
    /// Pace of the reference subject on the normalized clock.
    pub reference_alpha: f64,
    /// Log-uniform prior on the subject pace.
    pub alpha_range: [f64; 2],
    /// Uniform prior on the time shift.
    pub tau_range: [f64; 2],
    /// Uniform prior on the baseline position on the normalized clock,
    /// relative to `t_ref`.
    pub baseline_range: [f64; 2],
    pub visit_gap: f64,
    pub visits: usize,
    pub vertex_noise: f64,
    pub score_noise: f64,
    pub curve: ReferenceCurve,
    pub parallel: ParallelSettings,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_subjects: 10,
            subdivisions: 2,
            structures: vec![
                StructureSpec {
                    label: "left_hippocampus".into(),
                    center: [-5.0, 0.0, 0.0],
                    radii: [3.0, 5.0, 2.5],
                },
                StructureSpec {
                    label: "right_hippocampus".into(),
                    center: [5.0, 0.0, 0.0],
                    radii: [3.0, 5.0, 2.5],
                },
            ],
            control_grid: [4, 2, 2],
            kernel: KernelConfig::default(),
            t_ref: 70.0,
            reference_span: [-5.0, 20.0],
            reference_momenta_scale: 0.05,
            matching_scale: 0.3,
            reference_alpha: 4.0,
            alpha_range: [0.15, 6.01],
            tau_range: [-20.6, 22.8],
            baseline_range: [-2.0, 3.0],
            visit_gap: 1.0,
            visits: 7,
            vertex_noise: 0.1,
            score_noise: 0.02,
            curve: ReferenceCurve {
                t_mid: 75.0,
                scale: 5.0,
                floor: 0.0,
                ceiling: 1.0,
            },
            parallel: ParallelSettings {
                steps_per_year: 6.0,
                ..ParallelSettings::default()
            },
        }
    }
}

fn ordered(r: [f64; 2], what: &str, positive: bool) -> Result<()> {
    if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() || (positive && !(r[0] > 0.0)) {
        return Err(Error::Config(format!("invalid {what} range {r:?}")));
    }
    Ok(())
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        self.curve.validate()?;
        ordered(self.alpha_range, "alpha", true)?;
        if !(self.reference_alpha > 0.0 && self.reference_alpha.is_finite()) {
            return Err(Error::Config("reference_alpha must be > 0".into()));
        }
        ordered(self.tau_range, "tau", false)?;
        ordered(self.baseline_range, "baseline", false)?;
        ordered(self.reference_span, "reference span", false)?;
        if !(self.reference_span[0] <= 0.0 && self.reference_span[1] >= 0.0) {
            return Err(Error::Config("reference span must contain t_ref".into()));
        }
        if self.structures.is_empty() {
            return Err(Error::Config("at least one structure is required".into()));
        }
        if self.structures.iter().any(|s| s.radii.iter().any(|r| !(*r > 0.0)) || s.center.iter().any(|c| !c.is_finite())) {
            return Err(Error::Validation("template structures need positive radii and finite centers".into()));
        }
        if self.control_grid.iter().any(|&n| n == 0) {
            return Err(Error::Config("control grid needs at least one point per axis".into()));
        }
        if self.visits == 0 || !(self.visit_gap > 0.0) {
            return Err(Error::Config("visits need a positive count and gap".into()));
        }
        for (v, what) in [
            (self.reference_momenta_scale, "reference_momenta_scale"),
            (self.matching_scale, "matching_scale"),
            (self.vertex_noise, "vertex_noise"),
            (self.score_noise, "score_noise"),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{what} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Warp of the reference subject onto the normalized clock.
    pub fn reference_warp(&self) -> TimeWarp {
        TimeWarp {
            alpha: self.reference_alpha,
            tau: 0.0,
            t0: self.t_ref,
        }
    }

    pub fn template(&self) -> Result<ShapeComplex> {
        let meshes = self
            .structures
            .iter()
            .map(|s| icosphere(&s.label, self.subdivisions, Vec3::from(s.center), Vec3::from(s.radii)))
            .collect();
        ShapeComplex::new(meshes)
    }

    fn control_points(&self, template: &ShapeComplex) -> Vec<Vec3> {
        let (lo, hi) = template.bounding_box();
        let coord = |a: usize, i: usize| {
            let n = self.control_grid[a];
            if n == 1 {
                0.5 * (lo[a] + hi[a])
            } else {
                lo[a] + (hi[a] - lo[a]) * i as f64 / (n - 1) as f64
            }
        };
        let [nx, ny, nz] = self.control_grid;
        let mut out = Vec::with_capacity(nx * ny * nz);
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    out.push(Vec3::new(coord(0, i), coord(1, j), coord(2, k)));
                }
            }
        }
        out
    }
}

/// Latent parameters of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub id: String,
    pub warp: TimeWarp,
    /// Baseline position on the normalized clock.
    pub u_baseline: f64,
    /// Matching momenta at the reference control points at `t_ref`.
    #[serde(with = "crate::serde_vec3")]
    pub matching: Vec<Vec3>,
    pub ages: Vec<f64>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Visit {
    pub age: f64,
    /// Observed shape, with jitter.
    pub shape: ShapeComplex,
    /// Noiseless shape.
    pub truth: ShapeComplex,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct Subject {
    pub truth: SubjectTruth,
    pub visits: Vec<Visit>,
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub config: SimConfig,
    pub reference: Geodesic,
    pub subjects: Vec<Subject>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthFile {
    pub config: SimConfig,
    pub reference: crate::io::GeodesicFile,
    pub subjects: Vec<SubjectTruth>,
}

/// Independent random stream per subject (stream 0 is the reference).
fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn gaussian_vectors(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<Vec3> {
    if sd == 0.0 {
        return vec![Vec3::zeros(); n];
    }
    let d = Normal::new(0.0, sd).expect("finite sd");
    (0..n).map(|_| Vec3::new(d.sample(rng), d.sample(rng), d.sample(rng))).collect()
}

pub fn subject_id(index: usize) -> String {
    format!("s{:03}", index + 1)
}

/// Builds the reference geodesic of a configuration.
pub fn reference_geodesic(config: &SimConfig) -> Result<Geodesic> {
    config.validate()?;
    let template = config.template()?;
    let cps = config.control_points(&template);
    let mut rng = stream(config.seed, 0);
    let momenta = gaussian_vectors(&mut rng, cps.len(), config.reference_momenta_scale);
    let params = DeformationParams::new(cps, momenta, config.kernel.sigma_v)?;
    let t = config.t_ref;
    Geodesic::new(template, params, t, t + config.reference_span[0], t + config.reference_span[1])
}

fn simulate_subject(config: &SimConfig, reference: &Geodesic, index: usize) -> Result<Subject> {
    let mut rng = stream(config.seed, index as u64 + 1);
    let alpha = uniform(&mut rng, [config.alpha_range[0].ln(), config.alpha_range[1].ln()]).exp();
    let tau = uniform(&mut rng, config.tau_range);
    let u_baseline = config.t_ref + uniform(&mut rng, config.baseline_range);
    let matching = gaussian_vectors(&mut rng, reference.params.len(), config.matching_scale);
    let warp = TimeWarp::new(alpha, tau, config.t_ref)?;
    let baseline_age = warp.psi_inverse(u_baseline);
    let ages: Vec<f64> = (0..config.visits).map(|k| baseline_age + k as f64 * config.visit_gap).collect();
    let reference_warp = config.reference_warp();
    let ref_times: Vec<f64> = ages.iter().map(|&t| reference_warp.psi_inverse(warp.psi(t))).collect();
    let traj = exp_parallelize(reference, &matching, config.t_ref, &ref_times, &config.parallel)?;

    let score_noise = (config.score_noise > 0.0).then(|| Normal::new(0.0, config.score_noise).expect("finite sd"));
    let mut visits = Vec::with_capacity(ages.len());
    let mut scores = Vec::with_capacity(ages.len());
    // Samples come back sorted by reference time, which is increasing in age.
    for (&age, (_, truth)) in ages.iter().zip(traj.samples) {
        let jitter = gaussian_vectors(&mut rng, truth.num_vertices(), config.vertex_noise);
        let moved: Vec<Vec3> = truth.flat_vertices().iter().zip(&jitter).map(|(v, j)| v + j).collect();
        let mut score = config.curve.value(warp.psi(age));
        if let Some(d) = &score_noise {
            score = (score + d.sample(&mut rng)).clamp(0.0, 1.0);
        }
        scores.push(score);
        visits.push(Visit {
            age,
            shape: truth.with_flat_vertices(&moved),
            truth,
            score,
        });
    }
    Ok(Subject {
        truth: SubjectTruth {
            id: subject_id(index),
            warp,
            u_baseline,
            matching,
            ages,
            scores,
        },
        visits,
    })
}

/// Generates a cohort in memory.
pub fn simulate(config: &SimConfig) -> Result<Cohort> {
    let reference = reference_geodesic(config)?;
    let subjects = (0..config.n_subjects)
        .into_par_iter()
        .map(|i| simulate_subject(config, &reference, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort {
        config: config.clone(),
        reference,
        subjects,
    })
}

/// Writes the on-disk layout described in the module docs.
pub fn write_cohort(cohort: &Cohort, out: impl AsRef<Path>) -> Result<()> {
    let out = out.as_ref();
    crate::io::save_geodesic(&cohort.reference, out.join("reference").join("geodesic.json"))?;
    let mut csv = String::from("subject_id,age,score\n");
    for s in &cohort.subjects {
        let dir = out.join("subjects").join(&s.truth.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut manifest = ObservationManifest::default();
        for (k, v) in s.visits.iter().enumerate() {
            let name = format!("visit_{k}.vtk");
            save_complex(&v.shape, dir.join(&name))?;
            manifest.observations.push(ManifestEntry {
                age: v.age,
                mesh: name.into(),
            });
            writeln!(csv, "{},{},{}", s.truth.id, v.age, v.score).expect("string write");
        }
        write_json(&manifest, dir.join("manifest.json"))?;
    }
    let path = out.join("scores.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    let r = &cohort.reference;
    let truth = TruthFile {
        config: cohort.config.clone(),
        reference: crate::io::GeodesicFile {
            template: "geodesic_template.vtk".into(),
            params: r.params.clone(),
            t_ref: r.t_ref,
            t_min: r.t_min,
            t_max: r.t_max,
        },
        subjects: cohort.subjects.iter().map(|s| s.truth.clone()).collect(),
    };
    write_json(&truth, out.join("truth.json"))
}

/// [`simulate`] followed by [`write_cohort`].
pub fn simulate_cohort(config: &SimConfig, out: impl AsRef<Path>) -> Result<Cohort> {
    let cohort = simulate(config)?;
    write_cohort(&cohort, out)?;
    Ok(cohort)
}

/// The noiseless shape of a subject at any age.
pub fn truth_shape(cohort: &Cohort, subject: &SubjectTruth, age: f64) -> Result<ShapeComplex> {
    let u = cohort.config.reference_warp().psi_inverse(subject.warp.psi(age));
    let traj = exp_parallelize(&cohort.reference, &subject.matching, cohort.config.t_ref, &[u], &cohort.config.parallel)?;
    Ok(traj.samples.into_iter().next().expect("one sample").1)
}

/// Reference shape at reference age `u`, at the simulator's resolution.
pub fn reference_shape(cohort: &Cohort, u: f64) -> Result<ShapeComplex> {
    let r = &cohort.reference;
    shape_at(r, u, steps_for(u - r.t_ref, cohort.config.parallel.steps_per_year))
}
