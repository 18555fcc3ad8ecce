//! Synthetic 10 x 10 shape corpus, directory ingestion and splits.
//!
//! Every synthetic mesh is the same icosphere with a radial displacement: a
//! class pattern (the "pose") plus a subject-specific smooth variation (the
//! "identity"). Subject variations are shared across classes, so only the
//! class pattern identifies the label.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mesh::{load_mesh, save_mesh, shapes, Mesh, MeshFormat, Point};

pub const CLASSES: usize = 10;
pub const SUBJECTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// `normalized = (original - centroid) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub centroid: Point,
    pub scale: f64,
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            centroid: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: Point) -> Point {
        let c = self.centroid;
        [(p[0] - c[0]) / self.scale, (p[1] - c[1]) / self.scale, (p[2] - c[2]) / self.scale]
    }

    pub fn invert(&self, p: Point) -> Point {
        let c = self.centroid;
        [p[0] * self.scale + c[0], p[1] * self.scale + c[1], p[2] * self.scale + c[2]]
    }
}

/// Centers on the vertex centroid and scales so the farthest vertex lies on
/// the unit sphere.
pub fn normalize(mesh: &Mesh) -> Result<(Mesh, Normalization)> {
    let n = mesh.vertex_count().max(1) as f64;
    let mut c = [0.0; 3];
    for p in mesh.vertices() {
        for k in 0..3 {
            c[k] += p[k] / n;
        }
    }
    let r = mesh
        .vertices()
        .iter()
        .map(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt())
        .fold(0.0, f64::max);
    let rec = Normalization {
        centroid: c,
        scale: if r > 0.0 { r } else { 1.0 },
    };
    let verts = mesh.vertices().iter().map(|&p| rec.apply(p)).collect();
    Ok((mesh.with_vertices(verts)?, rec))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMesh {
    pub mesh: Mesh,
    pub label: usize,
    pub subject: usize,
    pub split: Split,
    pub name: String,
    pub normalization: Normalization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<LabeledMesh>,
    pub classes: usize,
    pub seed: Option<u64>,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub class: usize,
    pub subject: usize,
    pub split: Split,
    #[serde(default)]
    pub centroid: Option<Point>,
    #[serde(default)]
    pub scale: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

pub const MANIFEST: &str = "manifest.jsonl";

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&LabeledMesh> {
        self.items.iter().filter(|m| m.split == split).collect()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.items.len()).filter(|&i| self.items[i].split == split).collect()
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for m in &self.items {
            c[m.split as usize] += 1;
        }
        c
    }

    /// Writes one OFF file per mesh plus a JSON-lines manifest.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = fs::File::create(dir.join(MANIFEST))?;
        for m in &self.items {
            let file = format!("{}.off", m.name);
            save_mesh(&m.mesh, dir.join(&file), MeshFormat::Off)?;
            let entry = ManifestEntry {
                path: file,
                class: m.label,
                subject: m.subject,
                split: m.split,
                centroid: Some(m.normalization.centroid),
                scale: Some(m.normalization.scale),
                seed: self.seed,
            };
            writeln!(manifest, "{}", serde_json::to_string(&entry)?)?;
        }
        Ok(())
    }
}

/// Split rule for the 10 x 10 grid: subjects 0-6 train, 7 val, 8 val for
/// even classes and test for odd ones, 9 test.
pub fn split_for(class: usize, subject: usize) -> Split {
    match subject {
        0..=6 => Split::Train,
        7 => Split::Val,
        8 if class.is_multiple_of(2) => Split::Val,
        _ => Split::Test,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub subdivisions: u32,
    /// Peak radial displacement of the class pattern.
    pub class_amplitude: f64,
    /// Peak radial displacement of each subject bump.
    pub subject_amplitude: f64,
    /// Per-axis subject scale is drawn from `1 +- scale_jitter`.
    pub scale_jitter: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            subdivisions: 3,
            class_amplitude: 0.3,
            subject_amplitude: 0.05,
            scale_jitter: 0.1,
        }
    }
}

/// Class pattern on the unit sphere, peak magnitude 1.
pub fn class_pattern(class: usize, p: Point) -> f64 {
    // zonal Legendre profiles of degree 2..=6, each with both signs
    let degree = 2 + (class % CLASSES) / 2;
    let sign = if class.is_multiple_of(2) { 1.0 } else { -1.0 };
    sign * legendre(degree, p[2])
}

fn legendre(l: usize, z: f64) -> f64 {
    let (mut a, mut b) = (1.0, z);
    for n in 1..l {
        let c = ((2 * n + 1) as f64 * z * b - n as f64 * a) / (n + 1) as f64;
        a = b;
        b = c;
    }
    if l == 0 {
        1.0
    } else {
        b
    }
}

struct Subject {
    scale: Point,
    bumps: Vec<(Point, f64)>,
}

fn random_unit(rng: &mut ChaCha8Rng) -> Point {
    loop {
        let p: Point = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let l = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if l > 1e-3 && l <= 1.0 {
            return [p[0] / l, p[1] / l, p[2] / l];
        }
    }
}

/// 100 normalized meshes with shared connectivity.
pub fn generate_synthetic(seed: u64, params: &SyntheticParams) -> Result<Dataset> {
    let base = shapes::icosphere(1.0, params.subdivisions);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subjects: Vec<Subject> = (0..SUBJECTS)
        .map(|_| {
            let j = params.scale_jitter;
            let scale = [
                1.0 + rng.gen_range(-j..=j),
                1.0 + rng.gen_range(-j..=j),
                1.0 + rng.gen_range(-j..=j),
            ];
            let bumps = (0..3)
                .map(|_| (random_unit(&mut rng), params.subject_amplitude * rng.gen_range(-1.0..=1.0)))
                .collect();
            Subject { scale, bumps }
        })
        .collect();
    let mut items = Vec::with_capacity(CLASSES * SUBJECTS);
    for (subject, subj) in subjects.iter().enumerate() {
        for class in 0..CLASSES {
            let amp = params.class_amplitude * rng.gen_range(0.85..=1.15);
            let verts = base
                .vertices()
                .iter()
                .map(|&p| {
                    let bump: f64 = subj
                        .bumps
                        .iter()
                        .map(|(c, a)| {
                            let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
                            a * (-d2 / 0.5).exp()
                        })
                        .sum();
                    let r = 1.0 + amp * class_pattern(class, p) + bump;
                    [p[0] * r * subj.scale[0], p[1] * r * subj.scale[1], p[2] * r * subj.scale[2]]
                })
                .collect();
            let (mesh, normalization) = normalize(&base.with_vertices(verts)?)?;
            items.push(LabeledMesh {
                mesh,
                label: class,
                subject,
                split: split_for(class, subject),
                name: format!("tr_reg_{:03}", subject * CLASSES + class),
                normalization,
            });
        }
    }
    Ok(Dataset {
        items,
        classes: CLASSES,
        seed: Some(seed),
    })
}

/// Parses `tr_reg_NNN` (subject = NNN / 10, class = NNN % 10).
pub fn parse_faust_name(stem: &str) -> Result<(usize, usize)> {
    let digits = stem
        .strip_prefix("tr_reg_")
        .filter(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
        .ok_or_else(|| Error::LabelParse(stem.to_string()))?;
    let idx: usize = digits.parse().map_err(|_| Error::LabelParse(stem.to_string()))?;
    Ok((idx % CLASSES, idx / CLASSES))
}

fn split_hash(subject: usize, class: usize) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(format!("{subject}:{class}").as_bytes());
    h.finalize().into()
}

/// 70/15/15 assignment by hash order of `(subject, class)`.
pub fn hash_splits(keys: &[(usize, usize)]) -> Vec<Split> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by_key(|&i| (split_hash(keys[i].0, keys[i].1), i));
    let n = keys.len();
    let n_train = (0.70 * n as f64).round() as usize;
    let n_val = (0.15 * n as f64).round() as usize;
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

fn format_of(path: &Path) -> Result<MeshFormat> {
    MeshFormat::from_path(path).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        message: "expected an .off or .obj file".into(),
    })
}

fn check_topology(reference: &Mesh, mesh: &Mesh, path: &Path) -> Result<()> {
    if reference.vertex_count() != mesh.vertex_count() || reference.faces() != mesh.faces() {
        return Err(Error::InconsistentTopology {
            path: path.display().to_string(),
            expected: reference.vertex_count(),
            got: mesh.vertex_count(),
            expected_faces: reference.face_count(),
            got_faces: mesh.face_count(),
        });
    }
    Ok(())
}

/// Loads a directory of OFF/OBJ meshes. With a manifest, labels and splits
/// come from it and meshes are used as stored; otherwise labels come from
/// `tr_reg_NNN` names, meshes are normalized, and splits are hashed.
pub fn ingest_directory(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join(MANIFEST);
    let mut items: Vec<LabeledMesh> = Vec::new();
    let mut seed = None;
    if manifest.exists() {
        let reader = BufReader::new(fs::File::open(&manifest)?);
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(&line).map_err(|err| Error::Parse {
                line: lineno + 1,
                message: err.to_string(),
            })?;
            let path = dir.join(&e.path);
            let mesh = load_mesh(&path, format_of(&path)?)?;
            if let Some(first) = items.first() {
                check_topology(&first.mesh, &mesh, &path)?;
            }
            seed = seed.or(e.seed);
            items.push(LabeledMesh {
                mesh,
                label: e.class,
                subject: e.subject,
                split: e.split,
                name: Path::new(&e.path)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                normalization: match (e.centroid, e.scale) {
                    (Some(centroid), Some(scale)) => Normalization { centroid, scale },
                    _ => Normalization::identity(),
                },
            });
        }
    } else {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("off" | "obj" | "OFF" | "OBJ")))
            .collect();
        paths.sort();
        for path in paths {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let (label, subject) = parse_faust_name(&stem)?;
            let raw = load_mesh(&path, format_of(&path)?)?;
            if let Some(first) = items.first() {
                check_topology(&first.mesh, &raw, &path)?;
            }
            let (mesh, normalization) = normalize(&raw)?;
            items.push(LabeledMesh {
                mesh,
                label,
                subject,
                split: Split::Train,
                name: stem,
                normalization,
            });
        }
        let keys: Vec<_> = items.iter().map(|m| (m.subject, m.label)).collect();
        for (m, s) in items.iter_mut().zip(hash_splits(&keys)) {
            m.split = s;
        }
    }
    if items.is_empty() {
        return Err(Error::EmptySplit(format!("no meshes in {}", dir.display())));
    }
    let classes = items.iter().map(|m| m.label + 1).max().unwrap_or(0).max(2);
    Ok(Dataset { items, classes, seed })
}

/// Label histogram per split, for logging.
pub fn split_histogram(ds: &Dataset) -> HashMap<Split, Vec<usize>> {
    let mut h: HashMap<Split, Vec<usize>> = HashMap::new();
    for m in &ds.items {
        h.entry(m.split).or_insert_with(|| vec![0; ds.classes])[m.label] += 1;
    }
    h
}
