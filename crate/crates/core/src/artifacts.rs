//! On-disk attack directories and JSON-lines run logs.
//!
//! An attack directory holds `attacks.csv` plus one folder per attacked
//! shape with `original.off`, `adversarial.off` and `coeffs.csv`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackResult, EvalEntry, Perturbation, SplitMetrics};
use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::losses::ShapeContext;
use crate::mesh::{load_mesh, save_mesh, MeshFormat};
use crate::mesh::Mesh;
use crate::tensor::Tensor;

pub const ATTACKS_CSV: &str = "attacks.csv";

/// One row of `attacks.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub name: String,
    pub split: Split,
    pub label: usize,
    pub target: Option<usize>,
    pub predicted: usize,
    pub success: bool,
    pub c: f64,
    pub iterations: usize,
    pub reconstruction: f64,
    pub curvature_distortion: f64,
    pub edge_loss: f64,
    pub l2: f64,
    pub spike_score: f64,
    pub dir: String,
}

pub struct Exported<'a> {
    pub name: &'a str,
    pub split: Split,
    pub label: usize,
    pub ctx: &'a ShapeContext,
    pub result: &'a AttackResult,
}

fn tensor_csv(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y", "z"])?;
    for r in 0..t.rows() {
        w.write_record(t.row(r).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes every attack and the summary table; returns the rows written.
pub fn export_attacks(dir: &Path, items: &[Exported<'_>]) -> Result<Vec<AttackRow>> {
    fs::create_dir_all(dir)?;
    let mut rows = Vec::with_capacity(items.len());
    for it in items {
        let r = it.result;
        let sub = match r.goal.target() {
            Some(t) => format!("{}_to_{t}", it.name),
            None => it.name.to_string(),
        };
        let shape_dir = dir.join("shapes").join(&sub);
        fs::create_dir_all(&shape_dir)?;
        let mesh = it.ctx.mesh();
        save_mesh(mesh, shape_dir.join("original.off"), MeshFormat::Off)?;
        let adv = mesh.with_vertices(r.x_adv.to_points())?;
        save_mesh(&adv, shape_dir.join("adversarial.off"), MeshFormat::Off)?;
        match &r.perturbation {
            Perturbation::Spectral(v) | Perturbation::Field(v) => tensor_csv(&shape_dir.join("coeffs.csv"), v)?,
        }
        rows.push(AttackRow {
            name: it.name.to_string(),
            split: it.split,
            label: it.label,
            target: r.goal.target(),
            predicted: r.predicted,
            success: r.success,
            c: r.c,
            iterations: r.iterations,
            reconstruction: r.breakdown.reconstruction,
            curvature_distortion: it.ctx.curvature_distortion(&r.x_adv)?,
            edge_loss: it.ctx.edge_loss(&r.x_adv)?,
            l2: it.ctx.l2_loss(&r.x_adv)?,
            spike_score: r.spike_score(it.ctx.vertices()),
            dir: format!("shapes/{sub}"),
        });
    }
    write_rows(&dir.join(ATTACKS_CSV), &rows)?;
    Ok(rows)
}

pub fn write_rows(path: &Path, rows: &[AttackRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// An attack read back from disk.
pub struct LoadedAttack {
    pub row: AttackRow,
    pub original: Mesh,
    pub adversarial: Mesh,
}

pub fn load_attacks(dir: &Path) -> Result<Vec<LoadedAttack>> {
    let table = dir.join(ATTACKS_CSV);
    if !table.is_file() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found", table.display()),
        )));
    }
    let mut out = Vec::new();
    for row in csv::Reader::from_path(&table)?.deserialize() {
        let row: AttackRow = row?;
        let d = dir.join(&row.dir);
        let original = load_mesh(d.join("original.off"), MeshFormat::Off)?;
        let adversarial = load_mesh(d.join("adversarial.off"), MeshFormat::Off)?;
        if adversarial.faces() != original.faces() {
            return Err(Error::Format {
                path: d,
                message: "adversarial mesh has different connectivity".into(),
            });
        }
        out.push(LoadedAttack {
            row,
            original,
            adversarial,
        });
    }
    Ok(out)
}

/// Per-split metrics recomputed from the meshes of an attack directory.
pub fn evaluate_dir(dir: &Path) -> Result<Vec<SplitMetrics>> {
    let loaded = load_attacks(dir)?;
    let ctxs = loaded
        .iter()
        .map(|l| ShapeContext::new(&l.original))
        .collect::<Result<Vec<_>>>()?;
    let advs: Vec<Tensor> = loaded.iter().map(|l| Tensor::from_points(l.adversarial.vertices())).collect();
    let entries: Vec<EvalEntry<'_>> = loaded
        .iter()
        .zip(&ctxs)
        .zip(&advs)
        .map(|((l, ctx), x_adv)| EvalEntry {
            split: l.row.split,
            label: l.row.label,
            ctx,
            x_adv,
            predicted: l.row.predicted,
        })
        .collect();
    crate::attacks::evaluate_attacks(&entries)
}

/// Append-only JSON-lines log.
pub struct RunLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl RunLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn record(&mut self, event: &str, data: impl Serialize) -> Result<()> {
        let line = serde_json::json!({ "event": event, "data": data });
        writeln!(self.out, "{line}")?;
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::Goal;
    use crate::losses::LossBreakdown;
    use crate::mesh::shapes;

    #[test]
    fn identity_attack_roundtrip_is_zero_distortion() {
        let mesh = shapes::icosphere(1.0, 1);
        let ctx = ShapeContext::new(&mesh).unwrap();
        let r = AttackResult {
            x_adv: ctx.vertices().as_ref().clone(),
            perturbation: Perturbation::Field(Tensor::zeros(vec![ctx.n(), 3])),
            goal: Goal::Untargeted(1),
            predicted: 1,
            success: false,
            breakdown: LossBreakdown::optimization(0.0, 0.0, 0.0, 1.0, 0.0),
            iterations: 0,
            c: 1.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let rows = export_attacks(
            dir.path(),
            &[Exported {
                name: "s",
                split: Split::Test,
                label: 1,
                ctx: &ctx,
                result: &r,
            }],
        )
        .unwrap();
        assert_eq!(rows[0].spike_score, 0.0);
        let m = evaluate_dir(dir.path()).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].curvature_distortion, 0.0);
        assert_eq!(m[0].edge_loss, 0.0);
        assert_eq!(m[0].l2, 0.0);
        assert_eq!(m[0].misclassification, 0.0);
        assert!(load_attacks(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn run_log_appends_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        let mut log = RunLog::create(&p).unwrap();
        log.record("a", 1).unwrap();
        log.record("b", [1.5, 2.0]).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 2);
        let v: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        assert_eq!(v["event"], "b");
    }
}
