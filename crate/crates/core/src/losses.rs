//! Attack objectives and perceptibility metrics.
//!
//! Each differentiable loss has a `*_var` form that records onto a [`Tape`]
//! and a plain form over tensors. The plain forms are the reference values
//! used in reports.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Tape, Var};
use crate::mesh::{build_edges, one_rings, Mesh};
use crate::spectral::{
    laplacian, mass_matrix, mean_curvature, stiffness_matrix, LaplacianKind, MassMatrix, SparseMatrix,
    StiffnessMatrix,
};
use crate::tensor::Tensor;

/// Guard used by every differentiable square root.
pub const SQRT_EPS: f64 = 1e-12;

/// Weighted decomposition of an objective. `total` is always
/// `misclass_weight * misclassification + recon_weight * reconstruction
/// + smoothing_weight * smoothing`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub misclassification: f64,
    pub reconstruction: f64,
    pub smoothing: f64,
    pub total: f64,
    pub c: f64,
    pub misclass_weight: f64,
    pub recon_weight: f64,
    pub smoothing_weight: f64,
}

impl LossBreakdown {
    pub fn new(
        misclassification: f64,
        reconstruction: f64,
        smoothing: f64,
        c: f64,
        misclass_weight: f64,
        recon_weight: f64,
        smoothing_weight: f64,
    ) -> Self {
        let total = misclass_weight * misclassification + recon_weight * reconstruction + smoothing_weight * smoothing;
        Self {
            misclassification,
            reconstruction,
            smoothing,
            total,
            c,
            misclass_weight,
            recon_weight,
            smoothing_weight,
        }
    }

    /// Generator convention: `misclass + c * recon + s * smoothing`.
    pub fn generator(misclassification: f64, reconstruction: f64, smoothing: f64, c: f64, smoothing_weight: f64) -> Self {
        Self::new(misclassification, reconstruction, smoothing, c, 1.0, c, smoothing_weight)
    }

    /// Per-shape optimization convention: `c * hinge + recon + s * smoothing`.
    pub fn optimization(misclassification: f64, reconstruction: f64, smoothing: f64, c: f64, smoothing_weight: f64) -> Self {
        Self::new(misclassification, reconstruction, smoothing, c, c, 1.0, smoothing_weight)
    }
}

/// Mixture weights of the reconstruction term. A zero weight disables a term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconWeights {
    pub l2: f64,
    pub edge: f64,
    pub local_euclidean: f64,
    pub chamfer: f64,
}

impl Default for ReconWeights {
    fn default() -> Self {
        Self {
            l2: 0.0,
            edge: 0.0,
            local_euclidean: 1.0,
            chamfer: 0.0,
        }
    }
}

fn check_target(classes: usize, target: usize) -> Result<()> {
    if target >= classes || classes < 2 {
        return Err(Error::InvalidTarget { target, classes });
    }
    Ok(())
}

/// `max(0, max_{i != t} z_i - z_t)`.
pub fn margin_loss(logits: &[f64], target: usize) -> Result<f64> {
    check_target(logits.len(), target)?;
    let other = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target)
        .fold(f64::NEG_INFINITY, |m, (_, &z)| m.max(z));
    Ok((other - logits[target]).max(0.0))
}

/// Hinge that is zero once the true class `label` is beaten:
/// `max(0, z_label - max_{i != label} z_i)`.
pub fn untargeted_margin_loss(logits: &[f64], label: usize) -> Result<f64> {
    let gap = margin_loss(logits, label)?;
    if gap > 0.0 {
        return Ok(0.0);
    }
    let other = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label)
        .fold(f64::NEG_INFINITY, |m, (_, &z)| m.max(z));
    Ok(logits[label] - other)
}

fn split_target<'t>(logits: Var<'t>, targets: &[usize]) -> Result<(Var<'t>, Var<'t>)> {
    let (b, c) = logits.shape();
    if targets.len() != b {
        return Err(Error::dims(b, targets.len()));
    }
    for &t in targets {
        check_target(c, t)?;
    }
    let flat = logits.reshape(b * c, 1)?;
    let mut others = Vec::with_capacity(b * (c - 1));
    for (row, &t) in targets.iter().enumerate() {
        others.extend((0..c).filter(|&j| j != t).map(|j| row * c + j));
    }
    let other_max = flat.gather_rows(others)?.reshape(b, c - 1)?.max_over_axis(1)?;
    let picked = flat.gather_rows(targets.iter().enumerate().map(|(r, &t)| r * c + t).collect())?;
    Ok((other_max, picked))
}

/// Per-row targeted hinge for `[b, c]` logits, returned as `[b, 1]`.
pub fn margin_loss_var<'t>(logits: Var<'t>, targets: &[usize]) -> Result<Var<'t>> {
    let (other, picked) = split_target(logits, targets)?;
    Ok(other.sub(picked)?.relu()?)
}

/// Per-row untargeted hinge for `[b, c]` logits, returned as `[b, 1]`.
pub fn untargeted_margin_loss_var<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let (other, picked) = split_target(logits, labels)?;
    Ok(picked.sub(other)?.relu()?)
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dims(a.len(), b.len()));
    }
    Ok(())
}

/// Frobenius norm of `x_adv - x`.
pub fn l2_loss(x: &Tensor, x_adv: &Tensor) -> Result<f64> {
    same_shape(x, x_adv)?;
    Ok(x.data().iter().zip(x_adv.data()).map(|(a, b)| (b - a).powi(2)).sum::<f64>().sqrt())
}

pub fn l2_loss_var<'t>(x: Var<'t>, x_adv: Var<'t>) -> Result<Var<'t>> {
    Ok(x_adv.sub(x)?.square()?.sum()?.sqrt(SQRT_EPS)?)
}

/// Length of each row of an `[m, 3]` difference, as `[m, 1]`.
fn row_lengths(d: Var<'_>) -> Result<Var<'_>> {
    Ok(d.square()?.sum_axis(1)?.sqrt(SQRT_EPS)?)
}

fn dist(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

/// Geometry of an unperturbed shape, precomputed once and reused by every
/// loss evaluation during an attack.
#[derive(Debug, Clone)]
pub struct ShapeContext {
    mesh: Mesh,
    x: Arc<Tensor>,
    edge_i: Vec<usize>,
    edge_j: Vec<usize>,
    edge_len: Arc<Tensor>,
    ring_i: Vec<usize>,
    ring_j: Vec<usize>,
    ring_len: Arc<Tensor>,
    mass: MassMatrix,
    stiffness: StiffnessMatrix,
    curvature: Vec<f64>,
    laplacians: [Arc<SparseMatrix>; 2],
}

impl ShapeContext {
    pub fn new(mesh: &Mesh) -> Result<Self> {
        let edges = build_edges(mesh)?;
        let x = Tensor::from_points(mesh.vertices());
        let v = mesh.vertices();
        let (edge_i, edge_j): (Vec<_>, Vec<_>) = edges.pairs().unzip();
        let mut lens = Vec::with_capacity(edge_i.len());
        for (&i, &j) in edge_i.iter().zip(&edge_j) {
            let l = dist(&v[i], &v[j]);
            if l == 0.0 {
                return Err(Error::ZeroEdge(i, j));
            }
            lens.push(l);
        }
        let (ring_i, ring_j): (Vec<_>, Vec<_>) = one_rings(mesh).directed_pairs().into_iter().unzip();
        let ring_len = ring_i.iter().zip(&ring_j).map(|(&i, &j)| dist(&v[i], &v[j])).collect::<Vec<_>>();
        let mass = mass_matrix(mesh)?;
        let stiffness = stiffness_matrix(mesh)?;
        let curvature = mean_curvature(mesh, &mass, &stiffness);
        let laplacians = [
            Arc::new(laplacian(&mass, &stiffness, LaplacianKind::MassNormalized)),
            Arc::new(laplacian(&mass, &stiffness, LaplacianKind::Stiffness)),
        ];
        Ok(Self {
            mesh: mesh.clone(),
            x: Arc::new(x),
            edge_i,
            edge_len: Arc::new(Tensor::new(vec![lens.len(), 1], lens)),
            edge_j,
            ring_len: Arc::new(Tensor::new(vec![ring_i.len(), 1], ring_len)),
            ring_i,
            ring_j,
            mass,
            stiffness,
            curvature,
            laplacians,
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn vertices(&self) -> &Arc<Tensor> {
        &self.x
    }

    pub fn n(&self) -> usize {
        self.mesh.vertex_count()
    }

    pub fn mass(&self) -> &MassMatrix {
        &self.mass
    }

    pub fn stiffness(&self) -> &StiffnessMatrix {
        &self.stiffness
    }

    /// Per-vertex curvature magnitude of the unperturbed shape.
    pub fn curvature(&self) -> &[f64] {
        &self.curvature
    }

    pub fn laplacian(&self, kind: LaplacianKind) -> &Arc<SparseMatrix> {
        match kind {
            LaplacianKind::MassNormalized => &self.laplacians[0],
            LaplacianKind::Stiffness => &self.laplacians[1],
        }
    }

    fn check(&self, x_adv: &Tensor) -> Result<()> {
        same_shape(&self.x, x_adv)
    }

    /// Mean over edges of `|len'/len - 1|`.
    pub fn edge_loss(&self, x_adv: &Tensor) -> Result<f64> {
        self.check(x_adv)?;
        let s: f64 = self
            .edge_i
            .iter()
            .zip(&self.edge_j)
            .zip(self.edge_len.data())
            .map(|((&i, &j), l)| (dist(x_adv.row(i), x_adv.row(j)) / l - 1.0).abs())
            .sum();
        Ok(s / self.edge_i.len() as f64)
    }

    pub fn edge_loss_var<'t>(&self, x_adv: Var<'t>) -> Result<Var<'t>> {
        let tape = x_adv.tape();
        let a = x_adv.gather_rows(self.edge_i.clone())?;
        let b = x_adv.gather_rows(self.edge_j.clone())?;
        let l0 = tape.constant(self.edge_len.clone())?;
        Ok(row_lengths(a.sub(b)?)?.div(l0)?.offset(-1.0)?.abs()?.mean()?)
    }

    /// Sum over directed one-ring pairs of the squared change in distance.
    pub fn local_euclidean_loss(&self, x_adv: &Tensor) -> Result<f64> {
        self.check(x_adv)?;
        Ok(self
            .ring_i
            .iter()
            .zip(&self.ring_j)
            .zip(self.ring_len.data())
            .map(|((&i, &j), l)| (l - dist(x_adv.row(i), x_adv.row(j))).powi(2))
            .sum())
    }

    pub fn local_euclidean_loss_var<'t>(&self, x_adv: Var<'t>) -> Result<Var<'t>> {
        let tape = x_adv.tape();
        let a = x_adv.gather_rows(self.ring_i.clone())?;
        let b = x_adv.gather_rows(self.ring_j.clone())?;
        let l0 = tape.constant(self.ring_len.clone())?;
        Ok(l0.sub(row_lengths(a.sub(b)?)?)?.square()?.sum()?)
    }

    pub fn l2_loss(&self, x_adv: &Tensor) -> Result<f64> {
        l2_loss(&self.x, x_adv)
    }

    pub fn chamfer_loss(&self, x_adv: &Tensor) -> Result<f64> {
        chamfer_loss(&self.x, x_adv)
    }

    /// Weighted sum of the enabled reconstruction terms.
    pub fn reconstruction(&self, x_adv: &Tensor, w: &ReconWeights) -> Result<f64> {
        let mut total = 0.0;
        if w.l2 != 0.0 {
            total += w.l2 * self.l2_loss(x_adv)?;
        }
        if w.edge != 0.0 {
            total += w.edge * self.edge_loss(x_adv)?;
        }
        if w.local_euclidean != 0.0 {
            total += w.local_euclidean * self.local_euclidean_loss(x_adv)?;
        }
        if w.chamfer != 0.0 {
            total += w.chamfer * self.chamfer_loss(x_adv)?;
        }
        Ok(total)
    }

    /// Differentiable reconstruction; `None` when every weight is zero.
    pub fn reconstruction_var<'t>(&self, x_adv: Var<'t>, w: &ReconWeights) -> Result<Option<Var<'t>>> {
        let tape = x_adv.tape();
        let mut terms = Vec::new();
        if w.l2 != 0.0 {
            let x = tape.constant(self.x.clone())?;
            terms.push(l2_loss_var(x, x_adv)?.scale(w.l2)?);
        }
        if w.edge != 0.0 {
            terms.push(self.edge_loss_var(x_adv)?.scale(w.edge)?);
        }
        if w.local_euclidean != 0.0 {
            terms.push(self.local_euclidean_loss_var(x_adv)?.scale(w.local_euclidean)?);
        }
        if w.chamfer != 0.0 {
            let x = tape.constant(self.x.clone())?;
            terms.push(chamfer_loss_var(x, x_adv)?.scale(w.chamfer)?);
        }
        let mut it = terms.into_iter();
        let Some(mut acc) = it.next() else { return Ok(None) };
        for t in it {
            acc = acc.add(t)?;
        }
        Ok(Some(acc))
    }

    /// `n * ||L v||_F^2` for a perturbation field `v` on this shape.
    pub fn smoothing(&self, v: &Tensor, kind: LaplacianKind) -> Result<f64> {
        laplacian_smoothing(self.laplacian(kind), &[v])
    }

    pub fn smoothing_var<'t>(&self, v: Var<'t>, kind: LaplacianKind) -> Result<Var<'t>> {
        let n = self.n() as f64;
        Ok(v.sparse_left_mul(self.laplacian(kind).clone())?.square()?.sum()?.scale(n)?)
    }

    /// Mean absolute per-vertex curvature change, using this mesh's
    /// connectivity for the perturbed positions.
    pub fn curvature_distortion(&self, x_adv: &Tensor) -> Result<f64> {
        self.check(x_adv)?;
        let moved = self.mesh.with_vertices(x_adv.to_points())?;
        let h = mean_curvature(&moved, &mass_matrix(&moved)?, &stiffness_matrix(&moved)?);
        Ok(self.curvature.iter().zip(&h).map(|(a, b)| (a - b).abs()).sum::<f64>() / h.len() as f64)
    }
}

/// Edge loss without a prebuilt context.
pub fn edge_loss(mesh: &Mesh, x_adv: &Tensor) -> Result<f64> {
    ShapeContext::new(mesh)?.edge_loss(x_adv)
}

pub fn local_euclidean_loss(mesh: &Mesh, x: &Tensor, x_adv: &Tensor) -> Result<f64> {
    let base = mesh.with_vertices(x.to_points())?;
    ShapeContext::new(&base)?.local_euclidean_loss(x_adv)
}

pub fn curvature_distortion(mesh: &Mesh, x_adv: &Tensor) -> Result<f64> {
    ShapeContext::new(mesh)?.curvature_distortion(x_adv)
}

/// Index of the nearest row of `x` for each row of `y` (lowest index on ties).
pub fn nearest_rows(x: &Tensor, y: &Tensor) -> Vec<usize> {
    (0..y.rows())
        .map(|i| {
            let q = y.row(i);
            let mut best = (f64::INFINITY, 0);
            for j in 0..x.rows() {
                let p = x.row(j);
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect()
}

/// Sum over rows of `x_adv` of the distance to the nearest row of `x`.
pub fn chamfer_loss(x: &Tensor, x_adv: &Tensor) -> Result<f64> {
    if x.is_empty() || x_adv.is_empty() || x.cols() != 3 || x_adv.cols() != 3 {
        return Err(Error::dims(3, x_adv.cols()));
    }
    let nn = nearest_rows(x, x_adv);
    Ok(nn.iter().enumerate().map(|(i, &j)| dist(x_adv.row(i), x.row(j))).sum())
}

/// Nearest neighbours are found on the current values and treated as fixed.
pub fn chamfer_loss_var<'t>(x: Var<'t>, x_adv: Var<'t>) -> Result<Var<'t>> {
    let nn = nearest_rows(&x.value(), &x_adv.value());
    let matched = x.gather_rows(nn)?;
    Ok(row_lengths(x_adv.sub(matched)?)?.sum()?)
}

/// `(1/B) * sum_b n_b * ||L V_b||_F^2`.
pub fn laplacian_smoothing(l: &SparseMatrix, fields: &[&Tensor]) -> Result<f64> {
    if fields.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for v in fields {
        if v.rows() != l.dim() {
            return Err(Error::dims(l.dim(), v.rows()));
        }
        let lv = l.mul_dense(v.data(), v.cols());
        total += v.rows() as f64 * lv.iter().map(|x| x * x).sum::<f64>();
    }
    Ok(total / fields.len() as f64)
}

/// Mean of a list of scalar vars.
pub fn mean_of<'t>(tape: &'t Tape, items: &[Var<'t>]) -> Result<Var<'t>> {
    if items.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0))?);
    }
    let mut acc = items[0];
    for v in &items[1..] {
        acc = acc.add(*v)?;
    }
    Ok(acc.scale(1.0 / items.len() as f64)?)
}
