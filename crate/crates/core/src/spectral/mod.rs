//! Linear FEM discretisation of the Laplace-Beltrami operator on triangle
//! meshes: lumped mass matrix, cotangent stiffness, the generalised
//! eigenbasis and band-limited synthesis/analysis on top of it.

mod cache;

use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{cross, dot, norm, sub, triangle_areas, Mesh};
use crate::tensor::Tensor;

pub use cache::SpectralCache;

const COT_CLAMP: f64 = 1e6;

/// Diagonal lumped mass matrix: one third of the incident triangle areas.
#[derive(Debug, Clone, PartialEq)]
pub struct MassMatrix {
    diag: Vec<f64>,
}

impl MassMatrix {
    pub fn from_diagonal(diag: Vec<f64>) -> Self {
        Self { diag }
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn total_area(&self) -> f64 {
        self.diag.iter().sum()
    }
}

pub fn mass_matrix(mesh: &Mesh) -> Result<MassMatrix> {
    let areas = triangle_areas(mesh)?;
    let mut diag = vec![0.0; mesh.vertex_count()];
    for (f, a) in mesh.faces().iter().zip(&areas) {
        for &v in f {
            diag[v] += a / 3.0;
        }
    }
    Ok(MassMatrix { diag })
}

/// Symmetric sparse matrix in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    /// Sums duplicate `(row, col)` entries.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self { n, row_ptr, cols, vals }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn max_abs(&self) -> f64 {
        self.vals.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `self * x` for an `n x d` row-major block.
    pub fn mul_dense(&self, x: &[f64], d: usize) -> Vec<f64> {
        assert_eq!(x.len(), self.n * d);
        let mut out = vec![0.0; self.n * d];
        for i in 0..self.n {
            let o = &mut out[i * d..(i + 1) * d];
            for (j, w) in self.row(i) {
                for (oc, xc) in o.iter_mut().zip(&x[j * d..(j + 1) * d]) {
                    *oc += w * xc;
                }
            }
        }
        out
    }

    /// `self^T * x`.
    pub fn mul_dense_transposed(&self, x: &[f64], d: usize) -> Vec<f64> {
        assert_eq!(x.len(), self.n * d);
        let mut out = vec![0.0; self.n * d];
        for i in 0..self.n {
            let xi = &x[i * d..(i + 1) * d];
            for (j, w) in self.row(i) {
                for (oc, xc) in out[j * d..(j + 1) * d].iter_mut().zip(xi) {
                    *oc += w * xc;
                }
            }
        }
        out
    }

    /// Row-scaled copy `diag(s) * self`.
    pub fn scale_rows(&self, s: &[f64]) -> Self {
        let mut out = self.clone();
        for (i, si) in s.iter().enumerate().take(self.n) {
            for v in &mut out.vals[self.row_ptr[i]..self.row_ptr[i + 1]] {
                *v *= si;
            }
        }
        out
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                d[i * self.n + j] = v;
            }
        }
        d
    }
}

/// Cotangent stiffness `W`, positive semi-definite with `W * 1 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct StiffnessMatrix(pub SparseMatrix);

impl std::ops::Deref for StiffnessMatrix {
    type Target = SparseMatrix;
    fn deref(&self) -> &SparseMatrix {
        &self.0
    }
}

/// Off-diagonal entries are `-(cot a + cot b) / 2`, diagonal entries the
/// negated off-diagonal row sum.
pub fn stiffness_matrix(mesh: &Mesh) -> Result<StiffnessMatrix> {
    let v = mesh.vertices();
    let n = mesh.vertex_count();
    let mut triplets = Vec::with_capacity(mesh.face_count() * 12);
    let mut clamped = 0usize;
    for f in mesh.faces() {
        for k in 0..3 {
            let (i, j, o) = (f[k], f[(k + 1) % 3], f[(k + 2) % 3]);
            let a = sub(v[i], v[o]);
            let b = sub(v[j], v[o]);
            let s = norm(cross(a, b));
            let mut cot = if s > 0.0 { dot(a, b) / s } else { f64::INFINITY };
            if !cot.is_finite() || cot.abs() > COT_CLAMP {
                clamped += 1;
                cot = if cot.is_nan() { 0.0 } else { cot.clamp(-COT_CLAMP, COT_CLAMP) };
            }
            let w = 0.5 * cot;
            triplets.push((i, j, -w));
            triplets.push((j, i, -w));
            triplets.push((i, i, w));
            triplets.push((j, j, w));
        }
    }
    if clamped > 0 {
        log::warn!("near-degenerate mesh: {clamped} cotangents clamped to +/-{COT_CLAMP:e}");
    }
    Ok(StiffnessMatrix(SparseMatrix::from_triplets(n, triplets)))
}

/// Which discrete Laplacian the smoothing term uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaplacianKind {
    /// `A^-1 W`.
    #[default]
    MassNormalized,
    /// `W` alone.
    Stiffness,
}

pub fn laplacian(mass: &MassMatrix, stiffness: &StiffnessMatrix, kind: LaplacianKind) -> SparseMatrix {
    match kind {
        LaplacianKind::MassNormalized => {
            let inv: Vec<f64> = mass.diag.iter().map(|a| 1.0 / a).collect();
            stiffness.scale_rows(&inv)
        }
        LaplacianKind::Stiffness => stiffness.0.clone(),
    }
}

/// Leading `k` eigenpairs of `W phi = lambda A phi`, with `Phi^T A Phi = I`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    eigenvalues: Vec<f64>,
    /// `n x k`, row-major.
    eigenvectors: Tensor,
    mass: MassMatrix,
}

impl SpectralBasis {
    pub fn from_parts(eigenvalues: Vec<f64>, eigenvectors: Tensor, mass: MassMatrix) -> Result<Self> {
        if eigenvectors.rows() != mass.len() || eigenvectors.cols() != eigenvalues.len() {
            return Err(Error::dims(
                format!("{} x {}", mass.len(), eigenvalues.len()),
                format!("{} x {}", eigenvectors.rows(), eigenvectors.cols()),
            ));
        }
        Ok(Self {
            eigenvalues,
            eigenvectors,
            mass,
        })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &Tensor {
        &self.eigenvectors
    }

    pub fn mass(&self) -> &MassMatrix {
        &self.mass
    }

    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn n(&self) -> usize {
        self.mass.len()
    }

    /// Basis restricted to its first `k` columns.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k() {
            return Err(Error::dims(format!("1..={}", self.k()), k));
        }
        let n = self.n();
        let mut data = Vec::with_capacity(n * k);
        for i in 0..n {
            data.extend_from_slice(&self.eigenvectors.row(i)[..k]);
        }
        Ok(Self {
            eigenvalues: self.eigenvalues[..k].to_vec(),
            eigenvectors: Tensor::new(vec![n, k], data),
            mass: self.mass.clone(),
        })
    }

    /// Column `j` of `Phi`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n()).map(|i| self.eigenvectors.get(i, j)).collect()
    }
}

/// Index of the largest-magnitude entry; entries within a relative `1e-9`
/// of the largest count as ties and the lowest index wins.
pub fn sign_anchor(col: &[f64]) -> usize {
    let max = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    col.iter().position(|v| v.abs() >= max * (1.0 - 1e-9)).unwrap_or(0)
}

/// Dense solve through `B = A^-1/2 W A^-1/2`. Column signs are fixed so the
/// largest-magnitude entry of each eigenvector is positive.
pub fn eigendecompose(w: &StiffnessMatrix, a: &MassMatrix, k: usize) -> Result<SpectralBasis> {
    let n = w.dim();
    if a.len() != n {
        return Err(Error::dims(format!("mass of length {n}"), a.len()));
    }
    if k == 0 || k > n {
        return Err(Error::dims(format!("1 <= k <= {n}"), k));
    }
    if n > 4000 {
        log::warn!("dense eigensolve on {n} vertices");
    }
    let inv_sqrt: Vec<f64> = a.diag.iter().map(|x| 1.0 / x.sqrt()).collect();
    let mut b = Mat::<f64>::zeros(n, n);
    for i in 0..n {
        for (j, v) in w.row(i) {
            b[(i, j)] = v * inv_sqrt[i] * inv_sqrt[j];
        }
    }
    let eig = b
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Convergence(format!("{e:?}")))?;
    let s = eig.S().column_vector();
    let u = eig.U();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&p, &q| s[p].total_cmp(&s[q]));

    let mut eigenvalues = Vec::with_capacity(k);
    let mut phi = vec![0.0; n * k];
    for (col, &src) in order.iter().take(k).enumerate() {
        eigenvalues.push(s[src]);
        let col_vals: Vec<f64> = (0..n).map(|i| u[(i, src)] * inv_sqrt[i]).collect();
        let sign = if col_vals[sign_anchor(&col_vals)] < 0.0 { -1.0 } else { 1.0 };
        for (i, v) in col_vals.iter().enumerate() {
            phi[i * k + col] = sign * v;
        }
    }
    if !eigenvalues.iter().all(|x| x.is_finite()) || !phi.iter().all(|x| x.is_finite()) {
        return Err(Error::Convergence("non-finite eigenpairs".into()));
    }
    SpectralBasis::from_parts(eigenvalues, Tensor::new(vec![n, k], phi), a.clone())
}

/// Convenience: mass, stiffness and the first `k` eigenpairs of a mesh.
pub fn mesh_basis(mesh: &Mesh, k: usize) -> Result<SpectralBasis> {
    let a = mass_matrix(mesh)?;
    let w = stiffness_matrix(mesh)?;
    eigendecompose(&w, &a, k)
}

/// `Phi * v` for a `k x d` coefficient block.
pub fn synthesize(basis: &SpectralBasis, coeffs: &Tensor) -> Result<Tensor> {
    if coeffs.rows() != basis.k() {
        return Err(Error::dims(format!("{} coefficient rows", basis.k()), coeffs.rows()));
    }
    Ok(basis.eigenvectors.matmul(coeffs))
}

/// `Phi^T A f` for an `n x d` field.
pub fn analyze(basis: &SpectralBasis, field: &Tensor) -> Result<Tensor> {
    let n = basis.n();
    if field.rows() != n {
        return Err(Error::dims(format!("{n} field rows"), field.rows()));
    }
    let d = field.cols();
    let mut weighted = field.clone();
    for (i, a) in basis.mass.diag.iter().enumerate() {
        for x in &mut weighted.data_mut()[i * d..(i + 1) * d] {
            *x *= a;
        }
    }
    Ok(basis.eigenvectors.transpose().matmul(&weighted))
}

/// `sqrt(tr(A V V^T))`.
pub fn field_norm(mass: &MassMatrix, field: &Tensor) -> Result<f64> {
    if field.rows() != mass.len() {
        return Err(Error::dims(format!("{} field rows", mass.len()), field.rows()));
    }
    let d = field.cols();
    let s: f64 = mass
        .diag
        .iter()
        .enumerate()
        .map(|(i, a)| a * field.row(i).iter().map(|x| x * x).sum::<f64>())
        .sum();
    debug_assert_eq!(field.len(), mass.len() * d);
    Ok(s.sqrt())
}

/// Per-vertex magnitude of `A^-1 W X`. On a sphere of radius `r` this is
/// close to `2 / r`.
pub fn mean_curvature(mesh: &Mesh, mass: &MassMatrix, stiffness: &StiffnessMatrix) -> Vec<f64> {
    let lx = stiffness.mul_dense(&mesh.flat_vertices(), 3);
    lx.chunks_exact(3)
        .zip(&mass.diag)
        .map(|(c, a)| (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt() / a)
        .collect()
}

/// Mean curvature from geometry alone.
pub fn mesh_mean_curvature(mesh: &Mesh) -> Result<Vec<f64>> {
    let a = mass_matrix(mesh)?;
    let w = stiffness_matrix(mesh)?;
    Ok(mean_curvature(mesh, &a, &w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::shapes;

    #[test]
    fn mass_of_equilateral_and_tetrahedron() {
        let h = 3f64.sqrt() / 2.0;
        let tri = Mesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.5, h, 0.0]], vec![[0, 1, 2]]).unwrap();
        for a in mass_matrix(&tri).unwrap().diagonal() {
            assert!((a - 3f64.sqrt() / 12.0).abs() < 1e-12);
        }
        let tet = mass_matrix(&shapes::tetrahedron()).unwrap();
        for a in tet.diagonal() {
            assert!((a - 3f64.sqrt() / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mass_scales_quadratically() {
        let m = shapes::icosphere(1.0, 1);
        let scaled = m.with_vertices(m.vertices().iter().map(|p| p.map(|x| 3.0 * x)).collect()).unwrap();
        let (a, b) = (mass_matrix(&m).unwrap(), mass_matrix(&scaled).unwrap());
        for (x, y) in a.diagonal().iter().zip(b.diagonal()) {
            assert!((y - 9.0 * x).abs() < 1e-12 * y);
        }
    }

    #[test]
    fn constant_vector_in_kernel() {
        let w = stiffness_matrix(&shapes::icosphere(1.0, 2)).unwrap();
        let ones = vec![1.0; w.dim()];
        let r = w.mul_dense(&ones, 1);
        assert!(r.iter().all(|x| x.abs() < 1e-9 * w.max_abs()));
    }

    #[test]
    fn square_diagonal_has_zero_weight() {
        let m = Mesh::new(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        let w = stiffness_matrix(&m).unwrap();
        assert!(w.get(0, 2).abs() < 1e-15);
        assert!((w.get(0, 1) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn degenerate_cotangent_is_clamped() {
        let m = Mesh::new(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.5, 1e-9, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let w = stiffness_matrix(&m).unwrap();
        assert!(w.max_abs() <= COT_CLAMP);
    }

    #[test]
    fn constant_eigenfunction() {
        let m = shapes::icosphere(1.0, 2);
        let basis = mesh_basis(&m, 1).unwrap();
        let c = 1.0 / basis.mass().total_area().sqrt();
        assert!(basis.eigenvalues()[0].abs() < 1e-8);
        assert!(basis.column(0).iter().all(|x| (x - c).abs() < 1e-6));
    }

    #[test]
    fn full_basis_is_mass_orthonormal() {
        let m = shapes::icosahedron();
        let basis = mesh_basis(&m, 12).unwrap();
        let phi = basis.eigenvectors();
        let gram = analyze(&basis, phi).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((gram.get(i, j) - e).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn field_norm_of_constant_field() {
        let m = shapes::icosphere(1.0, 2);
        let a = mass_matrix(&m).unwrap();
        let n = m.vertex_count();
        let v = Tensor::new(vec![n, 3], (0..n).flat_map(|_| [1.0, 0.0, 0.0]).collect());
        assert!((field_norm(&a, &v).unwrap() - a.total_area().sqrt()).abs() < 1e-12);
        assert_eq!(field_norm(&a, &Tensor::zeros(vec![n, 3])).unwrap(), 0.0);
        assert!(field_norm(&a, &Tensor::zeros(vec![n - 1, 3])).is_err());
    }

    #[test]
    fn synthesize_checks_dimensions() {
        let basis = mesh_basis(&shapes::icosahedron(), 4).unwrap();
        assert!(synthesize(&basis, &Tensor::zeros(vec![3, 3])).is_err());
        assert!(analyze(&basis, &Tensor::zeros(vec![11, 3])).is_err());
        let zero = synthesize(&basis, &Tensor::zeros(vec![4, 3])).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
    }
}
