//! wasm-bindgen bindings for the static demo page in `www/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specadv::dataset::class_pattern;
use specadv::mesh::{shapes, Mesh};
use specadv::spectral::{mesh_basis, mesh_mean_curvature, synthesize, SpectralBasis};
use specadv::Tensor;
use wasm_bindgen::prelude::*;

const MAX_K: usize = 80;

/// A sphere-like shape of one synthetic class together with its spectral basis.
#[wasm_bindgen]
pub struct Demo {
    mesh: Mesh,
    basis: SpectralBasis,
    curvature: Vec<f64>,
    perturbed: Vec<f64>,
}

fn js_err(e: specadv::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
impl Demo {
    /// `class` picks the radial pattern, `subdivisions` the resolution (<= 3).
    #[wasm_bindgen(constructor)]
    pub fn new(class: usize, subdivisions: u32) -> Result<Demo, JsError> {
        let base = shapes::icosphere(1.0, subdivisions.min(3));
        let v = base
            .vertices()
            .iter()
            .map(|p| {
                let s = 1.0 + 0.3 * class_pattern(class, *p);
                [p[0] * s, p[1] * s, p[2] * s]
            })
            .collect();
        let mesh = base.with_vertices(v).map_err(js_err)?;
        let k = MAX_K.min(mesh.vertex_count());
        let basis = mesh_basis(&mesh, k).map_err(js_err)?;
        let curvature = mesh_mean_curvature(&mesh).map_err(js_err)?;
        let perturbed = flat(mesh.vertices());
        Ok(Demo {
            mesh,
            basis,
            curvature,
            perturbed,
        })
    }

    #[wasm_bindgen(js_name = vertexCount)]
    pub fn vertex_count(&self) -> usize {
        self.mesh.vertex_count()
    }

    #[wasm_bindgen(js_name = maxK)]
    pub fn max_k(&self) -> usize {
        self.basis.k()
    }

    /// Flat `[x, y, z, ...]` of the current (possibly perturbed) shape.
    pub fn positions(&self) -> Vec<f64> {
        self.perturbed.clone()
    }

    /// Flat triangle indices.
    pub fn faces(&self) -> Vec<u32> {
        self.mesh.faces().iter().flat_map(|f| f.iter().map(|&i| i as u32)).collect()
    }

    /// Values of eigenfunction `j` at every vertex, and its eigenvalue last.
    pub fn eigenfunction(&self, j: usize) -> Result<Vec<f64>, JsError> {
        if j >= self.basis.k() {
            return Err(JsError::new(&format!("eigenfunction index {j} out of range")));
        }
        let mut out = self.basis.column(j);
        out.push(self.basis.eigenvalues()[j]);
        Ok(out)
    }

    /// Replaces the shape by `X + Phi_k v` with random coefficients scaled
    /// so the largest vertex displacement equals `amplitude`.
    pub fn perturb(&mut self, k: usize, amplitude: f64, seed: u64) -> Result<(), JsError> {
        self.perturbed = perturbation(&self.mesh, &self.basis, k, amplitude, seed).map_err(js_err)?;
        Ok(())
    }

    pub fn reset(&mut self) {
        self.perturbed = flat(self.mesh.vertices());
    }

    /// Per-vertex `|H' - H|` between the perturbed and the original shape.
    #[wasm_bindgen(js_name = curvatureChange)]
    pub fn curvature_change(&self) -> Result<Vec<f64>, JsError> {
        let pts = self.perturbed.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let moved = self.mesh.with_vertices(pts).map_err(js_err)?;
        let h = mesh_mean_curvature(&moved).map_err(js_err)?;
        Ok(h.iter().zip(&self.curvature).map(|(a, b)| (a - b).abs()).collect())
    }
}

fn flat(points: &[[f64; 3]]) -> Vec<f64> {
    points.iter().flatten().copied().collect()
}

/// Band-limited random displacement of `mesh`, flattened.
pub fn perturbation(mesh: &Mesh, basis: &SpectralBasis, k: usize, amplitude: f64, seed: u64) -> specadv::Result<Vec<f64>> {
    let k = k.clamp(1, basis.k());
    let truncated = basis.truncated(k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // higher modes get smaller weights so low k and high k look comparable
    let coeffs = (0..k * 3)
        .map(|i| rng.gen_range(-1.0..1.0) / (1.0 + basis.eigenvalues()[i / 3]).sqrt())
        .collect();
    let field = synthesize(&truncated, &Tensor::new(vec![k, 3], coeffs))?;
    let peak = field
        .data()
        .chunks_exact(3)
        .map(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt())
        .fold(0.0, f64::max);
    let scale = if peak > 0.0 { amplitude / peak } else { 0.0 };
    Ok(mesh
        .vertices()
        .iter()
        .zip(field.data().chunks_exact(3))
        .flat_map(|(p, d)| [p[0] + scale * d[0], p[1] + scale * d[1], p[2] + scale * d[2]])
        .collect())
}
