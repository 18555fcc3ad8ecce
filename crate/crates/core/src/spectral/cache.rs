//! On-disk cache of spectral bases keyed by mesh content and bandwidth.
//!
//! Layout (little endian): magic `SPBC`, `u32` version, `u64` n, `u64` k,
//! then `k` eigenvalues, `n` mass entries and the `n x k` eigenvector block
//! row by row, all as `f64`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{mesh_basis, MassMatrix, SpectralBasis};
use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SPBC";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct SpectralCache {
    dir: PathBuf,
}

pub fn mesh_hash(mesh: &Mesh) -> String {
    let mut h = Sha256::new();
    for p in mesh.vertices() {
        for c in p {
            h.update(c.to_le_bytes());
        }
    }
    for f in mesh.faces() {
        for &i in f {
            h.update((i as u64).to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl SpectralCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn path_for(&self, mesh: &Mesh, k: usize) -> PathBuf {
        self.dir.join(format!("{}_{k}.spbc", mesh_hash(mesh)))
    }

    pub fn get_or_compute(&self, mesh: &Mesh, k: usize) -> Result<SpectralBasis> {
        let path = self.path_for(mesh, k);
        if path.exists() {
            match read_basis(&path) {
                Ok(b) if b.n() == mesh.vertex_count() && b.k() == k => return Ok(b),
                Ok(_) | Err(_) => log::warn!("ignoring stale cache entry {}", path.display()),
            }
        }
        let basis = mesh_basis(mesh, k)?;
        write_basis(&basis, &path)?;
        Ok(basis)
    }
}

pub fn write_basis(basis: &SpectralBasis, path: &Path) -> Result<()> {
    let (n, k) = (basis.n(), basis.k());
    let mut buf = Vec::with_capacity(24 + 8 * (k + n + n * k));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&(k as u64).to_le_bytes());
    let vals = basis
        .eigenvalues()
        .iter()
        .chain(basis.mass().diagonal())
        .chain(basis.eigenvectors().data());
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_basis(path: &Path) -> Result<SpectralBasis> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::Format {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    if bytes.len() < 24 || &bytes[..4] != MAGIC {
        return Err(bad("not a spectral cache file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad("unsupported version"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let k = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let count = k + n + n * k;
    if bytes.len() != 24 + 8 * count {
        return Err(bad("truncated payload"));
    }
    let floats: Vec<f64> = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let eigenvalues = floats[..k].to_vec();
    let mass = MassMatrix::from_diagonal(floats[k..k + n].to_vec());
    let phi = Tensor::new(vec![n, k], floats[k + n..].to_vec());
    SpectralBasis::from_parts(eigenvalues, phi, mass)
}
