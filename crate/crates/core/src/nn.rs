//! Dense layers, parameter binding and the shared point-cloud trunk.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grad::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// `y = x w + b` with `w: [in, out]` and `b: [1, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Arc<Tensor>,
    pub b: Arc<Tensor>,
}

impl Linear {
    /// Uniform in `+-1/sqrt(in)` for weights and biases.
    pub fn init(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let w = (0..inputs * outputs).map(|_| rng.gen_range(-bound..bound)).collect();
        let b = (0..outputs).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            w: Arc::new(Tensor::new(vec![inputs, outputs], w)),
            b: Arc::new(Tensor::new(vec![1, outputs], b)),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            w: Arc::new(Tensor::zeros(vec![inputs, outputs])),
            b: Arc::new(Tensor::zeros(vec![1, outputs])),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.rows()
    }

    pub fn outputs(&self) -> usize {
        self.w.cols()
    }
}

/// Layers placed on a tape, either as leaves or as constants.
pub struct Bound<'t> {
    pub layers: Vec<(Var<'t>, Var<'t>)>,
}

pub fn bind<'t>(tape: &'t Tape, layers: &[Linear], trainable: bool) -> Result<Bound<'t>> {
    let put = |t: &Arc<Tensor>| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
    let mut out = Vec::with_capacity(layers.len());
    for l in layers {
        out.push((put(&l.w)?, put(&l.b)?));
    }
    Ok(Bound { layers: out })
}

impl<'t> Bound<'t> {
    pub fn apply(&self, i: usize, x: Var<'t>) -> Result<Var<'t>> {
        let (w, b) = self.layers[i];
        Ok(x.matmul(w)?.add_row(b)?)
    }

    /// Gradients in `params_mut` order (weights then bias per layer).
    pub fn grads(&self, g: &mut Gradients) -> Vec<Tensor> {
        self.layers.iter().flat_map(|(w, b)| [g.take(*w), g.take(*b)]).collect()
    }
}

pub fn params_mut(layers: &mut [Linear]) -> Vec<&mut Tensor> {
    layers
        .iter_mut()
        .flat_map(|l| [Arc::make_mut(&mut l.w), Arc::make_mut(&mut l.b)])
        .collect()
}

/// Multiplies by a fresh inverted-dropout mask.
pub fn dropout<'t>(x: Var<'t>, p: f64, rng: &mut ChaCha8Rng) -> Result<Var<'t>> {
    if p <= 0.0 {
        return Ok(x);
    }
    let (r, c) = x.shape();
    let keep = 1.0 / (1.0 - p);
    let mask = (0..r * c).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
    let mask = x.tape().constant(Tensor::new(vec![r, c], mask))?;
    Ok(x.mul(mask)?)
}

/// Subtracts each shape's vertex centroid. `x` stacks `batch` shapes of equal size.
pub fn center_shapes<'t>(x: Var<'t>, batch: usize) -> Result<Var<'t>> {
    let (rows, cols) = x.shape();
    let n = rows / batch.max(1);
    let mut parts = Vec::with_capacity(batch);
    for b in 0..batch {
        let s = if batch == 1 { x } else { x.slice(0, b * n, (b + 1) * n)? };
        let mean = s.sum_axis(0)?.scale(1.0 / n as f64)?;
        parts.push(s.sub(mean.broadcast(n, cols)?)?);
    }
    if batch == 1 {
        Ok(parts[0])
    } else {
        Ok(Var::concat(&parts, 0)?)
    }
}

/// Per-point MLP followed by a max over each shape's points.
pub struct TrunkOutput<'t> {
    /// Output of the second per-point layer, `[batch * n, width]`.
    pub local: Var<'t>,
    /// `[batch, last width]`.
    pub global: Var<'t>,
}

/// Runs layers `0..depth` of `bound` per point, then max-pools per shape.
pub fn trunk<'t>(bound: &Bound<'t>, depth: usize, x: Var<'t>, batch: usize) -> Result<TrunkOutput<'t>> {
    let mut h = x;
    let mut local = x;
    for i in 0..depth {
        h = bound.apply(i, h)?.relu()?;
        if i == 1.min(depth - 1) {
            local = h;
        }
    }
    Ok(TrunkOutput {
        local,
        global: h.max_rows_grouped(batch)?,
    })
}

const VERSION: u32 = 1;

/// Little-endian layout: magic, version, a `u64` header, layer count and
/// `(in, out)` pairs, an `f64` header, then every weight and bias.
pub fn write_checkpoint(path: &Path, magic: &[u8; 4], ints: &[u64], floats: &[f64], layers: &[Linear]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(ints.len() as u64).to_le_bytes());
    for v in ints {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(floats.len() as u64).to_le_bytes());
    for v in floats {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(layers.len() as u64).to_le_bytes());
    for l in layers {
        buf.extend_from_slice(&(l.inputs() as u64).to_le_bytes());
        buf.extend_from_slice(&(l.outputs() as u64).to_le_bytes());
    }
    for l in layers {
        for v in l.w.data().iter().chain(l.b.data()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub struct Checkpoint {
    pub ints: Vec<u64>,
    pub floats: Vec<f64>,
    pub layers: Vec<Linear>,
}

pub fn read_checkpoint(path: &Path, magic: &[u8; 4]) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::Format {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated checkpoint"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != magic {
        return Err(bad("wrong magic"));
    }
    if u32::from_le_bytes(take(4)?.try_into().unwrap()) != VERSION {
        return Err(bad("unsupported version"));
    }
    let mut u64_at = || -> Result<u64> { Ok(u64::from_le_bytes(take(8)?.try_into().unwrap())) };
    let n_ints = u64_at()? as usize;
    let ints = (0..n_ints).map(|_| u64_at()).collect::<Result<Vec<_>>>()?;
    let n_floats = u64_at()? as usize;
    let floats = (0..n_floats).map(|_| u64_at().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
    let n_layers = u64_at()? as usize;
    if n_layers > 64 {
        return Err(bad("implausible layer count"));
    }
    let shapes = (0..n_layers)
        .map(|_| Ok((u64_at()? as usize, u64_at()? as usize)))
        .collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(n_layers);
    for (i, o) in shapes {
        let w = (0..i * o).map(|_| u64_at().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
        let b = (0..o).map(|_| u64_at().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
        layers.push(Linear {
            w: Arc::new(Tensor::new(vec![i, o], w)),
            b: Arc::new(Tensor::new(vec![1, o], b)),
        });
    }
    if u64_at().is_ok() {
        return Err(bad("trailing bytes"));
    }
    Ok(Checkpoint { ints, floats, layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layers = vec![Linear::init(3, 4, &mut rng), Linear::init(4, 2, &mut rng)];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_checkpoint(&p, b"TEST", &[7, 8], &[0.25], &layers).unwrap();
        let c = read_checkpoint(&p, b"TEST").unwrap();
        assert_eq!(c.ints, vec![7, 8]);
        assert_eq!(c.floats, vec![0.25]);
        assert_eq!(c.layers, layers);
        assert!(read_checkpoint(&p, b"NOPE").is_err());
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_checkpoint(&p, b"TEST").is_err());
    }

    #[test]
    fn centering_removes_each_mean() {
        let tape = Tape::new();
        let x = tape
            .leaf(Tensor::new(vec![4, 3], vec![1.0, 2.0, 3.0, 3.0, 2.0, 1.0, 10.0, 0.0, 0.0, 12.0, 0.0, 2.0]))
            .unwrap();
        let c = center_shapes(x, 2).unwrap().value();
        assert_eq!(c.data(), &[-1.0, 0.0, 1.0, 1.0, 0.0, -1.0, -1.0, 0.0, -1.0, 1.0, 0.0, 1.0]);
    }
}
