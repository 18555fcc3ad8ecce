//! Point-cloud classifier: shared per-point MLP, max pooling over points,
//! and a fully connected head.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, LabeledMesh, Split};
use crate::error::{Error, Result};
use crate::grad::{GradError, Tape, Var};
use crate::nn::{self, bind, params_mut, Bound, Linear};
use crate::optim::Adam;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SPCL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub point_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub classes: usize,
    pub dropout: f64,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            point_widths: vec![64, 64, 128, 1024],
            head_widths: vec![512, 256],
            classes: 10,
            dropout: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierNet {
    arch: Arch,
    layers: Vec<Linear>,
}

/// Lowest index of the maximum.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

impl ClassifierNet {
    pub fn new(arch: Arch, seed: u64) -> Result<Self> {
        if arch.point_widths.is_empty() || arch.classes < 2 || !(0.0..1.0).contains(&arch.dropout) {
            return Err(Error::Config(format!("unusable classifier architecture {arch:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![3];
        widths.extend(&arch.point_widths);
        widths.extend(&arch.head_widths);
        widths.push(arch.classes);
        let layers = widths.windows(2).map(|w| Linear::init(w[0], w[1], &mut rng)).collect();
        Ok(Self { arch, layers })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<Bound<'t>> {
        bind(tape, &self.layers, trainable)
    }

    /// Logits `[batch, C]` for `batch` stacked shapes of equal size.
    /// Dropout applies only when `rng` is given.
    pub fn logits_var<'t>(
        &self,
        bound: &Bound<'t>,
        x: Var<'t>,
        batch: usize,
        center: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'t>> {
        let (rows, cols) = x.shape();
        if cols != 3 || batch == 0 || rows == 0 || rows % batch != 0 {
            return Err(Error::dims(format!("{batch} stacked n x 3 clouds"), format!("{rows} x {cols}")));
        }
        let x = if center { nn::center_shapes(x, batch)? } else { x };
        let depth = self.arch.point_widths.len();
        let mut h = nn::trunk(bound, depth, x, batch)?.global;
        let mut rng = rng;
        for i in depth..self.layers.len() - 1 {
            h = bound.apply(i, h)?.relu()?;
            if let Some(r) = rng.as_deref_mut() {
                h = nn::dropout(h, self.arch.dropout, r)?;
            }
        }
        bound.apply(self.layers.len() - 1, h)
    }

    /// Evaluation-mode logits for one `n x 3` cloud.
    pub fn forward(&self, points: &Tensor, center: bool) -> Result<Vec<f64>> {
        if !points.is_finite() {
            return Err(GradError::NonFiniteValue { op: "forward" }.into());
        }
        let tape = Tape::new();
        let bound = self.bind(&tape, false)?;
        let x = tape.constant(Arc::new(points.clone()))?;
        Ok(self.logits_var(&bound, x, 1, center, None)?.value().data().to_vec())
    }

    /// Evaluation-mode logits for several clouds of equal size, one row each.
    pub fn forward_batch(&self, clouds: &[&Tensor], center: bool) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false)?;
        let x = stack(&tape, clouds)?;
        Ok(self.logits_var(&bound, x, clouds.len(), center, None)?.value().as_ref().clone())
    }

    pub fn predict(&self, points: &Tensor, center: bool) -> Result<usize> {
        Ok(argmax(&self.forward(points, center)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let a = &self.arch;
        let mut ints = vec![a.classes as u64, a.point_widths.len() as u64];
        ints.extend(a.point_widths.iter().map(|&w| w as u64));
        ints.push(a.head_widths.len() as u64);
        ints.extend(a.head_widths.iter().map(|&w| w as u64));
        nn::write_checkpoint(path, MAGIC, &ints, &[a.dropout], &self.layers)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = nn::read_checkpoint(path, MAGIC)?;
        let bad = |m: &str| Error::Format {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        let ints: Vec<usize> = c.ints.iter().map(|&v| v as usize).collect();
        let (&classes, rest) = ints.split_first().ok_or_else(|| bad("missing header"))?;
        let (&np, rest) = rest.split_first().ok_or_else(|| bad("missing header"))?;
        if rest.len() < np + 1 {
            return Err(bad("short header"));
        }
        let point_widths = rest[..np].to_vec();
        let nh = rest[np];
        let head_widths = rest.get(np + 1..np + 1 + nh).ok_or_else(|| bad("short header"))?.to_vec();
        let arch = Arch {
            point_widths,
            head_widths,
            classes,
            dropout: *c.floats.first().ok_or_else(|| bad("missing dropout"))?,
        };
        let mut widths = vec![3];
        widths.extend(&arch.point_widths);
        widths.extend(&arch.head_widths);
        widths.push(classes);
        let ok = c.layers.len() + 1 == widths.len()
            && c.layers.iter().zip(widths.windows(2)).all(|(l, w)| l.inputs() == w[0] && l.outputs() == w[1]);
        if !ok {
            return Err(bad("layer shapes do not chain"));
        }
        Ok(Self { arch, layers: c.layers })
    }
}

/// Stacks clouds row-wise onto a tape as a constant.
pub fn stack<'t>(tape: &'t Tape, clouds: &[&Tensor]) -> Result<Var<'t>> {
    let n = clouds.first().map(|c| c.rows()).unwrap_or(0);
    if clouds.iter().any(|c| c.rows() != n || c.cols() != 3) {
        return Err(Error::dims(format!("clouds of {n} x 3"), "mixed sizes"));
    }
    let data: Vec<f64> = clouds.iter().flat_map(|c| c.data().iter().copied()).collect();
    Ok(tape.constant(Tensor::new(vec![clouds.len() * n, 3], data))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    /// Apply a random rotation at all.
    pub rotate: bool,
    /// Rotate about a uniformly random axis instead of the vertical one.
    pub full_rotation: bool,
    /// Each translation component is uniform in `+-translation`.
    pub translation: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            rotate: true,
            full_rotation: false,
            translation: 0.1,
        }
    }
}

/// Rotation about `axis` (unit) by `angle`, then translation.
pub fn rigid_transform(points: &Tensor, axis: [f64; 3], angle: f64, shift: [f64; 3]) -> Tensor {
    let (s, c) = angle.sin_cos();
    let [x, y, z] = axis;
    let t = 1.0 - c;
    let r = [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ];
    let mut out = Vec::with_capacity(points.len());
    for p in points.data().chunks_exact(3) {
        for k in 0..3 {
            out.push(r[k][0] * p[0] + r[k][1] * p[1] + r[k][2] * p[2] + shift[k]);
        }
    }
    Tensor::new(vec![points.rows(), 3], out)
}

/// Random rigid motion: rotation (vertical axis unless `full_rotation`),
/// then a bounded translation.
pub fn augment(points: &Tensor, rng: &mut ChaCha8Rng, cfg: &Augmentation) -> Tensor {
    let angle = if cfg.rotate { rng.gen_range(0.0..2.0 * PI) } else { 0.0 };
    let axis = if cfg.rotate && cfg.full_rotation {
        loop {
            let v: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if l > 1e-3 && l <= 1.0 {
                break [v[0] / l, v[1] / l, v[2] / l];
            }
        }
    } else {
        [0.0, 0.0, 1.0]
    };
    let t = cfg.translation;
    let shift = if t > 0.0 {
        [rng.gen_range(-t..=t), rng.gen_range(-t..=t), rng.gen_range(-t..=t)]
    } else {
        [0.0; 3]
    };
    rigid_transform(points, axis, angle, shift)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub augmentation: Augmentation,
    pub center: bool,
    /// Return the weights of the epoch with the best validation accuracy
    /// (lower validation loss breaks ties) instead of the last epoch.
    pub select_best_val: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            batch_size: 8,
            seed: 0,
            augmentation: Augmentation::default(),
            center: false,
            select_best_val: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    /// Epoch whose weights were kept; 0 means the untrained weights.
    pub selected_epoch: usize,
    pub seed: u64,
    pub augmentation: Augmentation,
}

impl TrainReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.train_acc.to_string(),
                e.val_loss.to_string(),
                e.val_acc.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "{}", serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Mean cross-entropy and accuracy in evaluation mode. `(NaN, NaN)` for an empty set.
pub fn evaluate(net: &ClassifierNet, items: &[&LabeledMesh], center: bool) -> Result<(f64, f64)> {
    if items.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in items.chunks(8) {
        let clouds: Vec<Tensor> = chunk.iter().map(|m| Tensor::from_points(m.mesh.vertices())).collect();
        let refs: Vec<&Tensor> = clouds.iter().collect();
        let tape = Tape::new();
        let bound = net.bind(&tape, false)?;
        let x = stack(&tape, &refs)?;
        let z = net.logits_var(&bound, x, refs.len(), center, None)?;
        let labels: Vec<usize> = chunk.iter().map(|m| m.label).collect();
        loss += z.softmax_cross_entropy(&labels)?.item() * chunk.len() as f64;
        let zv = z.value();
        for (i, &l) in labels.iter().enumerate() {
            correct += (argmax(zv.row(i)) == l) as usize;
        }
    }
    Ok((loss / items.len() as f64, correct as f64 / items.len() as f64))
}

/// Adam on mean cross-entropy over augmented mini-batches of the train split.
pub fn train_classifier(ds: &Dataset, arch: &Arch, cfg: &TrainConfig) -> Result<(ClassifierNet, TrainReport)> {
    let train = ds.split(Split::Train);
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let mut arch = arch.clone();
    arch.classes = ds.classes.max(arch.classes);
    let mut net = ClassifierNet::new(arch, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = Adam::new(cfg.lr);
    let val = ds.split(Split::Val);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let clouds: Vec<Tensor> = train.iter().map(|m| Tensor::from_points(m.mesh.vertices())).collect();
    let mut best: Option<(usize, f64, f64, ClassifierNet)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let aug: Vec<Tensor> = batch.iter().map(|&i| augment(&clouds[i], &mut rng, &cfg.augmentation)).collect();
            let refs: Vec<&Tensor> = aug.iter().collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();
            let tape = Tape::new();
            let bound = net.bind(&tape, true)?;
            let x = stack(&tape, &refs)?;
            let step = (|| -> Result<_> {
                let z = net.logits_var(&bound, x, refs.len(), cfg.center, Some(&mut rng))?;
                let loss = z.softmax_cross_entropy(&labels)?;
                Ok((z, loss))
            })();
            let (z, loss) = match step {
                Ok(v) => v,
                Err(Error::Grad(GradError::NonFiniteValue { .. })) => {
                    return Err(Error::Divergence { epoch, loss: f64::NAN })
                }
                Err(e) => return Err(e),
            };
            let zv = z.value();
            for (i, &l) in labels.iter().enumerate() {
                correct += (argmax(zv.row(i)) == l) as usize;
            }
            loss_sum += loss.item() * batch.len() as f64;
            let mut g = tape.backward(loss)?;
            let grads = bound.grads(&mut g);
            drop(bound);
            drop(tape);
            opt.step(&mut params_mut(net.layers_mut()), &grads);
        }
        let train_loss = loss_sum / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Divergence { epoch, loss: train_loss });
        }
        let (val_loss, val_acc) = evaluate(&net, &val, cfg.center)?;
        let rec = EpochRecord {
            epoch,
            train_loss,
            train_acc: correct as f64 / train.len() as f64,
            val_loss,
            val_acc,
        };
        log::info!(
            "epoch {epoch}: train loss {train_loss:.4} acc {:.3}, val loss {val_loss:.4} acc {val_acc:.3}",
            rec.train_acc
        );
        epochs.push(rec);
        let better = match &best {
            None => true,
            Some((_, acc, loss, _)) => val_acc > *acc || (val_acc == *acc && val_loss < *loss),
        };
        if cfg.select_best_val && !val.is_empty() && better {
            best = Some((epoch, val_acc, val_loss, net.clone()));
        }
    }
    let mut selected_epoch = cfg.epochs;
    if let Some((epoch, _, _, kept)) = best {
        selected_epoch = epoch;
        net = kept;
    }
    let report = TrainReport {
        epochs,
        train_accuracy: evaluate(&net, &train, cfg.center)?.1,
        val_accuracy: evaluate(&net, &val, cfg.center)?.1,
        test_accuracy: evaluate(&net, &ds.split(Split::Test), cfg.center)?.1,
        selected_epoch,
        seed: cfg.seed,
        augmentation: cfg.augmentation,
    };
    Ok((net, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Arch {
        Arch {
            point_widths: vec![8, 8, 16],
            head_widths: vec![8],
            classes: 3,
            dropout: 0.3,
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.1, 2.0, -1.0]), 1);
        assert_eq!(argmax(&[1.0, 1.0, 0.0]), 0);
    }

    #[test]
    fn repeated_point_equals_single_point() {
        let net = ClassifierNet::new(tiny(), 0).unwrap();
        let one = Tensor::new(vec![1, 3], vec![0.2, -0.4, 0.9]);
        let many = Tensor::new(vec![5, 3], [0.2, -0.4, 0.9].repeat(5));
        assert_eq!(net.forward(&one, false).unwrap(), net.forward(&many, false).unwrap());
    }

    #[test]
    fn augment_identity_and_rigidity() {
        let p = Tensor::new(vec![3, 3], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.3, 0.7, -0.2]);
        assert_eq!(rigid_transform(&p, [0.0, 0.0, 1.0], 0.0, [0.0; 3]), p);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = augment(&p, &mut rng, &Augmentation::default());
        let d = |t: &Tensor, i: usize, j: usize| {
            (0..3).map(|k| (t.get(i, k) - t.get(j, k)).powi(2)).sum::<f64>().sqrt()
        };
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            assert!((d(&p, i, j) - d(&q, i, j)).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_logits() {
        let net = ClassifierNet::new(tiny(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        net.save(&path).unwrap();
        let back = ClassifierNet::load(&path).unwrap();
        assert_eq!(net, back);
    }

    #[test]
    fn rejects_bad_arch_and_input() {
        assert!(ClassifierNet::new(Arch { classes: 1, ..tiny() }, 0).is_err());
        let net = ClassifierNet::new(tiny(), 0).unwrap();
        let nan = Tensor::new(vec![1, 3], vec![f64::NAN, 0.0, 0.0]);
        assert!(net.forward(&nan, false).is_err());
        assert!(net.forward(&Tensor::zeros(vec![2, 2]), false).is_err());
    }
}
