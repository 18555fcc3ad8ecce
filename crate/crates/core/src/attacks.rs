//! Per-shape spectral optimization attacks and learned attack generators.
//!
//! The optimization attack searches coefficients `v` so that `X + Phi v`
//! is classified as the goal class while a reconstruction penalty keeps the
//! shape close to `X`. Generators learn the same map for a whole dataset:
//! Model 1 predicts `v`, Model 2 predicts the vertex field directly.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, ClassifierNet};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::grad::{GradError, Tape, Var};
use crate::losses::{
    margin_loss, untargeted_margin_loss, untargeted_margin_loss_var, LossBreakdown, ReconWeights, ShapeContext,
};
use crate::nn::{self, bind, params_mut, Bound, Linear};
use crate::optim::Adam;
use crate::spectral::{LaplacianKind, SpectralBasis};
use crate::tensor::Tensor;

/// What counts as a successful attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Goal {
    /// Predicted class must equal the target.
    Targeted(usize),
    /// Predicted class must differ from the true label.
    Untargeted(usize),
}

impl Goal {
    pub fn achieved(&self, predicted: usize) -> bool {
        match *self {
            Goal::Targeted(t) => predicted == t,
            Goal::Untargeted(l) => predicted != l,
        }
    }

    pub fn target(&self) -> Option<usize> {
        match *self {
            Goal::Targeted(t) => Some(t),
            Goal::Untargeted(_) => None,
        }
    }

    pub fn hinge(&self, logits: &[f64]) -> Result<f64> {
        match *self {
            Goal::Targeted(t) => margin_loss(logits, t),
            Goal::Untargeted(l) => untargeted_margin_loss(logits, l),
        }
    }

    /// Hinge per row of `[b, C]` logits, summed.
    fn hinge_var<'t>(goals: &[Goal], logits: Var<'t>) -> Result<Var<'t>> {
        if goals.iter().all(|g| matches!(g, Goal::Targeted(_))) {
            let t: Vec<usize> = goals.iter().filter_map(|g| g.target()).collect();
            return Ok(crate::losses::margin_loss_var(logits, &t)?.sum()?);
        }
        let mut parts = Vec::with_capacity(goals.len());
        for (i, g) in goals.iter().enumerate() {
            let row = logits.slice(0, i, i + 1)?;
            parts.push(match *g {
                Goal::Targeted(t) => crate::losses::margin_loss_var(row, &[t])?,
                Goal::Untargeted(l) => untargeted_margin_loss_var(row, &[l])?,
            });
        }
        Ok(Var::concat(&parts, 0)?.sum()?)
    }
}

/// The stored perturbation from which `x_adv` is rebuilt.
#[derive(Debug, Clone, PartialEq)]
pub enum Perturbation {
    /// `k x 3` spectral coefficients; the field is `Phi v`.
    Spectral(Tensor),
    /// `n x 3` vertex field.
    Field(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub x_adv: Tensor,
    pub perturbation: Perturbation,
    pub goal: Goal,
    pub predicted: usize,
    pub success: bool,
    pub breakdown: LossBreakdown,
    pub iterations: usize,
    pub c: f64,
}

impl AttackResult {
    /// Vertex field implied by the stored perturbation.
    pub fn field(&self, basis: Option<&SpectralBasis>) -> Result<Tensor> {
        match &self.perturbation {
            Perturbation::Field(v) => Ok(v.clone()),
            Perturbation::Spectral(v) => {
                let basis = basis.ok_or_else(|| Error::Config("spectral perturbation needs its basis".into()))?;
                crate::spectral::synthesize(basis, v)
            }
        }
    }

    /// `X + field`, recomputed from the stored pieces.
    pub fn reconstruct(&self, x: &Tensor, basis: Option<&SpectralBasis>) -> Result<Tensor> {
        let f = self.field(basis)?;
        if f.shape() != x.shape() {
            return Err(Error::dims(format!("{:?}", x.shape()), format!("{:?}", f.shape())));
        }
        let data = x.data().iter().zip(f.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::new(x.shape().to_vec(), data))
    }

    /// Largest vertex displacement over the median displacement.
    pub fn spike_score(&self, x: &Tensor) -> f64 {
        spike_score(x, &self.x_adv)
    }
}

/// Largest over median per-vertex displacement; 0 for no displacement.
pub fn spike_score(x: &Tensor, x_adv: &Tensor) -> f64 {
    let mut d: Vec<f64> = x
        .data()
        .chunks_exact(3)
        .zip(x_adv.data().chunks_exact(3))
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
        .collect();
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let max = d[d.len() - 1];
    let mid = d.len() / 2;
    let median = if d.len().is_multiple_of(2) { 0.5 * (d[mid - 1] + d[mid]) } else { d[mid] };
    if max == 0.0 {
        0.0
    } else if median == 0.0 {
        f64::INFINITY
    } else {
        max / median
    }
}

pub const SPIKE_THRESHOLD: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub max_iters: usize,
    /// Consecutive zero-hinge iterations before early stopping is considered.
    pub patience: usize,
    /// Early stop once the reconstruction improves by less than this.
    pub tol: f64,
    pub recon: ReconWeights,
    pub smoothing_weight: f64,
    pub laplacian: LaplacianKind,
    pub center: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            max_iters: 2000,
            patience: 25,
            tol: 1e-6,
            recon: ReconWeights::default(),
            smoothing_weight: 0.0,
            laplacian: LaplacianKind::default(),
            center: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub c0: f64,
    pub growth: f64,
    pub rounds: usize,
    pub bisect_steps: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            c0: 1e-2,
            growth: 2.0,
            rounds: 12,
            bisect_steps: 8,
        }
    }
}

struct Snapshot {
    v: Tensor,
    x_adv: Tensor,
    predicted: usize,
    breakdown: LossBreakdown,
}

/// Adam on `v` for a fixed `c`, minimizing `c * hinge + recon + s * smoothing`
/// from `v = 0`. Returns the successful iterate with the lowest
/// reconstruction, or the last iterate when none succeeded.
pub fn optimize_fixed_c(
    ctx: &ShapeContext,
    basis: &SpectralBasis,
    net: &ClassifierNet,
    goal: Goal,
    c: f64,
    cfg: &OptimConfig,
) -> Result<AttackResult> {
    if basis.n() != ctx.n() {
        return Err(Error::dims(ctx.n(), basis.n()));
    }
    if let Some(t) = goal.target() {
        if t >= net.classes() {
            return Err(Error::InvalidTarget {
                target: t,
                classes: net.classes(),
            });
        }
    }
    let phi = Arc::new(basis.eigenvectors().clone());
    let mut v = Tensor::zeros(vec![basis.k(), 3]);
    let mut opt = Adam::new(cfg.lr);
    let mut best: Option<Snapshot> = None;
    let mut last: Option<Snapshot> = None;
    let mut streak = 0usize;
    let mut prev_recon = f64::INFINITY;
    let mut iterations = 0;
    for it in 0..=cfg.max_iters {
        iterations = it;
        let tape = Tape::new();
        let bound = net.bind(&tape, false)?;
        let vv = tape.leaf(v.clone())?;
        let field = tape.constant(phi.clone())?.matmul(vv)?;
        let x_adv = tape.constant(ctx.vertices().clone())?.add(field)?;
        let logits = net.logits_var(&bound, x_adv, 1, cfg.center, None)?;
        let hinge = Goal::hinge_var(&[goal], logits)?;
        let recon = ctx.reconstruction_var(x_adv, &cfg.recon)?;
        let smooth = if cfg.smoothing_weight != 0.0 {
            Some(ctx.smoothing_var(field, cfg.laplacian)?)
        } else {
            None
        };
        let mut total = hinge.scale(c)?;
        if let Some(r) = recon {
            total = total.add(r)?;
        }
        if let Some(s) = smooth {
            total = total.add(s.scale(cfg.smoothing_weight)?)?;
        }
        let recon_val = recon.map(|r| r.item()).unwrap_or(0.0);
        let hinge_val = hinge.item();
        let predicted = argmax(logits.value().data());
        let snap = || Snapshot {
            v: v.clone(),
            x_adv: x_adv.value().as_ref().clone(),
            predicted,
            breakdown: LossBreakdown::optimization(
                hinge_val,
                recon_val,
                smooth.map(|s| s.item()).unwrap_or(0.0),
                c,
                cfg.smoothing_weight,
            ),
        };
        if goal.achieved(predicted) && best.as_ref().is_none_or(|b| recon_val < b.breakdown.reconstruction) {
            best = Some(snap());
        }
        if best.as_ref().is_some_and(|b| b.breakdown.total == 0.0) {
            break;
        }
        streak = if hinge_val == 0.0 { streak + 1 } else { 0 };
        let improvement = prev_recon - recon_val;
        prev_recon = recon_val;
        if streak >= cfg.patience && improvement < cfg.tol {
            break;
        }
        if it == cfg.max_iters {
            last = Some(snap());
            break;
        }
        let mut g = tape.backward(total)?;
        let grad = g.take(vv);
        drop(bound);
        opt.step(&mut [&mut v], &[grad]);
    }
    let (snap, success) = match (best, last) {
        (Some(b), _) => (b, true),
        (None, Some(l)) => (l, false),
        (None, None) => {
            // stopped early without ever succeeding cannot happen: the
            // early-stop rule needs a zero hinge, which implies success
            // except on exact ties; rebuild from the final coefficients
            let x_adv = crate::spectral::synthesize(basis, &v)?;
            let x = ctx.vertices();
            let data = x.data().iter().zip(x_adv.data()).map(|(a, b)| a + b).collect();
            let x_adv = Tensor::new(x.shape().to_vec(), data);
            let logits = net.forward(&x_adv, cfg.center)?;
            let predicted = argmax(&logits);
            let recon = ctx.reconstruction(&x_adv, &cfg.recon)?;
            (
                Snapshot {
                    breakdown: LossBreakdown::optimization(goal.hinge(&logits)?, recon, 0.0, c, cfg.smoothing_weight),
                    v: v.clone(),
                    x_adv,
                    predicted,
                },
                false,
            )
        }
    };
    Ok(AttackResult {
        x_adv: snap.x_adv,
        perturbation: Perturbation::Spectral(snap.v),
        goal,
        predicted: snap.predicted,
        success,
        breakdown: snap.breakdown,
        iterations,
        c,
    })
}

/// Grows `c` geometrically from `c0` until the runner succeeds, then bisects
/// between the last failing and first succeeding value. When `c0` already
/// succeeds the lower end is `c0 / growth`.
pub fn c_search(mut runner: impl FnMut(f64) -> Result<AttackResult>, cfg: &SearchConfig) -> Result<AttackResult> {
    if !(cfg.c0 > 0.0 && cfg.growth > 1.0) {
        return Err(Error::Config("c search needs c0 > 0 and growth > 1".into()));
    }
    let mut c = cfg.c0;
    let mut last_fail = None;
    let mut found = None;
    for _ in 0..cfg.rounds {
        let r = runner(c)?;
        if r.success {
            found = Some(r);
            break;
        }
        last_fail = Some(c);
        c *= cfg.growth;
    }
    let Some(mut best) = found else {
        return Err(Error::NoAttackFound {
            rounds: cfg.rounds,
            max_c: c / cfg.growth,
        });
    };
    let mut hi = c;
    let mut lo = last_fail.unwrap_or(c / cfg.growth);
    for _ in 0..cfg.bisect_steps {
        let mid = 0.5 * (lo + hi);
        let r = runner(mid)?;
        if r.success {
            hi = mid;
            best = r;
        } else {
            lo = mid;
        }
    }
    Ok(best)
}

/// Fixed-`c` optimization wrapped in the `c` search.
pub fn optimize_attack(
    ctx: &ShapeContext,
    basis: &SpectralBasis,
    net: &ClassifierNet,
    goal: Goal,
    cfg: &OptimConfig,
    search: &SearchConfig,
) -> Result<AttackResult> {
    c_search(|c| optimize_fixed_c(ctx, basis, net, goal, c, cfg), search)
}

/// One independent optimization attack.
pub struct AttackJob<'a> {
    pub ctx: &'a ShapeContext,
    pub basis: &'a SpectralBasis,
    pub goal: Goal,
}

/// Runs independent attacks on the rayon pool, one tape per worker.
/// Results keep the order of `jobs` and do not depend on the thread count.
pub fn optimize_many(
    jobs: &[AttackJob<'_>],
    net: &ClassifierNet,
    cfg: &OptimConfig,
    search: &SearchConfig,
) -> Vec<Result<AttackResult>> {
    use rayon::prelude::*;
    jobs.par_iter()
        .map(|j| optimize_attack(j.ctx, j.basis, net, j.goal, cfg, search))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Regresses `k x 3` spectral coefficients.
    Model1,
    /// Regresses an `n x 3` vertex field per point.
    Model2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub kind: ModelKind,
    pub k: usize,
    pub trunk_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub dropout: f64,
}

impl GeneratorArch {
    pub fn model1(k: usize) -> Self {
        Self {
            kind: ModelKind::Model1,
            k,
            trunk_widths: vec![64, 64, 128, 1024],
            head_widths: vec![512, 256],
            dropout: 0.0,
        }
    }

    pub fn model2() -> Self {
        Self {
            kind: ModelKind::Model2,
            k: 0,
            trunk_widths: vec![64, 64, 128, 1024],
            head_widths: vec![256, 128],
            dropout: 0.0,
        }
    }

    fn widths(&self) -> Vec<Vec<usize>> {
        let mut trunk = vec![3];
        trunk.extend(&self.trunk_widths);
        let mut head = match self.kind {
            ModelKind::Model1 => vec![*self.trunk_widths.last().unwrap_or(&3)],
            ModelKind::Model2 => {
                let local = self.trunk_widths.get(1).or(self.trunk_widths.first()).copied().unwrap_or(3);
                vec![local + self.trunk_widths.last().copied().unwrap_or(3)]
            }
        };
        head.extend(&self.head_widths);
        head.push(match self.kind {
            ModelKind::Model1 => 3 * self.k,
            ModelKind::Model2 => 3,
        });
        vec![trunk, head]
    }
}

const GEN_MAGIC: &[u8; 4] = b"SPGN";

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorNet {
    arch: GeneratorArch,
    layers: Vec<Linear>,
}

/// Per-shape inputs to a generator.
pub struct GeneratorInput<'a> {
    pub ctx: &'a ShapeContext,
    /// Required for Model 1.
    pub basis: Option<&'a SpectralBasis>,
}

impl GeneratorNet {
    /// Random weights; the output layer is scaled by `1e-2` so the first
    /// perturbations are small.
    pub fn new(arch: GeneratorArch, seed: u64) -> Result<Self> {
        if arch.trunk_widths.len() < 2 || (arch.kind == ModelKind::Model1 && arch.k == 0) {
            return Err(Error::Config(format!("unusable generator architecture {arch:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for w in arch.widths() {
            for pair in w.windows(2) {
                layers.push(Linear::init(pair[0], pair[1], &mut rng));
            }
        }
        let out = layers.last_mut().expect("at least one layer");
        *out = Linear {
            w: Arc::new(out.w.map(|x| 1e-2 * x)),
            b: Arc::new(out.b.map(|x| 1e-2 * x)),
        };
        Ok(Self { arch, layers })
    }

    pub fn arch(&self) -> &GeneratorArch {
        &self.arch
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    /// Sets the output layer to zero, making the generator the identity map.
    pub fn zero_output(&mut self) {
        let l = self.layers.last_mut().expect("at least one layer");
        *l = Linear::zeros(l.inputs(), l.outputs());
    }

    fn depth(&self) -> usize {
        self.arch.trunk_widths.len()
    }

    /// Perturbation fields `[batch * n, 3]` and Model-1 coefficients per shape.
    fn fields_var<'t>(
        &self,
        bound: &Bound<'t>,
        inputs: &[GeneratorInput<'_>],
        phis: &[Option<Arc<Tensor>>],
        x: Var<'t>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let tape = x.tape();
        let batch = inputs.len();
        let n = x.shape().0 / batch;
        let depth = self.depth();
        let out = nn::trunk(bound, depth, x, batch)?;
        let last = self.layers.len() - 1;
        let mut rng = rng;
        let mut head = |mut h: Var<'t>| -> Result<Var<'t>> {
            for i in depth..last {
                h = bound.apply(i, h)?.relu()?;
                if let Some(r) = rng.as_deref_mut() {
                    h = nn::dropout(h, self.arch.dropout, r)?;
                }
            }
            bound.apply(last, h)
        };
        match self.arch.kind {
            ModelKind::Model1 => {
                let k = self.arch.k;
                let coeffs = head(out.global)?;
                let mut fields = Vec::with_capacity(batch);
                let mut vs = Vec::with_capacity(batch);
                for (b, phi) in phis.iter().enumerate().take(batch) {
                    let phi = phi
                        .as_ref()
                        .ok_or_else(|| GradError::ShapeMismatch {
                            op: "generator",
                            detail: "model 1 needs a spectral basis per shape".into(),
                        })?
                        .clone();
                    if phi.cols() != k || phi.rows() != n {
                        return Err(GradError::ShapeMismatch {
                            op: "generator",
                            detail: format!("basis {:?} for k = {k}, n = {n}", phi.shape()),
                        }
                        .into());
                    }
                    let v = coeffs.slice(0, b, b + 1)?.reshape(k, 3)?;
                    fields.push(tape.constant(phi)?.matmul(v)?);
                    vs.push(v);
                }
                let field = if batch == 1 { fields[0] } else { Var::concat(&fields, 0)? };
                Ok((field, vs))
            }
            ModelKind::Model2 => {
                let width = out.global.shape().1;
                let mut rows = Vec::with_capacity(batch);
                for b in 0..batch {
                    rows.push(out.global.slice(0, b, b + 1)?.broadcast(n, width)?);
                }
                let global = if batch == 1 { rows[0] } else { Var::concat(&rows, 0)? };
                let feat = Var::concat(&[out.local, global], 1)?;
                Ok((head(feat)?, Vec::new()))
            }
        }
    }

    /// `X'` for one shape in evaluation mode, with the stored perturbation.
    pub fn forward(&self, input: &GeneratorInput<'_>) -> Result<(Tensor, Perturbation)> {
        let tape = Tape::new();
        let bound = bind(&tape, &self.layers, false)?;
        let x = tape.constant(input.ctx.vertices().clone())?;
        let phi = input.basis.map(|b| Arc::new(b.eigenvectors().clone()));
        let (field, vs) = self.fields_var(&bound, std::slice::from_ref(input), &[phi], x, None)?;
        let x_adv = x.add(field)?.value().as_ref().clone();
        let p = match self.arch.kind {
            ModelKind::Model1 => Perturbation::Spectral(vs[0].value().as_ref().clone()),
            ModelKind::Model2 => Perturbation::Field(field.value().as_ref().clone()),
        };
        Ok((x_adv, p))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let a = &self.arch;
        let kind = match a.kind {
            ModelKind::Model1 => 1,
            ModelKind::Model2 => 2,
        };
        let mut ints = vec![kind, a.k as u64, a.trunk_widths.len() as u64];
        ints.extend(a.trunk_widths.iter().map(|&w| w as u64));
        ints.push(a.head_widths.len() as u64);
        ints.extend(a.head_widths.iter().map(|&w| w as u64));
        nn::write_checkpoint(path, GEN_MAGIC, &ints, &[a.dropout], &self.layers)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let c = nn::read_checkpoint(path, GEN_MAGIC)?;
        let bad = || Error::Format {
            path: path.to_path_buf(),
            message: "malformed generator header".into(),
        };
        let ints: Vec<usize> = c.ints.iter().map(|&v| v as usize).collect();
        let kind = match ints.first() {
            Some(1) => ModelKind::Model1,
            Some(2) => ModelKind::Model2,
            _ => return Err(bad()),
        };
        let k = *ints.get(1).ok_or_else(bad)?;
        let nt = *ints.get(2).ok_or_else(bad)?;
        let trunk_widths = ints.get(3..3 + nt).ok_or_else(bad)?.to_vec();
        let nh = *ints.get(3 + nt).ok_or_else(bad)?;
        let head_widths = ints.get(4 + nt..4 + nt + nh).ok_or_else(bad)?.to_vec();
        let arch = GeneratorArch {
            kind,
            k,
            trunk_widths,
            head_widths,
            dropout: *c.floats.first().ok_or_else(bad)?,
        };
        let expected: Vec<(usize, usize)> = arch
            .widths()
            .iter()
            .flat_map(|w| w.windows(2).map(|p| (p[0], p[1])).collect::<Vec<_>>())
            .collect();
        let got: Vec<(usize, usize)> = c.layers.iter().map(|l| (l.inputs(), l.outputs())).collect();
        if expected != got {
            return Err(bad());
        }
        Ok(Self { arch, layers: c.layers })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Weight of the reconstruction term.
    pub c: f64,
    pub recon: ReconWeights,
    pub smoothing_weight: f64,
    pub laplacian: LaplacianKind,
    pub center: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            batch_size: 8,
            c: 1.0,
            recon: ReconWeights::default(),
            smoothing_weight: 0.0,
            laplacian: LaplacianKind::default(),
            center: false,
            seed: 0,
        }
    }
}

/// Per-split generator metrics for one epoch. Percentages are in `[0, 100]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEpoch {
    pub epoch: usize,
    pub split: Split,
    /// Shapes predicted as anything but their true label.
    pub misclass_pct: f64,
    /// Shapes predicted as their assigned target.
    pub targeted_pct: f64,
    pub recon_loss: f64,
    pub total_loss: f64,
}

/// One uniformly random wrong class per shape, fixed by `seed`.
pub fn assign_targets(labels: &[usize], classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels
        .iter()
        .map(|&l| {
            let t = rng.gen_range(0..classes - 1);
            if t >= l {
                t + 1
            } else {
                t
            }
        })
        .collect()
}

/// Everything a generator pass needs about a dataset, built once.
pub struct GeneratorData<'a> {
    pub contexts: &'a [ShapeContext],
    pub bases: Option<&'a [SpectralBasis]>,
    pub labels: Vec<usize>,
    pub targets: Vec<usize>,
    pub splits: Vec<Split>,
}

impl<'a> GeneratorData<'a> {
    pub fn new(
        ds: &Dataset,
        contexts: &'a [ShapeContext],
        bases: Option<&'a [SpectralBasis]>,
        target_seed: u64,
    ) -> Result<Self> {
        if contexts.len() != ds.items.len() || bases.is_some_and(|b| b.len() != ds.items.len()) {
            return Err(Error::dims(ds.items.len(), contexts.len()));
        }
        let labels: Vec<usize> = ds.items.iter().map(|m| m.label).collect();
        Ok(Self {
            contexts,
            bases,
            targets: assign_targets(&labels, ds.classes, target_seed),
            labels,
            splits: ds.items.iter().map(|m| m.split).collect(),
        })
    }
}

struct BatchOutcome<'t> {
    total: Var<'t>,
    x_adv: Var<'t>,
    logits: Var<'t>,
    recon: Vec<f64>,
    hinge: Vec<f64>,
    smooth: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn generator_batch<'t>(
    tape: &'t Tape,
    gen: &GeneratorNet,
    gen_bound: &Bound<'t>,
    clf: &ClassifierNet,
    clf_bound: &Bound<'t>,
    data: &GeneratorData<'_>,
    phis: &[Option<Arc<Tensor>>],
    idx: &[usize],
    cfg: &GeneratorConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<BatchOutcome<'t>> {
    let inputs: Vec<GeneratorInput<'_>> = idx
        .iter()
        .map(|&i| GeneratorInput {
            ctx: &data.contexts[i],
            basis: data.bases.map(|b| &b[i]),
        })
        .collect();
    let clouds: Vec<&Tensor> = idx.iter().map(|&i| data.contexts[i].vertices().as_ref()).collect();
    let x = crate::classifier::stack(tape, &clouds)?;
    let batch_phis: Vec<Option<Arc<Tensor>>> = idx.iter().map(|&i| phis[i].clone()).collect();
    let (field, _) = gen.fields_var(gen_bound, &inputs, &batch_phis, x, rng)?;
    let x_adv = x.add(field)?;
    let logits = clf.logits_var(clf_bound, x_adv, idx.len(), cfg.center, None)?;
    let n = data.contexts[idx[0]].n();
    let t: Vec<usize> = idx.iter().map(|&i| data.targets[i]).collect();
    let hinge_rows = crate::losses::margin_loss_var(logits, &t)?;
    let mut per_shape = Vec::with_capacity(idx.len());
    let (mut recon, mut hinge, mut smooth) = (Vec::new(), Vec::new(), Vec::new());
    for (b, &i) in idx.iter().enumerate() {
        let ctx = &data.contexts[i];
        let xa = x_adv.slice(0, b * n, (b + 1) * n)?;
        let h = hinge_rows.slice(0, b, b + 1)?.sum()?;
        let mut term = h;
        hinge.push(h.item());
        match ctx.reconstruction_var(xa, &cfg.recon)? {
            Some(r) => {
                recon.push(r.item());
                term = term.add(r.scale(cfg.c)?)?;
            }
            None => recon.push(0.0),
        }
        if cfg.smoothing_weight != 0.0 {
            let s = ctx.smoothing_var(field.slice(0, b * n, (b + 1) * n)?, cfg.laplacian)?;
            smooth.push(s.item());
            term = term.add(s.scale(cfg.smoothing_weight)?)?;
        } else {
            smooth.push(0.0);
        }
        per_shape.push(term);
    }
    let total = crate::losses::mean_of(tape, &per_shape)?;
    Ok(BatchOutcome {
        total,
        x_adv,
        logits,
        recon,
        hinge,
        smooth,
    })
}

fn phis_of(data: &GeneratorData<'_>) -> Vec<Option<Arc<Tensor>>> {
    (0..data.contexts.len())
        .map(|i| data.bases.map(|b| Arc::new(b[i].eigenvectors().clone())))
        .collect()
}

/// Batch-mean loss of the generator over `idx` in evaluation mode.
pub fn generator_loss(gen: &GeneratorNet, clf: &ClassifierNet, data: &GeneratorData<'_>, idx: &[usize], cfg: &GeneratorConfig) -> Result<f64> {
    let tape = Tape::new();
    let gb = bind(&tape, gen.layers(), false)?;
    let cb = clf.bind(&tape, false)?;
    let phis = phis_of(data);
    Ok(generator_batch(&tape, gen, &gb, clf, &cb, data, &phis, idx, cfg, None)?.total.item())
}

/// Metrics for the shapes in `idx`, in evaluation mode.
pub fn evaluate_generator(
    gen: &GeneratorNet,
    clf: &ClassifierNet,
    data: &GeneratorData<'_>,
    idx: &[usize],
    cfg: &GeneratorConfig,
    epoch: usize,
    split: Split,
) -> Result<GeneratorEpoch> {
    let phis = phis_of(data);
    let (mut wrong, mut hit, mut recon, mut total) = (0usize, 0usize, 0.0, 0.0);
    for chunk in idx.chunks(cfg.batch_size.max(1)) {
        let tape = Tape::new();
        let gb = bind(&tape, gen.layers(), false)?;
        let cb = clf.bind(&tape, false)?;
        let out = generator_batch(&tape, gen, &gb, clf, &cb, data, &phis, chunk, cfg, None)?;
        let z = out.logits.value();
        for (b, &i) in chunk.iter().enumerate() {
            let p = argmax(z.row(b));
            wrong += (p != data.labels[i]) as usize;
            hit += (p == data.targets[i]) as usize;
            recon += out.recon[b];
            total += out.hinge[b] + cfg.c * out.recon[b] + cfg.smoothing_weight * out.smooth[b];
        }
        let _ = out.x_adv;
    }
    let m = idx.len().max(1) as f64;
    Ok(GeneratorEpoch {
        epoch,
        split,
        misclass_pct: 100.0 * wrong as f64 / m,
        targeted_pct: 100.0 * hit as f64 / m,
        recon_loss: recon / m,
        total_loss: total / m,
    })
}

/// Trains generator weights only, the classifier stays fixed. Metrics are
/// logged for the train and validation splits after every epoch (epoch 0
/// is the untrained state).
pub fn train_generator(
    gen: &mut GeneratorNet,
    clf: &ClassifierNet,
    data: &GeneratorData<'_>,
    cfg: &GeneratorConfig,
) -> Result<Vec<GeneratorEpoch>> {
    if gen.arch.kind == ModelKind::Model1 && data.bases.is_none() {
        return Err(Error::Config("model 1 needs spectral bases".into()));
    }
    let split_idx = |s: Split| -> Vec<usize> { (0..data.splits.len()).filter(|&i| data.splits[i] == s).collect() };
    let train = split_idx(Split::Train);
    let val = split_idx(Split::Val);
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let phis = phis_of(data);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut log = Vec::new();
    let eval = |gen: &GeneratorNet, epoch: usize, log: &mut Vec<GeneratorEpoch>| -> Result<()> {
        log.push(evaluate_generator(gen, clf, data, &train, cfg, epoch, Split::Train)?);
        if !val.is_empty() {
            log.push(evaluate_generator(gen, clf, data, &val, cfg, epoch, Split::Val)?);
        }
        Ok(())
    };
    eval(gen, 0, &mut log)?;
    let mut order = train.clone();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let tape = Tape::new();
            let gb = bind(&tape, gen.layers(), true)?;
            let cb = clf.bind(&tape, false)?;
            let out = match generator_batch(&tape, gen, &gb, clf, &cb, data, &phis, batch, cfg, Some(&mut rng)) {
                Ok(o) => o,
                Err(Error::Grad(GradError::NonFiniteValue { .. })) => {
                    return Err(Error::Divergence { epoch, loss: f64::NAN })
                }
                Err(e) => return Err(e),
            };
            let mut g = tape.backward(out.total)?;
            let grads = gb.grads(&mut g);
            drop(gb);
            drop(cb);
            opt.step(&mut params_mut(&mut gen.layers), &grads);
        }
        let before = log.len();
        eval(gen, epoch, &mut log)?;
        if let Some(rec) = log[before..].iter().find(|r| !r.total_loss.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                loss: rec.total_loss,
            });
        }
        let tr = &log[before];
        log::info!(
            "generator epoch {epoch}: train misclass {:.1}% recon {:.4} total {:.4}",
            tr.misclass_pct,
            tr.recon_loss,
            tr.total_loss
        );
    }
    Ok(log)
}

/// Runs a trained generator on every shape, producing attack results.
pub fn generator_attacks(
    gen: &GeneratorNet,
    clf: &ClassifierNet,
    data: &GeneratorData<'_>,
    cfg: &GeneratorConfig,
) -> Result<Vec<AttackResult>> {
    let mut out = Vec::with_capacity(data.contexts.len());
    for i in 0..data.contexts.len() {
        let input = GeneratorInput {
            ctx: &data.contexts[i],
            basis: data.bases.map(|b| &b[i]),
        };
        let (x_adv, perturbation) = gen.forward(&input)?;
        let logits = clf.forward(&x_adv, cfg.center)?;
        let predicted = argmax(&logits);
        let ctx = &data.contexts[i];
        let field = match &perturbation {
            Perturbation::Field(f) => f.clone(),
            Perturbation::Spectral(_) => {
                let data = x_adv.data().iter().zip(ctx.vertices().data()).map(|(a, b)| a - b).collect();
                Tensor::new(x_adv.shape().to_vec(), data)
            }
        };
        let smooth = if cfg.smoothing_weight != 0.0 {
            ctx.smoothing(&field, cfg.laplacian)?
        } else {
            0.0
        };
        let goal = Goal::Targeted(data.targets[i]);
        out.push(AttackResult {
            breakdown: LossBreakdown::generator(
                goal.hinge(&logits)?,
                ctx.reconstruction(&x_adv, &cfg.recon)?,
                smooth,
                cfg.c,
                cfg.smoothing_weight,
            ),
            x_adv,
            perturbation,
            goal,
            predicted,
            success: predicted != data.labels[i],
            iterations: 0,
            c: cfg.c,
        });
    }
    Ok(out)
}

/// Per-split means of the perceptibility metrics for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: Split,
    pub count: usize,
    pub curvature_distortion: f64,
    pub edge_loss: f64,
    pub l2: f64,
    pub misclassification: f64,
}

/// One attacked shape for evaluation.
pub struct EvalEntry<'a> {
    pub split: Split,
    pub label: usize,
    pub ctx: &'a ShapeContext,
    pub x_adv: &'a Tensor,
    pub predicted: usize,
}

pub fn evaluate_attacks(entries: &[EvalEntry<'_>]) -> Result<Vec<SplitMetrics>> {
    if entries.is_empty() {
        return Err(Error::EmptySplit("any".into()));
    }
    let mut out = Vec::new();
    for split in Split::ALL {
        let rows: Vec<&EvalEntry<'_>> = entries.iter().filter(|e| e.split == split).collect();
        if rows.is_empty() {
            continue;
        }
        let m = rows.len() as f64;
        let (mut curv, mut edge, mut l2, mut wrong) = (0.0, 0.0, 0.0, 0usize);
        for e in &rows {
            curv += e.ctx.curvature_distortion(e.x_adv)?;
            edge += e.ctx.edge_loss(e.x_adv)?;
            l2 += e.ctx.l2_loss(e.x_adv)?;
            wrong += (e.predicted != e.label) as usize;
        }
        out.push(SplitMetrics {
            split,
            count: rows.len(),
            curvature_distortion: curv / m,
            edge_loss: edge / m,
            l2: l2 / m,
            misclassification: wrong as f64 / m,
        });
    }
    Ok(out)
}

/// Published reference values for per-shape optimization attacks.
pub const REFERENCE_CURVATURE: f64 = 3.05;
pub const REFERENCE_L2: f64 = 0.062;

/// Table with one row per run and `metric_split` columns, followed by a
/// reference row.
pub fn write_table(path: &std::path::Path, runs: &[(String, Vec<SplitMetrics>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let metrics = ["curvature_distortion", "edge_loss", "l2", "misclassification"];
    let mut header = vec!["run".to_string()];
    for m in metrics {
        for s in Split::ALL {
            header.push(format!("{m}_{s}"));
        }
    }
    w.write_record(&header)?;
    for (name, rows) in runs {
        let mut rec = vec![name.clone()];
        for m in 0..metrics.len() {
            for s in Split::ALL {
                rec.push(match rows.iter().find(|r| r.split == s) {
                    Some(r) => [r.curvature_distortion, r.edge_loss, r.l2, r.misclassification][m].to_string(),
                    None => String::new(),
                });
            }
        }
        w.write_record(&rec)?;
    }
    let mut footer = vec!["reference".to_string()];
    for m in 0..metrics.len() {
        for _ in Split::ALL {
            footer.push(match m {
                0 => REFERENCE_CURVATURE.to_string(),
                2 => REFERENCE_L2.to_string(),
                _ => String::new(),
            });
        }
    }
    w.write_record(&footer)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Arch;
    use crate::mesh::shapes;
    use crate::spectral::mesh_basis;

    fn dummy(success: bool, c: f64) -> AttackResult {
        AttackResult {
            x_adv: Tensor::zeros(vec![1, 3]),
            perturbation: Perturbation::Field(Tensor::zeros(vec![1, 3])),
            goal: Goal::Targeted(0),
            predicted: 0,
            success,
            breakdown: LossBreakdown::optimization(0.0, 0.0, 0.0, c, 0.0),
            iterations: 0,
            c,
        }
    }

    #[test]
    fn search_always_success_bisects_below_c0() {
        let r = c_search(|c| Ok(dummy(true, c)), &SearchConfig::default()).unwrap();
        let lo = 0.005;
        assert!(r.c > lo && r.c <= lo + 0.005 / 256.0 + 1e-15, "{}", r.c);
    }

    #[test]
    fn search_always_fail() {
        let mut calls = 0;
        let e = c_search(
            |c| {
                calls += 1;
                Ok(dummy(false, c))
            },
            &SearchConfig::default(),
        );
        assert!(matches!(e, Err(Error::NoAttackFound { rounds: 12, .. })));
        assert_eq!(calls, 12);
    }

    #[test]
    fn search_threshold() {
        let r = c_search(|c| Ok(dummy(c >= 0.3, c)), &SearchConfig::default()).unwrap();
        assert!(r.c >= 0.3 && r.c <= 0.3 + 0.16 / 256.0, "{}", r.c);
    }

    #[test]
    fn spike_score_examples() {
        let x = Tensor::zeros(vec![4, 3]);
        assert_eq!(spike_score(&x, &x), 0.0);
        let y = Tensor::new(vec![4, 3], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 20.0, 0.0, 0.0]);
        assert_eq!(spike_score(&x, &y), 20.0);
    }

    #[test]
    fn targets_are_wrong_classes() {
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let t = assign_targets(&labels, 10, 4);
        assert!(labels.iter().zip(&t).all(|(l, t)| l != t && *t < 10));
        assert_eq!(t, assign_targets(&labels, 10, 4));
    }

    #[test]
    fn zero_generator_is_identity_and_model1_k1_is_constant() {
        let mesh = shapes::icosphere(1.0, 1);
        let ctx = ShapeContext::new(&mesh).unwrap();
        let basis = mesh_basis(&mesh, 1).unwrap();
        let arch = GeneratorArch {
            trunk_widths: vec![8, 8, 16],
            head_widths: vec![8],
            ..GeneratorArch::model1(1)
        };
        let mut gen = GeneratorNet::new(arch, 0).unwrap();
        let input = GeneratorInput {
            ctx: &ctx,
            basis: Some(&basis),
        };
        let (x_adv, _) = gen.forward(&input).unwrap();
        let d: Vec<f64> = x_adv.data().iter().zip(ctx.vertices().data()).map(|(a, b)| a - b).collect();
        for row in d.chunks_exact(3) {
            for k in 0..3 {
                assert!((row[k] - d[k]).abs() < 1e-12);
            }
        }
        gen.zero_output();
        let (x_adv, _) = gen.forward(&input).unwrap();
        assert_eq!(&x_adv, ctx.vertices().as_ref());
    }

    #[test]
    fn ignoring_classifier_succeeds_immediately() {
        let mesh = shapes::icosphere(1.0, 1);
        let ctx = ShapeContext::new(&mesh).unwrap();
        let basis = mesh_basis(&mesh, 5).unwrap();
        let arch = Arch {
            point_widths: vec![4, 4],
            head_widths: vec![],
            classes: 3,
            dropout: 0.0,
        };
        let mut net = ClassifierNet::new(arch, 0).unwrap();
        // constant logits with class 2 on top
        for l in net.layers_mut().iter_mut().skip(2) {
            *l = Linear::zeros(l.inputs(), l.outputs());
        }
        let last = net.layers_mut().last_mut().unwrap();
        last.b = Arc::new(Tensor::new(vec![1, 3], vec![0.0, 0.5, 1.0]));
        let r = optimize_fixed_c(&ctx, &basis, &net, Goal::Targeted(2), 1.0, &OptimConfig::default()).unwrap();
        assert!(r.success);
        assert_eq!(r.iterations, 0);
        assert_eq!(r.perturbation, Perturbation::Spectral(Tensor::zeros(vec![5, 3])));
        assert_eq!(r.breakdown.reconstruction, 0.0);
    }

    #[test]
    fn table_has_reference_footer() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let row = SplitMetrics {
            split: Split::Test,
            count: 1,
            curvature_distortion: 0.0,
            edge_loss: 0.0,
            l2: 0.0,
            misclassification: 0.1,
        };
        write_table(&p, &[("identity".into(), vec![row])]).unwrap();
        let s = std::fs::read_to_string(&p).unwrap();
        let last = s.lines().last().unwrap();
        assert!(last.starts_with("reference,3.05,3.05,3.05"));
        assert!(last.contains("0.062"));
    }
}
