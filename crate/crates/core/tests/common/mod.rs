//! Shared oracles for integration and acceptance tests.
#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specadv::classifier::{Arch, ClassifierNet};
use specadv::grad::{Tape, Var};
use specadv::losses::{self, ReconWeights, ShapeContext};
use specadv::mesh::{shapes, Mesh};
use specadv::nn::{self, Linear};
use specadv::spectral::LaplacianKind;
use specadv::{Result, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect())
}

/// Icosphere with every vertex pushed radially by up to `jitter`.
pub fn jittered_sphere(subdiv: u32, jitter: f64, rng: &mut ChaCha8Rng) -> Mesh {
    let base = shapes::icosphere(1.0, subdiv);
    let v = base
        .vertices()
        .iter()
        .map(|p| {
            let s = 1.0 + rng.gen_range(-jitter..jitter);
            [p[0] * s, p[1] * s, p[2] * s]
        })
        .collect();
    base.with_vertices(v).unwrap()
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect())
}

#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Central differences of the scalar `f` around `x`, compared with the tape
/// gradient. At most `max_coords` coordinates are probed. Probes whose
/// forward pass changes piece (a relu, abs or max switching branch) are
/// skipped, since the derivative is not defined across them.
pub fn check_gradient<F>(x: &Tensor, f: F, h: f64, max_coords: usize, seed: u64) -> FdReport
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone()).unwrap();
    let y = f(&tape, leaf).unwrap();
    let sig = tape.kink_signature();
    let grad = tape.backward(y).unwrap().wrt(leaf);

    let eval = |p: Tensor| -> (f64, u64) {
        let tape = Tape::new();
        let leaf = tape.leaf(p).unwrap();
        let y = f(&tape, leaf).unwrap().item();
        (y, tape.kink_signature())
    };
    let mut coords: Vec<usize> = (0..x.len()).collect();
    if coords.len() > max_coords {
        let mut r = rng(seed);
        for i in 0..max_coords {
            let j = r.gen_range(i..coords.len());
            coords.swap(i, j);
        }
        coords.truncate(max_coords);
    }
    let (mut diff, mut norm_g, mut norm_fd) = (0.0, 0.0, 0.0);
    let (mut checked, mut skipped) = (0, 0);
    for &i in &coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let (fp, sp) = eval(plus);
        let (fm, sm) = eval(minus);
        if sp != sig || sm != sig {
            skipped += 1;
            continue;
        }
        let fd = (fp - fm) / (2.0 * h);
        let g = grad.data()[i];
        diff += (g - fd).powi(2);
        norm_g += g * g;
        norm_fd += fd * fd;
        checked += 1;
    }
    let scale = norm_g.sqrt().max(norm_fd.sqrt()).max(1e-10);
    FdReport {
        rel_error: diff.sqrt() / scale,
        checked,
        skipped,
    }
}

pub fn small_arch(classes: usize) -> Arch {
    Arch {
        point_widths: vec![8, 8, 16],
        head_widths: vec![12],
        classes,
        dropout: 0.0,
    }
}

/// One gradient-suite case: a name and its finite-difference report.
pub type GradCase = (&'static str, FdReport);

/// Every differentiable loss plus the classifier forward pass, at one seed.
pub fn gradient_suite(seed: u64) -> Vec<GradCase> {
    let mut r = rng(seed);
    let mesh = jittered_sphere(1, 0.1, &mut r);
    let ctx = Arc::new(ShapeContext::new(&mesh).unwrap());
    let n = ctx.n();
    let x_adv = add(ctx.vertices(), &random_tensor(n, 3, 0.05, &mut r));
    let field = random_tensor(n, 3, 0.05, &mut r);
    let logits = random_tensor(3, 10, 2.0, &mut r);
    let targets: Vec<usize> = (0..3).map(|_| r.gen_range(0..10)).collect();
    let h = 1e-6;
    let mut out = Vec::new();

    let x0 = ctx.vertices().clone();
    out.push((
        "l2",
        check_gradient(&x_adv, |t, v| losses::l2_loss_var(t.constant(x0.clone())?, v), h, 60, seed),
    ));
    let c = ctx.clone();
    out.push(("edge", check_gradient(&x_adv, move |_, v| c.edge_loss_var(v), h, 60, seed)));
    let c = ctx.clone();
    out.push((
        "local_euclidean",
        check_gradient(&x_adv, move |_, v| c.local_euclidean_loss_var(v), h, 60, seed),
    ));
    let x0 = ctx.vertices().clone();
    out.push((
        "chamfer",
        check_gradient(&x_adv, |t, v| losses::chamfer_loss_var(t.constant(x0.clone())?, v), h, 60, seed),
    ));
    let w = ReconWeights {
        l2: 0.5,
        edge: 2.0,
        local_euclidean: 1.0,
        chamfer: 0.25,
    };
    let c = ctx.clone();
    out.push((
        "reconstruction_mixture",
        check_gradient(&x_adv, move |_, v| Ok(c.reconstruction_var(v, &w)?.unwrap()), h, 60, seed),
    ));
    for (name, kind) in [
        ("smoothing_mass_normalized", LaplacianKind::MassNormalized),
        ("smoothing_stiffness", LaplacianKind::Stiffness),
    ] {
        let c = ctx.clone();
        out.push((name, check_gradient(&field, move |_, v| c.smoothing_var(v, kind), h, 60, seed)));
    }
    let t = targets.clone();
    out.push((
        "margin_targeted",
        check_gradient(&logits, move |_, z| losses::margin_loss_var(z, &t)?.sum().map_err(Into::into), h, 30, seed),
    ));
    let t = targets.clone();
    out.push((
        "margin_untargeted",
        check_gradient(
            &logits,
            move |_, z| losses::untargeted_margin_loss_var(z, &t)?.sum().map_err(Into::into),
            h,
            30,
            seed,
        ),
    ));
    let t = targets.clone();
    out.push((
        "cross_entropy",
        check_gradient(&logits, move |_, z| z.softmax_cross_entropy(&t).map_err(Into::into), h, 30, seed),
    ));

    // classifier forward: a random projection of the logits w.r.t. the points,
    // and the cross-entropy w.r.t. every weight and bias tensor
    let net = ClassifierNet::new(small_arch(4), seed).unwrap();
    let proj = Arc::new(random_tensor(1, 4, 1.0, &mut r));
    let points = x_adv.clone();
    let (nref, p) = (&net, proj.clone());
    out.push((
        "classifier_input",
        check_gradient(
            &points,
            move |t, x| {
                let b = nref.bind(t, false)?;
                let z = nref.logits_var(&b, x, 1, false, None)?;
                Ok(z.mul(t.constant(p.clone())?)?.sum()?)
            },
            h,
            60,
            seed,
        ),
    ));
    let (nref, p) = (&net, proj);
    out.push((
        "classifier_input_centered",
        check_gradient(
            &points,
            move |t, x| {
                let b = nref.bind(t, false)?;
                let z = nref.logits_var(&b, x, 1, true, None)?;
                Ok(z.mul(t.constant(p.clone())?)?.sum()?)
            },
            h,
            60,
            seed,
        ),
    ));
    let label = r.gen_range(0..4);
    let mut worst = FdReport {
        rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for li in 0..net.layers().len() {
        for is_bias in [false, true] {
            let layer = &net.layers()[li];
            let value = if is_bias { layer.b.as_ref().clone() } else { layer.w.as_ref().clone() };
            let rep = check_gradient(
                &value,
                |t, p| {
                    let mut b = nn::bind(t, net.layers(), false)?;
                    if is_bias {
                        b.layers[li].1 = p;
                    } else {
                        b.layers[li].0 = p;
                    }
                    let x = t.constant(points.clone())?;
                    let z = net.logits_var(&b, x, 1, false, None)?;
                    z.softmax_cross_entropy(&[label]).map_err(Into::into)
                },
                h,
                20,
                seed,
            );
            if rep.rel_error >= worst.rel_error {
                worst.rel_error = rep.rel_error;
            }
            worst.checked += rep.checked;
            worst.skipped += rep.skipped;
        }
    }
    out.push(("classifier_weights", worst));
    out
}

/// A classifier whose logits ignore the input: constant `bias`.
pub fn constant_classifier(bias: &[f64]) -> ClassifierNet {
    let mut net = ClassifierNet::new(small_arch(bias.len()), 0).unwrap();
    let layers = net.layers_mut();
    let last = layers.len() - 1;
    let l = &mut layers[last];
    *l = Linear::zeros(l.inputs(), l.outputs());
    l.b = Arc::new(Tensor::new(vec![1, bias.len()], bias.to_vec()));
    net
}

pub struct SpectralReport {
    /// `max |Phi^T A Phi - I|`.
    pub orthonormality: f64,
    pub lambda1: f64,
    /// `max |W phi - lambda A phi|` over all basis vectors.
    pub residual: f64,
}

pub fn spectral_report(mesh: &Mesh, k: usize) -> SpectralReport {
    use specadv::spectral::{mass_matrix, stiffness_matrix, eigendecompose};
    let a = mass_matrix(mesh).unwrap();
    let w = stiffness_matrix(mesh).unwrap();
    let basis = eigendecompose(&w, &a, k).unwrap();
    let phi = basis.eigenvectors();
    let n = basis.n();
    let d = a.diagonal();
    let mut ortho: f64 = 0.0;
    for i in 0..k {
        for j in 0..k {
            let dot: f64 = (0..n).map(|r| phi.get(r, i) * d[r] * phi.get(r, j)).sum();
            let expect = if i == j { 1.0 } else { 0.0 };
            ortho = ortho.max((dot - expect).abs());
        }
    }
    let wphi = w.mul_dense(phi.data(), k);
    let mut residual: f64 = 0.0;
    for r in 0..n {
        for i in 0..k {
            let v = wphi[r * k + i] - basis.eigenvalues()[i] * d[r] * phi.get(r, i);
            residual = residual.max(v.abs());
        }
    }
    SpectralReport {
        orthonormality: ortho,
        lambda1: basis.eigenvalues()[0],
        residual,
    }
}

/// Largest relative deviation of the unit icosphere's eigenvalues 2..=9
/// from the continuous sphere values `{2 x3, 6 x5}`.
pub fn icosphere_spectrum_error(subdiv: u32) -> f64 {
    let mesh = shapes::icosphere(1.0, subdiv);
    let basis = specadv::spectral::mesh_basis(&mesh, 9).unwrap();
    let expected = [2.0, 2.0, 2.0, 6.0, 6.0, 6.0, 6.0, 6.0];
    basis.eigenvalues()[1..9]
        .iter()
        .zip(expected)
        .map(|(l, e)| ((l - e) / e).abs())
        .fold(0.0, f64::max)
}

/// Rotation about a random axis followed by a translation.
pub fn random_rigid(x: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let mut axis = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0f64)];
    let l = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt().max(1e-9);
    axis.iter_mut().for_each(|a| *a /= l);
    let angle = rng.gen_range(-3.0..3.0);
    let shift = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
    specadv::classifier::rigid_transform(x, axis, angle, shift)
}

/// `(name, measured, passes)` for every loss identity at one seed.
pub fn loss_identities(seed: u64) -> Vec<(&'static str, f64, bool)> {
    let mut r = rng(seed);
    let mesh = jittered_sphere(2, 0.1, &mut r);
    let ctx = ShapeContext::new(&mesh).unwrap();
    let x = ctx.vertices().as_ref().clone();
    let n = ctx.n();
    let mut out = Vec::new();
    let zero = [
        ("zero_l2", ctx.l2_loss(&x).unwrap()),
        ("zero_edge", ctx.edge_loss(&x).unwrap()),
        ("zero_local_euclidean", ctx.local_euclidean_loss(&x).unwrap()),
        ("zero_chamfer", ctx.chamfer_loss(&x).unwrap()),
        ("zero_curvature", ctx.curvature_distortion(&x).unwrap()),
    ];
    for (name, v) in zero {
        out.push((name, v, v == 0.0));
    }
    let doubled = ctx.edge_loss(&x.map(|v| 2.0 * v)).unwrap();
    out.push(("scale2_edge", doubled, (doubled - 1.0).abs() <= 1e-9));
    let moved = random_rigid(&x, &mut r);
    for (name, v) in [
        ("rigid_edge", ctx.edge_loss(&moved).unwrap()),
        ("rigid_local_euclidean", ctx.local_euclidean_loss(&moved).unwrap()),
        ("rigid_curvature", ctx.curvature_distortion(&moved).unwrap()),
    ] {
        out.push((name, v, v < 1e-9));
    }
    // chamfer compares two clouds, so both move together
    let y = add(&x, &random_tensor(n, 3, 0.05, &mut r));
    let mut r2 = rng(seed ^ 0x5eed);
    let xm = random_rigid(&x, &mut r2);
    let mut r2 = rng(seed ^ 0x5eed);
    let ym = random_rigid(&y, &mut r2);
    let d = (losses::chamfer_loss(&x, &y).unwrap() - losses::chamfer_loss(&xm, &ym).unwrap()).abs();
    out.push(("rigid_chamfer", d, d < 1e-9));
    let mut agree = 0usize;
    for _ in 0..1000 {
        let z: Vec<f64> = (0..10).map(|_| r.gen_range(-5.0..5.0)).collect();
        let t = r.gen_range(0..10);
        let zero_loss = losses::margin_loss(&z, t).unwrap() == 0.0;
        agree += (zero_loss == (specadv::classifier::argmax(&z) == t)) as usize;
    }
    out.push(("margin_iff_predicted", agree as f64, agree == 1000));
    out
}
