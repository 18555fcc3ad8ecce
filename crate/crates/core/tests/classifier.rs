mod common;

use common::*;
use rand::seq::SliceRandom;
use rand::Rng;
use specadv::classifier::{
    evaluate, train_classifier, Arch, Augmentation, ClassifierNet, TrainConfig,
};
use specadv::dataset::{Dataset, LabeledMesh, Normalization, Split};
use specadv::mesh::shapes;
use specadv::Tensor;

/// Two clusters of small spheres at `+-(5, 0, 0)`.
fn toy_clusters(per_class: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let base = shapes::icosphere(0.5, 0);
    let mut items = Vec::new();
    for label in 0..2 {
        let cx = if label == 0 { 5.0 } else { -5.0 };
        for s in 0..per_class {
            let v = base
                .vertices()
                .iter()
                .map(|p| [p[0] + cx + r.gen_range(-0.2..0.2), p[1] + r.gen_range(-0.2..0.2), p[2]])
                .collect();
            items.push(LabeledMesh {
                mesh: base.with_vertices(v).unwrap(),
                label,
                subject: s,
                split: if s % 5 == 4 { Split::Val } else { Split::Train },
                name: format!("toy_{label}_{s}"),
                normalization: Normalization::identity(),
            });
        }
    }
    Dataset {
        items,
        classes: 2,
        seed: Some(seed),
    }
}

fn no_aug() -> Augmentation {
    Augmentation {
        rotate: false,
        full_rotation: false,
        translation: 0.0,
    }
}

#[test]
fn separable_clusters_are_learned_within_fifty_epochs() {
    let ds = toy_clusters(10, 3);
    let cfg = TrainConfig {
        epochs: 50,
        augmentation: no_aug(),
        select_best_val: false,
        ..TrainConfig::default()
    };
    let (_, rep) = train_classifier(&ds, &small_arch(2), &cfg).unwrap();
    assert_eq!(rep.train_accuracy, 1.0, "{:?}", rep.epochs.last());
}

#[test]
fn zero_epochs_is_near_chance() {
    let ds = specadv::dataset::generate_synthetic(0, &Default::default()).unwrap();
    let arch = Arch {
        point_widths: vec![16, 16, 32],
        head_widths: vec![16],
        ..Arch::default()
    };
    let mut accs = Vec::new();
    for seed in 0..5 {
        let cfg = TrainConfig {
            epochs: 0,
            seed,
            ..TrainConfig::default()
        };
        let (_, rep) = train_classifier(&ds, &arch, &cfg).unwrap();
        assert!(rep.epochs.is_empty());
        assert_eq!(rep.selected_epoch, 0);
        accs.push(rep.train_accuracy);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.1).abs() <= 0.15, "{accs:?}");
}

#[test]
fn forward_is_bitwise_permutation_invariant() {
    let net = ClassifierNet::new(Arch::default(), 11).unwrap();
    let mut r = rng(5);
    let mesh = jittered_sphere(2, 0.1, &mut r);
    let pts = Tensor::from_points(mesh.vertices());
    let base = net.forward(&pts, false).unwrap();
    let centered = net.forward(&pts, true).unwrap();
    for _ in 0..20 {
        let mut rows: Vec<usize> = (0..pts.rows()).collect();
        rows.shuffle(&mut r);
        let data = rows.iter().flat_map(|&i| pts.row(i).to_vec()).collect();
        let perm = Tensor::new(vec![pts.rows(), 3], data);
        assert_eq!(net.forward(&perm, false).unwrap(), base);
        let c = net.forward(&perm, true).unwrap();
        for (a, b) in c.iter().zip(&centered) {
            // centering sums in a different order
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn training_is_deterministic_and_checkpoints_roundtrip() {
    let ds = toy_clusters(5, 9);
    let cfg = TrainConfig {
        epochs: 3,
        seed: 4,
        ..TrainConfig::default()
    };
    let (a, ra) = train_classifier(&ds, &small_arch(2), &cfg).unwrap();
    let (b, rb) = train_classifier(&ds, &small_arch(2), &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(format!("{ra:?}"), format!("{rb:?}"));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.bin");
    a.save(&p).unwrap();
    assert_eq!(ClassifierNet::load(&p).unwrap(), a);
    let csv_a = dir.path().join("a.csv");
    ra.write_csv(&csv_a).unwrap();
    let text = std::fs::read_to_string(&csv_a).unwrap();
    assert!(text.starts_with("epoch,train_loss,train_acc,val_loss,val_acc"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn evaluation_agrees_with_predict() {
    let ds = toy_clusters(4, 1);
    let net = ClassifierNet::new(small_arch(2), 2).unwrap();
    let items: Vec<&LabeledMesh> = ds.items.iter().collect();
    let (_, acc) = evaluate(&net, &items, false).unwrap();
    let hits = items
        .iter()
        .filter(|m| net.predict(&Tensor::from_points(m.mesh.vertices()), false).unwrap() == m.label)
        .count();
    assert_eq!(acc, hits as f64 / items.len() as f64);
}
