use std::sync::Arc;

use gds_core::corpus::Label;
use gds_core::detector::{bce_with_logit, fit, sigmoid, train_mlp, Detector, DetectorConfig, MlpModel};
use gds_core::features::{FeatureLayout, FeatureVector};
use gds_core::tinylm::SubModule;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_model(seed: u64, d_in: usize) -> MlpModel {
    let mut m = MlpModel::init(d_in, &[6, 5], seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    m.biases.iter_mut().flatten().for_each(|b| *b = rng.random_range(-0.5..0.5));
    m
}

fn rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

#[test]
fn batch_loss_is_mean_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = random_model(1, 4);
    let xs = rows(&mut rng, 9, 4);
    let ys: Vec<f64> = (0..9).map(|i| (i % 2) as f64).collect();
    let mut want = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        let p = sigmoid(m.logit(x));
        want -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    want /= 9.0;
    let (loss, _, _) = m.loss_and_grad(&xs, &ys);
    assert!((loss - want).abs() < 1e-10);
    assert!((m.mean_loss(&xs, &ys) - want).abs() < 1e-10);
    assert!((bce_with_logit(1.3, 1.0) + sigmoid(1.3).ln()).abs() < 1e-12);
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..5 {
        let m = random_model(seed, 3);
        let xs = rows(&mut rng, 7, 3);
        let ys: Vec<f64> = (0..7).map(|_| rng.random_range(0..2) as f64).collect();
        let (_, gw, gb) = m.loss_and_grad(&xs, &ys);
        let eps = 1e-6;
        for l in 0..m.weights.len() {
            for i in 0..m.weights[l].len() {
                let mut p = m.clone();
                p.weights[l][i] += eps;
                let up = p.mean_loss(&xs, &ys);
                p.weights[l][i] -= 2.0 * eps;
                let down = p.mean_loss(&xs, &ys);
                let num = (up - down) / (2.0 * eps);
                let rel = (num - gw[l][i]).abs() / (gw[l][i].abs() + 1e-7);
                assert!(rel < 1e-4, "w[{l}][{i}] analytic {} numeric {num}", gw[l][i]);
            }
            for i in 0..m.biases[l].len() {
                let mut p = m.clone();
                p.biases[l][i] += eps;
                let up = p.mean_loss(&xs, &ys);
                p.biases[l][i] -= 2.0 * eps;
                let down = p.mean_loss(&xs, &ys);
                let num = (up - down) / (2.0 * eps);
                assert!((num - gb[l][i]).abs() / (gb[l][i].abs() + 1e-7) < 1e-4);
            }
        }
    }
}

fn pad(x: [f64; 2], d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[..2].copy_from_slice(&x);
    v
}

#[test]
fn separable_data_is_fit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = 112;
    let (mut xs, mut ls) = (Vec::new(), Vec::new());
    for _ in 0..200 {
        let a: f64 = rng.random_range(-1.0..1.0);
        let b: f64 = rng.random_range(-1.0..1.0);
        if (a + 0.5 * b).abs() < 0.1 {
            continue;
        }
        xs.push(pad([a, b], d));
        ls.push(if a + 0.5 * b > 0.0 { Label::Member } else { Label::NonMember });
    }
    let cfg = DetectorConfig { max_epochs: 200, patience: 200, ..Default::default() };
    let (m, s, report) = train_mlp(&xs, &ls, &cfg).unwrap();
    assert!(report.epochs_run <= 200);
    let correct = xs
        .iter()
        .zip(&ls)
        .filter(|(x, l)| (sigmoid(m.logit(&s.transform(x))) > 0.5) == l.is_member())
        .count();
    assert_eq!(correct, xs.len());
}

#[test]
fn shuffled_labels_carry_no_signal() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let xs = rows(&mut rng, 3000, 8);
    let ls: Vec<Label> = (0..3000).map(|_| if rng.random_bool(0.5) { Label::Member } else { Label::NonMember }).collect();
    let (_, _, report) = train_mlp(&xs, &ls, &DetectorConfig::default()).unwrap();
    assert!((0.4..=0.6).contains(&report.val_auroc), "{}", report.val_auroc);
}

fn vectors(rng: &mut ChaCha8Rng, n: usize) -> Vec<FeatureVector> {
    let layout = Arc::new(FeatureLayout::full(1));
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Member } else { Label::NonMember };
            let shift = if label.is_member() { 0.7 } else { 0.0 };
            FeatureVector {
                values: (0..56).map(|d| rng.random_range(0.0..1.0) * (d + 1) as f64 + shift).collect(),
                layout: layout.clone(),
                source_id: format!("s{i}"),
                label,
            }
        })
        .collect()
}

#[test]
fn determinism_batching_and_persistence() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let train = vectors(&mut rng, 80);
    let test = vectors(&mut rng, 30);
    let cfg = DetectorConfig { seed: 4, ..Default::default() };
    let (det, report) = fit(&train, &cfg).unwrap();
    let (det2, report2) = fit(&train, &cfg).unwrap();
    assert_eq!(report, report2);
    assert_eq!(det, det2);
    assert!(report.stopping_epoch <= report.epochs_run && report.epochs_run <= cfg.max_epochs);

    let batch = det.predict_batch(&test).unwrap();
    for (v, p) in test.iter().zip(&batch) {
        assert_eq!(det.predict(v).unwrap(), *p);
        assert!(*p > 0.0 && *p < 1.0);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("detector.json");
    det.save(&path).unwrap();
    let loaded = Detector::load(&path).unwrap();
    assert_eq!(loaded.predict_batch(&test).unwrap(), batch);

    // a vector with a different layout is refused
    let other = FeatureVector {
        layout: Arc::new(FeatureLayout::full(2)),
        values: vec![0.0; 112],
        ..test[0].clone()
    };
    assert!(det.predict(&other).is_err());
    let reordered = gds_core::features::ablate_features(
        &test[..1],
        &gds_core::features::FeatureMask::SubModules(vec![SubModule::Q]),
    )
    .unwrap();
    assert!(det.predict(&reordered[0]).is_err());
    assert!(fit(&train.iter().filter(|v| v.label.is_member()).cloned().collect::<Vec<_>>(), &cfg).is_err());
}

#[test]
fn predictions_invariant_to_affine_rescaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let train = vectors(&mut rng, 60);
    let test = vectors(&mut rng, 20);
    let scale: Vec<(f64, f64)> = (0..56).map(|_| (rng.random_range(0.5..4.0), rng.random_range(-3.0..3.0))).collect();
    let warp = |vs: &[FeatureVector]| -> Vec<FeatureVector> {
        vs.iter()
            .map(|v| FeatureVector {
                values: v.values.iter().zip(&scale).map(|(x, (a, b))| a * x + b).collect(),
                ..v.clone()
            })
            .collect()
    };
    let cfg = DetectorConfig { max_epochs: 30, ..Default::default() };
    let (d1, _) = fit(&train, &cfg).unwrap();
    let (d2, _) = fit(&warp(&train), &cfg).unwrap();
    let p1 = d1.predict_batch(&test).unwrap();
    let p2 = d2.predict_batch(&warp(&test)).unwrap();
    for (a, b) in p1.iter().zip(&p2) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
}
