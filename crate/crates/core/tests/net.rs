use confkit::features::{FeatureMatrix, FeatureSchema, FeatureStats};
use confkit::net::{train, word_confidence, ConfidenceModel, Dims, Example, ModelKind, TrainConfig, TrainData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WIDTH: usize = 4;

fn schema() -> FeatureSchema {
    FeatureSchema {
        topk: 2,
        extra_dims: 0,
        lm_in: false,
        lm_ood: false,
    }
}

fn stats() -> FeatureStats {
    let data: Vec<f64> = (0..6 * WIDTH).map(|i| ((i * 7) % 11) as f64 * 0.3).collect();
    let m = FeatureMatrix::new(WIDTH, data).unwrap();
    FeatureStats::compute(WIDTH, [&m]).unwrap()
}

fn random_example(rng: &mut ChaCha8Rng, kind: ModelKind) -> Example {
    let len = rng.random_range(1..6);
    let data: Vec<f64> = (0..len * WIDTH).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = match kind {
        ModelKind::Cem => (0..len).map(|_| rng.random_bool(0.5)).collect(),
        ModelKind::Rebm => vec![rng.random_bool(0.5)],
    };
    Example {
        features: FeatureMatrix::new(WIDTH, data).unwrap(),
        labels,
    }
}

fn check_gradients(kind: ModelKind, layers: usize, hidden: usize) {
    let dims = Dims::new(layers, hidden, WIDTH).unwrap();
    let model = ConfidenceModel::init(kind, dims, schema(), stats(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let batch: Vec<Example> = (0..3).map(|_| random_example(&mut rng, kind)).collect();
    let (_, grad) = model.loss_and_gradients(&batch).unwrap();
    let step = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..model.params.len() {
        let mut plus = model.clone();
        plus.params[i] += step;
        let mut minus = model.clone();
        minus.params[i] -= step;
        let lp = plus.loss_and_gradients(&batch).unwrap().0;
        let lm = minus.loss_and_gradients(&batch).unwrap().0;
        let numeric = (lp - lm) / (2.0 * step);
        let err = (numeric - grad[i]).abs();
        let scale = numeric.abs().max(grad[i].abs());
        assert!(
            err <= 1e-4 * scale + 1e-9,
            "param {i}: analytic {} numeric {numeric}",
            grad[i]
        );
        if scale > 1e-6 {
            worst = worst.max(err / scale);
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn cem_gradients_match_finite_differences() {
    check_gradients(ModelKind::Cem, 1, 3);
    check_gradients(ModelKind::Cem, 2, 3);
}

#[test]
fn rebm_gradients_match_finite_differences() {
    check_gradients(ModelKind::Rebm, 1, 2);
    check_gradients(ModelKind::Rebm, 2, 3);
}

fn separable(n: usize, seed: u64, kind: ModelKind) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(2..6);
            let mut data = Vec::new();
            let mut labels = Vec::new();
            for _ in 0..len {
                let y = rng.random_bool(0.5);
                let centre = if y { 1.0 } else { -1.0 };
                data.push(centre + rng.random_range(-0.2..0.2));
                for _ in 1..WIDTH {
                    data.push(rng.random_range(-1.0..1.0));
                }
                labels.push(y);
            }
            if kind == ModelKind::Rebm {
                let y = rng.random_bool(0.5);
                let centre = if y { 1.0 } else { -1.0 };
                for row in data.chunks_exact_mut(WIDTH) {
                    row[0] = centre + rng.random_range(-0.2..0.2);
                }
                labels = vec![y];
            }
            Example {
                features: FeatureMatrix::new(WIDTH, data).unwrap(),
                labels,
            }
        })
        .collect()
}

#[test]
fn training_fits_separable_data() {
    for kind in [ModelKind::Cem, ModelKind::Rebm] {
        let data = TrainData {
            in_domain: separable(64, 1, kind),
            ood: Vec::new(),
        };
        let dims = Dims::new(1, 4, WIDTH).unwrap();
        let model = ConfidenceModel::init(kind, dims, schema(), FeatureStats::identity(WIDTH), 2).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            batch_size: 8,
            epochs: 40,
            ..TrainConfig::default()
        };
        let (trained, report) = train(model, &data, &cfg).unwrap();
        let (final_loss, _) = trained.loss_and_gradients(&data.in_domain).unwrap();
        assert_eq!(report.loss_trace.len(), 40);
        assert!(
            final_loss < 0.1 * report.initial_loss,
            "{kind:?}: {final_loss} vs initial {}",
            report.initial_loss
        );
    }
}

#[test]
fn ood_items_per_batch_follow_the_ratio() {
    let kind = ModelKind::Cem;
    let data = TrainData {
        in_domain: separable(45, 3, kind),
        ood: separable(7, 4, kind),
    };
    let dims = Dims::new(1, 2, WIDTH).unwrap();
    let model = ConfidenceModel::init(kind, dims, schema(), FeatureStats::identity(WIDTH), 0).unwrap();
    let cfg = TrainConfig {
        batch_size: 10,
        epochs: 3,
        ood_mix_ratio: 0.1,
        ..TrainConfig::default()
    };
    let (_, report) = train(model.clone(), &data, &cfg).unwrap();
    assert_eq!(report.ood_per_batch.len(), 3 * 5);
    assert!(report.ood_per_batch.iter().all(|&n| n == 1));
    assert_eq!(report.ood_seen, 15);
    assert_eq!(report.in_domain_seen, 3 * 45);

    let none = TrainConfig {
        ood_mix_ratio: 0.0,
        ..cfg.clone()
    };
    let (_, report) = train(model.clone(), &data, &none).unwrap();
    assert_eq!(report.ood_seen, 0);

    let bad = TrainConfig {
        ood_mix_ratio: -0.1,
        ..cfg
    };
    assert!(train(model, &data, &bad).is_err());
}

#[test]
fn training_is_deterministic() {
    let kind = ModelKind::Rebm;
    let data = TrainData {
        in_domain: separable(20, 5, kind),
        ood: separable(5, 6, kind),
    };
    let dims = Dims::new(2, 3, WIDTH).unwrap();
    let model = ConfidenceModel::init(kind, dims, schema(), FeatureStats::identity(WIDTH), 8).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        epochs: 3,
        seed: 42,
        ..TrainConfig::default()
    };
    let (a, ra) = train(model.clone(), &data, &cfg).unwrap();
    let (b, rb) = train(model.clone(), &data, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(ra, rb);
    let other = TrainConfig { seed: 43, ..cfg };
    let (c, _) = train(model, &data, &other).unwrap();
    assert_ne!(a.params, c.params);
}

/// Copy of `model` with the recurrent matrices zeroed and the update gate
/// forced shut, so each position is processed independently.
fn without_recurrence(model: &ConfidenceModel) -> ConfidenceModel {
    let mut file = model.to_file();
    let h = model.dims.hidden;
    for t in &mut file.params {
        if t.name.ends_with(".u") {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        } else if t.name.ends_with(".w") && t.name.starts_with("layer") {
            let cols = t.shape[1];
            t.data[..h * cols].iter_mut().for_each(|v| *v = 0.0);
        } else if t.name.ends_with(".b") && t.name.starts_with("layer") {
            t.data[..h].iter_mut().for_each(|v| *v = -50.0);
        }
    }
    ConfidenceModel::from_file(file).unwrap()
}

fn doubled(m: &FeatureMatrix) -> FeatureMatrix {
    let mut data = m.as_slice().to_vec();
    data.extend_from_slice(m.as_slice());
    FeatureMatrix::new(m.width(), data).unwrap()
}

#[test]
fn closed_gates_make_positions_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for layers in 1..=2 {
        let dims = Dims::new(layers, 3, WIDTH).unwrap();
        let cem = without_recurrence(&ConfidenceModel::init(ModelKind::Cem, dims, schema(), stats(), 2).unwrap());
        let rebm = without_recurrence(&ConfidenceModel::init(ModelKind::Rebm, dims, schema(), stats(), 3).unwrap());
        let x = random_example(&mut rng, ModelKind::Cem).features;
        let once = cem.forward_cem(&x).unwrap();
        let twice = cem.forward_cem(&doubled(&x)).unwrap();
        assert_eq!(twice.len(), 2 * once.len());
        for (a, b) in once.iter().chain(&once).zip(&twice) {
            assert!((a - b).abs() < 1e-12);
        }
        for (i, row) in x.iter_rows().enumerate() {
            let single = FeatureMatrix::new(WIDTH, row.to_vec()).unwrap();
            assert!((cem.forward_cem(&single).unwrap()[0] - once[i]).abs() < 1e-12);
        }
        let r1 = rebm.forward_rebm(&x).unwrap();
        let r2 = rebm.forward_rebm(&doubled(&x)).unwrap();
        assert!((r1 - r2).abs() < 1e-12);
    }
}

#[test]
fn recurrence_makes_context_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dims = Dims::new(1, 3, WIDTH).unwrap();
    let cem = ConfidenceModel::init(ModelKind::Cem, dims, schema(), stats(), 2).unwrap();
    let x = loop {
        let e = random_example(&mut rng, ModelKind::Cem);
        if e.features.rows() >= 2 {
            break e.features;
        }
    };
    let once = cem.forward_cem(&x).unwrap();
    let twice = cem.forward_cem(&doubled(&x)).unwrap();
    assert!(once.iter().zip(&twice).any(|(a, b)| (a - b).abs() > 1e-9));
}

#[test]
fn word_confidence_is_monotone_in_token_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..200 {
        let n = rng.random_range(1..10);
        let mut flags: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        flags[0] = true;
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let before = word_confidence(&scores, &flags).unwrap();
        let i = rng.random_range(0..n);
        let mut lowered = scores.clone();
        lowered[i] *= rng.random::<f64>();
        let after = word_confidence(&lowered, &flags).unwrap();
        assert_eq!(before.len(), after.len());
        assert!(before.iter().zip(&after).all(|(b, a)| a <= b));
        let mut raised = scores.clone();
        raised[i] = raised[i] + (1.0 - raised[i]) * rng.random::<f64>();
        let after = word_confidence(&raised, &flags).unwrap();
        assert!(before.iter().zip(&after).all(|(b, a)| a >= b));
    }
}
