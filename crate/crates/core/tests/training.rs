//! Behaviour of the training loop on the default synthetic subject. Each
//! test trains at most two desk-scale models.

use ablatron::evaluation::{evaluate_with_masks, draw_masks, ImputeMode, Method, MissingSpec};
use ablatron::nn::ModelParams;
use ablatron::pipeline::{predict_set, prepare_fold, session_kfold, train_prepared, PreparedFold, TrainConfig, Variant};
use ablatron::preprocess::N_CLASSES;
use ablatron::synthgen::{generate_dataset, GenConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fold0() -> PreparedFold {
    let ds = generate_dataset(&GenConfig::default()).unwrap().dataset;
    let folds = session_kfold(&ds.sessions(), 5).unwrap();
    prepare_fold(&ds, &folds[0]).unwrap()
}

#[test]
fn untrained_network_is_near_chance() {
    let p = fold0();
    let config = TrainConfig::default().model_config(p.test.rows, p.test.cols);
    let chance = 100.0 / N_CLASSES as f64;
    let mut accs = Vec::new();
    for seed in 0..3 {
        let params = ModelParams::<f32>::init(config.clone(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let pred = predict_set(&params, &p.test).unwrap();
        let correct = pred.iter().zip(&p.test.labels).filter(|(a, b)| a == b).count();
        accs.push(100.0 * correct as f64 / p.test.len() as f64);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - chance).abs() < 10.0, "untrained accuracies {accs:?}");
}

#[test]
fn both_variants_fit_and_ablation_pays_off_under_loss() {
    let p = fold0();
    let config = TrainConfig::default();
    let standard = train_prepared(&p, &config, Variant::Standard).unwrap();
    let robust = train_prepared(&p, &config, Variant::Robust).unwrap();
    for m in [&standard, &robust] {
        assert_eq!(m.loss_curve.len(), config.epochs);
        assert!(m.loss_curve.iter().all(|l| l.is_finite()));
        assert!(
            m.loss_curve.last().unwrap() < &(0.5 * m.loss_curve[0]),
            "{} loss curve {:?}",
            m.variant,
            m.loss_curve
        );
    }
    assert!(standard.train_accuracy >= 95.0, "standard train accuracy {}", standard.train_accuracy);
    assert!(robust.train_accuracy >= 90.0, "robust train accuracy {}", robust.train_accuracy);

    let masks = draw_masks(MissingSpec::Fixed(8), p.test.len(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let acc = |m, method| evaluate_with_masks(m, &p.test, &p.layout, method, &masks, ImputeMode::PerColumn).unwrap();
    let proposed = acc(&robust, Method::Proposed);
    let baseline = acc(&standard, Method::Baseline);
    assert!(proposed > baseline + 10.0, "proposed {proposed:.1} vs baseline {baseline:.1}");
}
