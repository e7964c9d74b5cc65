//! The synthetic generator's classes must be separable by the toy CNN: a
//! training run is the oracle.

use poisonlab_core::data::{partition, synth_generate, DEFAULT_FRACTIONS, DEFAULT_INNER_SPLIT};
use poisonlab_core::model::{Classifier, ClassifierSpec};
use poisonlab_core::regularize::RegConfig;
use poisonlab_core::train::{train_base, EvalSets, TrainConfig};

#[test]
fn toy_cnn_separates_synthetic_classes() {
    let ds = synth_generate(3, 200, 32, 32, 11).unwrap();
    let bundle = partition(&ds, DEFAULT_FRACTIONS, DEFAULT_INNER_SPLIT, 1).unwrap();
    let mut model = Classifier::init(ClassifierSpec::toy(32, 32, 3), 2).unwrap();
    let config = TrainConfig {
        batch_size: 32,
        learning_rate: 3e-3,
        max_epochs: 20,
        patience: 20,
        retrain_epochs: 0,
        seed: 3,
        reg: RegConfig::none(3),
    };
    // No poisoning anywhere; the adversarial slot just reuses a clean split
    // with one class dropped so the metric is well-defined.
    let adv: Vec<_> = bundle
        .adv_test
        .images
        .iter()
        .filter(|i| i.label != 0)
        .cloned()
        .collect();
    let adv = poisonlab_core::data::Dataset::new(3, adv).unwrap();
    let evals = EvalSets {
        clean_val: &bundle.clean_val,
        poison_val: &bundle.poison_val,
        adv_test: &adv,
        poison_class: 0,
    };
    let record = train_base(&mut model, &bundle.poison_train, &evals, &config).unwrap();
    let best = record
        .epochs
        .iter()
        .map(|m| m.poison_val_acc)
        .fold(0.0f32, f32::max);
    assert!(
        best >= 0.99,
        "validation accuracy only reached {best} within 20 epochs"
    );
    // An unpoisoned run also clears the early-stop-time bar.
    let last = record.epochs.last().unwrap();
    assert!(last.clean_val_acc >= 0.95, "clean val {}", last.clean_val_acc);
}
