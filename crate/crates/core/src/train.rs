//! Two-phase training protocol: base training on (possibly poisoned) data
//! to early stopping, then clean fine-tuning for a fixed number of epochs,
//! with clean/poison validation accuracy and adversarial success logged
//! every epoch.

use alloc::format;
use alloc::vec::Vec;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::optim::{AdamConfig, AdamState};
use crate::regularize::{self, RegConfig, RegKind};
use crate::rng::SplitMix64;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Base,
    Retrain,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Base => "base",
            Phase::Retrain => "retrain",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f32,
    pub max_epochs: usize,
    /// Epochs without validation-accuracy improvement before stopping.
    pub patience: usize,
    /// Fixed epoch count for the clean fine-tuning phase.
    pub retrain_epochs: usize,
    pub seed: u64,
    pub reg: RegConfig,
}

impl TrainConfig {
    pub fn new(n_classes: usize) -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-5,
            max_epochs: 50,
            patience: 5,
            retrain_epochs: 10,
            seed: 0,
            reg: RegConfig::none(n_classes),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "batch size must be >= 2 (pairwise regularizers need pairs), got {}",
                self.batch_size
            )));
        }
        if self.patience < 1 {
            return Err(Error::InvalidArgument(format!(
                "patience must be >= 1, got {}",
                self.patience
            )));
        }
        self.reg.validate()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub clean_val_acc: f32,
    pub poison_val_acc: f32,
    pub adv_success: f32,
}

/// Per-epoch metric trail for one phase of one run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub phase: Phase,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    /// Epoch (1-based) whose weights the model ended up with.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Datasets metrics are computed against after every epoch.
pub struct EvalSets<'a> {
    pub clean_val: &'a Dataset,
    pub poison_val: &'a Dataset,
    pub adv_test: &'a Dataset,
    pub poison_class: usize,
}

/// Tracks the best validation accuracy and how long since it improved.
/// Improvement means strictly greater.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f32,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, best: f32::NEG_INFINITY, best_epoch: 0, since_best: 0 }
    }

    /// Feeds one epoch's accuracy; returns true when training should stop.
    pub fn observe(&mut self, epoch: usize, acc: f32) -> bool {
        if acc > self.best {
            self.best = acc;
            self.best_epoch = epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_accuracy(&self) -> f32 {
        self.best
    }
}

/// Fraction of correct argmax predictions.
pub fn accuracy(model: &Classifier, dataset: &Dataset) -> Result<f32> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty dataset".into()));
    }
    let mut correct = 0usize;
    for chunk in dataset.images.chunks(64) {
        let tensors: Vec<&Tensor> = chunk.iter().map(|i| &i.pixels).collect();
        let batch = Tensor::stack(&tensors)?;
        let preds = model.predict(&batch)?;
        correct += preds
            .iter()
            .zip(chunk)
            .filter(|(&p, img)| p == img.label)
            .count();
    }
    Ok(correct as f32 / dataset.len() as f32)
}

/// Fraction of adversarial-test images predicted as the poison class.
/// The set must not contain true poison-class images (enforced upstream by
/// the adversarial-test builder; asserted here).
pub fn adversarial_success(model: &Classifier, adv_test: &Dataset, poison_class: usize) -> Result<f32> {
    if adv_test.is_empty() {
        return Err(Error::InvalidArgument("adversarial success of an empty set".into()));
    }
    assert!(
        adv_test.images.iter().all(|i| i.label != poison_class),
        "adversarial test set contains true poison-class images"
    );
    let mut hits = 0usize;
    for chunk in adv_test.images.chunks(64) {
        let tensors: Vec<&Tensor> = chunk.iter().map(|i| &i.pixels).collect();
        let batch = Tensor::stack(&tensors)?;
        hits += model
            .predict(&batch)?
            .iter()
            .filter(|&&p| p == poison_class)
            .count();
    }
    Ok(hits as f32 / adv_test.len() as f32)
}

const TAG_SHUFFLE: u64 = 0x7368_7566; // "shuf"
const TAG_REG: u64 = 0x7265_6770; // "regp"

fn epoch_metrics(model: &Classifier, evals: &EvalSets, epoch: usize) -> Result<EpochMetrics> {
    Ok(EpochMetrics {
        epoch,
        clean_val_acc: accuracy(model, evals.clean_val)?,
        poison_val_acc: accuracy(model, evals.poison_val)?,
        adv_success: adversarial_success(model, evals.adv_test, evals.poison_class)?,
    })
}

fn one_training_step(
    model: &mut Classifier,
    batch: &Tensor,
    labels: &[usize],
    config: &TrainConfig,
    reg_rng: &mut SplitMix64,
    adam: &mut AdamState,
) -> Result<f32> {
    let n_classes = model.spec.n_classes;
    let mut tape = Tape::new();
    let bindings = model.forward_graph(&mut tape, batch, false)?;

    let reg_cfg = &config.reg;
    let loss = match reg_cfg.kind {
        RegKind::None => regularize::ce_loss(&mut tape, bindings.logits, labels, n_classes)?,
        RegKind::LogitSqueeze => {
            let ce = regularize::ce_loss(&mut tape, bindings.logits, labels, n_classes)?;
            let reg = regularize::logit_squeeze(&mut tape, bindings.logits)?;
            regularize::total_loss(&mut tape, ce, Some(reg), reg_cfg)?
        }
        RegKind::ManifoldMixup => {
            let pairing = regularize::pairing_permutation(labels.len(), reg_rng);
            let gamma = reg_rng.next_f32();
            let mix = regularize::manifold_mixup(
                &mut tape,
                model,
                &bindings.params,
                bindings.hidden,
                labels,
                &pairing,
                gamma,
                n_classes,
            )?;
            let ce = regularize::ce_loss(&mut tape, bindings.logits, labels, n_classes)?;
            regularize::total_loss(&mut tape, ce, Some(mix), reg_cfg)?
        }
        RegKind::Contrastive => {
            let pairing = regularize::pairing_permutation(labels.len(), reg_rng);
            let ce = regularize::ce_loss(&mut tape, bindings.logits, labels, n_classes)?;
            let reg = regularize::contrastive(
                &mut tape,
                bindings.hidden,
                labels,
                &pairing,
                reg_cfg.margin,
                n_classes,
            )?;
            regularize::total_loss(&mut tape, ce, Some(reg), reg_cfg)?
        }
        RegKind::Snnl => {
            let ce = regularize::ce_loss(&mut tape, bindings.logits, labels, n_classes)?;
            let reg = regularize::snnl(&mut tape, bindings.hidden, labels, reg_cfg)?;
            regularize::total_loss(&mut tape, ce, Some(reg), reg_cfg)?
        }
    };
    let loss_value = tape.scalar(loss)?;
    tape.backward(loss)?;
    for (param, &var) in model.params.iter_mut().zip(&bindings.params) {
        match tape.grad(var) {
            Some(g) => param.value.set_grad(g.to_vec())?,
            None => param.value.zero_grad(),
        }
    }
    adam.step(&mut model.params)?;
    Ok(loss_value)
}

fn run_phase(
    model: &mut Classifier,
    train: &Dataset,
    evals: &EvalSets,
    config: &TrainConfig,
    phase: Phase,
    epochs: usize,
    early_stop: bool,
) -> Result<RunRecord> {
    config.validate()?;
    if train.is_empty() && epochs > 0 {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let phase_tag = match phase {
        Phase::Base => 0u64,
        Phase::Retrain => 1,
    };
    let mut shuffle_rng = SplitMix64::derived(config.seed, TAG_SHUFFLE ^ phase_tag);
    let mut reg_rng = SplitMix64::derived(config.seed, TAG_REG ^ phase_tag);
    // Optimizer state is reset at the phase boundary.
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(config.learning_rate))?;

    let mut record = RunRecord {
        phase,
        seed: config.seed,
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut stopper = EarlyStopper::new(config.patience);
    let mut best_weights = model.snapshot();
    let mut indices: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=epochs {
        shuffle_rng.shuffle(&mut indices);
        for (step, chunk) in indices.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue; // pairwise regularizers need pairs
            }
            let tensors: Vec<&Tensor> = chunk.iter().map(|&i| &train.images[i].pixels).collect();
            let batch = Tensor::stack(&tensors)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train.images[i].label).collect();
            let loss =
                one_training_step(model, &batch, &labels, config, &mut reg_rng, &mut adam)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {loss} at epoch {epoch} step {step} ({})",
                    phase.name()
                )));
            }
        }
        let metrics = epoch_metrics(model, evals, epoch)?;
        record.epochs.push(metrics);

        if early_stop {
            let improved = metrics.poison_val_acc > stopper.best_accuracy();
            let stop = stopper.observe(epoch, metrics.poison_val_acc);
            if improved {
                best_weights = model.snapshot();
            }
            if stop {
                record.stopped_early = true;
                break;
            }
        } else {
            stopper.observe(epoch, metrics.poison_val_acc);
            best_weights = model.snapshot();
        }
    }

    if early_stop && !record.epochs.is_empty() {
        model.restore(&best_weights);
        record.best_epoch = stopper.best_epoch();
    } else {
        record.best_epoch = record.epochs.len();
    }
    Ok(record)
}

/// Trains on the (poisoned) public training set until `patience` epochs
/// pass without poison-validation improvement, then restores the
/// best-epoch weights. Runs to `max_epochs` if the criterion never fires.
pub fn train_base(
    model: &mut Classifier,
    poison_train: &Dataset,
    evals: &EvalSets,
    config: &TrainConfig,
) -> Result<RunRecord> {
    run_phase(model, poison_train, evals, config, Phase::Base, config.max_epochs, true)
}

/// Clean fine-tuning: a fixed number of epochs on the trusted clean
/// training set. `retrain_epochs == 0` leaves the model untouched.
pub fn retrain_clean(
    model: &mut Classifier,
    clean_train: &Dataset,
    evals: &EvalSets,
    config: &TrainConfig,
) -> Result<RunRecord> {
    run_phase(model, clean_train, evals, config, Phase::Retrain, config.retrain_epochs, false)
}
