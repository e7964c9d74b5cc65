//! Finite-difference verification of tape gradients through the full model
//! and every loss that composes with it.
//!
//! Conv/relu instances are screened with `find_kink_free_seed` first: a
//! pre-activation within the perturbation's reach of zero makes the
//! numeric derivative meaningless at that component, so such draws are
//! skipped. The losses themselves are checked on the first seeds that
//! survive the screen.

use poisonlab_core::grad_check::{
    check_loss, find_kink_free_seed, DEFAULT_STEP, KINK_MARGIN,
};
use poisonlab_core::model::{Classifier, ClassifierSpec, ConvBlockSpec, HeadPooling};
use poisonlab_core::regularize::{self, RegConfig, RegKind};
use poisonlab_core::rng::{mix, SplitMix64};
use poisonlab_core::tape::Tape;
use poisonlab_core::tensor::Tensor;
use poisonlab_core::Result;

fn small_spec() -> ClassifierSpec {
    ClassifierSpec {
        input: (5, 5, 3),
        conv_blocks: vec![ConvBlockSpec { filters: 3, kernel: 3, stride: 2 }],
        // Average pooling for gradient checks: max pooling's argmax can
        // switch cells under finite perturbation, which is the same
        // non-differentiability problem as a relu kink.
        pooling: HeadPooling::GlobalAvg,
        hidden_dim: 4,
        n_classes: 3,
    }
}

struct Instance {
    model: Classifier,
    batch: Tensor,
    labels: Vec<usize>,
}

fn build_instance(seed: u64, batch_size: usize) -> Result<Instance> {
    let model = Classifier::init(small_spec(), mix(seed, 1))?;
    let mut rng = SplitMix64::derived(seed, 2);
    let mut batch = Tensor::zeros(&[batch_size, 5, 5, 3]);
    for v in batch.data_mut() {
        *v = rng.next_f32();
    }
    let labels: Vec<usize> = (0..batch_size).map(|_| rng.below(3)).collect();
    Ok(Instance { model, batch, labels })
}

fn kink_free_instance(base_seed: u64, batch_size: usize) -> Instance {
    let seed = find_kink_free_seed(base_seed, KINK_MARGIN, 64, &mut |s| {
        let inst = build_instance(s, batch_size)?;
        let mut tape = Tape::new();
        inst.model.forward_graph(&mut tape, &inst.batch, false)?;
        Ok(tape.fd_margin())
    })
    .expect("kink-free instance");
    build_instance(seed, batch_size).unwrap()
}

/// Random conv net: the cross-entropy gradient w.r.t. the input image and
/// every weight matches central finite differences.
#[test]
fn full_model_cross_entropy_gradients() {
    for base in 0..5 {
        let inst = kink_free_instance(1000 + base, 2);
        let mut inputs = vec![inst.batch.clone()];
        inputs.extend(inst.model.params.iter().map(|p| p.value.clone()));
        let report = check_loss(
            &mut |tape, vars| {
                let (_hidden, logits) = inst.model.graph_from(tape, vars[0], &vars[1..])?;
                regularize::ce_loss(tape, logits, &inst.labels, 3)
            },
            &inputs,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.passes(1e-3), "base {base}: relative error {}", report.global_rel);
    }
}

/// The default max-pooled head, finite-differenced on an instance whose
/// pooling argmaxes sit well clear of ties (fixed seed, verified stable).
#[test]
fn max_pool_model_gradients() {
    let mut spec = small_spec();
    spec.pooling = HeadPooling::GlobalMax;
    let model = Classifier::init(spec, mix(6000, 1)).unwrap();
    let mut rng = SplitMix64::derived(6000, 2);
    let mut batch = Tensor::zeros(&[2, 5, 5, 3]);
    for v in batch.data_mut() {
        *v = rng.next_f32();
    }
    let labels = vec![1usize, 2];
    let mut inputs = vec![batch];
    inputs.extend(model.params.iter().map(|p| p.value.clone()));
    let report = check_loss(
        &mut |tape, vars| {
            let (_hidden, logits) = model.graph_from(tape, vars[0], &vars[1..])?;
            regularize::ce_loss(tape, logits, &labels, 3)
        },
        &inputs,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.passes(1e-3), "relative error {}", report.global_rel);
}

/// Gradient of mean(h) w.r.t. the input image.
#[test]
fn hidden_mean_input_gradient() {
    let inst = kink_free_instance(2000, 2);
    let report = check_loss(
        &mut |tape, vars| {
            let params: Vec<_> = inst.model.params.iter().map(|p| tape.leaf(&p.value)).collect();
            let (hidden, _logits) = inst.model.graph_from(tape, vars[0], &params)?;
            tape.mean(hidden)
        },
        std::slice::from_ref(&inst.batch),
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.passes(1e-3), "relative error {}", report.global_rel);
}

fn random_hidden(b: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    let mut t = Tensor::zeros(&[b, d]);
    for v in t.data_mut() {
        *v = rng.normal();
    }
    t
}

#[test]
fn logit_squeeze_gradients() {
    for seed in 0..5 {
        let h = random_hidden(4, 5, 100 + seed);
        let report = check_loss(
            &mut |tape, vars| regularize::logit_squeeze(tape, vars[0]),
            &[h],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.passes(1e-3), "seed {seed}: {}", report.global_rel);
    }
}

#[test]
fn contrastive_gradients() {
    let labels = [0usize, 1, 0, 2];
    let pairing = [2usize, 3, 0, 1];
    for seed in 0..5 {
        let h = random_hidden(4, 6, 200 + seed);
        let report = check_loss(
            &mut |tape, vars| {
                regularize::contrastive(tape, vars[0], &labels, &pairing, 2.0, 3)
            },
            &[h],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.passes(1e-3), "seed {seed}: {}", report.global_rel);
    }
}

#[test]
fn snnl_gradients_both_forms() {
    let labels = [0usize, 1, 0, 1, 2];
    for same_class in [false, true] {
        for seed in 0..5 {
            // Std 0.4 keeps pairwise distances ~1: spread-out clusters
            // saturate the loss toward zero and its gradient below the
            // f32 finite-difference noise floor.
            let mut h = random_hidden(5, 4, 300 + seed);
            for v in h.data_mut() {
                *v *= 0.4;
            }
            let report = check_loss(
                &mut |tape, vars| tape.snnl(vars[0], &labels, 0.8, same_class),
                &[h],
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(
                report.passes(1e-3),
                "seed {seed} same_class {same_class}: {}",
                report.global_rel
            );
        }
    }
}

#[test]
fn mixup_gradients_through_head() {
    let inst = kink_free_instance(3000, 4);
    let pairing = [1usize, 0, 3, 2];
    let mut inputs = vec![inst.batch.clone()];
    inputs.extend(inst.model.params.iter().map(|p| p.value.clone()));
    let report = check_loss(
        &mut |tape, vars| {
            let (hidden, _logits) = inst.model.graph_from(tape, vars[0], &vars[1..])?;
            regularize::manifold_mixup(
                tape,
                &inst.model,
                &vars[1..],
                hidden,
                &inst.labels,
                &pairing,
                0.37,
                3,
            )
        },
        &inputs,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.passes(1e-3), "relative error {}", report.global_rel);
}

/// Composed total loss: grad(ce + w * reg) = grad(ce) + w * grad(reg).
#[test]
fn total_loss_gradient_composes() {
    let inst = kink_free_instance(4000, 2);
    let mut cfg = RegConfig::new(RegKind::LogitSqueeze, 3);
    cfg.weight = 0.7;
    let mut inputs = vec![inst.batch.clone()];
    inputs.extend(inst.model.params.iter().map(|p| p.value.clone()));
    let report = check_loss(
        &mut |tape, vars| {
            let (_hidden, logits) = inst.model.graph_from(tape, vars[0], &vars[1..])?;
            let ce = regularize::ce_loss(tape, logits, &inst.labels, 3)?;
            let reg = regularize::logit_squeeze(tape, logits)?;
            regularize::total_loss(tape, ce, Some(reg), &cfg)
        },
        &inputs,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.passes(1e-3), "relative error {}", report.global_rel);
}
