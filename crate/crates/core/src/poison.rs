//! Poisoning plans: source sampling, supplanting, and the adversarial test
//! set.
//!
//! Poisoned copies of source-class images are relabeled to the poison
//! class and *supplant* randomly chosen clean poison-class images, so the
//! per-class label histogram is identical before and after. The untampered
//! originals stay in their source classes.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{largest_remainder, Dataset, ImageId, LabeledImage, Provenance};
use crate::error::{Error, Result};
use crate::fmath;
use crate::rng::SplitMix64;
use crate::trigger::{embed, Trigger};

/// Poisoned copies get ids in a reserved namespace so they can never
/// collide with loader-assigned ids in other partitions.
const POISON_ID_BASE: ImageId = 1 << 62;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// A single source class supplies every poisoned sample.
    OneToOne { source_class: usize },
    /// All classes except the poison class are source classes.
    ManyToOne,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::OneToOne { .. } => "one_to_one",
            Strategy::ManyToOne => "many_to_one",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PoisonPlan {
    pub poison_class: usize,
    pub strategy: Strategy,
    /// Poison rate: fraction of poison-class images supplanted.
    pub rate: f64,
    pub seed: u64,
}

impl PoisonPlan {
    pub fn new(poison_class: usize, strategy: Strategy, rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "poison rate must lie in [0,1], got {rate}"
            )));
        }
        if let Strategy::OneToOne { source_class } = strategy {
            if source_class == poison_class {
                return Err(Error::InvalidArgument(format!(
                    "poison class {poison_class} cannot be its own source class"
                )));
            }
        }
        Ok(PoisonPlan { poison_class, strategy, rate, seed })
    }

    /// Source classes for a dataset with `n_classes` labels. The poison
    /// class is never among them.
    pub fn source_classes(&self, n_classes: usize) -> Result<Vec<usize>> {
        if self.poison_class >= n_classes {
            return Err(Error::InvalidArgument(format!(
                "poison class {} out of range for {n_classes} classes",
                self.poison_class
            )));
        }
        let sources = match self.strategy {
            Strategy::OneToOne { source_class } => {
                if source_class >= n_classes {
                    return Err(Error::InvalidArgument(format!(
                        "source class {source_class} out of range for {n_classes} classes"
                    )));
                }
                vec![source_class]
            }
            Strategy::ManyToOne => (0..n_classes).filter(|&c| c != self.poison_class).collect(),
        };
        if sources.is_empty() {
            return Err(Error::InvalidArgument("no source classes available".into()));
        }
        Ok(sources)
    }
}

/// Planned and realized poisoning counts, mirroring the sampling table:
/// total floor(lambda N_t), expected and actual per-source counts, and the
/// effective rate over the whole training set.
#[derive(Debug, Clone)]
pub struct PoisonReport {
    pub poison_class: usize,
    pub total_poisoned: usize,
    /// Expected draw P_c per class (zero for non-source classes).
    pub expected_per_source: Vec<f64>,
    /// Largest-remainder realization of the expectations.
    pub actual_per_source: Vec<usize>,
    /// total_poisoned / total training-set size.
    pub effective_rate: f64,
}

impl PoisonReport {
    /// Two CSV lines mirroring the sampling-table columns:
    /// `t,total,P_1..P_n,p`.
    pub fn table_csv(&self) -> String {
        let n = self.expected_per_source.len();
        let mut header = String::from("t,total");
        for c in 0..n {
            header.push_str(&format!(",P_{}", c + 1));
        }
        header.push_str(",p");
        let mut row = format!("{},{}", self.poison_class, self.total_poisoned);
        for p in &self.expected_per_source {
            row.push_str(&format!(",{p:.1}"));
        }
        row.push_str(&format!(",{:.3}", self.effective_rate));
        format!("{header}\n{row}\n")
    }
}

/// floor(lambda * N_t), with a tiny guard so decimal rates like 0.1 hit
/// their intended integer products exactly.
fn total_poisoned(rate: f64, n_t: usize) -> usize {
    fmath::floor64(rate * n_t as f64 + 1e-9) as usize
}

/// How many samples the plan would poison on these class sizes.
pub fn planned_total(class_sizes: &[usize], plan: &PoisonPlan) -> usize {
    let n_t = class_sizes.get(plan.poison_class).copied().unwrap_or(0);
    total_poisoned(plan.rate, n_t)
}

/// Expected and realized per-source counts for the plan on these class
/// sizes. Requires lambda * N_t >= 1.
pub fn plan_counts(class_sizes: &[usize], plan: &PoisonPlan) -> Result<PoisonReport> {
    let sources = plan.source_classes(class_sizes.len())?;
    let n_t = class_sizes[plan.poison_class];
    let total = total_poisoned(plan.rate, n_t);
    if total < 1 {
        return Err(Error::InvalidArgument(format!(
            "lambda * N_t = {} * {n_t} rounds below 1 poisoned sample",
            plan.rate
        )));
    }
    let source_total: usize = sources.iter().map(|&c| class_sizes[c]).sum();
    if source_total == 0 {
        return Err(Error::InvalidArgument("source classes are empty".into()));
    }
    let mut expected = vec![0.0f64; class_sizes.len()];
    for &c in &sources {
        expected[c] = total as f64 * class_sizes[c] as f64 / source_total as f64;
    }
    let actual = largest_remainder(&expected, total);
    Ok(PoisonReport {
        poison_class: plan.poison_class,
        total_poisoned: total,
        expected_per_source: expected,
        actual_per_source: actual,
        effective_rate: effective_rate(class_sizes, plan),
    })
}

/// Poisoned samples as a fraction of the whole training set:
/// floor(lambda N_t) / sum over all classes. Zero rate gives zero.
pub fn effective_rate(class_sizes: &[usize], plan: &PoisonPlan) -> f64 {
    let n_t = class_sizes.get(plan.poison_class).copied().unwrap_or(0);
    let total: usize = class_sizes.iter().sum();
    if total == 0 {
        return 0.0;
    }
    total_poisoned(plan.rate, n_t) as f64 / total as f64
}

const TAG_SOURCE_DRAW: u64 = 0x7372_6377; // "srcw"
const TAG_SUPPLANT: u64 = 0x7375_7070; // "supp"
const TAG_PLACEMENT: u64 = 0x706c_6163; // "plac"
const TAG_ADV: u64 = 0x6164_7674; // "advt"

/// Executes the plan on a dataset copy: draws per-source images, embeds the
/// trigger, relabels them to the poison class, and removes an equal number
/// of randomly chosen clean poison-class images. Class sizes are unchanged.
pub fn apply_plan(
    dataset: &Dataset,
    plan: &PoisonPlan,
    trigger: &Trigger,
) -> Result<(Dataset, PoisonReport)> {
    let class_sizes = dataset.class_sizes();
    let report = plan_counts(&class_sizes, plan)?;
    if report.total_poisoned > class_sizes[plan.poison_class] {
        return Err(Error::InvalidArgument(format!(
            "{} poisoned samples exceed poison-class size {}",
            report.total_poisoned, class_sizes[plan.poison_class]
        )));
    }

    let mut draw_rng = SplitMix64::derived(plan.seed, TAG_SOURCE_DRAW);
    let mut place_rng = SplitMix64::derived(plan.seed, TAG_PLACEMENT);
    let mut poisoned: Vec<LabeledImage> = Vec::with_capacity(report.total_poisoned);
    let mut copy_seq: ImageId = 0;
    for (class, &count) in report.actual_per_source.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let members: Vec<usize> = (0..dataset.images.len())
            .filter(|&i| dataset.images[i].label == class)
            .collect();
        let picks = draw_rng.choose(members.len(), count);
        for p in picks {
            let src = &dataset.images[members[p]];
            let (h, w) = (src.pixels.shape()[0], src.pixels.shape()[1]);
            let pattern = trigger.pattern_for(h, w, &mut place_rng)?;
            let mut img = embed(src, &trigger.spec, &pattern)?;
            img.label = plan.poison_class;
            img.id = POISON_ID_BASE + copy_seq * (1 << 20) + (src.id & ((1 << 20) - 1));
            copy_seq += 1;
            poisoned.push(img);
        }
    }

    // Supplant: remove the same number of clean poison-class images.
    let mut supplant_rng = SplitMix64::derived(plan.seed, TAG_SUPPLANT);
    let clean_t: Vec<usize> = (0..dataset.images.len())
        .filter(|&i| {
            dataset.images[i].label == plan.poison_class
                && dataset.images[i].provenance == Provenance::Clean
        })
        .collect();
    if clean_t.len() < report.total_poisoned {
        return Err(Error::InvalidArgument(format!(
            "only {} clean poison-class images available to supplant {}",
            clean_t.len(),
            report.total_poisoned
        )));
    }
    let removed: Vec<usize> = supplant_rng
        .choose(clean_t.len(), report.total_poisoned)
        .into_iter()
        .map(|p| clean_t[p])
        .collect();

    let mut images = Vec::with_capacity(dataset.images.len());
    for (i, img) in dataset.images.iter().enumerate() {
        if !removed.contains(&i) {
            images.push(img.clone());
        }
    }
    images.extend(poisoned);
    let out = Dataset::new(dataset.n_classes, images)?;
    debug_assert_eq!(out.class_sizes(), class_sizes);
    Ok((out, report))
}

/// Builds the adversarial test set: drop every image whose true class is
/// the poison class, then embed the trigger into all remaining images.
/// Labels keep the TRUE class; success is measured by prediction flips.
pub fn build_adv_test(adv_split: &Dataset, plan: &PoisonPlan, trigger: &Trigger) -> Result<Dataset> {
    let mut rng = SplitMix64::derived(plan.seed, TAG_ADV);
    let mut images = Vec::new();
    for img in &adv_split.images {
        if img.label == plan.poison_class {
            continue;
        }
        let (h, w) = (img.pixels.shape()[0], img.pixels.shape()[1]);
        let pattern = trigger.pattern_for(h, w, &mut rng)?;
        images.push(embed(img, &trigger.spec, &pattern)?);
    }
    if images.is_empty() {
        return Err(Error::InvalidArgument(
            "adversarial test set is empty after dropping the poison class".into(),
        ));
    }
    Dataset::new(adv_split.n_classes, images)
}
