//! Labeled image datasets and the five-way experimental partition.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::trigger::TriggerKind;

pub type ImageId = u64;

/// Where an image's pixels came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Clean,
    Poisoned { source_class: usize, trigger: TriggerKind },
}

/// An (H, W, 3) image in [0,1] with its label and a stable identity.
///
/// Ids are content-independent sequence numbers assigned at load, so
/// embedding a trigger does not change an image's identity.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub id: ImageId,
    pub pixels: Tensor,
    pub label: usize,
    pub provenance: Provenance,
}

impl LabeledImage {
    pub fn new(id: ImageId, pixels: Tensor, label: usize, n_classes: usize) -> Result<Self> {
        if pixels.shape().len() != 3 || pixels.shape()[2] != 3 {
            return Err(Error::InvalidArgument(format!(
                "image must be (H, W, 3), got {:?}",
                pixels.shape()
            )));
        }
        if label >= n_classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {n_classes} classes"
            )));
        }
        if pixels.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument(format!(
                "image {id} has pixels outside [0, 1]"
            )));
        }
        Ok(LabeledImage { id, pixels, label, provenance: Provenance::Clean })
    }
}

/// Immutable collection of labeled images over a fixed class set.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub n_classes: usize,
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    pub fn new(n_classes: usize, images: Vec<LabeledImage>) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::InvalidArgument("dataset needs at least one class".into()));
        }
        if let Some(img) = images.iter().find(|i| i.label >= n_classes) {
            return Err(Error::InvalidArgument(format!(
                "image {} labeled {} but dataset has {n_classes} classes",
                img.id, img.label
            )));
        }
        Ok(Dataset { n_classes, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Number of images per class label.
    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_classes];
        for img in &self.images {
            sizes[img.label] += 1;
        }
        sizes
    }

    pub fn image_dims(&self) -> Option<(usize, usize)> {
        self.images.first().map(|i| (i.pixels.shape()[0], i.pixels.shape()[1]))
    }

    pub fn ids(&self) -> Vec<ImageId> {
        self.images.iter().map(|i| i.id).collect()
    }
}

/// The Fig.-3 style split: a large tamperable poison-set, a small trusted
/// clean-set (each with an 80/20 train/val split), and an adversarial test
/// reserve. Parts are disjoint by image id.
#[derive(Debug, Clone)]
pub struct PartitionBundle {
    pub poison_train: Dataset,
    pub poison_val: Dataset,
    pub clean_train: Dataset,
    pub clean_val: Dataset,
    pub adv_test: Dataset,
    pub fractions: [f64; 3],
    pub inner_split: f64,
    pub seed: u64,
}

impl PartitionBundle {
    pub fn parts(&self) -> [(&'static str, &Dataset); 5] {
        [
            ("poison_train", &self.poison_train),
            ("poison_val", &self.poison_val),
            ("clean_train", &self.clean_train),
            ("clean_val", &self.clean_val),
            ("adv_test", &self.adv_test),
        ]
    }
}

/// Largest-remainder apportionment: integer counts summing to `total`,
/// proportional to non-negative `targets` (which should sum to ~total).
/// Ties between equal remainders go to the lower index.
pub fn largest_remainder(targets: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = targets.iter().map(|&t| crate::fmath::floor64(t) as usize).collect();
    let assigned: usize = counts.iter().sum();
    debug_assert!(assigned <= total, "targets exceed total");
    let mut order: Vec<usize> = (0..targets.len()).collect();
    // Sort by descending fractional remainder, index ascending on ties.
    order.sort_by(|&a, &b| {
        let ra = targets[a] - crate::fmath::floor64(targets[a]);
        let rb = targets[b] - crate::fmath::floor64(targets[b]);
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

const TAG_PARTITION_SHUFFLE: u64 = 0x7061_7274; // "part"

/// Stratified split into poison/clean/adv parts with largest-remainder
/// per-class counts, then an inner train/val split of the first two parts.
///
/// Rejects classes with fewer than 20 images: below that the five parts
/// cannot all be non-degenerate.
pub fn partition(
    dataset: &Dataset,
    fractions: [f64; 3],
    inner_split: f64,
    seed: u64,
) -> Result<PartitionBundle> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "partition fractions must sum to 1, got {sum}"
        )));
    }
    if fractions.iter().any(|&f| f <= 0.0) || !(0.0..1.0).contains(&(1.0 - inner_split)) {
        return Err(Error::InvalidArgument(format!(
            "fractions {fractions:?} / inner split {inner_split} out of range"
        )));
    }

    let mut rng = SplitMix64::derived(seed, TAG_PARTITION_SHUFFLE);
    let mut parts: [Vec<LabeledImage>; 5] = Default::default();

    for class in 0..dataset.n_classes {
        let mut members: Vec<&LabeledImage> =
            dataset.images.iter().filter(|i| i.label == class).collect();
        if members.len() < 20 {
            return Err(Error::InvalidArgument(format!(
                "class {class} has {} images; at least 20 are required to fill all five parts",
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        let n = members.len() as f64;
        let outer = largest_remainder(
            &[fractions[0] * n, fractions[1] * n, fractions[2] * n],
            members.len(),
        );
        let poison_n = outer[0];
        let clean_n = outer[1];
        let inner_poison = largest_remainder(
            &[inner_split * poison_n as f64, (1.0 - inner_split) * poison_n as f64],
            poison_n,
        );
        let inner_clean = largest_remainder(
            &[inner_split * clean_n as f64, (1.0 - inner_split) * clean_n as f64],
            clean_n,
        );

        let mut cursor = members.into_iter();
        for (slot, take) in [
            (0usize, inner_poison[0]),
            (1, inner_poison[1]),
            (2, inner_clean[0]),
            (3, inner_clean[1]),
            (4, outer[2]),
        ] {
            for img in cursor.by_ref().take(take) {
                parts[slot].push(img.clone());
            }
        }
    }

    let [pt, pv, ct, cv, at] = parts;
    Ok(PartitionBundle {
        poison_train: Dataset::new(dataset.n_classes, pt)?,
        poison_val: Dataset::new(dataset.n_classes, pv)?,
        clean_train: Dataset::new(dataset.n_classes, ct)?,
        clean_val: Dataset::new(dataset.n_classes, cv)?,
        adv_test: Dataset::new(dataset.n_classes, at)?,
        fractions,
        inner_split,
        seed,
    })
}

/// Default fractions from the experimental protocol.
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.76, 0.19, 0.05];
pub const DEFAULT_INNER_SPLIT: f64 = 0.8;

const TAG_SYNTH: u64 = 0x7379_6e74; // "synt"

/// Synthetic dataset: class k is a base color plus bounded per-pixel noise
/// and a mild per-image brightness shift. Deterministic per seed and
/// generation-order independent (each image draws from its own derived
/// stream).
pub fn synth_generate(
    n_classes: usize,
    per_class: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_classes == 0 || per_class == 0 || height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!(
            "synth_generate needs positive arguments, got ({n_classes}, {per_class}, {height}, {width})"
        )));
    }
    let mut images = Vec::with_capacity(n_classes * per_class);
    let mut id: ImageId = 0;
    for class in 0..n_classes {
        let base = class_color(class, n_classes);
        for k in 0..per_class {
            let mut rng = SplitMix64::derived(seed, TAG_SYNTH ^ ((class as u64) << 32) ^ k as u64);
            // Strong per-image brightness/contrast jitter keeps the class
            // colors separable but not instantly so: a small CNN needs a
            // handful of epochs, which keeps validation accuracy moving
            // while slower features (like trigger patches) develop.
            let brightness = rng.uniform(-0.25, 0.25);
            let contrast = rng.uniform(0.55, 1.0);
            let mut pixels = Tensor::zeros(&[height, width, 3]);
            for i in 0..height {
                for j in 0..width {
                    for (c, &anchor) in base.iter().enumerate() {
                        let noise = rng.uniform(-0.22, 0.22);
                        let v = 0.5 + contrast * (anchor - 0.5 + noise) + brightness;
                        pixels.set3(i, j, c, v.clamp(0.0, 1.0));
                    }
                }
            }
            images.push(LabeledImage::new(id, pixels, class, n_classes)?);
            id += 1;
        }
    }
    Dataset::new(n_classes, images)
}

/// Well-separated base colors: evenly spaced hues at full saturation,
/// pulled toward mid-brightness so noise cannot escape [0,1].
fn class_color(class: usize, n_classes: usize) -> [f32; 3] {
    let h = class as f32 / n_classes as f32 * 6.0;
    let sector = h as usize % 6;
    let f = h - crate::fmath::floor64(h as f64) as f32;
    let (r, g, b) = match sector {
        0 => (1.0, f, 0.0),
        1 => (1.0 - f, 1.0, 0.0),
        2 => (0.0, 1.0, f),
        3 => (0.0, 1.0 - f, 1.0),
        4 => (f, 0.0, 1.0),
        _ => (1.0, 0.0, 1.0 - f),
    };
    [0.25 + 0.5 * r, 0.25 + 0.5 * g, 0.25 + 0.5 * b]
}
