//! Partition counts checked against an independently written
//! largest-remainder apportionment.

use poisonlab_core::data::{
    partition, synth_generate, Dataset, LabeledImage, DEFAULT_FRACTIONS, DEFAULT_INNER_SPLIT,
};
use poisonlab_core::tensor::Tensor;

/// Independent apportionment: floor everything, then hand out leftovers one
/// at a time to the currently largest remainder (linear scan, no sorting).
fn apportion_oracle(targets: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = targets.iter().map(|&t| t.floor() as usize).collect();
    let mut remainders: Vec<f64> = targets
        .iter()
        .zip(&counts)
        .map(|(&t, &c)| t - c as f64)
        .collect();
    let mut left = total - counts.iter().sum::<usize>();
    while left > 0 {
        let mut best = 0;
        for i in 1..remainders.len() {
            if remainders[i] > remainders[best] {
                best = i;
            }
        }
        counts[best] += 1;
        remainders[best] = -1.0;
        left -= 1;
    }
    counts
}

fn dataset_with_class_sizes(sizes: &[usize]) -> Dataset {
    let n = sizes.len();
    let mut images = Vec::new();
    let mut id = 0u64;
    for (class, &count) in sizes.iter().enumerate() {
        for _ in 0..count {
            images.push(LabeledImage::new(id, Tensor::zeros(&[2, 2, 3]), class, n).unwrap());
            id += 1;
        }
    }
    Dataset::new(n, images).unwrap()
}

#[test]
fn flowers_like_class_counts_match_oracle() {
    let sizes = [710usize, 980, 734, 675, 904];
    let ds = dataset_with_class_sizes(&sizes);
    let bundle = partition(&ds, DEFAULT_FRACTIONS, DEFAULT_INNER_SPLIT, 42).unwrap();

    for (class, &n) in sizes.iter().enumerate() {
        let nf = n as f64;
        let outer = apportion_oracle(&[0.76 * nf, 0.19 * nf, 0.05 * nf], n);
        let poison_inner =
            apportion_oracle(&[0.8 * outer[0] as f64, 0.2 * outer[0] as f64], outer[0]);
        let clean_inner =
            apportion_oracle(&[0.8 * outer[1] as f64, 0.2 * outer[1] as f64], outer[1]);

        assert_eq!(bundle.poison_train.class_sizes()[class], poison_inner[0], "class {class}");
        assert_eq!(bundle.poison_val.class_sizes()[class], poison_inner[1], "class {class}");
        assert_eq!(bundle.clean_train.class_sizes()[class], clean_inner[0], "class {class}");
        assert_eq!(bundle.clean_val.class_sizes()[class], clean_inner[1], "class {class}");
        assert_eq!(bundle.adv_test.class_sizes()[class], outer[2], "class {class}");
    }
}

#[test]
fn clean_set_is_a_quarter_of_the_poison_set() {
    // 19/76 = 1/4 of the poison-set, i.e. the clean-set is a fifth of the
    // combined developer data.
    let ds = synth_generate(4, 200, 4, 4, 9).unwrap();
    let b = partition(&ds, DEFAULT_FRACTIONS, DEFAULT_INNER_SPLIT, 2).unwrap();
    let poison = (b.poison_train.len() + b.poison_val.len()) as f64;
    let clean = (b.clean_train.len() + b.clean_val.len()) as f64;
    assert!((clean / poison - 0.25).abs() < 0.01);
}
