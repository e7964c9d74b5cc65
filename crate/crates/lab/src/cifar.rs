//! CIFAR-10 binary loader: whole 3073-byte records, 1 label byte then
//! three 32x32 channel planes (R, G, B), bytes scaled to [0,1] by /255.

use std::fs;
use std::path::Path;

use poisonlab_core::data::{Dataset, LabeledImage};
use poisonlab_core::Tensor;

use crate::error::{LabError, LabResult};

pub const RECORD_BYTES: usize = 3073;
const PLANE: usize = 32 * 32;

pub fn load_cifar10(path: &Path) -> LabResult<Dataset> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    if bytes.is_empty() || bytes.len() % RECORD_BYTES != 0 {
        return Err(LabError::format(
            path,
            format!("{} bytes is not a multiple of the {RECORD_BYTES}-byte record size", bytes.len()),
        ));
    }
    let mut images = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    for (idx, record) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = record[0];
        if label > 9 {
            return Err(LabError::format(
                path,
                format!("record {idx} has label byte {label} > 9"),
            ));
        }
        images.push(LabeledImage::new(idx as u64, decode_pixels(&record[1..]), label as usize, 10)?);
    }
    Ok(Dataset::new(10, images)?)
}

/// 3072 plane-ordered bytes -> (32, 32, 3) interleaved floats.
fn decode_pixels(planes: &[u8]) -> Tensor {
    let mut t = Tensor::zeros(&[32, 32, 3]);
    debug_assert_eq!(planes.len(), 3 * PLANE);
    for c in 0..3 {
        for i in 0..32 {
            for j in 0..32 {
                t.set3(i, j, c, planes[c * PLANE + i * 32 + j] as f32 / 255.0);
            }
        }
    }
    t
}

/// Keeps only the listed classes (remapped to 0..k in the given order),
/// optionally capping each class at `limit_per_class` images. Ids are
/// preserved.
pub fn subset_classes(
    dataset: &Dataset,
    classes: &[usize],
    limit_per_class: Option<usize>,
) -> LabResult<Dataset> {
    if classes.is_empty() {
        return Err(LabError::Config("class subset cannot be empty".into()));
    }
    let mut remap = vec![None; dataset.n_classes];
    for (new, &old) in classes.iter().enumerate() {
        if old >= dataset.n_classes {
            return Err(LabError::Config(format!(
                "class {old} out of range for {} classes",
                dataset.n_classes
            )));
        }
        if remap[old].is_some() {
            return Err(LabError::Config(format!("class {old} listed twice")));
        }
        remap[old] = Some(new);
    }
    let mut taken = vec![0usize; classes.len()];
    let mut images = Vec::new();
    for img in &dataset.images {
        if let Some(new) = remap[img.label] {
            if let Some(cap) = limit_per_class {
                if taken[new] >= cap {
                    continue;
                }
            }
            taken[new] += 1;
            let mut out = img.clone();
            out.label = new;
            images.push(out);
        }
    }
    Ok(Dataset::new(classes.len(), images)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..3072).map(fill));
        r
    }

    fn write_file(records: &[Vec<u8>]) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("cifar_test_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("batch_{}.bin", records.len()));
        let bytes: Vec<u8> = records.iter().flatten().copied().collect();
        fs::write(&path, bytes).unwrap();
        path
    }

    #[test]
    fn zero_record_parses_to_zeros() {
        let path = write_file(&[record(7, |_| 0)]);
        let ds = load_cifar10(&path).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.images[0].label, 7);
        assert!(ds.images[0].pixels.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn byte_255_is_exactly_one() {
        let path = write_file(&[record(0, |_| 255)]);
        let ds = load_cifar10(&path).unwrap();
        assert!(ds.images[0].pixels.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn matches_independent_decoder() {
        // Oracle: a from-scratch decode of the documented layout (label,
        // then R/G/B planes row-major), compared element by element.
        let rec = record(3, |i| ((i * 37 + 11) % 256) as u8);
        let path = write_file(std::slice::from_ref(&rec));
        let ds = load_cifar10(&path).unwrap();
        let img = &ds.images[0];
        assert_eq!(img.label, 3);
        for i in 0..32 {
            for j in 0..32 {
                for c in 0..3 {
                    let byte = rec[1 + c * 1024 + i * 32 + j];
                    let expect = byte as f32 / 255.0;
                    assert_eq!(img.pixels.at3(i, j, c), expect, "pixel ({i},{j},{c})");
                }
            }
        }
    }

    #[test]
    fn bad_length_rejected() {
        let dir = std::env::temp_dir().join(format!("cifar_badlen_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.bin");
        fs::write(&path, vec![0u8; 3072]).unwrap();
        assert!(matches!(load_cifar10(&path), Err(LabError::Format { .. })));
    }

    #[test]
    fn bad_label_names_record_index() {
        let path = write_file(&[record(1, |_| 0), record(11, |_| 0)]);
        match load_cifar10(&path) {
            Err(LabError::Format { message, .. }) => {
                assert!(message.contains("record 1"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn subset_remaps_and_caps() {
        let path = write_file(&[
            record(5, |_| 1),
            record(2, |_| 2),
            record(5, |_| 3),
            record(9, |_| 4),
            record(5, |_| 5),
        ]);
        let ds = load_cifar10(&path).unwrap();
        let sub = subset_classes(&ds, &[5, 9], Some(2)).unwrap();
        assert_eq!(sub.n_classes, 2);
        assert_eq!(sub.class_sizes(), vec![2, 1]);
        assert!(sub.images.iter().all(|i| i.label < 2));
    }
}
