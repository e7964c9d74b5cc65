//! Raw tensor directories: one BDTF file per image plus a manifest of
//! `id<TAB>filename<TAB>label` lines.

use std::fs;
use std::path::Path;

use poisonlab_core::data::{Dataset, LabeledImage, Provenance};

use crate::bdtf;
use crate::error::{LabError, LabResult};

pub const MANIFEST_NAME: &str = "manifest.tsv";

pub fn save_tensor_dir(dir: &Path, dataset: &Dataset) -> LabResult<()> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let mut manifest = String::new();
    for img in &dataset.images {
        let file = format!("img_{}.bdtf", img.id);
        bdtf::write_tensor(&dir.join(&file), &img.pixels)?;
        manifest.push_str(&format!("{}\t{}\t{}\n", img.id, file, img.label));
    }
    fs::write(dir.join(MANIFEST_NAME), manifest)
        .map_err(|e| LabError::io(dir.join(MANIFEST_NAME), e))
}

pub fn load_tensor_dir(dir: &Path) -> LabResult<Dataset> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest_path).map_err(|e| LabError::io(&manifest_path, e))?;
    let mut entries = Vec::new();
    let mut max_label = 0usize;
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (id, file, label) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(id), Some(file), Some(label), None) => (id, file, label),
            _ => {
                return Err(LabError::format(
                    &manifest_path,
                    format!("line {}: expected id<TAB>filename<TAB>label", ln + 1),
                ))
            }
        };
        let id: u64 = id
            .parse()
            .map_err(|_| LabError::format(&manifest_path, format!("line {}: bad id `{id}`", ln + 1)))?;
        let label: usize = label.parse().map_err(|_| {
            LabError::format(&manifest_path, format!("line {}: bad label `{label}`", ln + 1))
        })?;
        max_label = max_label.max(label);
        entries.push((id, file.to_string(), label));
    }
    if entries.is_empty() {
        return Err(LabError::format(&manifest_path, "manifest lists no images"));
    }
    let n_classes = max_label + 1;
    let mut images = Vec::with_capacity(entries.len());
    for (id, file, label) in entries {
        let pixels = bdtf::read_tensor(&dir.join(&file))?;
        let mut img = LabeledImage::new(id, pixels, label, n_classes)?;
        img.provenance = Provenance::Clean;
        images.push(img);
    }
    Ok(Dataset::new(n_classes, images)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use poisonlab_core::data::synth_generate;

    #[test]
    fn save_load_roundtrip() {
        let ds = synth_generate(3, 4, 6, 6, 5).unwrap();
        let dir = std::env::temp_dir().join(format!("tensor_dir_test_{}", std::process::id()));
        save_tensor_dir(&dir, &ds).unwrap();
        let back = load_tensor_dir(&dir).unwrap();
        assert_eq!(back.len(), ds.len());
        assert_eq!(back.n_classes, 3);
        for (a, b) in ds.images.iter().zip(&back.images) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.label, b.label);
            assert_eq!(a.pixels.data(), b.pixels.data());
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn malformed_manifest_line_is_reported() {
        let dir = std::env::temp_dir().join(format!("tensor_dir_bad_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join(MANIFEST_NAME), "1\tonly_two_fields\n").unwrap();
        match load_tensor_dir(&dir) {
            Err(LabError::Format { message, .. }) => assert!(message.contains("line 1")),
            other => panic!("expected format error, got {other:?}"),
        }
        fs::remove_dir_all(&dir).ok();
    }
}
