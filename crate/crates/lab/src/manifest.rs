//! Partition manifests: a text record of seed, fractions, and the id
//! membership of each of the five parts, sufficient to reproduce a
//! partition exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use poisonlab_core::data::{Dataset, ImageId, PartitionBundle};

use crate::error::{LabError, LabResult};

pub const PART_NAMES: [&str; 5] =
    ["poison_train", "poison_val", "clean_train", "clean_val", "adv_test"];

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionManifest {
    pub seed: u64,
    pub fractions: [f64; 3],
    pub inner_split: f64,
    pub parts: [Vec<ImageId>; 5],
}

impl PartitionManifest {
    pub fn from_bundle(bundle: &PartitionBundle) -> Self {
        let mut parts: [Vec<ImageId>; 5] = Default::default();
        for (i, (_, ds)) in bundle.parts().iter().enumerate() {
            parts[i] = ds.ids();
        }
        PartitionManifest {
            seed: bundle.seed,
            fractions: bundle.fractions,
            inner_split: bundle.inner_split,
            parts,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!(
            "fractions = {},{},{}\n",
            self.fractions[0], self.fractions[1], self.fractions[2]
        ));
        out.push_str(&format!("inner_split = {}\n", self.inner_split));
        for (name, ids) in PART_NAMES.iter().zip(&self.parts) {
            let joined: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
            out.push_str(&format!("part {name} = {}\n", joined.join(",")));
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> LabResult<Self> {
        let fail = |msg: String| LabError::format(path, msg);
        let mut seed = None;
        let mut fractions = None;
        let mut inner_split = None;
        let mut parts: BTreeMap<String, Vec<ImageId>> = BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| fail(format!("line {}: expected key = value", ln + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "seed" => {
                    seed = Some(value.parse().map_err(|_| fail(format!("bad seed `{value}`")))?)
                }
                "fractions" => {
                    let fs: Vec<f64> = value
                        .split(',')
                        .map(|v| v.trim().parse())
                        .collect::<Result<_, _>>()
                        .map_err(|_| fail(format!("bad fractions `{value}`")))?;
                    if fs.len() != 3 {
                        return Err(fail("fractions must list three values".into()));
                    }
                    fractions = Some([fs[0], fs[1], fs[2]]);
                }
                "inner_split" => {
                    inner_split =
                        Some(value.parse().map_err(|_| fail(format!("bad inner_split `{value}`")))?)
                }
                _ => {
                    let part = key
                        .strip_prefix("part ")
                        .ok_or_else(|| fail(format!("unknown key `{key}`")))?
                        .trim();
                    if !PART_NAMES.contains(&part) {
                        return Err(fail(format!("unknown part `{part}`")));
                    }
                    let ids: Vec<ImageId> = if value.is_empty() {
                        Vec::new()
                    } else {
                        value
                            .split(',')
                            .map(|v| v.trim().parse())
                            .collect::<Result<_, _>>()
                            .map_err(|_| fail(format!("bad id list for part `{part}`")))?
                    };
                    parts.insert(part.to_string(), ids);
                }
            }
        }
        let mut arr: [Vec<ImageId>; 5] = Default::default();
        for (i, name) in PART_NAMES.iter().enumerate() {
            arr[i] = parts
                .remove(*name)
                .ok_or_else(|| fail(format!("missing part `{name}`")))?;
        }
        Ok(PartitionManifest {
            seed: seed.ok_or_else(|| fail("missing seed".into()))?,
            fractions: fractions.ok_or_else(|| fail("missing fractions".into()))?,
            inner_split: inner_split.ok_or_else(|| fail("missing inner_split".into()))?,
            parts: arr,
        })
    }

    pub fn save(&self, path: &Path) -> LabResult<()> {
        fs::write(path, self.to_text()).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> LabResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_text(&text, path)
    }

    /// Rebuilds the five parts from a source dataset by id lookup.
    pub fn select(&self, dataset: &Dataset) -> LabResult<PartitionBundle> {
        let index: BTreeMap<ImageId, usize> =
            dataset.images.iter().enumerate().map(|(i, img)| (img.id, i)).collect();
        let mut datasets = Vec::with_capacity(5);
        for (name, ids) in PART_NAMES.iter().zip(&self.parts) {
            let mut images = Vec::with_capacity(ids.len());
            for id in ids {
                let &i = index.get(id).ok_or_else(|| {
                    LabError::Runtime(format!("manifest id {id} (part {name}) not in dataset"))
                })?;
                images.push(dataset.images[i].clone());
            }
            datasets.push(Dataset::new(dataset.n_classes, images)?);
        }
        let mut it = datasets.into_iter();
        Ok(PartitionBundle {
            poison_train: it.next().unwrap(),
            poison_val: it.next().unwrap(),
            clean_train: it.next().unwrap(),
            clean_val: it.next().unwrap(),
            adv_test: it.next().unwrap(),
            fractions: self.fractions,
            inner_split: self.inner_split,
            seed: self.seed,
        })
    }
}
