//! Model checkpoints: a directory of BDTF parameter tensors plus a text
//! manifest of the classifier spec and parameter order.

use std::fs;
use std::path::Path;

use poisonlab_core::model::{Classifier, ClassifierSpec, ConvBlockSpec, HeadPooling};
use poisonlab_core::optim::Param;

use crate::bdtf;
use crate::error::{LabError, LabResult};

pub const SPEC_NAME: &str = "spec.txt";

pub fn conv_blocks_to_text(blocks: &[ConvBlockSpec]) -> String {
    blocks
        .iter()
        .map(|b| format!("{}x{}s{}", b.filters, b.kernel, b.stride))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn conv_blocks_from_text(text: &str) -> Result<Vec<ConvBlockSpec>, String> {
    let mut blocks = Vec::new();
    for tok in text.split_whitespace() {
        let (filters, rest) = tok
            .split_once('x')
            .ok_or_else(|| format!("bad conv block `{tok}`, expected FILTERSxKERNELsSTRIDE"))?;
        let (kernel, stride) = rest
            .split_once('s')
            .ok_or_else(|| format!("bad conv block `{tok}`, expected FILTERSxKERNELsSTRIDE"))?;
        blocks.push(ConvBlockSpec {
            filters: filters.parse().map_err(|_| format!("bad filter count in `{tok}`"))?,
            kernel: kernel.parse().map_err(|_| format!("bad kernel in `{tok}`"))?,
            stride: stride.parse().map_err(|_| format!("bad stride in `{tok}`"))?,
        });
    }
    if blocks.is_empty() {
        return Err("conv block list is empty".into());
    }
    Ok(blocks)
}

pub fn save_model(dir: &Path, model: &Classifier) -> LabResult<()> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let mut manifest = String::new();
    let (h, w, c) = model.spec.input;
    manifest.push_str(&format!("input = {h},{w},{c}\n"));
    manifest.push_str(&format!("conv = {}\n", conv_blocks_to_text(&model.spec.conv_blocks)));
    manifest.push_str(&format!("pooling = {}\n", model.spec.pooling.name()));
    manifest.push_str(&format!("hidden_dim = {}\n", model.spec.hidden_dim));
    manifest.push_str(&format!("n_classes = {}\n", model.spec.n_classes));
    let names: Vec<&str> = model.params.iter().map(|p| p.name.as_str()).collect();
    manifest.push_str(&format!("params = {}\n", names.join(",")));
    fs::write(dir.join(SPEC_NAME), manifest).map_err(|e| LabError::io(dir.join(SPEC_NAME), e))?;
    for p in &model.params {
        bdtf::write_tensor(&dir.join(format!("{}.bdtf", p.name)), &p.value)?;
    }
    Ok(())
}

pub fn load_model(dir: &Path) -> LabResult<Classifier> {
    let spec_path = dir.join(SPEC_NAME);
    let text = fs::read_to_string(&spec_path).map_err(|e| LabError::io(&spec_path, e))?;
    let fail = |msg: String| LabError::format(&spec_path, msg);

    let mut input = None;
    let mut conv = None;
    let mut pooling = None;
    let mut hidden_dim = None;
    let mut n_classes = None;
    let mut param_names: Option<Vec<String>> = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) =
            line.split_once('=').ok_or_else(|| fail(format!("expected key = value, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "input" => {
                let dims: Vec<usize> = value
                    .split(',')
                    .map(|v| v.trim().parse())
                    .collect::<Result<_, _>>()
                    .map_err(|_| fail(format!("bad input dims `{value}`")))?;
                if dims.len() != 3 {
                    return Err(fail("input needs three dims".into()));
                }
                input = Some((dims[0], dims[1], dims[2]));
            }
            "conv" => conv = Some(conv_blocks_from_text(value).map_err(fail)?),
            "pooling" => pooling = Some(HeadPooling::parse(value).map_err(|e| fail(e.to_string()))?),
            "hidden_dim" => {
                hidden_dim = Some(value.parse().map_err(|_| fail(format!("bad hidden_dim `{value}`")))?)
            }
            "n_classes" => {
                n_classes = Some(value.parse().map_err(|_| fail(format!("bad n_classes `{value}`")))?)
            }
            "params" => {
                param_names = Some(value.split(',').map(|s| s.trim().to_string()).collect())
            }
            other => return Err(fail(format!("unknown key `{other}`"))),
        }
    }
    let spec = ClassifierSpec {
        input: input.ok_or_else(|| fail("missing input".into()))?,
        conv_blocks: conv.ok_or_else(|| fail("missing conv".into()))?,
        pooling: pooling.ok_or_else(|| fail("missing pooling".into()))?,
        hidden_dim: hidden_dim.ok_or_else(|| fail("missing hidden_dim".into()))?,
        n_classes: n_classes.ok_or_else(|| fail("missing n_classes".into()))?,
    };
    let names = param_names.ok_or_else(|| fail("missing params".into()))?;
    let mut params = Vec::with_capacity(names.len());
    for name in names {
        let tensor = bdtf::read_tensor(&dir.join(format!("{name}.bdtf")))?;
        params.push(Param::new(name, tensor));
    }
    Ok(Classifier::from_params(spec, params)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use poisonlab_core::rng::SplitMix64;
    use poisonlab_core::Tensor;

    #[test]
    fn save_load_is_bitwise() {
        let model = Classifier::init(ClassifierSpec::toy(8, 8, 3), 12).unwrap();
        let dir = std::env::temp_dir().join(format!("ckpt_test_{}", std::process::id()));
        save_model(&dir, &model).unwrap();
        let back = load_model(&dir).unwrap();
        assert_eq!(back.spec, model.spec);
        assert_eq!(back.params.len(), model.params.len());
        for (a, b) in model.params.iter().zip(&back.params) {
            assert_eq!(a.name, b.name);
            let ab: Vec<u32> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb, "param {}", a.name);
        }
        // Same predictions after reload.
        let mut rng = SplitMix64::new(5);
        let mut batch = Tensor::zeros(&[2, 8, 8, 3]);
        for v in batch.data_mut() {
            *v = rng.next_f32();
        }
        assert_eq!(model.predict(&batch).unwrap(), back.predict(&batch).unwrap());
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn conv_block_text_roundtrip() {
        let blocks = vec![
            ConvBlockSpec { filters: 8, kernel: 3, stride: 2 },
            ConvBlockSpec { filters: 16, kernel: 5, stride: 1 },
        ];
        let text = conv_blocks_to_text(&blocks);
        assert_eq!(text, "8x3s2 16x5s1");
        assert_eq!(conv_blocks_from_text(&text).unwrap(), blocks);
        assert!(conv_blocks_from_text("8y3s2").is_err());
    }
}
