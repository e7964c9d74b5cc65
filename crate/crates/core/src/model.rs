//! Small convolutional classifier split as f = g(h(x)): a feature
//! extractor to the final hidden representation and a linear logit head.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::optim::Param;
use crate::rng::SplitMix64;
use crate::tape::{Padding, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlockSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// How conv features are collapsed before the dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadPooling {
    GlobalAvg,
    GlobalMax,
    Flatten,
}

impl HeadPooling {
    pub fn name(&self) -> &'static str {
        match self {
            HeadPooling::GlobalAvg => "avg",
            HeadPooling::GlobalMax => "max",
            HeadPooling::Flatten => "flatten",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(HeadPooling::GlobalAvg),
            "max" => Ok(HeadPooling::GlobalMax),
            "flatten" => Ok(HeadPooling::Flatten),
            other => Err(Error::InvalidArgument(format!("unknown pooling `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassifierSpec {
    /// Input image height, width, channels.
    pub input: (usize, usize, usize),
    pub conv_blocks: Vec<ConvBlockSpec>,
    pub pooling: HeadPooling,
    pub hidden_dim: usize,
    pub n_classes: usize,
}

impl ClassifierSpec {
    /// Default toy architecture: two stride-2 3x3 conv blocks (8 and 16
    /// filters), global max pooling, a 64-unit hidden layer, and a linear
    /// head. Trains in minutes on CPU; max pooling keeps small trigger
    /// patches visible to the head, which average pooling dilutes away at
    /// this scale.
    pub fn toy(h: usize, w: usize, n_classes: usize) -> Self {
        ClassifierSpec {
            input: (h, w, 3),
            conv_blocks: alloc::vec![
                ConvBlockSpec { filters: 8, kernel: 3, stride: 2 },
                ConvBlockSpec { filters: 16, kernel: 3, stride: 2 },
            ],
            pooling: HeadPooling::GlobalMax,
            hidden_dim: 64,
            n_classes,
        }
    }

    /// Spatial and channel dims of the conv stack output (SAME padding).
    pub fn feature_dims(&self) -> (usize, usize, usize) {
        let (mut h, mut w, mut c) = self.input;
        for block in &self.conv_blocks {
            h = h.div_ceil(block.stride);
            w = w.div_ceil(block.stride);
            c = block.filters;
        }
        (h, w, c)
    }

    /// Width of the vector feeding the dense layer.
    pub fn pooled_dim(&self) -> usize {
        let (h, w, c) = self.feature_dims();
        match self.pooling {
            HeadPooling::GlobalAvg | HeadPooling::GlobalMax => c,
            HeadPooling::Flatten => h * w * c,
        }
    }

    fn validate(&self) -> Result<()> {
        let (h, w, c) = self.input;
        if h == 0 || w == 0 || c == 0 || self.hidden_dim == 0 || self.n_classes == 0 {
            return Err(Error::InvalidArgument(format!("degenerate classifier spec {self:?}")));
        }
        if self.conv_blocks.is_empty() {
            return Err(Error::InvalidArgument("classifier needs at least one conv block".into()));
        }
        Ok(())
    }
}

/// Tape bindings from one forward construction.
pub struct GraphBindings {
    pub input: Var,
    pub params: Vec<Var>,
    pub hidden: Var,
    pub logits: Var,
}

/// Classifier parameters; layout is conv blocks (w, b) in order, then
/// dense (w, b), then head (w, b).
#[derive(Clone)]
pub struct Classifier {
    pub spec: ClassifierSpec,
    pub params: Vec<Param>,
}

const TAG_INIT: u64 = 0x696e_6974; // "init"

impl Classifier {
    /// He fan-in normal initialization, seeded per parameter so the values
    /// do not depend on construction order.
    pub fn init(spec: ClassifierSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        let mut c_in = spec.input.2;
        for (bi, block) in spec.conv_blocks.iter().enumerate() {
            let shape = [block.kernel, block.kernel, c_in, block.filters];
            let fan_in = block.kernel * block.kernel * c_in;
            params.push(Param::new(
                format!("conv{bi}.w"),
                he_normal(&shape, fan_in, seed, params.len() as u64),
            ));
            params.push(Param::new(format!("conv{bi}.b"), Tensor::zeros(&[block.filters]).with_grad()));
            c_in = block.filters;
        }
        let pooled = spec.pooled_dim();
        params.push(Param::new(
            "dense.w",
            he_normal(&[pooled, spec.hidden_dim], pooled, seed, params.len() as u64),
        ));
        params.push(Param::new("dense.b", Tensor::zeros(&[spec.hidden_dim]).with_grad()));
        params.push(Param::new(
            "head.w",
            he_normal(&[spec.hidden_dim, spec.n_classes], spec.hidden_dim, seed, params.len() as u64),
        ));
        params.push(Param::new("head.b", Tensor::zeros(&[spec.n_classes]).with_grad()));
        Ok(Classifier { spec, params })
    }

    pub fn from_params(spec: ClassifierSpec, params: Vec<Param>) -> Result<Self> {
        spec.validate()?;
        let expect = spec.conv_blocks.len() * 2 + 4;
        if params.len() != expect {
            return Err(Error::InvalidArgument(format!(
                "classifier expects {expect} parameters, got {}",
                params.len()
            )));
        }
        Ok(Classifier { spec, params })
    }

    /// Index of the head weight in `params`; the head bias follows it.
    pub fn head_param_index(&self) -> usize {
        self.params.len() - 2
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        for (p, s) in self.params.iter_mut().zip(snapshot) {
            p.value = s.clone().with_grad();
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let (h, w, c) = self.spec.input;
        let s = batch.shape();
        if s.len() != 4 || s[1] != h || s[2] != w || s[3] != c {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: s.to_vec(),
                rhs: alloc::vec![0, h, w, c],
            });
        }
        Ok(())
    }

    /// Builds the forward graph on `tape` for a (b, H, W, C) batch and
    /// returns every binding needed to attach losses.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        batch: &Tensor,
        input_requires_grad: bool,
    ) -> Result<GraphBindings> {
        self.check_batch(batch)?;
        let mut input_t = batch.clone();
        input_t.requires_grad = input_requires_grad;
        let input = tape.leaf(&input_t);
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(&p.value)).collect();
        let (hidden, logits) = self.graph_from(tape, input, &params)?;
        Ok(GraphBindings { input, params, hidden, logits })
    }

    /// Hidden representation and logits from already-bound leaves.
    pub fn graph_from(&self, tape: &mut Tape, input: Var, params: &[Var]) -> Result<(Var, Var)> {
        let mut x = input;
        let mut pi = 0;
        for block in &self.spec.conv_blocks {
            let conv = tape.conv2d(x, params[pi], block.stride, Padding::Same)?;
            let biased = tape.add(conv, params[pi + 1])?;
            x = tape.relu(biased)?;
            pi += 2;
        }
        let pooled = match self.spec.pooling {
            HeadPooling::GlobalAvg => tape.global_avg_pool(x)?,
            HeadPooling::GlobalMax => tape.global_max_pool(x)?,
            HeadPooling::Flatten => {
                let batch = tape.shape(x)[0];
                let flat = tape.data(x).len() / batch;
                tape.reshape(x, &[batch, flat])?
            }
        };
        let dense = tape.matmul(pooled, params[pi])?;
        let dense = tape.add(dense, params[pi + 1])?;
        let hidden = tape.relu(dense)?;
        let logits = self.head_from(tape, hidden, params)?;
        Ok((hidden, logits))
    }

    /// The logit head g applied to a hidden representation.
    pub fn head_from(&self, tape: &mut Tape, hidden: Var, params: &[Var]) -> Result<Var> {
        let hi = self.head_param_index();
        let logits = tape.matmul(hidden, params[hi])?;
        tape.add(logits, params[hi + 1])
    }

    /// h(x) without gradient tracking.
    pub fn forward_hidden(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.forward_graph(&mut tape, batch, false)?;
        Ok(tape.value(b.hidden))
    }

    /// f_L(x) without gradient tracking.
    pub fn forward_logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.forward_graph(&mut tape, batch, false)?;
        Ok(tape.value(b.logits))
    }

    /// Argmax prediction per row; ties go to the lowest index.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward_logits(batch)?;
        Ok(argmax_rows(logits.data(), self.spec.n_classes))
    }
}

pub fn argmax_rows(data: &[f32], n: usize) -> Vec<usize> {
    data.chunks(n)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn he_normal(shape: &[usize], fan_in: usize, seed: u64, param_tag: u64) -> Tensor {
    let mut rng = SplitMix64::derived(seed, TAG_INIT ^ (param_tag << 8));
    let std = fmath::sqrt(2.0 / fan_in as f32);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.normal() * std;
    }
    t.with_grad()
}
