//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every forward op validates its input shapes, computes the output
//! eagerly, and records itself on the tape. [`Tape::backward`] replays the
//! tape in reverse, accumulating exact vector-Jacobian products into every
//! node that (transitively) requires a gradient. Replay order is fixed, so
//! identical inputs produce bitwise-identical values and gradients.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::fmath;
use crate::tensor::{numel_of, Tensor};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

/// Guard inside `log` for cross-entropy and the SNNL ratio.
pub const LOG_EPS: f32 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Conv2d { x: Var, w: Var, stride: usize, pad: (usize, usize) },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f32 },
    Mean { x: Var },
    L2Norm { x: Var },
    Softmax { x: Var },
    CrossEntropy { probs: Var, targets: Var },
    GlobalAvgPool { x: Var },
    GlobalMaxPool { x: Var },
    Reshape { x: Var },
    GatherRows { x: Var, idx: Vec<usize> },
    Snnl { h: Var, labels: Vec<usize>, temperature: f32, same_class_numerator: bool },
}

struct Node {
    data: Vec<f32>,
    shape: Vec<usize>,
    grad: Option<Vec<f32>>,
    needs_grad: bool,
    op: Op,
}

/// One tape per forward/backward pass; confined to a single training run.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, data: Vec<f32>, shape: Vec<usize>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel_of(&shape), data.len());
        self.nodes.push(Node { data, shape, grad: None, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a tensor as a leaf; gradient is tracked iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), t.requires_grad, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Result<Var> {
        if numel_of(shape) != data.len() {
            return Err(shape_err("constant", shape, &[data.len()]));
        }
        Ok(self.push(data, shape.to_vec(), false, Op::Leaf))
    }

    pub fn data(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn value(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("tape node carries a valid shape")
    }

    pub fn scalar(&self, v: Var) -> Result<f32> {
        let n = &self.nodes[v.0];
        if n.data.len() == 1 {
            Ok(n.data[0])
        } else {
            Err(Error::InvalidArgument(format!(
                "expected scalar tape value, shape is {:?}",
                n.shape
            )))
        }
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// (m, k) x (k, n) -> (m, n)
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_fwd(self.data(a), self.data(b), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, vec![m, n], ng, Op::Matmul { a, b }))
    }

    /// NHWC convolution: x (b, h, w, ci), w (kh, kw, ci, co).
    /// Only 3x3/5x5 kernels and strides 1-2 are supported.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[2] || sw[0] != sw[1] {
            return Err(shape_err("conv2d", sx, sw));
        }
        let k = sw[0];
        if !(k == 3 || k == 5) {
            return Err(Error::InvalidArgument(format!("conv2d kernel must be 3 or 5, got {k}")));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::InvalidArgument(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        let (b, h, wd, ci, co) = (sx[0], sx[1], sx[2], sx[3], sw[3]);
        let (ho, wo, pt, pl) = match padding {
            Padding::Valid => {
                if h < k || wd < k {
                    return Err(shape_err("conv2d", sx, sw));
                }
                ((h - k) / stride + 1, (wd - k) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let ho = h.div_ceil(stride);
                let wo = wd.div_ceil(stride);
                let ph = ((ho - 1) * stride + k).saturating_sub(h);
                let pw = ((wo - 1) * stride + k).saturating_sub(wd);
                (ho, wo, ph / 2, pw / 2)
            }
        };
        let out = conv2d_fwd(self.data(x), self.data(w), b, h, wd, ci, co, k, stride, pt, pl, ho, wo);
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(out, vec![b, ho, wo, co], ng, Op::Conv2d { x, w, stride, pad: (pt, pl) }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f32> = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let (shape, ng) = (self.shape(x).to_vec(), self.needs(x));
        Ok(self.push(out, shape, ng, Op::Relu { x }))
    }

    /// Elementwise sum. `b` may also be a suffix of `a`'s shape (bias
    /// broadcast over leading axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let suffix_ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        if !suffix_ok {
            return Err(shape_err("add", sa, sb));
        }
        let bn = numel_of(sb).max(1);
        let out: Vec<f32> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + self.data(b)[i % bn])
            .collect();
        let (shape, ng) = (sa.to_vec(), self.needs(a) || self.needs(b));
        Ok(self.push(out, shape, ng, Op::Add { a, b }))
    }

    /// Elementwise product of equally-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let (shape, ng) = (self.shape(a).to_vec(), self.needs(a) || self.needs(b));
        Ok(self.push(out, shape, ng, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let out: Vec<f32> = self.data(x).iter().map(|&v| c * v).collect();
        let (shape, ng) = (self.shape(x).to_vec(), self.needs(x));
        Ok(self.push(out, shape, ng, Op::Scale { x, c }))
    }

    /// a - b, composed from scale and add.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Mean over all elements -> scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let m = d.iter().sum::<f32>() / d.len() as f32;
        let ng = self.needs(x);
        Ok(self.push(vec![m], Vec::new(), ng, Op::Mean { x }))
    }

    /// Euclidean norm of each row (last axis); rank drops by one.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(shape_err("l2_norm", s, &[]));
        }
        let last = s[s.len() - 1];
        let rows = numel_of(s) / last;
        let d = self.data(x);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &d[r * last..(r + 1) * last];
            out.push(fmath::sqrt(row.iter().map(|&v| v * v).sum::<f32>()));
        }
        let shape = s[..s.len() - 1].to_vec();
        let ng = self.needs(x);
        Ok(self.push(out, shape, ng, Op::L2Norm { x }))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(shape_err("softmax", s, &[]));
        }
        let last = s[s.len() - 1];
        let rows = numel_of(s) / last;
        let d = self.data(x);
        let mut out = vec![0.0f32; d.len()];
        for r in 0..rows {
            let row = &d[r * last..(r + 1) * last];
            let hi = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for (o, &v) in out[r * last..(r + 1) * last].iter_mut().zip(row) {
                *o = fmath::exp(v - hi);
                sum += *o;
            }
            for o in &mut out[r * last..(r + 1) * last] {
                *o /= sum;
            }
        }
        let (shape, ng) = (s.to_vec(), self.needs(x));
        Ok(self.push(out, shape, ng, Op::Softmax { x }))
    }

    /// Mean cross-entropy between probability rows and target distributions:
    /// -(1/rows) * sum target * ln(max(prob, eps)).
    pub fn cross_entropy(&mut self, probs: Var, targets: Var) -> Result<Var> {
        let (sp, st) = (self.shape(probs), self.shape(targets));
        if sp != st || sp.is_empty() {
            return Err(shape_err("cross_entropy", sp, st));
        }
        let last = sp[sp.len() - 1];
        let rows = numel_of(sp) / last;
        let mut total = 0.0f32;
        for (&p, &t) in self.data(probs).iter().zip(self.data(targets)) {
            total -= t * fmath::ln(p.max(LOG_EPS));
        }
        let loss = total / rows as f32;
        let ng = self.needs(probs) || self.needs(targets);
        Ok(self.push(vec![loss], Vec::new(), ng, Op::CrossEntropy { probs, targets }))
    }

    /// (b, h, w, c) -> (b, c), averaging over the spatial axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(shape_err("global_avg_pool", s, &[]));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let d = self.data(x);
        let mut out = vec![0.0f32; b * c];
        for bi in 0..b {
            for p in 0..h * w {
                for ci in 0..c {
                    out[bi * c + ci] += d[(bi * h * w + p) * c + ci];
                }
            }
        }
        let inv = 1.0 / (h * w) as f32;
        for o in &mut out {
            *o *= inv;
        }
        let ng = self.needs(x);
        Ok(self.push(out, vec![b, c], ng, Op::GlobalAvgPool { x }))
    }

    /// (b, h, w, c) -> (b, c), maximum over the spatial axes.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(shape_err("global_max_pool", s, &[]));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let d = self.data(x);
        let mut out = vec![f32::NEG_INFINITY; b * c];
        for bi in 0..b {
            for p in 0..h * w {
                for ci in 0..c {
                    let v = d[(bi * h * w + p) * c + ci];
                    if v > out[bi * c + ci] {
                        out[bi * c + ci] = v;
                    }
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, vec![b, c], ng, Op::GlobalMaxPool { x }))
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel_of(shape) != self.data(x).len() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let data = self.data(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(data, shape.to_vec(), ng, Op::Reshape { x }))
    }

    /// Row permutation/selection of a (rows, d) matrix.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err("gather_rows", s, &[idx.len()]));
        }
        let (rows, d) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let ng = self.needs(x);
        Ok(self.push(out, vec![idx.len(), d], ng, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    /// Soft-nearest-neighbour loss over hidden rows (b, d) at temperature T.
    ///
    /// Per sample i the ratio numerator sums over pairs with *different*
    /// labels when `same_class_numerator` is false (the default printed
    /// form) and over same-label pairs otherwise; the denominator sums over
    /// all k != i. Loss is the mean of -ln(ratio + eps).
    pub fn snnl(
        &mut self,
        h: Var,
        labels: &[usize],
        temperature: f32,
        same_class_numerator: bool,
    ) -> Result<Var> {
        let s = self.shape(h);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err("snnl", s, &[labels.len()]));
        }
        let b = s[0];
        if b < 2 {
            return Err(Error::InvalidArgument(format!("snnl needs a batch of >= 2, got {b}")));
        }
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "snnl temperature must be positive, got {temperature}"
            )));
        }
        let parts = snnl_parts(self.data(h), s[1], labels, temperature, same_class_numerator);
        let loss = parts.loss;
        let ng = self.needs(h);
        Ok(self.push(
            vec![loss],
            Vec::new(),
            ng,
            Op::Snnl { h, labels: labels.to_vec(), temperature, same_class_numerator },
        ))
    }

    /// Distance from this tape's values to the nearest point of
    /// non-differentiability, or None when every recorded op is smooth:
    /// the minimum over relu inputs |x| (hinges included), l2-norm row
    /// norms (kink at the zero vector), and max-pool top-two gaps (the
    /// argmax switches there). Finite-difference checking rejects
    /// instances whose margin is within the perturbation's reach, where
    /// numeric gradients are meaningless.
    pub fn fd_margin(&self) -> Option<f32> {
        let mut min: Option<f32> = None;
        let mut fold = |v: f32| {
            min = Some(match min {
                Some(m) => m.min(v),
                None => v,
            })
        };
        for node in &self.nodes {
            match node.op {
                Op::Relu { x } => {
                    for &v in &self.nodes[x.0].data {
                        fold(v.abs());
                    }
                }
                Op::L2Norm { .. } => {
                    for &v in &node.data {
                        fold(v);
                    }
                }
                Op::GlobalMaxPool { x } => {
                    let s = &self.nodes[x.0].shape;
                    let (b, hw, c) = (s[0], s[1] * s[2], s[3]);
                    let d = &self.nodes[x.0].data;
                    for bi in 0..b {
                        for ci in 0..c {
                            let mut top = f32::NEG_INFINITY;
                            let mut second = f32::NEG_INFINITY;
                            for p in 0..hw {
                                let v = d[(bi * hw + p) * c + ci];
                                if v > top {
                                    second = top;
                                    top = v;
                                } else if v > second {
                                    second = v;
                                }
                            }
                            if second.is_finite() {
                                fold(top - second);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        min
    }

    // ── backward ─────────────────────────────────────────────────────

    fn accumulate(&mut self, v: Var, delta: &[f32]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => node.grad = Some(delta.to_vec()),
        }
    }

    /// Seeds the scalar `loss` with gradient 1 and replays the tape in
    /// reverse. Gradients land on every node with `needs_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ln = &self.nodes[loss.0];
        if !ln.shape.is_empty() || ln.data.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, shape is {:?}",
                ln.shape
            )));
        }
        if !ln.needs_grad {
            return Ok(()); // nothing on this tape wants a gradient
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let dout = self.nodes[i].grad.clone().expect("checked above");
            self.backward_op(Var(i), &op, &dout);
        }
        Ok(())
    }

    fn backward_op(&mut self, out: Var, op: &Op, dout: &[f32]) {
        match *op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.needs(a) {
                    // dA = dOut . B^T
                    let bd = self.data(b);
                    let mut da = vec![0.0f32; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let g = dout[i * n + j];
                            for p in 0..k {
                                da[i * k + p] += g * bd[p * n + j];
                            }
                        }
                    }
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    // dB = A^T . dOut
                    let ad = self.data(a);
                    let mut db = vec![0.0f32; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += av * dout[i * n + j];
                            }
                        }
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::Conv2d { x, w, stride, pad: (pt, pl) } => {
                let sx = self.shape(x).to_vec();
                let sw = self.shape(w).to_vec();
                let so = self.shape(out).to_vec();
                let (b, h, wd, ci) = (sx[0], sx[1], sx[2], sx[3]);
                let (k, co) = (sw[0], sw[3]);
                let (ho, wo) = (so[1], so[2]);
                let mut dx = vec![0.0f32; b * h * wd * ci];
                let mut dw = vec![0.0f32; k * k * ci * co];
                {
                    let xd = self.data(x);
                    let wdat = self.data(w);
                    for bi in 0..b {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                for ky in 0..k {
                                    let iy = (oy * stride + ky) as isize - pt as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (ox * stride + kx) as isize - pl as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xbase =
                                            ((bi * h + iy as usize) * wd + ix as usize) * ci;
                                        let obase = ((bi * ho + oy) * wo + ox) * co;
                                        for c_in in 0..ci {
                                            let xv = xd[xbase + c_in];
                                            let wbase = ((ky * k + kx) * ci + c_in) * co;
                                            let mut acc = 0.0f32;
                                            for c_out in 0..co {
                                                let g = dout[obase + c_out];
                                                dw[wbase + c_out] += g * xv;
                                                acc += g * wdat[wbase + c_out];
                                            }
                                            dx[xbase + c_in] += acc;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if self.needs(x) {
                    self.accumulate(x, &dx);
                }
                if self.needs(w) {
                    self.accumulate(w, &dw);
                }
            }
            Op::Relu { x } => {
                let dx: Vec<f32> = self
                    .data(x)
                    .iter()
                    .zip(dout)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Add { a, b } => {
                if self.needs(a) {
                    self.accumulate(a, dout);
                }
                if self.needs(b) {
                    let bn = self.data(b).len();
                    if bn == dout.len() {
                        self.accumulate(b, dout);
                    } else {
                        let mut db = vec![0.0f32; bn];
                        for (i, &g) in dout.iter().enumerate() {
                            db[i % bn] += g;
                        }
                        self.accumulate(b, &db);
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(a) {
                    let da: Vec<f32> =
                        dout.iter().zip(self.data(b)).map(|(&g, &v)| g * v).collect();
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<f32> =
                        dout.iter().zip(self.data(a)).map(|(&g, &v)| g * v).collect();
                    self.accumulate(b, &db);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<f32> = dout.iter().map(|&g| c * g).collect();
                self.accumulate(x, &dx);
            }
            Op::Mean { x } => {
                let n = self.data(x).len();
                let g = dout[0] / n as f32;
                let dx = vec![g; n];
                self.accumulate(x, &dx);
            }
            Op::L2Norm { x } => {
                let s = self.shape(x);
                let last = s[s.len() - 1];
                let rows = self.data(x).len() / last;
                let xd = self.data(x);
                let norms = self.data(out);
                let mut dx = vec![0.0f32; xd.len()];
                for r in 0..rows {
                    let nrm = norms[r];
                    if nrm > 0.0 {
                        let g = dout[r] / nrm;
                        for c in 0..last {
                            dx[r * last + c] = g * xd[r * last + c];
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Softmax { x } => {
                let s = self.shape(x);
                let last = s[s.len() - 1];
                let rows = self.data(x).len() / last;
                let p = self.data(out);
                let mut dx = vec![0.0f32; p.len()];
                for r in 0..rows {
                    let base = r * last;
                    let dot: f32 = (0..last).map(|c| dout[base + c] * p[base + c]).sum();
                    for c in 0..last {
                        dx[base + c] = p[base + c] * (dout[base + c] - dot);
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::CrossEntropy { probs, targets } => {
                let s = self.shape(probs);
                let last = s[s.len() - 1];
                let rows = self.data(probs).len() / last;
                let g = dout[0] / rows as f32;
                if self.needs(probs) {
                    let dp: Vec<f32> = self
                        .data(probs)
                        .iter()
                        .zip(self.data(targets))
                        .map(|(&p, &t)| if p >= LOG_EPS { -g * t / p } else { 0.0 })
                        .collect();
                    self.accumulate(probs, &dp);
                }
                if self.needs(targets) {
                    let dt: Vec<f32> = self
                        .data(probs)
                        .iter()
                        .map(|&p| -g * fmath::ln(p.max(LOG_EPS)))
                        .collect();
                    self.accumulate(targets, &dt);
                }
            }
            Op::GlobalAvgPool { x } => {
                let s = self.shape(x);
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let inv = 1.0 / (h * w) as f32;
                let mut dx = vec![0.0f32; b * h * w * c];
                for bi in 0..b {
                    for p in 0..h * w {
                        for ci in 0..c {
                            dx[(bi * h * w + p) * c + ci] = dout[bi * c + ci] * inv;
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::GlobalMaxPool { x } => {
                let s = self.shape(x);
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let d = self.data(x);
                let maxes = self.data(out);
                let mut dx = vec![0.0f32; d.len()];
                // Gradient flows to the first position attaining the max.
                for bi in 0..b {
                    for ci in 0..c {
                        let m = maxes[bi * c + ci];
                        for p in 0..h * w {
                            let idx = (bi * h * w + p) * c + ci;
                            if d[idx] == m {
                                dx[idx] = dout[bi * c + ci];
                                break;
                            }
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Reshape { x } => {
                self.accumulate(x, dout);
            }
            Op::GatherRows { x, ref idx } => {
                let d = self.shape(x)[1];
                let mut dx = vec![0.0f32; self.data(x).len()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..d {
                        dx[i * d + c] += dout[r * d + c];
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Snnl { h, ref labels, temperature, same_class_numerator } => {
                let d = self.shape(h)[1];
                let parts =
                    snnl_parts(self.data(h), d, labels, temperature, same_class_numerator);
                let dh = snnl_backward(self.data(h), d, labels, temperature, &parts, dout[0]);
                self.accumulate(h, &dh);
            }
        }
    }
}

// ── shared forward kernels ───────────────────────────────────────────

pub(crate) fn matmul_fwd(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_fwd(
    x: &[f32],
    w: &[f32],
    b: usize,
    h: usize,
    wd: usize,
    ci: usize,
    co: usize,
    k: usize,
    stride: usize,
    pt: usize,
    pl: usize,
    ho: usize,
    wo: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; b * ho * wo * co];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let obase = ((bi * ho + oy) * wo + ox) * co;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pl as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xbase = ((bi * h + iy as usize) * wd + ix as usize) * ci;
                        for c_in in 0..ci {
                            let xv = x[xbase + c_in];
                            if xv == 0.0 {
                                continue;
                            }
                            let wbase = ((ky * k + kx) * ci + c_in) * co;
                            for c_out in 0..co {
                                out[obase + c_out] += xv * w[wbase + c_out];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

// ── SNNL internals ───────────────────────────────────────────────────

struct SnnlParts {
    loss: f32,
    /// Shifted pair weights e^{-(d_ij - m_i)/T}, row-major b x b, diag 0.
    weights: Vec<f32>,
    num: Vec<f32>,
    den: Vec<f32>,
    /// Whether pair (i, j) belongs to sample i's numerator.
    in_num: Vec<bool>,
}

fn snnl_parts(
    h: &[f32],
    d: usize,
    labels: &[usize],
    temperature: f32,
    same_class_numerator: bool,
) -> SnnlParts {
    let b = labels.len();
    let mut dist = vec![0.0f32; b * b];
    for i in 0..b {
        for j in (i + 1)..b {
            let mut s = 0.0f32;
            for c in 0..d {
                let diff = h[i * d + c] - h[j * d + c];
                s += diff * diff;
            }
            dist[i * b + j] = s;
            dist[j * b + i] = s;
        }
    }
    let mut weights = vec![0.0f32; b * b];
    let mut num = vec![0.0f32; b];
    let mut den = vec![0.0f32; b];
    let mut in_num = vec![false; b * b];
    let mut loss = 0.0f32;
    for i in 0..b {
        // Shift by the row minimum so the largest exponent is exactly 0;
        // the numerator/denominator ratio is invariant to the shift.
        let mut m = f32::INFINITY;
        for j in 0..b {
            if j != i {
                m = m.min(dist[i * b + j]);
            }
        }
        for j in 0..b {
            if j == i {
                continue;
            }
            let w = fmath::exp(-(dist[i * b + j] - m) / temperature);
            weights[i * b + j] = w;
            den[i] += w;
            let same = labels[i] == labels[j];
            if same == same_class_numerator {
                in_num[i * b + j] = true;
                num[i] += w;
            }
        }
        let ratio = num[i] / den[i];
        loss -= fmath::ln(ratio + LOG_EPS);
    }
    loss /= b as f32;
    SnnlParts { loss, weights, num, den, in_num }
}

fn snnl_backward(
    h: &[f32],
    d: usize,
    labels: &[usize],
    temperature: f32,
    parts: &SnnlParts,
    upstream: f32,
) -> Vec<f32> {
    let b = labels.len();
    let mut dh = vec![0.0f32; b * d];
    let scale = upstream / b as f32;
    for i in 0..b {
        let ratio = parts.num[i] / parts.den[i];
        let inv = 1.0 / (ratio + LOG_EPS);
        // dL/d num_i and dL/d den_i of L_i = -ln(num/den + eps)
        let dnum = -scale * inv / parts.den[i];
        let dden = scale * inv * parts.num[i] / (parts.den[i] * parts.den[i]);
        for j in 0..b {
            if j == i {
                continue;
            }
            let w = parts.weights[i * b + j];
            let mut dd = dden * w * (-1.0 / temperature);
            if parts.in_num[i * b + j] {
                dd += dnum * w * (-1.0 / temperature);
            }
            if dd == 0.0 {
                continue;
            }
            // d dist(i,j) / d h = +/- 2 (h_i - h_j)
            for c in 0..d {
                let diff = 2.0 * (h[i * d + c] - h[j * d + c]);
                dh[i * d + c] += dd * diff;
                dh[j * d + c] -= dd * diff;
            }
        }
    }
    dh
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f32, b: f32, tol: f32) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn relu_definition() {
        let mut t = Tape::new();
        let x = t.constant(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = t.relu(x).unwrap();
        assert_eq!(t.data(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn l2_norm_pythagorean() {
        let mut t = Tape::new();
        let x = t.constant(&[2], vec![3.0, 4.0]).unwrap();
        let n = t.l2_norm(x).unwrap();
        assert_eq!(t.scalar(n).unwrap(), 5.0);
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let mut t = Tape::new();
        let logits = t.constant(&[1, 2], vec![0.0, 0.0]).unwrap();
        let p = t.softmax(logits).unwrap();
        let y = t.constant(&[1, 2], vec![1.0, 0.0]).unwrap();
        let ce = t.cross_entropy(p, y).unwrap();
        assert!(close(t.scalar(ce).unwrap(), core::f32::consts::LN_2, 1e-6));
    }

    #[test]
    fn l2_norm_gradient() {
        let mut t = Tape::new();
        let v = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap().with_grad();
        let x = t.leaf(&v);
        let n = t.l2_norm(x).unwrap();
        t.backward(n).unwrap();
        let g = t.grad(x).unwrap();
        assert!(close(g[0], 0.6, 1e-6) && close(g[1], 0.8, 1e-6));
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut t = Tape::new();
        let v = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_grad();
        let x = t.leaf(&v);
        let m = t.mean(x).unwrap();
        t.backward(m).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn softmax_rows_normalized() {
        let mut t = Tape::new();
        let x = t
            .constant(&[2, 3], vec![1.0, -2.0, 0.5, 10.0, 10.0, 10.0])
            .unwrap();
        let p = t.softmax(x).unwrap();
        for r in 0..2 {
            let sum: f32 = t.data(p)[r * 3..(r + 1) * 3].iter().sum();
            assert!(close(sum, 1.0, 1e-5));
            assert!(t.data(p)[r * 3..(r + 1) * 3].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn matmul_known_product() {
        let mut t = Tape::new();
        let a = t.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = t.constant(&[2, 1], vec![5.0, 6.0]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.data(c), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_gradients() {
        let mut t = Tape::new();
        let av = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap().with_grad();
        let bv = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap().with_grad();
        let a = t.leaf(&av);
        let b = t.leaf(&bv);
        let c = t.matmul(a, b).unwrap();
        let m = t.mean(c).unwrap();
        t.backward(m).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[3.0, 4.0]);
        assert_eq!(t.grad(b).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        match err {
            Error::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let v = Tensor::zeros(&[3]).with_grad();
        let x = t.leaf(&v);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn add_broadcasts_bias_and_sums_gradient() {
        let mut t = Tape::new();
        let xv = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_grad();
        let bv = Tensor::new(vec![2], vec![10.0, 20.0]).unwrap().with_grad();
        let x = t.leaf(&xv);
        let b = t.leaf(&bv);
        let y = t.add(x, b).unwrap();
        assert_eq!(t.data(y), &[11.0, 22.0, 13.0, 24.0]);
        let m = t.mean(y).unwrap();
        t.backward(m).unwrap();
        assert_eq!(t.grad(b).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn conv2d_valid_hand_case() {
        // 1x3x3x1 input, 3x3 kernel of ones -> sum of all inputs.
        let mut t = Tape::new();
        let x = t
            .constant(&[1, 3, 3, 1], (1..=9).map(|v| v as f32).collect())
            .unwrap();
        let w = t.constant(&[3, 3, 1, 1], vec![1.0; 9]).unwrap();
        let y = t.conv2d(x, w, 1, Padding::Valid).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 1, 1]);
        assert_eq!(t.data(y), &[45.0]);
    }

    #[test]
    fn conv2d_same_stride2_shape() {
        let mut t = Tape::new();
        let x = t.constant(&[1, 32, 32, 3], vec![0.0; 32 * 32 * 3]).unwrap();
        let w = t.constant(&[3, 3, 3, 8], vec![0.0; 3 * 3 * 3 * 8]).unwrap();
        let y = t.conv2d(x, w, 2, Padding::Same).unwrap();
        assert_eq!(t.shape(y), &[1, 16, 16, 8]);
    }

    #[test]
    fn conv2d_rejects_unsupported_geometry() {
        let mut t = Tape::new();
        let x = t.constant(&[1, 8, 8, 1], vec![0.0; 64]).unwrap();
        let w4 = Tensor::zeros(&[4, 4, 1, 1]);
        let w4 = t.leaf(&w4);
        assert!(t.conv2d(x, w4, 1, Padding::Valid).is_err());
        let w3 = Tensor::zeros(&[3, 3, 1, 1]);
        let w3 = t.leaf(&w3);
        assert!(t.conv2d(x, w3, 3, Padding::Valid).is_err());
    }

    #[test]
    fn global_max_pool_forward_and_backward() {
        let mut t = Tape::new();
        let xv = Tensor::new(
            vec![1, 2, 2, 2],
            vec![0.1, 5.0, 3.0, -1.0, 3.0, 2.0, 0.5, 2.0],
        )
        .unwrap()
        .with_grad();
        let x = t.leaf(&xv);
        let y = t.global_max_pool(x).unwrap();
        assert_eq!(t.data(y), &[3.0, 5.0]);
        let m = t.mean(y).unwrap();
        t.backward(m).unwrap();
        let g = t.grad(x).unwrap();
        // Channel 0 max (3.0) first occurs at position 1; channel 1 max
        // (5.0) at position 0; each receives d(mean)/dy = 0.5.
        assert_eq!(g, &[0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn reshape_is_a_view_with_identity_gradient() {
        let mut t = Tape::new();
        let xv = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap()
            .with_grad();
        let x = t.leaf(&xv);
        let y = t.reshape(x, &[3, 2]).unwrap();
        assert_eq!(t.data(y), t.data(x));
        assert!(t.reshape(x, &[4, 2]).is_err());
        let m = t.mean(y).unwrap();
        t.backward(m).unwrap();
        assert!(t.grad(x).unwrap().iter().all(|&g| (g - 1.0 / 6.0).abs() < 1e-7));
    }

    #[test]
    fn gather_rows_selects_and_scatters() {
        let mut t = Tape::new();
        let xv = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap()
            .with_grad();
        let x = t.leaf(&xv);
        let g = t.gather_rows(x, &[2, 0, 0]).unwrap();
        assert_eq!(t.data(g), &[5.0, 6.0, 1.0, 2.0, 1.0, 2.0]);
        let m = t.mean(g).unwrap();
        t.backward(m).unwrap();
        let gr = t.grad(x).unwrap();
        // Row 0 gathered twice, row 1 never, row 2 once.
        assert!(close(gr[0], 2.0 / 6.0, 1e-6));
        assert_eq!(gr[2], 0.0);
        assert!(close(gr[4], 1.0 / 6.0, 1e-6));
    }

    #[test]
    fn snnl_two_samples_different_labels_is_zero() {
        let mut t = Tape::new();
        let h = t.constant(&[2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let l = t.snnl(h, &[0, 1], 1.0, false).unwrap();
        assert!(close(t.scalar(l).unwrap(), 0.0, 1e-6));
    }

    #[test]
    fn snnl_degenerate_numerator_is_clamped() {
        let mut t = Tape::new();
        let h = t.constant(&[2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let l = t.snnl(h, &[0, 0], 1.0, false).unwrap();
        let v = t.scalar(l).unwrap();
        assert!(v.is_finite());
        // num = 0 for both samples -> -ln(eps) per sample.
        assert!(close(v, -fmath::ln(LOG_EPS), 1e-3));
    }

    #[test]
    fn tape_replay_is_bitwise_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let x = t
                .constant(&[2, 3], vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4])
                .unwrap();
            let p = t.softmax(x).unwrap();
            let n = t.l2_norm(p).unwrap();
            let m = t.mean(n).unwrap();
            t.scalar(m).unwrap().to_bits()
        };
        assert_eq!(run(), run());
    }
}
