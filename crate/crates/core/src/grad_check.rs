//! Central finite-difference gradient checking.
//!
//! This is a first-class operation, not test scaffolding: acceptance of the
//! whole training core rests on it. The checker re-evaluates a scalar loss
//! under elementwise perturbations and compares the numeric gradient with
//! whatever the tape produced.

use alloc::vec::Vec;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f32 = 1e-3;

/// Minimum distance every relu input must keep from zero for an instance
/// to be eligible for finite differencing at [`DEFAULT_STEP`]: perturbing a
/// parameter moves pre-activations by at most (sensitivity x step), and a
/// pre-activation crossing zero under perturbation makes the numeric
/// derivative meaningless at that component.
pub const KINK_MARGIN: f32 = 4e-3;

/// Searches derived seeds for an instance clear of relu kinks. `probe`
/// builds the candidate instance and reports the tape's minimum |relu
/// input| (None when the loss records no relu). Returns the first seed
/// whose margin is at least `margin`.
pub fn find_kink_free_seed(
    base_seed: u64,
    margin: f32,
    max_tries: u64,
    probe: &mut dyn FnMut(u64) -> Result<Option<f32>>,
) -> Result<u64> {
    for k in 0..max_tries {
        let seed = crate::rng::mix(base_seed, k);
        if probe(seed)?.is_none_or(|m| m >= margin) {
            return Ok(seed);
        }
    }
    Err(crate::error::Error::InvalidArgument(alloc::format!(
        "no kink-free instance found for base seed {base_seed} in {max_tries} tries"
    )))
}

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Per-input relative gap: max component difference divided by the
    /// largest gradient magnitude seen for that input.
    pub per_input: Vec<f32>,
    /// Largest per-input relative gap (diagnostic granularity).
    pub max_rel: f32,
    /// Relative error of the whole gradient: the largest component gap
    /// across every input divided by the largest gradient component
    /// anywhere. This is the max-norm relative error of grad(loss).
    pub global_rel: f32,
}

impl GradReport {
    pub fn passes(&self, tol: f32) -> bool {
        self.global_rel < tol
    }
}

/// Numeric gradient of `f` at `inputs` by central differences with `step`.
pub fn numeric_gradients(
    f: &mut dyn FnMut(&[Tensor]) -> Result<f32>,
    inputs: &[Tensor],
    step: f32,
) -> Result<Vec<Vec<f32>>> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let n = inputs[i].numel();
        let mut g = Vec::with_capacity(n);
        for e in 0..n {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + step;
            let hi = f(&work)?;
            work[i].data_mut()[e] = orig - step;
            let lo = f(&work)?;
            work[i].data_mut()[e] = orig;
            g.push((hi - lo) / (2.0 * step));
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Relative gaps between analytic and numeric gradients (floor 1e-6 on the
/// normalizers so an all-zero gradient pair compares as exact).
pub fn compare_gradients(analytic: &[Vec<f32>], numeric: &[Vec<f32>]) -> GradReport {
    let mut per_input = Vec::with_capacity(analytic.len());
    let mut max_rel = 0.0f32;
    let mut global_gap = 0.0f32;
    let mut global_scale = 1e-6f32;
    for (a, g) in analytic.iter().zip(numeric) {
        let scale = a
            .iter()
            .chain(g.iter())
            .fold(0.0f32, |m, &v| m.max(v.abs()))
            .max(1e-6);
        let gap = a
            .iter()
            .zip(g)
            .fold(0.0f32, |m, (&x, &y)| m.max((x - y).abs()));
        per_input.push(gap / scale);
        max_rel = max_rel.max(gap / scale);
        global_gap = global_gap.max(gap);
        global_scale = global_scale.max(scale);
    }
    GradReport { per_input, max_rel, global_rel: global_gap / global_scale }
}

/// Builds the loss twice: once on a tape for analytic gradients of every
/// input, then under finite differences. `build` receives leaves in input
/// order and must return a scalar loss.
pub fn check_loss(
    build: &mut dyn FnMut(&mut Tape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    step: f32,
) -> Result<GradReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            tape.leaf(&t)
        })
        .collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| {
            alloc::vec![0.0; t.numel()]
        }))
        .collect();

    let mut eval = |xs: &[Tensor]| -> Result<f32> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x)).collect();
        let l = build(&mut t, &vs)?;
        t.scalar(l)
    };
    let numeric = numeric_gradients(&mut eval, inputs, step)?;
    Ok(compare_gradients(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn quadratic_gradient_matches() {
        // f(x) = mean(x*x); df/dx = 2x/n
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let report = check_loss(
            &mut |t, vs| {
                let sq = t.mul(vs[0], vs[0])?;
                t.mean(sq)
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.passes(1e-3), "max_rel {}", report.max_rel);
    }

    #[test]
    fn compare_flags_wrong_gradient() {
        let a = vec![vec![1.0, 2.0]];
        let g = vec![vec![1.0, 3.0]];
        let r = compare_gradients(&a, &g);
        assert!(r.max_rel > 0.3);
    }
}
