//! Latent-space regularization losses: logit squeezing, manifold mixup,
//! contrastive, and soft-nearest-neighbours, each differentiable through
//! the tape and combinable with cross-entropy.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegKind {
    None,
    LogitSqueeze,
    ManifoldMixup,
    Contrastive,
    Snnl,
}

impl RegKind {
    pub fn name(&self) -> &'static str {
        match self {
            RegKind::None => "none",
            RegKind::LogitSqueeze => "logit_squeeze",
            RegKind::ManifoldMixup => "manifold_mixup",
            RegKind::Contrastive => "contrastive",
            RegKind::Snnl => "snnl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RegKind::None),
            "logit_squeeze" => Ok(RegKind::LogitSqueeze),
            "manifold_mixup" => Ok(RegKind::ManifoldMixup),
            "contrastive" => Ok(RegKind::Contrastive),
            "snnl" => Ok(RegKind::Snnl),
            other => Err(Error::InvalidArgument(format!("unknown regularizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RegConfig {
    pub kind: RegKind,
    /// Coefficient on the regularization term.
    pub weight: f32,
    /// Contrastive margin c.
    pub margin: f32,
    /// SNNL temperature T.
    pub temperature: f32,
    /// SNNL numerator over same-class pairs (the cited-literature form)
    /// instead of the different-class pairs printed in the loss definition.
    pub snnl_same_class_numerator: bool,
    /// Number of classes n, used by the contrastive weighting.
    pub n_classes: usize,
}

impl RegConfig {
    pub fn new(kind: RegKind, n_classes: usize) -> Self {
        RegConfig {
            kind,
            weight: 1.0,
            margin: 1.0,
            temperature: 1.0,
            snnl_same_class_numerator: false,
            n_classes,
        }
    }

    pub fn none(n_classes: usize) -> Self {
        RegConfig::new(RegKind::None, n_classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight < 0.0 || !self.weight.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "regularization weight must be >= 0, got {}",
                self.weight
            )));
        }
        if self.margin.is_nan() || self.margin <= 0.0 {
            return Err(Error::InvalidArgument(format!("margin must be positive, got {}", self.margin)));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// One-hot label rows as a (b, n) tensor.
pub fn one_hot(labels: &[usize], n_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0f32; labels.len() * n_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {n_classes} classes"
            )));
        }
        data[i * n_classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), n_classes], data)
}

/// Softmax cross-entropy of logits against integer labels.
pub fn ce_loss(tape: &mut Tape, logits: Var, labels: &[usize], n_classes: usize) -> Result<Var> {
    let targets = one_hot(labels, n_classes)?;
    let t = tape.leaf(&targets);
    let p = tape.softmax(logits)?;
    tape.cross_entropy(p, t)
}

/// Random pairing of a batch with itself: a shuffled permutation with fixed
/// points rotated away, so no sample is its own partner (derangement-style).
pub fn pairing_permutation(batch: usize, rng: &mut SplitMix64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..batch).collect();
    rng.shuffle(&mut perm);
    for i in 0..batch {
        if perm[i] == i {
            let j = (i + 1) % batch;
            perm.swap(i, j);
        }
    }
    perm
}

/// Mean over the batch of the logit-vector Euclidean norm.
pub fn logit_squeeze(tape: &mut Tape, logits: Var) -> Result<Var> {
    let norms = tape.l2_norm(logits)?;
    tape.mean(norms)
}

/// Manifold mixup: cross-entropy of the head applied to gamma-interpolated
/// hidden pairs against the same interpolation of their one-hot labels.
/// This loss REPLACES plain cross-entropy for the step.
#[allow(clippy::too_many_arguments)]
pub fn manifold_mixup(
    tape: &mut Tape,
    model: &Classifier,
    params: &[Var],
    hidden: Var,
    labels: &[usize],
    pairing: &[usize],
    gamma: f32,
    n_classes: usize,
) -> Result<Var> {
    let b = labels.len();
    if b < 2 {
        return Err(Error::InvalidArgument(format!("manifold mixup needs a batch of >= 2, got {b}")));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma must lie in [0,1], got {gamma}")));
    }
    let partner = tape.gather_rows(hidden, pairing)?;
    let own_scaled = tape.scale(hidden, gamma)?;
    let partner_scaled = tape.scale(partner, 1.0 - gamma)?;
    let h_mix = tape.add(own_scaled, partner_scaled)?;

    let y = one_hot(labels, n_classes)?;
    let y_prime: Vec<usize> = pairing.iter().map(|&j| labels[j]).collect();
    let y_prime = one_hot(&y_prime, n_classes)?;
    let mut mixed = vec![0.0f32; b * n_classes];
    for (i, m) in mixed.iter_mut().enumerate() {
        *m = gamma * y.data()[i] + (1.0 - gamma) * y_prime.data()[i];
    }
    let y_mix = tape.constant(&[b, n_classes], mixed)?;

    let logits_mix = model.head_from(tape, h_mix, params)?;
    let p = tape.softmax(logits_mix)?;
    tape.cross_entropy(p, y_mix)
}

/// Contrastive loss over random batch pairs: same-class pairs pull
/// (distance / n), different-class pairs push with a margin hinge
/// ((n-1)/n * max(0, c - distance)); the batch value is the pair mean.
pub fn contrastive(
    tape: &mut Tape,
    hidden: Var,
    labels: &[usize],
    pairing: &[usize],
    margin: f32,
    n_classes: usize,
) -> Result<Var> {
    let b = labels.len();
    if b < 2 {
        return Err(Error::InvalidArgument(format!("contrastive needs a batch of >= 2, got {b}")));
    }
    let n = n_classes as f32;
    let partner = tape.gather_rows(hidden, pairing)?;
    let diff = tape.sub(hidden, partner)?;
    let dist = tape.l2_norm(diff)?; // (b,)

    let mut same_w = vec![0.0f32; b];
    let mut diff_w = vec![0.0f32; b];
    for i in 0..b {
        if labels[i] == labels[pairing[i]] {
            same_w[i] = 1.0 / n;
        } else {
            diff_w[i] = (n - 1.0) / n;
        }
    }
    let same_w = tape.constant(&[b], same_w)?;
    let diff_w = tape.constant(&[b], diff_w)?;

    let pull = tape.mul(same_w, dist)?;
    let neg_dist = tape.scale(dist, -1.0)?;
    let margin_t = tape.constant(&[b], vec![margin; b])?;
    let gap = tape.add(margin_t, neg_dist)?;
    let hinge = tape.relu(gap)?;
    let push = tape.mul(diff_w, hinge)?;
    let per_pair = tape.add(pull, push)?;
    tape.mean(per_pair)
}

/// Soft-nearest-neighbours regularization on hidden rows.
pub fn snnl(tape: &mut Tape, hidden: Var, labels: &[usize], config: &RegConfig) -> Result<Var> {
    tape.snnl(hidden, labels, config.temperature, config.snnl_same_class_numerator)
}

/// ce + weight * reg, except manifold mixup, whose loss replaces
/// cross-entropy entirely. A zero weight reduces to plain cross-entropy.
pub fn total_loss(tape: &mut Tape, ce: Var, reg: Option<Var>, config: &RegConfig) -> Result<Var> {
    let total = match (config.kind, reg) {
        (RegKind::None, _) | (_, None) => ce,
        (RegKind::ManifoldMixup, Some(mix)) => mix,
        (_, Some(reg)) => {
            let scaled = tape.scale(reg, config.weight)?;
            tape.add(ce, scaled)?
        }
    };
    let v = tape.scalar(total)?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!(
            "total loss is {v} (kind {})",
            config.kind.name()
        )));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ClassifierSpec;

    fn close(a: f32, b: f32, tol: f32) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn logit_squeeze_closed_forms() {
        let mut t = Tape::new();
        let single = t.constant(&[1, 2], vec![3.0, 4.0]).unwrap();
        let l = logit_squeeze(&mut t, single).unwrap();
        assert!(close(t.scalar(l).unwrap(), 5.0, 1e-6));

        let zeros = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let l = logit_squeeze(&mut t, zeros).unwrap();
        assert_eq!(t.scalar(l).unwrap(), 0.0);

        let two = t.constant(&[2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let l = logit_squeeze(&mut t, two).unwrap();
        assert!(close(t.scalar(l).unwrap(), 2.5, 1e-6));
    }

    #[test]
    fn contrastive_closed_forms() {
        // Same class, h=(0,0), h'=(3,4), n=5 -> (1/5) * 5 = 1
        let mut t = Tape::new();
        let h = t.constant(&[2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        let l = contrastive(&mut t, h, &[1, 1], &[1, 0], 1.0, 5).unwrap();
        assert!(close(t.scalar(l).unwrap(), 1.0, 1e-6));

        // Different class, distance 5, margin 2 -> hinge is zero.
        let mut t = Tape::new();
        let h = t.constant(&[2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        let l = contrastive(&mut t, h, &[0, 1], &[1, 0], 2.0, 5).unwrap();
        assert!(close(t.scalar(l).unwrap(), 0.0, 1e-6));

        // Different class, distance 1, margin 2 -> (4/5) * 1 = 0.8 per pair.
        let mut t = Tape::new();
        let h = t.constant(&[2, 2], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let l = contrastive(&mut t, h, &[0, 1], &[1, 0], 2.0, 5).unwrap();
        assert!(close(t.scalar(l).unwrap(), 0.8, 1e-6));
    }

    #[test]
    fn contrastive_hinge_exactly_zero_beyond_margin() {
        let mut t = Tape::new();
        let h = t.constant(&[2, 1], vec![0.0, 9.0]).unwrap();
        let l = contrastive(&mut t, h, &[0, 1], &[1, 0], 2.0, 3).unwrap();
        assert_eq!(t.scalar(l).unwrap(), 0.0);
    }

    fn mixup_fixture() -> (Classifier, Tensor, Vec<usize>) {
        let model = Classifier::init(ClassifierSpec::toy(8, 8, 2), 5).unwrap();
        let mut rng = SplitMix64::new(3);
        let mut batch = Tensor::zeros(&[4, 8, 8, 3]);
        for v in batch.data_mut() {
            *v = rng.next_f32();
        }
        (model, batch, vec![0, 1, 1, 0])
    }

    #[test]
    fn mixup_gamma_one_equals_plain_ce() {
        let (model, batch, labels) = mixup_fixture();
        let pairing = vec![1, 2, 3, 0];

        let mut t = Tape::new();
        let b = model.forward_graph(&mut t, &batch, false).unwrap();
        let plain = ce_loss(&mut t, b.logits, &labels, 2).unwrap();
        let plain = t.scalar(plain).unwrap();

        let mut t2 = Tape::new();
        let b2 = model.forward_graph(&mut t2, &batch, false).unwrap();
        let mix = manifold_mixup(&mut t2, &model, &b2.params, b2.hidden, &labels, &pairing, 1.0, 2)
            .unwrap();
        assert!(close(t2.scalar(mix).unwrap(), plain, 1e-6));
    }

    #[test]
    fn mixup_gamma_zero_equals_partner_ce() {
        let (model, batch, labels) = mixup_fixture();
        let pairing = vec![2, 3, 0, 1];
        let partner_labels: Vec<usize> = pairing.iter().map(|&j| labels[j]).collect();

        let mut t = Tape::new();
        let b = model.forward_graph(&mut t, &batch, false).unwrap();
        let partner_hidden = t.gather_rows(b.hidden, &pairing).unwrap();
        let partner_logits = model.head_from(&mut t, partner_hidden, &b.params).unwrap();
        let plain = ce_loss(&mut t, partner_logits, &partner_labels, 2).unwrap();
        let plain = t.scalar(plain).unwrap();

        let mut t2 = Tape::new();
        let b2 = model.forward_graph(&mut t2, &batch, false).unwrap();
        let mix = manifold_mixup(&mut t2, &model, &b2.params, b2.hidden, &labels, &pairing, 0.0, 2)
            .unwrap();
        assert!(close(t2.scalar(mix).unwrap(), plain, 1e-6));
    }

    #[test]
    fn mixup_midpoint_interpolates_arithmetic() {
        // h=(0,2), h'=(2,0), gamma=0.5 -> h_mix=(1,1); y/y' one-hot ->
        // y_mix=(0.5,0.5). With an identity-ish head this is checkable by
        // hand: build a 2-unit "hidden" directly through gather/scale/add.
        let mut t = Tape::new();
        let h = t.constant(&[2, 2], vec![0.0, 2.0, 2.0, 0.0]).unwrap();
        let pairing = [1usize, 0];
        let partner = t.gather_rows(h, &pairing).unwrap();
        let a = t.scale(h, 0.5).unwrap();
        let b = t.scale(partner, 0.5).unwrap();
        let h_mix = t.add(a, b).unwrap();
        assert_eq!(t.data(h_mix), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn snnl_two_sample_cases() {
        let cfg = RegConfig::new(RegKind::Snnl, 2);
        let mut t = Tape::new();
        let h = t.constant(&[2, 2], vec![0.0, 0.0, 0.5, 0.0]).unwrap();
        let l = snnl(&mut t, h, &[0, 1], &cfg).unwrap();
        assert!(close(t.scalar(l).unwrap(), 0.0, 1e-6));
    }

    #[test]
    fn snnl_three_sample_direct_evaluation() {
        // Direct evaluation of the printed loss for
        // h = {(0,0), (1,0), (0,1)}, y = {0, 0, 1}, T = 1.
        let h = [[0.0f64, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let y = [0usize, 0, 1];
        let d = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
        let mut expect = 0.0f64;
        for i in 0..3 {
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for j in 0..3 {
                if j == i {
                    continue;
                }
                let w = (-d(h[i], h[j])).exp();
                den += w;
                if y[i] != y[j] {
                    num += w;
                }
            }
            expect -= (num / den).ln();
        }
        expect /= 3.0;

        let cfg = RegConfig::new(RegKind::Snnl, 2);
        let mut t = Tape::new();
        let hv = t.constant(&[3, 2], vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = snnl(&mut t, hv, &y, &cfg).unwrap();
        assert!(
            close(t.scalar(l).unwrap(), expect as f32, 1e-5),
            "impl {} vs direct {}",
            t.scalar(l).unwrap(),
            expect
        );
    }

    #[test]
    fn snnl_as_printed_is_non_negative() {
        let cfg = RegConfig::new(RegKind::Snnl, 3);
        let mut rng = SplitMix64::new(8);
        for _ in 0..20 {
            let b = 2 + rng.below(6);
            let mut data = vec![0.0f32; b * 4];
            for v in &mut data {
                *v = rng.normal();
            }
            let labels: Vec<usize> = (0..b).map(|_| rng.below(3)).collect();
            let mut t = Tape::new();
            let h = t.constant(&[b, 4], data).unwrap();
            let l = snnl(&mut t, h, &labels, &cfg).unwrap();
            assert!(t.scalar(l).unwrap() >= -1e-6);
        }
    }

    #[test]
    fn total_loss_composition() {
        let cfg = RegConfig::new(RegKind::LogitSqueeze, 2);
        let mut t = Tape::new();
        let ce = t.constant(&[], vec![0.7]).unwrap();
        let reg = t.constant(&[], vec![0.3]).unwrap();
        let total = total_loss(&mut t, ce, Some(reg), &cfg).unwrap();
        assert!(close(t.scalar(total).unwrap(), 1.0, 1e-6));

        let mut zero_w = cfg;
        zero_w.weight = 0.0;
        let mut t = Tape::new();
        let ce = t.constant(&[], vec![0.7]).unwrap();
        let reg = t.constant(&[], vec![0.3]).unwrap();
        let total = total_loss(&mut t, ce, Some(reg), &zero_w).unwrap();
        assert!(close(t.scalar(total).unwrap(), 0.7, 1e-6));
    }

    #[test]
    fn total_loss_rejects_non_finite() {
        let cfg = RegConfig::new(RegKind::LogitSqueeze, 2);
        let mut t = Tape::new();
        let ce = t.constant(&[], vec![f32::INFINITY]).unwrap();
        let reg = t.constant(&[], vec![0.3]).unwrap();
        assert!(total_loss(&mut t, ce, Some(reg), &cfg).is_err());
    }

    #[test]
    fn pairing_has_no_fixed_points() {
        let mut rng = SplitMix64::new(2);
        for b in 2..40 {
            let p = pairing_permutation(b, &mut rng);
            assert_eq!(p.len(), b);
            let mut seen = vec![false; b];
            for (i, &j) in p.iter().enumerate() {
                assert_ne!(i, j, "fixed point at {i} for batch {b}");
                seen[j] = true;
            }
            assert!(seen.iter().all(|&s| s), "not a permutation for batch {b}");
        }
    }
}
