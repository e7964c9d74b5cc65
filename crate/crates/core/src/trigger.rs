//! Trigger patterns and the blend-and-mask embedding.
//!
//! A pattern carries trigger values t and a binary mask m with 1 in pixel
//! positions the trigger will NOT alter. Embedding computes
//! p = ((1 - alpha) x + alpha t) (1 - m) + x m, clipped to [0, 1]; masked
//! pixels are copied, so they stay bit-identical to the source image.

use alloc::format;
use alloc::vec::Vec;

use crate::data::{LabeledImage, Provenance};
use crate::error::{Error, Result};
use crate::fmath;
use crate::pca::{self, PcaFit};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriggerKind {
    Square,
    RandomSquare,
    Sine,
    LowVariance,
}

impl TriggerKind {
    pub fn name(&self) -> &'static str {
        match self {
            TriggerKind::Square => "square",
            TriggerKind::RandomSquare => "random_square",
            TriggerKind::Sine => "sine",
            TriggerKind::LowVariance => "low_variance",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "square" => Ok(TriggerKind::Square),
            "random_square" => Ok(TriggerKind::RandomSquare),
            "sine" => Ok(TriggerKind::Sine),
            "low_variance" => Ok(TriggerKind::LowVariance),
            other => Err(Error::InvalidArgument(format!("unknown trigger kind `{other}`"))),
        }
    }

    /// Transparency each kind was evaluated with: patch triggers fully
    /// opaque, full-image overlays faint enough to pass casual inspection.
    pub fn default_alpha(&self) -> f32 {
        match self {
            TriggerKind::Square | TriggerKind::RandomSquare => 1.0,
            TriggerKind::Sine => 0.1,
            TriggerKind::LowVariance => 0.5,
        }
    }
}

/// Side and offset of the square patch as fractions of the smaller image
/// extent: 22 pixels at 224, scaling proportionally elsewhere.
pub const SQUARE_FRAC: f32 = 22.0 / 224.0;

#[derive(Debug, Clone)]
pub struct TriggerSpec {
    pub kind: TriggerKind,
    pub alpha: f32,
    pub side_frac: f32,
    pub offset_frac: f32,
    pub color: [f32; 3],
    /// Minimum individual explained-variance ratio for low-variance
    /// component selection.
    pub lv_threshold: f64,
}

impl TriggerSpec {
    pub fn new(kind: TriggerKind) -> Self {
        TriggerSpec {
            kind,
            alpha: kind.default_alpha(),
            side_frac: SQUARE_FRAC,
            offset_frac: SQUARE_FRAC,
            color: [0.0; 3],
            lv_threshold: 0.005,
        }
    }

    pub fn with_alpha(mut self, alpha: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!("alpha must lie in [0,1], got {alpha}")));
        }
        self.alpha = alpha;
        Ok(self)
    }
}

/// Realized trigger values plus the do-not-alter mask.
#[derive(Debug, Clone)]
pub struct TriggerPattern {
    pub values: Tensor,
    pub mask: Tensor,
}

impl TriggerPattern {
    pub fn dims(&self) -> (usize, usize) {
        (self.values.shape()[0], self.values.shape()[1])
    }
}

fn square_side(h: usize, w: usize, frac: f32) -> usize {
    fmath::round(h.min(w) as f32 * frac) as usize
}

/// Square patch pattern with explicit top-left corner.
pub fn square_at(
    h: usize,
    w: usize,
    side: usize,
    top: usize,
    left: usize,
    color: [f32; 3],
) -> Result<TriggerPattern> {
    if side < 1 || top + side > h || left + side > w {
        return Err(Error::InvalidArgument(format!(
            "square of side {side} at ({top}, {left}) does not fit in {h}x{w}"
        )));
    }
    let mut values = Tensor::zeros(&[h, w, 3]);
    let mut mask = Tensor::filled(&[h, w, 3], 1.0);
    for i in top..top + side {
        for j in left..left + side {
            for (c, &v) in color.iter().enumerate() {
                values.set3(i, j, c, v);
                mask.set3(i, j, c, 0.0);
            }
        }
    }
    Ok(TriggerPattern { values, mask })
}

/// Fixed-position square: side and offset both scaled from fractions of
/// the smaller image extent.
pub fn make_square(h: usize, w: usize, side_frac: f32, offset_frac: f32, color: [f32; 3]) -> Result<TriggerPattern> {
    let side = square_side(h, w, side_frac);
    let offset = square_side(h, w, offset_frac);
    square_at(h, w, side, offset, offset, color)
}

/// Square at a uniformly random position that keeps the patch inside.
pub fn make_random_square(
    h: usize,
    w: usize,
    side_frac: f32,
    color: [f32; 3],
    rng: &mut SplitMix64,
) -> Result<TriggerPattern> {
    let side = square_side(h, w, side_frac);
    if side < 1 || side > h || side > w {
        return Err(Error::InvalidArgument(format!(
            "square of side {side} does not fit in {h}x{w}"
        )));
    }
    let top = rng.below(h - side + 1);
    let left = rng.below(w - side + 1);
    square_at(h, w, side, top, left, color)
}

/// Full-image horizontal sine: every channel at (i, j) is 0.4 sin(0.05 pi j).
pub fn make_sine(h: usize, w: usize) -> Result<TriggerPattern> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("sine trigger needs a non-empty image".into()));
    }
    let mut values = Tensor::zeros(&[h, w, 3]);
    for j in 0..w {
        let v = 0.4 * fmath::sin(0.05 * core::f32::consts::PI * j as f32);
        for i in 0..h {
            for c in 0..3 {
                values.set3(i, j, c, v);
            }
        }
    }
    Ok(TriggerPattern { values, mask: Tensor::zeros(&[h, w, 3]) })
}

/// Low-variance trigger fit: which components qualified and which trailing
/// ones the reference was projected onto, plus the underlying PCA.
#[derive(Debug, Clone)]
pub struct LowVarianceFit {
    pub pattern: TriggerPattern,
    pub pca: PcaFit,
    /// Indices (into `pca.components`) the reference was projected onto.
    pub selected: Vec<usize>,
}

/// Builds the low-variance pattern: PCA on flattened training images, keep
/// components whose individual explained-variance ratio meets `threshold`,
/// project the held-out reference onto the trailing (lowest-variance) half
/// of that set, reconstruct through the mean, clip to [0, 1].
pub fn fit_low_variance(
    train_images: &[&Tensor],
    reference: &Tensor,
    threshold: f64,
) -> Result<LowVarianceFit> {
    if train_images.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "low-variance fit needs at least 2 training images, got {}",
            train_images.len()
        )));
    }
    let shape = reference.shape().to_vec();
    for t in train_images {
        if t.shape() != shape {
            return Err(Error::ShapeMismatch {
                op: "fit_low_variance",
                lhs: shape.clone(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    let rows: Vec<Vec<f64>> = train_images
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    let fit = pca::fit(&rows)?;

    let qualifying: Vec<usize> = fit
        .explained_ratio
        .iter()
        .enumerate()
        .filter(|&(_, &r)| r >= threshold)
        .map(|(i, _)| i)
        .collect();
    if qualifying.is_empty() {
        let max_ratio = fit.explained_ratio.iter().cloned().fold(0.0f64, f64::max);
        return Err(Error::InvalidArgument(format!(
            "no principal component reaches the {threshold} variance-ratio threshold \
             (max observed ratio {max_ratio})"
        )));
    }
    // Components are variance-descending, so the qualifying set is a prefix;
    // its trailing half (at least one) are the low-variance directions.
    let tail = (qualifying.len() / 2).max(1);
    let selected = qualifying[qualifying.len() - tail..].to_vec();

    let x: Vec<f64> = reference.data().iter().map(|&v| v as f64).collect();
    let coeffs = fit.project(&x, &selected);
    let recon = fit.reconstruct(&coeffs, &selected);
    let mut values = Tensor::new(
        shape.clone(),
        recon.iter().map(|&v| (v as f32).clamp(0.0, 1.0)).collect(),
    )?;
    values.clamp_in_place(0.0, 1.0);
    Ok(LowVarianceFit {
        pattern: TriggerPattern { values, mask: Tensor::zeros(&shape) },
        pca: fit,
        selected,
    })
}

/// A spec plus, for deterministic kinds, the realized pattern. Random-square
/// placement is sampled per poisoned image through [`Trigger::pattern_for`].
#[derive(Debug, Clone)]
pub struct Trigger {
    pub spec: TriggerSpec,
    fixed: Option<TriggerPattern>,
}

impl Trigger {
    pub fn fixed(spec: TriggerSpec, pattern: TriggerPattern) -> Self {
        Trigger { spec, fixed: Some(pattern) }
    }

    pub fn square(h: usize, w: usize, spec: TriggerSpec) -> Result<Self> {
        let pattern = make_square(h, w, spec.side_frac, spec.offset_frac, spec.color)?;
        Ok(Trigger { spec, fixed: Some(pattern) })
    }

    pub fn random_square(spec: TriggerSpec) -> Self {
        Trigger { spec, fixed: None }
    }

    pub fn sine(h: usize, w: usize, spec: TriggerSpec) -> Result<Self> {
        let pattern = make_sine(h, w)?;
        Ok(Trigger { spec, fixed: Some(pattern) })
    }

    pub fn low_variance(spec: TriggerSpec, fit: LowVarianceFit) -> Self {
        Trigger { spec, fixed: Some(fit.pattern) }
    }

    /// The pattern to embed into one image of the given size.
    pub fn pattern_for(&self, h: usize, w: usize, rng: &mut SplitMix64) -> Result<TriggerPattern> {
        match &self.fixed {
            Some(p) => {
                if p.dims() != (h, w) {
                    return Err(Error::ShapeMismatch {
                        op: "pattern_for",
                        lhs: alloc::vec![h, w],
                        rhs: p.values.shape().to_vec(),
                    });
                }
                Ok(p.clone())
            }
            None => make_random_square(h, w, self.spec.side_frac, self.spec.color, rng),
        }
    }
}

/// Blend-and-mask embedding; masked pixels are copied verbatim, everything
/// else is clipped to [0, 1] after the blend. Provenance becomes poisoned
/// with the image's current label as source class; the label is untouched.
pub fn embed(image: &LabeledImage, spec: &TriggerSpec, pattern: &TriggerPattern) -> Result<LabeledImage> {
    if image.pixels.shape() != pattern.values.shape()
        || pattern.values.shape() != pattern.mask.shape()
    {
        return Err(Error::ShapeMismatch {
            op: "embed",
            lhs: image.pixels.shape().to_vec(),
            rhs: pattern.values.shape().to_vec(),
        });
    }
    let alpha = spec.alpha;
    let x = image.pixels.data();
    let t = pattern.values.data();
    let m = pattern.mask.data();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        if m[i] >= 1.0 {
            out.push(x[i]);
        } else {
            let blended = (1.0 - alpha) * x[i] + alpha * t[i];
            let v = blended * (1.0 - m[i]) + x[i] * m[i];
            out.push(v.clamp(0.0, 1.0));
        }
    }
    let pixels = Tensor::new(image.pixels.shape().to_vec(), out)?;
    Ok(LabeledImage {
        id: image.id,
        pixels,
        label: image.label,
        provenance: Provenance::Poisoned { source_class: image.label, trigger: spec.kind },
    })
}
