use serde::Serialize;

use super::{same_shape, MetricsError};
use crate::imaging::Image;

/// δ1 counts pixels with `max(p/t, t/p)` strictly below this.
pub const DELTA1_THRESHOLD: f64 = 1.25;

/// Affine map `scale * pred + shift` that best fits a target in least squares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DepthAlignment {
    pub scale: f64,
    pub shift: f64,
}

impl DepthAlignment {
    pub const IDENTITY: DepthAlignment = DepthAlignment { scale: 1.0, shift: 0.0 };

    pub fn apply(&self, pred: &Image) -> Image {
        pred.map(|p| self.scale * p + self.shift)
    }
}

fn check_mask(pred: &Image, mask: Option<&[bool]>) -> Result<(), MetricsError> {
    if let Some(m) = mask {
        if m.len() != pred.as_slice().len() {
            return Err(MetricsError::Shape(pred.shape(), (m.len(), 1, 1)));
        }
    }
    Ok(())
}

fn valid_pairs<'a>(
    pred: &'a Image,
    target: &'a Image,
    mask: Option<&'a [bool]>,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.as_slice()
        .iter()
        .zip(target.as_slice())
        .enumerate()
        .filter(move |(i, (p, t))| mask.is_none_or(|m| m[*i]) && p.is_finite() && t.is_finite())
        .map(|(_, (p, t))| (*p, *t))
}

/// Closed-form least-squares `(scale, shift)` over valid pixels.
pub fn align_scale_shift(pred: &Image, target: &Image, mask: Option<&[bool]>) -> Result<DepthAlignment, MetricsError> {
    same_shape(pred, target)?;
    check_mask(pred, mask)?;
    let (mut n, mut sp, mut st) = (0usize, 0.0, 0.0);
    for (p, t) in valid_pairs(pred, target, mask) {
        n += 1;
        sp += p;
        st += t;
    }
    if n < 2 {
        return Err(MetricsError::Degenerate(format!("{n} valid pixel(s), need at least 2")));
    }
    let (mp, mt) = (sp / n as f64, st / n as f64);
    let (mut sxx, mut sxy, mut spp) = (0.0, 0.0, 0.0);
    for (p, t) in valid_pairs(pred, target, mask) {
        let dp = p - mp;
        sxx += dp * dp;
        sxy += dp * (t - mt);
        spp += p * p;
    }
    if !(sxx > 1e-12 * spp.max(f64::MIN_POSITIVE)) {
        return Err(MetricsError::Degenerate("prediction is constant over the mask".into()));
    }
    let scale = sxy / sxx;
    Ok(DepthAlignment {
        scale,
        shift: mt - scale * mp,
    })
}

/// RMS residual after least-squares alignment of `pred` to `target`.
pub fn depth_loss(pred: &Image, target: &Image, mask: Option<&[bool]>) -> Result<f64, MetricsError> {
    let a = align_scale_shift(pred, target, mask)?;
    let (mut n, mut sum) = (0usize, 0.0);
    for (p, t) in valid_pairs(pred, target, mask) {
        let r = a.scale * p + a.shift - t;
        sum += r * r;
        n += 1;
    }
    Ok((sum / n as f64).sqrt())
}

/// [`depth_loss`] and its gradient with respect to every pixel of `pred`
/// (zero outside the mask). At the optimum the alignment parameters are
/// stationary, so `dL/dp_i = scale * r_i / (n L)`.
pub fn depth_loss_grad(pred: &Image, target: &Image, mask: Option<&[bool]>) -> Result<(f64, Vec<f64>), MetricsError> {
    let a = align_scale_shift(pred, target, mask)?;
    let loss = depth_loss(pred, target, mask)?;
    let n = valid_pairs(pred, target, mask).count() as f64;
    let mut grad = vec![0.0; pred.as_slice().len()];
    if loss > 0.0 {
        for (i, g) in grad.iter_mut().enumerate() {
            let (p, t) = (pred.as_slice()[i], target.as_slice()[i]);
            if mask.is_none_or(|m| m[i]) && p.is_finite() && t.is_finite() {
                *g = a.scale * (a.scale * p + a.shift - t) / (n * loss);
            }
        }
    }
    Ok((loss, grad))
}

fn positive_pairs<'a>(
    pred: &'a Image,
    target: &'a Image,
    mask: Option<&'a [bool]>,
) -> Result<Vec<(f64, f64)>, MetricsError> {
    same_shape(pred, target)?;
    check_mask(pred, mask)?;
    let pairs: Vec<_> = valid_pairs(pred, target, mask).filter(|(_, t)| *t > 0.0).collect();
    if pairs.is_empty() {
        return Err(MetricsError::EmptyMask);
    }
    Ok(pairs)
}

/// Mean of `|pred - target| / target` over valid pixels with positive target.
pub fn absrel(pred: &Image, target: &Image, mask: Option<&[bool]>) -> Result<f64, MetricsError> {
    let pairs = positive_pairs(pred, target, mask)?;
    Ok(pairs.iter().map(|(p, t)| (p - t).abs() / t).sum::<f64>() / pairs.len() as f64)
}

/// Fraction of valid pixels with `max(p/t, t/p) < 1.25`.
pub fn delta1(pred: &Image, target: &Image, mask: Option<&[bool]>) -> Result<f64, MetricsError> {
    let pairs = positive_pairs(pred, target, mask)?;
    let hits = pairs
        .iter()
        .filter(|(p, t)| *p > 0.0 && (p / t).max(t / p) < DELTA1_THRESHOLD)
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DepthMetrics {
    pub alignment: DepthAlignment,
    pub absrel: f64,
    pub delta1: f64,
    pub depth_loss: f64,
}

/// Aligns `pred` to `target` per scene, then evaluates AbsRel and δ1.
pub fn aligned_depth_metrics(
    pred: &Image,
    target: &Image,
    mask: Option<&[bool]>,
) -> Result<DepthMetrics, MetricsError> {
    let alignment = align_scale_shift(pred, target, mask)?;
    let aligned = alignment.apply(pred);
    Ok(DepthMetrics {
        alignment,
        absrel: absrel(&aligned, target, mask)?,
        delta1: delta1(&aligned, target, mask)?,
        depth_loss: depth_loss(pred, target, mask)?,
    })
}
