//! Image and depth losses, evaluation metrics and metric reports.

mod depth;
mod report;
mod ssim;

pub use depth::{
    absrel, align_scale_shift, aligned_depth_metrics, delta1, depth_loss, depth_loss_grad, DepthAlignment,
    DepthMetrics, DELTA1_THRESHOLD,
};
pub use report::{MetricReport, MetricRow};
pub use ssim::{ssim, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::Image;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize, usize), (usize, usize, usize)),
    #[error("image {width}x{height} is smaller than the {window}x{window} SSIM window")]
    TooSmall { width: usize, height: usize, window: usize },
    #[error("degenerate depth alignment: {0}")]
    Degenerate(String),
    #[error("empty validity mask")]
    EmptyMask,
    #[error("invalid loss configuration: {0}")]
    Config(String),
}

fn same_shape(a: &Image, b: &Image) -> Result<(), MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::Shape(a.shape(), b.shape()));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    same_shape(a, b)?;
    let n = a.as_slice().len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / n as f64)
}

/// PSNR in dB for images in [0, 1], capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mse: f64,
    pub perceptual: f64,
    pub depth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mse: 1.0,
            perceptual: 0.0,
            depth: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let w = [self.mse, self.perceptual, self.depth];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(MetricsError::Config(format!("weights must be non-negative, got {w:?}")));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(MetricsError::Config("all loss weights are zero".into()));
        }
        Ok(())
    }
}

/// Pluggable perceptual image loss (e.g. a VGG feature distance).
pub trait PerceptualLoss {
    fn loss(&self, rendered: &Image, target: &Image) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub perceptual: f64,
    pub depth: f64,
}

/// A rendered/observed depth pair with optional validity mask.
pub struct DepthPair<'a> {
    pub predicted: &'a Image,
    pub target: &'a Image,
    pub mask: Option<&'a [bool]>,
}

/// Weighted GS-VAE objective. Each term is averaged over its pairs. With no
/// perceptual plug-in the perceptual term is 0 and a warning is logged if its
/// weight is positive.
pub fn gsvae_loss(
    render_pairs: &[(&Image, &Image)],
    depth_pairs: &[DepthPair<'_>],
    weights: &LossWeights,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<LossBreakdown, MetricsError> {
    weights.validate()?;
    let mean_of = |xs: Vec<f64>| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    let mse_term = mean_of(render_pairs.iter().map(|(r, t)| mse(r, t)).collect::<Result<_, _>>()?);
    let perceptual_term = match perceptual {
        Some(p) => mean_of(render_pairs.iter().map(|(r, t)| p.loss(r, t)).collect()),
        None => {
            if weights.perceptual > 0.0 {
                log::warn!("perceptual loss weight is positive but no perceptual network is installed; term set to 0");
            }
            0.0
        }
    };
    let depth_term = if weights.depth > 0.0 {
        mean_of(
            depth_pairs
                .iter()
                .map(|d| depth_loss(d.predicted, d.target, d.mask))
                .collect::<Result<_, _>>()?,
        )
    } else {
        0.0
    };
    Ok(LossBreakdown {
        total: weights.mse * mse_term + weights.perceptual * perceptual_term + weights.depth * depth_term,
        mse: mse_term,
        perceptual: perceptual_term,
        depth: depth_term,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mse_and_psnr_basics() {
        let a = Image::filled(4, 4, 3, 0.0);
        let b = Image::filled(4, 4, 3, 1.0);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert_eq!(mse(&a, &b).unwrap(), 1.0);
        assert_eq!(psnr(&a, &b).unwrap(), 0.0);
        assert!(matches!(mse(&a, &Image::new(4, 3, 3)), Err(MetricsError::Shape(..))));
    }

    #[test]
    fn mse_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Image::from_fn(7, 5, 3, |_, _, _| rng.gen());
        let b = Image::from_fn(7, 5, 3, |_, _, _| rng.gen());
        let mut sum = 0.0;
        for y in 0..5 {
            for x in 0..7 {
                for c in 0..3 {
                    sum += (a.get(x, y, c) - b.get(x, y, c)).powi(2);
                }
            }
        }
        assert!((mse(&a, &b).unwrap() - sum / 105.0).abs() < 1e-12);
    }

    struct Fixed(f64);
    impl PerceptualLoss for Fixed {
        fn loss(&self, _: &Image, _: &Image) -> f64 {
            self.0
        }
    }

    #[test]
    fn gsvae_weighted_sum() {
        let a = Image::filled(4, 4, 3, 0.2);
        let b = Image::filled(4, 4, 3, 0.5);
        let d = Image::from_fn(4, 4, 1, |x, y, _| 1.0 + x as f64 + 0.5 * y as f64);
        let t = Image::from_fn(4, 4, 1, |x, y, _| {
            2.0 + 3.0 * d.get(x, y, 0) + if (x + y) % 2 == 0 { 0.1 } else { -0.1 }
        });
        let pairs = [DepthPair {
            predicted: &d,
            target: &t,
            mask: None,
        }];
        let only_mse = LossWeights {
            mse: 1.0,
            perceptual: 0.0,
            depth: 0.0,
        };
        assert_eq!(gsvae_loss(&[(&a, &a)], &[], &only_mse, None).unwrap().total, 0.0);

        let w = LossWeights {
            mse: 1.0,
            perceptual: 0.0,
            depth: 1.0,
        };
        let got = gsvae_loss(&[(&a, &b)], &pairs, &w, None).unwrap();
        let expect = mse(&a, &b).unwrap() + depth_loss(&d, &t, None).unwrap();
        assert!((got.total - expect).abs() < 1e-15);

        let w = LossWeights {
            mse: 0.5,
            perceptual: 2.0,
            depth: 0.0,
        };
        let got = gsvae_loss(&[(&a, &b)], &[], &w, Some(&Fixed(0.25))).unwrap();
        assert!((got.total - (0.5 * 0.09 + 0.5)).abs() < 1e-15);
        // Absent plug-in contributes nothing.
        let got = gsvae_loss(&[(&a, &b)], &[], &w, None).unwrap();
        assert_eq!(got.perceptual, 0.0);

        let zero = LossWeights {
            mse: 0.0,
            perceptual: 0.0,
            depth: 0.0,
        };
        assert!(matches!(
            gsvae_loss(&[], &[], &zero, None),
            Err(MetricsError::Config(_))
        ));
    }
}
