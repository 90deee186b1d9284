use serde::{Deserialize, Serialize};

use super::{Conditioning, Denoiser, DiffusionError, LatentGrid};
use crate::par::{self, Execution};

/// Naive classifier-free guidance `w cond - (w - 1) uncond`, which equals
/// `uncond + w (cond - uncond)`.
pub fn guide_naive(cond: &LatentGrid, uncond: &LatentGrid, w: f64) -> Result<LatentGrid, DiffusionError> {
    cond.ensure_same_shape(uncond)?;
    Ok(cond.zip_map(uncond, |c, u| w * c - (w - 1.0) * u))
}

/// Hybrid guidance `full + w1 (full - pose_only) + w2 (full - text_only)`.
pub fn guide_hybrid(
    full: &LatentGrid,
    pose_only: &LatentGrid,
    text_only: &LatentGrid,
    w1: f64,
    w2: f64,
) -> Result<LatentGrid, DiffusionError> {
    full.ensure_same_shape(pose_only)?;
    full.ensure_same_shape(text_only)?;
    let mut out = full.clone();
    for ((o, p), t) in out
        .as_mut_slice()
        .iter_mut()
        .zip(pose_only.as_slice())
        .zip(text_only.as_slice())
    {
        let f = *o;
        *o = f + w1 * (f - p) + w2 * (f - t);
    }
    Ok(out)
}

/// Guidance rescale: per view and channel, with `r = std(cond) / std(guided)`
/// over spatial positions, returns `φ r guided + (1 - φ) guided`. Channels whose
/// guided std is below 1e-12 pass through unchanged.
pub fn cfg_rescale(guided: &LatentGrid, cond: &LatentGrid, phi: f64) -> Result<LatentGrid, DiffusionError> {
    guided.ensure_same_shape(cond)?;
    let [views, h, w, channels] = guided.shape();
    let mut out = guided.clone();
    for v in 0..views {
        for c in 0..channels {
            let sg = spatial_std(guided, v, c, h, w);
            if sg < 1e-12 {
                continue;
            }
            let r = spatial_std(cond, v, c, h, w) / sg;
            let factor = phi * r + (1.0 - phi);
            for y in 0..h {
                for x in 0..w {
                    out.set(v, y, x, c, guided.get(v, y, x, c) * factor);
                }
            }
        }
    }
    Ok(out)
}

/// Population standard deviation of one view/channel slice.
pub(crate) fn spatial_std(g: &LatentGrid, v: usize, c: usize, h: usize, w: usize) -> f64 {
    let n = (h * w) as f64;
    let mut mean = 0.0;
    for y in 0..h {
        for x in 0..w {
            mean += g.get(v, y, x, c);
        }
    }
    mean /= n;
    let mut var = 0.0;
    for y in 0..h {
        for x in 0..w {
            let d = g.get(v, y, x, c) - mean;
            var += d * d;
        }
    }
    (var / n).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum GuidanceMode {
    /// Plain conditional prediction.
    Conditional,
    /// Text guidance against the text-dropped prediction.
    Naive { w: f64 },
    /// Separate text (`w1`) and pose (`w2`) guidance.
    Hybrid { w1: f64, w2: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Guidance {
    pub mode: GuidanceMode,
    /// CFG-rescale strength φ in [0, 1]; 0 disables rescaling.
    pub rescale: f64,
}

impl Default for Guidance {
    fn default() -> Self {
        Guidance {
            mode: GuidanceMode::Conditional,
            rescale: 0.0,
        }
    }
}

impl Guidance {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        let weights = match self.mode {
            GuidanceMode::Conditional => vec![],
            GuidanceMode::Naive { w } => vec![w],
            GuidanceMode::Hybrid { w1, w2 } => vec![w1, w2],
        };
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(DiffusionError::InvalidParameter(format!(
                "guidance weights must be non-negative, got {:?}",
                self.mode
            )));
        }
        if !(0.0..=1.0).contains(&self.rescale) {
            return Err(DiffusionError::InvalidParameter(format!(
                "rescale φ must lie in [0, 1], got {}",
                self.rescale
            )));
        }
        Ok(())
    }

    /// Guided prediction at one noise level. Branch evaluations run
    /// concurrently under a parallel policy.
    pub fn apply(
        &self,
        denoiser: &dyn Denoiser,
        z: &LatentGrid,
        sigma: f64,
        cond: &Conditioning,
        exec: Execution,
    ) -> Result<LatentGrid, DiffusionError> {
        let full_of = || denoiser.denoise(z, sigma, cond);
        let (full, guided) = match self.mode {
            GuidanceMode::Conditional => {
                let full = full_of();
                (full.clone(), full)
            }
            GuidanceMode::Naive { w } => {
                let (full, uncond) = par::join(exec, full_of, || denoiser.denoise(z, sigma, &cond.without_text()));
                let guided = guide_naive(&full, &uncond, w)?;
                (full, guided)
            }
            GuidanceMode::Hybrid { w1, w2 } => {
                let (full, (pose_only, text_only)) = par::join(exec, full_of, || {
                    par::join(
                        exec,
                        || denoiser.denoise(z, sigma, &cond.without_text()),
                        || denoiser.denoise(z, sigma, &cond.without_pose()),
                    )
                });
                let guided = guide_hybrid(&full, &pose_only, &text_only, w1, w2)?;
                (full, guided)
            }
        };
        if self.rescale > 0.0 {
            cfg_rescale(&guided, &full, self.rescale)
        } else {
            Ok(guided)
        }
    }
}
