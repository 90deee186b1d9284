//! EDM-style continuous-time diffusion in latent space: noise-level sampling,
//! forward noising, denoiser preconditioning, the DSM objective, an Euler
//! sampler for the probability-flow ODE, and classifier-free guidance.

mod guidance;
mod sampler;

pub use guidance::{cfg_rescale, guide_hybrid, guide_naive, Guidance, GuidanceMode};
pub use sampler::{euler_step, sample, SamplerConfig, SigmaSchedule};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::RayMap;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("latent shape mismatch: {0:?} vs {1:?}")]
    Shape([usize; 4], [usize; 4]),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
}

/// Multi-view latents stored as `views x height x width x channels`, row major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    views: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl LatentGrid {
    pub fn zeros(views: usize, height: usize, width: usize, channels: usize) -> Self {
        LatentGrid {
            views,
            height,
            width,
            channels,
            data: vec![0.0; views * height * width * channels],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self, DiffusionError> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(DiffusionError::InvalidParameter(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::InvalidParameter("non-finite latent entry".into()));
        }
        let [views, height, width, channels] = shape;
        Ok(LatentGrid {
            views,
            height,
            width,
            channels,
            data,
        })
    }

    /// Independent standard normal entries, drawn in storage order.
    pub fn randn(shape: [usize; 4], rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let [views, height, width, channels] = shape;
        LatentGrid {
            views,
            height,
            width,
            channels,
            data,
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.views, self.height, self.width, self.channels]
    }
    pub fn views(&self) -> usize {
        self.views
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    fn offset(&self, v: usize, y: usize, x: usize) -> usize {
        ((v * self.height + y) * self.width + x) * self.channels
    }

    pub fn get(&self, v: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.offset(v, y, x) + c]
    }

    pub fn set(&mut self, v: usize, y: usize, x: usize, c: usize, value: f64) {
        let o = self.offset(v, y, x);
        self.data[o + c] = value;
    }

    /// Channel vector at one location.
    pub fn cell(&self, v: usize, y: usize, x: usize) -> &[f64] {
        let o = self.offset(v, y, x);
        &self.data[o..o + self.channels]
    }

    pub fn cell_mut(&mut self, v: usize, y: usize, x: usize) -> &mut [f64] {
        let o = self.offset(v, y, x);
        &mut self.data[o..o + self.channels]
    }

    /// Latents of view `v` as a single-view grid.
    pub fn view(&self, v: usize) -> LatentGrid {
        let n = self.height * self.width * self.channels;
        LatentGrid {
            views: 1,
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data[v * n..(v + 1) * n].to_vec(),
        }
    }

    /// Concatenates single- or multi-view grids along the view axis.
    pub fn stack(grids: &[LatentGrid]) -> Result<LatentGrid, DiffusionError> {
        let first = grids
            .first()
            .ok_or_else(|| DiffusionError::InvalidParameter("no grids to stack".into()))?;
        let mut data = Vec::new();
        let mut views = 0;
        for g in grids {
            if g.shape()[1..] != first.shape()[1..] {
                return Err(DiffusionError::Shape(first.shape(), g.shape()));
            }
            views += g.views;
            data.extend_from_slice(&g.data);
        }
        Ok(LatentGrid {
            views,
            height: first.height,
            width: first.width,
            channels: first.channels,
            data,
        })
    }

    pub fn ensure_same_shape(&self, other: &LatentGrid) -> Result<(), DiffusionError> {
        if self.shape() != other.shape() {
            return Err(DiffusionError::Shape(self.shape(), other.shape()));
        }
        Ok(())
    }

    /// Element-wise `a * self + b * other`.
    pub fn axpby(&self, a: f64, other: &LatentGrid, b: f64) -> Result<LatentGrid, DiffusionError> {
        self.ensure_same_shape(other)?;
        Ok(self.zip_map(other, |x, y| a * x + b * y))
    }

    pub fn scaled(&self, a: f64) -> LatentGrid {
        self.map(|x| a * x)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentGrid {
        self.with_data(self.data.iter().map(|&x| f(x)).collect())
    }

    /// Element-wise combination; callers check shapes.
    pub(crate) fn zip_map(&self, other: &LatentGrid, f: impl Fn(f64, f64) -> f64) -> LatentGrid {
        debug_assert_eq!(self.shape(), other.shape());
        self.with_data(self.data.iter().zip(&other.data).map(|(&x, &y)| f(x, y)).collect())
    }

    fn with_data(&self, data: Vec<f64>) -> LatentGrid {
        LatentGrid {
            views: self.views,
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Log-normal distribution of training noise levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevelDistribution {
    pub p_mean: f64,
    pub p_std: f64,
}

impl NoiseLevelDistribution {
    /// Multi-view preset.
    pub const MULTI_VIEW: NoiseLevelDistribution = NoiseLevelDistribution {
        p_mean: 1.5,
        p_std: 2.0,
    };
    /// Single-view preset.
    pub const SINGLE_VIEW: NoiseLevelDistribution = NoiseLevelDistribution {
        p_mean: -0.5,
        p_std: 1.2,
    };

    pub fn new(p_mean: f64, p_std: f64) -> Result<Self, DiffusionError> {
        let d = NoiseLevelDistribution { p_mean, p_std };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        if !self.p_mean.is_finite() || !(self.p_std > 0.0 && self.p_std.is_finite()) {
            return Err(DiffusionError::InvalidParameter(format!(
                "noise distribution needs finite P_mean and P_std > 0, got ({}, {})",
                self.p_mean, self.p_std
            )));
        }
        Ok(())
    }

    /// `σ = exp(P_mean + P_std z)` with one standard normal draw.
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        (self.p_mean + self.p_std * z).exp()
    }
}

/// Forward noising `Z_t = Z0 + σ ε`.
pub fn add_noise(z0: &LatentGrid, sigma: f64, eps: &LatentGrid) -> Result<LatentGrid, DiffusionError> {
    z0.axpby(1.0, eps, sigma)
}

/// Conditioning inputs. `None` marks a dropped condition: the null text
/// embedding is the zero vector and the null pose is a zero ray map.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Conditioning {
    pub text: Option<Vec<f64>>,
    pub poses: Option<Vec<RayMap>>,
}

impl Conditioning {
    pub fn new(text: Vec<f64>, poses: Vec<RayMap>) -> Self {
        Conditioning {
            text: Some(text),
            poses: Some(poses),
        }
    }

    pub fn without_text(&self) -> Self {
        Conditioning {
            text: None,
            poses: self.poses.clone(),
        }
    }

    pub fn without_pose(&self) -> Self {
        Conditioning {
            text: self.text.clone(),
            poses: None,
        }
    }

    /// Text embedding with the null embedding substituted when dropped.
    pub fn text_or_null(&self, dim: usize) -> Vec<f64> {
        self.text.clone().unwrap_or_else(|| vec![0.0; dim])
    }
}

/// One-hot embedding of a class label, the toy stand-in for a text encoder.
pub fn label_embedding(label: usize, vocabulary: usize) -> Vec<f64> {
    let mut e = vec![0.0; vocabulary];
    if label < vocabulary {
        e[label] = 1.0;
    }
    e
}

/// Independently drops text with probability `p_text`, then pose with
/// probability `p_pose`; exactly two uniform draws in that order.
pub fn cond_dropout(cond: &Conditioning, rng: &mut impl Rng, p_text: f64, p_pose: f64) -> Conditioning {
    let drop_text = rng.gen::<f64>() < p_text;
    let drop_pose = rng.gen::<f64>() < p_pose;
    Conditioning {
        text: if drop_text { None } else { cond.text.clone() },
        poses: if drop_pose { None } else { cond.poses.clone() },
    }
}

/// Default dropout probability for each condition during training.
pub const COND_DROPOUT: f64 = 0.1;

/// A full denoiser `Ẑ0 = G(Z_t; σ, y, R)`.
pub trait Denoiser: Sync {
    fn denoise(&self, z: &LatentGrid, sigma: f64, cond: &Conditioning) -> LatentGrid;
}

/// Raw network `F(c_in Z_t; c_noise, y, R)` wrapped by [`Preconditioned`].
pub trait RawNetwork: Sync {
    fn forward(&self, z_in: &LatentGrid, c_noise: f64, cond: &Conditioning) -> LatentGrid;
}

/// EDM preconditioning coefficients at one noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

/// Default data standard deviation for preconditioning.
pub const SIGMA_DATA: f64 = 0.5;

pub fn coefficients(sigma: f64, sigma_data: f64) -> Result<Coefficients, DiffusionError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(DiffusionError::InvalidParameter(format!(
            "σ must be positive, got {sigma}"
        )));
    }
    if !(sigma_data > 0.0 && sigma_data.is_finite()) {
        return Err(DiffusionError::InvalidParameter(format!(
            "σ_data must be positive, got {sigma_data}"
        )));
    }
    let s2 = sigma * sigma + sigma_data * sigma_data;
    Ok(Coefficients {
        c_skip: sigma_data * sigma_data / s2,
        c_out: sigma * sigma_data / s2.sqrt(),
        c_in: 1.0 / s2.sqrt(),
        c_noise: sigma.ln() / 4.0,
    })
}

/// `G = c_skip Z_t + c_out F(c_in Z_t; c_noise, y, R)`.
#[derive(Debug, Clone)]
pub struct Preconditioned<F> {
    pub raw: F,
    pub sigma_data: f64,
}

impl<F: RawNetwork> Preconditioned<F> {
    pub fn new(raw: F, sigma_data: f64) -> Result<Self, DiffusionError> {
        coefficients(1.0, sigma_data)?;
        Ok(Preconditioned { raw, sigma_data })
    }
}

impl<F: RawNetwork> Denoiser for Preconditioned<F> {
    /// Panics if `sigma` is not positive.
    fn denoise(&self, z: &LatentGrid, sigma: f64, cond: &Conditioning) -> LatentGrid {
        let c = coefficients(sigma, self.sigma_data).expect("σ > 0 for preconditioned denoiser");
        let f = self.raw.forward(&z.scaled(c.c_in), c.c_noise, cond);
        z.zip_map(&f, |zi, fi| c.c_skip * zi + c.c_out * fi)
    }
}

/// DSM weighting `λ(σ) = (1 + σ²) / σ²`.
pub fn dsm_weight(sigma: f64) -> f64 {
    (1.0 + sigma * sigma) / (sigma * sigma)
}

/// One DSM loss evaluation with the noise level it used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DsmSample {
    pub loss: f64,
    pub sigma: f64,
}

/// `λ(σ) mean((G(Z0 + σε) - Z0)²)`; draws σ first, then ε in storage order.
pub fn dsm_loss(
    denoiser: &dyn Denoiser,
    z0: &LatentGrid,
    cond: &Conditioning,
    dist: &NoiseLevelDistribution,
    rng: &mut impl Rng,
) -> DsmSample {
    let sigma = dist.sample(rng);
    let eps = LatentGrid::randn(z0.shape(), rng);
    let zt = z0.zip_map(&eps, |a, e| a + sigma * e);
    let pred = denoiser.denoise(&zt, sigma, cond);
    DsmSample {
        loss: dsm_weight(sigma) * mean_sq_diff(&pred, z0),
        sigma,
    }
}

pub(crate) fn mean_sq_diff(a: &LatentGrid, b: &LatentGrid) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64
}

#[cfg(test)]
mod tests;
