use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    coefficients, Conditioning, Denoiser, DiffusionError, Guidance, GuidanceMode, LatentGrid, NoiseLevelDistribution,
    SIGMA_DATA,
};
use crate::par::Execution;

/// Noise levels visited by the sampler, from `σ_max` down. Strictly
/// decreasing and positive, except that the last level may be zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSchedule {
    sigmas: Vec<f64>,
}

impl SigmaSchedule {
    pub fn new(sigmas: Vec<f64>) -> Result<Self, DiffusionError> {
        if sigmas.len() < 2 {
            return Err(DiffusionError::InvalidParameter(
                "schedule needs at least two levels".into(),
            ));
        }
        let last = sigmas.len() - 1;
        for (i, s) in sigmas.iter().enumerate() {
            let ok = s.is_finite() && (*s > 0.0 || (i == last && *s == 0.0));
            if !ok {
                return Err(DiffusionError::InvalidParameter(format!(
                    "σ[{i}] = {s} is not a valid noise level"
                )));
            }
        }
        if let Some(i) = sigmas.windows(2).position(|p| p[1] >= p[0]) {
            return Err(DiffusionError::InvalidParameter(format!(
                "schedule not strictly decreasing at index {}",
                i + 1
            )));
        }
        Ok(SigmaSchedule { sigmas })
    }

    /// `σ_i = (σ_max^{1/ρ} + i/T (σ_min^{1/ρ} - σ_max^{1/ρ}))^ρ` for `i = 0..=T`.
    pub fn karras(steps: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<Self, DiffusionError> {
        if steps == 0 {
            return Err(DiffusionError::InvalidParameter("steps must be at least 1".into()));
        }
        if !(sigma_min > 0.0 && sigma_max > sigma_min && sigma_max.is_finite()) {
            return Err(DiffusionError::InvalidParameter(format!(
                "need 0 < σ_min < σ_max, got ({sigma_min}, {sigma_max})"
            )));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(DiffusionError::InvalidParameter(format!(
                "ρ must be positive, got {rho}"
            )));
        }
        let (a, b) = (sigma_max.powf(1.0 / rho), sigma_min.powf(1.0 / rho));
        let sigmas = (0..=steps)
            .map(|i| (a + i as f64 / steps as f64 * (b - a)).powf(rho))
            .collect();
        SigmaSchedule::new(sigmas)
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Number of Euler steps, `T`.
    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigmas[0]
    }
}

/// First-order step of the probability-flow ODE from `σ_t` to `σ_prev`:
/// `Z + (Z - D) / σ_t (σ_prev - σ_t)`.
pub fn euler_step(
    z_t: &LatentGrid,
    denoised: &LatentGrid,
    sigma_t: f64,
    sigma_prev: f64,
) -> Result<LatentGrid, DiffusionError> {
    if !(sigma_t > 0.0) {
        return Err(DiffusionError::InvalidParameter(format!(
            "Euler step needs σ_t > 0, got {sigma_t}"
        )));
    }
    z_t.ensure_same_shape(denoised)?;
    if sigma_prev == 0.0 {
        return Ok(denoised.clone());
    }
    let k = (sigma_prev - sigma_t) / sigma_t;
    Ok(z_t.zip_map(denoised, |z, d| (z - d) * k + z))
}

/// Deterministic Euler sampler. Draws the initial `σ_max ε` in storage order
/// (the only random draws) and applies guidance at every step.
pub fn sample(
    denoiser: &dyn Denoiser,
    cond: &Conditioning,
    schedule: &SigmaSchedule,
    guidance: &Guidance,
    shape: [usize; 4],
    rng: &mut impl Rng,
    exec: Execution,
) -> Result<LatentGrid, DiffusionError> {
    guidance.validate()?;
    let mut z = LatentGrid::randn(shape, rng).scaled(schedule.sigma_max());
    for (step, pair) in schedule.sigmas().windows(2).enumerate() {
        let denoised = guidance.apply(denoiser, &z, pair[0], cond, exec)?;
        z = euler_step(&z, &denoised, pair[0], pair[1])?;
        if !z.is_finite() {
            return Err(DiffusionError::Divergence(format!(
                "non-finite latent after step {} (σ = {})",
                step + 1,
                pair[1]
            )));
        }
    }
    Ok(z)
}

/// Sampler and noise configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    /// Text guidance weight.
    pub w1: f64,
    /// Pose guidance weight.
    pub w2: f64,
    /// CFG-rescale strength φ.
    pub rescale: f64,
    pub seed: u64,
    pub p_mean: f64,
    pub p_std: f64,
    pub sigma_data: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 32,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            w1: 1.0,
            w2: 0.0,
            rescale: 0.7,
            seed: 0,
            p_mean: NoiseLevelDistribution::MULTI_VIEW.p_mean,
            p_std: NoiseLevelDistribution::MULTI_VIEW.p_std,
            sigma_data: SIGMA_DATA,
        }
    }
}

impl SamplerConfig {
    pub fn schedule(&self) -> Result<SigmaSchedule, DiffusionError> {
        SigmaSchedule::karras(self.steps, self.sigma_min, self.sigma_max, self.rho)
    }

    pub fn guidance(&self) -> Guidance {
        Guidance {
            mode: GuidanceMode::Hybrid {
                w1: self.w1,
                w2: self.w2,
            },
            rescale: self.rescale,
        }
    }

    pub fn noise(&self) -> NoiseLevelDistribution {
        NoiseLevelDistribution {
            p_mean: self.p_mean,
            p_std: self.p_std,
        }
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        self.schedule()?;
        self.guidance().validate()?;
        self.noise().validate()?;
        coefficients(1.0, self.sigma_data)?;
        Ok(())
    }
}
