use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{NetsError, OptimizerKind, TinyNet};
use crate::diffusion::{coefficients, dsm_weight, Conditioning, LatentGrid, NoiseLevelDistribution, RawNetwork};

/// Loss above which training is aborted as divergent.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// Scalar raw network `F(c_in z, c_noise)` applied to every latent entry.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyDenoiser {
    pub net: TinyNet,
}

impl TinyDenoiser {
    /// Two inputs (scaled value, `c_noise`), one output.
    pub fn new(hidden: &[usize], rng: &mut impl Rng) -> Result<Self, NetsError> {
        let mut sizes = vec![2];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(TinyDenoiser {
            net: TinyNet::random(&sizes, 1.0, rng)?,
        })
    }

    pub fn eval(&self, z_in: f64, c_noise: f64) -> f64 {
        self.net
            .forward(&[z_in, c_noise])
            .expect("scalar denoiser has two inputs")[0]
    }

    /// Preconditioned denoiser output for one scalar.
    pub fn denoise_scalar(&self, z: f64, sigma: f64, sigma_data: f64) -> f64 {
        let c = coefficients(sigma, sigma_data).expect("σ > 0");
        c.c_skip * z + c.c_out * self.eval(c.c_in * z, c.c_noise)
    }
}

impl RawNetwork for TinyDenoiser {
    fn forward(&self, z_in: &LatentGrid, c_noise: f64, _: &Conditioning) -> LatentGrid {
        z_in.map(|z| self.eval(z, c_noise))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DsmConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub noise: NoiseLevelDistribution,
    pub sigma_data: f64,
    pub optimizer: OptimizerKind,
}

impl Default for DsmConfig {
    fn default() -> Self {
        DsmConfig {
            steps: 20_000,
            batch: 64,
            lr: 0.02,
            noise: NoiseLevelDistribution::SINGLE_VIEW,
            sigma_data: crate::diffusion::SIGMA_DATA,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

/// Trains `model` with the DSM objective on scalar samples `data`. Each batch
/// element draws a data index, then σ, then ε. Returns the per-step batch loss.
pub fn train_dsm(
    model: &mut TinyDenoiser,
    data: &[f64],
    cfg: &DsmConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, NetsError> {
    if data.is_empty() || cfg.batch == 0 {
        return Err(NetsError::Invalid(
            "DSM training needs data and a positive batch".into(),
        ));
    }
    cfg.noise.validate().map_err(|e| NetsError::Invalid(e.to_string()))?;
    let mut opt = cfg.optimizer.build(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut grad = vec![0.0; model.net.num_params()];
    for step in 0..cfg.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let x0 = data[rng.gen_range(0..data.len())];
            let sigma = cfg.noise.sample(rng);
            let eps: f64 = rng.sample(StandardNormal);
            let c = coefficients(sigma, cfg.sigma_data).map_err(|e| NetsError::Invalid(e.to_string()))?;
            let z = x0 + sigma * eps;
            let trace = model.net.forward_trace(&[c.c_in * z, c.c_noise])?;
            let g = c.c_skip * z + c.c_out * trace.output()[0];
            let lambda = dsm_weight(sigma);
            loss += lambda * (g - x0) * (g - x0);
            let dy = 2.0 * lambda * c.c_out * (g - x0) / cfg.batch as f64;
            model.net.backward(&trace, &[dy], &mut grad)?;
        }
        loss /= cfg.batch as f64;
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(NetsError::Divergence { step, loss });
        }
        curve.push(loss);
        opt.step(model.net.params_mut(), &mut grad);
    }
    Ok(curve)
}

/// Trailing moving average with the given window (shorter at the start).
pub fn smooth(curve: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(curve.len());
    let mut sum = 0.0;
    for i in 0..curve.len() {
        sum += curve[i];
        if i >= w {
            sum -= curve[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}
