use rand::Rng;
use rand_distr::StandardNormal;

use super::checkpoint::{Checkpoint, NamedArray};
use super::codec::{pool_ray_map, LATENT_CHANNELS};
use super::NetsError;
use crate::camera::RayMap;
use crate::diffusion::LatentGrid;

/// Per-view token width: latent channels plus the pooled Plücker ray.
pub const FUSION_INPUTS: usize = LATENT_CHANNELS + RayMap::CHANNELS;

/// Single-head softmax attention across views at each latent location. The
/// projections are fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionLayer {
    key_dim: usize,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
}

fn matvec(w: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let n = x.len();
    (0..rows)
        .map(|r| w[r * n..(r + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

impl FusionLayer {
    pub fn new(key_dim: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (FUSION_INPUTS as f64).sqrt();
        let mut draw = |rows: usize| -> Vec<f64> {
            (0..rows * FUSION_INPUTS)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let wq = draw(key_dim);
        let wk = draw(key_dim);
        let wv = draw(LATENT_CHANNELS);
        FusionLayer { key_dim, wq, wk, wv }
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint) -> Result<(), NetsError> {
        ckpt.push(NamedArray::new(
            "fusion.wq",
            vec![self.key_dim, FUSION_INPUTS],
            self.wq.clone(),
        )?);
        ckpt.push(NamedArray::new(
            "fusion.wk",
            vec![self.key_dim, FUSION_INPUTS],
            self.wk.clone(),
        )?);
        ckpt.push(NamedArray::new(
            "fusion.wv",
            vec![LATENT_CHANNELS, FUSION_INPUTS],
            self.wv.clone(),
        )?);
        Ok(())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, NetsError> {
        let wq = ckpt.get("fusion.wq")?;
        let wk = ckpt.get("fusion.wk")?;
        let wv = ckpt.get("fusion.wv")?;
        let key_dim = wq.shape.first().copied().unwrap_or(0);
        if wq.shape != [key_dim, FUSION_INPUTS] || wk.shape != wq.shape || wv.shape != [LATENT_CHANNELS, FUSION_INPUTS]
        {
            return Err(NetsError::Checkpoint("fusion weight shapes do not match".into()));
        }
        Ok(FusionLayer {
            key_dim,
            wq: wq.data.clone(),
            wk: wk.data.clone(),
            wv: wv.data.clone(),
        })
    }

    /// Fused latents `Z̃` with the same shape as `latents`.
    pub fn fuse(&self, latents: &LatentGrid, raymaps: &[RayMap]) -> Result<LatentGrid, NetsError> {
        let [n, h, w, c] = latents.shape();
        if c != LATENT_CHANNELS || raymaps.len() != n {
            return Err(NetsError::Shape(format!(
                "fusion needs {LATENT_CHANNELS}-channel latents and one ray map per view, got {c} channels, {n} views, {} ray maps",
                raymaps.len()
            )));
        }
        let factor = raymaps.first().map_or(1, |r| r.width() / w.max(1));
        let mut pooled = Vec::with_capacity(n);
        for r in raymaps {
            if factor == 0 || r.width() != w * factor || r.height() != h * factor {
                return Err(NetsError::Shape(format!(
                    "ray map {}x{} does not upsample latent grid {w}x{h} by an integer factor",
                    r.width(),
                    r.height()
                )));
            }
            pooled.push(pool_ray_map(r, factor));
        }
        let scale = 1.0 / (self.key_dim as f64).sqrt();
        let mut out = LatentGrid::zeros(n, h, w, c);
        for y in 0..h {
            for x in 0..w {
                let tokens: Vec<Vec<f64>> = (0..n)
                    .map(|v| {
                        let mut t = latents.cell(v, y, x).to_vec();
                        t.extend_from_slice(&pooled[v][y * w + x]);
                        t
                    })
                    .collect();
                let q: Vec<Vec<f64>> = tokens.iter().map(|t| matvec(&self.wq, t, self.key_dim)).collect();
                let k: Vec<Vec<f64>> = tokens.iter().map(|t| matvec(&self.wk, t, self.key_dim)).collect();
                let val: Vec<Vec<f64>> = tokens.iter().map(|t| matvec(&self.wv, t, c)).collect();
                for i in 0..n {
                    let logits: Vec<f64> = k
                        .iter()
                        .map(|kj| scale * q[i].iter().zip(kj).map(|(a, b)| a * b).sum::<f64>())
                        .collect();
                    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
                    let z: f64 = e.iter().sum();
                    let cell = out.cell_mut(i, y, x);
                    for (j, vj) in val.iter().enumerate() {
                        let a = e[j] / z;
                        for ch in 0..c {
                            cell[ch] += a * vj[ch];
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Free-function form of [`FusionLayer::fuse`].
pub fn fuse_views(layer: &FusionLayer, latents: &LatentGrid, raymaps: &[RayMap]) -> Result<LatentGrid, NetsError> {
    layer.fuse(latents, raymaps)
}
