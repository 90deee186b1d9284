use nalgebra::Vector3;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::codec::{ray_distance, ToyCodec};
use super::decoder::{DecoderInput, ToyDecoder};
use super::fusion::FusionLayer;
use super::{NetsError, OptimizerKind, DIVERGENCE_LOSS};
use crate::camera::{compute_ray_map_with, Camera, RayMap};
use crate::diffusion::LatentGrid;
use crate::gaussians::{
    activate_with, channel, lift_to_world, sigmoid, ActivatedMap, DepthRange, GaussianScene, PixelGaussianMap,
    GAUSSIAN_CHANNELS,
};
use crate::imaging::Image;
use crate::metrics::{depth_loss_grad, LossWeights};
use crate::par::Execution;
use crate::renderer::Renderer;
use crate::synthetic::View;

/// The toy GS-VAE: a fixed codec, fixed cross-view fusion and a trainable
/// per-pixel Gaussian decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct GsVae {
    pub codec: ToyCodec,
    pub fusion: FusionLayer,
    pub decoder: ToyDecoder,
    pub exec: Execution,
}

/// Intermediate products of decoding one set of views.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub input: DecoderInput,
    pub raw: Vec<PixelGaussianMap>,
    pub activated: Vec<ActivatedMap>,
    /// View-major merge of all lifted primitives.
    pub scene: GaussianScene,
}

impl GsVae {
    pub fn range(&self) -> DepthRange {
        self.codec.range
    }

    /// Latents of observed views (their camera depth is converted to ray distance).
    pub fn encode(&self, views: &[View]) -> Result<LatentGrid, NetsError> {
        let ray: Vec<Image> = views
            .iter()
            .map(|v| ray_distance(&v.depth, &v.camera.intrinsics))
            .collect();
        let pairs: Vec<(&Image, &Image)> = views.iter().zip(&ray).map(|(v, d)| (&v.rgb, d)).collect();
        self.codec.encode_views(&pairs)
    }

    /// Fuses, decodes, activates, lifts and merges latents seen from `cameras`.
    pub fn decode(&self, latents: &LatentGrid, cameras: &[Camera]) -> Result<Decoded, NetsError> {
        let rays: Vec<RayMap> = cameras
            .iter()
            .map(|c| compute_ray_map_with(&c.intrinsics, &c.pose, self.exec))
            .collect();
        self.decode_with_rays(latents, cameras, &rays)
    }

    fn decode_with_rays(
        &self,
        latents: &LatentGrid,
        cameras: &[Camera],
        rays: &[RayMap],
    ) -> Result<Decoded, NetsError> {
        let fused = self.fusion.fuse(latents, rays)?;
        let input = DecoderInput::build(latents, &fused, rays)?;
        let raw = self.decoder.decode(&input, self.exec)?;
        let gerr = |e: crate::gaussians::GaussianError| NetsError::Invalid(e.to_string());
        let activated = raw
            .iter()
            .map(|m| activate_with(m, &self.codec.range, self.exec))
            .collect::<Result<Vec<_>, _>>()
            .map_err(gerr)?;
        let lifted = activated
            .iter()
            .zip(cameras)
            .map(|(a, c)| lift_to_world(a, &c.intrinsics, &c.pose))
            .collect::<Result<Vec<_>, _>>()
            .map_err(gerr)?;
        Ok(Decoded {
            input,
            raw,
            activated,
            scene: GaussianScene::from_views(lifted),
        })
    }

    /// Encodes and decodes observed views into a merged scene.
    pub fn reconstruct(&self, views: &[View]) -> Result<GaussianScene, NetsError> {
        let latents = self.encode(views)?;
        let cameras: Vec<Camera> = views.iter().map(|v| v.camera).collect();
        Ok(self.decode(&latents, &cameras)?.scene)
    }
}

/// One multi-view training scene with cached latents, rays and ray depths.
#[derive(Debug, Clone)]
pub struct TrainingScene {
    pub views: Vec<View>,
    latents: LatentGrid,
    rays: Vec<RayMap>,
    ray_depth: Vec<Image>,
}

impl TrainingScene {
    pub fn new(model: &GsVae, views: Vec<View>) -> Result<Self, NetsError> {
        if views.is_empty() {
            return Err(NetsError::Invalid("training scene has no views".into()));
        }
        let latents = model.encode(&views)?;
        let rays = views
            .iter()
            .map(|v| compute_ray_map_with(&v.camera.intrinsics, &v.camera.pose, model.exec))
            .collect();
        let ray_depth = views
            .iter()
            .map(|v| ray_distance(&v.depth, &v.camera.intrinsics))
            .collect();
        Ok(TrainingScene {
            views,
            latents,
            rays,
            ray_depth,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub weights: LossWeights,
    /// Every `k`-th step trains on a single view (0 disables single-view steps).
    pub single_view_every: usize,
    /// Views per multi-view step.
    pub multi_view: usize,
}

impl Default for DecoderTrainConfig {
    fn default() -> Self {
        DecoderTrainConfig {
            steps: 2000,
            lr: 0.05,
            optimizer: OptimizerKind::Sgd,
            weights: LossWeights::default(),
            single_view_every: 4,
            multi_view: 4,
        }
    }
}

/// Per-step loss record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainStep {
    pub total: f64,
    pub mse: f64,
    pub depth: f64,
    pub views: usize,
}

/// Trains the decoder on rendered-colour MSE (through the renderer's colour
/// and opacity gradients) plus the scale/shift invariant depth loss on each
/// view's decoded depth channel. Scenes are visited round robin; view subsets
/// are drawn from `rng`.
pub fn train_decoder(
    model: &mut GsVae,
    scenes: &[TrainingScene],
    cfg: &DecoderTrainConfig,
    renderer: &Renderer,
    background: &Vector3<f64>,
    rng: &mut impl Rng,
) -> Result<Vec<TrainStep>, NetsError> {
    cfg.weights.validate().map_err(|e| NetsError::Invalid(e.to_string()))?;
    if scenes.is_empty() || cfg.multi_view == 0 {
        return Err(NetsError::Invalid("need at least one scene and multi_view >= 1".into()));
    }
    if cfg.weights.perceptual > 0.0 {
        log::warn!("perceptual loss weight is positive but no perceptual network is installed; term set to 0");
    }
    let mut opt = cfg.optimizer.build(cfg.lr);
    let mut params = model.decoder.params();
    let range = model.range();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let scene = &scenes[step % scenes.len()];
        let n = scene.views.len();
        let single = cfg.single_view_every > 0 && (step + 1) % cfg.single_view_every == 0;
        let chosen: Vec<usize> = if single {
            vec![rng.gen_range(0..n)]
        } else if n <= cfg.multi_view {
            (0..n).collect()
        } else {
            let mut idx = sample_indices(rng, n, cfg.multi_view).into_vec();
            idx.sort_unstable();
            idx
        };
        let latents = LatentGrid::stack(&chosen.iter().map(|&i| scene.latents.view(i)).collect::<Vec<_>>())
            .map_err(|e| NetsError::Shape(e.to_string()))?;
        let cameras: Vec<Camera> = chosen.iter().map(|&i| scene.views[i].camera).collect();
        let rays: Vec<RayMap> = chosen.iter().map(|&i| scene.rays[i].clone()).collect();
        let decoded = model.decode_with_rays(&latents, &cameras, &rays)?;

        let nv = chosen.len() as f64;
        let hw = decoded.input.width * decoded.input.height;
        let mut draw = vec![0.0; decoded.input.pixels() * GAUSSIAN_CHANNELS];
        let (mut mse, mut depth) = (0.0, 0.0);
        if cfg.weights.mse > 0.0 {
            for (k, &i) in chosen.iter().enumerate() {
                let cam = &scene.views[i].camera;
                let g = renderer
                    .loss_backward(
                        &decoded.scene,
                        &cam.intrinsics,
                        &cam.pose,
                        background,
                        &scene.views[i].rgb,
                    )
                    .map_err(|e| NetsError::Shape(format!("view {k}: {e}")))?;
                mse += g.loss / nv;
                let w = cfg.weights.mse / nv;
                for (p, prim) in decoded.scene.primitives.iter().enumerate() {
                    let d = &mut draw[p * GAUSSIAN_CHANNELS..(p + 1) * GAUSSIAN_CHANNELS];
                    for c in 0..3 {
                        let col = prim.color[c];
                        d[channel::COLOR.start + c] += w * g.color[p][c] * col * (1.0 - col);
                    }
                    d[channel::OPACITY] += w * g.opacity_logit[p];
                }
            }
        }
        if cfg.weights.depth > 0.0 {
            for (k, &i) in chosen.iter().enumerate() {
                let a = &decoded.activated[k];
                let pred = Image::from_vec(a.width, a.height, 1, a.pixels.iter().map(|g| g.depth).collect())
                    .map_err(|e| NetsError::Shape(e.to_string()))?;
                // A flat target has no defined alignment and contributes nothing.
                let Ok((l, grad)) = depth_loss_grad(&pred, &scene.ray_depth[i], None) else {
                    continue;
                };
                depth += l / nv;
                let w = cfg.weights.depth / nv;
                for (px, gd) in grad.iter().enumerate() {
                    let idx = (k * hw + px) * GAUSSIAN_CHANNELS + channel::DEPTH;
                    let s = sigmoid(decoded.raw[k].raw()[px * GAUSSIAN_CHANNELS + channel::DEPTH]);
                    draw[idx] += w * gd * range.span() * s * (1.0 - s);
                }
            }
        }
        let total = cfg.weights.mse * mse + cfg.weights.depth * depth;
        if !total.is_finite() || total > DIVERGENCE_LOSS {
            return Err(NetsError::Divergence { step, loss: total });
        }
        curve.push(TrainStep {
            total,
            mse,
            depth,
            views: chosen.len(),
        });
        let mut grads = model.decoder.backward(&decoded.input, &draw, model.exec);
        opt.step(&mut params, &mut grads);
        model.decoder.set_params(&params);
    }
    Ok(curve)
}
