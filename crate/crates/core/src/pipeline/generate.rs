use std::path::Path;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{rng_stream, write_renders, Config, Manifest, Outputs, PipelineError};
use crate::camera::{compute_ray_map_with, format_trajectory, Camera};
use crate::diffusion::{label_embedding, sample, Conditioning, LatentGrid};
use crate::gaussians::{write_ply, GaussianScene};
use crate::nets::{
    footprint_log_scale, train_decoder, Checkpoint, ConditionalMixture, FusionLayer, GsVae, MixtureSpec, ToyCodec,
    ToyDecoder, TrainStep, TrainingScene, LATENT_CHANNELS, LATENT_FACTOR,
};
use crate::synthetic::{observe, random_scene, SceneSpec, View};

const STREAM_MODEL: u64 = 1;
const STREAM_REFERENCES: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_SAMPLER: u64 = 4;
pub(crate) const STREAM_EVAL_SCENE: u64 = 5;

#[derive(Debug, Clone)]
pub struct GenerateOutcome {
    pub latents: LatentGrid,
    pub scene: GaussianScene,
    pub manifest: Manifest,
}

/// The toy GS-VAE from the configured checkpoint, or freshly initialised
/// from the run seed.
pub(crate) fn build_model(cfg: &Config, cameras: &[Camera]) -> Result<GsVae, PipelineError> {
    let codec = ToyCodec::new(LATENT_FACTOR, cfg.depth_range()?);
    let exec = cfg.pipeline.execution;
    if let Some(path) = &cfg.nets.checkpoint {
        let path = cfg.resolve(path);
        let ckpt = Checkpoint::load(&path).map_err(|e| match e {
            crate::nets::NetsError::Io(m) => PipelineError::Io {
                path: path.display().to_string(),
                message: m,
            },
            other => PipelineError::Validation(format!("{}: {other}", path.display())),
        })?;
        return Ok(GsVae {
            codec,
            fusion: FusionLayer::from_checkpoint(&ckpt)?,
            decoder: ToyDecoder::from_checkpoint(&ckpt)?,
            exec,
        });
    }
    let mut rng = rng_stream(cfg.diffusion.seed, STREAM_MODEL);
    let fx = cameras.first().map(|c| c.intrinsics.fx).unwrap_or(1.0);
    let n = &cfg.nets;
    let log_scale = footprint_log_scale(fx, n.footprint_depth, n.decoder.footprint_px);
    Ok(GsVae {
        codec,
        fusion: FusionLayer::new(n.fusion_key_dim, &mut rng),
        decoder: ToyDecoder::new(&n.decoder, log_scale, &mut rng)?,
        exec,
    })
}

/// Fits the decoder on `scenes` when training is configured; returns the loss curve.
pub(crate) fn fit_decoder(
    cfg: &Config,
    model: &mut GsVae,
    scenes: Vec<Vec<View>>,
) -> Result<Vec<TrainStep>, PipelineError> {
    if cfg.nets.train.steps == 0 {
        return Ok(Vec::new());
    }
    let scenes = scenes
        .into_iter()
        .map(|views| TrainingScene::new(model, views))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rng = rng_stream(cfg.diffusion.seed, STREAM_TRAIN);
    Ok(train_decoder(
        model,
        &scenes,
        &cfg.nets.train,
        &cfg.renderer(),
        &cfg.background(),
        &mut rng,
    )?)
}

pub(crate) fn save_checkpoint(model: &GsVae, out: &mut Outputs) -> Result<(), PipelineError> {
    let mut ckpt = Checkpoint::default();
    model.fusion.to_checkpoint(&mut ckpt)?;
    model.decoder.to_checkpoint(&mut ckpt)?;
    let mut bytes = Vec::new();
    ckpt.write_to(&mut bytes)
        .map_err(|e| PipelineError::Validation(format!("checkpoint: {e}")))?;
    out.write("decoder.ckpt", &bytes)
}

pub(crate) fn loss_curve_csv(curve: &[TrainStep]) -> String {
    let mut s = String::from("step,total,mse,depth,views\n");
    for (i, t) in curve.iter().enumerate() {
        s.push_str(&format!("{i},{},{},{},{}\n", t.total, t.mse, t.depth, t.views));
    }
    s
}

fn check_cameras(cameras: &[Camera]) -> Result<(), PipelineError> {
    let first = cameras
        .first()
        .ok_or_else(|| PipelineError::Validation("trajectory has no cameras".into()))?;
    let (w, h) = (first.intrinsics.width, first.intrinsics.height);
    if w % LATENT_FACTOR != 0 || h % LATENT_FACTOR != 0 {
        return Err(PipelineError::Validation(format!(
            "camera size {w}x{h} is not a multiple of the latent factor {LATENT_FACTOR}"
        )));
    }
    if let Some(i) = cameras
        .iter()
        .position(|c| (c.intrinsics.width, c.intrinsics.height) != (w, h))
    {
        return Err(PipelineError::Validation(format!(
            "camera {i} is {}x{}, camera 0 is {w}x{h}",
            cameras[i].intrinsics.width, cameras[i].intrinsics.height
        )));
    }
    Ok(())
}

/// Reference scenes per label, observed from `cameras`.
fn reference_views(cfg: &Config, cameras: &[Camera], rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<View>>> {
    let renderer = cfg.renderer();
    let bg = cfg.background();
    let p = &cfg.pipeline;
    p.labels
        .iter()
        .map(|label| {
            let spec = SceneSpec {
                palette: Some(label.palette),
                ..p.scene.clone()
            };
            (0..p.references_per_label)
                .map(|_| {
                    let scene = random_scene(rng, &spec);
                    observe(&renderer, &scene, cameras, &bg, p.background_depth)
                })
                .collect()
        })
        .collect()
}

/// Text-and-pose conditioned generation: samples multi-view latents from a
/// label-conditional prior over encoded reference scenes, then fuses,
/// decodes, lifts, merges and renders them.
///
/// Writes `view_XX.png`, `view_XX_depth.pfm`, `scene.ply`, `trajectory.txt`
/// and `manifest.json` to `out_dir`. A `prompt` replaces `pipeline.prompt`
/// and is part of the recorded configuration.
pub fn generate(cfg: &Config, prompt: Option<&str>, out_dir: &Path) -> Result<GenerateOutcome, PipelineError> {
    let mut cfg = cfg.clone();
    if let Some(p) = prompt {
        cfg.pipeline.prompt = Some(p.to_string());
    }
    let cfg = &cfg;
    let label = cfg.label_index(None)?;
    let mut out = Outputs::create(out_dir)?;
    let cameras = cfg.cameras()?;
    check_cameras(&cameras)?;
    let (n, w, h) = (cameras.len(), cameras[0].intrinsics.width, cameras[0].intrinsics.height);
    let shape = [n, h / LATENT_FACTOR, w / LATENT_FACTOR, LATENT_CHANNELS];
    let mut model = build_model(cfg, &cameras)?;

    let mut rng = rng_stream(cfg.diffusion.seed, STREAM_REFERENCES);
    let references = out.time("references", || reference_views(cfg, &cameras, &mut rng));
    let curve = out.time("train", || {
        fit_decoder(cfg, &mut model, references.iter().flatten().cloned().collect())
    })?;
    let prior = out.time("prior", || -> Result<_, PipelineError> {
        let specs = references
            .iter()
            .map(|views| {
                let means = views
                    .iter()
                    .map(|v| Ok(model.encode(v)?.as_slice().to_vec()))
                    .collect::<Result<Vec<_>, PipelineError>>()?;
                Ok(MixtureSpec::uniform(means, cfg.pipeline.reference_std)?)
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        Ok(ConditionalMixture::from_labels(specs)?)
    })?;

    let exec = cfg.pipeline.execution;
    let latent_intr = cameras[0].intrinsics.downscaled(LATENT_FACTOR)?;
    let poses = cameras
        .iter()
        .map(|c| compute_ray_map_with(&latent_intr, &c.pose, exec))
        .collect();
    let cond = Conditioning::new(label_embedding(label, cfg.pipeline.labels.len()), poses);
    let schedule = cfg.diffusion.schedule()?;
    let guidance = cfg.diffusion.guidance();
    let mut rng = rng_stream(cfg.diffusion.seed, STREAM_SAMPLER);
    let latents = out
        .time("sample", || {
            sample(&prior, &cond, &schedule, &guidance, shape, &mut rng, exec)
        })
        .map_err(|e| PipelineError::from(e).context("sampling"))?;

    let decoded = out.time("decode", || model.decode(&latents, &cameras))?;
    let scene = decoded.scene;
    if scene.len() != n * h * w {
        return Err(PipelineError::Validation(format!(
            "decoded {} primitives, expected N*H*W = {}",
            scene.len(),
            n * h * w
        )));
    }

    let renderer = cfg.renderer();
    let bg = cfg.background();
    let renders = out.time("render", || {
        cameras
            .iter()
            .map(|c| renderer.render(&scene, &c.intrinsics, &c.pose, &bg))
            .collect::<Vec<_>>()
    });
    let start = Instant::now();
    write_renders(&mut out, "view", &renders)?;
    write_ply(out.file("scene.ply"), &scene)?;
    out.write("trajectory.txt", format_trajectory(&cameras).as_bytes())?;
    if !curve.is_empty() {
        out.write("train_loss.csv", loss_curve_csv(&curve).as_bytes())?;
        save_checkpoint(&model, &mut out)?;
    }
    out.stop("write", start);

    let details = json!({
        "prompt": cfg.pipeline.labels[label].name,
        "views": n,
        "width": w,
        "height": h,
        "latent_shape": shape,
        "primitives": scene.len(),
        "sampler_steps": schedule.steps(),
        "train_steps": curve.len(),
    });
    let manifest = out.finish("generate", cfg, details)?;
    Ok(GenerateOutcome {
        latents,
        scene,
        manifest,
    })
}
