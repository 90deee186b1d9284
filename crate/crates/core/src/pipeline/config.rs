use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{sha256_hex, PipelineError};
use crate::camera::{load_trajectory, Camera, Intrinsics};
use crate::diffusion::SamplerConfig;
use crate::gaussians::DepthRange;
use crate::nets::{DecoderConfig, DecoderTrainConfig, LATENT_FACTOR};
use crate::par::Execution;
use crate::renderer::{RenderSettings, Renderer};
use crate::synthetic::{camera_ring, SceneSpec};

/// Complete run configuration, one TOML table per module.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub camera: CameraConfig,
    pub gaussians: GaussiansConfig,
    pub renderer: RendererConfig,
    pub diffusion: SamplerConfig,
    pub nets: NetsConfig,
    pub pipeline: PipelineConfig,
    /// Directory relative paths are resolved against; not part of the hash.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Camera rig: an explicit trajectory file, or a ring of cameras looking at
/// the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub fov_y: f64,
    pub radius: f64,
    pub elevation: f64,
    pub phase: f64,
    pub arc: f64,
    pub trajectory: Option<String>,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            views: 4,
            width: 32,
            height: 32,
            fov_y: 0.8,
            radius: 3.0,
            elevation: 0.6,
            phase: 0.2,
            arc: 0.7,
            trajectory: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussiansConfig {
    pub near: f64,
    pub far: f64,
}

impl Default for GaussiansConfig {
    fn default() -> Self {
        GaussiansConfig { near: 0.5, far: 8.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RendererConfig {
    pub tile_size: usize,
    pub near: f64,
    pub background: [f64; 3],
}

impl Default for RendererConfig {
    fn default() -> Self {
        RendererConfig {
            tile_size: 16,
            near: 0.01,
            background: [0.1, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetsConfig {
    /// Fusion and decoder weights; a fresh seeded initialisation when absent.
    pub checkpoint: Option<String>,
    pub fusion_key_dim: usize,
    /// Distance at which the initial splat footprint is `decoder.footprint_px`.
    pub footprint_depth: f64,
    pub decoder: DecoderConfig,
    /// Decoder fitting before use; `steps = 0` skips training.
    pub train: DecoderTrainConfig,
}

impl Default for NetsConfig {
    fn default() -> Self {
        NetsConfig {
            checkpoint: None,
            fusion_key_dim: 8,
            footprint_depth: 3.0,
            decoder: DecoderConfig::default(),
            train: DecoderTrainConfig {
                steps: 0,
                ..Default::default()
            },
        }
    }
}

/// A conditioning label and the base colour of its reference scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelConfig {
    pub name: String,
    pub palette: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Encode the context views and decode with the toy GS-VAE.
    #[default]
    Decoder,
    /// Render the ground-truth Gaussians directly.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub execution: Execution,
    pub labels: Vec<LabelConfig>,
    /// Label used when no prompt is given.
    pub prompt: Option<String>,
    pub references_per_label: usize,
    /// Spread of each reference latent in the generation prior.
    pub reference_std: f64,
    pub scene: SceneSpec,
    /// Depth assigned to uncovered pixels of observed views.
    pub background_depth: f64,
    /// Camera indices on a ring of `max(index) + 1` cameras.
    pub context: Vec<usize>,
    pub target: Vec<usize>,
    pub mode: EvalMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let label = |name: &str, palette| LabelConfig {
            name: name.into(),
            palette,
        };
        PipelineConfig {
            execution: Execution::default(),
            labels: vec![
                label("warm", [0.85, 0.45, 0.2]),
                label("cool", [0.2, 0.45, 0.85]),
                label("forest", [0.25, 0.7, 0.3]),
            ],
            prompt: None,
            references_per_label: 2,
            reference_std: 0.05,
            scene: SceneSpec::default(),
            background_depth: 6.0,
            context: vec![0, 2, 4, 6],
            target: vec![1, 3, 5],
            mode: EvalMode::default(),
        }
    }
}

fn check(ok: bool, message: impl FnOnce() -> String) -> Result<(), PipelineError> {
    if ok {
        Ok(())
    } else {
        Err(PipelineError::Config(message()))
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Config = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; `seed` replaces `diffusion.seed`.
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let mut cfg = Config::from_toml(&text).map_err(|e| e.context(&path.display().to_string()))?;
        if let Some(s) = seed {
            cfg.diffusion.seed = s;
        }
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.diffusion.seed = seed;
        self
    }

    /// SHA-256 of the canonical JSON form of every hashed field.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serialises"))
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let c = &self.camera;
        check(c.views >= 1, || "camera.views must be at least 1".into())?;
        check(
            c.width >= LATENT_FACTOR
                && c.height >= LATENT_FACTOR
                && c.width.is_multiple_of(LATENT_FACTOR)
                && c.height.is_multiple_of(LATENT_FACTOR),
            || {
                format!(
                    "camera size {}x{} must be a positive multiple of {LATENT_FACTOR}",
                    c.width, c.height
                )
            },
        )?;
        check(c.fov_y > 0.0 && c.fov_y < PI, || {
            format!("camera.fov_y {} outside (0, pi)", c.fov_y)
        })?;
        check(c.radius > 0.0 && c.radius.is_finite(), || {
            "camera.radius must be positive".into()
        })?;
        check([c.elevation, c.phase, c.arc].iter().all(|v| v.is_finite()), || {
            "camera angles must be finite".into()
        })?;
        self.depth_range()?;
        let r = &self.renderer;
        check(r.tile_size > 0, || "renderer.tile_size must be positive".into())?;
        check(r.near > 0.0, || "renderer.near must be positive".into())?;
        check(r.background.iter().all(|v| (0.0..=1.0).contains(v)), || {
            "renderer.background must lie in [0, 1]".into()
        })?;
        self.diffusion
            .validate()
            .map_err(|e| PipelineError::Config(format!("diffusion: {e}")))?;
        let n = &self.nets;
        check(n.fusion_key_dim > 0, || "nets.fusion_key_dim must be positive".into())?;
        check(n.footprint_depth > 0.0, || {
            "nets.footprint_depth must be positive".into()
        })?;
        check(
            n.decoder.hidden > 0
                && n.decoder.footprint_px > 0.0
                && n.decoder.init_opacity > 0.0
                && n.decoder.init_opacity < 1.0,
            || format!("invalid nets.decoder {:?}", n.decoder),
        )?;
        if n.train.steps > 0 {
            n.train
                .weights
                .validate()
                .map_err(|e| PipelineError::Config(format!("nets.train: {e}")))?;
            check(n.train.lr > 0.0 && n.train.multi_view > 0, || {
                "nets.train needs lr > 0 and multi_view > 0".into()
            })?;
        }
        let p = &self.pipeline;
        check(!p.labels.is_empty(), || "pipeline.labels is empty".into())?;
        for (i, l) in p.labels.iter().enumerate() {
            check(!l.name.is_empty(), || format!("label {i} has an empty name"))?;
            check(p.labels[..i].iter().all(|o| o.name != l.name), || {
                format!("duplicate label {:?}", l.name)
            })?;
            check(l.palette.iter().all(|v| (0.0..=1.0).contains(v)), || {
                format!("label {:?} palette must lie in [0, 1]", l.name)
            })?;
        }
        if let Some(prompt) = &p.prompt {
            self.label_index(Some(prompt))?;
        }
        check(p.references_per_label >= 1, || {
            "pipeline.references_per_label must be at least 1".into()
        })?;
        check(p.reference_std > 0.0, || {
            "pipeline.reference_std must be positive".into()
        })?;
        let s = &p.scene;
        check(s.min_count >= 1 && s.min_count <= s.max_count, || {
            "pipeline.scene needs 1 <= min_count <= max_count".into()
        })?;
        check(
            s.half_extent > 0.0 && s.min_scale > 0.0 && s.min_scale < s.max_scale,
            || "pipeline.scene needs positive extent and 0 < min_scale < max_scale".into(),
        )?;
        check(
            s.min_opacity > 0.0 && s.min_opacity < s.max_opacity && s.max_opacity < 1.0,
            || "pipeline.scene needs 0 < min_opacity < max_opacity < 1".into(),
        )?;
        check(p.background_depth > 0.0, || {
            "pipeline.background_depth must be positive".into()
        })?;
        Ok(())
    }

    pub fn depth_range(&self) -> Result<DepthRange, PipelineError> {
        DepthRange::new(self.gaussians.near, self.gaussians.far)
            .map_err(|e| PipelineError::Config(format!("gaussians: {e}")))
    }

    pub fn intrinsics(&self) -> Result<Intrinsics, PipelineError> {
        Intrinsics::from_fov_y(self.camera.width, self.camera.height, self.camera.fov_y)
            .map_err(|e| PipelineError::Config(format!("camera: {e}")))
    }

    /// `n` ring cameras with the configured geometry.
    pub fn ring(&self, n: usize) -> Result<Vec<Camera>, PipelineError> {
        let c = &self.camera;
        Ok(camera_ring(
            n,
            c.radius,
            c.elevation,
            c.phase,
            c.arc,
            self.intrinsics()?,
        ))
    }

    /// The trajectory file when configured, otherwise `camera.views` ring cameras.
    pub fn cameras(&self) -> Result<Vec<Camera>, PipelineError> {
        match &self.camera.trajectory {
            Some(p) => Ok(load_trajectory(self.resolve(p))?),
            None => self.ring(self.camera.views),
        }
    }

    pub fn renderer(&self) -> Renderer {
        Renderer::new(RenderSettings {
            tile_size: self.renderer.tile_size,
            near: self.renderer.near,
            execution: self.pipeline.execution,
        })
    }

    pub fn background(&self) -> Vector3<f64> {
        Vector3::from(self.renderer.background)
    }

    /// Index of `prompt` (or of the default label) in `pipeline.labels`.
    pub fn label_index(&self, prompt: Option<&str>) -> Result<usize, PipelineError> {
        let labels = &self.pipeline.labels;
        match prompt.or(self.pipeline.prompt.as_deref()) {
            None => Ok(0),
            Some(p) => labels.iter().position(|l| l.name == p).ok_or_else(|| {
                let known: Vec<&str> = labels.iter().map(|l| l.name.as_str()).collect();
                PipelineError::Validation(format!("unknown prompt {p:?}; known labels: {}", known.join(", ")))
            }),
        }
    }
}
