//! End-to-end commands: generation, reconstruction evaluation, rendering and
//! depth evaluation.
//!
//! Every command is a pure function of its configuration, seed and input
//! files. Outputs go to one directory together with a `manifest.json` that
//! records the resolved configuration, its hash, output file hashes and
//! per-stage wall time.

mod config;
mod eval_depth;
mod generate;
mod reconstruct;
mod render;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{
    CameraConfig, Config, EvalMode, GaussiansConfig, LabelConfig, NetsConfig, PipelineConfig, RendererConfig,
};
pub use eval_depth::eval_depth;
pub use generate::{generate, GenerateOutcome};
pub use reconstruct::{constant_depth_baseline, reconstruct, ReconstructOutcome};
pub use render::render_trajectory;

use crate::camera::CameraError;
use crate::diffusion::DiffusionError;
use crate::gaussians::{GaussianError, PlyError};
use crate::imaging::{Image, ImageError};
use crate::metrics::MetricsError;
use crate::nets::NetsError;
use crate::renderer::RenderOutput;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl PipelineError {
    /// Process exit code: 2 for invalid input, 3 for divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Validation(_) => 2,
            PipelineError::Divergence(_) => 3,
            PipelineError::Io { .. } => 1,
        }
    }

    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        PipelineError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    pub(crate) fn context(self, ctx: &str) -> Self {
        match self {
            PipelineError::Config(m) => PipelineError::Config(format!("{ctx}: {m}")),
            PipelineError::Validation(m) => PipelineError::Validation(format!("{ctx}: {m}")),
            PipelineError::Divergence(m) => PipelineError::Divergence(format!("{ctx}: {m}")),
            io => io,
        }
    }
}

impl From<NetsError> for PipelineError {
    fn from(e: NetsError) -> Self {
        match e {
            NetsError::Divergence { .. } => PipelineError::Divergence(e.to_string()),
            NetsError::Io(m) => PipelineError::Io {
                path: "checkpoint".into(),
                message: m,
            },
            other => PipelineError::Validation(other.to_string()),
        }
    }
}

impl From<DiffusionError> for PipelineError {
    fn from(e: DiffusionError) -> Self {
        match e {
            DiffusionError::Divergence(_) => PipelineError::Divergence(e.to_string()),
            other => PipelineError::Validation(other.to_string()),
        }
    }
}

impl From<CameraError> for PipelineError {
    fn from(e: CameraError) -> Self {
        match e {
            CameraError::Io { path, message } => PipelineError::Io { path, message },
            other => PipelineError::Validation(other.to_string()),
        }
    }
}

impl From<PlyError> for PipelineError {
    fn from(e: PlyError) -> Self {
        match e {
            PlyError::Io { path, source } => PipelineError::Io {
                path,
                message: source.to_string(),
            },
            other => PipelineError::Validation(other.to_string()),
        }
    }
}

impl From<ImageError> for PipelineError {
    fn from(e: ImageError) -> Self {
        match e {
            ImageError::Io { path, source } => PipelineError::Io {
                path,
                message: source.to_string(),
            },
            other => PipelineError::Validation(other.to_string()),
        }
    }
}

impl From<GaussianError> for PipelineError {
    fn from(e: GaussianError) -> Self {
        PipelineError::Validation(e.to_string())
    }
}

impl From<MetricsError> for PipelineError {
    fn from(e: MetricsError) -> Self {
        PipelineError::Validation(e.to_string())
    }
}

/// Independent RNG stream `stream` derived from the run seed.
pub(crate) fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: Config,
    pub outputs: Vec<OutputRecord>,
    pub timings: Vec<StageTiming>,
    pub details: serde_json::Value,
}

/// Output directory that remembers every file written through it.
pub(crate) struct Outputs {
    root: PathBuf,
    files: Vec<String>,
    timings: Vec<StageTiming>,
}

impl Outputs {
    pub fn create(root: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(root).map_err(|e| PipelineError::io(root, e))?;
        Ok(Outputs {
            root: root.to_path_buf(),
            files: Vec::new(),
            timings: Vec::new(),
        })
    }

    /// Path for a new output file, recorded for the manifest.
    pub fn file(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.file(name);
        fs::write(&path, bytes).map_err(|e| PipelineError::io(&path, e))
    }

    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.stop(stage, start);
        out
    }

    /// Records a stage that started at `start`.
    pub fn stop(&mut self, stage: &str, start: Instant) {
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
    }

    /// Hashes every recorded file and writes the manifest.
    pub fn finish(self, command: &str, config: &Config, details: serde_json::Value) -> Result<Manifest, PipelineError> {
        let mut outputs = Vec::with_capacity(self.files.len());
        for name in &self.files {
            let path = self.root.join(name);
            let bytes = fs::read(&path).map_err(|e| PipelineError::io(&path, e))?;
            outputs.push(OutputRecord {
                path: name.clone(),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            });
        }
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.diffusion.seed,
            config_hash: config.hash(),
            config: config.clone(),
            outputs,
            timings: self.timings,
            details,
        };
        let path = self.root.join(MANIFEST);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        fs::write(&path, json).map_err(|e| PipelineError::io(&path, e))?;
        Ok(manifest)
    }
}

/// Pixels with finite, positive ground-truth depth.
pub(crate) fn valid_depth_mask(depth: &Image) -> Vec<bool> {
    depth.as_slice().iter().map(|d| d.is_finite() && *d > 0.0).collect()
}

/// Writes `{prefix}_XX.png` and `{prefix}_XX_depth.pfm` per render.
pub(crate) fn write_renders(out: &mut Outputs, prefix: &str, renders: &[RenderOutput]) -> Result<(), PipelineError> {
    for (i, r) in renders.iter().enumerate() {
        r.rgb.write_png(out.file(&format!("{prefix}_{i:02}.png")))?;
        r.depth.write_pfm(out.file(&format!("{prefix}_{i:02}_depth.pfm")))?;
    }
    Ok(())
}
