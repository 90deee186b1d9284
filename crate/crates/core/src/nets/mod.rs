//! Desk-scale networks: an analytic mixture denoiser, a tiny MLP with
//! hand-written gradients and its DSM training loop, a fixed RGB-D codec,
//! cross-view fusion, and the per-pixel Gaussian decoder with its training loop.

pub mod checkpoint;
pub mod codec;
mod decoder;
mod dsm;
mod fusion;
mod mixture;
mod mlp;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, NamedArray};
pub use codec::{ToyCodec, LATENT_CHANNELS, LATENT_FACTOR};
pub use decoder::{decode_gaussians, footprint_log_scale, DecoderConfig, DecoderInput, ToyDecoder, DECODER_INPUTS};
pub use dsm::{smooth, train_dsm, DsmConfig, TinyDenoiser, DIVERGENCE_LOSS};
pub use fusion::{fuse_views, FusionLayer, FUSION_INPUTS};
pub use mixture::{analytic_denoise, ConditionalMixture, MixtureComponent, MixtureDenoiser, MixtureSpec};
pub use mlp::{TinyNet, Trace};
pub use optim::{clip_grad_norm, Adam, Optimizer, OptimizerKind, Sgd, CLIP_NORM};
pub use train::{train_decoder, Decoded, DecoderTrainConfig, GsVae, TrainStep, TrainingScene};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NetsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(String),
}
